"""Key generation, message handling, and serialization round-trips."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqwm.errors import CapacityError, InvalidInputError, KeyFormatError
from freqwm.keys import (
    DEFAULT_MARGIN,
    Message,
    WatermarkKey,
    generate_key,
    load_key,
    random_message,
    save_key,
)


def test_canonical_basis_is_identity_rows():
    key = generate_key(48, 128)
    want = np.eye(48, 128)
    assert np.array_equal(key.vectors, want)


def test_single_bit_single_dim():
    key = generate_key(1, 1)
    assert key.vectors.shape == (1, 1)
    assert key.vectors[0, 0] == 1.0


def test_orthonormal_gram_matrix():
    key = generate_key(48, 128, scheme="random-orthonormal", seed=3)
    gram = key.vectors @ key.vectors.T
    assert np.abs(gram - np.eye(48)).max() < 1e-6


def test_orthonormal_full_rank_square():
    key = generate_key(16, 16, scheme="random-orthonormal", seed=1)
    gram = key.vectors @ key.vectors.T
    assert np.abs(gram - np.eye(16)).max() < 1e-9


def test_orthonormal_deterministic_per_seed():
    a = generate_key(8, 32, scheme="random-orthonormal", seed=5)
    b = generate_key(8, 32, scheme="random-orthonormal", seed=5)
    c = generate_key(8, 32, scheme="random-orthonormal", seed=6)
    assert np.array_equal(a.vectors, b.vectors)
    assert not np.array_equal(a.vectors, c.vectors)


def test_capacity_guard():
    with pytest.raises(CapacityError):
        generate_key(129, 128)


def test_unknown_scheme_rejected():
    with pytest.raises(KeyFormatError):
        generate_key(4, 8, scheme="hadamard")


def test_negative_margin_rejected():
    with pytest.raises(InvalidInputError):
        generate_key(4, 8, margin=-1.0)


def test_non_unit_vectors_rejected():
    vecs = np.eye(2, 4) * 2.0
    with pytest.raises(InvalidInputError):
        WatermarkKey(bits=2, feature_dim=4, vectors=vecs, scheme="canonical-basis", seed=0)


def test_random_message_is_balanced():
    # mean of 10^4 bipolar draws should be near zero
    msg = random_message(10_000, seed=42)
    assert abs(float(msg.values.astype(np.float64).mean())) < 0.05


def test_random_message_deterministic():
    assert np.array_equal(random_message(64, seed=9).values, random_message(64, seed=9).values)


def test_message_binary_roundtrip():
    msg = Message(np.array([1, -1, -1, 1, 1], dtype=np.int8))
    assert msg.to_binary() == "10011"
    back = Message.from_binary("10011")
    assert np.array_equal(back.values, msg.values)


def test_message_rejects_zeros():
    with pytest.raises(InvalidInputError):
        Message(np.array([1, 0, -1]))


def test_message_rejects_empty():
    with pytest.raises(InvalidInputError):
        Message(np.array([], dtype=np.int8))


def test_from_binary_rejects_other_chars():
    with pytest.raises(InvalidInputError):
        Message.from_binary("10a1")


@settings(max_examples=30, deadline=None)
@given(bits=st.integers(min_value=1, max_value=64), seed=st.integers(min_value=0, max_value=10**6))
def test_binary_roundtrip_property(bits, seed):
    msg = random_message(bits, seed)
    assert np.array_equal(Message.from_binary(msg.to_binary()).values, msg.values)


def test_save_load_roundtrip(tmp_path):
    key = generate_key(12, 64, scheme="random-orthonormal", seed=7, margin=3.5)
    path = tmp_path / "key.json"
    save_key(key, path)
    back = load_key(path)
    assert back.bits == 12
    assert back.feature_dim == 64
    assert back.scheme == "random-orthonormal"
    assert back.seed == 7
    assert back.margin == 3.5
    assert np.array_equal(back.vectors, key.vectors)


def test_load_missing_field_names_it(tmp_path):
    key = generate_key(4, 8)
    path = tmp_path / "key.json"
    save_key(key, path)
    payload = json.loads(path.read_text())
    del payload["vectors"]
    path.write_text(json.dumps(payload))
    with pytest.raises(KeyFormatError, match="vectors"):
        load_key(path)


def test_load_rejects_tampered_matrix(tmp_path):
    key = generate_key(4, 8, scheme="random-orthonormal", seed=2)
    path = tmp_path / "key.json"
    save_key(key, path)
    payload = json.loads(path.read_text())
    payload["vectors"][0][0] += 0.25
    path.write_text(json.dumps(payload))
    with pytest.raises(KeyFormatError):
        load_key(path)


def test_load_rejects_wrong_version(tmp_path):
    key = generate_key(4, 8)
    path = tmp_path / "key.json"
    save_key(key, path)
    payload = json.loads(path.read_text())
    payload["format_version"] = 999
    path.write_text(json.dumps(payload))
    with pytest.raises(KeyFormatError):
        load_key(path)


def test_load_rejects_truncated_file(tmp_path):
    path = tmp_path / "key.json"
    path.write_text('{"format_version": 1, "bits": 4')
    with pytest.raises(KeyFormatError):
        load_key(path)


def test_load_overcapacity_key(tmp_path):
    # a hand-built file claiming more bits than dimensions must not load
    payload = {
        "format_version": 1,
        "kind": "watermark-key",
        "bits": 9,
        "feature_dim": 8,
        "scheme": "canonical-basis",
        "seed": 0,
        "margin": DEFAULT_MARGIN,
        "vectors": np.eye(9, 8).tolist(),
    }
    path = tmp_path / "key.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(CapacityError):
        load_key(path)


def test_default_margin_value():
    assert generate_key(4, 8).margin == DEFAULT_MARGIN == 5.0
