"""Watermark keys and messages.

A key is a set of K direction vectors in the N-dimensional feature space of
the decoding encoder; each bit of a message is recovered as the sign of the
projection of the feature vector onto one direction.  Messages live in
{-1, +1}^K internally; the 0/1 view used for serialization is (x + 1) / 2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, InvalidInputError, KeyFormatError

KEY_FORMAT_VERSION = 1

SCHEMES = ("canonical-basis", "random-orthonormal")

DEFAULT_MARGIN = 5.0


@dataclass(frozen=True)
class Message:
    """A k-bit payload with entries in {-1, +1}."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int8)
        if v.ndim != 1 or v.size == 0:
            raise InvalidInputError("message must be a non-empty 1-D array")
        if not np.all(np.abs(v) == 1):
            raise InvalidInputError("message entries must be -1 or +1")
        object.__setattr__(self, "values", v)

    @property
    def bits(self) -> int:
        return int(self.values.size)

    def to_binary(self) -> str:
        """0/1 string view, e.g. '0110...'."""
        return "".join("1" if x > 0 else "0" for x in self.values)

    @classmethod
    def from_binary(cls, text: str) -> "Message":
        if not text or any(c not in "01" for c in text):
            raise InvalidInputError(f"not a 0/1 bit string: {text!r}")
        return cls(np.array([1 if c == "1" else -1 for c in text], dtype=np.int8))


def random_message(bits: int, seed: int) -> Message:
    if bits < 1:
        raise InvalidInputError("message needs at least 1 bit")
    rng = np.random.default_rng(seed)
    return Message(rng.choice(np.array([-1, 1], dtype=np.int8), size=bits))


def _scheme_vectors(scheme: str, seed: int, bits: int, feature_dim: int) -> np.ndarray:
    if scheme == "canonical-basis":
        return np.eye(bits, feature_dim, dtype=np.float64)
    if scheme == "random-orthonormal":
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((feature_dim, bits))
        q, r = np.linalg.qr(a)
        # Fix the sign convention so the factorization is unique.
        q = q * np.sign(np.diag(r))
        return np.ascontiguousarray(q.T)
    raise KeyFormatError(f"unknown scheme {scheme!r}; known: {', '.join(SCHEMES)}")


@dataclass(frozen=True)
class WatermarkKey:
    """K unit direction vectors (rows) in R^N plus the hinge margin."""

    bits: int
    feature_dim: int
    vectors: np.ndarray
    scheme: str
    seed: int
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if self.bits < 1:
            raise InvalidInputError("key needs at least 1 bit")
        if self.bits > self.feature_dim:
            raise CapacityError(
                f"{self.bits} bits exceed feature dimension {self.feature_dim}"
            )
        if self.scheme not in SCHEMES:
            raise KeyFormatError(
                f"unknown scheme {self.scheme!r}; known: {', '.join(SCHEMES)}"
            )
        if self.margin < 0:
            raise InvalidInputError("margin must be non-negative")
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.shape != (self.bits, self.feature_dim):
            raise InvalidInputError(
                f"vectors shape {v.shape} != ({self.bits}, {self.feature_dim})"
            )
        norms = np.linalg.norm(v, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise InvalidInputError("direction vectors must have unit norm")
        object.__setattr__(self, "vectors", v)


def generate_key(
    bits: int,
    feature_dim: int,
    scheme: str = "canonical-basis",
    seed: int = 0,
    margin: float = DEFAULT_MARGIN,
) -> WatermarkKey:
    vectors = _scheme_vectors(scheme, seed, bits, feature_dim)
    return WatermarkKey(
        bits=bits,
        feature_dim=feature_dim,
        vectors=vectors,
        scheme=scheme,
        seed=seed,
        margin=margin,
    )


def save_key(key: WatermarkKey, path: str | Path) -> None:
    payload = {
        "format_version": KEY_FORMAT_VERSION,
        "kind": "watermark-key",
        "bits": key.bits,
        "feature_dim": key.feature_dim,
        "scheme": key.scheme,
        "seed": key.seed,
        "margin": key.margin,
        "vectors": key.vectors.tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_key(path: str | Path) -> WatermarkKey:
    """Parse a key file; the stored matrix is authoritative.

    When scheme and seed are present the matrix is cross-checked against
    regeneration so silent corruption or generator drift is caught rather
    than decoded against.
    """
    try:
        payload = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, OSError) as exc:
        raise KeyFormatError(f"unreadable key file {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise KeyFormatError("key file must hold a JSON object")
    for field in ("format_version", "bits", "feature_dim", "scheme", "seed", "vectors"):
        if field not in payload:
            raise KeyFormatError(f"key file missing field {field!r}")
    if payload["format_version"] != KEY_FORMAT_VERSION:
        raise KeyFormatError(
            f"unsupported key format_version {payload['format_version']!r}"
        )
    try:
        vectors = np.asarray(payload["vectors"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise KeyFormatError(f"field 'vectors' is not numeric: {exc}") from exc
    try:
        key = WatermarkKey(
            bits=int(payload["bits"]),
            feature_dim=int(payload["feature_dim"]),
            vectors=vectors,
            scheme=str(payload["scheme"]),
            seed=int(payload["seed"]),
            margin=float(payload.get("margin", DEFAULT_MARGIN)),
        )
    except InvalidInputError as exc:
        # capacity violations keep their own type; anything else about the
        # stored contents is a file-format problem
        raise KeyFormatError(f"invalid key file contents: {exc}") from exc
    regen = _scheme_vectors(key.scheme, key.seed, key.bits, key.feature_dim)
    if not np.allclose(key.vectors, regen, atol=1e-12, rtol=0.0):
        raise KeyFormatError(
            "field 'vectors' does not match regeneration from scheme and seed"
        )
    return key
