"""Backend behavior: registry, codecs, encoders, perceptual, regeneration."""

import numpy as np
import pytest
import torch

import freqwm.backends as B
from freqwm.errors import InvalidInputError, RegistryError
from freqwm.images import synthetic_corpus
from freqwm.metrics import psnr


def central_diff(f, x: torch.Tensor, idx, h: float = 1e-5) -> float:
    hi = x.clone()
    lo = x.clone()
    hi.view(-1)[idx] += h
    lo.view(-1)[idx] -= h
    return (float(f(hi)) - float(f(lo))) / (2 * h)


# -- registry ---------------------------------------------------------------


def test_available_backends():
    assert B.available("latent-codec") == ["identity", "tiny-ae"]
    assert B.available("feature-encoder") == ["patch-proj-128", "patch-proj-64"]
    assert "l2-smooth" in B.available("perceptual")
    assert B.available("regeneration") == ["smoothed-noise", "tiny-ae"]


def test_unknown_kind_rejected():
    with pytest.raises(RegistryError, match="latent-codec"):
        B.available("codec")


def test_unknown_name_lists_alternatives():
    with pytest.raises(RegistryError, match="identity"):
        B.get_backend("latent-codec", "vae-gan")


def test_get_backend_caches_instance():
    a = B.get_backend("feature-encoder", "patch-proj-64")
    b = B.get_backend("feature-encoder", "patch-proj-64")
    assert a is b


def test_register_hook():
    class Stub:
        name = "stub"

    B.register("perceptual", "stub", Stub)
    try:
        assert isinstance(B.get_backend("perceptual", "stub"), Stub)
    finally:
        B._FACTORIES.pop(("perceptual", "stub"))
        B._INSTANCES.pop(("perceptual", "stub"), None)


def test_register_unknown_kind():
    with pytest.raises(RegistryError):
        B.register("optimizer", "adam", object)


# -- identity codec ----------------------------------------------------------


def test_identity_codec_roundtrip():
    codec = B.IdentityCodec()
    img = torch.rand(3, 16, 16)
    assert codec.encode(img) is img
    assert codec.decode(img) is img
    assert codec.latent_shape((3, 16, 16)) == (3, 16, 16)


def test_identity_codec_gradient_is_one():
    codec = B.IdentityCodec()
    x = torch.rand(3, 4, 4, dtype=torch.float64, requires_grad=True)
    codec.decode(codec.encode(x)).sum().backward()
    assert torch.allclose(x.grad, torch.ones_like(x))


# -- tiny-ae codec -----------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_ae():
    return B.get_backend("latent-codec", "tiny-ae")


def test_tiny_ae_latent_shape(tiny_ae):
    assert tiny_ae.latent_shape((3, 64, 64)) == (4, 8, 8)
    with pytest.raises(InvalidInputError):
        tiny_ae.latent_shape((3, 60, 64))
    with pytest.raises(InvalidInputError):
        tiny_ae.latent_shape((1, 64, 64))


def test_tiny_ae_reconstruction_quality(tiny_ae):
    corpus = synthetic_corpus(32, 64, seed=202401)
    vals = []
    for img in corpus:
        recon = tiny_ae.decode(tiny_ae.encode(img))
        vals.append(float(psnr(img, recon)))
    assert sum(vals) / len(vals) >= 22.0


def test_tiny_ae_decoder_output_range(tiny_ae):
    z = torch.randn(4, 8, 8) * 10.0
    out = tiny_ae.decode(z)
    assert float(out.min()) >= 0.0
    assert float(out.max()) <= 1.0


def test_tiny_ae_reload_bit_identical(tiny_ae, tmp_path):
    path = tmp_path / "ae.pt"
    tiny_ae.save(path)
    again = B.TinyAECodec.load(path)
    img = synthetic_corpus(1, 64, seed=9)[0]
    a = tiny_ae.encode(img)
    b = again.encode(img)
    assert torch.equal(a, b)
    assert torch.equal(tiny_ae.decode(a), again.decode(b))


def test_tiny_ae_training_deterministic():
    corpus = synthetic_corpus(16, 32, seed=1)
    a = B.train_tiny_ae(corpus, seed=5, steps=3)
    b = B.train_tiny_ae(corpus, seed=5, steps=3)
    img = corpus[0]
    assert torch.equal(a.encode(img), b.encode(img))


def test_tiny_ae_rejects_small_corpus():
    with pytest.raises(InvalidInputError):
        B.train_tiny_ae(synthetic_corpus(8, 32, seed=1))


def test_tiny_ae_encode_gradient_matches_fd(tiny_ae):
    codec = tiny_ae.double()
    img = synthetic_corpus(1, 64, seed=10)[0].double()
    target = torch.randn(4, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))

    def f(x):
        return (codec.encode(x) * target).sum()

    x = img.clone().requires_grad_(True)
    f(x).backward()
    rng = np.random.default_rng(1)
    for idx in rng.choice(img.numel(), size=8, replace=False):
        fd = central_diff(f, img, int(idx))
        an = float(x.grad.view(-1)[int(idx)])
        assert an == pytest.approx(fd, rel=1e-3, abs=1e-7)


# -- patch-proj encoder -------------------------------------------------------


@pytest.fixture(scope="module")
def encoder():
    return B.get_backend("feature-encoder", "patch-proj-64")


def test_encoder_shape_and_determinism(encoder):
    img = synthetic_corpus(1, 64, seed=2)[0]
    a = encoder.extract(img)
    b = encoder.extract(img.clone())
    assert a.shape == (64,)
    assert torch.equal(a, b)


def test_encoder_same_seed_same_weights():
    a = B.PatchProjEncoder(64)
    b = B.PatchProjEncoder(64)
    img = synthetic_corpus(1, 64, seed=3)[0]
    assert torch.equal(a.extract(img), b.extract(img))


def test_encoder_input_validation(encoder):
    with pytest.raises(InvalidInputError):
        encoder.extract(torch.rand(1, 64, 64))
    with pytest.raises(InvalidInputError):
        B.PatchProjEncoder(0)
    with pytest.raises(InvalidInputError):
        B.PatchProjEncoder(512)  # wider than the pooled activation


def test_encoder_whitening_matches_reference_oracle(encoder):
    # replay the seeded reference stream and verify the head delivers
    # zero-mean, identity-covariance components on that sample
    gen = torch.Generator().manual_seed(encoder.seed)
    for cin, cout in zip(encoder._CHANNELS[:-1], encoder._CHANNELS[1:]):
        torch.randn(cout, cin, 5, 5, generator=gen, dtype=torch.float64)
    n, chunk, size = encoder._FIT_N, encoder._FIT_CHUNK, encoder._FIT_SIZE
    proj, mean = encoder._proj, encoder._mean
    total = torch.zeros(64, dtype=torch.float64)
    outer = torch.zeros(64, 64, dtype=torch.float64)
    with torch.no_grad():
        for _ in range(n // chunk):
            batch = torch.rand(chunk, 3, size, size, generator=gen, dtype=torch.float64)
            f = (encoder._pooled(batch) - mean) @ proj.T
            total += f.sum(dim=0)
            outer += f.T @ f
    comp_mean = total / n
    comp_cov = outer / n - torch.outer(comp_mean, comp_mean)
    assert float(comp_mean.abs().max()) < 1e-8
    assert float((comp_cov - torch.eye(64, dtype=torch.float64)).abs().max()) < 1e-8


def test_encoder_decorrelated_on_fresh_noise(encoder):
    # held-out noise images: sample correlations stay at the noise floor
    gen = torch.Generator().manual_seed(31337)
    feats = torch.stack(
        [encoder.extract(torch.rand(3, 64, 64, generator=gen)) for _ in range(300)]
    )
    corr = np.corrcoef(feats.numpy().T)
    off = np.abs(corr[~np.eye(64, dtype=bool)])
    assert float(off.mean()) < 0.08


def test_encoder_brightness_contrast_invariance(encoder):
    # affine pixel maps that avoid clipping cancel in the normalization; the
    # epsilon guarding the divide leaves a ~1e-6 relative residue under scaling
    img = 0.5 + 0.3 * (synthetic_corpus(1, 64, seed=4)[0].double() - 0.5)
    scaled = 0.9 * img
    shifted = img + 0.05
    base = encoder.extract(img)
    scale = float(base.abs().max())
    assert float((encoder.extract(scaled) - base).abs().max()) < 1e-4 * scale
    assert float((encoder.extract(shifted) - base).abs().max()) < 1e-9 * scale


def test_encoder_ignores_out_of_band_content(encoder):
    img = synthetic_corpus(1, 64, seed=5)[0].double()
    spec = torch.fft.fft2(img)
    # wavenumber 20 is far outside the +-3 band limit
    spec[:, 20, 20] += 50.0
    spec[:, 44, 44] += 50.0  # conjugate slot keeps the grid real
    poked = torch.fft.ifft2(spec).real
    a = encoder.extract(img)
    b = encoder.extract(poked)
    assert float((a - b).abs().max()) < 1e-6


def test_encoder_responds_in_band(encoder):
    img = synthetic_corpus(1, 64, seed=5)[0].double()
    spec = torch.fft.fft2(img)
    spec[:, 2, 1] += 50.0
    spec[:, 62, 63] += 50.0
    poked = torch.fft.ifft2(spec).real
    assert float((encoder.extract(img) - encoder.extract(poked)).abs().max()) > 100.0


def test_encoder_gradient_matches_fd(encoder):
    img = synthetic_corpus(1, 64, seed=6)[0].double()
    target = torch.randn(64, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def f(x):
        return (encoder.extract(x) * target).sum()

    x = img.clone().requires_grad_(True)
    f(x).backward()
    rng = np.random.default_rng(2)
    checked = 0
    for idx in rng.choice(img.numel(), size=12, replace=False):
        fd = central_diff(f, img, int(idx), h=1e-6)
        an = float(x.grad.view(-1)[int(idx)])
        if abs(fd) < 1e-4 and abs(an) < 1e-4:
            continue  # both effectively zero (out-of-band direction)
        assert an == pytest.approx(fd, rel=1e-3)
        checked += 1
    assert checked >= 4


def test_encoder_128_variant():
    enc = B.get_backend("feature-encoder", "patch-proj-128")
    img = synthetic_corpus(1, 64, seed=7)[0]
    assert enc.extract(img).shape == (128,)
    assert enc.feature_dim == 128


# -- perceptual metric ---------------------------------------------------------


@pytest.fixture(scope="module")
def perceptual():
    return B.get_backend("perceptual", "l2-smooth")


def test_perceptual_zero_and_symmetry(perceptual):
    torch.manual_seed(0)
    a, b = torch.rand(3, 32, 32), torch.rand(3, 32, 32)
    assert float(perceptual.distance(a, a)) == 0.0
    assert float(perceptual.distance(a, b)) == pytest.approx(
        float(perceptual.distance(b, a)), rel=1e-6
    )


def test_perceptual_prefers_dither_over_structure(perceptual):
    # equal-energy perturbations: white dither mostly cancels under the blur,
    # a flat offset survives it fully
    torch.manual_seed(1)
    base = torch.rand(3, 32, 32, dtype=torch.float64) * 0.5 + 0.25
    noise = torch.randn(3, 32, 32, dtype=torch.float64)
    noise = 0.05 * noise / noise.pow(2).mean().sqrt()
    flat = torch.full((3, 32, 32), 0.05, dtype=torch.float64)
    d_noise = float(perceptual.distance(base, base + noise))
    d_flat = float(perceptual.distance(base, base + flat))
    assert d_noise < d_flat


def test_perceptual_shape_mismatch(perceptual):
    with pytest.raises(InvalidInputError):
        perceptual.distance(torch.rand(3, 16, 16), torch.rand(3, 16, 17))


def test_perceptual_gradient_matches_fd(perceptual):
    torch.manual_seed(2)
    a = torch.rand(3, 16, 16, dtype=torch.float64)
    b = torch.rand(3, 16, 16, dtype=torch.float64)

    def f(x):
        return perceptual.distance(x, b)

    x = a.clone().requires_grad_(True)
    f(x).backward()
    rng = np.random.default_rng(3)
    for idx in rng.choice(a.numel(), size=8, replace=False):
        fd = central_diff(f, a, int(idx))
        an = float(x.grad.view(-1)[int(idx)])
        assert an == pytest.approx(fd, rel=1e-3, abs=1e-9)


# -- regeneration ---------------------------------------------------------------


def test_tiny_ae_regen_range_and_determinism(tiny_ae):
    regen = B.TinyAERegen(tiny_ae)
    img = synthetic_corpus(1, 64, seed=8)[0]
    a = regen.regenerate(img)
    b = regen.regenerate(img)
    assert torch.equal(a, b)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0


def test_tiny_ae_regen_single_quality_level(tiny_ae):
    regen = B.TinyAERegen(tiny_ae)
    img = synthetic_corpus(1, 64, seed=8)[0]
    assert torch.equal(regen.regenerate(img, strength=0.0), regen.regenerate(img, strength=3.0))


def test_smoothed_noise_regen_monotone_in_steps():
    regen = B.SmoothedNoiseRegen()
    img = synthetic_corpus(1, 64, seed=9)[0]
    errs = []
    for steps in (0, 10, 25, 50, 75, 100, 200):
        out = regen.regenerate(img, steps=steps, seed=4)
        errs.append(float(((out - img) ** 2).mean()))
    assert errs[0] == 0.0
    for lo, hi in zip(errs[:-1], errs[1:]):
        assert hi >= lo
    # strength saturates once the step index passes the schedule length
    assert errs[-1] == pytest.approx(errs[-2])


def test_smoothed_noise_regen_seeded():
    regen = B.SmoothedNoiseRegen()
    img = synthetic_corpus(1, 64, seed=9)[0]
    a = regen.regenerate(img, steps=60, seed=5)
    b = regen.regenerate(img, steps=60, seed=5)
    c = regen.regenerate(img, steps=60, seed=6)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_smoothed_noise_regen_rejects_negative_steps():
    regen = B.SmoothedNoiseRegen()
    with pytest.raises(InvalidInputError):
        regen.regenerate(synthetic_corpus(1, 64, seed=9)[0], steps=-1)
