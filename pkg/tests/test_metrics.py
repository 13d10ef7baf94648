"""Quality metric checks, including an independent sliding-window SSIM oracle."""

import math

import numpy as np
import pytest
import torch

from freqwm.errors import InvalidInputError
from freqwm.keys import Message, random_message
from freqwm.metrics import MSE_FLOOR, bit_accuracy, l2_distance, psnr, quality_report, ssim


def test_psnr_identical_caps_at_120():
    img = torch.rand(3, 16, 16)
    assert float(psnr(img, img.clone())) == pytest.approx(120.0)


def test_psnr_known_mse():
    # mse 1e-3 exactly -> 30 dB
    a = torch.zeros(3, 10, 10, dtype=torch.float64)
    b = torch.full((3, 10, 10), math.sqrt(1e-3), dtype=torch.float64)
    assert float(psnr(a, b)) == pytest.approx(30.0, abs=1e-9)


def test_psnr_symmetry():
    torch.manual_seed(0)
    a, b = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
    assert float(psnr(a, b)) == pytest.approx(float(psnr(b, a)))


def test_psnr_differentiable():
    a = torch.rand(3, 8, 8, dtype=torch.float64, requires_grad=True)
    b = torch.rand(3, 8, 8, dtype=torch.float64)
    (-psnr(a, b)).backward()
    assert a.grad is not None
    assert torch.isfinite(a.grad).all()


def test_psnr_floor_constant():
    assert MSE_FLOOR == 1e-12


def test_psnr_numpy_inputs_return_float():
    a = np.zeros((3, 8, 8))
    b = np.ones((3, 8, 8)) * 0.5
    out = psnr(a, b)
    assert isinstance(out, float)
    assert out == pytest.approx(10.0 * math.log10(1.0 / 0.25))


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidInputError):
        psnr(torch.zeros(3, 8, 8), torch.zeros(3, 8, 9))


def ssim_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Literal per-window SSIM on the luminance plane, float64 numpy."""
    luma = np.array([0.299, 0.587, 0.114])
    x = np.tensordot(luma, a, axes=1)
    y = np.tensordot(luma, b, axes=1)
    half = 5
    g = np.exp(-((np.arange(11) - half) ** 2) / (2 * 1.5**2))
    g /= g.sum()
    win = np.outer(g, g)
    c1, c2 = 0.01**2, 0.03**2
    h, w = x.shape
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            px = x[i : i + 11, j : j + 11]
            py = y[i : i + 11, j : j + 11]
            mx = (win * px).sum()
            my = (win * py).sum()
            vx = (win * px * px).sum() - mx * mx
            vy = (win * py * py).sum() - my * my
            cov = (win * px * py).sum() - mx * my
            num = (2 * mx * my + c1) * (2 * cov + c2)
            den = (mx * mx + my * my + c1) * (vx + vy + c2)
            vals.append(num / den)
    return float(np.mean(vals))


def test_ssim_matches_oracle():
    rng = np.random.default_rng(3)
    a = rng.random((3, 20, 24))
    b = np.clip(a + 0.1 * rng.standard_normal((3, 20, 24)), 0.0, 1.0)
    got = ssim(torch.from_numpy(a), torch.from_numpy(b))
    assert float(got) == pytest.approx(ssim_oracle(a, b), abs=1e-6)


def test_ssim_self_is_one():
    torch.manual_seed(1)
    img = torch.rand(3, 16, 16, dtype=torch.float64)
    assert float(ssim(img, img.clone())) == pytest.approx(1.0, abs=1e-9)


def test_ssim_anticorrelated_negative():
    # structure inverted around the mean drives the covariance term negative
    torch.manual_seed(2)
    base = torch.rand(3, 16, 16, dtype=torch.float64) * 0.5 + 0.25
    flipped = 1.0 - base
    assert float(ssim(base, flipped)) < 0.0


def test_ssim_rejects_small_images():
    with pytest.raises(InvalidInputError):
        ssim(torch.rand(3, 10, 10), torch.rand(3, 10, 10))


def test_ssim_rejects_single_channel():
    with pytest.raises(InvalidInputError):
        ssim(torch.rand(1, 16, 16), torch.rand(1, 16, 16))


def test_ssim_symmetry():
    torch.manual_seed(4)
    a = torch.rand(3, 14, 14, dtype=torch.float64)
    b = torch.rand(3, 14, 14, dtype=torch.float64)
    assert float(ssim(a, b)) == pytest.approx(float(ssim(b, a)), abs=1e-12)


def test_bit_accuracy_counts():
    a = Message(np.array([1] * 48, dtype=np.int8))
    flipped = np.array([1] * 36 + [-1] * 12, dtype=np.int8)
    assert bit_accuracy(a, Message(flipped)) == pytest.approx(36 / 48)


def test_bit_accuracy_identity_and_inverse():
    msg = random_message(32, seed=0)
    assert bit_accuracy(msg, msg) == 1.0
    assert bit_accuracy(msg, Message(-msg.values)) == 0.0


def test_bit_accuracy_length_mismatch():
    with pytest.raises(InvalidInputError):
        bit_accuracy(random_message(8, seed=0), random_message(9, seed=0))


def test_l2_distance_8bit_scale():
    a = torch.zeros(3, 4, 4)
    b = torch.full((3, 4, 4), 10.0 / 255.0)
    # every pixel differs by 10 8-bit counts -> mean squared difference 100
    assert l2_distance(a, b) == pytest.approx(100.0, rel=1e-6)


def test_l2_distance_zero():
    img = torch.rand(3, 4, 4)
    assert l2_distance(img, img) == 0.0


def test_quality_report_fields():
    torch.manual_seed(5)
    a = torch.rand(3, 16, 16)
    b = torch.clamp(a + 0.02, 0.0, 1.0)
    rep = quality_report(a, b)
    assert rep.psnr > 30.0
    assert 0.0 < rep.ssim <= 1.0
    assert rep.l2 > 0.0
    assert rep.perceptual is None
    rec = rep.to_record()
    assert set(rec) == {"psnr", "ssim", "l2", "perceptual"}


class _FlatMetric:
    def distance(self, a, b):
        return torch.tensor(0.125)


def test_quality_report_perceptual_backend():
    img = torch.rand(3, 16, 16)
    rep = quality_report(img, img, perceptual=_FlatMetric())
    assert rep.perceptual == pytest.approx(0.125)
