"""Watermark embedding by gradient descent on an additive perturbation.

The perturbation lives in one of four domains: the pixel grid, the pixel
frequency plane, a codec latent, or the latent frequency plane (default).
Networks stay frozen; only the perturbation tensor is trained.  Each step
evaluates a hinge message loss on the watermarked image plus two
noise-perturbed views of it, an image quality term (negative PSNR), and a
perceptual term, then takes one Adam step.

With the identity codec, both latent domains reduce op-for-op to their
pixel counterparts, and the run is bit-identical to them under the same
seed; tests rely on this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import (
    CapabilityError,
    ConfigError,
    InvalidInputError,
    OptimizationDivergedError,
)
from .images import check_image, quantize
from .keys import Message, WatermarkKey
from .metrics import psnr, quality_report
from .spectral import FrequencyGrid, forward_freq, inverse_freq

DOMAINS = ("pixel", "pixel-frequency", "latent", "latent-frequency")

_SPATIAL_CHOICES = ("rotate", "crop", "noise")


@dataclass(frozen=True)
class EmbedConfig:
    domain: str = "latent-frequency"
    steps: int = 400
    # None resolves per domain: 2.0 in the frequency domains, 0.01 otherwise
    # (frequency coefficients are ~3 orders of magnitude larger than pixels).
    learning_rate: float | None = None
    lambda_p: float = 0.05
    lambda_i: float = 0.25
    latent_noise_std: float = 0.25
    pixel_noise_std: float = 0.06
    spatial_augs: bool = False
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (0.75, 4.0 / 3.0)
    rotation_increment: int = 90
    seed: int = 0

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}; known: {', '.join(DOMAINS)}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lambda_p < 0 or self.lambda_i < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.latent_noise_std < 0 or self.pixel_noise_std < 0:
            raise ConfigError("noise stds must be non-negative")
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1")
        rlo, rhi = self.crop_ratio
        if not (0 < rlo <= rhi):
            raise ConfigError("crop_ratio must satisfy 0 < lo <= hi")
        if self.rotation_increment not in (90, 180):
            raise ConfigError("rotation_increment must be 90 or 180")

    def resolved_lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 2.0 if self.domain.endswith("frequency") else 0.01

    def is_latent(self) -> bool:
        return self.domain.startswith("latent")

    def is_frequency(self) -> bool:
        return self.domain.endswith("frequency")


@dataclass
class Perturbation:
    """Trainable additive term; two real planes in the frequency domains."""

    domain: str
    tensors: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}")
        want = 2 if self.domain.endswith("frequency") else 1
        if len(self.tensors) != want:
            raise InvalidInputError(
                f"{self.domain} perturbation needs {want} tensor(s), got {len(self.tensors)}"
            )
        shapes = {tuple(t.shape) for t in self.tensors}
        if len(shapes) != 1:
            raise InvalidInputError("perturbation planes must share a shape")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.tensors[0].shape)

    def detached(self) -> "Perturbation":
        return Perturbation(self.domain, tuple(t.detach().clone() for t in self.tensors))

    def magnitude(self) -> float:
        return math.sqrt(sum(float((t.detach() ** 2).sum()) for t in self.tensors))


def zero_perturbation(domain: str, signal_shape, dtype=torch.float32) -> Perturbation:
    n = 2 if domain.endswith("frequency") else 1
    tensors = tuple(
        torch.zeros(signal_shape, dtype=dtype, requires_grad=True) for _ in range(n)
    )
    return Perturbation(domain, tensors)


@dataclass(frozen=True)
class StepLosses:
    step: int
    message_w: float
    message_p1: float
    message_p2: float
    psnr_term: float
    perceptual: float
    total: float

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "message_w": self.message_w,
            "message_p1": self.message_p1,
            "message_p2": self.message_p2,
            "psnr_term": self.psnr_term,
            "perceptual": self.perceptual,
            "total": self.total,
        }


@dataclass
class EmbedResult:
    watermarked: torch.Tensor  # quantized to the 8-bit grid
    perturbation: Perturbation
    loss_trace: list[StepLosses]
    final_psnr: float
    final_bit_accuracy_clean: float  # measured on the quantized image
    quality: object
    decoded: Message


@dataclass(frozen=True)
class ViewPlan:
    """Frozen randomness for one optimization step."""

    latent_noise: torch.Tensor | None
    pixel_noise: torch.Tensor | None
    # None, ("rotate", quarter_turns), ("crop", top, left, h, w), or ("noise",)
    spatial: tuple | None = None


def message_loss(features, key: WatermarkKey, message: Message):
    """Mean hinge loss max(0, margin - (z . v_k) m_k) over the K bits."""
    if message.bits != key.bits:
        raise InvalidInputError(f"message has {message.bits} bits, key expects {key.bits}")
    z = torch.as_tensor(features)
    z = z.reshape(-1)
    if z.numel() < key.feature_dim:
        raise InvalidInputError(
            f"feature vector has {z.numel()} entries, key needs {key.feature_dim}"
        )
    v = torch.as_tensor(key.vectors, dtype=z.dtype)
    m = torch.as_tensor(message.values, dtype=z.dtype)
    proj = v @ z[: key.feature_dim]
    return torch.clamp(key.margin - proj * m, min=0.0).mean()


def _perturb_signal(signal: torch.Tensor, pert: Perturbation) -> torch.Tensor:
    if tuple(signal.shape) != pert.shape:
        raise ConfigError(
            f"perturbation shape {pert.shape} does not match signal {tuple(signal.shape)}"
        )
    if pert.domain.endswith("frequency"):
        spec = forward_freq(signal)
        shifted = FrequencyGrid(spec.real + pert.tensors[0], spec.imag + pert.tensors[1])
        return inverse_freq(shifted)
    return signal + pert.tensors[0]


def _base_signal(image: torch.Tensor, cfg_domain: str, codec) -> torch.Tensor:
    if cfg_domain.startswith("latent"):
        return codec.encode(image)
    return image


def _signal_to_image(signal: torch.Tensor, cfg_domain: str, codec) -> torch.Tensor:
    if cfg_domain.startswith("latent"):
        return codec.decode(signal)
    return signal


def apply_perturbation(
    domain: str, image: torch.Tensor, pert: Perturbation, codec=None
) -> torch.Tensor:
    """Watermarked image for a given perturbation, clamped to [0, 1].

    pixel: clamp(I + d); pixel-frequency: clamp(re(iFFT(FFT(I) + d)));
    latent: clamp(D(E(I) + d)); latent-frequency: clamp(D(iFFT(FFT(E(I)) + d))).
    """
    if domain != pert.domain:
        raise ConfigError(
            f"perturbation built for {pert.domain!r}, asked to apply in {domain!r}"
        )
    signal = _base_signal(image, domain, codec)
    shifted = _perturb_signal(signal, pert)
    return _signal_to_image(shifted, domain, codec).clamp(0.0, 1.0)


def _draw_uniform(gen: torch.Generator, lo: float, hi: float, dtype) -> float:
    u = torch.rand((), generator=gen, dtype=dtype)
    return float(lo + (hi - lo) * u)


def sample_view_plan(
    cfg: EmbedConfig,
    signal_shape,
    image_shape,
    gen: torch.Generator,
    dtype=torch.float32,
) -> ViewPlan:
    """Draw one step's noise and augmentation choice from the generator.

    Draw order is fixed (latent noise, pixel noise, spatial params) so runs
    with equal shapes consume the generator identically.
    """
    latent_noise = None
    if cfg.latent_noise_std > 0:
        latent_noise = cfg.latent_noise_std * torch.randn(
            signal_shape, generator=gen, dtype=dtype
        )
    pixel_noise = None
    if cfg.pixel_noise_std > 0:
        pixel_noise = cfg.pixel_noise_std * torch.randn(
            image_shape, generator=gen, dtype=dtype
        )
    spatial = None
    if cfg.spatial_augs:
        idx = int(torch.randint(0, len(_SPATIAL_CHOICES), (1,), generator=gen))
        kind = _SPATIAL_CHOICES[idx]
        if kind == "rotate":
            per_turn = cfg.rotation_increment // 90
            turns = per_turn * int(torch.randint(0, 360 // cfg.rotation_increment, (1,), generator=gen))
            spatial = ("rotate", turns)
        elif kind == "crop":
            h, w = image_shape[-2:]
            scale = _draw_uniform(gen, cfg.crop_scale[0], cfg.crop_scale[1], dtype)
            ratio = _draw_uniform(gen, cfg.crop_ratio[0], cfg.crop_ratio[1], dtype)
            area = scale * h * w
            cw = min(w, max(1, round(math.sqrt(area * ratio))))
            ch = min(h, max(1, round(math.sqrt(area / ratio))))
            top = int(torch.randint(0, h - ch + 1, (1,), generator=gen))
            left = int(torch.randint(0, w - cw + 1, (1,), generator=gen))
            spatial = ("crop", top, left, ch, cw)
        else:
            spatial = ("noise",)
    return ViewPlan(latent_noise=latent_noise, pixel_noise=pixel_noise, spatial=spatial)


def _resize_bilinear(image: torch.Tensor, size) -> torch.Tensor:
    out = torch.nn.functional.interpolate(
        image.unsqueeze(0), size=size, mode="bilinear", align_corners=False
    )
    return out.squeeze(0)


def _spatial_view(watermarked: torch.Tensor, plan: ViewPlan) -> torch.Tensor:
    kind = plan.spatial[0]
    if kind == "rotate":
        return torch.rot90(watermarked, plan.spatial[1], dims=(-2, -1))
    if kind == "crop":
        _, top, left, ch, cw = plan.spatial
        patch = watermarked[:, top : top + ch, left : left + cw]
        return _resize_bilinear(patch, watermarked.shape[-2:])
    if plan.pixel_noise is not None:
        return watermarked + plan.pixel_noise
    return watermarked


def _views_from_plan(
    shifted_signal: torch.Tensor,
    watermarked: torch.Tensor,
    cfg: EmbedConfig,
    codec,
    plan: ViewPlan,
) -> tuple[torch.Tensor, torch.Tensor]:
    """The two training views: latent-noise view and pixel-space view."""
    if plan.latent_noise is not None:
        view1 = _signal_to_image(shifted_signal + plan.latent_noise, cfg.domain, codec)
    else:
        view1 = watermarked
    if plan.spatial is not None:
        view2 = _spatial_view(watermarked, plan)
    elif plan.pixel_noise is not None:
        view2 = watermarked + plan.pixel_noise
    else:
        view2 = watermarked
    return view1, view2


def perturbed_views(
    latent_after_delta: torch.Tensor,
    cfg: EmbedConfig,
    step_rng: torch.Generator,
    codec=None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample one step's noise/augmentation and build the two views.

    view1 decodes the noised signal (latent noise s1); view2 perturbs the
    watermarked image in pixel space (noise s2, or, with spatial_augs on, a
    uniformly chosen rotate/crop/noise transform substituting that view).
    When both stds are zero and spatial augs are off, both views equal the
    watermarked image.
    """
    watermarked = _signal_to_image(latent_after_delta, cfg.domain, codec).clamp(0.0, 1.0)
    plan = sample_view_plan(
        cfg, latent_after_delta.shape, watermarked.shape, step_rng, dtype=watermarked.dtype
    )
    return _views_from_plan(latent_after_delta, watermarked, cfg, codec, plan)


def quality_losses(watermarked: torch.Tensor, image: torch.Tensor, perc):
    """(L_p, L_i): negative PSNR and the perceptual distance; differentiable."""
    return -psnr(watermarked, image), perc.distance(watermarked, image)


def loss_with_plan(
    image: torch.Tensor,
    key: WatermarkKey,
    message: Message,
    base_signal: torch.Tensor,
    pert: Perturbation,
    cfg: EmbedConfig,
    codec,
    feat,
    perc,
    plan: ViewPlan,
):
    """Total loss for one frozen view plan; pure in (pert, plan).

    Returns (loss tensor, component floats) so tests can difference it.
    """
    shifted = _perturb_signal(base_signal, pert)
    watermarked = _signal_to_image(shifted, cfg.domain, codec).clamp(0.0, 1.0)
    view1, view2 = _views_from_plan(shifted, watermarked, cfg, codec, plan)

    lm_w = message_loss(feat.extract(watermarked), key, message)
    lm_p1 = message_loss(feat.extract(view1), key, message)
    lm_p2 = message_loss(feat.extract(view2), key, message)
    lp, li = quality_losses(watermarked, image, perc)
    total = lm_w + lm_p1 + lm_p2 + cfg.lambda_p * lp + cfg.lambda_i * li
    parts = (
        float(lm_w.detach()),
        float(lm_p1.detach()),
        float(lm_p2.detach()),
        float(lp.detach()),
        float(li.detach()),
        float(total.detach()),
    )
    return total, parts


def _check_backend(obj, label: str) -> None:
    if not getattr(obj, "differentiable", False):
        raise CapabilityError(f"{label} backend does not support gradients")


def embed(
    image: torch.Tensor,
    key: WatermarkKey,
    message: Message,
    codec,
    feat,
    perc,
    cfg: EmbedConfig = EmbedConfig(),
) -> EmbedResult:
    """Optimize a perturbation so the decoded bits match the message.

    Deterministic for a fixed (inputs, cfg.seed); reruns are bit-identical.
    """
    check_image(image)
    if message.bits != key.bits:
        raise InvalidInputError(f"message has {message.bits} bits, key expects {key.bits}")
    feat_dim = getattr(feat, "feature_dim", None)
    if feat_dim is not None and key.feature_dim > feat_dim:
        raise ConfigError(
            f"key feature_dim {key.feature_dim} exceeds encoder output {feat_dim}"
        )
    _check_backend(feat, "feature-encoder")
    _check_backend(perc, "perceptual")
    if cfg.is_latent():
        _check_backend(codec, "latent-codec")
        codec.latent_shape(tuple(image.shape))  # validates compatibility

    gen = torch.Generator().manual_seed(cfg.seed)
    base = _base_signal(image, cfg.domain, codec).detach()
    pert = zero_perturbation(cfg.domain, base.shape, dtype=image.dtype)
    opt = torch.optim.Adam(pert.tensors, lr=cfg.resolved_lr())

    trace: list[StepLosses] = []
    for step in range(cfg.steps):
        plan = sample_view_plan(cfg, base.shape, image.shape, gen, dtype=image.dtype)
        total, parts = loss_with_plan(
            image, key, message, base, pert, cfg, codec, feat, perc, plan
        )
        if not math.isfinite(parts[-1]):
            raise OptimizationDivergedError(step)
        opt.zero_grad()
        total.backward()
        opt.step()
        trace.append(StepLosses(step, *parts))

    final = pert.detached()
    watermarked = quantize(apply_perturbation(cfg.domain, image, final, codec).detach())
    from .detect import decode  # local import; detect depends on keys only

    decoded = decode(watermarked, key, feat)
    matches = float((decoded.values == message.values).mean())
    report = quality_report(image, watermarked, perc)
    return EmbedResult(
        watermarked=watermarked,
        perturbation=final,
        loss_trace=trace,
        final_psnr=report.psnr,
        final_bit_accuracy_clean=matches,
        quality=report,
        decoded=decoded,
    )
