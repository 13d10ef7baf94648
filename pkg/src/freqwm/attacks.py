"""Robustness attacks and the evaluation battery.

Every attack maps a valid image to a valid image (clamped [0, 1]) and is a
pure function of its inputs: stochastic attacks take an explicit seed and
reproduce bit-identically under it.  `run_battery` applies each configured
attack to the original image independently; attacks are never chained.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import PIL
import torch
import torch.nn.functional as F
from PIL import Image

from . import backends as _backends
from .errors import AttackError, CapabilityError, InvalidInputError
from .images import from_uint8, to_uint8


def codec_identity() -> str:
    """Identity of the JPEG implementation, recorded in run provenance."""
    return f"Pillow {PIL.__version__}"


def brightness(image: torch.Tensor, factor: float = 0.5) -> torch.Tensor:
    if factor <= 0:
        raise InvalidInputError("brightness factor must be positive")
    return (image * factor).clamp(0.0, 1.0)


def contrast(image: torch.Tensor, factor: float = 0.5) -> torch.Tensor:
    """Scale deviations about the per-image global mean."""
    if factor <= 0:
        raise InvalidInputError("contrast factor must be positive")
    mean = image.mean()
    return (mean + factor * (image - mean)).clamp(0.0, 1.0)


def jpeg(image: torch.Tensor, quality: int = 50) -> torch.Tensor:
    """Round-trip through the pinned Pillow JPEG codec."""
    if not (1 <= quality <= 100):
        raise InvalidInputError("jpeg quality must lie in [1, 100]")
    buf = io.BytesIO()
    try:
        Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="JPEG", quality=quality)
        buf.seek(0)
        with Image.open(buf) as im:
            return from_uint8(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise AttackError(f"jpeg codec failure: {exc}") from exc


def gaussian_blur(image: torch.Tensor, kernel: int = 5) -> torch.Tensor:
    """Gaussian kernel with std tied to its size, reflect padding."""
    if kernel < 1 or kernel % 2 == 0:
        raise InvalidInputError("kernel must be odd and >= 1")
    if kernel == 1:
        return image.clone()
    sigma = 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8
    half = (kernel - 1) / 2.0
    x = torch.arange(kernel, dtype=torch.float64) - half
    g = torch.exp(-(x**2) / (2.0 * sigma**2))
    g = g / g.sum()
    k = torch.outer(g, g).to(image.dtype).expand(3, 1, kernel, kernel)
    pad = kernel // 2
    padded = F.pad(image.unsqueeze(0), (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(padded, k.contiguous(), groups=3).squeeze(0).clamp(0.0, 1.0)


def gaussian_noise(image: torch.Tensor, sigma: float = 0.05, seed: int = 0) -> torch.Tensor:
    if sigma < 0:
        raise InvalidInputError("sigma must be >= 0")
    gen = torch.Generator().manual_seed(seed)
    noise = sigma * torch.randn(image.shape, generator=gen, dtype=image.dtype)
    return (image + noise).clamp(0.0, 1.0)


def resize(image: torch.Tensor, scale: float = 0.3) -> torch.Tensor:
    """Bilinear down-scale then back up to the original size."""
    if not (0 < scale <= 1):
        raise InvalidInputError("resize scale must lie in (0, 1]")
    h, w = image.shape[-2:]
    dh, dw = max(1, round(h * scale)), max(1, round(w * scale))
    down = F.interpolate(image.unsqueeze(0), size=(dh, dw), mode="bilinear", align_corners=False)
    up = F.interpolate(down, size=(h, w), mode="bilinear", align_corners=False)
    return up.squeeze(0).clamp(0.0, 1.0)


def rotate(image: torch.Tensor, degrees: int = 90) -> torch.Tensor:
    """Exact rotation; only 90-degree multiples are supported."""
    if degrees % 90 != 0:
        raise InvalidInputError("rotation must be a multiple of 90 degrees")
    turns = (degrees // 90) % 4
    if turns == 0:
        return image.clone()
    return torch.rot90(image, turns, dims=(-2, -1))


def crop(image: torch.Tensor, area: float = 0.7) -> torch.Tensor:
    """Keep a centered crop of the given area fraction, resized back."""
    if not (0 < area <= 1):
        raise InvalidInputError("crop area must lie in (0, 1]")
    h, w = image.shape[-2:]
    side = math.sqrt(area)
    ch, cw = max(1, round(h * side)), max(1, round(w * side))
    if (ch, cw) == (h, w):
        return image.clone()
    top, left = (h - ch) // 2, (w - cw) // 2
    patch = image[:, top : top + ch, left : left + cw]
    out = F.interpolate(patch.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False)
    return out.squeeze(0).clamp(0.0, 1.0)


def vae_regen(image: torch.Tensor, backend, quality: float = 3) -> torch.Tensor:
    """Re-synthesize through a learned compression backend.

    `quality` is the compression index of full-scale backends; the desk
    autoencoder has a single quality level and ignores it.
    """
    return backend.regenerate(image, quality).clamp(0.0, 1.0)


def diffusion_regen(image: torch.Tensor, backend, steps: int = 60, seed: int = 0) -> torch.Tensor:
    """Noise-then-restore regeneration; degradation grows with steps."""
    return backend.regenerate(image, steps=steps, seed=seed).clamp(0.0, 1.0)


def latent_adversary(
    image: torch.Tensor,
    codec,
    eps: float,
    steps: int = 50,
    step_size: float | None = None,
    seed: int = 0,
) -> torch.Tensor:
    """Projected sign-gradient ascent on the latent displacement.

    Maximizes ||E(I_adv) - E(I)||_2 under an L-infinity pixel budget eps.
    The start (delta = 0) is a stationary point of the objective, so a zero
    gradient is replaced by a seeded random sign step.
    """
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    if not getattr(codec, "differentiable", False):
        raise CapabilityError("latent_adversary needs a differentiable codec")
    step = eps / 10.0 if step_size is None else step_size
    gen = torch.Generator().manual_seed(seed)
    z0 = codec.encode(image).detach()
    delta = torch.zeros_like(image)
    for _ in range(steps):
        leaf = delta.clone().requires_grad_(True)
        adv = (image + leaf).clamp(0.0, 1.0)
        obj = torch.linalg.vector_norm(codec.encode(adv) - z0)
        (grad,) = torch.autograd.grad(obj, leaf)
        if float(grad.abs().max()) == 0.0:
            direction = torch.sign(torch.randn(image.shape, generator=gen, dtype=image.dtype))
        else:
            direction = grad.sign()
        delta = (delta + step * direction).clamp(-eps, eps)
        delta = (image + delta).clamp(0.0, 1.0) - image
    return (image + delta).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Battery plumbing

_REQUIRED = object()


@dataclass(frozen=True)
class AttackSpec:
    """One battery entry: attack name, parameters, seed, optional label."""

    name: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    label: str | None = None

    def key(self) -> str:
        return self.label if self.label else self.name


def _p(default, kind, lo=None, hi=None):
    return {"default": default, "kind": kind, "lo": lo, "hi": hi}


# Stochastic attacks draw from AttackSpec.seed; it is not a schema param.
_SCHEMAS: dict[str, dict] = {
    "brightness": {"factor": _p(0.5, float)},
    "contrast": {"factor": _p(0.5, float)},
    "jpeg": {"quality": _p(50, int, 1, 100)},
    "gaussian_blur": {"kernel": _p(5, int, 1, None)},
    "gaussian_noise": {"sigma": _p(0.05, float, 0.0, None)},
    "resize": {"scale": _p(0.3, float, None, 1.0)},
    "rotate": {"degrees": _p(90, int)},
    "crop": {"area": _p(0.7, float, None, 1.0)},
    "vae_regen": {"backend": _p("tiny-ae", str), "quality": _p(3, float)},
    "diffusion_regen": {"backend": _p("smoothed-noise", str), "steps": _p(60, int, 0, None)},
    "latent_adversary": {
        "codec": _p("tiny-ae", str),
        "eps": _p(_REQUIRED, float),
        "steps": _p(50, int, 1, None),
        "step_size": _p(None, float),
    },
}

_STOCHASTIC = ("gaussian_noise", "diffusion_regen", "latent_adversary")


def attack_names() -> list[str]:
    return sorted(_SCHEMAS)


def validate_spec(spec: AttackSpec) -> dict:
    """Check params against the attack's schema; returns resolved params."""
    if spec.name not in _SCHEMAS:
        raise AttackError(
            f"unknown attack {spec.name!r}; available: {', '.join(attack_names())}"
        )
    schema = _SCHEMAS[spec.name]
    unknown = set(spec.params) - set(schema)
    if unknown:
        raise AttackError(f"{spec.name}: unknown parameter(s) {sorted(unknown)}")
    resolved = {}
    for pname, rule in schema.items():
        if pname in spec.params:
            value = spec.params[pname]
        elif rule["default"] is _REQUIRED:
            raise AttackError(f"{spec.name}: missing required parameter {pname!r}")
        else:
            value = rule["default"]
        if value is not None and rule["kind"] in (int, float):
            try:
                value = rule["kind"](value)
            except (TypeError, ValueError) as exc:
                raise AttackError(
                    f"{spec.name}: parameter {pname!r} is not a {rule['kind'].__name__}"
                ) from exc
            if rule["lo"] is not None and value < rule["lo"]:
                raise AttackError(f"{spec.name}: {pname}={value} below minimum {rule['lo']}")
            if rule["hi"] is not None and value > rule["hi"]:
                raise AttackError(f"{spec.name}: {pname}={value} above maximum {rule['hi']}")
        resolved[pname] = value
    return resolved


def apply_attack(image: torch.Tensor, spec: AttackSpec) -> torch.Tensor:
    params = validate_spec(spec)
    if spec.name in _STOCHASTIC:
        params["seed"] = spec.seed
    try:
        if spec.name == "vae_regen":
            backend = _backends.get_backend("regeneration", params.pop("backend"))
            return vae_regen(image, backend, **params)
        if spec.name == "diffusion_regen":
            backend = _backends.get_backend("regeneration", params.pop("backend"))
            return diffusion_regen(image, backend, **params)
        if spec.name == "latent_adversary":
            codec = _backends.get_backend("latent-codec", params.pop("codec"))
            return latent_adversary(image, codec, **params)
        fn = {
            "brightness": brightness,
            "contrast": contrast,
            "jpeg": jpeg,
            "gaussian_blur": gaussian_blur,
            "gaussian_noise": gaussian_noise,
            "resize": resize,
            "rotate": rotate,
            "crop": crop,
        }[spec.name]
        return fn(image, **params)
    except InvalidInputError as exc:
        raise AttackError(f"{spec.name}: {exc}") from exc


def run_battery(image: torch.Tensor, specs: list[AttackSpec]) -> dict[str, torch.Tensor]:
    """Apply each attack to the original image; label -> attacked image."""
    out: dict[str, torch.Tensor] = {}
    for spec in specs:
        key = spec.key()
        if key in out:
            raise AttackError(f"duplicate battery label {key!r}; set distinct labels")
        out[key] = apply_attack(image, spec)
    return out


def default_battery(seed: int = 0) -> list[AttackSpec]:
    """The nine-attack evaluation set at its reference strengths."""
    return [
        AttackSpec("brightness", {"factor": 0.5}),
        AttackSpec("contrast", {"factor": 0.5}),
        AttackSpec("jpeg", {"quality": 50}),
        AttackSpec("gaussian_blur", {"kernel": 5}),
        AttackSpec("gaussian_noise", {"sigma": 0.05}, seed=seed),
        AttackSpec("resize", {"scale": 0.3}),
        AttackSpec("crop", {"area": 0.7}),
        AttackSpec("vae_regen", {"backend": "tiny-ae"}),
        AttackSpec("diffusion_regen", {"backend": "smoothed-noise"}, seed=seed),
    ]
