"""2-D frequency transforms over channel-first grids.

Convention, fixed across the package: the forward transform is the plain
(unnormalized) DFT applied per channel over the last two axes, and the
inverse carries the full 1/(h*w) factor.  Round-tripping a real grid
therefore reproduces it up to float error, and both directions are
differentiable so perturbations optimized in the frequency domain receive
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInputError


@dataclass
class FrequencyGrid:
    """Complex spectrum stored as two real planes of identical shape."""

    real: torch.Tensor
    imag: torch.Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise InvalidInputError(
                f"real/imag shape mismatch: {tuple(self.real.shape)} vs "
                f"{tuple(self.imag.shape)}"
            )
        if self.real.ndim < 2:
            raise InvalidInputError("frequency grid needs at least 2 axes")

    @property
    def shape(self) -> torch.Size:
        return self.real.shape

    def to_complex(self) -> torch.Tensor:
        return torch.complex(self.real, self.imag)

    @classmethod
    def from_complex(cls, z: torch.Tensor) -> "FrequencyGrid":
        return cls(z.real, z.imag)


def _check_finite(t: torch.Tensor, label: str) -> None:
    # Skip the reduction when grad is being traced; NaNs there surface in the
    # loss check instead, and the sync would cost one pass per opt step.
    if not t.requires_grad and not torch.isfinite(t).all():
        raise InvalidInputError(f"{label} contains non-finite values")


def forward_freq(grid: torch.Tensor) -> FrequencyGrid:
    """Per-channel 2-D DFT of a real grid (..., h, w), unnormalized."""
    if grid.ndim < 2:
        raise InvalidInputError("forward_freq needs a grid with at least 2 axes")
    if grid.is_complex():
        raise InvalidInputError("forward_freq takes a real grid")
    _check_finite(grid, "forward_freq input")
    z = torch.fft.fft2(grid, norm="backward")
    return FrequencyGrid.from_complex(z)


def inverse_freq(freq: FrequencyGrid) -> torch.Tensor:
    """Inverse of forward_freq; returns the real part of the reconstruction.

    The imaginary residue of an inverse-transformed perturbed spectrum is
    discarded by construction: downstream consumers are real images.
    """
    _check_finite(freq.real, "inverse_freq real plane")
    _check_finite(freq.imag, "inverse_freq imag plane")
    z = torch.fft.ifft2(freq.to_complex(), norm="backward")
    return z.real
