"""Invisible image watermarking via optimized frequency-domain perturbations.

Embed a k-bit message into an image by training a small additive
perturbation in the frequency plane of a learned latent (or directly in
pixel space), decode it as projection signs of a frozen feature encoder,
and quantify detection confidence with an exact binomial false-positive
statistic.
"""

from .attacks import AttackSpec, apply_attack, run_battery
from .backends import available, get_backend, register
from .detect import (
    DetectionReport,
    bit_correlation,
    decode,
    detect,
    fpr,
    match_count,
    p_value,
    threshold_for_fpr,
    tpr_at_fpr,
)
from .embed import (
    EmbedConfig,
    EmbedResult,
    Perturbation,
    apply_perturbation,
    embed,
    message_loss,
    perturbed_views,
    quality_losses,
)
from .errors import (
    AttackError,
    CapabilityError,
    CapacityError,
    ConfigError,
    FreqwmError,
    InvalidInputError,
    KeyFormatError,
    OptimizationDivergedError,
    RegistryError,
)
from .keys import Message, WatermarkKey, generate_key, load_key, random_message, save_key
from .metrics import QualityReport, bit_accuracy, l2_distance, psnr, quality_report, ssim
from .spectral import FrequencyGrid, forward_freq, inverse_freq

__version__ = "0.1.0"

__all__ = [
    "AttackSpec",
    "apply_attack",
    "run_battery",
    "available",
    "get_backend",
    "register",
    "DetectionReport",
    "bit_correlation",
    "decode",
    "detect",
    "fpr",
    "match_count",
    "p_value",
    "threshold_for_fpr",
    "tpr_at_fpr",
    "EmbedConfig",
    "EmbedResult",
    "Perturbation",
    "apply_perturbation",
    "embed",
    "message_loss",
    "perturbed_views",
    "quality_losses",
    "FreqwmError",
    "InvalidInputError",
    "CapacityError",
    "KeyFormatError",
    "RegistryError",
    "ConfigError",
    "AttackError",
    "CapabilityError",
    "OptimizationDivergedError",
    "Message",
    "WatermarkKey",
    "generate_key",
    "load_key",
    "random_message",
    "save_key",
    "QualityReport",
    "bit_accuracy",
    "l2_distance",
    "psnr",
    "quality_report",
    "ssim",
    "FrequencyGrid",
    "forward_freq",
    "inverse_freq",
    "__version__",
]
