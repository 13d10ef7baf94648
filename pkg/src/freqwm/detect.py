"""Decoding and detection statistics.

An unwatermarked image yields independent fair-coin bits under a hidden key,
so the count M of matching bits is Binomial(k, 1/2) and the false-positive
rate of the rule "declare watermarked once M >= tau" has the closed form

    P(M >= tau) = 2^-k * sum_{i=tau}^{k} C(k, i).

`fpr(tau, k)` computes the strict-tail variant P(M > tau) used throughout;
the two are related by an index shift, and `detect` documents the mapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError
from .keys import Message, WatermarkKey
from .metrics import bit_accuracy

__all__ = [
    "DetectionReport",
    "BitCorrelation",
    "decode_features",
    "decode",
    "match_count",
    "fpr",
    "threshold_for_fpr",
    "p_value",
    "detect",
    "bit_correlation",
    "tpr_at_fpr",
]


def _project(features, key: WatermarkKey) -> np.ndarray:
    z = features.detach().cpu().numpy() if isinstance(features, torch.Tensor) else np.asarray(features)
    z = z.astype(np.float64, copy=False).reshape(-1)
    if z.size < key.feature_dim:
        raise InvalidInputError(
            f"feature vector has {z.size} entries, key needs {key.feature_dim}"
        )
    return key.vectors @ z[: key.feature_dim]


def decode_features(features, key: WatermarkKey) -> Message:
    """Read K bits as projection signs; sign(0) is +1 by convention."""
    proj = _project(features, key)
    return Message(np.where(proj >= 0.0, 1, -1).astype(np.int8))


def decode(image: torch.Tensor, key: WatermarkKey, encoder) -> Message:
    """Extract features from an image and decode them against a key."""
    return decode_features(encoder.extract(image), key)


def match_count(embedded: Message, decoded: Message) -> int:
    if embedded.bits != decoded.bits:
        raise InvalidInputError(
            f"bit count mismatch: {embedded.bits} vs {decoded.bits}"
        )
    return int(np.sum(embedded.values == decoded.values))


def fpr(tau: int, k: int) -> float:
    """P(M > tau) for M ~ Binomial(k, 1/2), exact up to float rounding.

    Terms are evaluated through lgamma and accumulated with fsum so the far
    tail (where naive C(k, i) overflows or underflows) stays accurate.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if tau < 0 or tau > k:
        raise InvalidInputError(f"tau must lie in [0, {k}], got {tau}")
    if tau == k:
        return 0.0
    log_half_k = -k * math.log(2.0)
    terms = [
        math.exp(
            math.lgamma(k + 1) - math.lgamma(i + 1) - math.lgamma(k - i + 1) + log_half_k
        )
        for i in range(tau + 1, k + 1)
    ]
    return min(1.0, math.fsum(terms))


def threshold_for_fpr(k: int, target_fpr: float) -> int:
    """Smallest tau with fpr(tau, k) <= target_fpr.

    Always solvable for positive targets because fpr(k, k) = 0.
    """
    if not (0.0 < target_fpr <= 1.0):
        raise InvalidInputError("target_fpr must lie in (0, 1]")
    for tau in range(k + 1):
        if fpr(tau, k) <= target_fpr:
            return tau
    return k  # unreachable; fpr(k, k) == 0


def p_value(matched: int, k: int) -> float:
    """P(M >= matched) under the fair-coin null; 1.0 when matched == 0."""
    if matched < 0 or matched > k:
        raise InvalidInputError(f"matched must lie in [0, {k}], got {matched}")
    if matched == 0:
        return 1.0
    return fpr(matched - 1, k)


@dataclass(frozen=True)
class DetectionReport:
    decoded: Message
    matched_bits: int
    bit_accuracy: float
    threshold: int
    fpr_at_threshold: float
    p_value: float
    decision: str  # "watermarked" | "not-watermarked"

    def to_record(self) -> dict:
        return {
            "decoded": self.decoded.to_binary(),
            "matched_bits": self.matched_bits,
            "bit_accuracy": self.bit_accuracy,
            "threshold": self.threshold,
            "fpr_at_threshold": self.fpr_at_threshold,
            "p_value": self.p_value,
            "decision": self.decision,
        }


def detect(
    image: torch.Tensor,
    key: WatermarkKey,
    embedded: Message,
    encoder,
    target_fpr: float = 1e-6,
) -> DetectionReport:
    """Decode, count matches, and decide at a calibrated threshold.

    Off-by-one mapping: with t = threshold_for_fpr(k, target) the decision
    rule is M >= t + 1, whose false-positive rate is fpr(t, k) <= target.
    The reported threshold is the decision threshold t + 1, so
    fpr_at_threshold == fpr(threshold - 1, k) == P(M >= threshold).
    """
    if embedded.bits != key.bits:
        raise InvalidInputError(
            f"message has {embedded.bits} bits, key expects {key.bits}"
        )
    decoded = decode(image, key, encoder)
    matched = match_count(embedded, decoded)
    t = threshold_for_fpr(key.bits, target_fpr)
    threshold = t + 1
    decision = "watermarked" if matched >= threshold else "not-watermarked"
    return DetectionReport(
        decoded=decoded,
        matched_bits=matched,
        bit_accuracy=bit_accuracy(embedded, decoded),
        threshold=threshold,
        fpr_at_threshold=fpr(t, key.bits),
        p_value=p_value(matched, key.bits),
        decision=decision,
    )


@dataclass(frozen=True)
class BitCorrelation:
    """Pairwise Pearson correlation of decoded bits across a corpus.

    Bits that never vary over the corpus have undefined correlation; those
    pairs are set to 0 and the bit indices recorded in constant_bits.
    """

    matrix: np.ndarray
    constant_bits: tuple[int, ...]

    def max_offdiag(self) -> float:
        k = self.matrix.shape[0]
        if k < 2:
            return 0.0
        off = self.matrix[~np.eye(k, dtype=bool)]
        return float(np.max(np.abs(off)))

    def mean_offdiag(self) -> float:
        k = self.matrix.shape[0]
        if k < 2:
            return 0.0
        off = self.matrix[~np.eye(k, dtype=bool)]
        return float(np.mean(np.abs(off)))


def bit_correlation(images, key: WatermarkKey, encoder) -> BitCorrelation:
    """Decode every image and correlate bit positions pairwise."""
    rows = [decode(img, key, encoder).values.astype(np.float64) for img in images]
    if len(rows) < 2:
        raise InvalidInputError("bit_correlation needs at least 2 images")
    bits = np.stack(rows)  # (n, K)
    k = key.bits
    centered = bits - bits.mean(axis=0)
    std = bits.std(axis=0)
    constant = np.flatnonzero(std == 0.0)
    safe_std = np.where(std == 0.0, 1.0, std)
    normed = centered / safe_std
    corr = (normed.T @ normed) / bits.shape[0]
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, 1.0)
    corr = np.clip(corr, -1.0, 1.0)
    return BitCorrelation(matrix=corr, constant_bits=tuple(int(i) for i in constant))


def tpr_at_fpr(match_counts, k: int, fpr_grid) -> list[dict]:
    """True-positive rate of the count sample at each target false-positive rate.

    For each target f the threshold is tau = threshold_for_fpr(k, f) and the
    TPR is the fraction of counts >= tau.
    """
    counts = np.asarray(list(match_counts), dtype=np.int64)
    if counts.size == 0:
        raise InvalidInputError("tpr_at_fpr needs at least one match count")
    if counts.min() < 0 or counts.max() > k:
        raise InvalidInputError("match counts must lie in [0, k]")
    rows = []
    for f in fpr_grid:
        tau = threshold_for_fpr(k, float(f))
        rows.append(
            {
                "target_fpr": float(f),
                "tau": tau,
                "tpr": float(np.mean(counts >= tau)),
            }
        )
    return rows
