"""Diagonal Fisher information, quantile masks, and the quadratic anchor term.

The empirical Fisher diagonal (mean squared per-sample log-likelihood
gradient) doubles as a per-parameter importance score: the student uses it
to weight a quadratic pull toward its previous parameters, the teacher to
decide which entries its moving average may touch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import (
    Batch,
    FloatArray,
    Layout,
    NetworkSpec,
    ParamVector,
    persample_squared_grad_sum,
)

MASK_SCOPES = ("global", "per-layer")


@dataclass
class FisherDiag:
    """Per-parameter nonnegative importance scores, one entry per parameter."""

    values: FloatArray
    layout: Layout
    source_batch_id: str
    sample_count: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size != self.layout.total_size:
            raise ValueError("Fisher length does not match layout")


@dataclass
class MaskVector:
    """{0,1} selector: bit j is 1 exactly when fisher[j] < threshold."""

    bits: np.ndarray
    layout: Layout
    threshold: float
    xi: float

    @property
    def ones_fraction(self) -> float:
        return float(self.bits.mean())


def estimate_fisher_diag(params: ParamVector, spec: NetworkSpec, batch: Batch,
                         label_rule: str = "argmax-pseudo") -> FisherDiag:
    """Empirical Fisher diagonal: (1/B) sum_b g_b**2 over per-sample gradients.

    Matches the diagonal of the batch-averaged outer product of per-sample
    log-likelihood gradients.  Non-finite gradients raise rather than being
    zeroed.
    """
    acc = persample_squared_grad_sum(params, spec, batch, label_rule)
    values = acc / batch.size
    return FisherDiag(values, params.layout, batch.domain_tag or "<untagged>", batch.size)


def _strict_less_mask(values: FloatArray, threshold: float) -> np.ndarray:
    return (values < threshold).astype(np.uint8)


def compute_mask(fisher: FisherDiag, xi: float, scope: str = "global") -> MaskVector:
    """Flag the parameters whose Fisher value falls strictly below the xi-quantile.

    The quantile uses linear interpolation between order statistics over
    the globally flattened array; ``scope="per-layer"`` instead thresholds
    each layer tensor by its own quantile.
    """
    if not 0.0 <= xi <= 1.0:
        raise ValueError(f"xi must be in [0, 1], got {xi}")
    if scope not in MASK_SCOPES:
        raise ValueError(f"unknown mask scope {scope!r}")
    if scope == "global":
        threshold = float(np.quantile(fisher.values, xi))
        bits = _strict_less_mask(fisher.values, threshold)
    else:
        bits = np.zeros(fisher.values.size, dtype=np.uint8)
        thresholds = []
        for e in fisher.layout.entries:
            block = fisher.values[e.offset:e.offset + e.size]
            t = float(np.quantile(block, xi))
            thresholds.append(t)
            bits[e.offset:e.offset + e.size] = _strict_less_mask(block, t)
        threshold = float(np.mean(thresholds))
    return MaskVector(bits, fisher.layout, threshold, float(xi))


def student_regularizer(fisher: FisherDiag, current: ParamVector, anchor: ParamVector,
                        lam: float) -> tuple[float, ParamVector]:
    """Fisher-weighted quadratic pull toward the anchor parameters.

    value = lam * sum_i F_i (current_i - anchor_i)^2, with the matching
    gradient 2 lam F (current - anchor).  The Fisher weights are constants:
    no gradient flows through them.
    """
    if current.layout != fisher.layout or anchor.layout != fisher.layout:
        raise ValueError("fisher/current/anchor layouts do not match")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    diff = current.values - anchor.values
    value = float(lam * np.sum(fisher.values * diff * diff))
    grad = lam * 2.0 * fisher.values * diff
    return value, ParamVector(grad, current.layout)
