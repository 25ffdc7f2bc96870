"""Item-exposure fairness: exposure counts, disparity measures, their
score-relaxed surrogate, and evaluation metrics (KL@K, long-tail rate)."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import expit

from .data import DataError, GroupAssignment
from .ranker import RankerModel, Slate, backward, forward

KL_EPS = 1e-12


@dataclass(frozen=True)
class DisparitySpec:
    """``kind`` is ``"DP"`` (demographic parity) or ``"EK"`` (exact-K with target ``alpha``).

    ``alpha`` may be a ``Fraction``; disparities are then exact rationals.
    """

    kind: str = "DP"
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in ("DP", "EK"):
            raise ValueError(f"unknown disparity kind {self.kind!r}")
        if self.kind == "EK" and (self.alpha is None or not self.alpha > 0):
            raise ValueError("EK disparity needs alpha > 0")

    @classmethod
    def matching_dp(cls, groups: GroupAssignment) -> "DisparitySpec":
        """EK with the rational alpha = |G0|/|G1|, so that EK * |G1| equals DP exactly."""
        return cls("EK", Fraction(groups.g0_size, groups.g1_size))

    def coefficient(self, groups: GroupAssignment) -> float:
        """Weight on long-tail exposure: alpha for EK, |G0|/|G1| for DP."""
        if self.kind == "EK":
            return float(self.alpha)
        return groups.g0_size / groups.g1_size


@dataclass(frozen=True)
class ExposureCount:
    exposure_g0: int
    exposure_g1: int

    @property
    def total(self) -> int:
        return self.exposure_g0 + self.exposure_g1


def _items(slates):
    return slates.items if isinstance(slates, Slate) else np.asarray(slates)


def exposure(slates, groups: GroupAssignment) -> ExposureCount:
    items = _items(slates)
    if items.size and (items.min() < 0 or items.max() >= groups.n):
        raise DataError("slate contains an item without a group")
    g1 = int(np.count_nonzero(groups.group_of[items]))
    return ExposureCount(items.size - g1, g1)


def disparity(exposures: ExposureCount, groups: GroupAssignment, spec: DisparitySpec) -> float:
    e0, e1 = exposures.exposure_g0, exposures.exposure_g1
    if spec.kind == "DP":
        return groups.g1_size * e0 - groups.g0_size * e1
    return e0 - spec.alpha * e1


def _slate_pairs(slates: Slate):
    users = np.repeat(slates.users, slates.K)
    return users, slates.items.ravel()


def relaxed_ratio(scores, popular, coefficient: float) -> float:
    """Score-weighted disparity: popular scores count +1, long-tail scores -coefficient."""
    scores = np.asarray(scores, dtype=np.float64)
    denom = scores.sum()
    if not denom > 0:
        raise ZeroDivisionError("relaxed disparity has zero total slate score")
    weight = np.where(popular, 1.0, -coefficient)
    return float(np.dot(weight, scores) / denom)


def relaxed_disparity(model: RankerModel, matrices_cf, slates_cf: Slate,
                      groups: GroupAssignment, spec: DisparitySpec) -> float:
    """Score-weighted disparity over fixed slates, normalised by total slate score."""
    return relaxed_disparity_grad(model, matrices_cf, slates_cf, groups, spec, with_grad=False)[0]


def relaxed_disparity_grad(model: RankerModel, matrices_cf, slates_cf: Slate,
                           groups: GroupAssignment, spec: DisparitySpec, with_grad=True):
    """Relaxed disparity and its gradient wrt every entry of ``A`` and ``B``.

    Slate membership is held fixed; gradients flow through the scores only.
    Returns ``(value, dA, dB)`` with ``dA``/``dB`` shaped like the inputs
    (``None`` when ``with_grad`` is false).
    """
    A, B = (matrices_cf.A, matrices_cf.B) if hasattr(matrices_cf, "A") else matrices_cf
    users, items = _slate_pairs(slates_cf)
    logits, cache = forward(model, A[users], B[items])
    s = expit(logits)
    c = spec.coefficient(groups)
    popular = groups.group_of[items] == 0
    value = relaxed_ratio(s, popular, c)
    if not with_grad:
        return value, None, None
    ds = (np.where(popular, 1.0, -c) - value) / s.sum()
    _, dAu, dBv = backward(model, cache, ds * s * (1.0 - s), want_params=False, want_inputs=True)
    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    np.add.at(dA, users, dAu)
    np.add.at(dB, items, dBv)
    return value, dA, dB


def group_distribution(slates, groups: GroupAssignment) -> np.ndarray:
    e = exposure(slates, groups)
    return np.array([e.exposure_g0, e.exposure_g1], dtype=np.float64) / e.total


def population_distribution(groups: GroupAssignment) -> np.ndarray:
    return np.array([groups.g0_size, groups.g1_size], dtype=np.float64) / groups.n


def kl_divergence(p, q, eps: float = KL_EPS) -> float:
    """KL(p || q) in nats after adding ``eps`` to every component and renormalising."""
    p = np.asarray(p, dtype=np.float64) + eps
    q = np.asarray(q, dtype=np.float64) + eps
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def kl_at_k(slates, groups: GroupAssignment, catalog=None) -> float:
    """Divergence of the slates' group mix from the catalogue's group mix."""
    if _items(slates).size == 0:
        raise ValueError("empty slates")
    return kl_divergence(group_distribution(slates, groups), population_distribution(groups))


def long_tail_rate(slates, groups: GroupAssignment) -> float:
    e = exposure(slates, groups)
    return e.exposure_g1 / e.total if e.total else 0.0
