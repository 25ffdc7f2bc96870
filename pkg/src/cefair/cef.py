"""Counterfactual explanations of exposure disparity.

For each feature, an additive intervention on that feature's column of the
user and/or item matrix is optimised with Adam to shrink the relaxed
disparity under a norm penalty. The resulting counterfactual slates give the
feature's validity (fairness gain) and proximity (intervention size); their
difference weighted by ``beta`` is the explainability score used to rank
features.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetSplit, GroupAssignment
from .fairness import DisparitySpec, exposure, relaxed_disparity_grad
from .features import CounterfactualMatrices, FeatureMatrices, apply_delta
from .ranker import NumericError, RankerModel, Slate, top_k

log = logging.getLogger(__name__)

TARGETS = ("user", "item", "both")
SCOPES = ("test_candidates", "full_catalog")


@dataclass
class CEFConfig:
    lam: float = 1.0
    beta: float = 0.5
    K: int = 5
    disparity: DisparitySpec = field(default_factory=DisparitySpec)
    target: str = "both"
    lr: float = 0.01
    max_iters: int = 500
    rel_tol: float = 1e-6
    candidate_scope: str = "test_candidates"
    seed: int = 0
    fast_slates: bool = True

    def __post_init__(self):
        if isinstance(self.disparity, dict):
            self.disparity = DisparitySpec(**self.disparity)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.candidate_scope not in SCOPES:
            raise ValueError(f"candidate_scope must be one of {SCOPES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DeltaIntervention:
    feature: int
    delta_u: np.ndarray | None = None
    delta_v: np.ndarray | None = None
    objective: float = float("nan")
    iters: int = 0
    best_trace: list[float] = field(default_factory=list, repr=False)

    def as_counterfactual(self, base: FeatureMatrices) -> CounterfactualMatrices:
        return CounterfactualMatrices(base, self.feature, self.delta_u, self.delta_v)

    def vector(self) -> np.ndarray:
        parts = [d for d in (self.delta_u, self.delta_v) if d is not None]
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class FeatureExplanation:
    feature: int
    validity: float
    proximity: float
    es: float
    final_objective: float
    iters_used: int
    name: str | None = None

    def to_dict(self) -> dict:
        return {"feature_id": self.feature, "feature_name": self.name, "validity": self.validity,
                "proximity": self.proximity, "es": self.es,
                "final_objective": self.final_objective, "iters": self.iters_used}


def candidate_pool(split: DatasetSplit, n_items: int, scope: str) -> np.ndarray:
    if scope == "test_candidates":
        return split.candidates
    m = split.test_positives.shape[0]
    return np.tile(np.arange(n_items, dtype=np.int64), (m, 1))


class _Adam:
    def __init__(self, size, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _split_vector(x, target, m, n):
    if target == "user":
        return x, None
    if target == "item":
        return None, x
    return x[:m], x[m:]


def cef_objective(model, matrices, groups, users, candidates, feature, delta_u, delta_v, config):
    """Penalised relaxed disparity at one intervention, slates recomputed and then frozen.

    Returns ``(loss, relaxed_disparity, grad_u, grad_v, slates)``; the
    gradients cover only the components that are present.
    """
    A_cf, B_cf = apply_delta(matrices, CounterfactualMatrices(matrices, feature, delta_u, delta_v))
    dtype = np.float32 if config.fast_slates else np.float64
    slates = top_k(model, (A_cf, B_cf), users, candidates, config.K, dtype)
    psi, dA, dB = relaxed_disparity_grad(model, (A_cf, B_cf), slates, groups, config.disparity)
    parts = [d for d in (delta_u, delta_v) if d is not None]
    x = np.concatenate(parts) if parts else np.zeros(0)
    norm = float(np.linalg.norm(x))
    loss = psi * psi + config.lam * norm
    # subgradient of the norm at zero taken as zero
    pen = config.lam * x / norm if norm > 0 else np.zeros_like(x)
    gu = gv = None
    off = 0
    if delta_u is not None:
        gu = 2.0 * psi * dA[:, feature] + pen[off:off + len(delta_u)]
        off += len(delta_u)
    if delta_v is not None:
        gv = 2.0 * psi * dB[:, feature] + pen[off:off + len(delta_v)]
    return loss, psi, gu, gv, slates


def optimize_delta(model: RankerModel, matrices: FeatureMatrices, groups: GroupAssignment,
                   users, candidates, feature: int, config: CEFConfig) -> DeltaIntervention:
    """Adam on the intervention for one feature; returns the best iterate seen."""
    if not 0 <= feature < matrices.r:
        raise IndexError(f"feature {feature} out of range")
    m, n = matrices.m, matrices.n
    size = {"user": m, "item": n, "both": m + n}[config.target]
    x = np.zeros(size)
    opt = _Adam(size, config.lr)
    best_loss, best_x, trace = np.inf, x.copy(), []
    prev = None
    it = 0
    for it in range(1, config.max_iters + 1):
        du, dv = _split_vector(x, config.target, m, n)
        loss, psi, gu, gv, _ = cef_objective(model, matrices, groups, users, candidates,
                                             feature, du, dv, config)
        if not np.isfinite(loss):
            raise NumericError(f"feature {feature}: non-finite objective at iteration {it}")
        if loss < best_loss:
            best_loss, best_x = loss, x.copy()
        trace.append(best_loss)
        if prev is not None and abs(loss - prev) <= config.rel_tol * max(abs(prev), 1e-300):
            break
        prev = loss
        g = np.concatenate([p for p in (gu, gv) if p is not None])
        x = opt.step(x, g)
    du, dv = _split_vector(best_x, config.target, m, n)
    return DeltaIntervention(feature, du, dv, float(best_loss), it, trace)


def validity(slates_original: Slate, slates_cf: Slate, groups: GroupAssignment, m: int, K: int) -> float:
    """Reduction in the (unweighted) popular-minus-long-tail exposure gap per slot."""
    if not np.array_equal(slates_original.users, slates_cf.users):
        raise ValueError("slates cover different users")
    e, ecf = exposure(slates_original, groups), exposure(slates_cf, groups)
    gap = e.exposure_g0 - e.exposure_g1
    gap_cf = ecf.exposure_g0 - ecf.exposure_g1
    return (gap - gap_cf) / (m * K)


def proximity(intervention: DeltaIntervention) -> float:
    x = intervention.vector()
    return float(np.dot(x, x))


def explainability_score(validity_value: float, proximity_value: float, beta: float) -> float:
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    return validity_value - beta * proximity_value


def explain_feature(model, matrices, groups, users, candidates, feature, config,
                    base_slates=None, name=None) -> FeatureExplanation:
    if base_slates is None:
        base_slates = top_k(model, matrices, users, candidates, config.K)
    delta = optimize_delta(model, matrices, groups, users, candidates, feature, config)
    A_cf, B_cf = apply_delta(matrices, delta.as_counterfactual(matrices))
    cf_slates = top_k(model, (A_cf, B_cf), users, candidates, config.K)
    val = validity(base_slates, cf_slates, groups, len(users), config.K)
    prox = proximity(delta)
    return FeatureExplanation(feature, val, prox, explainability_score(val, prox, config.beta),
                              delta.objective, delta.iters, name)


def rank_explanations(explanations):
    return sorted(explanations, key=lambda e: (-e.es, e.feature))


def explain_all(model: RankerModel, matrices: FeatureMatrices, groups: GroupAssignment,
                split: DatasetSplit, config: CEFConfig, features=None, feature_names=None):
    """Explain every feature independently and rank by explainability score.

    Returns ``(ranked explanations, failures)`` where ``failures`` maps
    feature index to the error message for features whose optimisation
    diverged.
    """
    candidates = candidate_pool(split, matrices.n, config.candidate_scope)
    users = np.arange(candidates.shape[0])
    base = top_k(model, matrices, users, candidates, config.K)
    features = range(matrices.r) if features is None else features
    out, failures = [], {}
    for f in features:
        name = feature_names[f] if feature_names is not None else None
        try:
            out.append(explain_feature(model, matrices, groups, users, candidates, f, config, base, name))
        except NumericError as e:
            log.warning("%s", e)
            failures[f] = str(e)
    return rank_explanations(out), failures
