"""Baseline feature rankings to compare against counterfactual explanations.

``random``, feature popularity (non-zero count per column), column average
(the global-explanation reduction of an explicit-factor model) and a
Shapley attribution of exposure fairness over feature coalitions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .data import DatasetSplit, GroupAssignment
from .fairness import DisparitySpec, disparity, exposure
from .features import FeatureMatrices
from .ranker import RankerModel, top_k

METHODS = ("random", "pop_user", "pop_item", "efm_user", "efm_item", "shapley")
EXACT_MAX_FEATURES = 12


@dataclass
class BaselineRanking:
    method: str
    ranked_features: list[int]
    scores: list[float]

    def __post_init__(self):
        if sorted(self.ranked_features) != list(range(len(self.ranked_features))):
            raise ValueError("ranked_features must be a permutation of 0..r-1")
        if len(self.scores) != len(self.ranked_features):
            raise ValueError("scores and ranked_features differ in length")
        if any(b > a for a, b in zip(self.scores, self.scores[1:])):
            raise ValueError("scores must be non-increasing")

    def to_dict(self) -> dict:
        return {"method": self.method, "ranked_features": list(self.ranked_features),
                "scores": list(self.scores)}


def _rank_by_score(method, scores) -> BaselineRanking:
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")  # ties keep index order
    return BaselineRanking(method, [int(f) for f in order], [float(scores[f]) for f in order])


def _column(matrices: FeatureMatrices, side: str) -> np.ndarray:
    if side == "user":
        return matrices.A
    if side == "item":
        return matrices.B
    raise ValueError(f"side must be 'user' or 'item', got {side!r}")


def random_ranking(r: int, seed: int = 0) -> BaselineRanking:
    if r < 1:
        raise ValueError("r must be >= 1")
    perm = np.random.default_rng(seed).permutation(r)
    return BaselineRanking("random", [int(f) for f in perm], [float(r - 1 - i) for i in range(r)])


def popularity_ranking(matrices: FeatureMatrices, side: str) -> BaselineRanking:
    """Features ordered by how many users (or items) have a non-zero entry."""
    counts = np.count_nonzero(_column(matrices, side), axis=0)
    return _rank_by_score(f"pop_{side}", counts)


def efm_average_ranking(matrices: FeatureMatrices, side: str) -> BaselineRanking:
    """Features ordered by column mean, zeros included."""
    return _rank_by_score(f"efm_{side}", _column(matrices, side).mean(axis=0))


class CoalitionValue:
    """Fairness value of a feature coalition: ``-|DP disparity|`` of the slates
    obtained when every feature outside the coalition is erased.

    Values are memoised by coalition bitmask, so repeated coalitions cost one
    ranking pass.
    """

    def __init__(self, model: RankerModel, matrices: FeatureMatrices, groups: GroupAssignment,
                 users, candidates, K: int, spec: DisparitySpec | None = None):
        self.model, self.matrices, self.groups = model, matrices, groups
        self.users, self.candidates, self.K = users, candidates, K
        self.spec = spec or DisparitySpec("DP")
        self.cache: dict[int, float] = {}

    @property
    def r(self) -> int:
        return self.matrices.r

    def __call__(self, mask: int) -> float:
        if mask not in self.cache:
            keep = np.array([(mask >> f) & 1 for f in range(self.r)], dtype=bool)
            A = self.matrices.A * keep
            B = self.matrices.B * keep
            slates = top_k(self.model, (A, B), self.users, self.candidates, self.K)
            psi = disparity(exposure(slates, self.groups), self.groups, self.spec)
            self.cache[mask] = -abs(float(psi))
        return self.cache[mask]


def shapley_weight(size: int, r: int) -> float:
    """Probability mass of one particular coalition of ``size`` others under Shapley weighting."""
    return math.factorial(size) * math.factorial(r - size - 1) / math.factorial(r)


def _others(f, r):
    return [g for g in range(r) if g != f]


def _mask(features) -> int:
    out = 0
    for g in features:
        out |= 1 << g
    return out


def exact_shapley(value: CoalitionValue) -> np.ndarray:
    """Weighted sum over every coalition; exponential in ``r``."""
    r = value.r
    if r > EXACT_MAX_FEATURES:
        raise ValueError(f"exact Shapley needs r <= {EXACT_MAX_FEATURES}, got {r}")
    phi = np.zeros(r)
    for f in range(r):
        others = _others(f, r)
        total = 0.0
        for size in range(r):
            w = shapley_weight(size, r)
            for S in combinations(others, size):
                m = _mask(S)
                total += w * (value(m | (1 << f)) - value(m))
        phi[f] = total
    return phi


def sample_coalition(rng: np.random.Generator, others, r: int) -> int:
    """Draw a coalition from the Shapley distribution: a uniform size, then a uniform subset.

    Equivalent to taking the predecessors of ``f`` in a uniformly random
    feature ordering, so the mean marginal is an unbiased Shapley estimate.
    """
    size = int(rng.integers(0, r))
    chosen = rng.choice(others, size=size, replace=False) if size else []
    return _mask(int(g) for g in chosen)


def sampled_shapley(value: CoalitionValue, samples: int, seed: int = 0) -> np.ndarray:
    if samples < 1:
        raise ValueError("samples must be >= 1")
    r = value.r
    rng = np.random.default_rng(seed)
    phi = np.zeros(r)
    for f in range(r):
        others = np.array(_others(f, r), dtype=np.int64)
        marg = [value(m | (1 << f)) - value(m)
                for m in (sample_coalition(rng, others, r) for _ in range(samples))]
        phi[f] = float(np.mean(marg))
    return phi


def enumerated_shapley(value: CoalitionValue) -> np.ndarray:
    """The sampled estimator with the sample average replaced by its expectation.

    Every coalition of the other features is visited once and weighted by the
    probability that :func:`sample_coalition` draws it.
    """
    r = value.r
    phi = np.zeros(r)
    for f in range(r):
        others = _others(f, r)
        total = 0.0
        for size in range(r):
            p = 1.0 / (r * math.comb(r - 1, size))
            total += sum(p * (value(_mask(S) | (1 << f)) - value(_mask(S)))
                         for S in combinations(others, size))
        phi[f] = total
    return phi


def shapley_values(model: RankerModel, matrices: FeatureMatrices, groups: GroupAssignment,
                   split: DatasetSplit, K: int = 5, samples: int = 100, seed: int = 0,
                   mode: str = "sampled") -> np.ndarray:
    """``mode`` is ``"sampled"``, ``"enumerated"`` or ``"exact"``."""
    candidates = split.candidates
    users = np.arange(candidates.shape[0])
    value = CoalitionValue(model, matrices, groups, users, candidates, K)
    if mode == "exact":
        return exact_shapley(value)
    if mode == "enumerated":
        return enumerated_shapley(value)
    if mode == "sampled":
        return sampled_shapley(value, samples, seed)
    raise ValueError(f"unknown Shapley mode {mode!r}")


def shapley_ranking(model: RankerModel, matrices: FeatureMatrices, groups: GroupAssignment,
                    split: DatasetSplit, K: int = 5, samples: int = 100, seed: int = 0,
                    exact: bool = False) -> BaselineRanking:
    mode = "exact" if exact else "sampled"
    phi = shapley_values(model, matrices, groups, split, K, samples, seed, mode)
    return _rank_by_score("shapley", phi)
