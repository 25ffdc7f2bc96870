"""Shared builders for the test suite: random small instances, a
finite-difference helper and the planted-bias acceptance fixture."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from cefair.baselines import CoalitionValue
from cefair.data import Catalog, DatasetSplit, GroupAssignment, InteractionRecord
from cefair.features import FeatureMatrices
from cefair.pipeline import RunConfig, build_dataset, fit_model
from cefair.ranker import init_model

FIXTURE_SEEDS = tuple(range(10))

# criterion number -> "PASS/FAIL ..." line, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def random_matrices(rng, m, n, r, zero_frac=0.3, M=5.0) -> FeatureMatrices:
    """Entries in (1, M) with a fraction of exact zeros, like real attention/quality matrices."""
    A = rng.uniform(1.01, M - 0.01, (m, r)) * (rng.random((m, r)) > zero_frac)
    B = rng.uniform(1.01, M - 0.01, (n, r)) * (rng.random((n, r)) > zero_frac)
    return FeatureMatrices(A, B, M)


def random_model(rng, merge, r, hidden=(256, 64)):
    model = init_model(merge, r, seed=int(rng.integers(2**31)), hidden=hidden)
    # non-zero biases so every code path is exercised
    for k, v in model.params.items():
        if k.startswith("b"):
            model.params[k] = rng.normal(0, 0.1, v.shape)
    return model


def random_groups(rng, n, g0=None) -> GroupAssignment:
    g0 = g0 if g0 is not None else max(1, n // 5)
    group_of = np.ones(n, dtype=np.int8)
    group_of[rng.choice(n, size=g0, replace=False)] = 0
    return GroupAssignment(group_of)


def random_candidates(rng, m, n, size):
    return np.stack([rng.choice(n, size=size, replace=False) for _ in range(m)])


def split_from_candidates(candidates, P) -> DatasetSplit:
    return DatasetSplit([], [], candidates[:, :P].copy(), candidates[:, P:].copy())


def central_difference(f, x, eps=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b, floor=1e-12):
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def catalog_of(m, n, r) -> Catalog:
    return Catalog([f"u{i}" for i in range(m)], [f"i{j}" for j in range(n)],
                   [f"f{k}" for k in range(r)])


def records(pairs, catalog: Catalog):
    return [InteractionRecord(catalog.users[u], catalog.items[v], t) for t, (u, v) in enumerate(pairs)]


# ---------------------------------------------------------------- small fixtures

def micro_fixture():
    """Two users, one popular and one long-tail item, a single feature.

    The hand-set product model scores increase with ``A_u * B_v``, so lifting
    the long-tail item's quality entry evens out the relaxed exposure.
    """
    model = init_model("product", 1, hidden=(4,))
    p = model.params
    p["W_U"][:] = 1.0
    p["W_V"][:] = 1.0
    p["W1"][:] = 0.5
    p["b1"][:] = 0.0
    p["W2"][:] = 0.25
    p["b2"][:] = -1.0
    mats = FeatureMatrices(np.array([[3.0], [2.0]]), np.array([[4.0], [1.5]]))
    groups = GroupAssignment(np.array([0, 1], dtype=np.int8))
    users = np.arange(2)
    cand = np.array([[0, 1], [0, 1]])
    return model, mats, groups, users, cand


def coalition_instance(seed, r, merge="product", m=8, n=40, twins=None, dummy=None):
    rng = np.random.default_rng(seed)
    mats = random_matrices(rng, m, n, r)
    model = random_model(rng, merge, r, hidden=(16, 8))
    A, B = mats.A.copy(), mats.B.copy()
    if twins is not None:
        a, b = twins
        A[:, b], B[:, b] = A[:, a], B[:, a]
        for name in ("W_U", "W_V"):
            model.params[name][b] = model.params[name][a]
    if dummy is not None:
        A[:, dummy] = 0.0
        B[:, dummy] = 0.0
    mats = FeatureMatrices(A, B, mats.M)
    groups = random_groups(rng, n, n // 5)
    cand = random_candidates(rng, m, n, 12)
    value = CoalitionValue(model, mats, groups, np.arange(m), cand, 5)
    return model, mats, groups, split_from_candidates(cand, 2), value


# ---------------------------------------------------------------- acceptance fixture

def planted_for(seed: int, r: int = 20) -> list[int]:
    return sorted(int(f) for f in np.random.default_rng(seed).choice(r, size=2, replace=False))


def fixture_config(seed: int, output_dir: str = "run", **overrides) -> RunConfig:
    """The desk-scale planted-bias setting: 200 users, 500 items, 20 features."""
    raw = {
        "seed": seed,
        "output_dir": output_dir,
        "synthetic": {"m": 200, "n": 500, "r": 20, "planted_features": planted_for(seed),
                      "bias_strength": 5.0},
        "min_count": 1,
        "train": {"epochs": 150},
        "cef": {"lam": 1e-3, "beta": 1e-3, "max_iters": 50},
    }
    raw.update(overrides)
    return RunConfig.from_dict(raw)


@lru_cache(maxsize=None)
def trained_fixture(seed: int, merge: str = "product"):
    """``(config, dataset, model)`` for one acceptance seed, built once per session."""
    config = fixture_config(seed, merge_kind=merge)
    ds, _, _ = build_dataset(config)
    model, _ = fit_model(config, ds)
    return config, ds, model


@lru_cache(maxsize=None)
def cef_fixture_ranking(seed: int):
    from cefair.cef import explain_all

    config, ds, model = trained_fixture(seed)
    ranked, failures = explain_all(model, ds.matrices, ds.groups, ds.split, config.cef)
    return ranked, failures


# ---------------------------------------------------------------- gradient checks
#
# Central differences are only a derivative estimate when the stencil stays
# inside one ReLU region. Stencils whose activation pattern differs between
# the two evaluation points are skipped and counted, never silently dropped.

@dataclass
class GradCheck:
    error: float
    checked: int
    skipped: int


def relu_pattern(model, Au, Bv) -> np.ndarray:
    from cefair.ranker import forward

    _, cache = forward(model, Au, Bv)
    return np.concatenate([(z > 0).ravel() for z in cache[4][:-1]])


def _check_coords(rng, shape, limit=32):
    size = int(np.prod(shape))
    flat = np.arange(size) if size <= limit else rng.choice(size, size=limit, replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def training_grad_check(rng, merge, m=20, n=50, r=10, batch=64, eps=1e-5) -> GradCheck:
    """Worst per-tensor relative error of the training-loss gradient against central differences.

    Every entry of tensors with at most 32 entries is checked, plus 32 random
    entries of each larger tensor.
    """
    from cefair.ranker import bce_loss, forward, loss_and_grads

    mats = random_matrices(rng, m, n, r)
    model = random_model(rng, merge, r)
    u = rng.integers(0, m, batch)
    v = rng.integers(0, n, batch)
    y = (rng.random(batch) < 0.5).astype(np.float64)
    Au, Bv = mats.A[u], mats.B[v]
    _, grads = loss_and_grads(model, Au, Bv, y)

    def loss():
        return bce_loss(forward(model, Au, Bv)[0], y), relu_pattern(model, Au, Bv)

    worst, checked, skipped = 0.0, 0, 0
    for name, W in model.params.items():
        analytic, numeric = [], []
        for c in _check_coords(rng, W.shape):
            old = W[c]
            W[c] = old + eps
            hi, pat_hi = loss()
            W[c] = old - eps
            lo, pat_lo = loss()
            W[c] = old
            if not np.array_equal(pat_hi, pat_lo):
                skipped += 1
                continue
            analytic.append(grads[name][c])
            numeric.append((hi - lo) / (2 * eps))
        checked += len(numeric)
        if numeric:
            worst = max(worst, rel_error(analytic, numeric))
    return GradCheck(worst, checked, skipped)


def delta_grad_check(rng, merge, m=20, n=50, r=10, K=5, n_cand=15, eps=1e-5) -> GradCheck:
    """Relative error of the penalised relaxed-disparity gradient wrt the intervention.

    Slates are computed at the evaluation point and then held fixed for the
    finite differences.
    """
    from cefair.cef import CEFConfig, cef_objective
    from cefair.fairness import DisparitySpec, relaxed_disparity
    from cefair.features import CounterfactualMatrices, apply_delta

    mats = random_matrices(rng, m, n, r)
    model = random_model(rng, merge, r)
    groups = random_groups(rng, n)
    cand = random_candidates(rng, m, n, n_cand)
    users = np.arange(m)
    f = int(rng.integers(r))
    if rng.random() < 0.5:
        spec = DisparitySpec("DP")
    else:
        spec = DisparitySpec("EK", float(rng.uniform(0.1, 0.9)))
    cfg = CEFConfig(lam=float(rng.uniform(0.0, 1.0)), K=K, disparity=spec)
    x = rng.normal(0.0, 0.3, m + n)
    _, _, gu, gv, slates = cef_objective(model, mats, groups, users, cand, f, x[:m], x[m:], cfg)
    su = np.repeat(slates.users, slates.K)
    sv = slates.items.ravel()

    def loss(z):
        A, B = apply_delta(mats, CounterfactualMatrices(mats, f, z[:m], z[m:]))
        psi = relaxed_disparity(model, (A, B), slates, groups, spec)
        return psi * psi + cfg.lam * np.linalg.norm(z), relu_pattern(model, A[su], B[sv])

    analytic = np.concatenate([gu, gv])
    keep, numeric = [], []
    for i in range(m + n):
        old = x[i]
        x[i] = old + eps
        hi, pat_hi = loss(x)
        x[i] = old - eps
        lo, pat_lo = loss(x)
        x[i] = old
        if np.array_equal(pat_hi, pat_lo):
            keep.append(i)
            numeric.append((hi - lo) / (2 * eps))
    err = rel_error(analytic[keep], numeric) if keep else 0.0
    return GradCheck(err, len(keep), m + n - len(keep))
