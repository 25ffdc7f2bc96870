"""Feature-aware neural ranker: fusion layer plus a dense tower with a
sigmoid output, trained with binary cross-entropy by mini-batch SGD.

Gradients are derived by hand so the frozen model can be differentiated with
respect to its *inputs*, which the counterfactual optimizer needs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import Catalog, DataError, DatasetSplit
from .features import FeatureMatrices

log = logging.getLogger(__name__)

MERGE_ALIASES = {
    "product": "product",
    "element_wise_product": "product",
    "concat": "concat",
    "concatenation": "concat",
}
ACTIVATIONS = ("relu", "tanh")


class NumericError(RuntimeError):
    """Raised when training or optimisation produces a non-finite loss."""


@dataclass
class RankerModel:
    merge_kind: str
    r: int
    h: int
    hidden: tuple[int, ...] = (256, 64)
    activation: str = "relu"
    seed: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def fusion_out(self) -> int:
        return self.h if self.merge_kind == "product" else 2 * self.h

    def param_names(self) -> list[str]:
        names = ["W_U", "W_V"]
        for t in range(1, self.n_layers + 1):
            names += [f"W{t}", f"b{t}"]
        return names

    def copy(self) -> "RankerModel":
        return RankerModel(self.merge_kind, self.r, self.h, tuple(self.hidden), self.activation,
                           self.seed, {k: v.copy() for k, v in self.params.items()})


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 256
    negatives_per_positive: int = 1
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer != "sgd":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class Slate:
    """Row i holds the top-K list of ``users[i]``, ranked over ``candidates[i]``."""

    users: np.ndarray
    items: np.ndarray
    candidates: np.ndarray

    @property
    def K(self) -> int:
        return self.items.shape[1]

    def prefix(self, K: int) -> "Slate":
        if K > self.K:
            raise ValueError(f"slate has K={self.K}, cannot take top {K}")
        return Slate(self.users, self.items[:, :K], self.candidates)


# ---------------------------------------------------------------- model

def init_model(merge_kind: str, r: int, h: int | None = None, seed: int = 0,
               hidden=(256, 64), activation: str = "relu") -> RankerModel:
    """Glorot-uniform weights, zero biases. ``h`` defaults to ``r``."""
    try:
        merge_kind = MERGE_ALIASES[merge_kind]
    except KeyError:
        raise ValueError(f"unknown merge kind {merge_kind!r}") from None
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    h = r if h is None else h
    if r < 1 or h < 1:
        raise ValueError("r and h must be >= 1")
    model = RankerModel(merge_kind, r, h, tuple(int(x) for x in hidden), activation, seed)
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    model.params["W_U"] = glorot(r, h)
    model.params["W_V"] = glorot(r, h)
    dims = [model.fusion_out, *model.hidden, 1]
    for t in range(1, len(dims)):
        model.params[f"W{t}"] = glorot(dims[t - 1], dims[t])
        model.params[f"b{t}"] = np.zeros(dims[t])
    return model


def _act(kind, z):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(kind, z, a):
    return (z > 0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


def forward(model: RankerModel, Au: np.ndarray, Bv: np.ndarray):
    """Batched forward pass. Returns ``(logits, cache)``; ``Au``/``Bv`` are (batch, r)."""
    p = model.params
    P = Au @ p["W_U"]
    Q = Bv @ p["W_V"]
    x = P * Q if model.merge_kind == "product" else np.concatenate([P, Q], axis=1)
    zs, acts = [], [x]
    for t in range(1, model.n_layers + 1):
        z = acts[-1] @ p[f"W{t}"] + p[f"b{t}"]
        zs.append(z)
        if t < model.n_layers:
            acts.append(_act(model.activation, z))
    logits = zs[-1][:, 0]
    return logits, (Au, Bv, P, Q, zs, acts)


def backward(model: RankerModel, cache, dlogits: np.ndarray, want_params=True, want_inputs=False):
    """Backpropagate ``dlogits`` (batch,). Returns ``(param_grads, dAu, dBv)``."""
    p = model.params
    Au, Bv, P, Q, zs, acts = cache
    grads = {}
    d = dlogits[:, None]
    for t in range(model.n_layers, 0, -1):
        if want_params:
            grads[f"W{t}"] = acts[t - 1].T @ d
            grads[f"b{t}"] = d.sum(axis=0)
        d = d @ p[f"W{t}"].T
        if t > 1:
            d = d * _act_grad(model.activation, zs[t - 2], acts[t - 1])
    if model.merge_kind == "product":
        dP, dQ = d * Q, d * P
    else:
        dP, dQ = d[:, : model.h], d[:, model.h:]
    if want_params:
        grads["W_U"] = Au.T @ dP
        grads["W_V"] = Bv.T @ dQ
    dAu = dP @ p["W_U"].T if want_inputs else None
    dBv = dQ @ p["W_V"].T if want_inputs else None
    return grads, dAu, dBv


def logits_only(model: RankerModel, Au: np.ndarray, Bv: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Forward pass without a backprop cache; ``dtype`` selects the arithmetic precision."""
    p = {k: v.astype(dtype, copy=False) for k, v in model.params.items()}
    P = Au.astype(dtype, copy=False) @ p["W_U"]
    Q = Bv.astype(dtype, copy=False) @ p["W_V"]
    if model.merge_kind == "product":
        P *= Q
        x = P
    else:
        x = np.concatenate([P, Q], axis=1)
    for t in range(1, model.n_layers + 1):
        x = x @ p[f"W{t}"]
        x += p[f"b{t}"]
        if t < model.n_layers:
            if model.activation == "relu":
                np.maximum(x, 0.0, out=x)
            else:
                np.tanh(x, out=x)
    return x[:, 0].astype(np.float64)


def predict(model: RankerModel, Au: np.ndarray, Bv: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, np.atleast_2d(Au), np.atleast_2d(Bv))
    return expit(logits)


def score(model: RankerModel, A_u, B_v) -> float:
    return float(predict(model, np.asarray(A_u, float)[None], np.asarray(B_v, float)[None])[0])


def score_pairs(model: RankerModel, A, B, users, items, chunk: int = 65536,
                dtype=np.float64) -> np.ndarray:
    """Scores for index pairs ``(users[i], items[i])`` using rows of ``A`` and ``B``."""
    users = np.asarray(users).ravel()
    items = np.asarray(items).ravel()
    out = np.empty(len(users))
    for s in range(0, len(users), chunk):
        e = s + chunk
        out[s:e] = expit(logits_only(model, A[users[s:e]], B[items[s:e]], dtype))
    return out


def grad_wrt_inputs(model: RankerModel, A_u, B_v):
    """Exact ``(d yhat / d A_u, d yhat / d B_v)`` for a single pair."""
    Au = np.asarray(A_u, float)[None]
    Bv = np.asarray(B_v, float)[None]
    logits, cache = forward(model, Au, Bv)
    y = expit(logits)
    _, dA, dB = backward(model, cache, y * (1 - y), want_params=False, want_inputs=True)
    return dA[0], dB[0]


def bce_loss(logits, y):
    """Mean binary cross-entropy computed from logits."""
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def loss_and_grads(model: RankerModel, Au, Bv, y):
    """Mean cross-entropy over the batch and its gradient wrt every parameter."""
    logits, cache = forward(model, Au, Bv)
    dlogits = (expit(logits) - y) / len(y)
    grads, _, _ = backward(model, cache, dlogits)
    return bce_loss(logits, y), grads


# ---------------------------------------------------------------- training

def _sample_negatives(rng, users, n_items, observed_keys, n_items_total):
    """Uniform items each user has not interacted with (rejection sampling)."""
    neg = rng.integers(0, n_items, size=len(users))
    bad = np.isin(users * n_items_total + neg, observed_keys)
    while bad.any():
        neg[bad] = rng.integers(0, n_items, size=int(bad.sum()))
        bad = np.isin(users * n_items_total + neg, observed_keys)
    return neg


def train(model: RankerModel, matrices: FeatureMatrices, split: DatasetSplit, catalog: Catalog,
          config: TrainConfig, groups=None):
    """Fit the model in place; returns ``(model, per-epoch mean loss)``.

    Positives are the training interactions; every epoch draws
    ``negatives_per_positive`` fresh unobserved items per positive.
    ``groups`` is accepted for interface symmetry and unused.
    """
    if matrices.m != catalog.m or matrices.n != catalog.n:
        raise DataError("matrices and split do not share a catalog")
    pos = split.train_pairs(catalog)
    observed = [(catalog.user_index[x.user_id], catalog.item_index[x.item_id])
                for x in split.train + split.validation]
    keys = np.unique(np.array([u * catalog.n + v for u, v in observed], dtype=np.int64))
    rng = np.random.default_rng(config.seed)
    A, B = matrices.A, matrices.B
    trace = []
    for epoch in range(config.epochs):
        users = np.repeat(pos[:, 0], config.negatives_per_positive)
        negs = _sample_negatives(rng, users, catalog.n, keys, catalog.n)
        u_all = np.concatenate([pos[:, 0], users])
        v_all = np.concatenate([pos[:, 1], negs])
        y_all = np.concatenate([np.ones(len(pos)), np.zeros(len(users))])
        order = rng.permutation(len(y_all))
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads = loss_and_grads(model, A[u_all[idx]], B[v_all[idx]], y_all[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {s}")
            for k, g in grads.items():
                model.params[k] -= config.learning_rate * g
            total += loss * len(idx)
        trace.append(total / len(order))
        log.debug("epoch %d loss %.6f", epoch, trace[-1])
    return model, trace


# ---------------------------------------------------------------- ranking

def rank_scores(scores: np.ndarray, candidates: np.ndarray, K: int) -> np.ndarray:
    """Top-K candidates per row by score descending, ties by item index ascending."""
    if K > candidates.shape[1]:
        raise ValueError(f"K={K} exceeds candidate set size {candidates.shape[1]}")
    by_item = np.argsort(candidates, axis=1, kind="stable")
    c = np.take_along_axis(candidates, by_item, axis=1)
    s = np.take_along_axis(scores, by_item, axis=1)
    top = np.argsort(-s, axis=1, kind="stable")[:, :K]
    return np.take_along_axis(c, top, axis=1)


def candidate_scores(model, A, B, users, candidates, dtype=np.float64) -> np.ndarray:
    users = np.asarray(users)
    U = np.repeat(users, candidates.shape[1])
    return score_pairs(model, A, B, U, candidates.ravel(), dtype=dtype).reshape(candidates.shape)


def top_k(model: RankerModel, matrices, users, candidates, K: int, dtype=np.float64) -> Slate:
    """``matrices`` may be a FeatureMatrices or an ``(A, B)`` tuple."""
    A, B = (matrices.A, matrices.B) if isinstance(matrices, FeatureMatrices) else matrices
    users = np.asarray(users, dtype=np.int64)
    candidates = np.asarray(candidates, dtype=np.int64)
    scores = candidate_scores(model, A, B, users, candidates, dtype)
    return Slate(users, rank_scores(scores, candidates, K), candidates)


def evaluate_ranking(slates: Slate, split: DatasetSplit, K_list=(5, 20, 50)) -> dict:
    """Mean F1@K and NDCG@K over users, in percent."""
    m, P = split.test_positives.shape
    row_of = {int(u): i for i, u in enumerate(slates.users)}
    missing = [u for u in range(m) if u not in row_of]
    if missing:
        raise DataError(f"users missing from slates: {missing[:5]}")
    out = {}
    for K in K_list:
        f1s, ndcgs = [], []
        idcg = np.sum(1.0 / np.log2(np.arange(2, min(P, K) + 2)))
        for u in range(m):
            lst = slates.items[row_of[u], :K]
            hit = np.isin(lst, split.test_positives[u])
            hits = int(hit.sum())
            prec, rec = hits / K, hits / P
            f1s.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
            dcg = np.sum(1.0 / np.log2(np.flatnonzero(hit) + 2.0))
            ndcgs.append(dcg / idcg)
        out[K] = {"f1": 100 * float(np.mean(f1s)), "ndcg": 100 * float(np.mean(ndcgs))}
    return out


# ---------------------------------------------------------------- persistence

def save_model(model: RankerModel, path):
    names = model.param_names()
    header = json.dumps({
        "merge_kind": model.merge_kind, "r": model.r, "h": model.h,
        "hidden": list(model.hidden), "activation": model.activation, "seed": model.seed,
        "params": [[k, list(model.params[k].shape)] for k in names],
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for k in names:
            fh.write(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())


def load_model(path) -> RankerModel:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    hd = json.loads(raw[8:8 + hlen])
    model = RankerModel(hd["merge_kind"], hd["r"], hd["h"], tuple(hd["hidden"]),
                        hd["activation"], hd["seed"])
    off = 8 + hlen
    for name, shape in hd["params"]:
        size = int(np.prod(shape))
        model.params[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes in model checkpoint")
    return model


def param_digest(model: RankerModel) -> str:
    h = hashlib.sha256()
    for k in model.param_names():
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())
    return h.hexdigest()
