"""User-feature attention and item-feature quality matrices."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Catalog, DataError


def _frozen(x):
    x = np.array(x, dtype=np.float64)
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class FeatureMatrices:
    """``A`` is users x features, ``B`` is items x features, ``M`` the rating scale."""

    A: np.ndarray
    B: np.ndarray
    M: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(self.A))
        object.__setattr__(self, "B", _frozen(self.B))
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[1]:
            raise ValueError(f"incompatible shapes {self.A.shape} and {self.B.shape}")

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def r(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class CounterfactualMatrices:
    base: FeatureMatrices
    feature: int
    delta_u: np.ndarray | None = None
    delta_v: np.ndarray | None = None


def attention_score(t, M=5.0):
    """Rescale a mention count into (1, M); zero counts map to 0."""
    t = np.asarray(t, dtype=np.float64)
    val = 1.0 + (M - 1.0) * (2.0 / (1.0 + np.exp(-t)) - 1.0)
    return np.where(t > 0, val, 0.0)


def quality_score(t, mean_sentiment, M=5.0):
    """Rescale mention count times mean sentiment into (1, M); zero counts map to 0."""
    t = np.asarray(t, dtype=np.float64)
    val = 1.0 + (M - 1.0) / (1.0 + np.exp(-t * mean_sentiment))
    return np.where(t > 0, val, 0.0)


def build_matrices(quadruples, catalog: Catalog, M: float = 5.0) -> FeatureMatrices:
    if M <= 1:
        raise ValueError("rating scale M must exceed 1")
    t_user = np.zeros((catalog.m, catalog.r))
    t_item = np.zeros((catalog.n, catalog.r))
    s_item = np.zeros((catalog.n, catalog.r))
    for q in quadruples:
        try:
            u = catalog.user_index[q.user_id]
            v = catalog.item_index[q.item_id]
            f = catalog.feature_index[q.feature_id]
        except KeyError as e:
            raise DataError(f"unknown id {e.args[0]!r} in quadruple {q}") from None
        t_user[u, f] += 1
        t_item[v, f] += 1
        s_item[v, f] += q.sentiment
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_sent = np.where(t_item > 0, s_item / np.maximum(t_item, 1), 0.0)
    return FeatureMatrices(attention_score(t_user, M), quality_score(t_item, mean_sent, M), M)


def _check_features(feature_set, r):
    fs = sorted(set(int(f) for f in feature_set))
    if fs and (fs[0] < 0 or fs[-1] >= r):
        raise IndexError(f"feature index out of range 0..{r - 1}: {fs}")
    return fs


def erase_features(matrices: FeatureMatrices, feature_set) -> FeatureMatrices:
    """Zero the given feature columns in both matrices."""
    fs = _check_features(feature_set, matrices.r)
    A = matrices.A.copy()
    B = matrices.B.copy()
    A[:, fs] = 0.0
    B[:, fs] = 0.0
    return FeatureMatrices(A, B, matrices.M)


def apply_delta(matrices: FeatureMatrices, intervention: CounterfactualMatrices):
    """Return ``(A_cf, B_cf)`` with the intervention added to one column. Not clamped."""
    f = intervention.feature
    _check_features([f], matrices.r)
    A, B = matrices.A, matrices.B
    if intervention.delta_u is not None:
        du = np.asarray(intervention.delta_u, dtype=np.float64)
        if du.shape != (matrices.m,):
            raise ValueError(f"delta_u has shape {du.shape}, expected ({matrices.m},)")
        A = A.copy()
        A[:, f] += du
    if intervention.delta_v is not None:
        dv = np.asarray(intervention.delta_v, dtype=np.float64)
        if dv.shape != (matrices.n,):
            raise ValueError(f"delta_v has shape {dv.shape}, expected ({matrices.n},)")
        B = B.copy()
        B[:, f] += dv
    return A, B


# ---------------------------------------------------------------- persistence
#
# Binary layout: 8-byte little-endian header length, UTF-8 JSON header,
# then A and B as little-endian float64, row-major.

def save_matrices(matrices: FeatureMatrices, path):
    header = json.dumps({"m": matrices.m, "n": matrices.n, "r": matrices.r, "M": matrices.M},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(matrices.A, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(matrices.B, dtype="<f8").tobytes())


def load_matrices(path) -> FeatureMatrices:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen])
    m, n, r = header["m"], header["n"], header["r"]
    body = np.frombuffer(raw[8 + hlen:], dtype="<f8")
    if body.size != (m + n) * r:
        raise DataError(f"{path}: expected {(m + n) * r} values, found {body.size}")
    A = body[: m * r].reshape(m, r)
    B = body[m * r:].reshape(n, r)
    return FeatureMatrices(A, B, float(header["M"]))


def export_csv(matrices: FeatureMatrices, catalog: Catalog, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, mat, rows in (("user_feature.csv", matrices.A, catalog.users),
                            ("item_feature.csv", matrices.B, catalog.items)):
        with open(directory / name, "w", encoding="utf-8") as fh:
            fh.write("id," + ",".join(catalog.features) + "\n")
            for rid, row in zip(rows, mat):
                fh.write(rid + "," + ",".join(repr(float(x)) for x in row) + "\n")
