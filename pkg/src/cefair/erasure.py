"""Erasure evaluation: zero the top-E explanation features, re-rank with the
frozen model and measure utility (F1, NDCG) and fairness (long-tail rate, KL)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSplit, GroupAssignment
from .fairness import kl_at_k, long_tail_rate
from .features import FeatureMatrices, erase_features
from .ranker import RankerModel, evaluate_ranking, top_k

CSV_COLUMNS = ("method", "E", "K", "f1", "ndcg", "ltr", "kl")


@dataclass
class TradeoffPoint:
    """Metrics after erasing ``E`` features; ``metrics[K]`` holds f1, ndcg, ltr, kl in percent."""

    method: str
    E: int
    metrics: dict[int, dict[str, float]] = field(default_factory=dict)

    def rows(self):
        for K in sorted(self.metrics):
            mk = self.metrics[K]
            yield {"method": self.method, "E": self.E, "K": K,
                   **{k: mk[k] for k in ("f1", "ndcg", "ltr", "kl")}}


def _ranked(ranking):
    return list(getattr(ranking, "ranked_features", ranking))


def slate_metrics(slates, split: DatasetSplit, groups: GroupAssignment, K_list) -> dict:
    util = evaluate_ranking(slates, split, K_list)
    out = {}
    for K in K_list:
        top = slates.prefix(K)
        out[K] = {"f1": util[K]["f1"], "ndcg": util[K]["ndcg"],
                  "ltr": 100.0 * long_tail_rate(top, groups),
                  "kl": 100.0 * kl_at_k(top, groups)}
    return out


def erase_and_eval(model: RankerModel, matrices: FeatureMatrices, ranking, E: int,
                   split: DatasetSplit, groups: GroupAssignment, K_list=(5, 20, 50),
                   method: str = "") -> TradeoffPoint:
    """Erase the first ``E`` features of ``ranking`` from both matrices and re-evaluate.

    ``ranking`` is a list of feature indices or anything with ``ranked_features``.
    """
    features = _ranked(ranking)
    if not 0 <= E <= matrices.r or E > len(features):
        raise ValueError(f"E={E} outside 0..{min(matrices.r, len(features))}")
    erased = erase_features(matrices, features[:E])
    candidates = split.candidates
    users = np.arange(candidates.shape[0])
    slates = top_k(model, erased, users, candidates, max(K_list))
    return TradeoffPoint(method, E, slate_metrics(slates, split, groups, K_list))


def tradeoff_curve(model: RankerModel, matrices: FeatureMatrices, ranking, split: DatasetSplit,
                   groups: GroupAssignment, step: int = 5, max_E: int | None = None,
                   K_list=(5, 20, 50), method: str = "") -> list[TradeoffPoint]:
    """Points at E = 0, step, 2*step, ... <= max_E over cumulative prefixes of ``ranking``."""
    if step < 1:
        raise ValueError("step must be >= 1")
    max_E = matrices.r if max_E is None else max_E
    return [erase_and_eval(model, matrices, ranking, E, split, groups, K_list, method)
            for E in range(0, max_E + 1, step)]


def _fmt(x: float) -> str:
    return f"{x:.4g}"


def curves_to_csv(points) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for p in points:
        for row in p.rows():
            writer.writerow([row["method"], row["E"], row["K"],
                             *(_fmt(row[k]) for k in CSV_COLUMNS[3:])])
    return buf.getvalue()


def curves_to_json(points, config: dict | None = None, version: str | None = None) -> str:
    rows = [{**row, **{k: float(_fmt(row[k])) for k in CSV_COLUMNS[3:]}}
            for p in points for row in p.rows()]
    doc = {"rows": rows}
    if config is not None:
        doc["config"] = config
    if version is not None:
        doc["version"] = version
    return json.dumps(doc, indent=2, sort_keys=True)


def plot_data(points) -> dict[int, dict[str, list[list[float]]]]:
    """Per K, per method: ``[[long-tail rate, NDCG], ...]`` in E order."""
    out: dict[int, dict[str, list[list[float]]]] = {}
    for p in sorted(points, key=lambda p: (p.method, p.E)):
        for K, mk in p.metrics.items():
            out.setdefault(K, {}).setdefault(p.method, []).append([mk["ltr"], mk["ndcg"]])
    return out
