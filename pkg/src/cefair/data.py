"""Ingestion of interaction logs and sentiment quadruples, review-count
filtering, chronological hold-out splits and popularity grouping."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for malformed input files or inconsistent datasets."""


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    timestamp: int
    rating: float | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class SentimentQuadruple:
    user_id: str
    item_id: str
    feature_id: str
    sentiment: int

    def __post_init__(self):
        if self.sentiment not in (1, -1):
            raise DataError(f"sentiment must be +1 or -1, got {self.sentiment}")


@dataclass
class Catalog:
    users: list[str]
    items: list[str]
    features: list[str]
    user_index: dict[str, int] = field(init=False, repr=False)
    item_index: dict[str, int] = field(init=False, repr=False)
    feature_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.user_index = _index(self.users, "user")
        self.item_index = _index(self.items, "item")
        self.feature_index = _index(self.features, "feature")

    @property
    def m(self) -> int:
        return len(self.users)

    @property
    def n(self) -> int:
        return len(self.items)

    @property
    def r(self) -> int:
        return len(self.features)

    def to_dict(self) -> dict:
        return {"users": self.users, "items": self.items, "features": self.features}

    @classmethod
    def from_dict(cls, d: dict) -> "Catalog":
        return cls(list(d["users"]), list(d["items"]), list(d["features"]))


def _index(names, kind):
    idx = {name: i for i, name in enumerate(names)}
    if len(idx) != len(names):
        raise DataError(f"duplicate {kind} ids in catalog")
    return idx


@dataclass
class DatasetSplit:
    """Per-user hold-out split in catalog index space.

    ``test_positives`` is (m, P) and ``test_negatives`` is (m, N); row u
    belongs to user index u.
    """

    train: list[InteractionRecord]
    validation: list[InteractionRecord]
    test_positives: np.ndarray
    test_negatives: np.ndarray

    @property
    def candidates(self) -> np.ndarray:
        return np.concatenate([self.test_positives, self.test_negatives], axis=1)

    def train_pairs(self, catalog: Catalog) -> np.ndarray:
        return np.array(
            [(catalog.user_index[x.user_id], catalog.item_index[x.item_id]) for x in self.train],
            dtype=np.int64,
        ).reshape(-1, 2)

    def to_dict(self) -> dict:
        return {
            "train": [_record_to_dict(x) for x in self.train],
            "validation": [_record_to_dict(x) for x in self.validation],
            "test_positives": self.test_positives.tolist(),
            "test_negatives": self.test_negatives.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(
            train=[_record_from_dict(x) for x in d["train"]],
            validation=[_record_from_dict(x) for x in d["validation"]],
            test_positives=np.asarray(d["test_positives"], dtype=np.int64),
            test_negatives=np.asarray(d["test_negatives"], dtype=np.int64),
        )


def _record_to_dict(x: InteractionRecord) -> dict:
    d = {"user": x.user_id, "item": x.item_id, "ts": x.timestamp}
    if x.rating is not None:
        d["rating"] = x.rating
    return d


def _record_from_dict(d: dict) -> InteractionRecord:
    return InteractionRecord(str(d["user"]), str(d["item"]), int(d["ts"]), d.get("rating"))


@dataclass
class GroupAssignment:
    """``group_of[v]`` is 0 for popular items (G0) and 1 for long-tail items (G1)."""

    group_of: np.ndarray

    @property
    def g0_size(self) -> int:
        return int(np.sum(self.group_of == 0))

    @property
    def g1_size(self) -> int:
        return int(np.sum(self.group_of == 1))

    @property
    def n(self) -> int:
        return len(self.group_of)


# ---------------------------------------------------------------- parsing

def _read_lines(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    lines = [(i, line) for i, line in enumerate(text.splitlines(), start=1) if line.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    return lines


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("tsv", "jsonl"):
            raise DataError(f"unknown format {fmt!r}")
        return fmt
    return "jsonl" if str(path).endswith((".jsonl", ".json")) else "tsv"


def parse_interactions(path, format: str | None = None) -> list[InteractionRecord]:
    """Read ``user, item, ts[, rating]`` records as TSV columns or JSONL keys."""
    fmt = _infer_format(path, format)
    out = []
    for lineno, line in _read_lines(path):
        try:
            if fmt == "tsv":
                cols = line.rstrip("\n").split("\t")
                if len(cols) < 3:
                    raise ValueError(f"expected at least 3 columns, got {len(cols)}")
                rating = float(cols[3]) if len(cols) > 3 and cols[3] != "" else None
                rec = InteractionRecord(cols[0], cols[1], int(cols[2]), rating)
            else:
                obj = json.loads(line)
                rating = obj.get("rating")
                rec = InteractionRecord(
                    str(obj["user"]), str(obj["item"]), int(obj["ts"]),
                    None if rating is None else float(rating),
                )
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
        out.append(rec)
    return out


def parse_quadruples(path, format: str | None = None) -> list[SentimentQuadruple]:
    """Read ``user, item, feature, sentiment`` quadruples (sentiment +1/-1)."""
    fmt = _infer_format(path, format)
    out = []
    for lineno, line in _read_lines(path):
        try:
            if fmt == "tsv":
                cols = line.rstrip("\n").split("\t")
                if len(cols) != 4:
                    raise ValueError(f"expected 4 columns, got {len(cols)}")
                user, item, feat, sent = cols
            else:
                obj = json.loads(line)
                user, item, feat, sent = obj["user"], obj["item"], obj["feature"], obj["sentiment"]
            out.append(SentimentQuadruple(str(user), str(item), str(feat), int(sent)))
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    return out


# ---------------------------------------------------------------- filtering

def filter_min_reviews(interactions, quadruples, min_count: int = 20, features=None):
    """Drop users and items with fewer than ``min_count`` interactions,
    repeating until every survivor meets the threshold.

    Users and items keep their first-appearance order. ``features`` fixes the
    feature list (and its order); by default it is every feature mentioned
    in the surviving quadruples, in first-appearance order.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    kept = list(interactions)
    while True:
        ucount = Counter(x.user_id for x in kept)
        icount = Counter(x.item_id for x in kept)
        nxt = [x for x in kept if ucount[x.user_id] >= min_count and icount[x.item_id] >= min_count]
        if len(nxt) == len(kept):
            break
        kept = nxt
    if not kept:
        raise DataError("dataset too sparse: no users or items survive filtering")

    users = list(dict.fromkeys(x.user_id for x in kept))
    items = list(dict.fromkeys(x.item_id for x in kept))
    uset, iset = set(users), set(items)
    quads = [q for q in quadruples if q.user_id in uset and q.item_id in iset]
    if features is None:
        features = list(dict.fromkeys(q.feature_id for q in quads))
    else:
        fset = set(features)
        quads = [q for q in quads if q.feature_id in fset]
    return kept, quads, Catalog(users, items, list(features))


# ---------------------------------------------------------------- splitting

def chronological_split(interactions, catalog: Catalog, holdout: int = 5,
                        negatives: int = 100, seed: int = 0) -> DatasetSplit:
    """Hold out each user's last ``holdout`` items plus ``negatives`` sampled
    unseen items; the last remaining item goes to validation.

    Timestamp ties keep input order.
    """
    if catalog.n < holdout + negatives:
        raise DataError(
            f"catalog has {catalog.n} items, need at least {holdout + negatives} candidates"
        )
    per_user: list[list[InteractionRecord]] = [[] for _ in range(catalog.m)]
    for x in interactions:
        per_user[catalog.user_index[x.user_id]].append(x)

    rng = np.random.default_rng(seed)
    train, validation = [], []
    pos = np.empty((catalog.m, holdout), dtype=np.int64)
    neg = np.empty((catalog.m, negatives), dtype=np.int64)
    for u, recs in enumerate(per_user):
        if len(recs) < holdout + 2:
            raise DataError(
                f"user {catalog.users[u]!r} has {len(recs)} interactions, needs {holdout + 2}"
            )
        recs = sorted(recs, key=lambda x: x.timestamp)  # stable
        test, rest = recs[-holdout:], recs[:-holdout]
        validation.append(rest[-1])
        train.extend(rest[:-1])
        pos[u] = [catalog.item_index[x.item_id] for x in test]
        seen = {catalog.item_index[x.item_id] for x in recs}
        pool = np.array([v for v in range(catalog.n) if v not in seen], dtype=np.int64)
        if len(pool) < negatives:
            raise DataError(f"user {catalog.users[u]!r} has only {len(pool)} unseen items")
        neg[u] = rng.choice(pool, size=negatives, replace=False)
    return DatasetSplit(train, validation, pos, neg)


def assign_groups(train_interactions, catalog: Catalog, top_fraction: float = 0.2) -> GroupAssignment:
    if not 0 < top_fraction < 1:
        raise ValueError("top_fraction must be in (0, 1)")
    counts = np.zeros(catalog.n, dtype=np.int64)
    for x in train_interactions:
        counts[catalog.item_index[x.item_id]] += 1
    # round before ceil so 0.2 * 15 -> 3, not 4
    g0 = math.ceil(round(top_fraction * catalog.n, 9))
    order = np.argsort(-counts, kind="stable")
    group_of = np.ones(catalog.n, dtype=np.int8)
    group_of[order[:g0]] = 0
    return GroupAssignment(group_of)


# ---------------------------------------------------------------- writing

def write_interactions(records, path, format: str = "tsv"):
    with open(path, "w", encoding="utf-8") as fh:
        for x in records:
            if format == "tsv":
                cols = [x.user_id, x.item_id, str(x.timestamp)]
                if x.rating is not None:
                    cols.append(repr(x.rating))
                fh.write("\t".join(cols) + "\n")
            else:
                fh.write(json.dumps(_record_to_dict(x)) + "\n")


def write_quadruples(quads, path, format: str = "tsv"):
    with open(path, "w", encoding="utf-8") as fh:
        for q in quads:
            if format == "tsv":
                fh.write(f"{q.user_id}\t{q.item_id}\t{q.feature_id}\t{q.sentiment}\n")
            else:
                fh.write(json.dumps({"user": q.user_id, "item": q.item_id,
                                     "feature": q.feature_id, "sentiment": q.sentiment}) + "\n")
