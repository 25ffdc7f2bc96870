"""Desk-scale synthetic datasets with a planted, feature-driven popularity bias.

Items that score high on the planted features receive proportionally more
interactions, so the resulting popularity skew is attributable to those
features. Non-planted features carry user taste (personalisation) signal.

Generation, per seed:

* every user picks ``tastes_per_user`` and every item ``tastes_per_item``
  taste features from the non-planted ones;
* item v is "high" on each planted feature with probability ``high_fraction``;
  its popularity multiplier is ``1 + bias_strength * share_of_planted_high``;
* item v receives ``Poisson(base * multiplier)`` interactions, from distinct
  users drawn with weight ``exp(taste_strength * taste_overlap)``. With zero
  bias the item counts are i.i.d. Poisson, i.e. uniform across items;
* every item gets the same number of reviews, written by its interactors, so
  review volume does not leak popularity into the non-planted columns. A
  review mentions the author's tastes, the item's tastes, the planted
  features (more often when the item is high on them; sentiment follows the
  planted level) and occasionally anything else. Mentions of a feature the
  item is not built around are mostly negative.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Catalog, InteractionRecord, SentimentQuadruple


@dataclass
class SynthConfig:
    m: int = 200
    n: int = 500
    r: int = 20
    planted_features: list[int] = field(default_factory=lambda: [0, 1])
    bias_strength: float = 5.0
    seed: int = 0
    interactions_per_user: float = 25.0
    min_user_interactions: int = 10
    tastes_per_user: int = 3
    tastes_per_item: int = 3
    taste_strength: float = 2.5
    high_fraction: float = 0.25
    reviews_per_item: int = 8
    p_user_taste_mention: float = 0.6
    p_item_taste_mention: float = 0.5
    p_planted_high: float = 0.6
    p_planted_low: float = 0.3
    p_other_mention: float = 0.05
    sentiment_noise: float = 0.1
    p_offtaste_positive: float = 0.2

    def __post_init__(self):
        self.planted_features = sorted(int(f) for f in self.planted_features)
        if min(self.m, self.n, self.r) < 2:
            raise ValueError("m, n and r must all be >= 2")
        if not self.planted_features:
            raise ValueError("at least one planted feature is required")
        if len(set(self.planted_features)) != len(self.planted_features):
            raise ValueError("planted features must be distinct")
        if self.planted_features[0] < 0 or self.planted_features[-1] >= self.r:
            raise ValueError(f"planted features must lie in 0..{self.r - 1}")
        if self.bias_strength < 0:
            raise ValueError("bias_strength must be non-negative")
        n_taste = self.r - len(self.planted_features)
        if n_taste < max(self.tastes_per_user, self.tastes_per_item):
            raise ValueError("not enough non-planted features for the requested tastes")
        if self.min_user_interactions > self.n:
            raise ValueError("min_user_interactions exceeds catalog size")

    def to_dict(self) -> dict:
        return asdict(self)


def _pick(rng, rows, width, pool, k):
    mask = np.zeros((rows, width), dtype=bool)
    pool = np.asarray(pool)
    for i in range(rows):
        mask[i, rng.choice(pool, size=k, replace=False)] = True
    return mask


def synth_generate(config: SynthConfig):
    """Returns ``(interactions, quadruples, catalog, planted_feature_set)``."""
    c = config
    rng = np.random.default_rng(c.seed)
    planted = c.planted_features
    taste_pool = [f for f in range(c.r) if f not in set(planted)]

    user_taste = _pick(rng, c.m, c.r, taste_pool, c.tastes_per_user)
    item_taste = _pick(rng, c.n, c.r, taste_pool, c.tastes_per_item)
    high = rng.random((c.n, len(planted))) < c.high_fraction
    multiplier = 1.0 + c.bias_strength * high.mean(axis=1)

    overlap = user_taste.astype(np.float64) @ item_taste.T.astype(np.float64)
    affinity = np.exp(c.taste_strength * overlap)
    base = c.interactions_per_user * c.m / (c.n * multiplier.mean())
    counts = np.minimum(rng.poisson(base * multiplier), c.m)

    pairs = []
    per_user = [set() for _ in range(c.m)]
    for v in range(c.n):
        if counts[v] == 0:
            continue
        w = affinity[:, v] / affinity[:, v].sum()
        for u in rng.choice(c.m, size=counts[v], replace=False, p=w):
            pairs.append((int(u), v))
            per_user[u].add(v)
    # top up sparse users so every user survives the hold-out split
    for u in range(c.m):
        deficit = c.min_user_interactions - len(per_user[u])
        if deficit > 0:
            w = affinity[u] * multiplier
            w[list(per_user[u])] = 0.0
            for v in rng.choice(c.n, size=deficit, replace=False, p=w / w.sum()):
                pairs.append((u, int(v)))
                per_user[u].add(int(v))

    users = [f"u{i:04d}" for i in range(c.m)]
    items = [f"i{j:04d}" for j in range(c.n)]
    features = [f"f{k:02d}" for k in range(c.r)]
    stamps = rng.integers(0, 10**6, size=len(pairs))
    interactions = [InteractionRecord(users[u], items[v], int(t)) for (u, v), t in zip(pairs, stamps)]

    interactors = [[] for _ in range(c.n)]
    for u, v in pairs:
        interactors[v].append(u)
    high_of = np.zeros((c.n, c.r), dtype=bool)
    high_of[:, planted] = high
    is_planted = np.zeros(c.r, dtype=bool)
    is_planted[planted] = True
    quads = []
    for v in range(c.n):
        pool = np.array(interactors[v] or range(c.m))
        p_item = np.where(is_planted, np.where(high_of[v], c.p_planted_high, c.p_planted_low),
                          np.where(item_taste[v], c.p_item_taste_mention, c.p_other_mention))
        for u in rng.choice(pool, size=c.reviews_per_item):
            p_mention = np.where(user_taste[u], np.maximum(p_item, c.p_user_taste_mention), p_item)
            mentioned = np.flatnonzero(rng.random(c.r) < p_mention)
            flips = rng.random(len(mentioned)) < c.sentiment_noise
            coins = rng.random(len(mentioned)) < c.p_offtaste_positive
            for f, flip, coin in zip(mentioned, flips, coins):
                if is_planted[f]:
                    positive = bool(high_of[v, f])
                elif item_taste[v, f]:
                    positive = True
                else:
                    positive = bool(coin)
                if flip:
                    positive = not positive
                quads.append(SentimentQuadruple(users[int(u)], items[v], features[f],
                                                1 if positive else -1))

    return interactions, quads, Catalog(users, items, features), set(planted)
