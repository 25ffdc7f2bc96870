import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cefair.data import (Catalog, DataError, DatasetSplit, InteractionRecord, SentimentQuadruple,
                         assign_groups, chronological_split, filter_min_reviews,
                         parse_interactions, parse_quadruples, write_interactions,
                         write_quadruples)
from helpers import catalog_of, records


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestParsing:
    def test_tsv_interaction(self, tmp_path):
        recs = parse_interactions(write(tmp_path, "a.tsv", "u1\ti9\t100\n"))
        assert recs == [InteractionRecord("u1", "i9", 100, None)]

    def test_jsonl_interaction_with_rating(self, tmp_path):
        p = write(tmp_path, "a.jsonl", json.dumps({"user": "a", "item": "b", "ts": 5, "rating": 4.0}))
        assert parse_interactions(p) == [InteractionRecord("a", "b", 5, 4.0)]

    def test_missing_column_reports_line(self, tmp_path):
        p = write(tmp_path, "a.tsv", "u1\ti9\t1\nu1\ti9\n")
        with pytest.raises(DataError, match=r"a\.tsv:2"):
            parse_interactions(p)

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError, match="empty"):
            parse_interactions(write(tmp_path, "a.tsv", ""))

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(DataError, match="nope.tsv"):
            parse_interactions(tmp_path / "nope.tsv")

    def test_quadruples(self, tmp_path):
        p = write(tmp_path, "q.tsv", "u1\ti9\tcolor\t1\nu1\ti9\tsleeve\t-1\n")
        assert parse_quadruples(p) == [SentimentQuadruple("u1", "i9", "color", 1),
                                       SentimentQuadruple("u1", "i9", "sleeve", -1)]

    def test_bad_sentiment(self, tmp_path):
        p = write(tmp_path, "q.tsv", "u1\ti9\tcolor\t1\nu1\ti9\tcolor\t2\n")
        with pytest.raises(DataError, match=r"q\.tsv:2"):
            parse_quadruples(p)

    def test_negative_timestamp_rejected(self):
        with pytest.raises(DataError):
            InteractionRecord("u", "i", -1)

    @pytest.mark.parametrize("fmt", ["tsv", "jsonl"])
    def test_round_trip(self, tmp_path, fmt):
        recs = [InteractionRecord("u1", "i1", 3, 4.5), InteractionRecord("u2", "i1", 7)]
        quads = [SentimentQuadruple("u1", "i1", "f", -1)]
        write_interactions(recs, tmp_path / f"i.{fmt}", fmt)
        write_quadruples(quads, tmp_path / f"q.{fmt}", fmt)
        assert parse_interactions(tmp_path / f"i.{fmt}", fmt) == recs
        assert parse_quadruples(tmp_path / f"q.{fmt}", fmt) == quads


def naive_filter(pairs, k):
    """Remove-and-recount until nothing changes."""
    pairs = list(pairs)
    while True:
        uc = Counter(u for u, _ in pairs)
        ic = Counter(i for _, i in pairs)
        drop = {u for u in uc if uc[u] < k}, {i for i in ic if ic[i] < k}
        nxt = [(u, i) for u, i in pairs if u not in drop[0] and i not in drop[1]]
        if nxt == pairs:
            return pairs
        pairs = nxt


class TestFilter:
    def test_user_below_threshold_removed(self):
        inter = [InteractionRecord("heavy", f"i{j}", j) for j in range(3)]
        inter += [InteractionRecord("light", "i0", 9)]
        inter += [InteractionRecord(f"x{j}", f"i{k}", 0) for j in range(3) for k in range(3)]
        kept, _, cat = filter_min_reviews(inter, [], min_count=3)
        assert "light" not in cat.users and "heavy" in cat.users

    def test_identity_when_all_pass(self):
        inter = [InteractionRecord(f"u{u}", f"i{i}", 0) for u in range(3) for i in range(3)]
        kept, _, cat = filter_min_reviews(inter, [], min_count=3)
        assert kept == inter and cat.m == 3 and cat.n == 3

    def test_chain_removal(self):
        # i_chain is held up only by u_heavy, who falls below threshold
        inter = [InteractionRecord("u_heavy", "i_chain", 0), InteractionRecord("u_heavy", "i0", 0)]
        inter += [InteractionRecord(f"u{k}", "i0", 0) for k in range(2)]
        inter += [InteractionRecord(f"u{k}", "i1", 0) for k in range(2)]
        inter += [InteractionRecord("u2", "i_chain", 0)]
        kept, _, cat = filter_min_reviews(inter, [], min_count=2)
        expected = naive_filter([(x.user_id, x.item_id) for x in inter], 2)
        assert [(x.user_id, x.item_id) for x in kept] == expected
        assert "i_chain" not in cat.items

    def test_too_sparse(self):
        with pytest.raises(DataError, match="too sparse"):
            filter_min_reviews([InteractionRecord("u", "i", 0)], [], min_count=2)

    def test_quadruples_dropped_with_their_user(self):
        inter = [InteractionRecord(f"u{u}", f"i{i}", 0) for u in range(2) for i in range(2)]
        inter.append(InteractionRecord("gone", "i0", 0))
        quads = [SentimentQuadruple("gone", "i0", "f", 1), SentimentQuadruple("u0", "i1", "g", 1)]
        _, q, cat = filter_min_reviews(inter, quads, min_count=2)
        assert q == [quads[1]] and cat.features == ["g"]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), min_size=1, max_size=80),
           st.integers(1, 4))
    def test_fixpoint_matches_naive(self, pairs, k):
        inter = [InteractionRecord(f"u{u}", f"i{i}", 0) for u, i in pairs]
        expected = naive_filter([(x.user_id, x.item_id) for x in inter], k)
        if not expected:
            with pytest.raises(DataError):
                filter_min_reviews(inter, [], k)
            return
        kept, _, cat = filter_min_reviews(inter, [], k)
        assert [(x.user_id, x.item_id) for x in kept] == expected
        uc = Counter(x.user_id for x in kept)
        ic = Counter(x.item_id for x in kept)
        assert min(uc.values()) >= k and min(ic.values()) >= k


class TestSplit:
    def test_definition_example(self):
        # items A..G as i0..i6 in timestamp order
        cat = catalog_of(1, 120, 1)
        inter = [InteractionRecord("u0", f"i{j}", 10 * j) for j in range(7)]
        s = chronological_split(inter, cat, holdout=5, negatives=100, seed=0)
        assert [cat.items[v] for v in s.test_positives[0]] == [f"i{j}" for j in range(2, 7)]
        assert [x.item_id for x in s.validation] == ["i1"]
        assert [x.item_id for x in s.train] == ["i0"]

    def test_unsorted_input_and_stable_ties(self):
        cat = catalog_of(1, 110, 1)
        inter = [InteractionRecord("u0", f"i{j}", t) for j, t in enumerate([5, 1, 5, 3, 9, 9, 0])]
        s = chronological_split(inter, cat, holdout=5, negatives=100, seed=0)
        # ts order: i6(0) i1(1) i3(3) i0(5) i2(5) i4(9) i5(9)
        assert s.test_positives[0].tolist() == [3, 0, 2, 4, 5]
        assert s.validation[0].item_id == "i1" and s.train[0].item_id == "i6"

    def test_determinism_and_disjointness(self):
        rng = np.random.default_rng(1)
        cat = catalog_of(8, 150, 2)
        pairs = [(u, int(v)) for u in range(8) for v in rng.choice(150, 20, replace=False)]
        inter = records(pairs, cat)
        a = chronological_split(inter, cat, seed=3)
        b = chronological_split(inter, cat, seed=3)
        assert np.array_equal(a.test_negatives, b.test_negatives)
        history = {u: {v for uu, v in pairs if uu == u} for u in range(8)}
        for u in range(8):
            negs = set(a.test_negatives[u].tolist())
            assert len(negs) == 100 and not negs & history[u]
            train_items = {cat.item_index[x.item_id] for x in a.train if x.user_id == f"u{u}"}
            assert not train_items & set(a.test_positives[u].tolist())

    def test_too_few_interactions_names_user(self):
        cat = catalog_of(1, 120, 1)
        inter = [InteractionRecord("u0", f"i{j}", j) for j in range(6)]
        with pytest.raises(DataError, match="u0"):
            chronological_split(inter, cat)

    def test_catalog_too_small(self):
        cat = catalog_of(1, 50, 1)
        inter = [InteractionRecord("u0", f"i{j}", j) for j in range(10)]
        with pytest.raises(DataError, match="candidates"):
            chronological_split(inter, cat)

    def test_serialisation_round_trip(self):
        cat = catalog_of(2, 110, 1)
        inter = records([(u, v) for u in range(2) for v in range(8)], cat)
        s = chronological_split(inter, cat, seed=0)
        t = DatasetSplit.from_dict(json.loads(json.dumps(s.to_dict())))
        assert t.train == s.train and np.array_equal(t.candidates, s.candidates)
        assert Catalog.from_dict(cat.to_dict()).item_index == cat.item_index


class TestGroups:
    def test_descending_counts(self):
        cat = catalog_of(1, 10, 1)
        counts = [9, 8, 7, 6, 5, 4, 3, 2, 1, 0]
        inter = [InteractionRecord("u0", f"i{v}", 0) for v, c in enumerate(counts) for _ in range(c)]
        g = assign_groups(inter, cat)
        assert np.flatnonzero(g.group_of == 0).tolist() == [0, 1]

    def test_ties_by_index(self):
        cat = catalog_of(1, 12, 1)
        inter = [InteractionRecord("u0", f"i{v}", 0) for v in range(12)]
        g = assign_groups(inter, cat)
        assert np.flatnonzero(g.group_of == 0).tolist() == [0, 1, 2]

    def test_yelp_size(self):
        cat = catalog_of(1, 20181, 1)
        g = assign_groups([], cat)
        assert g.g0_size == 4037 == math.ceil(0.2 * 20181)

    @given(st.integers(2, 400), st.floats(0.01, 0.99))
    def test_partition(self, n, frac):
        cat = catalog_of(1, n, 1)
        g = assign_groups([], cat, frac)
        assert g.g0_size + g.g1_size == n
        assert g.g0_size == math.ceil(round(frac * n, 9))

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            assign_groups([], catalog_of(1, 5, 1), 1.0)
