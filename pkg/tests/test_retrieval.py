from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, strategies as st

from qacgen.retrieval import (
    CatalogItem,
    EmptyAfterNormalization,
    MalformedRecord,
    QueryStats,
    build_query_index,
    load_catalog,
    load_query_log,
    lookup_prefix,
    normalize_prefix,
    normalize_query,
    retrieve_items,
    save_index,
    load_index,
    token_overlap,
)


class TestNormalizeQuery:
    def test_collapses_whitespace_and_case(self):
        assert normalize_query("  Workout  Apps ") == "workout apps"

    def test_lowercases(self):
        assert normalize_query("VR Moon") == "vr moon"

    def test_empty_after_normalization(self):
        with pytest.raises(EmptyAfterNormalization):
            normalize_query("   ")

    def test_control_characters_become_spaces(self):
        assert normalize_query("a\x00b\tc\nd") == "a b c d"

    @given(st.text(max_size=40))
    def test_idempotent(self, raw):
        once = normalize_prefix(raw)
        assert normalize_prefix(once) == once

    @given(st.text(max_size=40))
    def test_no_control_chars_or_double_spaces(self, raw):
        text = normalize_prefix(raw)
        assert "  " not in text
        assert text == text.strip()
        assert not any(ch in text for ch in "\n\r\t\x00")


class TestBuildQueryIndex:
    def test_merges_duplicates_by_frequency_sum(self):
        index = build_query_index(
            [("Workout", QueryStats(3, 0.5, 0.0)), ("workout", QueryStats(2, 0.0, 0.0))]
        )
        assert len(index) == 1
        stats = index.get("workout")
        assert stats.frequency == 5
        # frequency-weighted average: (3*0.5 + 2*0.0) / 5
        assert stats.conversion_rate == pytest.approx(0.3)

    def test_zero_frequency_merge_falls_back_to_mean(self):
        index = build_query_index(
            [("a", QueryStats(0, 0.2, 0.4)), ("a", QueryStats(0, 0.6, 0.0))]
        )
        stats = index.get("a")
        assert stats.conversion_rate == pytest.approx(0.4)
        assert stats.click_through_rate == pytest.approx(0.2)

    def test_empty_index(self):
        index = build_query_index([])
        assert len(index) == 0
        assert lookup_prefix(index, "anything", 5) == []

    def test_malformed_record_carries_position(self):
        with pytest.raises(MalformedRecord) as exc:
            build_query_index([("ok", QueryStats(1)), ("   ", QueryStats(1))])
        assert exc.value.line_number == 2

    def test_lookup_matches_linear_scan_oracle(self):
        rng = random.Random(7)
        words = ["work", "word", "world", "zen", "app", "apple", "apt", "banana"]
        records = []
        for _ in range(1000):
            text = " ".join(rng.sample(words, rng.randint(1, 3)))
            records.append((text, QueryStats(rng.randint(0, 50), rng.random(), rng.random())))
        index = build_query_index(records)

        # independent oracle: merge by hand, filter by startswith, sort
        merged: dict[str, list] = {}
        for raw, stats in records:
            key = normalize_query(raw)
            merged.setdefault(key, []).append(stats)
        for prefix in ["w", "wor", "word", "app", "z", "banana", "q", ""]:
            expected_keys = [k for k in merged if k.startswith(prefix)]

            def freq(k):
                return sum(s.frequency for s in merged[k])

            expected = sorted(expected_keys, key=lambda k: (-freq(k), k))[:10]
            got = [q for q, _ in lookup_prefix(index, prefix, 10)]
            assert got == expected, prefix


class TestLookupPrefix:
    def test_prefix_filter_and_frequency_order(self, mini_index):
        got = [q for q, _ in lookup_prefix(mini_index, "wo", 10)]
        assert got == ["workout", "word game"]

    def test_no_match(self, mini_index):
        assert lookup_prefix(mini_index, "zzz", 5) == []

    def test_normalizes_prefix(self, mini_index):
        got = [q for q, _ in lookup_prefix(mini_index, "  WO", 10)]
        assert got == ["workout", "word game"]

    def test_limit_respected(self, mini_index):
        assert len(lookup_prefix(mini_index, "", 2)) == 2

    def test_limit_must_be_positive(self, mini_index):
        with pytest.raises(ValueError):
            lookup_prefix(mini_index, "w", 0)

    def test_prefix_completeness(self, mini_index):
        # every prefix of every indexed query finds that query
        for query, _ in mini_index.items():
            for cut in range(len(query) + 1):
                hits = [q for q, _ in lookup_prefix(mini_index, query[:cut], 10_000)]
                assert query in hits


class TestRetrieveItems:
    def test_lexical_overlap_dominates(self, mini_catalog):
        ranked = retrieve_items(mini_catalog, "moon", 3)
        assert ranked[0][0].title == "Moon VR Explorer"
        assert ranked[0][1] > 0

    def test_no_overlap_orders_by_popularity(self, mini_catalog):
        ranked = retrieve_items(mini_catalog, "xylophone", 3)
        assert [item.item_id for item, _ in ranked] == ["i2", "i3", "i1"]
        assert all(score == 0 for _, score in ranked)

    def test_zero_lexical_never_outranks_positive(self, mini_catalog):
        for prefix in ["moon", "word", "budget", "game arena"]:
            ranked = retrieve_items(mini_catalog, prefix, len(mini_catalog))
            scores = [score for _, score in ranked]
            assert scores == sorted(scores, reverse=True)

    def test_matches_exhaustive_scoring_oracle(self, catalog):
        # independent oracle: score every item by hand, then sort
        for prefix in ["work", "moon vr", "budget", "slee", "qr", "taco"]:
            tokens = normalize_prefix(prefix).split()

            def lex(item):
                hay = (item.title + " " + item.description).lower().split()
                if not tokens:
                    return 0.0
                hits = sum(
                    1 for t in tokens if any(h == t or h.startswith(t) for h in hay)
                )
                return hits / len(tokens)

            expected = sorted(
                ((item, 0.7 * lex(item)) for item in catalog),
                key=lambda pair: (-pair[1], -pair[0].popularity, pair[0].item_id),
            )[:20]
            got = retrieve_items(catalog, prefix, 20)
            assert [i.item_id for i, _ in got] == [i.item_id for i, _ in expected]
            for (_, a), (_, b) in zip(got, expected):
                assert a == pytest.approx(b)

    def test_embedding_hook_blends(self, mini_catalog):
        ranked = retrieve_items(
            mini_catalog,
            "xylophone",
            3,
            embedding_hook=lambda prefix, item: 1.0 if item.item_id == "i1" else 0.0,
        )
        assert ranked[0][0].item_id == "i1"
        assert ranked[0][1] == pytest.approx(0.3)

    def test_deterministic(self, catalog):
        a = retrieve_items(catalog, "wor", 10)
        b = retrieve_items(catalog, "wor", 10)
        assert [(i.item_id, s) for i, s in a] == [(i.item_id, s) for i, s in b]


class TestTokenOverlap:
    def test_prefix_of_token_counts(self):
        assert token_overlap(("moo",), ("moon", "walk")) == 1.0

    def test_fractional(self):
        assert token_overlap(("a", "zz"), ("a", "b")) == 0.5

    def test_empty_needle(self):
        assert token_overlap((), ("a",)) == 0.0


class TestFileLoading:
    def test_query_log_roundtrip(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text(
            json.dumps({"query": "Workout", "frequency": 3, "conversion_rate": 0.5,
                        "click_through_rate": 0.25})
            + "\n"
        )
        records = load_query_log(str(path))
        assert records == [("Workout", QueryStats(3, 0.5, 0.25))]

    def test_malformed_line_number(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text('{"query": "a", "frequency": 1}\n{"frequency": 2}\n')
        with pytest.raises(MalformedRecord) as exc:
            load_query_log(str(path))
        assert exc.value.line_number == 2

    def test_catalog_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "catalog.jsonl"
        row = {"item_id": "x", "title": "T"}
        path.write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
        with pytest.raises(MalformedRecord):
            load_catalog(str(path))

    def test_index_save_load_roundtrip(self, tmp_path, query_index):
        path = tmp_path / "index.jsonl"
        count = save_index(query_index, str(path))
        assert count == len(query_index)
        reloaded = load_index(str(path))
        assert list(reloaded.items()) == list(query_index.items())
