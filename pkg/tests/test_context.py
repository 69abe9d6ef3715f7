from __future__ import annotations

import pytest

from qacgen.context import (
    ContextConfig,
    DEFAULT_TEMPLATE,
    MissingPlaceholder,
    Prefix,
    RetrievedContext,
    build_context,
    parse_prompt,
    render_prompt,
)
from qacgen.retrieval import QueryStats, build_query_index, lookup_prefix, retrieve_items


class TestPrefix:
    def test_requires_nonempty_text(self):
        with pytest.raises(ValueError):
            Prefix(text="   ")

    def test_requires_nonnegative_weight(self):
        with pytest.raises(ValueError):
            Prefix(text="ok", traffic_weight=-1)

    def test_default_weight(self):
        assert Prefix(text="wor").traffic_weight == 1.0


class TestBuildContext:
    def test_head_prefix_populates_both_sections(self, query_index, catalog):
        ctx = build_context(Prefix(text="wor"), query_index, catalog)
        assert ctx.candidates
        assert ctx.items

    def test_long_tail_prefix_leans_on_items(self, query_index, catalog):
        ctx = build_context(Prefix(text="vr moon walk"), query_index, catalog)
        assert ctx.candidates == ()
        assert ctx.items

    def test_matches_composition_of_retrieval_ops(self, query_index, catalog):
        config = ContextConfig(max_candidates=4, max_items=5, sample_titles=2)
        ctx = build_context(Prefix(text="wor"), query_index, catalog, config)
        expected_candidates = lookup_prefix(query_index, "wor", 4)
        assert [c.query for c in ctx.candidates] == [q for q, _ in expected_candidates]
        for candidate in ctx.candidates:
            hits = retrieve_items(catalog, candidate.query, 2)
            assert candidate.sample_titles == tuple(
                item.title for item, score in hits if score > 0
            )
        expected_items = retrieve_items(catalog, "wor", 5)
        assert ctx.items == tuple(item for item, _ in expected_items)

    def test_pure_given_inputs(self, query_index, catalog):
        a = build_context(Prefix(text="slee"), query_index, catalog)
        b = build_context(Prefix(text="slee"), query_index, catalog)
        assert a == b

    def test_budgets_enforced(self, query_index, catalog):
        config = ContextConfig(max_candidates=2, max_items=3, sample_titles=1)
        ctx = build_context(Prefix(text="w"), query_index, catalog, config)
        assert len(ctx.candidates) <= 2
        assert len(ctx.items) <= 3
        assert all(len(c.sample_titles) <= 1 for c in ctx.candidates)


class TestRenderPrompt:
    def test_counts_rendered_in_headers(self, make_context):
        ctx = make_context("wor", ContextConfig(max_candidates=2, max_items=3))
        prompt = render_prompt(ctx)
        assert f"Query Candidates ({len(ctx.candidates)})" in prompt.rendered
        assert f"Apps Metadata ({len(ctx.items)})" in prompt.rendered
        assert prompt.candidate_count == len(ctx.candidates)
        assert prompt.item_count == len(ctx.items)

    def test_prefix_verbatim_in_slot(self, make_context):
        ctx = make_context("Apps Take Me")
        prompt = render_prompt(ctx)
        lines = prompt.rendered.splitlines()
        slot = lines.index("1. User Prefix:") + 1
        assert lines[slot] == "Apps Take Me"
        assert prompt.rendered.count("Apps Take Me") == 1

    def test_empty_context_renders_none_markers(self):
        ctx = RetrievedContext(prefix=Prefix(text="zzz"))
        prompt = render_prompt(ctx)
        assert "Query Candidates (0)" in prompt.rendered
        assert "Apps Metadata (0)" in prompt.rendered
        assert "(none)" in prompt.rendered

    def test_missing_placeholder(self, make_context):
        ctx = make_context("wor")
        bad = DEFAULT_TEMPLATE.replace("{prefix}", "nope")
        with pytest.raises(MissingPlaceholder) as exc:
            render_prompt(ctx, bad)
        assert exc.value.name == "{prefix}"

    def test_deterministic(self, make_context):
        ctx = make_context("wor")
        assert render_prompt(ctx).rendered == render_prompt(ctx).rendered


class TestPromptRoundTrip:
    def test_reparse_recovers_candidates_and_titles(self, make_context):
        for prefix in ["wor", "moon", "slee", "budget"]:
            ctx = make_context(prefix)
            view = parse_prompt(render_prompt(ctx).rendered)
            assert view.prefix == prefix
            assert view.candidates == ctx.candidate_texts()
            assert view.item_titles == ctx.item_titles()

    def test_reparse_empty_context(self):
        ctx = RetrievedContext(prefix=Prefix(text="zzz"))
        view = parse_prompt(render_prompt(ctx).rendered)
        assert view.candidates == ()
        assert view.item_titles == ()
        assert view.prefix == "zzz"

    def test_injective_on_distinct_contexts(self, query_index, catalog):
        rendered = set()
        for prefix in ["wor", "word", "moon", "slee", "qr", "guitar"]:
            ctx = build_context(Prefix(text=prefix), query_index, catalog)
            rendered.add(render_prompt(ctx).rendered)
        assert len(rendered) == 6

    def test_grounding_texts_include_descriptions(self, make_context):
        ctx = make_context("moon")
        view = parse_prompt(render_prompt(ctx).rendered)
        joined = " ".join(view.item_texts)
        assert "moon" in joined.lower()


def test_candidate_stats_appear_in_line(make_context):
    ctx = make_context("wor")
    prompt = render_prompt(ctx)
    first = ctx.candidates[0]
    assert f"{first.query} | {first.stats.frequency} | " in prompt.rendered
