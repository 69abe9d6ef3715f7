from __future__ import annotations

import os

import pytest

from qacgen.config import build_engine, load_config
from qacgen.context import ContextConfig, Prefix, build_context
from qacgen.retrieval import (
    CatalogItem,
    QueryStats,
    build_query_index,
    load_catalog,
    load_query_log,
)
from qacgen.reward import RewardWeights, VerifierSuite
from qacgen.verifiers import (
    BlocklistClassifier,
    CatalogSearchBackend,
    IndexStatsSource,
    load_blocklist,
)

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEMO_DIR = os.path.join(REPO_ROOT, "demo")


@pytest.fixture(scope="session")
def demo_dir() -> str:
    return DEMO_DIR


@pytest.fixture(scope="session")
def demo_config_path() -> str:
    return os.path.join(DEMO_DIR, "config.toml")


@pytest.fixture(scope="session")
def catalog():
    return load_catalog(os.path.join(DEMO_DIR, "catalog.jsonl"))


@pytest.fixture(scope="session")
def query_index():
    return build_query_index(load_query_log(os.path.join(DEMO_DIR, "query_log.jsonl")))


@pytest.fixture(scope="session")
def blocklist_terms():
    return load_blocklist(os.path.join(DEMO_DIR, "blocklist.txt"))


@pytest.fixture(scope="session")
def classifier(blocklist_terms, catalog):
    return BlocklistClassifier(blocklist_terms, exempt_titles=[i.title for i in catalog])


@pytest.fixture()
def backend(catalog):
    return CatalogSearchBackend(catalog)


@pytest.fixture()
def suite(query_index, catalog, classifier, backend):
    return VerifierSuite(
        backend=backend,
        stats_source=IndexStatsSource(query_index),
        safety_classifier=classifier,
    )


@pytest.fixture()
def uniform_weights():
    return RewardWeights()


@pytest.fixture()
def make_context(query_index, catalog):
    def factory(prefix_text: str, config: ContextConfig = ContextConfig()):
        return build_context(Prefix(text=prefix_text), query_index, catalog, config)

    return factory


@pytest.fixture()
def demo_engine(demo_config_path):
    return build_engine(load_config(demo_config_path))


# A tiny hand-set corpus used by several modules.

@pytest.fixture(scope="session")
def mini_catalog():
    return [
        CatalogItem("i1", "Moon VR Explorer", "Education", "walk the moon in vr", 4.8, 100),
        CatalogItem("i2", "Budget Planner", "Finance", "plan budgets and bills", 4.5, 300),
        CatalogItem("i3", "Word Game Arena", "Games", "daily word puzzles", 4.4, 200),
    ]


@pytest.fixture(scope="session")
def mini_index():
    return build_query_index(
        [
            ("workout", QueryStats(5, 0.4, 0.5)),
            ("word game", QueryStats(3, 0.3, 0.4)),
            ("zen", QueryStats(9, 0.2, 0.3)),
        ]
    )
