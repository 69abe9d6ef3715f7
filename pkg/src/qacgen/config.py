"""Engine configuration: a TOML file validated against a strict schema.

Unknown keys are rejected so typos fail loudly, referenced input files must
exist at load time, and every knob has a default matching the module-level
constants. ``build_engine`` assembles the full serving stack from a config.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import QacError
from .context import ContextConfig, load_template
from .generator import (
    ExternalProcessGenerator,
    Generator,
    GeneratorProfile,
    TemplateMockGenerator,
    derive_seed,
)
from .retrieval import build_query_index, load_catalog, load_query_log
from .reward import DEFAULT_DELTA, DEFAULT_TOP_K, RewardWeights, VerifierSuite
from .serving import (
    DEFAULT_DEADLINE,
    DEFAULT_LIMIT,
    DEFAULT_REWARD_FLOOR,
    ServingEngine,
)
from .verifiers import (
    BlocklistClassifier,
    CatalogSearchBackend,
    DEFAULT_ALPHA,
    DEFAULT_JUDGES,
    DEFAULT_PAGE_DEPTH,
    DEFAULT_TAU,
    IndexStatsSource,
    RuleContextJudge,
    load_blocklist,
)


class ConfigError(QacError):
    """The config file is missing, malformed, or violates the schema."""


_SCHEMA: dict[str, set[str]] = {
    "paths": {"query_log", "catalog", "blocklist", "template", "snapshot"},
    "context": {"max_candidates", "max_items", "sample_titles", "lexical_weight"},
    "verifiers": {"alpha", "tau", "judges", "page_depth"},
    "reward": {"w_rel", "w_eng", "w_safe", "w_srg", "w_cg", "w_div", "delta", "k"},
    "align": {"beta", "step_size", "steps", "seed"},
    "serving": {
        "reward_floor",
        "deadline_ms",
        "default_limit",
        "compact_profile",
        "large_profile",
    },
}
_GENERATOR_KEYS = {
    "kind", "role", "temperature", "top_p", "seed", "timeout", "command",
    "max_parallelism",
}


@dataclass
class GeneratorSpec:
    name: str
    kind: str
    profile: GeneratorProfile
    command: list[str] = field(default_factory=list)


@dataclass
class EngineConfig:
    """Validated configuration for every pipeline stage."""

    query_log: str = ""
    catalog: str = ""
    blocklist: str = ""
    template: str = ""
    snapshot: str = ""
    context: ContextConfig = field(default_factory=ContextConfig)
    alpha: float = DEFAULT_ALPHA
    tau: int = DEFAULT_TAU
    judges: int = DEFAULT_JUDGES
    page_depth: int = DEFAULT_PAGE_DEPTH
    weights: RewardWeights = field(default_factory=RewardWeights)
    delta: float = DEFAULT_DELTA
    top_k: int = DEFAULT_TOP_K
    beta: float = 0.1
    step_size: float = 0.5
    steps: int = 50
    align_seed: int = 0
    reward_floor: float = DEFAULT_REWARD_FLOOR
    deadline: float = DEFAULT_DEADLINE
    default_limit: int = DEFAULT_LIMIT
    compact_profile: str = "compact"
    large_profile: str = "large"
    generators: dict[str, GeneratorSpec] = field(default_factory=dict)
    base_dir: str = "."


def _reject_unknown(section: str, table: dict, allowed: set[str]) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


def _resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def load_config(path: str) -> EngineConfig:
    """Parse and validate a TOML config file."""
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc

    top_allowed = set(_SCHEMA) | {"generators"}
    _reject_unknown("<top level>", data, top_allowed)
    for section, allowed in _SCHEMA.items():
        _reject_unknown(section, data.get(section, {}), allowed)

    cfg = EngineConfig(base_dir=os.path.dirname(os.path.abspath(path)))
    paths = data.get("paths", {})
    cfg.query_log = paths.get("query_log", "")
    cfg.catalog = paths.get("catalog", "")
    cfg.blocklist = paths.get("blocklist", "")
    cfg.template = paths.get("template", "")
    cfg.snapshot = paths.get("snapshot", "")
    for name in ("query_log", "catalog", "blocklist", "template"):
        rel = getattr(cfg, name)
        if rel:
            full = _resolve(cfg.base_dir, rel)
            if not os.path.exists(full):
                raise ConfigError(f"paths.{name} does not exist: {full}")
            setattr(cfg, name, full)
    if cfg.snapshot:
        cfg.snapshot = _resolve(cfg.base_dir, cfg.snapshot)

    ctx = data.get("context", {})
    cfg.context = ContextConfig(
        max_candidates=int(ctx.get("max_candidates", 15)),
        max_items=int(ctx.get("max_items", 10)),
        sample_titles=int(ctx.get("sample_titles", 3)),
        lexical_weight=float(ctx.get("lexical_weight", 0.7)),
    )

    ver = data.get("verifiers", {})
    cfg.alpha = float(ver.get("alpha", DEFAULT_ALPHA))
    cfg.tau = int(ver.get("tau", DEFAULT_TAU))
    cfg.judges = int(ver.get("judges", DEFAULT_JUDGES))
    cfg.page_depth = int(ver.get("page_depth", DEFAULT_PAGE_DEPTH))
    if cfg.judges % 2 == 0 or cfg.judges < 1:
        raise ConfigError("verifiers.judges must be a positive odd number")

    rew = data.get("reward", {})
    sixth = 1.0 / 6.0
    try:
        cfg.weights = RewardWeights(
            relevance=float(rew.get("w_rel", sixth)),
            engagement=float(rew.get("w_eng", sixth)),
            safety=float(rew.get("w_safe", sixth)),
            catalog_grounded=float(rew.get("w_srg", sixth)),
            context_grounded=float(rew.get("w_cg", sixth)),
            diversity=float(rew.get("w_div", sixth)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if sum(cfg.weights.as_dict().values()) <= 0:
        raise ConfigError("at least one reward weight must be > 0")
    cfg.delta = float(rew.get("delta", DEFAULT_DELTA))
    cfg.top_k = int(rew.get("k", DEFAULT_TOP_K))

    align = data.get("align", {})
    cfg.beta = float(align.get("beta", 0.1))
    cfg.step_size = float(align.get("step_size", 0.5))
    cfg.steps = int(align.get("steps", 50))
    cfg.align_seed = int(align.get("seed", 0))

    srv = data.get("serving", {})
    cfg.reward_floor = float(srv.get("reward_floor", DEFAULT_REWARD_FLOOR))
    cfg.deadline = float(srv.get("deadline_ms", DEFAULT_DEADLINE * 1000.0)) / 1000.0
    cfg.default_limit = int(srv.get("default_limit", DEFAULT_LIMIT))
    cfg.compact_profile = str(srv.get("compact_profile", "compact"))
    cfg.large_profile = str(srv.get("large_profile", "large"))

    for name, table in data.get("generators", {}).items():
        if not isinstance(table, dict):
            raise ConfigError(f"[generators.{name}] must be a table")
        _reject_unknown(f"generators.{name}", table, _GENERATOR_KEYS)
        kind = str(table.get("kind", "mock"))
        if kind not in ("mock", "external"):
            raise ConfigError(f"generators.{name}.kind must be 'mock' or 'external'")
        command = [str(part) for part in table.get("command", [])]
        if kind == "external" and not command:
            raise ConfigError(f"generators.{name} is external but has no command")
        if "max_parallelism" in table:
            max_parallelism = int(table["max_parallelism"])
        else:
            # one stdio pipe per external child: serialize unless told otherwise
            max_parallelism = 1 if kind == "external" else None
        try:
            profile = GeneratorProfile(
                name=name,
                role=str(table.get("role", name)),
                temperature=float(table.get("temperature", 0.0)),
                top_p=float(table.get("top_p", 1.0)),
                seed=int(table.get("seed", 0)),
                timeout=float(table["timeout"]) if "timeout" in table else None,
                max_parallelism=max_parallelism,
            )
        except ValueError as exc:
            raise ConfigError(f"generators.{name}: {exc}") from exc
        cfg.generators[name] = GeneratorSpec(
            name=name, kind=kind, profile=profile, command=command
        )
    for role_key in (cfg.compact_profile, cfg.large_profile):
        if role_key not in cfg.generators:
            cfg.generators[role_key] = GeneratorSpec(
                name=role_key,
                kind="mock",
                profile=GeneratorProfile(name=role_key, role=role_key, seed=0),
            )
    return cfg


def make_generator(spec: GeneratorSpec) -> Generator:
    if spec.kind == "external":
        return ExternalProcessGenerator(spec.command, spec.profile)
    return TemplateMockGenerator(spec.profile)


def build_engine(cfg: EngineConfig, seed: int | None = None) -> ServingEngine:
    """Assemble the serving stack from a validated config.

    A global seed reseeds every generator profile with a derived sub-seed so
    whole-pipeline runs are reproducible from one flag.
    """
    if not cfg.query_log or not cfg.catalog:
        raise ConfigError("paths.query_log and paths.catalog are required")
    # A built index artifact shares the query-log schema, so either loads here.
    index = build_query_index(load_query_log(cfg.query_log))
    catalog = load_catalog(cfg.catalog)
    backend = CatalogSearchBackend(
        catalog, page_depth=cfg.page_depth, lexical_weight=cfg.context.lexical_weight
    )
    terms = load_blocklist(cfg.blocklist) if cfg.blocklist else []
    classifier = BlocklistClassifier(terms, exempt_titles=[item.title for item in catalog])
    suite = VerifierSuite(
        backend=backend,
        stats_source=IndexStatsSource(index),
        safety_classifier=classifier,
        judges=(RuleContextJudge(),) * cfg.judges,
        alpha=cfg.alpha,
        tau=cfg.tau,
    )
    generators = {}
    for name, spec in cfg.generators.items():
        profile = spec.profile
        if seed is not None:
            profile = replace(profile, seed=derive_seed(seed, name))
        generators[name] = (
            profile,
            make_generator(GeneratorSpec(name, spec.kind, profile, spec.command)),
        )
    template = load_template(cfg.template) if cfg.template else None
    return ServingEngine(
        index=index,
        catalog=catalog,
        suite=suite,
        weights=cfg.weights,
        generators=generators,
        context_config=cfg.context,
        template=template,
        compact_profile=cfg.compact_profile,
        deadline=cfg.deadline,
        reward_floor=cfg.reward_floor,
        default_limit=cfg.default_limit,
    )
