from __future__ import annotations

import json
import os

import pytest

from qacgen.cli import main
from qacgen.config import ConfigError, load_config
from qacgen.reward import read_pref_dataset


def run(args: list[str]) -> int:
    return main(args)


@pytest.fixture()
def workdir(tmp_path, demo_dir, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, capsys):
        assert run(["--definitely-not-a-flag"]) == 1

    def test_unknown_subcommand_is_usage_error(self):
        assert run(["frobnicate"]) == 1

    def test_missing_required_flag(self):
        assert run(["build-index"]) == 1

    def test_runtime_error_is_two(self, tmp_path):
        missing = str(tmp_path / "nope.jsonl")
        assert run(["build-index", "--log", missing, "--out", str(tmp_path / "o")]) == 2

    def test_help_exits_zero(self):
        assert run(["--help"]) == 0

    def test_train_toy_requires_input(self, tmp_path):
        assert run(["train-toy", "--out", str(tmp_path / "m.csv")]) == 1


class TestBuildIndex:
    def test_writes_sorted_merged_index(self, demo_dir, tmp_path):
        out = tmp_path / "index.jsonl"
        code = run(
            ["build-index", "--log", os.path.join(demo_dir, "query_log.jsonl"),
             "--out", str(out)]
        )
        assert code == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        keys = [row["query"] for row in rows]
        assert keys == sorted(keys)
        merged = next(row for row in rows if row["query"] == "workout apps")
        assert merged["frequency"] == 600  # 420 + 180 across two casings


class TestScore:
    def test_prints_verifier_scores(self, demo_config_path, capsys):
        code = run(
            ["--config", demo_config_path, "score", "--prefix", "apps take me to the moo"]
        )
        assert code == 0
        out = capsys.readouterr().out
        for token in ("relevance", "diversity", "gated reward"):
            assert token in out

    def test_global_flags_accepted_after_subcommand(self, demo_config_path, capsys):
        code = run(
            ["score", "--prefix", "apps take me to the moo", "--config", demo_config_path]
        )
        assert code == 0
        assert "gated reward" in capsys.readouterr().out

    def test_template_flag_overrides_config(self, demo_config_path, tmp_path, capsys):
        from qacgen.context import DEFAULT_TEMPLATE

        template = tmp_path / "custom.txt"
        template.write_text(DEFAULT_TEMPLATE.replace("expert", "veteran"))
        code = run(
            ["--config", demo_config_path, "--template", str(template),
             "score", "--prefix", "wor"]
        )
        assert code == 0
        missing = run(
            ["--config", demo_config_path, "--template", str(tmp_path / "nope.txt"),
             "score", "--prefix", "wor"]
        )
        assert missing == 2

    def test_scores_provided_raw_file(self, demo_config_path, tmp_path, capsys):
        raw = tmp_path / "raw.txt"
        raw.write_text("totally not an answer block")
        code = run(
            ["--config", demo_config_path, "score", "--prefix", "wor", "--raw", str(raw)]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "gated reward: 0.000000" in out
        assert "format error" in out


class TestPipelines:
    def _run_pipeline(self, demo_dir, demo_config_path, out_dir, seed="42"):
        prefixes = os.path.join(demo_dir, "prefixes.jsonl")
        eval_prefixes = os.path.join(demo_dir, "eval_prefixes.jsonl")
        baseline = os.path.join(demo_dir, "baseline.jsonl")
        index = os.path.join(out_dir, "index.jsonl")
        snapshot = os.path.join(out_dir, "snapshot.jsonl")
        pairs = os.path.join(out_dir, "pairs.jsonl")
        report = os.path.join(out_dir, "report.json")
        base = ["--config", demo_config_path, "--seed", seed]
        assert run(["build-index", "--log", os.path.join(demo_dir, "query_log.jsonl"),
                    "--out", index]) == 0
        assert run(base + ["pregenerate", "--prefixes", prefixes, "--out", snapshot]) == 0
        assert run(base + ["mine-prefs", "--prefixes", prefixes, "--out", pairs,
                           "--samples", "8", "--delta", "0.08", "--k", "4"]) == 0
        assert run(base + ["eval", "--prefixes", eval_prefixes, "--baseline", baseline,
                           "--snapshot", snapshot, "--out", report, "--format", "json",
                           "--no-figures"]) == 0
        return {name: open(os.path.join(out_dir, name), "rb").read()
                for name in ("index.jsonl", "snapshot.jsonl", "pairs.jsonl", "report.json")}

    def test_full_pipeline_deterministic(self, demo_dir, demo_config_path, tmp_path):
        a = self._run_pipeline(demo_dir, demo_config_path, str(tmp_path / "a"))
        b = self._run_pipeline(demo_dir, demo_config_path, str(tmp_path / "b"))
        assert a == b

    def test_mine_prefs_respects_k(self, demo_dir, demo_config_path, tmp_path):
        pairs_path = tmp_path / "pairs.jsonl"
        code = run(
            ["--config", demo_config_path, "--seed", "7", "mine-prefs",
             "--prefixes", os.path.join(demo_dir, "prefixes.jsonl"),
             "--out", str(pairs_path), "--samples", "8", "--delta", "0.08", "--k", "4"]
        )
        assert code == 0
        records = read_pref_dataset(str(pairs_path))
        assert records, "expected at least one mined pair"
        per_prompt: dict[str, int] = {}
        for record in records:
            per_prompt[record["prompt"]] = per_prompt.get(record["prompt"], 0) + 1
            assert record["margin"] >= 0.08
        assert all(count <= 4 for count in per_prompt.values())

    def test_refine_then_train_sft(self, demo_dir, demo_config_path, tmp_path):
        corpus = tmp_path / "corpus.jsonl"
        metrics = tmp_path / "sft.csv"
        assert run(
            ["--config", demo_config_path, "--seed", "5", "refine",
             "--prefixes", os.path.join(demo_dir, "prefixes.jsonl"),
             "--out", str(corpus)]
        ) == 0
        assert corpus.read_text().strip()
        assert run(
            ["--config", demo_config_path, "train-toy", "--corpus", str(corpus),
             "--out", str(metrics), "--steps", "5", "--no-figures"]
        ) == 0
        lines = metrics.read_text().strip().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 7

    def test_mine_then_train_dpo_with_figures(self, demo_dir, demo_config_path, tmp_path):
        pairs_path = tmp_path / "pairs.jsonl"
        metrics = tmp_path / "dpo.csv"
        assert run(
            ["--config", demo_config_path, "--seed", "7", "mine-prefs",
             "--prefixes", os.path.join(demo_dir, "prefixes.jsonl"),
             "--out", str(pairs_path), "--samples", "6"]
        ) == 0
        assert run(
            ["--config", demo_config_path, "train-toy", "--pairs", str(pairs_path),
             "--out", str(metrics), "--steps", "5"]
        ) == 0
        losses = [float(line.split(",")[1])
                  for line in metrics.read_text().strip().splitlines()[1:]]
        assert losses[-1] < losses[0]
        assert (tmp_path / "dpo_loss.png").exists()

    def test_eval_writes_markdown_and_figure(self, demo_dir, demo_config_path, tmp_path):
        report = tmp_path / "report.md"
        assert run(
            ["--config", demo_config_path, "eval",
             "--prefixes", os.path.join(demo_dir, "eval_prefixes.jsonl"),
             "--out", str(report)]
        ) == 0
        text = report.read_text()
        assert text.startswith("| System |")
        assert (tmp_path / "report_metrics.png").exists()


class TestConfigValidation:
    def test_unknown_key_rejected(self, tmp_path, demo_dir):
        config = tmp_path / "bad.toml"
        config.write_text(
            f"""
[paths]
query_log = "{demo_dir}/query_log.jsonl"
catalog = "{demo_dir}/catalog.jsonl"

[verifiers]
alhpa = 0.5
"""
        )
        with pytest.raises(ConfigError, match="alhpa"):
            load_config(str(config))

    def test_missing_file_rejected(self, tmp_path):
        config = tmp_path / "bad.toml"
        config.write_text('[paths]\nquery_log = "missing.jsonl"\n')
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(str(config))

    def test_even_judges_rejected(self, tmp_path, demo_dir):
        config = tmp_path / "bad.toml"
        config.write_text(
            f"""
[paths]
query_log = "{demo_dir}/query_log.jsonl"
catalog = "{demo_dir}/catalog.jsonl"

[verifiers]
judges = 2
"""
        )
        with pytest.raises(ConfigError, match="odd"):
            load_config(str(config))

    def test_all_zero_weights_rejected(self, tmp_path, demo_dir):
        config = tmp_path / "bad.toml"
        config.write_text(
            f"""
[paths]
query_log = "{demo_dir}/query_log.jsonl"
catalog = "{demo_dir}/catalog.jsonl"

[reward]
w_rel = 0.0
w_eng = 0.0
w_safe = 0.0
w_srg = 0.0
w_cg = 0.0
w_div = 0.0
"""
        )
        with pytest.raises(ConfigError, match="at least one"):
            load_config(str(config))

    def test_negative_weight_rejected(self, tmp_path, demo_dir):
        config = tmp_path / "bad.toml"
        config.write_text(
            f"""
[paths]
query_log = "{demo_dir}/query_log.jsonl"
catalog = "{demo_dir}/catalog.jsonl"

[reward]
w_rel = -0.5
"""
        )
        with pytest.raises(ConfigError):
            load_config(str(config))

    def test_defaults_fill_in(self, demo_config_path):
        cfg = load_config(demo_config_path)
        assert cfg.delta == pytest.approx(0.08)
        assert cfg.top_k == 4
        assert cfg.judges == 3
        assert "sampler" in cfg.generators
