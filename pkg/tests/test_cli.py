"""Command-line runner: config validation, exit codes, output files and determinism."""
import csv
import io
import json
from pathlib import Path

import jsonschema
import pytest

from jointpred import cli

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SHIPPED = sorted(CONFIGS.glob("*.yaml"))


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(args, capsys):
    code = cli.main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


SMALL_BANDIT = """\
experiment: bandit
seed: 3
bandit:
  env: {kind: independent_beta, K: 2}
  policy: approx_ts
  tau: 4
  T: 10
  replications: 20
"""


class TestValidate:
    @pytest.mark.parametrize("path", SHIPPED, ids=lambda p: p.stem)
    def test_shipped_configs_valid(self, path, capsys):
        code, out, _ = run(["validate", path], capsys)
        assert code == cli.EXIT_OK and "valid" in out

    def test_tau_zero_names_field(self, tmp_path, capsys):
        p = write(tmp_path, SMALL_BANDIT.replace("tau: 4", "tau: 0"))
        code, _, err = run(["validate", p], capsys)
        assert code == cli.EXIT_CONFIG
        assert "bandit.tau" in err and "line 6" in err

    def test_unknown_key_has_line(self, tmp_path, capsys):
        p = write(tmp_path, SMALL_BANDIT + "  polcy: greedy\n")
        code, _, err = run(["validate", p], capsys)
        assert code == cli.EXIT_CONFIG
        assert "polcy" in err and "line 9" in err

    def test_yaml_syntax_error(self, tmp_path, capsys):
        p = write(tmp_path, "experiment: bandit\nbandit: [unclosed\n")
        code, _, err = run(["validate", p], capsys)
        assert code == cli.EXIT_CONFIG and "line" in err

    def test_missing_file(self, tmp_path, capsys):
        code, _, _ = run(["validate", tmp_path / "nope.yaml"], capsys)
        assert code == cli.EXIT_CONFIG

    def test_missing_block(self, tmp_path, capsys):
        code, _, err = run(["validate", write(tmp_path, "experiment: bandit\n")], capsys)
        assert code == cli.EXIT_CONFIG and "bandit" in err

    def test_exact_ts_needs_exact_agent(self, tmp_path, capsys):
        text = SMALL_BANDIT.replace("approx_ts", "exact_ts") + "  agent: {kind: ensemble}\n"
        code, _, err = run(["validate", write(tmp_path, text)], capsys)
        assert code == cli.EXIT_CONFIG and "bandit.agent.kind" in err

    def test_alpha_length_mismatch(self, tmp_path, capsys):
        text = SMALL_BANDIT.replace("K: 2}", "K: 2, alpha: [1.0, 2.0, 3.0]}")
        code, _, err = run(["validate", write(tmp_path, text)], capsys)
        assert code == cli.EXIT_CONFIG and "alpha" in err


class TestList:
    def test_lists_all_kinds(self, capsys):
        code, out, _ = run(["list"], capsys)
        assert code == cli.EXIT_OK
        for kind in cli.EXPERIMENTS:
            assert f"[{kind}]" in out


class TestRun:
    def test_bandit_trace_format(self, tmp_path, capsys):
        code, out, _ = run(["run", write(tmp_path, SMALL_BANDIT), "--output-dir", tmp_path / "o"], capsys)
        assert code == cli.EXIT_OK
        raw = (tmp_path / "o" / "trace.csv").read_bytes()
        assert raw.startswith(cli.TRACE_HEADER.encode() + b"\n")
        assert b"\r" not in raw and raw.endswith(b"\n")
        rows = list(csv.reader(io.StringIO(raw.decode())))
        assert len(rows) == 1 + 20 * 10
        for rep, t, action, reward, step, cum in rows[1:]:
            assert 1 <= int(action) <= 2 and reward in ("0", "1")
            assert float(repr(float(step))) == float(step)
        summary = json.loads((tmp_path / "o" / "summary.json").read_text())
        assert len(summary["mean_cum_regret"]) == 10
        assert "theorem2_bound" in summary and "bound_satisfied" in summary
        assert str(tmp_path / "o" / "trace.csv") in out

    def test_k2_exact_ts_byte_identical(self, tmp_path, capsys):
        cfg = CONFIGS / "bandit_k2_exact_ts.yaml"
        assert run(["run", cfg, "--output-dir", tmp_path / "a"], capsys)[0] == 0
        assert run(["run", cfg, "--output-dir", tmp_path / "b", "--threads", "3"], capsys)[0] == 0
        for name in ("trace.csv", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_override_changes_output(self, tmp_path, capsys):
        p = write(tmp_path, SMALL_BANDIT)
        run(["run", p, "--output-dir", tmp_path / "a"], capsys)
        run(["run", p, "--output-dir", tmp_path / "b", "--seed", "4"], capsys)
        run(["run", write(tmp_path, SMALL_BANDIT.replace("seed: 3", "seed: 4"), "c.yaml"),
             "--output-dir", tmp_path / "c"], capsys)
        a, b, c = ((tmp_path / d / "trace.csv").read_bytes() for d in "abc")
        assert a != b and b == c

    def test_output_dir_precedence(self, tmp_path, capsys, monkeypatch):
        p = write(tmp_path, SMALL_BANDIT + f"output:\n  dir: {tmp_path / 'from_config'}\n")
        assert run(["run", p], capsys)[0] == 0
        assert (tmp_path / "from_config" / "summary.json").exists()
        monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(tmp_path / "from_env"))
        assert run(["run", p], capsys)[0] == 0
        assert (tmp_path / "from_env" / "summary.json").exists()
        assert run(["run", p, "--output-dir", tmp_path / "from_flag"], capsys)[0] == 0
        assert (tmp_path / "from_flag" / "summary.json").exists()

    def test_recommender(self, tmp_path, capsys):
        assert run(["run", CONFIGS / "recommender_table1.yaml", "--output-dir", tmp_path], capsys)[0] == 0
        s = json.loads((tmp_path / "summary.json").read_text())
        assert s["marginal_pair"] == [3, 4] and s["joint_pair"] == [1, 2]
        assert s["marginal_miss"] > 0.10
        assert s["certificate"]["holds"] is True

    def test_seqpred_perfect_memory(self, tmp_path, capsys):
        assert run(["run", CONFIGS / "seqpred_coin_perfect.yaml", "--output-dir", tmp_path], capsys)[0] == 0
        s = json.loads((tmp_path / "seqpred.json").read_text())
        assert s["cumulative_kl"]["total"] == pytest.approx(0.0, abs=1e-15)
        assert all(r["holds"] for r in s["theorem1"])
        assert all(r["holds"] for r in s["lemma3"])

    def test_enumeration_cutoff_is_runtime_error(self, tmp_path, capsys):
        text = (CONFIGS / "seqpred_coin_perfect.yaml").read_text().replace("T: 3", "T: 4")
        code, _, err = run(["run", write(tmp_path, text), "--output-dir", tmp_path / "o"], capsys)
        assert code == cli.EXIT_RUNTIME and "cutoff" in err

    def test_bad_threads(self, tmp_path, capsys):
        code, _, _ = run(["run", write(tmp_path, SMALL_BANDIT), "--threads", "0"], capsys)
        assert code == cli.EXIT_CONFIG

    def test_no_trace_when_disabled(self, tmp_path, capsys):
        p = write(tmp_path, SMALL_BANDIT + "  write_trace: false\n")
        assert run(["run", p, "--output-dir", tmp_path / "o"], capsys)[0] == 0
        assert sorted(f.name for f in (tmp_path / "o").iterdir()) == ["summary.json"]


class TestOutputSchemas:
    @pytest.mark.parametrize("config,name,schema", [
        ("bandit_informative_greedy.yaml", "summary.json", "bandit_summary.schema.json"),
        ("recommender_table1.yaml", "summary.json", "recommender_summary.schema.json"),
        ("seqpred_coin_amnesiac.yaml", "seqpred.json", "seqpred.schema.json"),
    ])
    def test_outputs_validate(self, config, name, schema, tmp_path, capsys):
        assert run(["run", CONFIGS / config, "--output-dir", tmp_path], capsys)[0] == 0
        doc = json.loads((tmp_path / name).read_text())
        jsonschema.validate(doc, cli.load_schema(schema))

    def test_metrics_output(self, tmp_path, capsys):
        text = """\
experiment: metrics
seed: 1
metrics:
  scenario: {kind: coin, p_values: [1.0, 0.0], weights: [0.6666666666666666, 0.3333333333333333]}
  tau: 3
  mc_samples: 2000
"""
        assert run(["run", write(tmp_path, text), "--output-dir", tmp_path / "o"], capsys)[0] == 0
        doc = json.loads((tmp_path / "o" / "metrics.json").read_text())
        jsonschema.validate(doc, cli.load_schema("metrics.schema.json"))
