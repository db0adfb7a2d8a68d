import json
import os

import numpy as np
import pytest

from sepnet import checkpoint as ckpt
from sepnet import cli, config, models, report
from sepnet import policy as pol
from sepnet.errors import ConfigError

TINY_CFG = """
# tiny desk model
model.stages = 2
model.blocks_per_stage = 2
model.cardinality = 8
model.bottleneck_width = 4
model.partitions = 4
model.num_classes = 6
model.alpha = 2
model.in_h = 16
model.in_w = 16
data.num_classes = 6
data.train_pool = 200
data.test_n = 32
search.meta_iterations = 1
search.shared_steps = 3
search.controller_steps = 3
search.candidates = 2
search.batch_size = 8
search.reward_batch = 16
search.controller_hidden = 8
search.finetune_epochs = 1
seed = 1
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return str(path)


class TestConfig:
    def test_parse_values_and_comments(self):
        cfg = config.parse_config_text("model.stages = 2  # comment\n\n# full line\nseed = 9\n")
        assert cfg == {"model.stages": 2, "seed": 9}

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            config.parse_config_text("model.bogus = 1\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            config.parse_config_text("model.stages = banana\n")

    def test_overrides_and_env(self, tiny_cfg, monkeypatch):
        cfg = config.resolve(tiny_cfg, ["model.alpha=1"])
        assert cfg["model.alpha"] == 1
        monkeypatch.setenv("SEPNET_OUT_DIR", "/tmp/elsewhere")
        cfg = config.resolve(tiny_cfg, [])
        assert cfg["out_dir"] == "/tmp/elsewhere"

    def test_resolved_round_trips(self, tiny_cfg):
        cfg = config.resolve(tiny_cfg, [])
        text = config.format_resolved(cfg)
        again = config.parse_config_text(text)
        assert config.resolve(None, [f"{k}={v}" for k, v in again.items()]) == cfg

    def test_builders(self, tiny_cfg):
        cfg = config.resolve(tiny_cfg, [])
        assert config.model_spec(cfg).partitions == 4
        assert config.search_config(cfg).meta_iterations == 1
        assert config.cluster_spec(cfg).num_nodes == 4
        assert config.data_spec(cfg).num_classes == 6


class TestCommands:
    def test_build_reports_formula_match(self, tiny_cfg, capsys):
        assert cli.main(["build", "--config", tiny_cfg]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["formula_matches"] is True
        assert doc["params_total"] > 0

    def test_unknown_flag_is_usage_error(self):
        assert cli.main(["build", "--bogus"]) == 1

    def test_unknown_command_is_usage_error(self):
        assert cli.main(["frobnicate"]) == 1

    def test_missing_config_is_runtime_error(self):
        assert cli.main(["build", "--config", "/nonexistent/x.cfg"]) == 2

    def test_commcost_table(self, tiny_cfg, capsys):
        assert cli.main(["commcost", "--config", tiny_cfg, "--table6"]) == 0
        out = capsys.readouterr().out
        assert "ring all-reduce" in out and "ratio" in out

    def test_feasibility_verdict(self, tiny_cfg, capsys):
        code = cli.main(["feasibility", "--config", tiny_cfg,
                         "--flops", "1.7e8", "--bandwidth", "300e6"])
        assert code == 0
        assert "verdict: feasible" in capsys.readouterr().out

    def test_simulate_reports_speedup(self, tiny_cfg, capsys, tmp_path):
        out = tmp_path / "sim"
        assert cli.main(["simulate", "--config", tiny_cfg, "--flops", "1.7e8",
                         "--bandwidth", "300e6", "--out", str(out)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["feasible"] is True
        assert 1.0 < doc["speedup"] <= 4.0 + 1e-9
        assert (out / "timeline.csv").exists()

    def test_verify_equivalence_passes(self, tiny_cfg, capsys):
        assert cli.main(["verify-equivalence", "--config", tiny_cfg, "--inputs", "3"]) == 0
        assert "passed" in capsys.readouterr().out

    def test_verify_equivalence_detects_mismatch(self, tiny_cfg, monkeypatch, capsys):
        from sepnet import runtime

        real = runtime.run_hosted

        def corrupted(net, policy, x, dtype="f32", message_log=None):
            return real(net, policy, x, dtype) + 0.5

        monkeypatch.setattr(runtime, "run_hosted", corrupted)
        assert cli.main(["verify-equivalence", "--config", tiny_cfg, "--inputs", "1"]) == 3

    def test_search_and_report_end_to_end(self, tiny_cfg, tmp_path, capsys):
        out_c = tmp_path / "c"
        assert cli.main(["search", "--config", tiny_cfg, "--out", str(out_c)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert 0.0 <= doc["best_val_accuracy"] <= 1.0
        assert (out_c / "best.policy").exists()
        assert (out_c / "resolved_config.txt").exists()
        out_r = tmp_path / "r"
        assert cli.main(["random-search", "--config", tiny_cfg, "--out", str(out_r)]) == 0
        capsys.readouterr()
        rep = tmp_path / "rep"
        assert cli.main(["report", "--logs", str(out_c / "run_log.jsonl"),
                         str(out_r / "run_log.jsonl"), "--out", str(rep)]) == 0
        assert (rep / "report.json").exists()

    def test_finetune_command(self, tiny_cfg, tmp_path, capsys):
        out_c = tmp_path / "c"
        cli.main(["search", "--config", tiny_cfg, "--out", str(out_c)])
        capsys.readouterr()
        code = cli.main(["finetune", "--config", tiny_cfg,
                         "--checkpoint", str(out_c / "best.snnc"),
                         "--policy", str(out_c / "best.policy"), "--epochs", "1"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert os.path.exists(doc["checkpoint"])


class TestReportTool:
    def test_empty_log_list_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            report.emit_report([], str(tmp_path))

    def test_single_log_single_series(self, tmp_path):
        log = tmp_path / "a.jsonl"
        log.write_text('{"iteration": 1, "stage": "select", "candidate_accuracy": 0.5, "best_accuracy": 0.5}\n')
        doc = report.emit_report([str(log)], str(tmp_path / "out"))
        assert len(doc["series"]) == 1
        assert doc["series"][0]["best_accuracy"] == [0.5]

    def test_incompatible_schema_rejected(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"loss": 1.0}\n')
        with pytest.raises(ConfigError, match="missing"):
            report.emit_report([str(bad)], str(tmp_path / "out"))

    def test_two_logs_aligned_by_iteration(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        a.write_text('{"iteration": 1, "stage": "select", "best_accuracy": 0.4}\n'
                     '{"iteration": 2, "stage": "select", "best_accuracy": 0.6}\n')
        b.write_text('{"iteration": 2, "stage": "select", "best_accuracy": 0.3}\n')
        doc = report.emit_report([str(a), str(b)], str(tmp_path / "out"), ["x", "y"])
        csv = (tmp_path / "out" / "report.csv").read_text().splitlines()
        assert csv[0].startswith("iteration,x:loss")
        assert len(csv) == 3
