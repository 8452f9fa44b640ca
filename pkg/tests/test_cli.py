import json
import os

import pytest

from topoaug.cli import main
from topoaug.config import dump_config, load_config, parse_config
from topoaug.errors import ConfigError

SMALL_TRAIN = """
[topology]
kind = fattree
k = 2
budget_k = 1

[workload]
seed = 5
rack_count = 2
flow_count = 6
mean_arrival_rate = 8.0
hotspot_fraction = 0.0
hotspot_pairs =

[agent]
episodes = 2
explore_episodes = 1
replay_n = 4
conv_filters = 2,3
fc_block = 5
fc_trunk = 6,4

[output]
checkpoint_every = 1
compare_seeds = 2
"""


def write_config(tmp_path, text=SMALL_TRAIN):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return str(path)


class TestConfig:
    def test_defaults_parse(self):
        cfg = parse_config("")
        assert cfg.topology.kind == "fattree"
        assert cfg.agent.lr0 == 1e-4

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[nope]\nx = 1\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("[topology]\nbogus = 3\n")

    def test_typed_values_validated(self):
        with pytest.raises(ConfigError):
            parse_config("[topology]\nk = banana\n")
        with pytest.raises(ConfigError):
            parse_config("[sim]\nstep_seconds = -1\n")
        with pytest.raises(ConfigError):
            parse_config("[agent]\ngamma = 1.5\n")

    def test_rack_count_must_match_topology(self):
        with pytest.raises(ConfigError, match="rack_count"):
            parse_config("[topology]\nk = 4\n\n[workload]\nrack_count = 4\n")

    def test_roundtrip_through_dump(self, tmp_path):
        cfg = parse_config(SMALL_TRAIN)
        text = dump_config(cfg)
        again = parse_config(text)
        assert dump_config(again) == text

    def test_hotspot_pairs_parse(self):
        cfg = parse_config(
            "[workload]\nhotspot_pairs = 0-4,1-5\nhotspot_fraction = 0.5\n"
        )
        assert cfg.workload.hotspot_pairs == ((0, 4), (1, 5))

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/does/not/exist.ini")


class TestSynthCommand:
    def test_writes_trace(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "trace.csv"
        assert main(["synth", "--config", cfg, "--trace-out", str(out)]) == 0
        text = out.read_text()
        assert text.startswith("flow_id,arrival_s,src_rack,dst_rack,bytes\n")
        assert len(text.splitlines()) == 7  # header + 6 flows

    def test_same_seed_identical_bytes(self, tmp_path):
        cfg = write_config(tmp_path)
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["synth", "--config", cfg, "--trace-out", str(out1)])
        main(["synth", "--config", cfg, "--trace-out", str(out2)])
        assert out1.read_bytes() == out2.read_bytes()

    def test_invalid_config_exit_2(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[workload]\nflow_count = -5\n")
        assert main(["synth", "--config", str(bad)]) == 2


class TestTrainCommand:
    def test_train_writes_log_and_checkpoints(self, tmp_path):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "run")
        assert main(["train", "--config", cfg, "--out", out]) == 0
        log = (tmp_path / "run" / "training_log.csv").read_text()
        lines = log.splitlines()
        assert lines[0] == "episode,worker,total_reward,loss,lr"
        assert len(lines) == 3
        assert os.path.exists(tmp_path / "run" / "checkpoints" / "latest.npz")
        assert os.path.exists(tmp_path / "run" / "effective_config.ini")

    def test_train_deterministic_log(self, tmp_path):
        cfg = write_config(tmp_path)
        out1, out2 = str(tmp_path / "r1"), str(tmp_path / "r2")
        main(["train", "--config", cfg, "--out", out1])
        main(["train", "--config", cfg, "--out", out2])
        a = (tmp_path / "r1" / "training_log.csv").read_bytes()
        b = (tmp_path / "r2" / "training_log.csv").read_bytes()
        assert a == b

    def test_resume_continues_episodes(self, tmp_path):
        cfg_path = write_config(tmp_path)
        out = str(tmp_path / "run")
        main(["train", "--config", cfg_path, "--out", out])
        longer = SMALL_TRAIN.replace("episodes = 2", "episodes = 4")
        cfg2 = tmp_path / "run2.ini"
        cfg2.write_text(longer)
        assert main(["train", "--config", str(cfg2), "--out", out, "--resume"]) == 0
        lines = (tmp_path / "run" / "training_log.csv").read_text().splitlines()
        episodes = [int(l.split(",")[0]) for l in lines[1:]]
        assert episodes == [0, 1, 2, 3]

    def test_resume_without_checkpoint_exit_2(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "r"), "--resume"]) == 2


class TestEvalCommand:
    @pytest.mark.parametrize("policy", ["static", "random", "greedy"])
    def test_policies_produce_outputs(self, tmp_path, policy):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "ev")
        assert main(["eval", "--config", cfg, "--out", out, "--policy", policy]) == 0
        fct = (tmp_path / "ev" / f"fct_{policy}.csv").read_text().splitlines()
        assert fct[0] == "flow_id,arrival_s,fct_s,bytes"
        assert len(fct) == 7
        summary = json.loads((tmp_path / "ev" / f"summary_{policy}.json").read_text())
        assert summary["policy"] == policy
        assert summary["flows_completed"] == 6
        assert summary["median_fct_s"] > 0

    def test_agent_requires_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["eval", "--config", cfg, "--policy", "agent"]) == 2

    def test_agent_with_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "run")
        main(["train", "--config", cfg, "--out", out])
        ckpt = str(tmp_path / "run" / "checkpoints" / "latest.npz")
        assert (
            main(
                ["eval", "--config", cfg, "--out", str(tmp_path / "ev"),
                 "--policy", "agent", "--checkpoint", ckpt]
            )
            == 0
        )
        assert os.path.exists(tmp_path / "ev" / "fct_agent.csv")

    def test_static_on_empty_trace(self, tmp_path):
        cfg_text = SMALL_TRAIN + "\n"
        cfg = tmp_path / "c.ini"
        trace = tmp_path / "empty.csv"
        trace.write_text("")
        cfg.write_text(cfg_text.replace("[agent]", f"trace = {trace}\n\n[agent]"))
        out = str(tmp_path / "ev")
        assert main(["eval", "--config", str(cfg), "--out", out, "--policy", "static"]) == 0
        fct = (tmp_path / "ev" / "fct_static.csv").read_text().splitlines()
        assert len(fct) == 1  # header only
        summary = json.loads((tmp_path / "ev" / "summary_static.json").read_text())
        assert summary["median_fct_s"] is None

    def test_unknown_policy_exit_2(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["eval", "--config", cfg, "--policy", "bogus"]) == 2

    def test_eval_rerun_bitwise_identical_csv(self, tmp_path):
        cfg = write_config(tmp_path)
        out1, out2 = str(tmp_path / "e1"), str(tmp_path / "e2")
        main(["eval", "--config", cfg, "--out", out1, "--policy", "greedy"])
        main(["eval", "--config", cfg, "--out", out2, "--policy", "greedy"])
        for name in ("fct_greedy.csv", "actions_greedy.csv"):
            assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()


class TestCompareCommand:
    def test_rows_per_policy_seed(self, tmp_path):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "cmp")
        assert main(["compare", "--config", cfg, "--out", out]) == 0
        lines = (tmp_path / "cmp" / "compare.csv").read_text().splitlines()
        assert lines[0] == "policy,seed,median_fct_s,mean_fct_s,p95_fct_s,total_reward,flows"
        # 4 baseline policies (no checkpoint -> no agent) x 2 seeds
        assert len(lines) == 1 + 4 * 2
        seeds = {int(l.split(",")[1]) for l in lines[1:]}
        assert seeds == {5, 6}
        summary = json.loads((tmp_path / "cmp" / "compare_summary.json").read_text())
        assert set(summary["mean_median_fct_s"]) == {"static", "random", "greedy", "optimal"}

    def test_compare_includes_agent_with_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path)
        run = str(tmp_path / "run")
        main(["train", "--config", cfg, "--out", run])
        ckpt = str(run + "/checkpoints/latest.npz")
        out = str(tmp_path / "cmp")
        assert main(["compare", "--config", cfg, "--out", out, "--checkpoint", ckpt]) == 0
        lines = (tmp_path / "cmp" / "compare.csv").read_text().splitlines()
        assert len(lines) == 1 + 5 * 2
        summary = json.loads((tmp_path / "cmp" / "compare_summary.json").read_text())
        assert "agent_over_optimal_median_fct" in summary

    def test_optimal_and_greedy_beat_static_on_hotspot(self, tmp_path):
        hotspot = """
[topology]
kind = fattree
k = 4
budget_k = 2

[workload]
seed = 9
rack_count = 8
flow_count = 24
mean_arrival_rate = 10.0
size_lognormal_mu = 17.9
size_lognormal_sigma = 0.3
size_pareto_alpha = 3.0
size_pareto_min = 1e9
hotspot_fraction = 0.95
hotspot_pairs = 0-4,1-5
"""
        cfg = tmp_path / "hot.ini"
        cfg.write_text(hotspot)
        medians = {}
        for policy in ("static", "greedy", "optimal"):
            out = tmp_path / f"ev_{policy}"
            assert main(["eval", "--config", str(cfg), "--out", str(out), "--policy", policy]) == 0
            summary = json.loads((out / f"summary_{policy}.json").read_text())
            medians[policy] = summary["median_fct_s"]
        assert medians["optimal"] < medians["static"]
        assert medians["greedy"] < medians["static"]

    def test_effective_config_reproduces_run(self, tmp_path):
        cfg = write_config(tmp_path)
        out1 = str(tmp_path / "a")
        main(["eval", "--config", cfg, "--out", out1, "--policy", "greedy"])
        dumped = str(tmp_path / "a" / "effective_config.ini")
        out2 = str(tmp_path / "b")
        main(["eval", "--config", dumped, "--out", out2, "--policy", "greedy"])
        assert (tmp_path / "a" / "fct_greedy.csv").read_bytes() == (
            tmp_path / "b" / "fct_greedy.csv"
        ).read_bytes()
