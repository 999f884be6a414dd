"""Pipeline orchestration and CLI tests."""

import json

import pytest

from icsnet import cli, runtime
from icsnet.errors import StageError

SCENARIO = {"seed": 5, "duration_s": 30.0,
            "goals": [{"kind": "knows_map", "target": "plc1"}]}


def write_scenario(tmp_path, raw, name="scenario.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path


class TestRun:
    def test_all_artifacts_present(self, tmp_path):
        out = tmp_path / "out"
        runtime.run(SCENARIO, out)
        for name in runtime.OUTPUT_FILES:
            assert (out / name).exists(), name
        assert (out / "topology.json").exists()
        assert (out / "configs" / "plc1.json").exists()

    def test_empty_goals_all_benign(self, tmp_path):
        out = tmp_path / "out"
        runtime.run({"seed": 1, "duration_s": 20.0}, out)
        rows = [json.loads(l) for l in open(out / "dataset.jsonl")]
        assert rows
        assert all(r["label"] == "benign" for r in rows)

    def test_same_seed_same_manifest_digests(self, tmp_path):
        m1 = runtime.run(SCENARIO, tmp_path / "a")
        m2 = runtime.run(SCENARIO, tmp_path / "b")
        assert m1["digests"] == m2["digests"]
        assert m1["config_sha256"] == m2["config_sha256"]

    def test_nonempty_out_dir_refused(self, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        (out / "keep.txt").write_text("user data")
        with pytest.raises(StageError):
            runtime.run(SCENARIO, out)
        assert (out / "keep.txt").read_text() == "user data"

    def test_failed_stage_leaves_no_partial_dir(self, tmp_path):
        out = tmp_path / "out"
        bad = {"seed": 1, "duration_s": 30.0,
               "attacker": {"segment": "isolated"},
               "goals": [{"kind": "degraded", "target": "plc1"}]}
        with pytest.raises(StageError) as err:
            runtime.run(bad, out)
        assert err.value.stage == "plan"
        assert not out.exists()

    def test_unroutable_noise_is_config_stage_error(self, tmp_path):
        out = tmp_path / "out"
        bad = {"seed": 1, "duration_s": 10.0,
               "noise": [{"src": "plant1", "dst": "hmi", "rate_per_s": 1.0,
                          "payload_len": 8}]}
        with pytest.raises(Exception) as err:
            runtime.run(bad, out)
        assert not out.exists()

    def test_seed_override_changes_config_hash(self, tmp_path):
        m1 = runtime.run(SCENARIO, tmp_path / "a", seed=99)
        m2 = runtime.run(SCENARIO, tmp_path / "b")
        assert m1["seed"] == 99
        assert m1["config_sha256"] != m2["config_sha256"]

    def test_noise_count_matches_rate(self, tmp_path):
        out = tmp_path / "out"
        raw = {"seed": 2, "duration_s": 10.0,
               "noise": [{"src": "hmi", "dst": "plc1", "rate_per_s": 2.0,
                          "payload_len": 16, "dst_port": 9999}]}
        runtime.run(raw, out)
        rows = [json.loads(l) for l in open(out / "dataset.jsonl")]
        noise = [r for r in rows if r["protocol"] == "noise"]
        assert len(noise) == 20
        assert all(r["label"] == "benign" for r in noise)


class TestPlanOnly:
    def test_plans_listed_in_goal_order(self, tmp_path):
        raw = {"seed": 5, "duration_s": 120.0,
               "goals": [
                   {"kind": "knows_map", "target": "plc1"},
                   {"kind": "spoofed", "target": "plc1.pressure"},
               ]}
        result = runtime.plan_only(json.dumps(raw).encode())
        assert [p["plan_id"] for p in result["plans"]] == ["g0", "g1"]
        assert [s["kind"] for s in result["plans"][0]["steps"]] == ["recon"]
        # Coordinated planning: the spoof goal reuses goal 0's recon and
        # only adds what is still missing.
        assert [s["kind"] for s in result["plans"][1]["steps"]] == ["mitm", "spoof"]
        assert result["unreachable"] == []

    def test_single_spoof_goal_plans_all_three_steps(self):
        raw = {"seed": 5, "duration_s": 120.0,
               "goals": [{"kind": "spoofed", "target": "plc1.pressure"}]}
        result = runtime.plan_only(json.dumps(raw).encode())
        kinds = sorted(s["kind"] for s in result["plans"][0]["steps"])
        assert kinds == ["mitm", "recon", "spoof"]

    def test_isolated_attacker_diagnosed(self, tmp_path):
        raw = {"seed": 5, "duration_s": 60.0,
               "attacker": {"segment": "isolated"},
               "goals": [{"kind": "degraded", "target": "plc1"}]}
        result = runtime.plan_only(json.dumps(raw).encode())
        assert result["plans"] == []
        assert len(result["unreachable"]) == 1
        assert result["unreachable"][0]["goal"] == ["degraded", "plc1:502"]


class TestCli:
    def test_run_then_verify_roundtrip(self, tmp_path, capsys):
        scenario = write_scenario(tmp_path, SCENARIO)
        out = tmp_path / "out"
        code = cli.main(["run", str(scenario), "--out", str(out)])
        assert code == 0
        assert "run complete" in capsys.readouterr().out
        code = cli.main(["verify", str(out)])
        assert code == 0

    def test_verify_detects_tampering(self, tmp_path, capsys):
        scenario = write_scenario(tmp_path, SCENARIO)
        out = tmp_path / "out"
        cli.main(["run", str(scenario), "--out", str(out)])
        data = (out / "dataset.jsonl").read_text().splitlines()
        (out / "dataset.jsonl").write_text("\n".join(data[:-2]) + "\n")
        code = cli.main(["verify", str(out)])
        assert code == cli.EXIT_VERIFY
        assert "FAIL" in capsys.readouterr().out

    def test_plan_command_prints_plans(self, tmp_path, capsys):
        scenario = write_scenario(tmp_path, {
            "seed": 5, "duration_s": 120.0,
            "goals": [{"kind": "spoofed", "target": "plc1.pressure"}]})
        code = cli.main(["plan", str(scenario)])
        assert code == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["plans"][0]["steps"][2]["kind"] == "spoof"

    def test_plan_command_nonzero_for_unreachable(self, tmp_path, capsys):
        scenario = write_scenario(tmp_path, {
            "seed": 5, "duration_s": 60.0,
            "attacker": {"segment": "isolated"},
            "goals": [{"kind": "degraded", "target": "plc1"}]})
        code = cli.main(["plan", str(scenario)])
        assert code == cli.EXIT_PLAN

    def test_validation_error_exit_code(self, tmp_path, capsys):
        scenario = write_scenario(tmp_path, {"duration_s": -1})
        out = tmp_path / "out"
        code = cli.main(["run", str(scenario), "--out", str(out)])
        assert code == cli.EXIT_CONFIG
        assert "error:" in capsys.readouterr().err

    def test_gateway_refused_in_fast_mode(self):
        from icsnet import coordinator, gateway
        from icsnet.errors import GatewayModeError
        cfg = coordinator.parse_scenario({"seed": 1, "duration_s": 5.0})
        sim = runtime.build_simulation(cfg)
        with pytest.raises(GatewayModeError):
            gateway.Gateway(sim, "127.0.0.1:0")
