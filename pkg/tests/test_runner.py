import json
from dataclasses import replace

import pytest

from delaystream.cli import main
from delaystream.methods import MethodSpec
from delaystream.runner import (
    ConfigError,
    apply_seed_override,
    execute_run,
    load_summaries,
    parse_config,
    plan_from_dict,
    run_plan,
    write_report,
)

MINIMAL = {"stream": {"n": 4, "horizon": 10}, "methods": [{"variant": "naive"}]}


def config(**overrides):
    raw = json.loads(json.dumps(MINIMAL))
    raw.update(overrides)
    return raw


def write_config(tmp_path, raw, name="plan.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path


class TestConfig:
    def test_minimal_defaults(self):
        plan = plan_from_dict(MINIMAL)
        assert plan.delays == (0,) and plan.budgets == (1,) and plan.seeds == (0,)
        assert plan.buffer_capacity == 4096
        assert plan.model.lr == 0.005 and plan.model.arch == "linear"
        assert plan.methods == (MethodSpec("naive"),)
        assert len(plan.runs()) == 1

    def test_negative_delay_names_key(self):
        with pytest.raises(ConfigError, match=r"delays\[0\]"):
            plan_from_dict(config(delays=[-1]))

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="budgett"):
            plan_from_dict(config(budgett=[1]))

    def test_nested_unknown_key(self):
        raw = config()
        raw["stream"]["horizn"] = 5
        with pytest.raises(ConfigError, match="stream.horizn"):
            plan_from_dict(raw)

    def test_strict_types(self):
        with pytest.raises(ConfigError, match=r"seeds\[0\]"):
            plan_from_dict(config(seeds=["1"]))

    def test_bad_method(self):
        with pytest.raises(ConfigError, match=r"methods\[0\]"):
            plan_from_dict(config(methods=[{"variant": "pseudo_label", "composition": ["N", "R"]}]))

    def test_duplicate_method_labels(self):
        with pytest.raises(ConfigError, match="unique"):
            plan_from_dict(config(methods=[{"variant": "naive"}, {"variant": "naive"}]))

    def test_horizon_required(self):
        with pytest.raises(ConfigError, match="horizon"):
            plan_from_dict({"stream": {"n": 4}, "methods": [{"variant": "naive"}]})

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        with pytest.raises(ConfigError, match="invalid JSON"):
            parse_config(path)

    def test_seed_override(self):
        plan = apply_seed_override(plan_from_dict(config(seeds=[1, 2])), {"DELAYSTREAM_SEED_OVERRIDE": "9"})
        assert plan.seeds == (9,)
        with pytest.raises(ConfigError):
            apply_seed_override(plan, {"DELAYSTREAM_SEED_OVERRIDE": "x"})


class TestRunIds:
    def test_equal_configs_equal_ids(self):
        a = plan_from_dict(config(delays=[0, 5])).runs()
        b = plan_from_dict(config(delays=[0, 5])).runs()
        assert [r.run_id for r in a] == [r.run_id for r in b]
        assert len({r.run_id for r in a}) == 2

    @pytest.mark.parametrize(
        "change",
        [
            lambda p: replace(p, buffer_capacity=100),
            lambda p: replace(p, model=replace(p.model, lr=0.1)),
            lambda p: replace(p, stream=replace(p.stream, n=5)),
            lambda p: replace(p, methods=(MethodSpec("naive", eps=0.01),)),
        ],
    )
    def test_any_field_changes_id(self, change):
        plan = plan_from_dict(MINIMAL)
        assert plan.runs()[0].run_id != change(plan).runs()[0].run_id


class TestExecution:
    def test_four_run_plan(self, tmp_path):
        plan = plan_from_dict(config(delays=[0, 5], seeds=[1, 2]))
        result = run_plan(plan, output_dir=tmp_path)
        assert len(result.rows) == 4 and not result.failures
        assert len(list(tmp_path.glob("*/trace.csv"))) == 4
        lines = (tmp_path / "aggregate.csv").read_text().splitlines()
        assert lines[0] == "method,d,C,seed,final_acc,backward_transfer"
        assert len(lines) == 5
        assert (tmp_path / "aggregate_stats.csv").exists()

    def test_existing_runs_skipped_unless_overwrite(self, tmp_path):
        run = plan_from_dict(MINIMAL).runs()[0]
        execute_run(run, tmp_path)
        trace = tmp_path / run.run_id / "trace.csv"
        trace.write_text("stale")
        execute_run(run, tmp_path)
        assert trace.read_text() == "stale"
        execute_run(run, tmp_path, overwrite=True)
        assert trace.read_text().startswith("t,correct")

    def test_failed_run_is_recorded(self, tmp_path):
        plan = plan_from_dict(MINIMAL)
        plan = replace(plan, stream=replace(plan.stream, n=0))
        result = run_plan(plan, output_dir=tmp_path)
        assert len(result.failures) == 1
        assert result.failures[0]["status"] == "error"

    def test_report_columns(self, tmp_path):
        plan = plan_from_dict(
            config(delays=[0, 5], methods=[{"variant": "naive"}, {"variant": "iwms"}])
        )
        run_plan(plan, output_dir=tmp_path)
        fields, table = write_report(tmp_path)
        assert fields == ["method", "C", "acc_0", "acc_5", "G_5", "R_5"]
        rows = {r["method"]: r for r in table}
        assert rows["naive"]["R_5"] == 0.0 or rows["naive"]["G_5"] == 0.0
        assert (tmp_path / "report.csv").read_text().startswith("method,C,acc_0,acc_5,G_5,R_5")
        assert len(load_summaries(tmp_path)) == 4


class TestCli:
    def test_selftest(self, capsys):
        assert main(["selftest"]) == 0
        assert "PASS gradients" in capsys.readouterr().out

    def test_usage_error(self):
        assert main(["frobnicate"]) == 1
        assert main([]) == 1

    def test_config_error_exit(self, tmp_path):
        assert main(["run", str(write_config(tmp_path, config(delays=[-1])))]) == 1

    def test_run_and_report(self, tmp_path):
        raw = config(delays=[0, 2], output_dir="out")
        path = write_config(tmp_path, raw)
        assert main(["run", str(path)]) == 0
        assert main(["report", str(tmp_path / "out")]) == 0

    def test_run_failure_exit(self, tmp_path):
        rows = "step,label,f0\n" + "".join(f"1,{i % 2},0.5\n" for i in range(4))
        (tmp_path / "s.csv").write_text(rows)
        raw = {
            "stream": {"n": 4, "horizon": 3, "generator": {"variant": "file", "path": "s.csv"}},
            "methods": [{"variant": "naive"}],
            "output_dir": "out",
        }
        assert main(["run", str(write_config(tmp_path, raw))]) == 2

    def test_gen_then_replay(self, tmp_path):
        out = tmp_path / "stream.csv"
        assert main(["gen", "rotating", "--steps", "6", "--n", "4", "--classes", "3", "--dim", "3", "-o", str(out)]) == 0
        header, *rows = out.read_text().splitlines()
        assert header == "step,label,f0,f1,f2" and len(rows) == 24
        raw = {
            "stream": {"n": 4, "generator": {"variant": "file", "path": "stream.csv"}},
            "methods": [{"variant": "naive"}],
            "delays": [1],
            "output_dir": "out",
        }
        assert main(["run", str(write_config(tmp_path, raw))]) == 0
        summary = load_summaries(tmp_path / "out")[0]
        assert summary["status"] == "ok" and summary["d"] == 1

    def test_seed_override_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DELAYSTREAM_SEED_OVERRIDE", "42")
        raw = config(seeds=[1, 2, 3], output_dir="out")
        assert main(["run", str(write_config(tmp_path, raw))]) == 0
        assert [s["seed"] for s in load_summaries(tmp_path / "out")] == [42]


def test_aggregate_matches_summaries(tmp_path):
    plan = plan_from_dict(config(delays=[0, 3], budgets=[1, 2]))
    run_plan(plan, output_dir=tmp_path)
    lines = (tmp_path / "aggregate.csv").read_text().splitlines()[1:]
    from_csv = sorted(tuple(line.split(",")[:5]) for line in lines)
    from_json = sorted(
        (s["method"], str(s["d"]), str(s["C"]), str(s["seed"]), repr(s["final_online_acc"]))
        for s in load_summaries(tmp_path)
    )
    assert from_csv == from_json


def test_file_replay_reproduces_generator_trace(tmp_path):
    assert main(["gen", "rotating", "--steps", "100", "--n", "16", "--omega", "0.01", "-o", str(tmp_path / "s.csv")]) == 0
    common = {"methods": [{"variant": "naive"}], "delays": [2]}
    in_memory = plan_from_dict({"stream": {"n": 16, "horizon": 100, "generator": {"omega": 0.01}}, **common})
    replayed = plan_from_dict(
        {"stream": {"n": 16, "generator": {"variant": "file", "path": "s.csv", "num_classes": 4}}, **common},
        base_dir=tmp_path,
    )
    run_plan(in_memory, output_dir=tmp_path / "a")
    run_plan(replayed, output_dir=tmp_path / "b")
    traces = [next((tmp_path / d).glob("*/trace.csv")).read_bytes() for d in ("a", "b")]
    assert traces[0] == traces[1]
