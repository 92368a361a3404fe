"""Command-line surface: config parsing, wire protocol, logs, demos."""

import json
import sys
import textwrap

import numpy as np
import pytest

from krigopt.cli import main
from krigopt.config import parse_config_text, serialize_config
from krigopt.errors import ConfigError, EvaluatorFailure
from krigopt.evaluator import EvaluatorRequest, ExternalEvaluator
from krigopt.runlog import measurements_from_log, read_log, strip_timing

pytestmark = pytest.mark.filterwarnings("ignore:measurement set duplicates")

BASE_CONFIG = {
    "domain": {"lower": [0.0], "upper": [1.0]},
    "kernel": {"variance": 9.0, "lengthscales": [0.5], "mean": 3.0},
    "mode": "ei",
    "budget": 9,
    "seed": 7,
    "mc_samples": 512,
    "fmin_method": "measured_min",
    "inner": {"multistarts": 2, "max_iters": 15},
    "evaluator": {"builtin": "quad1d"},
}


def _write_config(tmp_path, overrides=None, name="config.json"):
    cfg = json.loads(json.dumps(BASE_CONFIG))
    for key, val in (overrides or {}).items():
        if val is None:
            cfg.pop(key, None)
        else:
            cfg[key] = val
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _script(tmp_path, body, name):
    path = tmp_path / name
    path.write_text(body)
    return [sys.executable, str(path)]


QUAD_EVALUATOR = textwrap.dedent(
    """\
    import json, sys
    for line in sys.stdin:
        req = json.loads(line)
        x = req["location"][0]
        vals = []
        for op in req["operators"]:
            if op == "value":
                vals.append(25.0 * (x - 0.7134) ** 2)
            elif op.startswith("grad:"):
                vals.append(50.0 * (x - 0.7134))
        print(json.dumps({"id": req["id"], "values": vals}))
        sys.stdout.flush()
    """
)

REVERSING_EVALUATOR = textwrap.dedent(
    """\
    import json, sys
    pending = []
    for line in sys.stdin:
        pending.append(json.loads(line))
        if len(pending) == 3:
            for req in reversed(pending):
                v = sum(u * u for u in req["location"])
                print(json.dumps({"id": req["id"], "values": [v]}))
            sys.stdout.flush()
            pending = []
    """
)

DYING_EVALUATOR = textwrap.dedent(
    """\
    import json, os, sys
    marker = sys.argv[1]
    if os.path.exists(marker):
        sys.exit(1)  # stays dead across restarts
    served = 0
    for line in sys.stdin:
        req = json.loads(line)
        if served >= 4:
            open(marker, "w").close()
            sys.exit(1)
        v = sum(u * u for u in req["location"])
        print(json.dumps({"id": req["id"], "values": [v]}))
        sys.stdout.flush()
        served += 1
    """
)

BAD_ARITY_EVALUATOR = textwrap.dedent(
    """\
    import json, sys
    for line in sys.stdin:
        req = json.loads(line)
        print(json.dumps({"id": req["id"], "values": [1.0, 2.0, 3.0]}))
        sys.stdout.flush()
    """
)

ERROR_EVALUATOR = textwrap.dedent(
    """\
    import json, sys
    for line in sys.stdin:
        req = json.loads(line)
        print(json.dumps({"id": req["id"], "values": [], "error": "solver diverged"}))
        sys.stdout.flush()
    """
)


class TestConfigParsing:
    def test_round_trip_identity(self):
        setup = parse_config_text(json.dumps(BASE_CONFIG))
        again = parse_config_text(serialize_config(setup))
        assert again.raw == setup.raw
        assert again.ego == setup.ego

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            parse_config_text(json.dumps({**BASE_CONFIG, "bogus": 1}))

    def test_unknown_nested_key(self):
        bad = json.loads(json.dumps(BASE_CONFIG))
        bad["inner"]["mystery"] = 2
        with pytest.raises(ConfigError, match="inner"):
            parse_config_text(json.dumps(bad))

    def test_malformed_json_reports_position(self):
        with pytest.raises(ConfigError, match=r"line 1 column"):
            parse_config_text('{"domain": }')

    def test_missing_required_key(self):
        bad = {k: v for k, v in BASE_CONFIG.items() if k != "budget"}
        with pytest.raises(ConfigError, match="budget"):
            parse_config_text(json.dumps(bad))

    def test_kernel_or_components_required(self):
        bad = {k: v for k, v in BASE_CONFIG.items() if k != "kernel"}
        with pytest.raises(ConfigError, match="kernel"):
            parse_config_text(json.dumps(bad))

    def test_fit_block_enables_refit(self):
        cfg = json.loads(json.dumps(BASE_CONFIG))
        cfg["kernel"] = {
            "fit": {"lengthscales": [0.02, 3.0], "variance": [1e-4, 400.0]}
        }
        setup = parse_config_text(json.dumps(cfg))
        assert setup.ego.refit_hyperparameters
        assert setup.ego.fit_bounds["lengthscales"] == (0.02, 3.0)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError, match="mode"):
            parse_config_text(json.dumps({**BASE_CONFIG, "mode": "magic"}))

    def test_unknown_builtin_evaluator(self):
        with pytest.raises(ConfigError, match="unknown builtin"):
            parse_config_text(
                json.dumps({**BASE_CONFIG, "evaluator": {"builtin": "nope"}})
            )

    def test_components_block(self):
        cfg = {k: v for k, v in BASE_CONFIG.items() if k not in ("kernel", "fmin_method")}
        cfg["components"] = {
            "Z": {"variance": 0.5, "lengthscales": [0.25], "mean": 0.5},
            "eps": {"variance": 0.06, "lengthscales": [0.06]},
        }
        cfg["mode"] = "noisy"
        cfg["evaluator"] = {"builtin": "noisy1d"}
        setup = parse_config_text(json.dumps(cfg))
        assert setup.ego.prior.ids == ("Z", "eps")

    def test_kernel_and_components_conflict(self):
        cfg = json.loads(json.dumps(BASE_CONFIG))
        cfg["components"] = {"Z": {"variance": 1.0, "lengthscales": [0.3]}}
        with pytest.raises(ConfigError, match="not both"):
            parse_config_text(json.dumps(cfg))

    def test_undeclared_mode_component_rejected(self):
        cfg = {k: v for k, v in BASE_CONFIG.items() if k not in ("kernel", "fmin_method")}
        cfg.update(
            {
                "components": {
                    "Z": {"variance": 0.5, "lengthscales": [0.25]},
                    "eps": {"variance": 0.06, "lengthscales": [0.06]},
                },
                "mode": "noisy",
                "noisy": {"objective": "Z", "noise": "nope"},
                "evaluator": {"builtin": "noisy1d"},
            }
        )
        with pytest.raises(ConfigError, match="nope"):
            parse_config_text(json.dumps(cfg))

    def test_component_mode_requires_components_prior(self):
        cfg = json.loads(json.dumps(BASE_CONFIG))
        cfg.pop("fmin_method")
        cfg["mode"] = "noisy"
        cfg["evaluator"] = {"builtin": "noisy1d"}
        with pytest.raises(ConfigError, match="components"):
            parse_config_text(json.dumps(cfg))

    def test_measured_min_rejected_for_unmeasurable_response(self):
        cfg = {k: v for k, v in BASE_CONFIG.items() if k != "kernel"}
        cfg.update(
            {
                "components": {
                    "Z": {"variance": 0.5, "lengthscales": [0.25]},
                    "eps": {"variance": 0.06, "lengthscales": [0.06]},
                },
                "mode": "noisy",
                "fmin_method": "measured_min",
                "evaluator": {"builtin": "noisy1d"},
            }
        )
        with pytest.raises(ConfigError, match="posterior_mean_min"):
            parse_config_text(json.dumps(cfg))


class TestRunCommand:
    def test_run_exit_zero_and_log(self, tmp_path):
        cfg = _write_config(tmp_path)
        out = str(tmp_path / "log.jsonl")
        assert main(["--quiet", "run", "--config", cfg, "--out", out]) == 0
        recs = read_log(out)
        types = [r["type"] for r in recs]
        assert types[0] == "config"
        assert types[-1] == "summary"
        assert "design" in types and "iteration" in types
        design_best = min(
            m["value"] for r in recs if r["type"] == "design" for m in r["measurements"]
        )
        final_best = min(
            m["value"]
            for r in recs
            if r["type"] in ("design", "iteration")
            for m in r["measurements"]
        )
        assert final_best <= design_best

    def test_bad_config_exit_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"domain": }')
        assert main(["run", "--config", str(path)]) == 2

    def test_unknown_key_exit_2(self, tmp_path):
        cfg = _write_config(tmp_path, {"mystery": 1})
        assert main(["run", "--config", cfg]) == 2

    def test_missing_file_exit_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2

    def test_external_matches_builtin_exactly(self, tmp_path):
        cfg_b = _write_config(tmp_path, name="builtin.json")
        cmd = _script(tmp_path, QUAD_EVALUATOR, "quad_eval.py")
        cfg_x = _write_config(
            tmp_path,
            {"evaluator": {"command": cmd, "timeout": 20.0}},
            name="external.json",
        )
        out_b, out_x = str(tmp_path / "b.jsonl"), str(tmp_path / "x.jsonl")
        assert main(["--quiet", "run", "--config", cfg_b, "--out", out_b]) == 0
        assert main(["--quiet", "run", "--config", cfg_x, "--out", out_x]) == 0
        mb = [(m.point.key(), m.value) for m in measurements_from_log(read_log(out_b))]
        mx = [(m.point.key(), m.value) for m in measurements_from_log(read_log(out_x))]
        assert mb == mx

    def test_dying_evaluator_exit_3_partial_log(self, tmp_path):
        cmd = _script(tmp_path, DYING_EVALUATOR, "dying.py")
        cmd.append(str(tmp_path / "died.marker"))
        cfg = _write_config(
            tmp_path,
            {"evaluator": {"command": cmd, "timeout": 5.0, "retries": 2}},
            name="dying.json",
        )
        out = str(tmp_path / "partial.jsonl")
        assert main(["--quiet", "run", "--config", cfg, "--out", out]) == 3
        recs = read_log(out)  # every line still parses: flushed incrementally
        assert recs[0]["type"] == "config"


class TestWireProtocol:
    def test_out_of_order_responses_matched(self, tmp_path):
        ev = ExternalEvaluator(_script(tmp_path, REVERSING_EVALUATOR, "rev.py"), timeout=20)
        try:
            reqs = [EvaluatorRequest(i, [0.1 * i], ["value"]) for i in (1, 2, 3)]
            resps = ev.evaluate(reqs)
            for req, resp in zip(reqs, resps):
                assert resp.id == req.id
                assert resp.values[0] == pytest.approx(req.location[0] ** 2)
        finally:
            ev.close()

    def test_restart_between_calls_is_transparent(self, tmp_path):
        ev = ExternalEvaluator(_script(tmp_path, QUAD_EVALUATOR, "q.py"), timeout=20)
        try:
            a = ev.evaluate([EvaluatorRequest(1, [0.25], ["value"])])
            ev._kill_child()
            b = ev.evaluate([EvaluatorRequest(2, [0.25], ["value"])])
            assert a[0].values == b[0].values
        finally:
            ev.close()

    def test_arity_mismatch_raises(self, tmp_path):
        ev = ExternalEvaluator(_script(tmp_path, BAD_ARITY_EVALUATOR, "bad.py"), timeout=20)
        try:
            with pytest.raises(EvaluatorFailure, match="arity"):
                ev.evaluate([EvaluatorRequest(1, [0.5], ["value"])])
        finally:
            ev.close()

    def test_error_field_raises_with_payload(self, tmp_path):
        ev = ExternalEvaluator(_script(tmp_path, ERROR_EVALUATOR, "err.py"), timeout=20)
        try:
            with pytest.raises(EvaluatorFailure, match="solver diverged") as ei:
                ev.evaluate([EvaluatorRequest(1, [0.5], ["value"])])
            assert ei.value.payload is not None
        finally:
            ev.close()

    def test_dead_command_fails_after_retries(self):
        ev = ExternalEvaluator([sys.executable, "-c", "import sys; sys.exit(1)"], timeout=2, retries=2)
        try:
            with pytest.raises(EvaluatorFailure, match="after 2 attempts"):
                ev.evaluate([EvaluatorRequest(1, [0.5], ["value"])])
        finally:
            ev.close()


class TestSuggestCommand:
    def test_empty_state_emits_design(self, tmp_path, capsys):
        cfg = _write_config(tmp_path)
        state = tmp_path / "state.jsonl"
        state.write_text("")
        assert main(["suggest", "--config", cfg, "--state", str(state)]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
        assert len(lines) == 6  # the full initial design
        for line in lines:
            obj = json.loads(line)
            assert obj["operators"] == ["value"]

    def test_gradient_mode_arity(self, tmp_path, capsys):
        cfg = _write_config(tmp_path, {"mode": "gradient", "budget": 8})
        assert main(["suggest", "--config", cfg]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
        for line in lines:
            obj = json.loads(line)
            assert obj["operators"] == ["value", "grad:0"]

    def test_deterministic(self, tmp_path, capsys):
        cfg = _write_config(tmp_path)
        state = tmp_path / "state.jsonl"
        rows = [
            {"location": [0.1 * i + 0.05], "operator": {"type": "value"}, "value": float(i)}
            for i in range(6)
        ]
        state.write_text("\n".join(json.dumps(r) for r in rows))
        main(["suggest", "--config", cfg, "--state", str(state)])
        first = capsys.readouterr().out
        main(["suggest", "--config", cfg, "--state", str(state)])
        second = capsys.readouterr().out
        assert first == second

    def test_noisy_mode_state_round_trip(self, tmp_path, capsys):
        cfg = {k: v for k, v in BASE_CONFIG.items() if k not in ("kernel", "fmin_method")}
        cfg.update(
            {
                "components": {
                    "Z": {"variance": 0.5, "lengthscales": [0.25], "mean": 0.5},
                    "eps": {"variance": 0.0625, "lengthscales": [0.06]},
                },
                "mode": "noisy",
                "budget": 8,
                "evaluator": {"builtin": "noisy1d"},
            }
        )
        path = tmp_path / "noisy.json"
        path.write_text(json.dumps(cfg))
        sum_tag = {
            "type": "sum",
            "terms": [{"type": "component", "id": "Z"}, {"type": "component", "id": "eps"}],
        }
        state = tmp_path / "state.jsonl"
        rows = [
            {"location": [x], "operator": sum_tag, "value": v}
            for x, v in [(0.1, 0.4), (0.3, 0.2), (0.5, 0.1), (0.7, 0.3), (0.85, 0.5), (0.95, 0.6)]
        ]
        state.write_text("\n".join(json.dumps(r) for r in rows))
        assert main(["suggest", "--config", str(path), "--state", str(state)]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
        assert len(lines) == 1
        assert json.loads(lines[0])["operators"] == ["value"]

    def test_replay_reproduces_logged_suggestions(self, tmp_path, capsys):
        cfg = _write_config(tmp_path, {"budget": 10})
        out = str(tmp_path / "log.jsonl")
        assert main(["--quiet", "run", "--config", cfg, "--out", out]) == 0
        recs = read_log(out)
        measurements = []
        for rec in recs:
            if rec["type"] not in ("design", "iteration"):
                continue
            if rec["type"] == "iteration":
                state = tmp_path / "replay.jsonl"
                state.write_text("\n".join(json.dumps(m) for m in measurements))
                main(["suggest", "--config", cfg, "--state", str(state)])
                lines = [
                    json.loads(l)
                    for l in capsys.readouterr().out.splitlines()
                    if l.strip()
                ]
                logged = [p["location"] for p in rec["proposals"]]
                assert [l["location"] for l in lines] == logged
            measurements.extend(rec["measurements"])


class TestPsiCommand:
    def test_value_and_bounds(self, tmp_path, capsys):
        path = tmp_path / "prob.json"
        path.write_text(json.dumps({"mu": [0.0], "sigma": [[1.0]], "clamp": 0.0}))
        assert main(["psi", "--config", str(path), "--samples", "200000"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert abs(out["value"] + 1 / np.sqrt(2 * np.pi)) <= 4 * out["stderr"]
        assert out["lower_bound"] <= out["value"] <= out["upper_bound"] + 4 * out["stderr"]

    def test_unknown_key_exit_2(self, tmp_path):
        path = tmp_path / "prob.json"
        path.write_text(json.dumps({"mu": [0.0], "sigma": [[1.0]], "zeta": 1}))
        assert main(["psi", "--config", str(path)]) == 2

    def test_deterministic(self, tmp_path, capsys):
        path = tmp_path / "prob.json"
        path.write_text(json.dumps({"mu": [0.1, -0.3], "sigma": [[1.0, 0.2], [0.2, 0.5]]}))
        main(["psi", "--config", str(path), "--seed", "5"])
        a = capsys.readouterr().out
        main(["psi", "--config", str(path), "--seed", "5"])
        assert capsys.readouterr().out == a


class TestDemoCommand:
    def test_batch_demo_outputs(self, tmp_path):
        out = str(tmp_path / "demo")
        assert main(
            ["--quiet", "demo", "batch", "--out", out, "--seed", "1"]
        ) == 0
        for name in (
            "runlog.jsonl",
            "surface.csv",
            "trajectory.csv",
            "measurements.csv",
            "surface.png",
            "trajectory.png",
        ):
            assert (tmp_path / "demo" / name).exists(), name
        header = (tmp_path / "demo" / "surface.csv").read_text().splitlines()[0]
        assert header == "x,posterior_mean,posterior_sd,acquisition"
        recs = read_log(str(tmp_path / "demo" / "runlog.jsonl"))
        assert recs[0]["type"] == "config"
        its = [r for r in recs if r["type"] == "iteration"]
        assert all(len(r["proposals"]) == 3 for r in its)

    def test_no_figures_flag(self, tmp_path):
        out = str(tmp_path / "demo2")
        assert main(
            ["--quiet", "demo", "batch", "--out", out, "--seed", "2", "--no-figures"]
        ) == 0
        assert not (tmp_path / "demo2" / "surface.png").exists()
        assert (tmp_path / "demo2" / "surface.csv").exists()

    @pytest.mark.parametrize("scenario", ["gradient", "fidelity"])
    def test_other_scenarios_smoke(self, tmp_path, scenario):
        out = str(tmp_path / scenario)
        assert main(["--quiet", "demo", scenario, "--out", out, "--no-figures"]) == 0
        recs = read_log(str(tmp_path / scenario / "runlog.jsonl"))
        assert recs[-1]["type"] == "summary"
        assert recs[-1]["status"] == "budget_exhausted"

    def test_figures_have_content(self, tmp_path):
        out = tmp_path / "demo3"
        assert main(["--quiet", "demo", "batch", "--out", str(out), "--seed", "3"]) == 0
        for name in ("surface.png", "trajectory.png"):
            data = (out / name).read_bytes()
            assert data[:8] == b"\x89PNG\r\n\x1a\n"
            assert len(data) > 10_000


class TestDeterminism:
    def test_identical_runs_identical_logs(self, tmp_path):
        cfg = _write_config(tmp_path)
        out1, out2 = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
        assert main(["--quiet", "run", "--config", cfg, "--out", out1]) == 0
        assert main(["--quiet", "run", "--config", cfg, "--out", out2]) == 0
        a = [json.dumps(r) for r in strip_timing(read_log(out1))]
        b = [json.dumps(r) for r in strip_timing(read_log(out2))]
        assert a == b

    def test_seed_override_changes_log(self, tmp_path):
        cfg = _write_config(tmp_path)
        out1, out2 = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
        main(["--quiet", "run", "--config", cfg, "--out", out1])
        main(["--quiet", "run", "--config", cfg, "--seed", "99", "--out", out2])
        a = strip_timing(read_log(out1))
        b = strip_timing(read_log(out2))
        assert a != b

    def test_quiet_accepted_in_both_positions(self, tmp_path, capsys):
        cfg = _write_config(tmp_path, {"budget": 6})
        out = str(tmp_path / "q.jsonl")
        assert main(["--quiet", "run", "--config", cfg, "--out", out]) == 0
        assert capsys.readouterr().out == ""
        assert main(["run", "--config", cfg, "--out", out, "--quiet"]) == 0
        assert capsys.readouterr().out == ""
