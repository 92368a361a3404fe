"""Seeded desk-scale demo scenarios with tabular plot data and figures.

Each scenario runs the optimization loop on a builtin problem and writes,
under the output directory:

    runlog.jsonl        append-only run log
    surface.csv         posterior mean/sd and acquisition over a grid
    trajectory.csv      best-value trajectory per iteration
    measurements.csv    every measurement taken
    surface.png, trajectory.png   rendered views of the tables

The drilling scenario confines responses to a box the loop may not measure
inside; the robust scenario optimizes the perturbation-averaged objective.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from . import plots
from .acquisition import RobustMode, gaussian_min_exact_1d
from .evaluator import BuiltinEvaluator
from .field import FminMethod, condition, find_fmin
from .kernel import (
    ComponentSpec,
    Domain,
    GeneralizedPoint,
    Identity,
    KernelSpec,
)
from .optimizer import (
    AcquisitionMode,
    EgoConfig,
    InnerOptConfig,
    mode_response_op,
    run_ego,
)
from .problems import get_problem
from .runlog import RunLogWriter, summary_record, tag_to_json

__all__ = ["SCENARIOS", "scenario_config", "run_demo", "robust_baseline_config"]

DRILLING_REGION = ([0.35, 0.35], [0.65, 0.65])
ROBUST_COV = [[0.0225]]  # sd 0.15 manufacturing scatter


def scenario_config(scenario: str, seed: int = 0, mc_samples=None) -> tuple[EgoConfig, object]:
    """Config and builtin problem for a named scenario."""
    inner = InnerOptConfig(multistarts=3, max_iters=25)
    if scenario == "drilling":
        prob = get_problem("bumps2d")
        cfg = EgoConfig(
            domain=prob.domain,
            prior=KernelSpec(0.15, [0.2, 0.2], -0.3),
            budget=18,
            acquisition_mode=AcquisitionMode.EI,
            response_region=Domain(*DRILLING_REGION),
            seed=seed,
            mc_samples=mc_samples or 1024,
            inner=inner,
        )
    elif scenario == "batch":
        prob = get_problem("multimodal1d")
        cfg = EgoConfig(
            domain=prob.domain,
            prior=KernelSpec(1.0, [0.15], 0.5),
            budget=18,
            batch_size=3,
            acquisition_mode=AcquisitionMode.BATCH,
            seed=seed,
            mc_samples=mc_samples or 2048,
            inner=inner,
        )
    elif scenario == "gradient":
        prob = get_problem("multimodal1d")
        cfg = EgoConfig(
            domain=prob.domain,
            prior=KernelSpec(1.0, [0.2], 0.5),
            budget=10,
            acquisition_mode=AcquisitionMode.GRADIENT,
            seed=seed,
            mc_samples=mc_samples or 1024,
            inner=InnerOptConfig(multistarts=2, max_iters=20),
        )
    elif scenario == "noisy":
        prob = get_problem("noisy1d")
        cfg = EgoConfig(
            domain=prob.domain,
            prior=ComponentSpec(
                {
                    "Z": KernelSpec(0.5, [0.25], 0.5),
                    "eps": KernelSpec(0.0625, [0.06], 0.0),
                }
            ),
            budget=16,
            acquisition_mode=AcquisitionMode.NOISY,
            seed=seed,
            mc_samples=mc_samples or 1024,
            inner=inner,
        )
    elif scenario == "fidelity":
        prob = get_problem("fidelity1d")
        cfg = EgoConfig(
            domain=prob.domain,
            prior=ComponentSpec(
                {
                    "Z": KernelSpec(0.5, [0.2], 0.5),
                    "W": KernelSpec(0.09, [0.5], 0.0),
                }
            ),
            budget=16,
            acquisition_mode=AcquisitionMode.FIDELITY,
            fidelity_cost_hi=1.0,
            fidelity_cost_lo=0.1,
            seed=seed,
            mc_samples=mc_samples or 1024,
            inner=inner,
        )
    elif scenario == "robust":
        prob = get_problem("twowell1d")
        cfg = EgoConfig(
            domain=prob.domain,
            prior=KernelSpec(0.5, [0.08], -0.3),
            budget=22,
            acquisition_mode=AcquisitionMode.ROBUST,
            robust_cov=ROBUST_COV,
            robust_mode=RobustMode.CONVOLUTION,
            seed=seed,
            mc_samples=mc_samples or 1024,
            inner=inner,
        )
    else:
        raise ValueError(f"unknown scenario {scenario!r}; one of {sorted(SCENARIOS)}")
    return cfg, prob


SCENARIOS = ("drilling", "batch", "gradient", "noisy", "fidelity", "robust")


def robust_baseline_config(seed: int = 0, mc_samples=None) -> tuple[EgoConfig, object]:
    """Plain value-seeking run on the robust problem, same budget and prior."""
    cfg, prob = scenario_config("robust", seed, mc_samples)
    import dataclasses

    return (
        dataclasses.replace(cfg, acquisition_mode=AcquisitionMode.EI, robust_cov=None),
        prob,
    )


def _op_label(tag) -> str:
    obj = tag_to_json(tag)
    kind = obj["type"]
    if kind == "grad":
        return f"grad:{obj['axis']}"
    if kind == "component":
        return f"component:{obj['id']}"
    if kind == "sum":
        return "sum:" + "+".join(_op_label(t) for t in tag.terms)
    return kind


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _surface_tables(config: EgoConfig, result, n_grid: int):
    prior = config.prior
    field = condition(prior, result.measurements, config.domain)
    op = mode_response_op(config)
    fmin = find_fmin(
        field, FminMethod.POSTERIOR_MEAN_MIN, response_op=op, seed=config.seed
    )
    d = config.domain.dim
    if d == 1:
        grid = np.linspace(config.domain.lower[0], config.domain.upper[0], n_grid)
        pts = [GeneralizedPoint([g], op) for g in grid]
        mean = field.mean_many(pts)
        sd = np.sqrt(np.clip([field.var(p) for p in pts], 0.0, None))
        acq = [
            gaussian_min_exact_1d(m, s * s, fmin.value) for m, s in zip(mean, sd)
        ]
        rows = [
            (f"{g:.6g}", f"{m:.8g}", f"{s:.8g}", f"{a:.8g}")
            for g, m, s, a in zip(grid, mean, sd, acq)
        ]
        return ("x", "posterior_mean", "posterior_sd", "acquisition"), rows, {
            "grid": grid,
            "mean": mean,
            "sd": sd,
            "acq": np.asarray(acq),
        }
    n_side = max(12, int(np.sqrt(n_grid)))
    g0 = np.linspace(config.domain.lower[0], config.domain.upper[0], n_side)
    g1 = np.linspace(config.domain.lower[1], config.domain.upper[1], n_side)
    X0, X1 = np.meshgrid(g0, g1)
    pts = [GeneralizedPoint([a, b], op) for a, b in zip(X0.ravel(), X1.ravel())]
    mean = field.mean_many(pts)
    sd = np.sqrt(np.clip([field.var(p) for p in pts], 0.0, None))
    acq = [gaussian_min_exact_1d(m, s * s, fmin.value) for m, s in zip(mean, sd)]
    rows = [
        (f"{a:.6g}", f"{b:.6g}", f"{m:.8g}", f"{s:.8g}", f"{q:.8g}")
        for a, b, m, s, q in zip(X0.ravel(), X1.ravel(), mean, sd, acq)
    ]
    return ("x0", "x1", "posterior_mean", "posterior_sd", "acquisition"), rows, {
        "X0": X0,
        "X1": X1,
        "mean": np.asarray(mean).reshape(X0.shape),
        "sd": np.asarray(sd).reshape(X0.shape),
    }


def run_demo(
    scenario: str,
    out_dir,
    seed: int = 0,
    mc_samples=None,
    figures: bool = True,
    n_grid: int = 201,
    quiet: bool = False,
) -> dict:
    """Run one scenario and write its log, plot data, and figures."""
    config, problem = scenario_config(scenario, seed, mc_samples)
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "runlog.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)

    with RunLogWriter(log_path) as writer:
        writer.record(
            {
                "type": "config",
                "scenario": scenario,
                "seed": seed,
                "problem": problem.name,
                "mode": config.acquisition_mode.value,
                "budget": config.budget,
            }
        )
        result = run_ego(BuiltinEvaluator(problem), config, writer=writer)
        writer.record(summary_record(result, config))

    # trajectory table
    traj_rows = []
    for i, rec in enumerate(result.iterations):
        acq = rec.get("acquisition", {})
        traj_rows.append(
            (
                i,
                rec["n_evals"],
                f"{rec['fmin']['value']:.8g}" if "fmin" in rec else "",
                "" if rec.get("best_measured") is None else f"{rec['best_measured']:.8g}",
                f"{acq['value']:.8g}" if acq else "",
                f"{acq['stderr']:.8g}" if acq else "",
            )
        )
    _write_csv(
        os.path.join(out_dir, "trajectory.csv"),
        ("iteration", "n_evals", "fmin", "best_measured", "rei_value", "rei_stderr"),
        traj_rows,
    )

    # measurement table
    meas_rows = []
    d = config.domain.dim
    for m in result.measurements:
        meas_rows.append(
            tuple(f"{v:.8g}" for v in m.point.location)
            + (_op_label(m.point.op), f"{m.value:.8g}")
        )
    _write_csv(
        os.path.join(out_dir, "measurements.csv"),
        tuple(f"x{i}" for i in range(d)) + ("operator", "value"),
        meas_rows,
    )

    header, rows, ctx = _surface_tables(config, result, n_grid)
    _write_csv(os.path.join(out_dir, "surface.csv"), header, rows)

    if figures:
        title = f"{scenario} demo (seed {seed})"
        if d == 1:
            vx = [
                m.point.location[0]
                for m in result.measurements
                if m.point.op == Identity() or scenario in ("noisy", "fidelity")
            ]
            vy = [
                m.value
                for m in result.measurements
                if m.point.op == Identity() or scenario in ("noisy", "fidelity")
            ]
            plots.plot_surface_1d(
                ctx["grid"],
                ctx["mean"],
                ctx["sd"],
                ctx["acq"],
                vx,
                vy,
                os.path.join(out_dir, "surface.png"),
                title=title,
            )
        else:
            meas = [m.point.location for m in result.measurements]
            plots.plot_surface_2d(
                ctx["X0"],
                ctx["X1"],
                ctx["mean"],
                ctx["sd"],
                meas,
                os.path.join(out_dir, "surface.png"),
                title=title,
                forbidden=DRILLING_REGION if scenario == "drilling" else None,
            )
        plots.plot_trajectory(
            [r["n_evals"] for r in result.iterations],
            [r.get("fmin", {}).get("value", np.nan) for r in result.iterations],
            [r.get("best_measured") for r in result.iterations],
            os.path.join(out_dir, "trajectory.png"),
            title=title,
        )

    summary = {
        "scenario": scenario,
        "seed": seed,
        "n_evals": result.n_evals,
        "status": result.status,
        "best": None
        if result.best is None
        else {
            "value": result.best.value,
            "location": [float(v) for v in result.best.location],
        },
        "out_dir": str(out_dir),
    }
    if not quiet:
        print(json.dumps(summary))
    return summary
