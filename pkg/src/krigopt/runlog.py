"""Append-only run log: one JSON record per line, flushed as written.

Records carry everything needed to replay a run: the config snapshot, each
iteration's proposals, measurements and diagnostics, and a final summary.
Wall-clock timing lives in the dedicated ``wall_ms``/``ts`` fields so that
log comparison can ignore it; everything else is a deterministic function
of (config, seed, evaluator transcript).
"""

from __future__ import annotations

import json
import time

import numpy as np

from .field import Measurement
from .kernel import (
    Component,
    Convolution,
    CurvaturePenalty,
    GeneralizedPoint,
    Identity,
    KernelSpec,
    OperatorSum,
    PartialDerivative,
)

__all__ = [
    "tag_to_json",
    "tag_from_json",
    "measurement_to_json",
    "measurement_from_json",
    "iteration_record",
    "summary_record",
    "RunLogWriter",
    "read_log",
    "strip_timing",
]

TIMING_FIELDS = ("wall_ms", "ts")


def _native(obj):
    """Recursively coerce numpy scalars/arrays to plain Python types."""
    if isinstance(obj, dict):
        return {k: _native(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_native(v) for v in obj]
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def tag_to_json(tag):
    if isinstance(tag, Identity):
        return {"type": "value"}
    if isinstance(tag, PartialDerivative):
        return {"type": "grad", "axis": tag.axis}
    if isinstance(tag, Convolution):
        return {"type": "conv", "cov": tag.cov.tolist()}
    if isinstance(tag, CurvaturePenalty):
        return {"type": "curv", "cov": tag.cov.tolist()}
    if isinstance(tag, Component):
        return {"type": "component", "id": tag.id}
    if isinstance(tag, OperatorSum):
        return {"type": "sum", "terms": [tag_to_json(t) for t in tag.terms]}
    raise ValueError(f"unserializable operator tag {tag!r}")


def tag_from_json(obj):
    kind = obj["type"]
    if kind == "value":
        return Identity()
    if kind == "grad":
        return PartialDerivative(int(obj["axis"]))
    if kind == "conv":
        return Convolution(obj["cov"])
    if kind == "curv":
        return CurvaturePenalty(obj["cov"])
    if kind == "component":
        return Component(obj["id"])
    if kind == "sum":
        return OperatorSum([tag_from_json(t) for t in obj["terms"]])
    raise ValueError(f"unknown operator record {obj!r}")


def measurement_to_json(m: Measurement) -> dict:
    return {
        "location": [float(v) for v in m.point.location],
        "operator": tag_to_json(m.point.op),
        "value": float(m.value),
    }


def measurement_from_json(obj) -> Measurement:
    return Measurement(
        GeneralizedPoint(obj["location"], tag_from_json(obj["operator"])),
        float(obj["value"]),
    )


def _prior_to_json(prior):
    if isinstance(prior, KernelSpec):
        return {
            "variance": prior.variance,
            "lengthscales": prior.lengthscales.tolist(),
            "mean": prior.mean_const,
        }
    return {
        "components": {
            cid: {
                "variance": s.variance,
                "lengthscales": s.lengthscales.tolist(),
                "mean": s.mean_const,
            }
            for cid, s in prior.components
        }
    }


def best_measured(data, response_op):
    vals = [m.value for m in data if m.point.op == response_op]
    return min(vals) if vals else None


def iteration_record(step, new_measurements, n_evals, data, config, wall_ms) -> dict:
    """Build the log record for one outer-loop step (design batch or iteration)."""
    from .optimizer import mode_response_op  # runtime import avoids a cycle

    rec = {
        "type": step["kind"],
        "n_evals": n_evals,
        "measurements": [measurement_to_json(m) for m in new_measurements],
        "best_measured": best_measured(data, mode_response_op(config)),
        "hyperparameters": _prior_to_json(step["prior"]),
    }
    if step["kind"] == "iteration":
        fmin = step["fmin"]
        est = step["estimate"]
        rec["fmin"] = {
            "value": fmin.value,
            "location": [float(v) for v in fmin.location],
            "method": fmin.method.value,
        }
        rec["acquisition"] = {
            "mode": config.acquisition_mode.value,
            "value": est.value,
            "stderr": est.stderr,
            "n_samples": est.n_samples,
            "lower_bound": est.lower_bound,
            "upper_bound": est.upper_bound,
        }
        rec["proposals"] = [
            {
                "location": [float(v) for v in loc],
                "operators": [tag_to_json(t) for t in ops],
            }
            for loc, ops in step["proposals"]
        ]
    rec["wall_ms"] = wall_ms
    return _native(rec)


def summary_record(result, config) -> dict:
    rec = {
        "type": "summary",
        "status": result.status,
        "n_evals": result.n_evals,
        "n_measurements": len(result.measurements),
    }
    if result.best is not None:
        rec["best"] = {
            "value": result.best.value,
            "location": [float(v) for v in result.best.location],
            "method": result.best.method.value,
        }
    rec["ts"] = time.time()
    return _native(rec)


class RunLogWriter:
    """Crash-safe line writer: every record is serialized and flushed at once."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def record(self, rec: dict):
        self._fh.write(json.dumps(rec, allow_nan=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def strip_timing(records):
    """Records with the timing-only fields removed, for comparisons."""

    def strip(obj):
        if isinstance(obj, dict):
            return {k: strip(v) for k, v in obj.items() if k not in TIMING_FIELDS}
        if isinstance(obj, list):
            return [strip(v) for v in obj]
        return obj

    return [strip(r) for r in records]


def measurements_from_log(records) -> list:
    """Reassemble the measurement sequence from design/iteration records."""
    out = []
    for rec in records:
        if rec.get("type") in ("design", "iteration"):
            out.extend(measurement_from_json(m) for m in rec.get("measurements", []))
    return out
