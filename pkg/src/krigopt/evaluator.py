"""Objective evaluators and the external-process wire protocol.

Requests and responses are line-delimited JSON records over the child's
standard streams:

    request   {"id": 7, "location": [0.25, 0.5], "operators": ["value", "grad:0"]}
    response  {"id": 7, "values": [1.2, -0.3], "cost": 1.0}

Responses may arrive out of order and are matched by id.  An evaluator only
ever sees "value", "grad:<axis>" and "component:<id>" descriptors: smoothed
and curvature responses act on the surrogate, never on the simulator, and a
summed observation is simply what the measurement device reports, so it
goes over the wire as "value".
"""

from __future__ import annotations

import json
import queue
import subprocess
import threading
from dataclasses import dataclass

import numpy as np

from .errors import EvaluatorFailure
from .kernel import Component, Identity, OperatorSum, PartialDerivative

__all__ = [
    "EvaluatorRequest",
    "EvaluatorResponse",
    "wire_operator",
    "BuiltinEvaluator",
    "ExternalEvaluator",
]


@dataclass(frozen=True)
class EvaluatorRequest:
    id: int
    location: np.ndarray
    operators: tuple  # wire descriptor strings

    def __post_init__(self):
        object.__setattr__(
            self, "location", np.atleast_1d(np.asarray(self.location, dtype=float))
        )
        object.__setattr__(self, "operators", tuple(self.operators))

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id,
                "location": [float(v) for v in self.location],
                "operators": list(self.operators),
            }
        )


@dataclass(frozen=True)
class EvaluatorResponse:
    id: int
    values: tuple
    cost: float | None = None
    error: str | None = None

    @classmethod
    def from_json(cls, line: str) -> "EvaluatorResponse":
        obj = json.loads(line)
        return cls(
            id=int(obj["id"]),
            values=tuple(float(v) for v in obj.get("values", [])),
            cost=None if obj.get("cost") is None else float(obj["cost"]),
            error=obj.get("error"),
        )


def wire_operator(tag) -> str:
    """Wire descriptor for a measurable operator tag."""
    if isinstance(tag, Identity):
        return "value"
    if isinstance(tag, PartialDerivative):
        return f"grad:{tag.axis}"
    if isinstance(tag, Component):
        return f"component:{tag.id}"
    if isinstance(tag, OperatorSum):
        return "value"  # the device measures the composite observable
    raise EvaluatorFailure(
        f"operator {tag!r} is model-side only and cannot be measured"
    )


# ---------------------------------------------------------------------------
# builtin problems evaluated in-process
# ---------------------------------------------------------------------------


class BuiltinEvaluator:
    """Evaluate a synthetic problem directly, honoring the wire descriptors."""

    def __init__(self, problem):
        self.problem = problem

    def _one(self, req: EvaluatorRequest) -> EvaluatorResponse:
        x = req.location
        vals = []
        cost = None
        for op in req.operators:
            if op == "value":
                vals.append(self.problem.value(x))
            elif op.startswith("grad:"):
                vals.append(float(self.problem.gradient(x)[int(op.split(":", 1)[1])]))
            elif op.startswith("component:"):
                cid = op.split(":", 1)[1]
                vals.append(self.problem.component(cid, x))
                cost = self.problem.cost_of(cid)
            else:
                raise EvaluatorFailure(f"unsupported wire operator {op!r}", payload=op)
        return EvaluatorResponse(id=req.id, values=tuple(vals), cost=cost)

    def evaluate(self, requests) -> list:
        return [self._one(r) for r in requests]

    def close(self):
        pass


# ---------------------------------------------------------------------------
# external subprocess evaluator
# ---------------------------------------------------------------------------


class _LineReader(threading.Thread):
    """Background reader pushing child stdout lines onto a queue."""

    def __init__(self, stream):
        super().__init__(daemon=True)
        self.stream = stream
        self.lines: queue.Queue = queue.Queue()

    def run(self):
        try:
            for line in self.stream:
                self.lines.put(line)
        except ValueError:
            pass  # stream closed
        self.lines.put(None)  # EOF marker


class ExternalEvaluator:
    """Objective served by a child process speaking the line protocol.

    The child is restarted on death or timeout and outstanding requests are
    resent; each request gets up to ``retries`` attempts before an
    EvaluatorFailure carries the offending payload to the caller.  The
    protocol is stateless per request, so restarts cannot change results.
    """

    def __init__(self, command, timeout: float = 30.0, retries: int = 3):
        if isinstance(command, str):
            command = [command]
        self.command = list(command)
        self.timeout = timeout
        self.retries = retries
        self._child = None
        self._reader = None

    def _ensure_child(self):
        if self._child is not None and self._child.poll() is None:
            return
        self._child = subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
        self._reader = _LineReader(self._child.stdout)
        self._reader.start()

    def _kill_child(self):
        if self._child is not None and self._child.poll() is None:
            self._child.kill()
            self._child.wait()
        self._child = None
        self._reader = None

    def close(self):
        if self._child is not None and self._child.poll() is None:
            try:
                self._child.stdin.close()
            except OSError:
                pass
            try:
                self._child.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self._child.kill()
        self._child = None

    def evaluate(self, requests) -> list:
        pending = {r.id: r for r in requests}
        results: dict[int, EvaluatorResponse] = {}
        attempts = {r.id: 0 for r in requests}

        while pending:
            batch = list(pending.values())
            for r in batch:
                attempts[r.id] += 1
                if attempts[r.id] > self.retries:
                    raise EvaluatorFailure(
                        f"request {r.id} failed after {self.retries} attempts",
                        payload=r.to_json(),
                    )
            try:
                self._ensure_child()
                for r in batch:
                    self._child.stdin.write(r.to_json() + "\n")
                self._child.stdin.flush()
            except (OSError, BrokenPipeError):
                self._kill_child()
                continue

            deadline_failed = False
            while pending:
                try:
                    line = self._reader.lines.get(timeout=self.timeout)
                except queue.Empty:
                    deadline_failed = True
                    break
                if line is None:  # child died
                    deadline_failed = True
                    break
                line = line.strip()
                if not line:
                    continue
                try:
                    resp = EvaluatorResponse.from_json(line)
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise EvaluatorFailure(
                        f"malformed evaluator response: {exc}", payload=line
                    ) from exc
                if resp.id not in pending:
                    continue  # stale duplicate from a retried attempt
                req = pending[resp.id]
                if resp.error is not None:
                    raise EvaluatorFailure(
                        f"evaluator reported error for request {resp.id}: {resp.error}",
                        payload=line,
                    )
                if len(resp.values) != len(req.operators):
                    raise EvaluatorFailure(
                        f"response arity {len(resp.values)} does not match "
                        f"{len(req.operators)} requested operators",
                        payload=line,
                    )
                results[resp.id] = resp
                del pending[resp.id]
            if deadline_failed:
                self._kill_child()

        return [results[r.id] for r in requests]
