"""Run configuration: strict JSON with unknown keys rejected.

The parsed raw dictionary is kept alongside the built objects so that
parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .acquisition import RobustMode
from .errors import ConfigError
from .evaluator import BuiltinEvaluator, ExternalEvaluator
from .field import FminMethod
from .kernel import ComponentSpec, Domain, KernelSpec
from .optimizer import AcquisitionMode, EgoConfig, InnerOptConfig
from .problems import get_problem

__all__ = ["RunSetup", "parse_config", "parse_config_text", "serialize_config"]

_SCHEMA = {
    "domain": {"lower", "upper"},
    "kernel": {"variance", "lengthscales", "mean", "fit"},
    "components": None,  # mapping of id -> kernel dict, validated separately
    "mode": None,
    "budget": None,
    "batch_size": None,
    "mc_samples": None,
    "seed": None,
    "fmin_method": None,
    "initial_design": None,
    "inner": {"multistarts", "max_iters", "bb_enabled", "bb_max_boxes", "tolerance"},
    "robust": {"cov", "mode"},
    "fidelity": {
        "objective",
        "proxy",
        "cost_hi",
        "cost_lo",
        "proxy_observable",
        "n_response_points",
    },
    "noisy": {"objective", "noise"},
    "response_region": {"lower", "upper"},
    "measurement_region": {"lower", "upper"},
    "evaluator": {"builtin", "command", "timeout", "retries"},
}
_KERNEL_KEYS = {"variance", "lengthscales", "mean"}
_FIT_KEYS = {"variance", "lengthscales", "mean", "initial"}


@dataclass
class RunSetup:
    """Everything a run needs: built objects plus the raw config snapshot."""

    ego: EgoConfig
    evaluator_factory: object  # callable() -> evaluator with .evaluate/.close
    raw: dict


def _unknown(path, keys, allowed):
    extra = set(keys) - set(allowed)
    if extra:
        where = ".".join(path) or "top level"
        raise ConfigError(
            f"unknown key(s) {sorted(extra)} at {where}; allowed: {sorted(allowed)}"
        )


def _require(obj, key, path):
    if key not in obj:
        where = ".".join(path) or "top level"
        raise ConfigError(f"missing required key {key!r} at {where}")
    return obj[key]


def _parse_domain(obj, path):
    _unknown(path, obj.keys(), {"lower", "upper"})
    try:
        return Domain(_require(obj, "lower", path), _require(obj, "upper", path))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad domain at {'.'.join(path)}: {exc}") from exc


def _parse_kernel_spec(obj, path, dim):
    _unknown(path, obj.keys(), _KERNEL_KEYS)
    ell = _require(obj, "lengthscales", path)
    if np.isscalar(ell):
        ell = [ell] * dim
    try:
        return KernelSpec(
            float(_require(obj, "variance", path)),
            ell,
            float(obj.get("mean", 0.0)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad kernel at {'.'.join(path)}: {exc}") from exc


def _pair(v, what):
    v = list(np.atleast_1d(v))
    if len(v) != 2 or v[0] > v[1]:
        raise ConfigError(f"{what} bounds must be a (low, high) pair, got {v}")
    return float(v[0]), float(v[1])


def _parse_fit_bounds(obj, path, dim):
    _unknown(path, obj.keys(), _FIT_KEYS)
    bounds = {}
    if "variance" in obj:
        bounds["variance"] = _pair(obj["variance"], "variance")
    if "lengthscales" in obj:
        ls = obj["lengthscales"]
        if ls and isinstance(ls[0], (list, tuple)):
            bounds["lengthscales"] = [_pair(b, "lengthscale") for b in ls]
        else:
            bounds["lengthscales"] = _pair(ls, "lengthscale")
    if "mean" in obj:
        bounds["mean"] = _pair(obj["mean"], "mean")
    return bounds


def parse_config_text(text: str) -> RunSetup:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed config: {exc.msg} at line {exc.lineno} column {exc.colno}"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _unknown([], raw.keys(), _SCHEMA.keys())

    domain = _parse_domain(_require(raw, "domain", []), ["domain"])
    d = domain.dim

    if "kernel" in raw and "components" in raw:
        raise ConfigError("give either 'kernel' or 'components', not both")

    refit = False
    fit_bounds = None
    if "components" in raw:
        comps = raw["components"]
        if not isinstance(comps, dict) or not comps:
            raise ConfigError("'components' must be a non-empty mapping")
        prior = ComponentSpec(
            {
                cid: _parse_kernel_spec(spec, ["components", cid], d)
                for cid, spec in comps.items()
            }
        )
    elif "kernel" in raw:
        kobj = raw["kernel"]
        _unknown(["kernel"], kobj.keys(), _SCHEMA["kernel"])
        if "fit" in kobj:
            refit = True
            fit_bounds = _parse_fit_bounds(kobj["fit"], ["kernel", "fit"], d)
            init = kobj["fit"].get("initial")
            if init is not None:
                prior = _parse_kernel_spec(init, ["kernel", "fit", "initial"], d)
            else:
                prior = KernelSpec(1.0, domain.widths / 5.0, 0.0)
        else:
            prior = _parse_kernel_spec(kobj, ["kernel"], d)
    else:
        raise ConfigError("config requires a 'kernel' or 'components' block")

    mode_name = str(_require(raw, "mode", []))
    try:
        mode = AcquisitionMode(mode_name)
    except ValueError:
        raise ConfigError(
            f"unknown mode {mode_name!r}; one of {[m.value for m in AcquisitionMode]}"
        ) from None

    inner = InnerOptConfig()
    if "inner" in raw:
        iobj = raw["inner"]
        _unknown(["inner"], iobj.keys(), _SCHEMA["inner"])
        inner = InnerOptConfig(
            multistarts=int(iobj.get("multistarts", 4)),
            max_iters=int(iobj.get("max_iters", 40)),
            bb_enabled=bool(iobj.get("bb_enabled", False)),
            bb_max_boxes=int(iobj.get("bb_max_boxes", 200)),
            tolerance=float(iobj.get("tolerance", 1e-3)),
        )

    fmin_method = FminMethod(raw.get("fmin_method", "posterior_mean_min"))
    if fmin_method == FminMethod.MEASURED_MIN and mode in (
        AcquisitionMode.NOISY,
        AcquisitionMode.ROBUST,
    ):
        raise ConfigError(
            f"mode {mode.value!r} responds on a surface that is never measured "
            "directly; use fmin_method 'posterior_mean_min'"
        )

    kwargs = dict(
        domain=domain,
        prior=prior,
        budget=int(_require(raw, "budget", [])),
        acquisition_mode=mode,
        batch_size=int(raw.get("batch_size", 1)),
        mc_samples=int(raw.get("mc_samples", 2048)),
        seed=int(raw.get("seed", 0)),
        refit_hyperparameters=refit,
        fit_bounds=fit_bounds,
        fmin_method=fmin_method,
        initial_design=raw.get("initial_design"),
        inner=inner,
    )
    if "robust" in raw:
        robj = raw["robust"]
        _unknown(["robust"], robj.keys(), _SCHEMA["robust"])
        kwargs["robust_cov"] = np.atleast_2d(np.asarray(_require(robj, "cov", ["robust"]), float))
        kwargs["robust_mode"] = RobustMode(robj.get("mode", "convolution"))
    if "fidelity" in raw:
        fobj = raw["fidelity"]
        _unknown(["fidelity"], fobj.keys(), _SCHEMA["fidelity"])
        kwargs["objective_component"] = str(fobj.get("objective", "Z"))
        kwargs["proxy_component"] = str(fobj.get("proxy", "W"))
        kwargs["fidelity_cost_hi"] = float(fobj.get("cost_hi", 1.0))
        kwargs["fidelity_cost_lo"] = float(fobj.get("cost_lo", 0.2))
        kwargs["proxy_observable"] = str(fobj.get("proxy_observable", "sum"))
        kwargs["n_response_points"] = int(fobj.get("n_response_points", 1))
    if "noisy" in raw:
        nobj = raw["noisy"]
        _unknown(["noisy"], nobj.keys(), _SCHEMA["noisy"])
        kwargs["objective_component"] = str(nobj.get("objective", "Z"))
        kwargs["noise_component"] = str(nobj.get("noise", "eps"))
    if "response_region" in raw:
        kwargs["response_region"] = _parse_domain(
            raw["response_region"], ["response_region"]
        )
    if "measurement_region" in raw:
        kwargs["measurement_region"] = _parse_domain(
            raw["measurement_region"], ["measurement_region"]
        )

    if mode in (AcquisitionMode.NOISY, AcquisitionMode.FIDELITY):
        if not isinstance(prior, ComponentSpec):
            raise ConfigError(
                f"mode {mode.value!r} needs a 'components' prior declaring its"
                " latent fields"
            )
        referenced = [kwargs.get("objective_component", "Z")]
        if mode == AcquisitionMode.NOISY:
            referenced.append(kwargs.get("noise_component", "eps"))
        else:
            referenced.append(kwargs.get("proxy_component", "W"))
        for cid in referenced:
            if cid not in prior.ids:
                raise ConfigError(
                    f"mode {mode.value!r} references component {cid!r}, "
                    f"but the prior declares {list(prior.ids)}"
                )

    try:
        ego = EgoConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    eobj = _require(raw, "evaluator", [])
    _unknown(["evaluator"], eobj.keys(), _SCHEMA["evaluator"])
    if ("builtin" in eobj) == ("command" in eobj):
        raise ConfigError("evaluator needs exactly one of 'builtin' or 'command'")
    if "builtin" in eobj:
        name = str(eobj["builtin"])
        try:
            get_problem(name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        factory = lambda: BuiltinEvaluator(get_problem(name))
    else:
        command = eobj["command"]
        if isinstance(command, str):
            command = [command]
        factory = lambda: ExternalEvaluator(
            command,
            timeout=float(eobj.get("timeout", 30.0)),
            retries=int(eobj.get("retries", 3)),
        )

    return RunSetup(ego=ego, evaluator_factory=factory, raw=raw)


def parse_config(path) -> RunSetup:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def serialize_config(setup: RunSetup) -> str:
    return json.dumps(setup.raw, indent=2, sort_keys=True)
