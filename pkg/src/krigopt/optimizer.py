"""Surrogate-driven global optimization loop and its inner acquisition search.

The outer loop repeats: condition the Gaussian field on all measurements,
optionally refit hyperparameters, locate the current best response, minimize
the acquisition over the mode's free variables, evaluate the objective at
the chosen measurement points, append, until the evaluation budget is
exhausted.

The inner minimizer is a multistart coordinate pattern search over the
joint free variables (response and measurement locations), optionally
preceded by a best-first branch-and-bound phase that prunes boxes whose
regional lower bound cannot beat the incumbent.  The regional bound
combines interval arithmetic on the posterior-mean kernel sums with the
prior standard deviation in the Gaussian maximal inequality, so pruning is
sound for every measurement-set choice inside the box.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field as dfield
from enum import Enum

import numpy as np

from . import acquisition as acq
from . import kernel as kern
from .acquisition import AcquisitionSpec, AcquisitionVariant, rei
from .errors import SingularEta
from .field import (
    FminContext,
    FminMethod,
    Measurement,
    PosteriorField,
    condition,
    find_fmin,
    fit_hyperparameters,
)
from .kernel import (
    Component,
    Convolution,
    CurvaturePenalty,
    Domain,
    GeneralizedPoint,
    Identity,
    KernelSpec,
    OperatorSum,
    PartialDerivative,
)

__all__ = [
    "AcquisitionMode",
    "InnerOptConfig",
    "EgoConfig",
    "Box",
    "RunResult",
    "latin_hypercube",
    "default_design_size",
    "inner_minimize",
    "regional_lower_bound",
    "run_ego",
]

DUPLICATE_GUARD = 1e-6  # minimum lengthscale-relative spacing of repeats
GREEDY_BATCH_THRESHOLD = 20  # joint batch variables beyond this go greedy


class AcquisitionMode(Enum):
    EI = "ei"
    BATCH = "batch"
    GRADIENT = "gradient"
    NOISY = "noisy"
    FIDELITY = "fidelity"
    ROBUST = "robust"


@dataclass(frozen=True)
class InnerOptConfig:
    multistarts: int = 4
    max_iters: int = 40
    bb_enabled: bool = False
    bb_max_boxes: int = 200
    tolerance: float = 1e-3

    def __post_init__(self):
        if self.multistarts < 1:
            raise ValueError("need at least one multistart")


@dataclass(frozen=True)
class Box:
    """Hyperrectangle in the joint free-variable space, one box per free point."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def widths(self):
        return self.upper - self.lower

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True)
class EgoConfig:
    domain: Domain
    prior: object  # KernelSpec or ComponentSpec
    budget: int
    acquisition_mode: AcquisitionMode = AcquisitionMode.EI
    batch_size: int = 1
    mc_samples: int = 2048
    seed: int = 0
    refit_hyperparameters: bool = False
    fit_bounds: dict | None = None
    fmin_method: FminMethod = FminMethod.POSTERIOR_MEAN_MIN
    initial_design: int | None = None
    inner: InnerOptConfig = dfield(default_factory=InnerOptConfig)
    # mode parameters
    robust_cov: object = None
    robust_mode: acq.RobustMode = acq.RobustMode.CONVOLUTION
    fidelity_cost_hi: float = 1.0
    fidelity_cost_lo: float = 0.2
    objective_component: str = "Z"
    proxy_component: str = "W"
    proxy_observable: str = "sum"  # "sum": proxy reads objective + deviation
    noise_component: str = "eps"
    n_response_points: int = 1
    response_region: Domain | None = None
    measurement_region: Domain | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.mc_samples < 100:
            raise ValueError("need at least 100 Monte Carlo samples")
        if self.budget < default_design_size(self):
            raise ValueError(
                f"budget {self.budget} below initial design size "
                f"{default_design_size(self)}"
            )


def default_design_size(config: EgoConfig) -> int:
    """Initial space-filling design size in evaluator calls.

    Modes whose every evaluation also yields all partial derivatives carry
    d+1 measurements per call, so their design needs proportionally fewer
    calls for the same information content.
    """
    if config.initial_design is not None:
        return config.initial_design
    d = config.domain.dim
    base = max(2 * d + 2, 6)
    if config.acquisition_mode == AcquisitionMode.GRADIENT:
        return max(2, math.ceil(base / (d + 1)))
    return base


def latin_hypercube(domain: Domain, n: int, rng) -> np.ndarray:
    """Seeded Latin hypercube sample: one point per axis stratum."""
    d = domain.dim
    u = np.empty((n, d))
    for a in range(d):
        u[:, a] = (rng.permutation(n) + rng.random(n)) / n
    return domain.lower + u * domain.widths


def _rng(seed, *keys):
    return np.random.default_rng([int(seed) & 0x7FFFFFFF] + [int(k) for k in keys])


# role codes for per-phase random streams
_ROLE_FIT, _ROLE_FMIN, _ROLE_INNER, _ROLE_MC, _ROLE_GUARD = 1, 2, 3, 4, 5


# ---------------------------------------------------------------------------
# mode layouts: free variables -> acquisition spec
# ---------------------------------------------------------------------------


@dataclass
class FreePoint:
    box: Box
    project: object = None  # optional callable enforcing a region constraint


@dataclass
class InnerLayout:
    """Joint search space of one acquisition optimization problem."""

    points: list  # of FreePoint
    build: object  # callable(locs, fmin) -> AcquisitionSpec
    eta_indices: list  # free points whose locations become measurements
    zeta_from: list  # (free index, response op) per response point
    label: str = ""

    @property
    def dim(self) -> int:
        return sum(p.box.lower.size for p in self.points)

    def split(self, theta: np.ndarray):
        locs, ofs = [], 0
        for p in self.points:
            d = p.box.lower.size
            locs.append(theta[ofs : ofs + d])
            ofs += d
        return locs

    def clip(self, theta: np.ndarray) -> np.ndarray:
        out = []
        for p, loc in zip(self.points, self.split(theta)):
            loc = np.clip(loc, p.box.lower, p.box.upper)
            if p.project is not None:
                loc = p.project(loc)
            out.append(loc)
        return np.concatenate(out)

    def sample(self, n: int, rng) -> np.ndarray:
        cols = []
        for p in self.points:
            dom = Domain(p.box.lower, p.box.upper)
            pts = latin_hypercube(dom, n, rng)
            if p.project is not None:
                pts = np.stack([p.project(x) for x in pts])
            cols.append(pts)
        return np.hstack(cols)


def _project_outside(region: Domain, domain: Domain, margin_rel: float = 1e-6):
    """Projection pushing points out of a forbidden box, staying in the domain."""
    margin = margin_rel * domain.widths

    def project(loc):
        loc = np.asarray(loc, dtype=float)
        inside = np.all(loc >= region.lower) and np.all(loc <= region.upper)
        if not inside:
            return loc
        best, best_cost = loc, np.inf
        for axis in range(domain.dim):
            for target in (
                region.lower[axis] - margin[axis],
                region.upper[axis] + margin[axis],
            ):
                if domain.lower[axis] <= target <= domain.upper[axis]:
                    cost = abs(loc[axis] - target)
                    if cost < best_cost:
                        cand = loc.copy()
                        cand[axis] = target
                        best, best_cost = cand, cost
        return best

    return project


def _mode_layouts(config: EgoConfig) -> list[InnerLayout]:
    """Free-variable layouts for the configured acquisition mode.

    Most modes yield one layout; the two-fidelity mode yields one per
    fidelity so the loop can compare improvement-to-cost between them.
    """
    dom = config.domain
    mode = config.acquisition_mode
    full = Box(dom.lower, dom.upper)
    zeta_region = config.response_region
    zeta_box = Box(zeta_region.lower, zeta_region.upper) if zeta_region else full

    eta_project = None
    if zeta_region is not None:
        eta_project = _project_outside(zeta_region, dom)
    eta_box = full
    if config.measurement_region is not None:
        mr = config.measurement_region
        eta_box = Box(mr.lower, mr.upper)

    if mode in (AcquisitionMode.EI, AcquisitionMode.BATCH):
        k = config.batch_size if mode == AcquisitionMode.BATCH else 1
        if zeta_region is None:
            # responses are the measurements themselves
            pts = [FreePoint(full) for _ in range(k)]
            build = lambda locs, fmin: acq.build_batch_spec(locs, fmin)
            return [
                InnerLayout(
                    pts,
                    build,
                    eta_indices=list(range(k)),
                    zeta_from=[(i, Identity()) for i in range(k)],
                    label=mode.value,
                )
            ]
        # responses confined to one region, measurements kept out of it
        pts = [FreePoint(zeta_box) for _ in range(k)]
        pts += [FreePoint(eta_box, project=eta_project) for _ in range(k)]

        def build(locs, fmin, k=k):
            zeta = [GeneralizedPoint(x, Identity()) for x in locs[:k]]
            eta = [GeneralizedPoint(x, Identity()) for x in locs[k:]]
            return AcquisitionSpec(zeta, eta, AcquisitionVariant.REI, fmin)

        return [
            InnerLayout(
                pts,
                build,
                eta_indices=list(range(k, 2 * k)),
                zeta_from=[(i, Identity()) for i in range(k)],
                label=mode.value,
            )
        ]

    if mode == AcquisitionMode.GRADIENT:
        d = dom.dim
        pts = [FreePoint(Box(eta_box.lower, eta_box.upper), project=eta_project)]
        pts += [FreePoint(zeta_box) for _ in range(d + 1)]

        def build(locs, fmin):
            return acq.build_gradient_spec(locs[0], locs[1:], fmin)

        return [
            InnerLayout(
                pts,
                build,
                eta_indices=[0],
                zeta_from=[(i, Identity()) for i in range(1, d + 2)],
                label="gradient",
            )
        ]

    if mode == AcquisitionMode.NOISY:

        def build(locs, fmin):
            return acq.build_noisy_spec(
                locs[0], fmin, config.objective_component, config.noise_component
            )

        return [
            InnerLayout(
                [FreePoint(full)],
                build,
                eta_indices=[0],
                zeta_from=[(0, Component(config.objective_component))],
                label="noisy",
            )
        ]

    if mode == AcquisitionMode.FIDELITY:
        kr = config.n_response_points
        hi_tag = Component(config.objective_component)
        if config.proxy_observable == "sum":
            # proxy readings decompose as objective + deviation field, the
            # independence-respecting way to let cheap measurements inform Z
            lo_tag = OperatorSum(
                [Component(config.objective_component), Component(config.proxy_component)]
            )
        else:
            lo_tag = Component(config.proxy_component)
        layouts = []
        for which, tag in (("hi", hi_tag), ("lo", lo_tag)):
            pts = [FreePoint(zeta_box) for _ in range(kr)] + [FreePoint(full)]

            def build(locs, fmin, tag=tag, kr=kr):
                zeta = [
                    GeneralizedPoint(x, Component(config.objective_component))
                    for x in locs[:kr]
                ]
                eta = [GeneralizedPoint(locs[kr], tag)]
                return AcquisitionSpec(zeta, eta, AcquisitionVariant.REI, fmin)

            layouts.append(
                InnerLayout(
                    pts,
                    build,
                    eta_indices=[kr],
                    zeta_from=[
                        (i, Component(config.objective_component)) for i in range(kr)
                    ],
                    label=which,
                )
            )
        return layouts

    if mode == AcquisitionMode.ROBUST:
        if config.robust_cov is None:
            raise ValueError("robust mode requires a perturbation covariance")
        cov = np.atleast_2d(np.asarray(config.robust_cov, dtype=float))
        op = (
            Convolution(cov)
            if config.robust_mode == acq.RobustMode.CONVOLUTION
            else CurvaturePenalty(cov)
        )

        def build(locs, fmin):
            return acq.build_robust_spec(
                locs[0], locs[1], cov, config.robust_mode, fmin
            )

        return [
            InnerLayout(
                [FreePoint(zeta_box), FreePoint(eta_box, project=eta_project)],
                build,
                eta_indices=[1],
                zeta_from=[(0, op)],
                label="robust",
            )
        ]

    raise ValueError(f"unknown acquisition mode {mode!r}")


def mode_response_op(config: EgoConfig):
    """Operator whose surface defines the current best response."""
    mode = config.acquisition_mode
    if mode in (AcquisitionMode.NOISY, AcquisitionMode.FIDELITY):
        return Component(config.objective_component)
    if mode == AcquisitionMode.ROBUST:
        cov = np.atleast_2d(np.asarray(config.robust_cov, dtype=float))
        if config.robust_mode == acq.RobustMode.CONVOLUTION:
            return Convolution(cov)
        return CurvaturePenalty(cov)
    return Identity()


# ---------------------------------------------------------------------------
# regional lower bound for branch-and-bound
# ---------------------------------------------------------------------------


def _interval_mul(alo, ahi, blo, bhi):
    c = np.stack([alo * blo, alo * bhi, ahi * blo, ahi * bhi])
    return c.min(axis=0), c.max(axis=0)


def _mean_interval(field: PosteriorField, box: Box, response_op) -> tuple[float, float]:
    """Interval bound of the posterior mean of (x, response_op) over a box.

    Tight intervals cover plain-value responses against value and
    derivative data; anything else falls back to the Cauchy-Schwarz
    envelope, which is sound for every operator pair.
    """
    prior = field.prior
    mu0 = kern.mean_vector(prior, [GeneralizedPoint(box.center, response_op)])[0]
    lo = hi = mu0
    simple = isinstance(response_op, Identity) and isinstance(prior, KernelSpec)
    var_resp = None
    for m, a in zip(field.data, field.alpha):
        p = m.point
        tight = (
            simple
            and isinstance(p.op, (Identity, PartialDerivative))
        )
        if tight:
            ell2 = prior.lengthscales**2
            dlo = box.lower - p.location
            dhi = box.upper - p.location
            inside = (dlo <= 0) & (dhi >= 0)
            qmin_ax = np.where(inside, 0.0, np.minimum(dlo**2, dhi**2)) / ell2
            qmax_ax = np.maximum(dlo**2, dhi**2) / ell2
            g_lo = prior.variance * math.exp(-0.5 * float(qmax_ax.sum()))
            g_hi = prior.variance * math.exp(-0.5 * float(qmin_ax.sum()))
            if isinstance(p.op, Identity):
                klo, khi = g_lo, g_hi
            else:
                b = p.op.axis
                vlo, vhi = dlo[b] / ell2[b], dhi[b] / ell2[b]
                cands = [v * g for v in (vlo, vhi) for g in (g_lo, g_hi)]
                klo, khi = min(cands), max(cands)
        else:
            if var_resp is None:
                c = GeneralizedPoint(box.center, response_op)
                var_resp = kern.kernel_eval(prior, c, c)
            var_p = kern.kernel_eval(prior, p, p)
            bound = math.sqrt(max(var_resp, 0.0) * max(var_p, 0.0))
            klo, khi = -bound, bound
        if a >= 0:
            lo += a * klo
            hi += a * khi
        else:
            lo += a * khi
            hi += a * klo
    return lo, hi


def regional_lower_bound(field: PosteriorField, boxes, fmin: FminContext, response_ops=None) -> float:
    """Value no acquisition point inside the boxes can beat.

    ``boxes`` gives one hyperrectangle per response point.  The bound holds
    for every choice of measurement set: the response means are bracketed
    by interval arithmetic and the response variance under any hypothetical
    conditioning never exceeds its current posterior (hence prior) variance.
    Degenerate (zero-width) boxes use exact posterior moments.
    """
    boxes = [b if isinstance(b, Box) else Box(*b) for b in boxes]
    if response_ops is None:
        response_ops = [Identity()] * len(boxes)
    k = len(boxes)
    mus, sds = [fmin.value], [0.0]
    for box, op in zip(boxes, response_ops):
        if np.all(box.widths == 0.0):
            pt = GeneralizedPoint(box.center, op)
            mus.append(field.mean(pt))
            sds.append(math.sqrt(max(field.var(pt), 0.0)))
        else:
            lo, _ = _mean_interval(field, box, op)
            mus.append(lo)
            c = GeneralizedPoint(box.center, op)
            sds.append(math.sqrt(max(kern.kernel_eval(field.prior, c, c), 0.0)))
    return min(mus) - math.sqrt(2.0 * math.log(2.0 * (k + 1))) * max(sds)


# ---------------------------------------------------------------------------
# inner acquisition minimization
# ---------------------------------------------------------------------------


def _pattern_search(objective, layout: InnerLayout, theta0, cfg: InnerOptConfig):
    """Coordinate pattern search with step halving inside the joint box."""
    widths = np.concatenate([p.box.widths for p in layout.points])
    widths = np.where(widths > 0, widths, 1.0)
    theta = layout.clip(np.asarray(theta0, dtype=float))
    best = objective(theta)
    step = 0.25 * widths
    for _ in range(cfg.max_iters):
        improved = False
        cand_best, cand_val = None, best
        for i in range(theta.size):
            if step[i] == 0.0:
                continue
            for s in (+1.0, -1.0):
                cand = theta.copy()
                cand[i] += s * step[i]
                cand = layout.clip(cand)
                v = objective(cand)
                if v < cand_val:
                    cand_best, cand_val = cand, v
        if cand_best is not None:
            theta, best, improved = cand_best, cand_val, True
        if not improved:
            step *= 0.5
            if np.max(step / widths) < cfg.tolerance:
                break
    return theta, best


def _bb_phase(objective, layout, field, fmin, cfg: InnerOptConfig):
    """Best-first box pruning; returns the incumbent found at box centers."""
    root = Box(
        np.concatenate([p.box.lower for p in layout.points]),
        np.concatenate([p.box.upper for p in layout.points]),
    )

    def bound_of(joint: Box):
        lows = layout_boxes(joint)
        return regional_lower_bound(
            field,
            [lows[i] for i, _ in layout.zeta_from],
            fmin,
            [op for _, op in layout.zeta_from],
        )

    def layout_boxes(joint: Box):
        out, ofs = [], 0
        for p in layout.points:
            d = p.box.lower.size
            out.append(Box(joint.lower[ofs : ofs + d], joint.upper[ofs : ofs + d]))
            ofs += d
        return out

    theta0 = layout.clip(root.center)
    incumbent_theta, incumbent = theta0, objective(theta0)
    heap = [(bound_of(root), 0, root)]
    counter = itertools.count(1)
    processed = 0
    while heap and processed < cfg.bb_max_boxes:
        lb, _, box = heapq.heappop(heap)
        if lb >= incumbent - cfg.tolerance:
            break  # best-first: every remaining box is prunable too
        processed += 1
        axis = int(np.argmax(box.widths))
        mid = 0.5 * (box.lower[axis] + box.upper[axis])
        for lohi in range(2):
            lo, hi = box.lower.copy(), box.upper.copy()
            if lohi == 0:
                hi[axis] = mid
            else:
                lo[axis] = mid
            child = Box(lo, hi)
            theta = layout.clip(child.center)
            v = objective(theta)
            if v < incumbent:
                incumbent_theta, incumbent = theta, v
            clb = bound_of(child)
            if clb < incumbent - cfg.tolerance:
                heapq.heappush(heap, (clb, next(counter), child))
    return incumbent_theta, incumbent


def _greedy_batch(config: EgoConfig, field, fmin, seed, exploit_location):
    """Scalability fallback for large joint batches: grow the batch one
    point at a time, each step optimizing the joint score over only the
    newest point's coordinates."""
    import dataclasses

    cfg = config.inner
    mc_seed = int(_rng(seed, _ROLE_MC).integers(2**31 - 1))
    if exploit_location is None:
        exploit_location = fmin.location
    proto = _mode_layouts(dataclasses.replace(config, batch_size=1))[0]
    split_regions = len(proto.points) == 2
    chosen = [[] for _ in proto.points]

    spec_best = est_best = None
    for slot in range(config.batch_size):

        def build(locs, fm, frozen=tuple(tuple(c) for c in chosen)):
            groups = [list(f) + [l] for f, l in zip(frozen, locs)]
            if not split_regions:
                return acq.build_batch_spec(groups[0], fm)
            zeta = [GeneralizedPoint(x, Identity()) for x in groups[0]]
            eta = [GeneralizedPoint(x, Identity()) for x in groups[1]]
            return AcquisitionSpec(zeta, eta, AcquisitionVariant.REI, fm)

        layout = InnerLayout(
            list(proto.points),
            build,
            proto.eta_indices,
            proto.zeta_from,
            label="greedy",
        )
        cache: dict = {}

        def objective(theta, layout=layout, build=build, cache=cache):
            key = theta.tobytes()
            if key in cache:
                return cache[key]
            try:
                val = rei(
                    field, build(layout.split(theta), fmin), config.mc_samples, seed=mc_seed
                ).value
            except SingularEta:
                val = np.inf
            cache[key] = val
            return val

        rng = _rng(seed, _ROLE_INNER, 100 + slot)
        starts = list(layout.sample(cfg.multistarts, rng))
        exploit = layout.clip(
            np.concatenate([exploit_location for _ in layout.points])
        )
        best_theta, best_val = None, np.inf
        for s0 in [exploit] + starts:
            t, v = _pattern_search(objective, layout, s0, cfg)
            if best_theta is None or v < best_val:
                best_theta, best_val = t, v
        if objective(exploit) <= best_val + 1e-9 * (1.0 + abs(best_val)):
            best_theta = exploit
        locs = layout.split(best_theta)
        for c, loc in zip(chosen, locs):
            c.append(loc)
        spec_best = build(locs, fmin)
        est_best = rei(field, spec_best, config.mc_samples, seed=mc_seed)
    return spec_best, est_best


def inner_minimize(
    field: PosteriorField,
    mode: AcquisitionMode,
    config: EgoConfig,
    fmin: FminContext,
    seed=0,
    costs: dict | None = None,
    exploit_location=None,
):
    """Minimize the acquisition over the mode's joint free variables.

    Returns (spec, estimate) for the best candidate found.  When the search
    cannot beat the exploitation candidate (all free points at the current
    estimator minimum) by more than the Monte Carlo noise, the exploitation
    candidate wins: a flat acquisition surface means the model believes it
    has located the optimum, and measuring there realizes that belief.  The
    two-fidelity mode optimizes each fidelity separately and picks the
    better improvement-to-cost ratio, ties going to high fidelity.
    """
    import dataclasses

    if mode != config.acquisition_mode:
        config = dataclasses.replace(config, acquisition_mode=mode)
    if (
        mode == AcquisitionMode.BATCH
        and config.batch_size * config.domain.dim > GREEDY_BATCH_THRESHOLD
    ):
        return _greedy_batch(config, field, fmin, seed, exploit_location)
    cfg = config.inner
    layouts = _mode_layouts(config)
    mc_seed = _rng(seed, _ROLE_MC).integers(2**31 - 1)
    if exploit_location is None:
        exploit_location = fmin.location

    results = []
    for li, layout in enumerate(layouts):
        cache: dict = {}

        def objective(theta, layout=layout, cache=cache):
            key = theta.tobytes()
            if key in cache:
                return cache[key]
            locs = layout.split(theta)
            try:
                spec = layout.build(locs, fmin)
                val = rei(field, spec, config.mc_samples, seed=mc_seed).value
            except SingularEta:
                val = np.inf
            cache[key] = val
            return val

        def estimate_at(theta):
            spec = layout.build(layout.split(theta), fmin)
            return spec, rei(field, spec, config.mc_samples, seed=mc_seed)

        rng = _rng(seed, _ROLE_INNER, li)
        starts = list(layout.sample(cfg.multistarts, rng))
        exploit = layout.clip(
            np.concatenate([exploit_location for _ in layout.points])
        )
        best_theta, best_val = None, np.inf
        if cfg.bb_enabled:
            t, v = _bb_phase(objective, layout, field, fmin, cfg)
            best_theta, best_val = t, v
        for s0 in [exploit] + starts:
            t, v = _pattern_search(objective, layout, s0, cfg)
            if best_theta is None or v < best_val:
                best_theta, best_val = t, v
        spec, est = estimate_at(best_theta)
        spec_x, est_x = estimate_at(exploit)
        margin = 3.0 * (est.stderr + est_x.stderr) + 1e-9 * (1.0 + abs(est_x.value))
        if est.value > est_x.value - margin:
            spec, est, best_theta = spec_x, est_x, exploit
        results.append((layout.label, spec, est, best_theta))

    if len(results) == 1:
        _, spec, est, _ = results[0]
        return spec, est

    # fidelity selection by improvement-to-cost ratio
    costs = costs or {}
    cost_of = {
        "hi": costs.get("hi", config.fidelity_cost_hi),
        "lo": costs.get("lo", config.fidelity_cost_lo),
    }
    best = None
    for label, spec, est, _ in results:
        c = max(cost_of.get(label, 1.0), 1e-12)
        ratio = (est.value - fmin.value) / c
        # strict improvement required to beat an earlier (higher-fidelity) entry
        if best is None or ratio < best[0] - 1e-15:
            best = (ratio, spec, est)
    return best[1], best[2]


# ---------------------------------------------------------------------------
# the outer loop
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    measurements: list
    iterations: list
    n_evals: int
    best: FminContext | None
    status: str


def _scaled_distance(a, b, ell) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)) / ell))


def _guard_requests(proposals, data, config: EgoConfig, layout_ell, seed):
    """Keep proposed measurements a minimum lengthscale-relative distance
    away from same-operator measurements, existing or within the batch."""
    ell = layout_ell
    taken = {}
    for m in data:
        taken.setdefault(m.point.op.key(), []).append(m.point.location)
    out = []
    rng = _rng(seed, _ROLE_GUARD)
    for loc, ops in proposals:
        loc = np.asarray(loc, dtype=float)
        keys = [op.key() for op in ops]

        def clear(x):
            return all(
                _scaled_distance(x, prev, ell) > DUPLICATE_GUARD
                for k in keys
                for prev in taken.get(k, [])
            )

        attempt = 0
        step = 1e-3
        while not clear(loc) and attempt < 60:
            axis = attempt % config.domain.dim
            cand = loc.copy()
            cand[axis] += step * ell[axis] * (1 if (attempt // config.domain.dim) % 2 == 0 else -1)
            cand = config.domain.clip(cand)
            if config.response_region is not None:
                cand = _project_outside(config.response_region, config.domain)(cand)
            if clear(cand):
                loc = cand
                break
            attempt += 1
            if attempt % (4 * config.domain.dim) == 0:
                step *= 4.0
            if attempt >= 40:  # last resort: fresh seeded point
                cand = config.domain.lower + rng.random(config.domain.dim) * config.domain.widths
                if config.response_region is not None:
                    cand = _project_outside(config.response_region, config.domain)(cand)
                if clear(cand):
                    loc = cand
                    break
        for k in keys:
            taken.setdefault(k, []).append(loc)
        out.append((loc, ops))
    return out


def _design_ops(config: EgoConfig):
    """Operator tags measured for each initial-design evaluation."""
    mode = config.acquisition_mode
    d = config.domain.dim
    if mode == AcquisitionMode.GRADIENT:
        return [Identity()] + [PartialDerivative(a) for a in range(d)]
    if mode == AcquisitionMode.NOISY:
        return [
            OperatorSum(
                [Component(config.objective_component), Component(config.noise_component)]
            )
        ]
    if mode == AcquisitionMode.FIDELITY:
        return [Component(config.objective_component)]
    return [Identity()]


def _eta_requests(spec: AcquisitionSpec):
    """Group measurement points of a spec into per-location operator lists.

    Only distinct operators share a request (one evaluation yielding value
    plus gradients); a repeated operator at the same location stays a
    separate proposal so the duplicate guard can push the copies apart.
    """
    grouped = []
    for p in spec.eta:
        for loc, ops in grouped:
            if np.array_equal(loc, p.location) and p.op not in ops:
                ops.append(p.op)
                break
        else:
            grouped.append((p.location, [p.op]))
    return grouped


def _prior_lengthscales(prior) -> np.ndarray:
    if isinstance(prior, KernelSpec):
        return prior.lengthscales
    return np.stack([s.lengthscales for _, s in prior.components]).min(axis=0)


def wire_for_tag(config: EgoConfig, tag) -> str:
    """Wire descriptor for a measurement tag, honoring the fidelity wiring:
    a summed proxy observation is served by the proxy simulator."""
    from .evaluator import wire_operator

    if config.acquisition_mode == AcquisitionMode.FIDELITY and isinstance(
        tag, OperatorSum
    ):
        return f"component:{config.proxy_component}"
    return wire_operator(tag)


def propose(config: EgoConfig, data, costs: dict | None = None):
    """Next measurement set given the data so far; deterministic in (config, data).

    Returns a dict with the proposed (location, operator tags) pairs plus
    the acquisition diagnostics; during the initial design phase the
    proposals come straight from the seeded space-filling plan.
    """
    phase = len(data)
    n_design = default_design_size(config)
    design_ops = _design_ops(config)
    done_evals = _count_evals(data)

    if done_evals < n_design:
        plan = latin_hypercube(config.domain, n_design, _rng(config.seed, 0))
        if config.response_region is not None:
            proj = _project_outside(config.response_region, config.domain)
            plan = np.stack([proj(x) for x in plan])
        return {
            "kind": "design",
            "proposals": [(loc, list(design_ops)) for loc in plan[done_evals:]],
            "prior": config.prior,
        }

    prior = config.prior
    fit_info = None
    if config.refit_hyperparameters and isinstance(prior, KernelSpec) and phase >= 2:
        fit = fit_hyperparameters(
            prior,
            data,
            bounds=config.fit_bounds,
            n_starts=3,
            maxiter=30,
            seed=_rng(config.seed, phase, _ROLE_FIT).integers(2**31 - 1),
        )
        prior = fit.spec
        fit_info = fit
    field = condition(prior, data, config.domain)
    response_op = mode_response_op(config)
    pmm = find_fmin(
        field,
        FminMethod.POSTERIOR_MEAN_MIN,
        response_op=response_op,
        seed=_rng(config.seed, phase, _ROLE_FMIN).integers(2**31 - 1),
    )
    if config.fmin_method == FminMethod.MEASURED_MIN:
        fmin = find_fmin(field, FminMethod.MEASURED_MIN, response_op=response_op)
    else:
        fmin = pmm
    spec, est = inner_minimize(
        field,
        config.acquisition_mode,
        config,
        fmin,
        seed=_rng(config.seed, phase, _ROLE_INNER).integers(2**31 - 1),
        costs=costs,
        exploit_location=pmm.location,
    )
    proposals = _eta_requests(spec)
    proposals = _guard_requests(
        proposals,
        data,
        config,
        _prior_lengthscales(prior),
        seed=_rng(config.seed, phase, _ROLE_GUARD).integers(2**31 - 1),
    )
    return {
        "kind": "iteration",
        "proposals": proposals,
        "prior": prior,
        "fit": fit_info,
        "fmin": fmin,
        "spec": spec,
        "estimate": est,
    }


def _count_evals(data) -> int:
    """Evaluator calls consumed so far: distinct measured locations."""
    locs = []
    for m in data:
        if not any(np.array_equal(m.point.location, q) for q in locs):
            locs.append(m.point.location)
    return len(locs)


def run_ego(evaluator, config: EgoConfig, writer=None) -> RunResult:
    """Run the full optimization loop against an objective evaluator.

    Each iteration appends one record through ``writer`` (if given); the
    record layout is the run-log schema.  Terminates normally when the
    evaluation budget is exhausted.
    """
    from . import runlog  # record schema helpers; no cycle at import time
    from .evaluator import EvaluatorRequest

    data: list[Measurement] = []
    iterations = []
    n_evals = 0
    costs: dict = {}
    next_id = itertools.count(1)

    def emit(rec):
        iterations.append(rec)
        if writer is not None:
            writer.record(rec)

    while True:
        if n_evals >= config.budget:
            break
        step = propose(config, data, costs=costs)
        proposals = step["proposals"]
        if n_evals + len(proposals) > config.budget:
            break
        t0 = time.perf_counter()
        requests = [
            EvaluatorRequest(
                next(next_id), loc, [wire_for_tag(config, t) for t in ops]
            )
            for loc, ops in proposals
        ]
        responses = evaluator.evaluate(requests)
        by_id = {r.id: r for r in responses}
        new_measurements = []
        for req, (loc, ops) in zip(requests, proposals):
            resp = by_id[req.id]
            for op, val in zip(ops, resp.values):
                new_measurements.append(Measurement(GeneralizedPoint(loc, op), val))
            if resp.cost is not None and config.acquisition_mode == AcquisitionMode.FIDELITY:
                label = "hi" if ops[0] == Component(config.objective_component) else "lo"
                prev = costs.get(label)
                costs[label] = resp.cost if prev is None else 0.5 * (prev + resp.cost)
        data.extend(new_measurements)
        n_evals += len(proposals)
        wall_ms = (time.perf_counter() - t0) * 1000.0

        rec = runlog.iteration_record(
            step, new_measurements, n_evals, data, config, wall_ms
        )
        emit(rec)

    best = None
    if data:
        try:
            prior = config.prior
            if config.refit_hyperparameters and isinstance(prior, KernelSpec):
                prior = fit_hyperparameters(
                    prior,
                    data,
                    bounds=config.fit_bounds,
                    seed=_rng(config.seed, len(data), _ROLE_FIT).integers(2**31 - 1),
                ).spec
            field = condition(prior, data, config.domain)
            best = find_fmin(
                field,
                config.fmin_method,
                response_op=mode_response_op(config),
                seed=_rng(config.seed, len(data), _ROLE_FMIN).integers(2**31 - 1),
            )
        except Exception:
            best = None
    return RunResult(
        measurements=data,
        iterations=iterations,
        n_evals=n_evals,
        best=best,
        status="budget_exhausted",
    )
