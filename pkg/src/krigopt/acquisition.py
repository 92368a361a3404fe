"""Expected-improvement acquisition over separate response and measurement sets.

The criterion scores a hypothetical batch of measurements eta by how much
the re-estimated responses at zeta would improve the current best value:

    score(zeta, eta) = E min{ f_best, m_eta(zeta_1), ..., m_eta(zeta_k) }

where m_eta is the posterior mean recomputed after additionally observing
the (still random) values at eta.  Smaller is better.  Because m_eta(zeta)
is an affine function of the jointly Gaussian vector of eta-values, the
score reduces to the expected minimum of a Gaussian vector

    (m_eta(zeta_1..k)) ~ N( mean(zeta),  C_ze C_ee^{-1} C_ez )

with all covariances taken under the current posterior.  With a single
response point and a clamp this is the classical expected-improvement
integral, evaluated in closed form; otherwise a seeded antithetic Monte
Carlo estimate with elementary deterministic bounds:

    upper = min of the means (a deterministic coordinate can't be beaten
            by its own mean in expectation),
    lower = upper - sqrt(2 ln(2 p)) * max std (Gaussian maximal inequality).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import linalg

from .errors import NonPSD, SingularEta, SingularGram
from .field import FminContext, PosteriorField, _chol_with_jitter
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
    "AcquisitionVariant",
    "AcquisitionSpec",
    "GaussianMinProblem",
    "PsiEstimate",
    "reduce_rei",
    "gaussian_min_exact_1d",
    "gaussian_min_mc",
    "gaussian_min_bounds",
    "rei",
    "build_batch_spec",
    "build_gradient_spec",
    "build_fidelity_specs",
    "build_noisy_spec",
    "build_robust_spec",
]


class AcquisitionVariant(Enum):
    REI = "rei"        # clamped by the current best value
    REI_M = "rei_m"    # bare expected minimum of the responses


@dataclass(frozen=True)
class AcquisitionSpec:
    """Response points, hypothetical measurement points, and the clamp."""

    zeta: tuple
    eta: tuple
    variant: AcquisitionVariant = AcquisitionVariant.REI
    fmin: FminContext | None = None

    def __post_init__(self):
        object.__setattr__(self, "zeta", tuple(self.zeta))
        object.__setattr__(self, "eta", tuple(self.eta))
        if not self.zeta or not self.eta:
            raise ValueError("need at least one response and one measurement point")
        if self.variant == AcquisitionVariant.REI and self.fmin is None:
            raise ValueError("clamped variant requires an fmin context")

    def with_eta(self, eta) -> "AcquisitionSpec":
        return AcquisitionSpec(self.zeta, tuple(eta), self.variant, self.fmin)


@dataclass(frozen=True)
class GaussianMinProblem:
    """Expected minimum of N(mu, sigma), optionally clamped by a constant."""

    mu: np.ndarray
    sigma: np.ndarray
    clamp: float | None = None

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape != (mu.size, mu.size):
            raise ValueError(f"sigma shape {sigma.shape} does not match mu {mu.shape}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", 0.5 * (sigma + sigma.T))

    @property
    def p(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class PsiEstimate:
    """Estimate of an expected Gaussian minimum with error bars and bounds."""

    value: float
    stderr: float
    n_samples: int
    lower_bound: float
    upper_bound: float


# ---------------------------------------------------------------------------
# reduction of the acquisition to a Gaussian-min problem
# ---------------------------------------------------------------------------


def eta_variance_floor(field: PosteriorField) -> float:
    """Posterior variance below which a point counts as already known.

    Anchored to the base jitter scale, not the escalated factorization
    jitter: an ill-conditioned Gram must not inflate the floor past genuine
    acquisition signal.
    """
    from .field import JITTER_START

    return 10.0 * JITTER_START * field._scale + 1e-300


def _duplicates_data(field: PosteriorField, eta) -> bool:
    ell = _min_lengthscales(field.prior)
    for p in eta:
        for m in field.data:
            if m.point.op == p.op and np.max(
                np.abs(m.point.location - p.location) / ell
            ) < 0.99 * PERTURB_STEP:
                return True
    return False


def reduce_rei(field: PosteriorField, spec: AcquisitionSpec) -> GaussianMinProblem:
    """Reduce the acquisition to the expected minimum of a Gaussian vector.

    Raises SingularEta when a measurement point carries (numerically) no
    remaining posterior variance or sits on top of an existing same-operator
    measurement.
    """
    zeta, eta = list(spec.zeta), list(spec.eta)
    k = len(zeta)
    if _duplicates_data(field, eta):
        raise SingularEta(
            "a measurement point repeats an existing measurement; "
            "perturb or drop it"
        )
    joint = zeta + eta
    mu, C = field.mean_and_cov(joint)
    Cze = C[:k, k:]
    Cee = C[k:, k:]

    var_floor = eta_variance_floor(field)
    if np.any(np.diag(Cee) <= var_floor):
        raise SingularEta(
            "a measurement point carries no posterior variance "
            "(duplicates known data); perturb or drop it"
        )
    clamp = spec.fmin.value if spec.variant == AcquisitionVariant.REI else None
    if [p.key() for p in zeta] == [p.key() for p in eta]:
        # measuring exactly the responses: the re-estimated responses ARE
        # the field values, so no solve is needed (and none of its jitter)
        return GaussianMinProblem(mu=mu[:k], sigma=C[:k, :k], clamp=clamp)
    try:
        L, _ = _chol_with_jitter(Cee, field._scale)
    except SingularGram as exc:
        raise SingularEta(str(exc)) from exc

    W = linalg.cho_solve((L, True), Cze.T)
    sigma = Cze @ W
    return GaussianMinProblem(mu=mu[:k], sigma=sigma, clamp=clamp)


# ---------------------------------------------------------------------------
# expected Gaussian minimum: closed form, Monte Carlo, bounds
# ---------------------------------------------------------------------------


def _norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _norm_pdf(z: float) -> float:
    return math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def gaussian_min_exact_1d(mu: float, var: float, clamp: float) -> float:
    """E min{clamp, X} for X ~ N(mu, var), exactly.

    This is the expected-improvement integral rearranged around the clamp;
    at zero variance it degenerates to min(clamp, mu).
    """
    if var < 0:
        raise ValueError("variance must be non-negative")
    if var == 0.0:
        return min(clamp, mu)
    s = math.sqrt(var)
    z = (clamp - mu) / s
    return clamp - ((clamp - mu) * _norm_cdf(z) + s * _norm_pdf(z))


def gaussian_min_bounds(problem: GaussianMinProblem) -> tuple[float, float]:
    """Deterministic (lower, upper) bracket of the expected minimum."""
    mus = list(problem.mu)
    stds = list(np.sqrt(np.clip(np.diag(problem.sigma), 0.0, None)))
    if problem.clamp is not None:
        mus.append(problem.clamp)
        stds.append(0.0)
    upper = min(mus)
    p_eff = len(mus)
    lower = upper - math.sqrt(2.0 * math.log(2.0 * p_eff)) * max(stds)
    return lower, upper


def gaussian_min_mc(problem: GaussianMinProblem, n: int, seed) -> PsiEstimate:
    """Antithetic Monte Carlo estimate of the expected (clamped) minimum.

    Deterministic for a fixed seed.  A zero covariance short-circuits to
    the exact minimum of the means.
    """
    if n < 2:
        raise ValueError("need n >= 2 samples")
    lower, upper = gaussian_min_bounds(problem)
    mus = problem.mu
    if np.abs(problem.sigma).max() == 0.0:
        value = float(mus.min()) if problem.clamp is None else min(problem.clamp, float(mus.min()))
        return PsiEstimate(value, 0.0, n, lower, upper)

    scale = max(float(np.trace(problem.sigma)) / problem.p, 1e-300)
    try:
        L, _ = _chol_with_jitter(problem.sigma, scale)
    except SingularGram as exc:
        raise NonPSD(f"sigma not repairable by jitter: {exc}") from exc

    m = max(2, (n + 1) // 2)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((m, problem.p))
    dev = z @ L.T
    plus = mus[None, :] + dev
    minus = mus[None, :] - dev
    if problem.clamp is not None:
        y_plus = np.minimum(problem.clamp, plus.min(axis=1))
        y_minus = np.minimum(problem.clamp, minus.min(axis=1))
    else:
        y_plus = plus.min(axis=1)
        y_minus = minus.min(axis=1)
    pair_means = 0.5 * (y_plus + y_minus)
    value = float(pair_means.mean())
    stderr = float(pair_means.std(ddof=1) / math.sqrt(m))
    return PsiEstimate(value, stderr, 2 * m, lower, upper)


# ---------------------------------------------------------------------------
# the acquisition itself
# ---------------------------------------------------------------------------

PERTURB_STEP = 1e-6
PERTURB_ATTEMPTS = 3


def _min_lengthscales(prior) -> np.ndarray:
    if isinstance(prior, KernelSpec):
        return prior.lengthscales
    ells = np.stack([s.lengthscales for _, s in prior.components])
    return ells.min(axis=0)


def _perturb_eta(field: PosteriorField, eta, attempt: int):
    """Shift measurement points off known data, cycling axes deterministically
    and escalating geometrically until the posterior variance floor clears."""
    ell = _min_lengthscales(field.prior)
    d = ell.shape[0]
    axis = attempt % d
    step = PERTURB_STEP * ell[axis] * 10.0 ** (attempt // d)
    out = []
    for p in eta:
        loc = p.location.copy()
        loc[axis] += step
        if field.domain is not None and not field.domain.contains(loc):
            loc[axis] -= 2.0 * step
            loc = field.domain.clip(loc)
        out.append(GeneralizedPoint(loc, p.op))
    return out


def rei(field: PosteriorField, spec: AcquisitionSpec, n_samples: int = 4096, seed=0) -> PsiEstimate:
    """Score an acquisition spec; smaller is a better expected outcome.

    Single-response clamped specs go through the exact closed form, so the
    one-point criterion carries no Monte Carlo noise.  Measurement sets
    that duplicate known data are first nudged off by a deterministic
    perturbation; coordinates that stay informationless are then dropped,
    since conditioning on an already-known value changes nothing.  With no
    informative measurement left the responses keep their posterior means
    and the score degenerates to min(clamp, means).
    """
    eta = list(spec.eta)
    problem = None
    for attempt in range(PERTURB_ATTEMPTS + 1):
        try:
            problem = reduce_rei(field, spec.with_eta(eta))
            break
        except SingularEta:
            if attempt == PERTURB_ATTEMPTS:
                break
            if attempt == 0:
                warnings.warn(
                    "measurement set duplicates known data; perturbing",
                    stacklevel=2,
                )
            eta = _perturb_eta(field, eta, attempt)
    if problem is None:
        floor = eta_variance_floor(field)
        keep = [p for p in eta if field.var(p) > floor]
        if keep:
            try:
                problem = reduce_rei(field, spec.with_eta(keep))
            except SingularEta:
                keep = []
        if not keep:
            mu = field.mean_many(list(spec.zeta))
            clamp = (
                spec.fmin.value
                if spec.variant == AcquisitionVariant.REI
                else None
            )
            problem = GaussianMinProblem(mu, np.zeros((len(mu), len(mu))), clamp)

    lower, upper = gaussian_min_bounds(problem)
    if problem.p == 1:
        if spec.variant == AcquisitionVariant.REI:
            value = gaussian_min_exact_1d(
                float(problem.mu[0]), float(problem.sigma[0, 0]), problem.clamp
            )
        else:
            value = float(problem.mu[0])
        return PsiEstimate(value, 0.0, 0, lower, upper)
    return gaussian_min_mc(problem, n_samples, seed)


# ---------------------------------------------------------------------------
# builders for the application patterns
# ---------------------------------------------------------------------------


def build_batch_spec(points, fmin: FminContext) -> AcquisitionSpec:
    """Batch acquisition: responses and measurements are the same value points,
    scored jointly so correlated candidates don't both get measured."""
    pts = [GeneralizedPoint(x, Identity()) for x in points]
    if not pts:
        raise ValueError("batch requires at least one point")
    return AcquisitionSpec(zeta=pts, eta=pts, variant=AcquisitionVariant.REI, fmin=fmin)


def build_gradient_spec(x, zeta_locations, fmin: FminContext) -> AcquisitionSpec:
    """Value-plus-gradient acquisition: one evaluation yields the value and
    every partial derivative at x; responses are d+1 free value points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.shape[0]
    zl = [np.atleast_1d(np.asarray(z, dtype=float)) for z in zeta_locations]
    if len(zl) != d + 1:
        raise ValueError(f"need d+1 = {d + 1} response points, got {len(zl)}")
    eta = [GeneralizedPoint(x, Identity())]
    eta += [GeneralizedPoint(x, PartialDerivative(a)) for a in range(d)]
    zeta = [GeneralizedPoint(z, Identity()) for z in zl]
    return AcquisitionSpec(zeta=zeta, eta=eta, variant=AcquisitionVariant.REI, fmin=fmin)


def build_fidelity_specs(
    x,
    zeta_locations,
    fmin: FminContext,
    objective: str = "Z",
    proxy: str = "W",
) -> tuple[AcquisitionSpec, AcquisitionSpec]:
    """High- and low-fidelity acquisition pair sharing objective responses.

    The two specs differ only in which component the measurement observes;
    callers pick between them by improvement-to-cost ratio.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    zeta = [
        GeneralizedPoint(np.atleast_1d(np.asarray(z, dtype=float)), Component(objective))
        for z in zeta_locations
    ]
    if not zeta:
        raise ValueError("need at least one response point")
    hi = AcquisitionSpec(
        zeta=zeta,
        eta=[GeneralizedPoint(x, Component(objective))],
        variant=AcquisitionVariant.REI,
        fmin=fmin,
    )
    lo = AcquisitionSpec(
        zeta=zeta,
        eta=[GeneralizedPoint(x, Component(proxy))],
        variant=AcquisitionVariant.REI,
        fmin=fmin,
    )
    return hi, lo


def build_noisy_spec(
    x,
    fmin: FminContext,
    objective: str = "Z",
    noise: str = "eps",
) -> AcquisitionSpec:
    """Optimize a latent objective observed only through a correlated error:
    the response is the clean component, the measurement is their sum."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    zeta = [GeneralizedPoint(x, Component(objective))]
    eta = [GeneralizedPoint(x, OperatorSum([Component(objective), Component(noise)]))]
    return AcquisitionSpec(zeta=zeta, eta=eta, variant=AcquisitionVariant.REI, fmin=fmin)


class RobustMode(Enum):
    CONVOLUTION = "convolution"
    CURVATURE = "curvature"


def build_robust_spec(
    zeta_location,
    eta_location,
    robust_cov,
    mode: RobustMode,
    fmin: FminContext,
) -> AcquisitionSpec:
    """Robust acquisition: measure plain values, respond with the objective
    averaged under a manufacturing perturbation (or its curvature surrogate)."""
    if mode == RobustMode.CONVOLUTION:
        op = Convolution(robust_cov)
    elif mode == RobustMode.CURVATURE:
        op = CurvaturePenalty(robust_cov)
    else:
        raise ValueError(f"unknown robust mode {mode!r}")
    zeta = [GeneralizedPoint(np.atleast_1d(np.asarray(zeta_location, float)), op)]
    eta = [GeneralizedPoint(np.atleast_1d(np.asarray(eta_location, float)), Identity())]
    return AcquisitionSpec(zeta=zeta, eta=eta, variant=AcquisitionVariant.REI, fmin=fmin)
