"""Conditioning a Gaussian prior on measurements at generalized points.

The posterior field carries the conditional mean and covariance

    mean(s)   = m(s) + K(s, X) G^{-1} (f - m(X))
    cov(s, t) = K(s, t) - K(s, X) G^{-1} K(X, t)

with G the Gram matrix over the measured generalized points, factorized
once by Cholesky with escalating jitter.  Derivative and convolution
observations enter through the same formulas; only the kernel algebra
changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import linalg, optimize

from . import kernel as kern
from .errors import NoValueMeasurements, SingularGram
from .kernel import Domain, GeneralizedPoint, Identity, KernelSpec

__all__ = [
    "Measurement",
    "PosteriorField",
    "FminContext",
    "FminMethod",
    "FitResult",
    "condition",
    "fit_hyperparameters",
    "find_fmin",
]

# adaptive jitter ladder, relative to the prior variance scale
JITTER_START = 1e-10
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class Measurement:
    """One observed value of a generalized point."""

    point: GeneralizedPoint
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"measurement value must be finite, got {self.value}")
        object.__setattr__(self, "value", float(self.value))


class FminMethod(Enum):
    MEASURED_MIN = "measured_min"
    POSTERIOR_MEAN_MIN = "posterior_mean_min"


@dataclass(frozen=True)
class FminContext:
    """Current best response used as the improvement clamp."""

    value: float
    location: np.ndarray
    method: FminMethod

    def __post_init__(self):
        object.__setattr__(
            self, "location", np.atleast_1d(np.asarray(self.location, dtype=float))
        )


def _chol_with_jitter(mat: np.ndarray, scale: float):
    """Lower Cholesky factor with escalating diagonal jitter.

    Returns (L, jitter); raises SingularGram once the ladder is exhausted.
    """
    jitter = JITTER_START * scale
    eye = np.eye(mat.shape[0])
    while jitter <= JITTER_MAX * scale * (1 + 1e-12):
        try:
            L = linalg.cholesky(mat + jitter * eye, lower=True)
            return L, jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise SingularGram(
        "Gram matrix singular after jitter escalation; "
        "check for duplicated or near-duplicated measurement points"
    )


class PosteriorField:
    """Immutable conditional Gaussian field over generalized points.

    Build with :func:`condition`; query through :meth:`mean`, :meth:`cov`
    and :meth:`sample_joint`.
    """

    def __init__(self, prior, data, domain: Domain | None = None):
        if not data:
            raise ValueError("condition requires at least one measurement")
        seen = set()
        for m in data:
            k = m.point.key()
            if k in seen:
                raise SingularGram(
                    f"duplicate measurement at {m.point.location} "
                    f"with operator {m.point.op!r}"
                )
            seen.add(k)
        if domain is not None:
            for m in data:
                domain.require(m.point.location, "measurement location")

        self.prior = prior
        self.data = tuple(data)
        self.domain = domain
        self._points = [m.point for m in data]
        self._values = np.array([m.value for m in data])
        self._scale = kern.prior_variance_scale(prior)
        self._table = kern.TermTable(prior, self._points)

        gram = kern.cov_from_tables(prior, self._table, self._table, symmetric=True)
        self.chol, self.jitter = _chol_with_jitter(gram, self._scale)
        self._gram = gram
        resid = self._values - kern.mean_vector(prior, self._points)
        self.alpha = linalg.cho_solve((self.chol, True), resid)

    # -- queries ----------------------------------------------------------

    def __len__(self):
        return len(self.data)

    def mean(self, s: GeneralizedPoint) -> float:
        return float(self.mean_many([s])[0])

    def mean_many(self, S) -> np.ndarray:
        """Posterior mean at a list of generalized points."""
        if self.domain is not None:
            for p in S:
                self.domain.require(p.location, "query location")
        ts = kern.TermTable(self.prior, S)
        kx = kern.cov_from_tables(self.prior, ts, self._table)
        return kern.mean_vector(self.prior, S) + kx @ self.alpha

    def cov(self, S) -> np.ndarray:
        """Posterior covariance matrix over a list of generalized points."""
        return self.mean_and_cov(S)[1]

    def mean_and_cov(self, S):
        """Posterior mean vector and covariance matrix in one table build."""
        if self.domain is not None:
            for p in S:
                self.domain.require(p.location, "query location")
        ts = kern.TermTable(self.prior, S)
        ksx = kern.cov_from_tables(self.prior, ts, self._table)
        mean = kern.mean_vector(self.prior, S) + ksx @ self.alpha
        kss = kern.cov_from_tables(self.prior, ts, ts, symmetric=True)
        w = linalg.cho_solve((self.chol, True), ksx.T)
        out = kss - ksx @ w
        return mean, 0.5 * (out + out.T)

    def var(self, s: GeneralizedPoint) -> float:
        return float(self.cov([s])[0, 0])

    def sample_joint(self, S, n: int, seed) -> np.ndarray:
        """Draw ``n`` joint samples at the points ``S``; rows are draws.

        Deterministic for a fixed seed.
        """
        if n < 1:
            raise ValueError("need n >= 1 samples")
        mu = self.mean_many(S)
        cov = self.cov(S)
        L, _ = _chol_with_jitter(cov, max(self._scale, float(np.trace(cov)) + 1e-300))
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, len(S)))
        return mu[None, :] + z @ L.T


def condition(prior, data, domain: Domain | None = None) -> PosteriorField:
    """Condition the prior on measurements, returning a posterior field."""
    return PosteriorField(prior, data, domain)


# ---------------------------------------------------------------------------
# hyperparameter fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    """Outcome of maximum-likelihood hyperparameter estimation."""

    spec: KernelSpec
    log_likelihood: float
    degenerate: bool
    n_starts: int


def _profiled_loglik(ell, table, values, mean_weights, bounds):
    """Concentrated Gaussian log likelihood at fixed lengthscales.

    The correlation matrix scales linearly in the variance and the mean
    enters through the value-term count per point, so the mean constant and
    variance profile out in closed form (then get clipped to their bounds).
    """
    n = len(values)
    base = KernelSpec(1.0, ell, 0.0)
    R = kern.cov_from_tables(base, table, table, symmetric=True)
    try:
        L, _ = _chol_with_jitter(R, 1.0)
    except SingularGram:
        return None
    m = mean_weights
    Rinv_f = linalg.cho_solve((L, True), values)
    Rinv_m = linalg.cho_solve((L, True), m)
    mRm = float(m @ Rinv_m)
    mu0 = float(m @ Rinv_f) / mRm if mRm > 1e-12 else 0.0
    mu0 = float(np.clip(mu0, bounds["mean"][0], bounds["mean"][1]))
    resid = values - mu0 * m
    quad = float(resid @ (Rinv_f - mu0 * Rinv_m))
    s2 = float(np.clip(quad / n, bounds["variance"][0], bounds["variance"][1]))
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    ll = -0.5 * (quad / s2 + n * np.log(s2) + logdet + n * np.log(2 * np.pi))
    return ll, mu0, s2


def log_marginal_likelihood(spec: KernelSpec, data) -> float:
    """Exact Gaussian log marginal likelihood of the data under the spec."""
    points = [m.point for m in data]
    values = np.array([m.value for m in data])
    G = kern.cov_matrix(spec, points)
    L, _ = _chol_with_jitter(G, spec.variance)
    resid = values - kern.mean_vector(spec, points)
    quad = float(resid @ linalg.cho_solve((L, True), resid))
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * (quad + logdet + len(data) * np.log(2 * np.pi))


def fit_hyperparameters(
    prior: KernelSpec,
    data,
    bounds: dict | None = None,
    n_starts: int = 6,
    seed=0,
    extra_starts=(),
    maxiter: int = 50,
) -> FitResult:
    """Maximize the log marginal likelihood over variance, lengthscales, mean.

    Multistart local search over log-lengthscales with the variance and
    mean constant profiled out analytically.  ``bounds`` maps "variance",
    "lengthscales" and "mean" to (low, high) pairs; lengthscale bounds may
    also be a per-axis list of pairs.  ``extra_starts`` adds explicit
    lengthscale vectors to the start set, e.g. the incumbent spec.
    """
    if len(data) < 2:
        raise ValueError("fitting requires at least 2 measurements")
    d = prior.dim
    bounds = dict(bounds or {})
    bounds.setdefault("variance", (1e-8, 1e8))
    bounds.setdefault("lengthscales", (1e-3, 1e3))
    bounds.setdefault("mean", (-1e8, 1e8))
    lsb = np.asarray(bounds["lengthscales"], dtype=float)
    if lsb.ndim == 1:
        lsb = np.tile(lsb, (d, 1))
    lo, hi = np.log(lsb[:, 0]), np.log(lsb[:, 1])

    points = [m.point for m in data]
    table = kern.TermTable(prior, points)
    values = np.array([m.value for m in data])
    mean_weights = kern.mean_weight_vector(prior, points)
    degenerate = bool(np.ptp(values) == 0.0)

    rng = np.random.default_rng(seed)
    starts = [np.log(np.clip(prior.lengthscales, lsb[:, 0], lsb[:, 1]))]
    for s in extra_starts:
        starts.append(np.log(np.clip(np.asarray(s, dtype=float), lsb[:, 0], lsb[:, 1])))
    for _ in range(max(0, n_starts - len(starts))):
        starts.append(lo + rng.random(d) * (hi - lo))

    def objective(log_ell):
        out = _profiled_loglik(np.exp(log_ell), table, values, mean_weights, bounds)
        return 1e12 if out is None else -out[0]

    best = None
    for s0 in starts:
        f0 = objective(s0)
        candidates = [(f0, s0)]
        res = optimize.minimize(
            objective,
            s0,
            method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
            options={"maxiter": maxiter},
        )
        candidates.append((res.fun, res.x))
        for f, xc in candidates:
            if best is None or f < best[0]:
                best = (f, xc)

    ell = np.exp(best[1])
    _, mu0, s2 = _profiled_loglik(ell, table, values, mean_weights, bounds)
    spec = KernelSpec(s2, ell, mu0)
    return FitResult(
        spec=spec,
        log_likelihood=log_marginal_likelihood(spec, data),
        degenerate=degenerate,
        n_starts=len(starts),
    )


# ---------------------------------------------------------------------------
# current best response
# ---------------------------------------------------------------------------


def find_fmin(
    field: PosteriorField,
    method: FminMethod = FminMethod.POSTERIOR_MEAN_MIN,
    response_op=None,
    domain: Domain | None = None,
    n_starts: int = 6,
    seed=0,
) -> FminContext:
    """Locate the current best response of the field.

    MEASURED_MIN takes the least measured value whose operator matches
    ``response_op`` (plain values by default).  POSTERIOR_MEAN_MIN runs a
    multistart local minimization of the posterior mean under
    ``response_op`` and never exceeds the measured minimum, since every
    matching measured location is a candidate start.
    """
    response_op = response_op or Identity()
    domain = domain or field.domain
    matching = [
        (m.point.location, m.value)
        for m in field.data
        if m.point.op == response_op
    ]

    if method == FminMethod.MEASURED_MIN:
        if not matching:
            raise NoValueMeasurements(
                f"no measurement carries operator {response_op!r}"
            )
        loc, val = min(matching, key=lambda t: t[1])
        return FminContext(value=val, location=loc, method=method)

    if domain is None:
        raise ValueError("POSTERIOR_MEAN_MIN requires a domain to search")

    def mean_at(x):
        return field.mean(GeneralizedPoint(domain.clip(x), response_op))

    # best few measured locations seed the search; random points fill in
    ranked = sorted(matching, key=lambda t: t[1])
    starts = [loc for loc, _ in ranked[: max(2, n_starts // 2)]]
    rng = np.random.default_rng(seed)
    starts.extend(
        domain.lower + rng.random((max(1, n_starts - len(starts)), domain.dim)) * domain.widths
    )
    best_x, best_v = None, np.inf
    for s0 in starts:
        res = optimize.minimize(
            mean_at,
            np.asarray(s0, dtype=float),
            method="L-BFGS-B",
            bounds=list(zip(domain.lower, domain.upper)),
            options={"maxiter": 60},
        )
        for x, v in ((np.asarray(s0, dtype=float), mean_at(s0)), (res.x, res.fun)):
            if v < best_v:
                best_x, best_v = domain.clip(x), float(v)
    # measured values are exact posterior means up to regularization noise;
    # never report worse than the measured minimum
    if matching:
        loc, val = min(matching, key=lambda t: t[1])
        if val < best_v:
            best_x, best_v = np.asarray(loc, dtype=float), float(val)
    return FminContext(value=best_v, location=best_x, method=method)
