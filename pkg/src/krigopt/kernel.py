"""Squared-exponential covariance algebra over generalized points.

A generalized point pairs a location with a linear-operator tag.  Measuring
it yields the operator applied to the latent field at that location: a plain
value, a partial derivative, a Gaussian-smoothed (convolved) value, a
curvature-penalized value, a single latent component of a multi-effect
field, or a sum of such observations.

All covariances derive from the anisotropic squared-exponential base

    k(x, y) = variance * exp(-1/2 * sum_a (x_a - y_a)^2 / ell_a^2)

which stays closed-form under every supported operator:

* derivatives multiply the exponential by Hermite-style polynomial
  prefactors in v = M^{-1} (x - y),
* Gaussian convolution inflates the metric M = diag(ell^2) by the
  perturbation covariance and rescales the amplitude by the determinant
  ratio,
* the curvature penalty  h -> h + 1/2 sum_ij (d^2 h / dx_i dx_j) S_ij
  contracts the kernel Hessian with S,
* components of a multi-effect prior are mutually independent, and sums
  expand bilinearly.

Evaluation is organised around "atomic terms": every (spec, tag) pair
expands into terms (component, base operator) with base operator one of
{value, derivative, convolution, curvature}, and the covariance of two
generalized points is the sum of the atomic covariances over matching
components.  Block helpers evaluate whole sets of points at once so Gram
matrices and posterior queries stay vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainMismatch, UnsupportedOperatorPair

__all__ = [
    "Domain",
    "KernelSpec",
    "ComponentSpec",
    "GeneralizedPoint",
    "Identity",
    "PartialDerivative",
    "Convolution",
    "CurvaturePenalty",
    "Component",
    "OperatorSum",
    "TermTable",
    "kernel_eval",
    "prior_mean",
    "cov_matrix",
    "cov_from_tables",
    "mean_vector",
    "mean_weight_vector",
]


# ---------------------------------------------------------------------------
# domain and prior specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box of admissible locations."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise DomainMismatch("domain bounds must be equal-length vectors")
        if not np.all(lo < hi):
            raise ValueError("domain requires lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        slack = tol * self.widths
        return bool(
            x.shape == self.lower.shape
            and np.all(x >= self.lower - slack)
            and np.all(x <= self.upper + slack)
        )

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def require(self, x, what: str = "point") -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != self.lower.shape:
            raise DomainMismatch(
                f"{what} has dimension {x.shape}, domain has {self.lower.shape}"
            )
        if not self.contains(x):
            raise DomainMismatch(f"{what} {x} outside domain")
        return x


@dataclass(frozen=True)
class KernelSpec:
    """Hyperparameters of one squared-exponential latent field."""

    variance: float
    lengthscales: np.ndarray
    mean_const: float = 0.0

    def __post_init__(self):
        ell = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if self.variance <= 0:
            raise ValueError("variance must be positive")
        if np.any(ell <= 0):
            raise ValueError("lengthscales must be positive")
        object.__setattr__(self, "variance", float(self.variance))
        object.__setattr__(self, "lengthscales", ell)
        object.__setattr__(self, "mean_const", float(self.mean_const))

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]


@dataclass(frozen=True)
class ComponentSpec:
    """Several mutually independent latent fields, keyed by component id.

    Operator tags without a component selection act on the ambient field,
    i.e. the sum of all declared components (the composite a measurement
    device would report).
    """

    components: tuple = ()

    def __post_init__(self):
        if isinstance(self.components, dict):
            items = tuple(self.components.items())
        else:
            items = tuple((str(k), v) for k, v in self.components)
        if not items:
            raise ValueError("ComponentSpec requires at least one component")
        ids = [k for k, _ in items]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate component ids: {ids}")
        dims = {v.dim for _, v in items}
        if len(dims) != 1:
            raise DomainMismatch("components disagree on dimension")
        object.__setattr__(self, "components", items)

    @property
    def dim(self) -> int:
        return self.components[0][1].dim

    @property
    def ids(self) -> tuple:
        return tuple(k for k, _ in self.components)

    def spec(self, component_id: str) -> KernelSpec:
        for k, v in self.components:
            if k == component_id:
                return v
        raise ValueError(
            f"component {component_id!r} not declared (have {list(self.ids)})"
        )

    @property
    def total_variance(self) -> float:
        return float(sum(v.variance for _, v in self.components))


# ---------------------------------------------------------------------------
# operator tags
# ---------------------------------------------------------------------------


def _as_spd(cov, what: str) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{what} covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-12 * (1.0 + np.abs(cov).max())):
        raise ValueError(f"{what} covariance must be symmetric")
    w = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if w.min() < -1e-10 * max(1.0, w.max()):
        raise ValueError(f"{what} covariance must be positive semi-definite")
    return 0.5 * (cov + cov.T)


class _Tag:
    """Base class for operator tags.  Tags are immutable and compare by key."""

    def key(self) -> tuple:
        raise NotImplementedError

    def __eq__(self, other):
        return isinstance(other, _Tag) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


class Identity(_Tag):
    """Plain value observation."""

    def key(self):
        return ("value",)

    def __repr__(self):
        return "Identity()"


class PartialDerivative(_Tag):
    """First partial derivative along one axis."""

    def __init__(self, axis: int):
        if axis < 0:
            raise ValueError("axis must be non-negative")
        self.axis = int(axis)

    def key(self):
        return ("grad", self.axis)

    def __repr__(self):
        return f"PartialDerivative({self.axis})"


class Convolution(_Tag):
    """Average under a zero-mean Gaussian perturbation with the given covariance."""

    def __init__(self, cov):
        self.cov = _as_spd(cov, "convolution")

    def key(self):
        return ("conv", self.cov.shape[0], self.cov.tobytes())

    def __repr__(self):
        return f"Convolution({self.cov.tolist()})"


class CurvaturePenalty(_Tag):
    """Second-order surrogate of the Gaussian average: h + 1/2 tr(H_h S)."""

    def __init__(self, cov):
        self.cov = _as_spd(cov, "curvature penalty")

    def key(self):
        return ("curv", self.cov.shape[0], self.cov.tobytes())

    def __repr__(self):
        return f"CurvaturePenalty({self.cov.tolist()})"


class Component(_Tag):
    """Select one latent component of a multi-effect prior."""

    def __init__(self, component_id: str):
        self.id = str(component_id)

    def key(self):
        return ("component", self.id)

    def __repr__(self):
        return f"Component({self.id!r})"


class OperatorSum(_Tag):
    """Sum of observations, e.g. objective plus a correlated error field."""

    def __init__(self, terms):
        flat = []
        for t in terms:
            if isinstance(t, OperatorSum):
                flat.extend(t.terms)
            else:
                flat.append(t)
        if not flat:
            raise ValueError("OperatorSum requires at least one term")
        self.terms = tuple(flat)

    def key(self):
        return ("sum",) + tuple(t.key() for t in self.terms)

    def __repr__(self):
        return f"OperatorSum({list(self.terms)!r})"


@dataclass(frozen=True)
class GeneralizedPoint:
    """A location paired with the operator observed there."""

    location: np.ndarray
    op: _Tag = field(default_factory=Identity)

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.location, dtype=float))
        if not np.all(np.isfinite(loc)):
            raise ValueError(f"non-finite location {loc}")
        object.__setattr__(self, "location", loc)

    def key(self) -> tuple:
        return (self.location.tobytes(), self.op.key())


# ---------------------------------------------------------------------------
# atomic-term expansion
# ---------------------------------------------------------------------------

# kinds of base operators after expansion
_VALUE, _GRAD, _CONV, _CURV = "value", "grad", "conv", "curv"


@dataclass(frozen=True)
class _Atom:
    """One additive covariance term: a base operator on one component."""

    cid: object  # component id, or None for a single-kernel prior
    kind: str
    axis: int = 0
    cov: object = None  # ndarray for conv/curv

    def group_key(self):
        covkey = None if self.cov is None else self.cov.tobytes()
        return (self.cid, self.kind, self.axis, covkey)


def _check_dim(spec, loc: np.ndarray, what: str = "point"):
    if loc.shape[0] != spec.dim:
        raise DomainMismatch(
            f"{what} has dimension {loc.shape[0]}, prior has {spec.dim}"
        )


def _expand(spec, tag: _Tag):
    """Expand a tag into atomic terms against the given prior."""
    if isinstance(spec, KernelSpec):
        cids = (None,)
    else:
        cids = spec.ids
    if isinstance(tag, Identity):
        return [_Atom(c, _VALUE) for c in cids]
    if isinstance(tag, PartialDerivative):
        if tag.axis >= spec.dim:
            raise DomainMismatch(
                f"derivative axis {tag.axis} out of range for dim {spec.dim}"
            )
        return [_Atom(c, _GRAD, axis=tag.axis) for c in cids]
    if isinstance(tag, Convolution):
        if tag.cov.shape[0] != spec.dim:
            raise DomainMismatch(
                f"convolution covariance is {tag.cov.shape}, prior dim {spec.dim}"
            )
        return [_Atom(c, _CONV, cov=tag.cov) for c in cids]
    if isinstance(tag, CurvaturePenalty):
        if tag.cov.shape[0] != spec.dim:
            raise DomainMismatch(
                f"curvature covariance is {tag.cov.shape}, prior dim {spec.dim}"
            )
        return [_Atom(c, _CURV, cov=tag.cov) for c in cids]
    if isinstance(tag, Component):
        if isinstance(spec, KernelSpec):
            raise ValueError(
                f"component {tag.id!r} referenced but the prior declares none"
            )
        spec.spec(tag.id)  # raises on unknown id
        return [_Atom(tag.id, _VALUE)]
    if isinstance(tag, OperatorSum):
        out = []
        for t in tag.terms:
            out.extend(_expand(spec, t))
        return out
    raise UnsupportedOperatorPair(f"unknown operator tag {tag!r}")


def _component_kernel(spec, cid) -> KernelSpec:
    if cid is None:
        return spec
    return spec.spec(cid)


# ---------------------------------------------------------------------------
# closed-form atomic covariance blocks
# ---------------------------------------------------------------------------


def _atomic_block(ks: KernelSpec, X, ax: _Atom, Y, ay: _Atom) -> np.ndarray:
    """Covariance block between two groups of same-operator atomic terms.

    X is (m, d), Y is (n, d); returns (m, n).  The x-side operator acts on
    the first kernel argument, the y-side on the second.
    """
    d = ks.dim
    M = np.diag(ks.lengthscales**2).astype(float)
    amp = ks.variance
    if ax.kind == _CONV:
        M = M + ax.cov
    if ay.kind == _CONV:
        M = M + ay.cov
    if ax.kind == _CONV or ay.kind == _CONV:
        base_det = float(np.prod(ks.lengthscales**2))
        amp = amp * np.sqrt(base_det / np.linalg.det(M))
    A = np.linalg.inv(M)

    delta = X[:, None, :] - Y[None, :, :]  # (m, n, d)
    v = delta @ A  # (m, n, d)
    expo = -0.5 * np.einsum("mnd,mnd->mn", delta, v)
    g = amp * np.exp(expo)  # (m, n)

    kx, ky = ax.kind, ay.kind
    # convolution behaves like a value observation once M is inflated
    if kx == _CONV:
        kx = _VALUE
    if ky == _CONV:
        ky = _VALUE

    if kx == _VALUE and ky == _VALUE:
        return g

    if kx == _GRAD and ky == _VALUE:
        return -v[:, :, ax.axis] * g
    if kx == _VALUE and ky == _GRAD:
        return v[:, :, ay.axis] * g
    if kx == _GRAD and ky == _GRAD:
        a, b = ax.axis, ay.axis
        return (A[a, b] - v[:, :, a] * v[:, :, b]) * g

    if kx == _CURV or ky == _CURV:
        return _curvature_block(A, v, g, ax, ay, kx, ky)

    raise UnsupportedOperatorPair(f"operator pair ({ax.kind}, {ay.kind})")


def _curvature_block(A, v, g, ax, ay, kx, ky) -> np.ndarray:
    """Blocks with at least one curvature-penalty side.

    In difference coordinates both arguments' derivatives become plain
    partials of the Gaussian form, with y-side first derivatives flipping
    sign; the curvature operator 1 + 1/2 S:grad^2 carries no flip.
    """
    if kx == _CURV and ky == _CURV:
        C, D = ax.cov, ay.cov
        vC = np.einsum("mnd,de,mne->mn", v, C, v)
        vD = np.einsum("mnd,de,mne->mn", v, D, v)
        trAC = float(np.trace(A @ C))
        trAD = float(np.trace(A @ D))
        CADA = C @ A @ D @ A
        vCADv = np.einsum("mnd,de,mne->mn", v, C @ A @ D, v)
        quartic = (
            vC * vD
            - trAC * vD
            - trAD * vC
            - 4.0 * vCADv
            + trAC * trAD
            + 2.0 * float(np.trace(CADA))
        )
        return g * (1.0 + 0.5 * (vC - trAC) + 0.5 * (vD - trAD) + 0.25 * quartic)

    if kx == _CURV and ky == _VALUE or kx == _VALUE and ky == _CURV:
        C = ax.cov if kx == _CURV else ay.cov
        vC = np.einsum("mnd,de,mne->mn", v, C, v)
        trAC = float(np.trace(A @ C))
        return g * (1.0 + 0.5 * (vC - trAC))

    # one curvature side, one first-derivative side
    if kx == _CURV:  # derivative on y: sign +v_b before correction
        C, b, sign = ax.cov, ay.axis, 1.0
    else:  # derivative on x: sign -v_a
        C, b, sign = ay.cov, ax.axis, -1.0
    vC = np.einsum("mnd,de,mne->mn", v, C, v)
    trAC = float(np.trace(A @ C))
    ACv = np.einsum("bd,mnd->mnb", A @ C, v)
    return sign * g * (v[:, :, b] * (1.0 + 0.5 * vC - 0.5 * trAC) - ACv[:, :, b])


# ---------------------------------------------------------------------------
# public evaluation API
# ---------------------------------------------------------------------------


class TermTable:
    """Pre-expanded atomic terms of a fixed set of generalized points.

    The expansion depends only on the prior's component structure, so one
    table serves every hyperparameter setting with the same structure;
    rebuilding Gram matrices during likelihood maximization then skips the
    per-point expansion entirely.
    """

    def __init__(self, spec, points):
        locs, atoms, owners = [], [], []
        for i, p in enumerate(points):
            _check_dim(spec, p.location)
            for atom in _expand(spec, p.op):
                locs.append(p.location)
                atoms.append(atom)
                owners.append(i)
        groups = {}
        for row, atom in enumerate(atoms):
            groups.setdefault(atom.group_key(), []).append(row)
        self.locs = np.asarray(locs, dtype=float)
        self.atoms = atoms
        self.owners = np.asarray(owners, dtype=int)
        self.groups = groups
        self.n_points = len(points)


def cov_from_tables(spec, tx: TermTable, ty: TermTable, symmetric=False) -> np.ndarray:
    out = np.zeros((tx.n_points, ty.n_points))
    for rows_x in tx.groups.values():
        ax = tx.atoms[rows_x[0]]
        for rows_y in ty.groups.values():
            ay = ty.atoms[rows_y[0]]
            if ax.cid != ay.cid:
                continue  # independent components never covary
            ks = _component_kernel(spec, ax.cid)
            block = _atomic_block(ks, tx.locs[rows_x], ax, ty.locs[rows_y], ay)
            np.add.at(out, np.ix_(tx.owners[rows_x], ty.owners[rows_y]), block)
    if symmetric:
        out = 0.5 * (out + out.T)
    return out


def cov_matrix(spec, S, T=None) -> np.ndarray:
    """Prior covariance matrix between two sets of generalized points.

    With ``T`` omitted, returns the (symmetrized) Gram matrix over ``S``.
    """
    tx = TermTable(spec, S)
    if T is None:
        return cov_from_tables(spec, tx, tx, symmetric=True)
    return cov_from_tables(spec, tx, TermTable(spec, T))


def kernel_eval(spec, s: GeneralizedPoint, t: GeneralizedPoint) -> float:
    """Closed-form covariance K(s, t) of two generalized points."""
    return float(cov_matrix(spec, [s], [t])[0, 0])


def mean_weight_vector(spec, S) -> np.ndarray:
    """Per-point count of value-like atomic terms (the prior-mean multiplier
    when every component shares a unit mean constant)."""
    out = np.zeros(len(S))
    for i, p in enumerate(S):
        _check_dim(spec, p.location)
        for atom in _expand(spec, p.op):
            if atom.kind != _GRAD:
                out[i] += 1.0
    return out


def mean_vector(spec, S) -> np.ndarray:
    """Prior mean evaluated at a list of generalized points."""
    out = np.zeros(len(S))
    for i, p in enumerate(S):
        _check_dim(spec, p.location)
        for atom in _expand(spec, p.op):
            if atom.kind != _GRAD:
                out[i] += _component_kernel(spec, atom.cid).mean_const
    return out


def prior_mean(spec, s: GeneralizedPoint) -> float:
    """Prior mean of one generalized point.

    A constant mean survives values, convolutions, curvature penalties and
    component selection unchanged; derivatives of it vanish; sums add.
    """
    return float(mean_vector(spec, [s])[0])


def prior_variance_scale(spec) -> float:
    """Variance scale used for jitter and tolerance decisions."""
    if isinstance(spec, KernelSpec):
        return spec.variance
    return spec.total_variance
