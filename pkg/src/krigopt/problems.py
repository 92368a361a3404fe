"""Synthetic objective problems for demos, tests, and builtin evaluation.

Every problem is a deterministic function of its inputs (seeded random
fields are frozen realizations), so repeated measurement at one location
returns the same value.
"""

from __future__ import annotations

import numpy as np

from .kernel import Domain

__all__ = ["Problem", "get_problem", "PROBLEMS", "gauss_hermite_average"]


class Problem:
    """A scalar objective with optional gradient and named channels."""

    def __init__(self, name, domain, value, gradient=None, components=None, costs=None):
        self.name = name
        self.domain = domain
        self._value = value
        self._gradient = gradient
        self._components = components or {}
        self._costs = costs or {}

    def value(self, x) -> float:
        return float(self._value(np.atleast_1d(np.asarray(x, dtype=float))))

    def gradient(self, x) -> np.ndarray:
        if self._gradient is None:
            raise ValueError(f"problem {self.name!r} provides no gradients")
        return np.atleast_1d(
            np.asarray(self._gradient(np.atleast_1d(np.asarray(x, dtype=float))), float)
        )

    def component(self, cid, x) -> float:
        if cid not in self._components:
            raise ValueError(f"problem {self.name!r} has no channel {cid!r}")
        return float(self._components[cid](np.atleast_1d(np.asarray(x, dtype=float))))

    def cost_of(self, cid):
        return self._costs.get(cid)


def _frozen_field(seed: int, lengthscale: float, amplitude: float, n_features: int = 48):
    """A fixed realization of a smooth random field via random Fourier features.

    Approximates a draw from a squared-exponential process, so the same
    location always reports the same value.
    """
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal(n_features) / lengthscale
    phase = rng.uniform(0.0, 2.0 * np.pi, n_features)

    def f(x):
        return amplitude * np.sqrt(2.0 / n_features) * np.sum(
            np.cos(omega * float(x[0]) + phase)
        )

    return f


# -- quadratic bowl ----------------------------------------------------------

_QUAD_C = 0.7134
_QUAD_A = 25.0


def _quad1d():
    dom = Domain([0.0], [1.0])
    value = lambda x: _QUAD_A * (x[0] - _QUAD_C) ** 2
    grad = lambda x: np.array([2.0 * _QUAD_A * (x[0] - _QUAD_C)])
    return Problem("quad1d", dom, value, grad)


# -- Branin-style 2-d benchmark ----------------------------------------------


def _branin2d():
    a, b, c = 1.0, 5.1 / (4.0 * np.pi**2), 5.0 / np.pi
    r, s, t = 6.0, 10.0, 1.0 / (8.0 * np.pi)
    dom = Domain([-5.0, 0.0], [10.0, 15.0])

    def value(x):
        inner = x[1] - b * x[0] ** 2 + c * x[0] - r
        return a * inner**2 + s * (1 - t) * np.cos(x[0]) + s

    def grad(x):
        inner = x[1] - b * x[0] ** 2 + c * x[0] - r
        return np.array(
            [
                2 * a * inner * (-2 * b * x[0] + c) - s * (1 - t) * np.sin(x[0]),
                2 * a * inner,
            ]
        )

    return Problem("branin2d", dom, value, grad)


# -- smooth bump field for the restricted-measurement scenario ----------------


def _bumps2d():
    dom = Domain([0.0, 0.0], [1.0, 1.0])
    centers = np.array([[0.5, 0.52], [0.15, 0.8], [0.85, 0.2]])
    depths = np.array([1.0, 0.6, 0.5])
    widths = np.array([0.12, 0.1, 0.15])

    def value(x):
        r2 = np.sum((x[None, :] - centers) ** 2, axis=1)
        return -np.sum(depths * np.exp(-0.5 * r2 / widths**2))

    def grad(x):
        d = x[None, :] - centers
        r2 = np.sum(d**2, axis=1)
        w = depths * np.exp(-0.5 * r2 / widths**2) / widths**2
        return np.sum(w[:, None] * d, axis=0)

    return Problem("bumps2d", dom, value, grad)


# -- sharp vs broad well for robust design ------------------------------------

TWOWELL_NARROW = (0.25, 0.04, 1.5)  # center, width, depth
TWOWELL_BROAD = (0.72, 0.15, 0.8)


def _twowell1d():
    dom = Domain([0.0], [1.0])
    wells = (TWOWELL_NARROW, TWOWELL_BROAD)

    def value(x):
        return -sum(
            depth * np.exp(-0.5 * (x[0] - c) ** 2 / w**2) for c, w, depth in wells
        )

    def grad(x):
        g = sum(
            depth * np.exp(-0.5 * (x[0] - c) ** 2 / w**2) * (x[0] - c) / w**2
            for c, w, depth in wells
        )
        return np.array([g])

    return Problem("twowell1d", dom, value, grad)


# -- latent objective observed through a correlated error ---------------------

NOISY_EPS_SCALE = 0.06
NOISY_EPS_AMP = 0.25


def _noisy1d():
    dom = Domain([0.0], [1.0])
    z = lambda x: 2.0 * (x[0] - 0.62) ** 2
    eps = _frozen_field(seed=12345, lengthscale=NOISY_EPS_SCALE, amplitude=NOISY_EPS_AMP)
    value = lambda x: z(x) + eps(x)
    return Problem(
        "noisy1d",
        dom,
        value,
        gradient=None,
        components={"Z": z, "eps": eps},
    )


# -- accurate objective with a cheap biased proxy ------------------------------

FIDELITY_COST_HI = 1.0
FIDELITY_COST_LO = 0.1


def _fidelity1d():
    dom = Domain([0.0], [1.0])
    z = lambda x: 2.0 * (x[0] - 0.3) ** 2 + 0.25 * np.sin(9.0 * x[0])
    bias = lambda x: 0.3 * np.cos(2.5 * x[0] + 0.7)
    w = lambda x: z(x) + bias(x)
    return Problem(
        "fidelity1d",
        dom,
        value=z,
        gradient=None,
        components={"Z": z, "W": w},
        costs={"Z": FIDELITY_COST_HI, "W": FIDELITY_COST_LO},
    )


# -- multimodal 1-d for batch and gradient demos -------------------------------


def _multimodal1d():
    dom = Domain([0.0], [1.0])
    value = lambda x: np.sin(9.0 * x[0]) * (1.0 - x[0]) + 2.0 * (x[0] - 0.55) ** 2

    def grad(x):
        return np.array(
            [
                9.0 * np.cos(9.0 * x[0]) * (1.0 - x[0])
                - np.sin(9.0 * x[0])
                + 4.0 * (x[0] - 0.55)
            ]
        )

    return Problem("multimodal1d", dom, value, grad)


PROBLEMS = {
    "quad1d": _quad1d,
    "branin2d": _branin2d,
    "bumps2d": _bumps2d,
    "twowell1d": _twowell1d,
    "noisy1d": _noisy1d,
    "fidelity1d": _fidelity1d,
    "multimodal1d": _multimodal1d,
}


def get_problem(name: str) -> Problem:
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise ValueError(
            f"unknown builtin problem {name!r}; have {sorted(PROBLEMS)}"
        ) from None


def gauss_hermite_average(fun, x, cov, n_nodes: int = 41) -> float:
    """Deterministic Gaussian average E fun(x + e), e ~ N(0, cov).

    Tensorized Gauss-Hermite quadrature; the independent oracle used to
    judge robust designs.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = x.shape[0]
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    weights = weights / np.sqrt(2.0 * np.pi)
    L = np.linalg.cholesky(cov + 1e-15 * np.eye(d))
    if d == 1:
        pts = x[0] + L[0, 0] * nodes
        return float(np.sum(weights * np.array([fun(np.array([p])) for p in pts])))
    total = 0.0
    for idx in np.ndindex(*(n_nodes,) * d):
        z = nodes[list(idx)]
        wgt = np.prod(weights[list(idx)])
        total += wgt * fun(x + L @ z)
    return float(total)
