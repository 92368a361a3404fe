"""Shared independent oracles: finite differences and quadrature.

These never call the closed forms they are used to check.
"""

import numpy as np
from scipy import integrate

from krigopt.kernel import GeneralizedPoint, Identity, kernel_eval


def fd_gradient(fun, x, axis, h=1e-4):
    e = np.zeros_like(np.asarray(x, dtype=float))
    e[axis] = h
    return (fun(x + e) - fun(x - e)) / (2 * h)


def fd_hessian_entry(fun, x, i, j, h=1e-3):
    x = np.asarray(x, dtype=float)
    ei = np.zeros_like(x)
    ej = np.zeros_like(x)
    ei[i] = h
    ej[j] = h
    return (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) / (
        4 * h * h
    )


def fd_curvature_penalty(fun, x, cov, h=1e-3):
    """fun(x) + 1/2 sum_ij d2 fun / dx_i dx_j * cov_ij by central differences."""
    cov = np.atleast_2d(cov)
    d = cov.shape[0]
    acc = fun(np.asarray(x, dtype=float))
    for i in range(d):
        for j in range(d):
            if cov[i, j] != 0.0:
                acc += 0.5 * cov[i, j] * fd_hessian_entry(fun, x, i, j, h)
    return acc


def conv_quadrature_1d(spec, x, y, eps_var, rtol=1e-10):
    """integral of N(u; 0, eps_var) * K(x+u, y) du by adaptive quadrature."""
    sd = np.sqrt(eps_var)

    def integrand(u):
        return (
            np.exp(-0.5 * u * u / eps_var)
            / np.sqrt(2 * np.pi * eps_var)
            * kernel_eval(
                spec,
                GeneralizedPoint([x + u], Identity()),
                GeneralizedPoint([y], Identity()),
            )
        )

    val, _ = integrate.quad(integrand, -10 * sd, 10 * sd, epsabs=0.0, epsrel=rtol)
    return val


def conv_quadrature_2d(spec, x, y, cov, n_nodes=60):
    """Tensor Gauss-Hermite quadrature of the kernel against a Gaussian density."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    weights = weights / np.sqrt(2 * np.pi)
    L = np.linalg.cholesky(np.atleast_2d(cov) + 1e-15 * np.eye(2))
    total = 0.0
    for a, wa in zip(nodes, weights):
        for b, wb in zip(nodes, weights):
            u = L @ np.array([a, b])
            total += wa * wb * kernel_eval(
                spec,
                GeneralizedPoint(np.asarray(x) + u, Identity()),
                GeneralizedPoint(y, Identity()),
            )
    return total


def _phi(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)


def _Phi(z):
    import math

    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _emin_const_gaussian(c, m, s):
    """E min(c, X), X ~ N(m, s^2), by direct integration of the tail terms."""
    if s <= 0:
        return min(c, m)
    z = (c - m) / s
    return c - ((c - m) * _Phi(z) + s * _phi(z))


def expected_min_quadrature(mu, sigma, clamp=None):
    """E min{clamp?, gamma_1..p} for p <= 2 by nested adaptive quadrature.

    The outer integral over the first coordinate is adaptive (the integrand
    has a kink where the minimum switches branch); the inner conditional
    expectation is a one-dimensional Gaussian tail integral.
    """
    from scipy import integrate

    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    p = mu.size
    if p == 1:
        s = np.sqrt(max(sigma[0, 0], 0.0))
        if clamp is None:
            return float(mu[0])
        return _emin_const_gaussian(clamp, float(mu[0]), float(s))
    if p != 2:
        raise ValueError("quadrature oracle supports p <= 2 only")

    s1 = np.sqrt(max(sigma[0, 0], 1e-300))
    # conditional law of gamma_2 | gamma_1
    beta = sigma[0, 1] / sigma[0, 0]
    s2c = np.sqrt(max(sigma[1, 1] - beta * sigma[0, 1], 0.0))

    def integrand(z):
        g1 = mu[0] + s1 * z
        c = g1 if clamp is None else min(clamp, g1)
        m2 = mu[1] + beta * (g1 - mu[0])
        return _emin_const_gaussian(c, m2, s2c) * _phi(z)

    val, _ = integrate.quad(integrand, -10.0, 10.0, epsabs=1e-12, epsrel=1e-11, limit=300)
    return float(val)


def schur_posterior(spec, data_points, data_values, query_points, jitter):
    """One-shot block conditioning: dense Schur-complement oracle."""
    from krigopt import kernel as kern

    full = kern.cov_matrix(spec, list(query_points) + list(data_points))
    q = len(query_points)
    Kss, Ksx = full[:q, :q], full[:q, q:]
    Kxx = full[q:, q:] + jitter * np.eye(len(data_points))
    sol = np.linalg.solve(Kxx, Ksx.T)
    mean = kern.mean_vector(spec, query_points) + Ksx @ np.linalg.solve(
        Kxx, np.asarray(data_values) - kern.mean_vector(spec, data_points)
    )
    cov = Kss - Ksx @ sol
    return mean, 0.5 * (cov + cov.T)
