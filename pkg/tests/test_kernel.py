"""Covariance algebra checks against finite-difference and quadrature oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import (
    conv_quadrature_1d,
    conv_quadrature_2d,
    fd_curvature_penalty,
    fd_gradient,
)
from krigopt.errors import DomainMismatch
from krigopt.kernel import (
    Component,
    ComponentSpec,
    Convolution,
    CurvaturePenalty,
    Domain,
    GeneralizedPoint as P,
    Identity,
    KernelSpec,
    OperatorSum,
    PartialDerivative,
    cov_matrix,
    kernel_eval,
    prior_mean,
)

KS2 = KernelSpec(variance=1.7, lengthscales=[0.6, 0.9], mean_const=0.5)
COMPS = ComponentSpec(
    {
        "Z": KernelSpec(1.0, [0.4, 0.7], 0.3),
        "eps": KernelSpec(0.2, [0.1, 0.15], 0.0),
    }
)
CONV_COV = np.array([[0.04, 0.01], [0.01, 0.09]])
CURV_COV = np.array([[0.02, 0.005], [0.005, 0.03]])


def _random_tag(rng, spec):
    choices = ["value", "grad", "conv", "curv"]
    if isinstance(spec, ComponentSpec):
        choices += ["component", "sum"]
    kind = choices[rng.integers(len(choices))]
    d = spec.dim
    if kind == "value":
        return Identity()
    if kind == "grad":
        return PartialDerivative(int(rng.integers(d)))
    if kind == "conv":
        a = rng.uniform(0.05, 0.3, d)
        return Convolution(np.diag(a**2))
    if kind == "curv":
        a = rng.uniform(0.05, 0.2, d)
        return CurvaturePenalty(np.diag(a**2))
    if kind == "component":
        return Component(spec.ids[rng.integers(len(spec.ids))])
    return OperatorSum([Component(c) for c in spec.ids])


class TestClosedFormValues:
    def test_same_point_identity_is_variance(self):
        x = np.array([0.3, -0.2])
        assert kernel_eval(KS2, P(x), P(x)) == pytest.approx(KS2.variance, rel=1e-14)

    def test_same_point_derivative_diagonal(self):
        x = np.array([0.1, 0.4])
        for a in range(2):
            got = kernel_eval(KS2, P(x, PartialDerivative(a)), P(x, PartialDerivative(a)))
            assert got == pytest.approx(
                KS2.variance / KS2.lengthscales[a] ** 2, rel=1e-12
            )

    def test_independent_components_zero(self):
        x, y = np.array([0.3, 0.1]), np.array([0.2, 0.5])
        assert kernel_eval(COMPS, P(x, Component("Z")), P(y, Component("eps"))) == 0.0

    def test_sum_bilinearity_exact(self):
        x, y = np.array([0.3, 0.1]), np.array([0.2, 0.5])
        both = kernel_eval(
            COMPS, P(x, OperatorSum([Component("Z"), Component("eps")])), P(y, Component("Z"))
        )
        z = kernel_eval(COMPS, P(x, Component("Z")), P(y, Component("Z")))
        e = kernel_eval(COMPS, P(x, Component("eps")), P(y, Component("Z")))
        assert both == z + e


class TestPriorMean:
    def test_identity(self):
        assert prior_mean(KS2, P([0.1, 0.2])) == 0.5

    def test_derivative_of_constant_is_zero(self):
        assert prior_mean(KS2, P([0.1, 0.2], PartialDerivative(1))) == 0.0

    def test_convolution_and_curvature_preserve_constant(self):
        assert prior_mean(KS2, P([0.1, 0.2], Convolution(CONV_COV))) == 0.5
        assert prior_mean(KS2, P([0.1, 0.2], CurvaturePenalty(CURV_COV))) == 0.5

    def test_sum_linearity(self):
        got = prior_mean(
            COMPS, P([0.1, 0.2], OperatorSum([Component("Z"), Component("eps")]))
        )
        assert got == pytest.approx(0.3, abs=1e-15)


class TestDerivativeConsistency:
    @pytest.mark.parametrize("seed", range(8))
    def test_first_derivative_matches_fd(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        a = int(rng.integers(2))

        def k_of_x(xx):
            return kernel_eval(KS2, P(xx), P(y))

        got = kernel_eval(KS2, P(x, PartialDerivative(a)), P(y))
        want = fd_gradient(k_of_x, x, a, h=1e-4)
        assert got == pytest.approx(want, rel=1e-4)

    @pytest.mark.parametrize("seed", range(8))
    def test_cross_derivative_matches_fd(self, seed):
        rng = np.random.default_rng(100 + seed)
        x, y = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        a, b = int(rng.integers(2)), int(rng.integers(2))
        got = kernel_eval(KS2, P(x, PartialDerivative(a)), P(y, PartialDerivative(b)))

        def slope_in_y(yy):
            return fd_gradient(lambda xx: kernel_eval(KS2, P(xx), P(yy)), x, a, h=1e-4)

        want = fd_gradient(slope_in_y, y, b, h=1e-4)
        assert got == pytest.approx(want, rel=1e-3, abs=1e-8)


class TestConvolutionConsistency:
    def test_one_sided_matches_quadrature_1d(self):
        spec = KernelSpec(2.0, [0.5])
        got = kernel_eval(spec, P([0.2], Convolution([[0.09]])), P([-0.4]))
        want = conv_quadrature_1d(spec, 0.2, -0.4, 0.09)
        assert got == pytest.approx(want, rel=1e-6)

    def test_non_diagonal_matches_quadrature_2d(self):
        got = kernel_eval(KS2, P([0.3, -0.2], Convolution(CONV_COV)), P([0.1, 0.4]))
        want = conv_quadrature_2d(KS2, [0.3, -0.2], [0.1, 0.4], CONV_COV)
        assert got == pytest.approx(want, rel=1e-3)

    def test_zero_covariance_is_identity(self):
        x, y = np.array([0.3, -0.2]), np.array([0.1, 0.4])
        got = kernel_eval(KS2, P(x, Convolution(np.zeros((2, 2)))), P(y))
        assert got == pytest.approx(kernel_eval(KS2, P(x), P(y)), rel=1e-14)

    def test_both_sides_widen_lengthscale(self):
        spec = KernelSpec(2.0, [0.5])
        got = kernel_eval(
            spec, P([0.2], Convolution([[0.04]])), P([-0.4], Convolution([[0.02]]))
        )
        m = 0.25 + 0.04 + 0.02
        want = 2.0 * np.sqrt(0.25 / m) * np.exp(-0.5 * 0.36 / m)
        assert got == pytest.approx(want, rel=1e-12)


class TestCurvatureConsistency:
    def test_curvature_vs_identity_side(self):
        x, y = np.array([0.3, -0.2]), np.array([0.1, 0.4])
        got = kernel_eval(KS2, P(x, CurvaturePenalty(CURV_COV)), P(y))
        want = fd_curvature_penalty(
            lambda xx: kernel_eval(KS2, P(xx), P(y)), x, CURV_COV
        )
        assert got == pytest.approx(want, rel=1e-3)

    def test_curvature_vs_derivative_side(self):
        x, y = np.array([0.3, -0.2]), np.array([0.1, 0.4])
        got = kernel_eval(KS2, P(x, CurvaturePenalty(CURV_COV)), P(y, PartialDerivative(1)))
        want = fd_curvature_penalty(
            lambda xx: kernel_eval(KS2, P(xx), P(y, PartialDerivative(1))), x, CURV_COV
        )
        assert got == pytest.approx(want, rel=1e-3)

    def test_curvature_both_sides(self):
        x, y = np.array([0.3, -0.2]), np.array([0.1, 0.4])
        other = np.array([[0.03, -0.004], [-0.004, 0.05]])
        got = kernel_eval(KS2, P(x, CurvaturePenalty(CURV_COV)), P(y, CurvaturePenalty(other)))
        want = fd_curvature_penalty(
            lambda xx: fd_curvature_penalty(
                lambda yy: kernel_eval(KS2, P(xx), P(yy)), y, other, h=2e-3
            ),
            x,
            CURV_COV,
            h=2e-3,
        )
        assert got == pytest.approx(want, rel=1e-3)

    def test_zero_covariance_is_identity(self):
        x, y = np.array([0.3, -0.2]), np.array([0.1, 0.4])
        got = kernel_eval(KS2, P(x, CurvaturePenalty(np.zeros((2, 2)))), P(y))
        assert got == pytest.approx(kernel_eval(KS2, P(x), P(y)), rel=1e-14)


class TestStructuralProperties:
    @pytest.mark.parametrize("seed", range(20))
    def test_symmetry_random_tags(self, seed):
        rng = np.random.default_rng(seed)
        spec = COMPS if seed % 2 else KS2
        s = P(rng.uniform(-1, 1, 2), _random_tag(rng, spec))
        t = P(rng.uniform(-1, 1, 2), _random_tag(rng, spec))
        a, b = kernel_eval(spec, s, t), kernel_eval(spec, t, s)
        assert a == pytest.approx(b, rel=1e-10, abs=1e-12)

    @pytest.mark.parametrize("seed", range(12))
    def test_gram_psd(self, seed):
        rng = np.random.default_rng(1000 + seed)
        spec = COMPS if seed % 2 else KS2
        n = int(rng.integers(2, 13))
        pts = [P(rng.uniform(-1, 1, 2), _random_tag(rng, spec)) for _ in range(n)]
        gram = cov_matrix(spec, pts)
        scale = 1.7 if spec is KS2 else 1.2
        assert np.linalg.eigvalsh(gram).min() >= -1e-8 * scale

    @given(
        x=st.lists(st.floats(-1, 1), min_size=2, max_size=2),
        y=st.lists(st.floats(-1, 1), min_size=2, max_size=2),
        axis=st.integers(0, 1),
    )
    @settings(max_examples=40, deadline=None)
    def test_sum_distributes_hypothesis(self, x, y, axis):
        t = P(np.array(y), PartialDerivative(axis))
        combined = kernel_eval(
            COMPS, P(np.array(x), OperatorSum([Component("Z"), Component("eps")])), t
        )
        parts = kernel_eval(COMPS, P(np.array(x), Component("Z")), t) + kernel_eval(
            COMPS, P(np.array(x), Component("eps")), t
        )
        assert combined == parts


class TestValidation:
    def test_dimension_mismatch(self):
        with pytest.raises(DomainMismatch):
            kernel_eval(KS2, P([0.1]), P([0.2, 0.3]))

    def test_derivative_axis_out_of_range(self):
        with pytest.raises(DomainMismatch):
            kernel_eval(KS2, P([0.1, 0.2], PartialDerivative(5)), P([0.2, 0.3]))

    def test_unknown_component(self):
        with pytest.raises(ValueError, match="not declared"):
            kernel_eval(COMPS, P([0.1, 0.2], Component("Q")), P([0.2, 0.3]))

    def test_component_on_plain_kernel(self):
        with pytest.raises(ValueError):
            kernel_eval(KS2, P([0.1, 0.2], Component("Z")), P([0.2, 0.3]))

    def test_convolution_cov_must_be_psd(self):
        with pytest.raises(ValueError):
            Convolution([[-1.0, 0.0], [0.0, 1.0]])

    def test_convolution_cov_must_be_symmetric(self):
        with pytest.raises(ValueError):
            Convolution([[1.0, 0.5], [0.0, 1.0]])

    def test_operator_sum_flattens(self):
        s = OperatorSum([Component("Z"), OperatorSum([Component("eps")])])
        assert len(s.terms) == 2

    def test_empty_sum_rejected(self):
        with pytest.raises(ValueError):
            OperatorSum([])

    def test_bad_kernel_spec(self):
        with pytest.raises(ValueError):
            KernelSpec(-1.0, [0.3])
        with pytest.raises(ValueError):
            KernelSpec(1.0, [0.0])

    def test_domain_invariants(self):
        with pytest.raises(ValueError):
            Domain([0.0, 0.0], [1.0, 0.0])
        dom = Domain([0.0], [2.0])
        assert dom.contains([1.5])
        assert not dom.contains([2.5])
        with pytest.raises(DomainMismatch):
            dom.require([2.5])
