import numpy as np
import pytest
from scipy import integrate

from qpnls import fourier_core as fc
from qpnls import nls_model as nm
from qpnls import operator_algebra as oa
from qpnls import regularization as rg

OMEGA = (1.118033988749895,)
N = 16
SMALL = rg.RegConfig(Nc=N, J=8, L=8)


def func(modes):
    return fc.from_modes(modes, 1, N)


def const(v):
    return fc.constant(v, 1, N)


def operator(c0=1.0, c1=0.0, c2=1.0, d=(0.0, 0.0, 0.0)):
    """omega.d_phi + i(c2 d_xx + c1 d_x + c0) + i(d2 d_xx + d1 d_x + d0) conj."""
    wrap = lambda v: v if isinstance(v, fc.TorusFunction) else const(v)
    return nm.DifferentialOperator(OMEGA, (wrap(c0), wrap(c1), wrap(c2)), tuple(wrap(v) for v in d))


class TestSteps:
    def test_step1_unperturbed(self):
        res = rg.step1_diagonalize_a2(operator(), SMALL)
        assert res.artifacts["beta"] is None
        assert fc.sobolev_norm(res.artifacts["alpha"] - 1.0, 0) < 1e-14
        assert res.artifacts["det_defect"] < 1e-14
        assert fc.sobolev_norm(res.operator.c[2] - 1.0, 0) < 1e-14

    def test_step1_random_coupling(self, rng):
        # alpha, beta are square roots: a wide cutoff keeps their tails
        Nw = 20
        a2 = fc.random_function(rng, 1, 2, amplitude=0.05).real_part().resize(Nw)
        b2 = fc.random_function(rng, 1, 2, amplitude=0.05).resize(Nw)
        z = fc.zeros(1, Nw)
        L0 = nm.DifferentialOperator(OMEGA, (z + 1.0, z, a2 + 1.0), (z, z, b2))
        res = rg.step1_diagonalize_a2(L0, rg.RegConfig(Nc=Nw))
        assert res.artifacts["det_defect"] < 1e-10
        assert rg.structural_zeros(res.operator, 1)["d2"] < 1e-9

    def test_step1_ellipticity_loss(self):
        with pytest.raises(rg.EllipticityError):
            rg.step1_diagonalize_a2(operator(c2=1.0, d=(0.0, 0.0, 1.5)), SMALL)

    def test_step2_identity_case(self):
        res = rg.step2_space_diffeo(operator(), SMALL)
        assert isinstance(res.transformation, oa.IdentityTransformation)
        assert res.artifacts["xi"].max_abs_coeff() == 0.0

    def test_step2_quadrature_oracle(self):
        c = 0.1
        L1 = operator(c2=func({(0, 0): 1.0, (0, 1): c / 2, (0, -1): c / 2}))
        res = rg.step2_space_diffeo(L1, SMALL)
        mean, _ = integrate.quad(lambda x: (1 + c * np.cos(x)) ** -0.5, 0, 2 * np.pi, epsabs=1e-13, epsrel=1e-13, limit=200)
        oracle = (mean / (2 * np.pi)) ** -2
        a2 = res.artifacts["a2_phi"]
        assert abs(a2.c[N, N] - oracle) < 1e-10
        assert rg.structural_zeros(res.operator, 2)["c2_x_dependence"] < 1e-9

    def test_step3_constant_and_zero_mean(self):
        res = rg.step3_time_reparam(operator(c2=1.2), SMALL)
        assert res.artifacts["m2"] == pytest.approx(1.2, abs=1e-15)
        assert isinstance(res.transformation, oa.IdentityTransformation)
        L2 = operator(c2=func({(0, 0): 1.0, (1, 0): 0.05, (-1, 0): 0.05}))
        res = rg.step3_time_reparam(L2, SMALL)
        assert res.artifacts["m2"] == pytest.approx(1.0, abs=1e-14)
        assert fc.sobolev_norm(res.operator.c[2] - 1.0, 0) < 1e-9

    def test_step3_conjugation_residual(self):
        L2 = operator(c1=0.01j, c2=func({(0, 0): 1.0, (1, 0): 0.05, (-1, 0): 0.05}))
        res = rg.step3_time_reparam(L2, SMALL)
        r = rg.conjugation_residual(L2, res.operator, res.transformation, res.rho, samples=3, Nbig=24)
        assert r < 1e-8

    def test_step4_constant_first_order(self):
        res = rg.step4_translation(operator(c1=0.02j), SMALL)
        assert res.artifacts["m1"] == pytest.approx(0.02j, abs=1e-16)
        assert isinstance(res.transformation, oa.IdentityTransformation)

    def test_step4_nonconstant(self):
        c1 = func({(0, 0): 0.02j, (1, 0): 0.01j, (-1, 0): 0.01j, (1, 1): 0.005j, (-1, -1): 0.005j})
        L3 = operator(c1=c1)
        res = rg.step4_translation(L3, SMALL)
        m1 = res.artifacts["m1"]
        assert abs(m1.real) <= 1e-10
        assert rg.structural_zeros(res.operator, 4, m1=m1)["c1_avg_minus_m1"] < 1e-9
        assert rg.conjugation_residual(L3, res.operator, res.transformation, samples=3, Nbig=24) < 1e-8

    def test_step5_identity_and_equation(self):
        res = rg.step5_descent_mult(operator(c1=0.02j), 0.02j, SMALL)
        assert isinstance(res.transformation, oa.IdentityTransformation)
        c1 = func({(0, 0): 0.02j, (0, 1): 0.01j, (0, -1): 0.01j, (1, 2): 0.003j, (-1, -2): 0.003j})
        res = rg.step5_descent_mult(operator(c1=c1), 0.02j, SMALL)
        assert res.artifacts["equation_residual"] < 1e-10
        s = res.artifacts["s"]
        assert fc.sobolev_norm(s.real_part(), 0) == 0.0
        assert nm.check_symplectic(res.transformation)[0]
        assert rg.structural_zeros(res.operator, 5, m1=0.02j)["c1_minus_m1"] < 1e-9

    def test_upsilon_symbol(self):
        ups = rg.upsilon_symbol(4)
        assert ups[4 + 2] == pytest.approx(2 / 5)
        assert ups[4] == 0.0
        assert np.allclose(ups, -ups[::-1])

    def test_step6_identity_case(self):
        res = rg.step6_pseudo_descent(operator(c0=func({(0, 0): 1.0, (1, 0): 0.1, (-1, 0): 0.1})), SMALL)
        assert isinstance(res.transformation, oa.IdentityTransformation)
        assert res.operator.remainder is None

    def test_step7_constant_and_varying(self):
        res = rg.step7_time_mult(operator(c0=1.05), 1.0, SMALL)
        assert res.artifacts["m0"] == pytest.approx(1.05, abs=1e-15)
        assert isinstance(res.transformation, oa.IdentityTransformation)
        L6 = operator(c0=func({(0, 0): 1.0, (1, 0): 0.05, (-1, 0): 0.05}))
        res = rg.step7_time_mult(L6, 1.0, SMALL)
        assert res.artifacts["m0"] == pytest.approx(1.0, abs=1e-15)
        assert fc.sobolev_norm(res.artifacts["Gamma"].real_part(), 0) == 0.0
        assert nm.check_symplectic(res.transformation)[0]
        assert rg.conjugation_residual(L6, res.operator, res.transformation, samples=3, Nbig=24) < 1e-8


class TestRegularize:
    def test_eps0(self):
        params = nm.ModelParams(m=1.0, eps=0.0, omega=OMEGA, N=N)
        out = rg.regularize(fc.zeros(1, N), params, nm.make_plugin("builtin"), SMALL)
        assert out.m2 == pytest.approx(1.0, abs=1e-15) and abs(out.m1) < 1e-15
        assert out.m0 == pytest.approx(1.0, abs=1e-15)
        assert out.R.max_abs() == 0.0
        assert all(isinstance(st.transformation, oa.IdentityTransformation) for st in out.steps)

    def test_desk_structure(self, regularization_u1):
        reg = regularization_u1
        assert len(reg.report["steps"]) == 7
        for entry in reg.report["steps"]:
            assert max(entry["structural"].values()) <= 1e-9, entry
            assert entry["residual"] <= 1e-7, entry
        assert isinstance(reg.m2, float) and isinstance(reg.m0, float)
        assert abs(complex(reg.m1).real) <= 1e-10
        assert abs(reg.m2 - 1) < 1e-2 and abs(reg.m0 - 1) < 1e-2 and abs(reg.m1) < 1e-2

    def test_desk_steps_symplectic(self, reduction_u1):
        for st in reduction_u1.reg.steps:
            ok, v = nm.check_symplectic(st.transformation, samples=20, tol=1e-9)
            assert ok, (st.name, v)

    def test_desk_end_to_end(self, reduction_u1):
        assert rg.end_to_end_residual(reduction_u1.reg, samples=2) <= 1e-7

    def test_step6_second_order_gap(self, reduction_u1):
        """exp(G) - 1 - G is quadratic in G, with room for one D-weight on each side."""
        st = reduction_u1.reg.steps[5]
        G = st.artifacts["generator"]
        T = st.transformation.forward
        J, L = G.J, G.L
        j = np.abs(np.arange(-J, J + 1, dtype=float))
        D = oa.diagonal_operator(np.stack([j, j]), 1, L)
        gap = T - oa.identity(1, J, L) - G
        lhs = oa.decay_norm(oa.compose(D, oa.compose(gap, D, L), L), 1.5)
        DG, GD = oa.compose(D, G, L), oa.compose(G, D, L)
        assert lhs <= 4 * oa.decay_norm(DG, 1.5) * oa.decay_norm(GD, 1.5) + 1e-14


class TestNondegeneracy:
    def test_eps0_skipped(self):
        assert rg.check_nondegeneracy({0: 0j}, 0.0, -2j)["skipped"]

    def test_lower_bound_failure(self):
        with pytest.raises(rg.DegeneracyError):
            rg.check_nondegeneracy({0: 1e-9j}, 1e-3, -2j)
        rep = rg.check_nondegeneracy({0: 1e-9j}, 1e-3, -2j, raise_on_fail=False)
        assert not rep["ok"]

    def test_ratio_stable_across_eps(self):
        plugin = nm.make_plugin("builtin")
        ratios = []
        for eps in (1e-2, 1e-3, 1e-4):
            params = nm.ModelParams(m=1.0, eps=eps, omega=OMEGA, N=N)
            out = rg.regularize(fc.zeros(1, N), params, plugin, SMALL, check=False)
            ratios.append(abs(out.m1) / eps)
            rep = rg.check_nondegeneracy({0: out.m1}, eps, nm.check_hyp2(plugin))
            assert rep["ok"]
            assert 0.5 * 2 <= ratios[-1] <= 2 * 2
        assert max(ratios) / min(ratios) < 2

    @staticmethod
    def _leading_state(omega, eps):
        """eps times the eps -> 0 solution driven by cos(phi) cos(x) with m = 1."""
        w = omega[0]
        return fc.from_modes({(l, j): -eps * 0.25 / (w * l) for l in (-1, 1) for j in (-1, 1)}, 1, N)

    def test_lipschitz_quotient_scaling(self):
        """The grid quotient of m1 shrinks at least like eps^2 when eps is halved."""
        plugin = nm.make_plugin("builtin")
        pts = [1.10, 1.12, 1.14]
        q = []
        for eps in (4e-2, 2e-2):
            vals = {}
            for k, w in enumerate(pts):
                params = nm.ModelParams(m=1.0, eps=eps, omega=(w,), N=N)
                vals[k] = rg.regularize(self._leading_state((w,), eps), params, plugin, SMALL, check=False).m1
            rep = rg.check_nondegeneracy(vals, eps, -2j, gamma=0.1, points=pts)
            assert rep["lipschitz_constant"] < 1.0
            q.append(rep["lipschitz_quotient"])
        assert q[1] > 0
        assert q[0] / q[1] >= 4.0 * 0.75
