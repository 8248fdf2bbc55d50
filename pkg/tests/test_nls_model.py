import numpy as np
import pytest

from qpnls import fourier_core as fc
from qpnls import nls_model as nm
from qpnls import operator_algebra as oa

OMEGA = (1.118033988749895,)


@pytest.fixture
def builtin():
    return nm.make_plugin("builtin")


def params(eps=1e-3, m=1.0, N=6):
    return nm.ModelParams(m=m, eps=eps, omega=OMEGA, N=N)


def small_state(rng, N=4, amp=0.1):
    return fc.random_function(rng, 1, N, decay=0.8, amplitude=amp)


class TestParamsAndPlugins:
    def test_params_validation(self):
        with pytest.raises(ValueError):
            nm.ModelParams(eps=-1.0)
        with pytest.raises(ValueError):
            nm.ModelParams(m=0.0)

    def test_unknown_plugin(self):
        with pytest.raises(KeyError):
            nm.make_plugin("nope")

    def test_partials_match_finite_differences(self, builtin):
        assert nm.validate_plugin(builtin) < 1e-6

    def test_nonreal_p_rejected(self):
        with pytest.raises(nm.StructureError):
            nm.BuiltinPlugin(p={(1, 1): 1.0})


class TestEvalF:
    def test_single_mode_symbol_at_eps0(self):
        ell, j, m = 2, 3, 1.0
        u = fc.from_modes({(ell, j): 1.0}, 1, 4)
        r = nm.complex_residual(u, params(eps=0.0, m=m, N=4), nm.make_plugin("zero"))
        expect = -OMEGA[0] * ell + j**2 - m
        assert r.c[ell + 4, j + 4] == pytest.approx(expect, abs=1e-13)
        assert np.count_nonzero(np.abs(r.c) > 1e-13) == 1

    def test_zero_state_gives_forcing(self, builtin):
        eps = 1e-2
        F = nm.eval_F(fc.zeros(1, 3), params(eps=eps, N=3), builtin)
        # h = cos(phi) cos(x): four modes of size 1/4
        expect = np.zeros((7, 7), complex)
        for a in (-1, 1):
            for b in (-1, 1):
                expect[a + 3, b + 3] = 1j * eps * 0.25
        assert np.allclose(F.component(0).c, expect, atol=1e-15)

    def test_output_is_conjugate_pair(self, builtin, rng):
        F = nm.eval_F(small_state(rng), params(), builtin)
        assert np.array_equal(F.coeffs[1], fc.conj_reflect(F.coeffs[0]))

    def test_hamiltonian_consistency(self, builtin):
        rng = np.random.default_rng(41)
        p = params(eps=0.3)
        worst = 0.0
        for _ in range(10):
            u = small_state(rng, N=3, amp=0.3)
            h = small_state(rng, N=3, amp=1.0)
            phi = rng.uniform(0, 2 * np.pi, 1)
            delta = 1e-6
            fd = (nm.hamiltonian_energy(u + h * delta, p, builtin, phi)
                  - nm.hamiltonian_energy(u - h * delta, p, builtin, phi)) / (2 * delta)
            N = 24
            X = 1j * (fc.dx(u.resize(N), 2) + p.m * u.resize(N) + p.eps * nm.nonlinearity(u, builtin, N))
            pairing = nm.symplectic_form(nm.x_coefficients(X, phi), nm.x_coefficients(h, phi))
            worst = max(worst, abs(fd - pairing) / (1 + abs(pairing)))
        assert worst < 1e-7


class TestLinearized:
    def test_eps0_is_diagonal(self):
        m = 1.0
        _, lin = nm.assemble_linearized(fc.zeros(1, 3), params(eps=0.0, m=m, N=3), nm.make_plugin("zero"), J=4, L=2)
        A = lin.block
        j = np.arange(-4, 5)
        D = oa.diagonal_operator(np.stack([1j * (m - j**2), -1j * (m - j**2)]), 1, 2)
        assert np.allclose(A.data, D.data, atol=1e-15)
        assert oa.is_hamiltonian(A)[0]

    def test_zero_state_first_order_coefficient(self, builtin):
        eps = 1e-2
        coeffs, _ = nm.assemble_linearized(fc.zeros(1, 3), params(eps=eps, N=3), builtin)
        a1, b1 = coeffs.a[1], coeffs.b[1]
        N = a1.N
        # a1 = -2 i eps p with p = 1 + cos(phi + x)
        assert a1.c[N, N] == pytest.approx(-2j * eps, abs=1e-15)
        assert a1.c[N + 1, N + 1] == pytest.approx(-1j * eps, abs=1e-15)
        assert a1.c[N - 1, N - 1] == pytest.approx(-1j * eps, abs=1e-15)
        assert fc.sobolev_norm(b1, 0) < 1e-15

    def test_directional_derivative_order_two(self, builtin):
        rng = np.random.default_rng(43)
        p = params(eps=0.2, N=4)
        z = fc.pair(small_state(rng, N=3, amp=0.3))
        h = fc.pair(small_state(rng, N=3, amp=1.0))
        _, lin = nm.assemble_linearized(z, p, builtin)
        N = 24
        Lh = lin.apply(h.resize(N), N)
        errs = []
        for delta in (1e-3, 1e-4):
            Fp = nm.eval_F(z + h * delta, p, builtin, N)
            F0 = nm.eval_F(z, p, builtin, N)
            errs.append(fc.sobolev_norm(Fp - F0 - Lh * delta, 1.5))
        slope = np.log(errs[0] / errs[1]) / np.log(10)
        assert slope == pytest.approx(2.0, abs=0.1)

    def test_hamiltonian_relations_and_structure(self, builtin):
        rng = np.random.default_rng(47)
        for _ in range(3):
            z = small_state(rng, N=3, amp=0.3)
            coeffs, lin = nm.assemble_linearized(z, params(eps=0.1), builtin, J=8, L=6)
            assert max(coeffs.hamiltonian_relations().values()) < 1e-8
            ok, v = oa.is_hamiltonian(lin.block, 1e-10)
            assert ok, v

    def test_dense_matches_block_application(self, builtin, rng):
        z = small_state(rng, N=2, amp=0.2)
        _, lin = nm.assemble_linearized(z, params(eps=0.1, N=2), builtin, J=6, L=6)
        assert lin.dense(2).shape == (5 * 26, 5 * 26)


class TestHypotheses:
    def test_hyp1_builtin(self, builtin):
        assert nm.check_hyp1(builtin, tol=1e-10)

    def test_hyp1_perturbed_f_fails(self, builtin):
        class Bad(nm.BuiltinPlugin):
            def f(self, phi, x, z0, z1, z2):
                return super().f(phi, x, z0, z1, z2) + 0.1 * z1

        assert not nm.check_hyp1(Bad(), tol=1e-10)

    def test_hyp1_zero_plugin(self):
        assert nm.check_hyp1(nm.make_plugin("zero"))

    def test_hyp2_builtin(self, builtin):
        assert nm.check_hyp2(builtin) == pytest.approx(-2j, abs=1e-13)

    def test_hyp2_zero_mean_p(self):
        pl = nm.BuiltinPlugin(p={(1, 1): 0.5, (-1, -1): 0.5})
        with pytest.warns(nm.DegeneracyWarning):
            e = nm.check_hyp2(pl)
        assert abs(e) < 1e-14

    def test_hyp2_linear_in_p(self):
        p = {(0, 0): 1.0, (1, 1): 0.5, (-1, -1): 0.5}
        e1 = nm.check_hyp2(nm.BuiltinPlugin(p=p))
        e2 = nm.check_hyp2(nm.BuiltinPlugin(p={k: 2 * v for k, v in p.items()}))
        assert e2 == pytest.approx(2 * e1, abs=1e-14)


class TestSymplectic:
    def test_form_vanishes_on_diagonal(self, rng):
        c = rng.standard_normal(9) + 1j * rng.standard_normal(9)
        assert nm.symplectic_form(c, c) == pytest.approx(0.0, abs=1e-12)

    def test_form_examples(self):
        e = np.zeros(5, complex)
        e[3] = 1.0
        assert nm.symplectic_form(e, e) == pytest.approx(0.0, abs=1e-15)
        assert nm.symplectic_form(e, 1j * e) == pytest.approx(2 * np.pi, rel=1e-15)

    def test_real_coordinates_agree(self, rng):
        M = 64
        x = 2 * np.pi * np.arange(M) / M
        k = np.arange(-4, 5)
        a = (rng.standard_normal(9) + 1j * rng.standard_normal(9)) * np.exp(-np.abs(k))
        b = (rng.standard_normal(9) + 1j * rng.standard_normal(9)) * np.exp(-np.abs(k))
        ua, ub = np.exp(1j * np.outer(x, k)) @ a, np.exp(1j * np.outer(x, k)) @ b
        w1, w2 = np.stack([ua.real, ua.imag]), np.stack([ub.real, ub.imag])
        assert nm.real_symplectic_form(w1, w2) == pytest.approx(nm.symplectic_form(a, b), rel=1e-12)

    def test_identity(self):
        ok, v = nm.check_symplectic(oa.IdentityTransformation())
        assert ok and v == 0.0

    def test_unimodular_multiplication(self):
        T = nm.MultiplicationSlice(lambda phi, x: np.exp(0.3j * np.cos(x) + 0.1j * np.sin(2 * x)))
        ok, v = nm.check_symplectic(T)
        assert ok, v

    def test_real_scaling_fails(self):
        T = nm.MultiplicationSlice(lambda phi, x: np.full_like(x, 1.01, dtype=complex))
        assert not nm.check_symplectic(T)[0]
