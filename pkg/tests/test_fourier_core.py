import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qpnls import fourier_core as fc


def mode(d, N, key, val=1.0):
    return fc.from_modes({key: val}, d, N)


def brute_sobolev(u, s):
    """Independent loop over the stored modes."""
    N, d = u.N, u.d
    best = 0.0
    for comp in range(u.ncomp):
        tot = 0.0
        for idx in itertools.product(range(2 * N + 1), repeat=d + 1):
            k = [i - N for i in idx]
            w = max(max(abs(x) for x in k), 1)
            tot += abs(u.coeffs[(comp,) + idx]) ** 2 * w ** (2 * s)
        best = max(best, np.sqrt(tot))
    return best


def brute_convolution(u, v, N):
    """Direct double sum over mode pairs, kept inside the cube of size N."""
    d = u.d
    out = np.zeros((2 * N + 1,) * (d + 1), complex)
    idx_u = list(itertools.product(range(2 * u.N + 1), repeat=d + 1))
    idx_v = list(itertools.product(range(2 * v.N + 1), repeat=d + 1))
    for a in idx_u:
        ca = u.c[a]
        if ca == 0:
            continue
        for b in idx_v:
            k = [a[i] - u.N + b[i] - v.N for i in range(d + 1)]
            if max(abs(x) for x in k) <= N:
                out[tuple(x + N for x in k)] += ca * v.c[b]
    return out


# ---------------------------------------------------------------- norms


class TestSobolevNorm:
    @pytest.mark.parametrize("s", [0.0, 1.0, 2.5, 7.0])
    def test_unit_mixed_mode_has_norm_one(self, s):
        assert fc.sobolev_norm(mode(1, 3, (1, 1)), s) == pytest.approx(1.0, abs=1e-15)

    def test_space_mode_weight(self):
        assert fc.sobolev_norm(mode(1, 3, (0, 2)), 3) == pytest.approx(8.0, rel=1e-15)

    def test_zero(self):
        assert fc.sobolev_norm(fc.zeros(1, 4), 2.0) == 0.0

    def test_negative_s_rejected(self):
        with pytest.raises(ValueError):
            fc.sobolev_norm(fc.zeros(1, 2), -1)

    @pytest.mark.parametrize("d", [1, 2])
    def test_matches_mode_loop(self, rng, d):
        u = fc.random_function(rng, d, 3)
        for s in (0.0, 1.5, 3.0):
            assert fc.sobolev_norm(u, s) == pytest.approx(brute_sobolev(u, s), rel=1e-13)

    def test_pair_takes_max_over_components(self, rng):
        u = fc.random_function(rng, 1, 4)
        a = fc.TorusFunction(np.stack([u.c, 2 * u.c]), 1)
        assert fc.sobolev_norm(a, 1.0) == pytest.approx(2 * fc.sobolev_norm(u, 1.0), rel=1e-14)

    @given(seed=st.integers(0, 2**31), s=st.floats(0, 6), ds=st.floats(0, 4))
    def test_parseval_and_monotone(self, seed, s, ds):
        u = fc.random_function(np.random.default_rng(seed), 1, 5)
        assert fc.sobolev_norm(u, 0) ** 2 == pytest.approx(np.sum(np.abs(u.c) ** 2), rel=1e-12)
        assert fc.sobolev_norm(u, s) <= fc.sobolev_norm(u, s + ds) * (1 + 1e-14)


class TestLipNorm:
    def _grid(self):
        return fc.uniform_grid(1, 3)

    def test_constant_family(self):
        g = self._grid()
        fam = fc.ParamFamily(g, {i: 2.0 for i in range(3)})
        r = fc.lip_norm(fam, gamma=0.5)
        assert r.value == 2.0 and r.lip == 0.0

    def test_linear_family(self):
        g = self._grid()
        fam = fc.ParamFamily(g, {i: float(g.points[i, 0]) for i in range(3)})
        assert fc.lip_norm(fam, gamma=1.0).value == pytest.approx(2.5, rel=1e-15)

    def test_two_point_function_family(self, rng):
        g = fc.uniform_grid(1, 2)
        u, v = fc.random_function(rng, 1, 3), fc.random_function(rng, 1, 3)
        fam = fc.ParamFamily(g, {0: u, 1: v})
        expect_lip = brute_sobolev(u - v, 1.0) / 1.0
        expect_sup = max(brute_sobolev(u, 1.0), brute_sobolev(v, 1.0))
        r = fc.lip_norm(fam, gamma=0.3, s=1.0)
        assert r.lip == pytest.approx(expect_lip, rel=1e-13)
        assert r.value == pytest.approx(expect_sup + 0.3 * expect_lip, rel=1e-13)

    def test_single_point_warns(self):
        fam = fc.ParamFamily(self._grid(), {1: 4.0})
        with pytest.warns(UserWarning):
            r = fc.lip_norm(fam, gamma=1.0)
        assert r.single_point and r.value == 4.0

    def test_adjacent_mode_not_larger(self, rng):
        g = fc.uniform_grid(1, 5)
        fam = fc.ParamFamily(g, {i: float(rng.standard_normal()) for i in range(5)})
        assert fc.lip_norm(fam, 1.0, mode="adjacent").lip <= fc.lip_norm(fam, 1.0).lip + 1e-15


# ---------------------------------------------------------------- projections


class TestProject:
    def test_high_mode_goes_to_tail(self):
        u = mode(1, 6, (5, 0))
        low, high = fc.project(u, 4)
        assert low.max_abs_coeff() == 0 and np.array_equal(high.c, u.c)

    def test_partition(self, rng):
        u = fc.random_function(rng, 2, 4)
        low, high = fc.project(u, 2)
        assert np.array_equal((low + high).c, u.c)

    def test_smoothing_bound(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(50):
            u = fc.random_function(rng, 1, 8, decay=0.3)
            N = int(rng.integers(1, 7))
            nu = float(rng.uniform(0.5, 3))
            _, high = fc.project(u, N)
            worst = max(worst, fc.sobolev_norm(high, 1.0) / (N ** (-nu) * fc.sobolev_norm(u, 1.0 + nu)))
        assert worst <= 1.0 + 1e-12


# ---------------------------------------------------------------- products


class TestMultiply:
    def test_index_addition(self):
        e = mode(1, 3, (0, 1))
        assert np.allclose(fc.multiply(e, e).c, mode(1, 3, (0, 2)).c, atol=1e-14)

    def test_identity_element(self, rng):
        u = fc.random_function(rng, 1, 4)
        one = fc.constant(1.0, 1, 4)
        assert np.allclose(fc.multiply(one, u).c, u.c, atol=1e-14)

    @pytest.mark.parametrize("d", [1, 2])
    def test_matches_direct_convolution(self, rng, d):
        u = fc.random_function(rng, d, 2)
        v = fc.random_function(rng, d, 2)
        w = fc.multiply(u, v, N=3)
        assert np.allclose(w.c, brute_convolution(u, v, 3), atol=1e-13)

    def test_tail_is_reported(self, rng):
        u = fc.random_function(rng, 1, 3)
        full = fc.multiply(u, u, N=6)
        w, tail = fc.multiply(u, u, N=3, return_tail=True)
        assert tail == pytest.approx(np.sqrt(fc.sobolev_norm(full, 0) ** 2 - fc.sobolev_norm(w, 0) ** 2), rel=1e-10)

    def test_tame_constant_is_stable(self):
        rng = np.random.default_rng(3)
        s0 = 1.5
        ratios = []
        for _ in range(20):
            u, v = fc.random_function(rng, 1, 5, 0.4), fc.random_function(rng, 1, 5, 0.4)
            ratios.append(fc.sobolev_norm(fc.multiply(u, v, N=10), s0) / (fc.sobolev_norm(u, s0) * fc.sobolev_norm(v, s0)))
        # algebra property at s0 > (d+1)/2: a single constant covers all samples
        assert max(ratios) < 5.0

    def test_reality_closure(self, rng):
        u = fc.random_function(rng, 1, 3, reality="real")
        v = fc.random_function(rng, 1, 3, reality="real")
        w = fc.multiply(u, v)
        assert np.allclose(w.c, fc.conj_reflect(w.c), atol=1e-14)


# ---------------------------------------------------------------- derivatives


class TestDerivatives:
    def test_dx_symbol(self):
        e = mode(1, 2, (0, 1))
        assert np.allclose(fc.derivative(e, "x").c, 1j * e.c)

    def test_omega_derivative_of_constant(self):
        c = fc.constant(3.0, 1, 2)
        assert fc.derivative(c, "omega", (1.3,)).max_abs_coeff() == 0

    def test_phi_derivative_symbol(self):
        e = mode(2, 2, (0, 2, 1))
        assert np.allclose(fc.derivative(e, ("phi", 1)).c, 2j * e.c)

    def test_omega_argument_rules(self):
        e = mode(1, 2, (1, 0))
        with pytest.raises(ValueError):
            fc.derivative(e, "omega")
        with pytest.raises(ValueError):
            fc.derivative(e, "x", omega=(1.0,))

    def test_leibniz(self, rng):
        u, v = fc.random_function(rng, 1, 3), fc.random_function(rng, 1, 3)
        lhs = fc.derivative(fc.multiply(u, v, N=6), "x")
        rhs = fc.multiply(fc.derivative(u, "x"), v, N=6) + fc.multiply(u, fc.derivative(v, "x"), N=6)
        assert fc.sobolev_norm(lhs - rhs, 0) < 1e-12

    def test_dx_inverse_examples(self):
        e = mode(1, 2, (0, 1))
        assert np.allclose(fc.dx_inverse(e).c, -1j * e.c)
        assert fc.dx_inverse(mode(1, 2, (1, 0))).max_abs_coeff() == 0

    def test_dx_dx_inverse_removes_average(self, rng):
        u = fc.random_function(rng, 1, 4)
        back = fc.derivative(fc.dx_inverse(u), "x")
        assert np.allclose(back.c, (u - fc.average_x(u)).c, atol=1e-15)

    def test_omega_inverse_examples(self):
        assert fc.omega_dphi_inverse(mode(1, 2, (0, 2)), (1.0,)).max_abs_coeff() == 0
        e = mode(1, 2, (1, 0))
        assert np.allclose(fc.omega_dphi_inverse(e, (1.0,)).c, -1j * e.c)

    def test_omega_inverse_identity(self, rng):
        u = fc.random_function(rng, 2, 3)
        om = (1.0, np.sqrt(2))
        back = fc.derivative(fc.omega_dphi_inverse(u, om), "omega", om)
        assert np.allclose(back.c, (u - fc.average_phi(u)).c, atol=1e-13)

    def test_resonance_error_names_index(self):
        u = fc.zeros(2, 2)
        with pytest.raises(fc.ResonanceError) as exc:
            fc.omega_dphi_inverse(u, (1.0, 1.0))
        assert exc.value.index is not None
        l = exc.value.index
        assert l[0] + l[1] == 0 and any(l)

    def test_reality_closure(self, rng):
        u = fc.random_function(rng, 1, 4, reality="real")
        for w in (fc.derivative(u, "x"), fc.dx_inverse(u), fc.omega_dphi_inverse(u, (1.2,))):
            assert np.allclose(w.c, fc.conj_reflect(w.c), atol=1e-15)


# ---------------------------------------------------------------- compositions


def small_real(rng, d, N, amp):
    return fc.random_function(rng, d, N, decay=1.0, amplitude=amp, reality="real")


class TestSpaceDiffeo:
    def test_zero_shift_is_identity(self, rng):
        u = fc.random_function(rng, 1, 4)
        w = fc.compose_space_diffeo(u, fc.zeros(1, 4, reality="real"))
        assert np.allclose(w.c, u.c, atol=1e-13)

    def test_constant_shift_is_phase(self):
        c = 0.37
        e = mode(1, 4, (0, 1))
        w = fc.compose_space_diffeo(e, fc.constant(c, 1, 4).with_reality("real"))
        assert np.allclose(w.c, np.exp(1j * c) * e.c, atol=1e-12)

    def test_phase_identity_two_modes(self):
        c = -0.81
        u = fc.from_modes({(1, 2): 1.0, (0, -3): 0.5j}, 1, 4)
        w = fc.compose_space_diffeo(u, fc.constant(c, 1, 4).with_reality("real"))
        expect = fc.from_modes({(1, 2): np.exp(2j * c), (0, -3): 0.5j * np.exp(-3j * c)}, 1, 4)
        assert np.max(np.abs(w.c - expect.c)) < 1e-10

    def test_round_trip(self, rng):
        u = fc.random_function(rng, 1, 5, decay=1.2)
        xi = small_real(rng, 1, 3, 0.05)
        xihat = fc.invert_diffeo(xi, N=12)
        back = fc.compose_space_diffeo(fc.compose_space_diffeo(u, xi, N=16), xihat, N=5)
        assert fc.sobolev_norm(back - u, 0) / fc.sobolev_norm(u, 0) < 1e-8

    def test_rejects_large_shift(self):
        xi = fc.from_modes({(0, 1): 0.3, (0, -1): 0.3}, 1, 2, "real")
        with pytest.raises(fc.DiffeoError):
            fc.compose_space_diffeo(fc.zeros(1, 2), xi)

    def test_reality_preserved(self, rng):
        u = small_real(rng, 1, 4, 1.0)
        w = fc.compose_space_diffeo(u, small_real(rng, 1, 3, 0.05))
        assert np.allclose(w.c, fc.conj_reflect(w.c), atol=1e-13)


class TestInvertDiffeo:
    def test_zero(self):
        assert fc.invert_diffeo(fc.zeros(1, 3, reality="real")).max_abs_coeff() < 1e-16

    def test_first_order(self, rng):
        for amp in (1e-2, 1e-3):
            xi = small_real(rng, 1, 3, amp)
            xihat = fc.invert_diffeo(xi, N=10)
            ratio = fc.sobolev_norm(xihat + xi.resize(10), 0) / fc.sobolev_norm(xi, 1) ** 2
            assert ratio < 5.0

    def test_jacobian_identity(self, rng):
        xi = small_real(rng, 1, 3, 0.05)
        _, res = fc.invert_diffeo(xi, tol=1e-13, N=48, return_residual=True)
        assert res < 1e-10


class TestTimeDiffeo:
    def test_zero(self, rng):
        u = fc.random_function(rng, 1, 3)
        alpha = fc.zeros(1, 3, reality="real")
        assert np.allclose(fc.compose_time_diffeo(u, alpha, (1.1,)).c, u.c, atol=1e-13)

    def test_constant_translation(self):
        c, om = 0.4, (1.1,)
        u = fc.from_modes({(2, 1): 1.0, (-1, 0): 2.0}, 1, 3)
        w = fc.compose_time_diffeo(u, fc.constant(c, 1, 3).with_reality("real"), om)
        expect = fc.from_modes({(2, 1): np.exp(2j * om[0] * c), (-1, 0): 2.0 * np.exp(-1j * om[0] * c)}, 1, 3)
        assert np.max(np.abs(w.c - expect.c)) < 1e-10

    def test_round_trip(self, rng):
        om = (0.9,)
        u = fc.random_function(rng, 1, 4, decay=1.2)
        alpha = fc.from_modes({(1, 0): 0.02, (-1, 0): 0.02}, 1, 3, "real")
        ainv = fc.invert_time_diffeo(alpha, om, N=12)
        back = fc.compose_time_diffeo(fc.compose_time_diffeo(u, alpha, om, N=16), ainv, om, N=4)
        assert fc.sobolev_norm(back - u, 0) / fc.sobolev_norm(u, 0) < 1e-8

    def test_bad_jacobian(self):
        alpha = fc.from_modes({(1, 0): 1.0, (-1, 0): 1.0}, 1, 2, "real")
        with pytest.raises(fc.DiffeoError):
            fc.compose_time_diffeo(fc.zeros(1, 2), alpha, (1.0,))


# ---------------------------------------------------------------- dumps


def test_dump_round_trip(rng):
    u = fc.pair(fc.random_function(rng, 1, 2))
    text = fc.dump_coefficients(u)
    assert text.splitlines()[0] == "1 2 2 pair"
    v = fc.load_coefficients(text)
    assert np.array_equal(v.c, u.c) and np.array_equal(v.coeffs, u.coeffs)
    assert fc.dump_coefficients(v) == text
