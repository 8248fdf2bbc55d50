import numpy as np
import pytest

from qpnls import fourier_core as fc
from qpnls import kam
from qpnls import nls_model as nm
from qpnls import operator_algebra as oa
from qpnls import regularization as rg

OMEGA = (1.118033988749895,)


def random_normal_form(rng, J=4, size=1e-3, m1=0.05j, m0=1.3):
    """Unperturbed diagonal plus a random Hamiltonian, real perturbation on the (j, -j) blocks."""
    nf = kam.NormalForm.unperturbed(J, 1.0, m1, m0)
    n = nf.n
    X = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    X = np.where(kam.kernel_mask(J), X, 0).reshape(1, 2, 2 * J + 1, 2, 2 * J + 1)
    P = oa.hamiltonian_part(oa.BlockOperator(X, 1))
    M = nf.matrix + size * P.data[0] / P.max_abs()
    return kam.NormalForm(M, 1.0, m1, m0)


def random_hamiltonian_remainder(rng, J=4, L=2, size=1e-3):
    R = oa.hamiltonian_part(oa.random_operator(rng, 1, J, L, 0.8))
    return R * (size / oa.decay_norm(R, 1.5))


class TestSchedule:
    def test_cutoffs_increase(self):
        s = kam.KamSchedule(N0=4)
        Ns = [s.N(k) for k in range(5)]
        assert Ns[:3] == [4, 8, 22]
        assert all(b > a for a, b in zip(Ns, Ns[1:]))

    def test_exponents(self):
        s = kam.KamSchedule(tau=2.0)
        assert (s.alpha_exp, s.beta_exp) == (17.0, 19.0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            kam.KamSchedule(N0=1)
        with pytest.raises(ValueError):
            kam.KamSchedule(chi=1.0)


class TestBlocks:
    def test_two_by_two_example(self):
        nf = kam.NormalForm.unperturbed(3, m2=1.0, m1=0.1j, m0=1.0)
        mu_j, mu_mj = kam.eigenvalues_of_block(nf.block(1, 2), 1, 2)
        assert mu_j == pytest.approx(-3.2j, abs=1e-14)
        assert mu_mj == pytest.approx(-2.8j, abs=1e-14)
        assert kam.formula_eigenvalue(nf.block(1, 2), 1, 2, 1.0, 0.1j, 1.0) == pytest.approx(-2.8j, abs=1e-14)

    def test_zero_mode(self):
        nf = kam.NormalForm.unperturbed(3, m0=1.3)
        assert nf.block(1, 0).shape == (1, 1)
        assert kam.eigenvalues_of_block(nf.block(1, 0), 1, 0) == (1.3j, 1.3j)
        assert kam.formula_eigenvalue(nf.block(-1, 0), -1, 0, 1.0, 0.0, 1.3) == pytest.approx(-1.3j)

    def test_hamiltonian_blocks_imaginary(self, rng):
        nf = random_normal_form(rng)
        for sg in (1, -1):
            for j in range(1, nf.J + 1):
                mus = kam.eigenvalues_of_block(nf.block(sg, j), sg, j)
                assert max(abs(m.real) for m in mus) <= 1e-12
        assert nf.max_real_part() <= 1e-12

    def test_formula_matches_block(self, rng):
        nf = random_normal_form(rng)
        for sg in (1, -1):
            for j in range(1, nf.J + 1):
                B = nf.block(sg, j)
                mus = kam.eigenvalues_of_block(B, sg, j)
                f = kam.formula_eigenvalue(B, sg, j, nf.m2, nf.m1, nf.m0)
                assert min(abs(f - m) for m in mus) <= 1e-12

    def test_eigenbasis_diagonalizes(self, rng):
        for _ in range(20):
            nf = random_normal_form(rng)
            mu, U = nf.eigen()
            M = nf.matrix.reshape(nf.n, nf.n)
            assert np.max(np.abs(U.conj().T @ U - np.eye(nf.n))) <= 1e-12
            assert np.max(np.abs(U.conj().T @ M @ U - np.diag(mu.reshape(-1)))) <= 1e-10

    def test_solve_inverts(self, rng):
        nf = random_normal_form(rng, J=4)
        G = fc.pair(fc.random_function(rng, 1, 3))
        H = nf.solve(G, OMEGA)
        back = nf.apply(H, OMEGA)
        assert fc.sobolev_norm(back - G.resize(back.N), 0) <= 1e-12 * fc.sobolev_norm(G, 0)


class TestHomological:
    def test_zero_remainder(self):
        nf = kam.NormalForm.unperturbed(3, m1=0.01j)
        Psi = kam.solve_homological(nf, oa.zero_operator(1, 3, 2), 4, OMEGA)
        assert Psi.max_abs() == 0.0

    def test_scalar_instance(self):
        J, L, omega = 2, 1, (1.0,)
        nf = kam.NormalForm.unperturbed(J, m1=0.03j)
        R = oa.zero_operator(1, J, L)
        v = 0.01 + 0.002j
        R.data[L + 1, 0, J + 1, 0, J + 2] = v
        Psi = kam.solve_homological(nf, R, 4, omega)
        mu = nf.eigenvalues()
        expect = -v / (1j * omega[0] + mu[0, J + 1] - mu[0, J + 2])
        assert Psi.data[L + 1, 0, J + 1, 0, J + 2] == pytest.approx(expect, abs=1e-16)
        assert np.count_nonzero(np.abs(Psi.data) > 1e-15 * abs(v)) == 1
        assert kam.homological_residual(Psi, nf, R, 4, omega) <= 1e-14

    def test_kernel_entries_vanish(self, rng):
        J, L = 4, 2
        nf = random_normal_form(rng, J)
        R = random_hamiltonian_remainder(rng, J, L)
        Psi = kam.solve_homological(nf, R, 4, OMEGA)
        K = kam.kernel_mask(J).reshape(2, 2 * J + 1, 2, 2 * J + 1)
        assert np.all(Psi.data[L][K] == 0)
        assert kam.homological_residual(Psi, nf, R, 4, OMEGA) <= 1e-12

    def test_kernel_mask_structure(self):
        K = kam.kernel_mask(2).reshape(2, 5, 2, 5)
        assert K[0, 2 + 1, 0, 2 - 1] and K[1, 2 + 2, 1, 2 + 2]
        assert not K[0, 2 + 1, 1, 2 + 1]
        assert not K[0, 2 + 1, 0, 2 + 2]

    def test_small_divisor_raises(self):
        nf = kam.NormalForm.unperturbed(2)
        R = oa.zero_operator(1, 2, 3)
        # + channel, j = 1 against j' = 2 at l = -3: -3i + i(1 - 1) - i(1 - 4) = 0
        R.data[0, 0, 3, 0, 4] = 1e-3
        with pytest.raises(oa.SmallDivisorError):
            kam.solve_homological(nf, R, 4, (1.0,))


class TestKamStep:
    def test_zero_remainder_is_fixed_point(self):
        nf = kam.NormalForm.unperturbed(3, m1=0.01j)
        state = kam.KamState(0, nf, oa.zero_operator(1, 3, 2))
        new = kam.kam_step(state, kam.KamSchedule(), OMEGA)
        assert new.R.max_abs() == 0.0
        assert np.array_equal(new.D.matrix, nf.matrix)
        Phi = new.factors[0].forward
        assert (Phi - oa.identity(1, 3, Phi.L)).max_abs() <= 1e-15

    def test_eigenvalue_drift_bound(self, rng):
        for _ in range(5):
            nf = random_normal_form(rng)
            state = kam.KamState(0, nf, random_hamiltonian_remainder(rng, size=1e-3))
            rec = kam.kam_step(state, kam.KamSchedule(), OMEGA).history[0]
            assert rec["eig_drift"] <= rec["diag_channel_R"]
            assert rec["max_re_mu"] <= 1e-10

    def test_step_is_quadratic(self, rng):
        """With the remainder inside |l| <= N the new remainder is purely quadratic."""
        nf = kam.NormalForm.unperturbed(4, m1=0.01j, m0=1.3)
        R = random_hamiltonian_remainder(rng, 4, 2, size=1.0)
        out = []
        for size in (1e-3, 1e-4):
            new = kam.kam_step(kam.KamState(0, nf, R * size), kam.KamSchedule(N0=4), OMEGA)
            out.append(oa.decay_norm(new.R, 1.5))
        assert out[0] / out[1] == pytest.approx(100.0, rel=0.05)

    def test_hamiltonian_closure(self, rng):
        nf = random_normal_form(rng)
        # exp(Psi) needs time room beyond the support of R to stay symplectic after truncation
        R = random_hamiltonian_remainder(rng).resize(4, 8)
        new = kam.kam_step(kam.KamState(0, nf, R), kam.KamSchedule(), OMEGA)
        assert oa.is_hamiltonian(new.R, 1e-12)[0]
        assert nm.check_symplectic(new.factors[0])[0]


class TestReduce:
    def test_eps0_zero_iterations(self):
        params = nm.ModelParams(m=1.0, eps=0.0, omega=OMEGA, N=8)
        reg = rg.regularize(fc.zeros(1, 8), params, nm.make_plugin("builtin"), rg.RegConfig(Nc=8, J=6, L=6), check=False)
        res = kam.reduce(reg, kam.KamSchedule())
        assert res.iterations == 0
        ref = kam.NormalForm.unperturbed(6, reg.m2, reg.m1, reg.m0)
        assert np.allclose(res.normal_form.matrix, ref.matrix, atol=1e-15)

    def test_desk_history_invariants(self, reduction_u1, desk_config):
        res = reduction_u1.kam
        sched = desk_config.kam_schedule()
        assert res.iterations >= 2
        for rec in res.history:
            assert rec["max_re_mu"] <= 1e-10
            assert rec["homological_residual"] <= 1e-12
            assert rec["hamiltonian_projection"] <= 10 * 1e-10
            assert rec["eig_drift"] <= rec["diag_channel_R"]
        assert oa.decay_norm(res.R_final, sched.s0) <= sched.stop_tol

    def test_desk_correction_decay(self, reduction_u1, desk_config):
        decay = reduction_u1.kam.normal_form.correction_decay(desk_config.eps)
        assert np.all(np.isfinite(decay)) and decay.max() < 1.0

    def test_desk_decay_schedule(self, reduction_u1, desk_config):
        tau = desk_config.kam_schedule().tau
        rep = kam.check_decay_schedule(reduction_u1.kam.history, tau)
        assert rep["exponent"] >= tau + 1
        assert rep["quadratic_ok"]


class TestDecaySchedule:
    def test_insufficient_data(self):
        rep = kam.check_decay_schedule([{"N": 4, "R_s0": 1e-3, "R_next_s0": 1e-5}], 3.0)
        assert rep["status"] == "insufficient data"

    def test_three_halves_power(self):
        r0 = 1e-4
        r1 = r0**1.5
        r2 = r1**1.5
        hist = [{"N": 4, "R_s0": r0, "R_next_s0": r1}, {"N": 8, "R_s0": r1, "R_next_s0": r2}]
        rep = kam.check_decay_schedule(hist, 3.0)
        assert rep["status"] == "ok" and rep["quadratic_ok"]
        assert rep["exponent"] == pytest.approx(np.log(r1 / r2) / np.log(2))
