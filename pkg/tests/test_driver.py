import json

import numpy as np
import pytest

from qpnls import driver as dv
from qpnls import fourier_core as fc
from qpnls import kam
from qpnls import nls_model as nm
from qpnls import operator_algebra as oa

OMEGA = (1.118033988749895,)


def dense_rhs(F, P):
    """Coefficients of a pair in the dense ordering (l, s, j) on |l|, |j| <= P."""
    N = F.N
    return np.concatenate([F.coeffs[:, l + N, N - P : N + P + 1].reshape(-1) for l in range(-P, P + 1)])


class TestConfig:
    def test_defaults(self):
        cfg = dv.SolverConfig()
        assert cfg.tau_ == 3.0 and cfg.s0_ == 1.5
        assert cfg.gamma == pytest.approx(1e-3**0.5)
        assert dv.SolverConfig(eps=0.0).gamma == 0.0

    @pytest.mark.parametrize(
        "kw",
        [
            {"gamma_exp": 1.0},
            {"gamma_exp": 0.0},
            {"eps": -1e-3},
            {"tol": 0.0},
            {"divisor_floor": -1.0},
            {"omega": (1.0, 2.0)},
            {"N0": 1},
            {"grid_points": 0},
            {"plugin": "nope"},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(dv.ConfigError):
            dv.SolverConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(dv.ConfigError, match="bogus"):
            dv.SolverConfig.from_dict({"bogus": 1})

    def test_round_trip(self, tmp_path):
        cfg = dv.SolverConfig(eps=1e-2, omega=(0.9,), grid_points=9)
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert dv.load_config(path) == cfg

    def test_load_errors(self, tmp_path):
        with pytest.raises(dv.ConfigError):
            dv.load_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("[1, 2]")
        with pytest.raises(dv.ConfigError):
            dv.load_config(bad)


class TestScaleSchedule:
    def test_values(self):
        assert dv.scale_schedule(8, 0) == 8
        assert dv.scale_schedule(10, 2) == 177
        assert dv.scale_schedule(4, 1) == 8

    def test_monotone_until_cap(self):
        vals = [dv.scale_schedule(3, n, cap=50) for n in range(8)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 50

    def test_strict_cap(self):
        with pytest.raises(dv.ScheduleExhausted):
            dv.scale_schedule(8, 1, cap=10, strict=True)

    @pytest.mark.parametrize("args", [(1, 0), (8, -1)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            dv.scale_schedule(*args)


class TestInvertNormalForm:
    def test_single_mode(self):
        m0 = 1.3
        nf = kam.NormalForm.unperturbed(4, m0=m0)
        ell, j = 2, 3
        g = fc.pair(fc.from_modes({(ell, j): 1.0}, 1, 4))
        h = dv.invert_normal_form(nf, OMEGA, g)
        mu = 1j * (m0 - j**2)
        assert h.coeffs[0, ell + 4, j + 4] == pytest.approx(1 / (1j * OMEGA[0] * ell + mu), abs=1e-15)

    def test_zero_datum(self):
        nf = kam.NormalForm.unperturbed(4, m0=1.3)
        h = dv.invert_normal_form(nf, OMEGA, fc.pair(fc.zeros(1, 4)))
        assert h.max_abs_coeff() == 0.0

    def test_small_divisor(self):
        # omega = 1, m0 = 1: the + channel at (l, j) = (0, 1) has divisor 0
        nf = kam.NormalForm.unperturbed(3)
        g = fc.pair(fc.from_modes({(0, 1): 1.0}, 1, 3))
        with pytest.raises(oa.SmallDivisorError):
            dv.invert_normal_form(nf, (1.0,), g)

    def test_bound_by_min_divisor(self, rng):
        nf = kam.NormalForm.unperturbed(6, m1=0.01j, m0=1.3)
        g = fc.pair(fc.random_function(rng, 1, 4))
        h, dmin = nf.solve(g, OMEGA, 1e-12, return_min_divisor=True)
        assert fc.sobolev_norm(h, 0) <= fc.sobolev_norm(g, 0) / dmin * (1 + 1e-12)


class TestInvertL:
    def test_eps0_matches_diagonal_solve(self, rng):
        cfg = dv.SolverConfig(eps=0.0, m=1.3, reg_J=8, reg_L=8, reg_Nc=8)
        params = cfg.params()
        red = dv.reduce_at(fc.zeros(1, 8), params, cfg.make_plugin(), cfg.reg_config(), cfg.kam_schedule())
        g = fc.pair(fc.random_function(rng, 1, 4))
        h = dv.invert_L(red.W1, red.W2, red.normal_form, g, OMEGA, N=4, Nwork=8)
        diag = kam.NormalForm.unperturbed(8, m0=1.3).solve(g.resize(8), OMEGA).resize(4)
        assert fc.sobolev_norm(h - diag, 0) <= 1e-13 * fc.sobolev_norm(g, 0)

    def test_desk_residual(self, reduction_u1, rng):
        red = reduction_u1
        for _ in range(3):
            g = fc.pair(fc.random_function(rng, 1, 4, decay=0.5))
            h = dv.invert_L(red.W1, red.W2, red.normal_form, g, red.omega)
            r = dv.inversion_residual(red, g, h, 1.5)
            assert r <= 1e-6 * fc.sobolev_norm(g, 3.5)


class TestNewton:
    def test_eps0_trivial(self):
        res = dv.newton_point(dv.SolverConfig(eps=0.0), OMEGA)
        assert res.converged and res.residuals == [0.0]
        assert res.u.max_abs_coeff() == 0.0

    def test_first_iterate_is_linear_response(self, newton_u1, desk_config, plugin):
        """u1 = -L(0)^{-1} F(0), checked against a dense solve of the truncated linearization."""
        P = 10
        params = desk_config.params()
        zero = fc.zeros(1, desk_config.N0)
        _, lin = nm.assemble_linearized(zero, params, plugin, J=P, L=2 * P)
        F = nm.eval_F(zero, params, plugin, P)
        x = np.linalg.solve(lin.dense(P), dense_rhs(F, P)).reshape(2 * P + 1, 2, 2 * P + 1)
        ref = -x[:, 0, :]
        K, N = 4, newton_u1.N
        got = newton_u1.c[N - K : N + K + 1, N - K : N + K + 1]
        assert np.max(np.abs(got - ref[P - K : P + K + 1, P - K : P + K + 1])) <= 1e-12 * np.max(np.abs(ref))

    def test_run_converges(self, newton_run):
        r = newton_run.residuals
        assert r[-1] <= 1e-10
        assert all(b < a for a, b in zip(r, r[1:]))
        assert dv.superlinear_report(r)["ok"]
        assert newton_run.collocation_residual is None or newton_run.collocation_residual <= 1e-8

    def test_summary_is_json(self, newton_run):
        json.dumps(newton_run.summary(), default=str)

    def test_nash_moser_masks(self):
        cfg = dv.SolverConfig(max_iters=1, tol=1e-16)
        res = dv.nash_moser_run(cfg, [OMEGA, (1.2071,)])
        assert len(res.masks) >= 1
        assert all(np.all(~b | a) for a, b in zip(res.masks, res.masks[1:]))
        assert res.summary()["survivors"] == len(res.survivors)


class TestSuperlinear:
    def test_quadratic_sequence(self):
        assert dv.superlinear_report([1e-2, 1e-4, 1e-8, 1e-16])["ok"]

    def test_stalled_sequence(self):
        rep = dv.superlinear_report([1e-8, 0.9e-8, 0.8e-8])
        assert not rep["ok"]


class TestStability:
    def test_zero_datum(self, reduction_u1, desk_config):
        h0 = np.zeros((2, 13), complex)
        rep = dv.stability_check(reduction_u1.normal_form, reduction_u1.W2, h0, desk_config.omega, T=10.0, samples=5)
        assert rep["norm_drift"] == 0.0 and rep["energy_drift"] == 0.0 and rep["ok"]

    def test_diagonal_flow_conserves_modes(self, rng):
        nf = kam.NormalForm.unperturbed(5, m1=0.02j, m0=1.3)
        v = rng.standard_normal((2, 11)) + 1j * rng.standard_normal((2, 11))
        for t in (0.0, 3.7, 250.0):
            vt = dv.evolve_reduced(nf, v, t)
            assert np.allclose(np.abs(vt), np.abs(v), rtol=1e-12, atol=0)

    def test_outside_box_uses_constant_diagonal(self, rng):
        nf = kam.NormalForm.unperturbed(3, m0=1.3)
        v = np.zeros((2, 11), complex)
        v[0, 5 + 5] = 1.0
        vt = dv.evolve_reduced(nf, v, 2.0)
        assert vt[0, 10] == pytest.approx(np.exp(-2.0 * 1j * (1.3 - 25)), abs=1e-13)

    def test_slice_norm_and_energies(self):
        v = np.zeros((2, 5), complex)
        v[0, 2 + 2] = 3.0
        v[0, 2 - 2] = 4.0
        assert dv.slice_norm(v, 0) == pytest.approx(5.0)
        assert dv.slice_norm(v, 1) == pytest.approx(10.0)
        assert dv.block_energies(v)[2] == pytest.approx(25.0)

    def test_desk_conservation(self, reduction_u1, desk_config, rng):
        K = 6
        a = (rng.standard_normal(2 * K + 1) + 1j * rng.standard_normal(2 * K + 1)) * np.exp(-np.abs(np.arange(-K, K + 1)))
        h0 = np.stack([a, np.conj(a[::-1])])
        rep = dv.stability_check(reduction_u1.normal_form, reduction_u1.W2, h0, desk_config.omega,
                                 T=20 * np.pi, samples=11, eps=desk_config.eps)
        assert rep["ok"], rep
        assert rep["oscillation"] < 0.1
