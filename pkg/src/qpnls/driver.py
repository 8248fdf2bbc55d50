"""Inversion of the linearized operator, the Newton loop and stability.

The linearized operator at a state u is conjugated as
L = W1 (omega.d_phi + D) W2^{-1} with W1 = V1 Phi, W2 = V2 Phi, so

    L^{-1} g = W2 (omega.d_phi + D)^{-1} W1^{-1} g.

The Newton loop iterates u <- u - Pi_N L(u)^{-1} Pi_N F(u) at each
frequency of the mask; a frequency leaves the mask when any divisor
falls below its floor or the reduction fails there.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import fourier_core as fc
from . import kam
from . import melnikov as mk
from . import nls_model as nm
from . import operator_algebra as oa
from . import regularization as rg

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid solver configuration."""


class ScheduleExhausted(RuntimeError):
    """The scale schedule reached its cap."""


class StabilityError(RuntimeError):
    """Conservation of the reduced flow was violated."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SolverConfig:
    """All knobs of a run; JSON keys match the field names."""

    d: int = 1
    m: float = 1.0
    eps: float = 1e-3
    gamma_exp: float = 0.5
    tau: float | None = None
    tau0: float = 1.0
    gamma0: float = 0.05
    omega: tuple = (1.118033988749895,)
    grid_points: int = 65
    grid_lo: float = 0.5
    grid_hi: float = 1.5
    N0: int = 8
    N_cap: int = 10
    max_iters: int = 5
    tol: float = 1e-10
    s0: float | None = None
    oversample: int = 4
    plugin: str = "builtin"
    plugin_params: dict = field(default_factory=dict)
    reg_J: int = 16
    reg_L: int = 16
    reg_Nc: int = 16
    kam_N0: int = 4
    kam_chi: float = 1.5
    kam_max_iters: int = 12
    kam_stop_tol: float = 1e-13
    divisor_floor: float = 1e-12
    tame_cap: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma_exp < 1:
            raise ConfigError("gamma_exp must lie in (0, 1)")
        if self.eps < 0:
            raise ConfigError("eps must be nonnegative")
        if self.tol <= 0 or self.divisor_floor <= 0 or self.kam_stop_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if len(self.omega) != self.d:
            raise ConfigError("omega must have d entries")
        if self.N0 < 2:
            raise ConfigError("N0 must be at least 2")
        if self.grid_points < 1:
            raise ConfigError("grid_points must be positive")
        if self.plugin not in nm.PLUGINS:
            raise ConfigError(f"unknown plugin {self.plugin!r}")

    @property
    def gamma(self):
        return self.eps**self.gamma_exp if self.eps > 0 else 0.0

    @property
    def tau_(self):
        return float(self.d + 2) if self.tau is None else float(self.tau)

    @property
    def s0_(self):
        return (self.d + 2) / 2 if self.s0 is None else float(self.s0)

    def params(self, omega=None):
        om = self.omega if omega is None else tuple(float(x) for x in np.atleast_1d(omega))
        return nm.ModelParams(m=self.m, eps=self.eps, omega=om, N=self.N0, oversample=self.oversample)

    def make_plugin(self):
        return nm.make_plugin(self.plugin, d=self.d, **self.plugin_params)

    def reg_config(self):
        return rg.RegConfig(Nc=self.reg_Nc, J=self.reg_J, L=self.reg_L, s0=self.s0_)

    def kam_schedule(self):
        return kam.KamSchedule(
            N0=self.kam_N0, chi=self.kam_chi, tau=self.tau_, gamma=max(self.gamma, 1e-300),
            max_iters=self.kam_max_iters, stop_tol=self.kam_stop_tol,
            divisor_floor=self.divisor_floor, s0=self.s0_,
        )

    def grid(self):
        return fc.uniform_grid(self.d, self.grid_points, self.grid_lo, self.grid_hi,
                               (self.gamma0, self.tau0, 1))

    def with_(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        out = asdict(self)
        out["omega"] = list(self.omega)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(data) - known)
        if bad:
            raise ConfigError(f"unknown configuration keys: {', '.join(bad)}")
        data = dict(data)
        if "omega" in data:
            data["omega"] = tuple(float(x) for x in np.atleast_1d(data["omega"]))
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path):
    """Read a JSON configuration file into a :class:`SolverConfig`."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    return SolverConfig.from_dict(data)


# ---------------------------------------------------------------------------
# schedules


def scale_schedule(N0, n, cap=None, strict=False):
    """floor(N0^((3/2)^n)), capped at ``cap``.

    With ``strict=True`` reaching the cap raises :class:`ScheduleExhausted`.
    """
    if N0 < 2 or n < 0:
        raise ValueError("need N0 >= 2 and n >= 0")
    val = math.floor(N0 ** (1.5**n) + 1e-9)
    if cap is not None and val >= cap:
        if strict:
            raise ScheduleExhausted(f"scale schedule reached its cap {cap} at n={n}")
        return int(cap)
    return int(val)


# ---------------------------------------------------------------------------
# inversion


def invert_normal_form(nf, omega, g, divisor_floor=1e-12, check=True):
    """Solve (omega.d_phi + D) h = g block by block.

    Raises
    ------
    SmallDivisorError
        First Melnikov divisor below ``divisor_floor``; the message names
        (l, sigma, j).
    """
    h = nf.solve(g, omega, divisor_floor)
    if check:
        back = nf.apply(h, omega)
        err = fc.sobolev_norm(back - g, 0)
        ref = max(fc.sobolev_norm(g, 0), 1e-300)
        if err > 1e-12 * ref:
            raise ArithmeticError(f"block solve residual {err / ref:.2e} exceeds 1e-12")
    return h


@dataclass
class Reduction:
    """Everything produced by regularize + reduce at one frequency."""

    reg: rg.RegularizationOutput
    kam: kam.KamResult

    @property
    def omega(self):
        return self.reg.omega

    @property
    def normal_form(self):
        return self.kam.normal_form

    @property
    def W1(self):
        return oa.Chain(self.reg.V1.factors + self.kam.Phi.factors, name="W1")

    @property
    def W2(self):
        return oa.Chain(self.reg.V2.factors + self.kam.Phi.factors, name="W2")

    @property
    def L(self):
        return self.reg.L0


def reduce_at(u, params, plugin, reg_config=rg.RegConfig(), schedule=kam.KamSchedule()):
    """Regularize and reduce the linearized operator at state ``u``."""
    reg = rg.regularize(u, params, plugin, reg_config, check=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", kam.QuadraticDecayWarning)
        res = kam.reduce(reg, schedule)
    return Reduction(reg, res)


def invert_L(W1, W2, nf, g, omega, N=None, Nwork=None, divisor_floor=1e-12):
    """h = W2 (omega.d_phi + D)^{-1} W1^{-1} g, returned at cutoff N.

    ``N`` defaults to the working cutoff: L^{-1} g is not band-limited, and
    cutting it back to the support of g leaves a residual of the size of
    the discarded tail.
    """
    Nwork = max(nf.J, g.N + 8) if Nwork is None else Nwork
    N = Nwork if N is None else N
    G = g.resize(Nwork)
    x = W1.apply_inverse(G, Nwork)
    y = invert_normal_form(nf, omega, x, divisor_floor, check=False)
    return W2.apply(y, Nwork).resize(N)


def inversion_residual(red, g, h, s0=1.5, Nbig=None):
    """||L h - g||_{s0} with L applied directly (pseudo-spectrally)."""
    Nbig = max(h.N, g.N) + 2 * red.L.Nc if Nbig is None else Nbig
    Lh = red.L.apply(h.resize(Nbig), Nbig)
    return fc.sobolev_norm(Lh - g.resize(Nbig), s0)


# ---------------------------------------------------------------------------
# Newton loop


@dataclass
class PointResult:
    omega: tuple
    u: fc.TorusFunction | None
    residuals: list
    increments: list
    cutoffs: list
    divisors: list
    tame_ratios: list
    kam_iterations: list
    collocation_residual: float | None = None
    converged: bool = False
    excluded: bool = False
    reason: str = ""
    normal_forms: list = field(default_factory=list)
    reductions: list = field(default_factory=list)

    def summary(self):
        return {
            "omega": list(self.omega),
            "converged": self.converged,
            "excluded": self.excluded,
            "reason": self.reason,
            "residuals": self.residuals,
            "increments": self.increments,
            "cutoffs": self.cutoffs,
            "min_divisors": self.divisors,
            "tame_ratios": self.tame_ratios,
            "kam_iterations": self.kam_iterations,
            "collocation_residual": self.collocation_residual,
        }


@dataclass
class SolveResult:
    config: SolverConfig
    points: list
    masks: list

    @property
    def survivors(self):
        return [p for p in self.points if not p.excluded]

    def summary(self):
        return {
            "config": self.config.to_dict(),
            "points": [p.summary() for p in self.points],
            "mask_sizes": [int(np.sum(m)) for m in self.masks],
            "survivors": len(self.survivors),
            "outcome": "ok" if self.survivors else "no parameters survive",
        }


def collocation_check(u, params, plugin, npts=64, seed=0):
    """max |residual| of the equation at random points, by direct series summation."""
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0, 2 * np.pi, (params.d, npts))
    x = rng.uniform(0, 2 * np.pi, npts)
    return float(np.max(np.abs(nm.residual_at_points(u, params, plugin, phi, x))))


def newton_point(config, omega, plugin=None, keep=False):
    """Newton iteration at one frequency; returns a :class:`PointResult`."""
    plugin = config.make_plugin() if plugin is None else plugin
    params = config.params(omega)
    s0, tau, gamma = config.s0_, config.tau_, config.gamma
    rc, sched = config.reg_config(), config.kam_schedule()
    N = scale_schedule(config.N0, 0, config.N_cap)
    u = fc.zeros(config.d, N)
    out = PointResult(params.omega, None, [], [], [], [], [], [])
    for n in range(config.max_iters + 1):
        F = nm.eval_F(u, params, plugin, N)
        r = fc.sobolev_norm(F, s0)
        out.residuals.append(r)
        out.cutoffs.append(N)
        log.info("omega=%s n=%d N=%d |F|=%.3e", params.omega, n, N, r)
        if r <= config.tol:
            out.converged = True
            break
        if n == config.max_iters:
            break
        try:
            red = reduce_at(u, params, plugin, rc, sched)
            Nn = scale_schedule(config.N0, n + 1, config.N_cap)
            h, dmin = _invert_with_divisor(red, F, config)
        except (oa.SmallDivisorError, kam.ReducibilityError, rg.RegularizationError, oa.NoInverseError) as exc:
            out.excluded = True
            out.reason = f"iterate {n}: {type(exc).__name__}: {exc}"
            log.warning("omega=%s excluded: %s", params.omega, out.reason)
            break
        out.divisors.append(dmin)
        out.kam_iterations.append(red.kam.iterations)
        ratio = fc.sobolev_norm(h, s0) * max(gamma, 1e-300) / max(fc.sobolev_norm(F, s0 + 2 * tau + 5), 1e-300)
        out.tame_ratios.append(ratio)
        if ratio > config.tame_cap:
            out.excluded = True
            out.reason = f"iterate {n}: tame ratio {ratio:.3e} above cap"
            break
        if keep:
            out.normal_forms.append(red.normal_form)
            out.reductions.append(red)
        du = nm.TorusFunctionScalar(h)
        N = Nn
        u = u.resize(N) - du.resize(N)
        out.increments.append(fc.sobolev_norm(du, s0))
    out.u = u
    if out.converged:
        out.collocation_residual = collocation_check(u, params, plugin, 64, config.seed)
    return out


def _invert_with_divisor(red, F, config):
    nf = red.normal_form
    Nwork = max(nf.J, F.N + 8)
    x = red.W1.apply_inverse(F.resize(Nwork), Nwork)
    y, dmin = nf.solve(x, red.omega, config.divisor_floor, return_min_divisor=True)
    return red.W2.apply(y, Nwork).resize(F.N), dmin


def nash_moser_run(config, omegas=None, keep=False):
    """Newton loop over a list of frequencies (default: the configured one).

    Frequencies whose inversion fails are excluded and logged; the mask
    after each iterate is recorded.
    """
    omegas = [config.omega] if omegas is None else omegas
    plugin = config.make_plugin()
    pts = [newton_point(config, om, plugin, keep) for om in omegas]
    nmax = max(len(p.residuals) for p in pts)
    masks = []
    for n in range(nmax):
        masks.append(np.array([not (p.excluded and len(p.residuals) - 1 <= n) for p in pts]))
    for k in range(1, len(masks)):
        masks[k] &= masks[k - 1]
    return SolveResult(config, pts, masks)


def superlinear_report(residuals, threshold=1e-3, delta=0.5):
    """Check r_{n+1} <= C r_n^(2-delta) once below ``threshold``; returns the fitted C."""
    r = [x for x in residuals if x > 0]
    pairs = [(a, b) for a, b in zip(r, r[1:]) if a < threshold]
    if not pairs:
        return {"pairs": 0, "C": None, "ok": len(r) >= 2 and r[-1] < r[0]}
    C = max(b / a ** (2 - delta) for a, b in pairs)
    return {"pairs": len(pairs), "C": float(C), "ok": bool(C < 1e3)}


# ---------------------------------------------------------------------------
# linear stability


def evolve_reduced(nf, v, t):
    """exp(-t D) v for an x-coefficient pair v of shape (2, 2K+1)."""
    v = np.asarray(v, complex)
    K = (v.shape[1] - 1) // 2
    J = nf.J
    mu, U = nf.eigen()
    out = np.empty_like(v)
    Jm = min(J, K)
    # inside the box
    inner = np.zeros((2, 2 * J + 1), complex)
    inner[:, J - Jm : J + Jm + 1] = v[:, K - Jm : K + Jm + 1]
    x = U.conj().T @ inner.reshape(-1)
    y = U @ (np.exp(-t * mu.reshape(-1)) * x)
    y = y.reshape(2, 2 * J + 1)
    out[:, K - Jm : K + Jm + 1] = y[:, J - Jm : J + Jm + 1]
    if K > J:
        diag = kam.constant_diagonal(K, nf.m2, nf.m1, nf.m0)
        mask = np.abs(np.arange(-K, K + 1)) > J
        out[:, mask] = v[:, mask] * np.exp(-t * diag[:, mask])
    return out


def slice_norm(v, s):
    """H^s norm of an x-coefficient pair (both components)."""
    v = np.asarray(v)
    K = (v.shape[-1] - 1) // 2
    w = np.maximum(np.abs(np.arange(-K, K + 1)), 1.0) ** (2 * s)
    return float(np.sqrt(np.sum(np.abs(v) ** 2 * w)))


def block_energies(v):
    """|v_{+,j}|^2 + |v_{+,-j}|^2 for j = 0..K."""
    v = np.asarray(v)
    K = (v.shape[-1] - 1) // 2
    a = np.abs(v[0]) ** 2
    return np.array([a[K]] + [a[K + j] + a[K - j] for j in range(1, K + 1)])


def stability_check(nf, W2, h0, omega, T=200 * np.pi, s=1.0, samples=101, eps=None, tol_norm=1e-8,
                    tol_energy=1e-10, raise_on_fail=False):
    """Evolve the reduced flow exactly and pull it back through W2.

    ``h0`` is an x-coefficient pair (2, 2K+1) at time 0.  The reduced
    datum is v0 = W2(0)^{-1} h0 and v(t) = exp(-t D) v0 (with the time
    angle read through the reparametrization in W2).

    Returns a report with the relative drift of ||v(t)||_{H^s}, of the
    block energies, and the oscillation of ||h(t)||_{H^s}/||h0||_{H^s}.
    """
    om = np.atleast_1d(np.asarray(omega, float))
    h0 = np.asarray(h0, complex)
    v0 = W2.slice_apply_inverse(np.zeros(om.size), h0)
    theta0 = W2.time_map(np.zeros(om.size))[0]
    times = np.linspace(0, T, samples)
    n0 = slice_norm(v0, s)
    e0 = block_energies(v0)
    hn0 = slice_norm(h0, s)
    norm_drift = energy_drift = 0.0
    ratios = []
    for t in times:
        vt = evolve_reduced(nf, v0, t)
        if n0 > 0:
            norm_drift = max(norm_drift, abs(slice_norm(vt, s) - n0) / n0)
            energy_drift = max(energy_drift, float(np.max(np.abs(block_energies(vt) - e0)) / max(e0.max(), 1e-300)))

        def vfunc(theta, t0=theta0):
            tau = (np.atleast_1d(theta)[0] - t0) / om[0]
            return evolve_reduced(nf, v0, tau)

        if hn0 > 0:
            ht = W2.slice_apply_at(om * t, vfunc)
            ratios.append(slice_norm(ht, s) / hn0)
    ratios = np.array(ratios) if ratios else np.ones(1)
    osc = float(np.max(np.abs(ratios - 1)))
    rep = {
        "T": float(T),
        "samples": int(samples),
        "norm_drift": float(norm_drift),
        "energy_drift": float(energy_drift),
        "pullback_min": float(ratios.min()),
        "pullback_max": float(ratios.max()),
        "oscillation": osc,
        "max_real_part": nf.max_real_part(),
    }
    if eps:
        hs1 = slice_norm(h0, s + 1)
        rep["fitted_constant"] = osc * hn0 / (eps * hs1) if hs1 > 0 else 0.0
    rep["ok"] = bool(norm_drift <= tol_norm and energy_drift <= tol_energy)
    if raise_on_fail and not rep["ok"]:
        raise StabilityError(f"conservation violated: {rep}")
    return rep


def stability_series(nf, W2, h0, omega, T, s, samples):
    """Rows (t, ||v||, ||h||) for a CSV table."""
    om = np.atleast_1d(np.asarray(omega, float))
    v0 = W2.slice_apply_inverse(np.zeros(om.size), np.asarray(h0, complex))
    theta0 = W2.time_map(np.zeros(om.size))[0]
    rows = []
    for t in np.linspace(0, T, samples):
        vt = evolve_reduced(nf, v0, t)
        ht = W2.slice_apply_at(om * t, lambda th: evolve_reduced(nf, v0, (np.atleast_1d(th)[0] - theta0) / om[0]))
        rows.append((float(t), slice_norm(vt, s), slice_norm(ht, s)))
    return rows


# ---------------------------------------------------------------------------
# measurement over a grid


def reduce_on_grid(config, state_fn=None, J=None, L=None, kam_N0=None, progress=None):
    """Normal forms at every grid frequency for the state given by ``state_fn(omega)``.

    Defaults to the state u = 0.  Returns (tables, failures) with tables a
    dict grid index -> EigenTable.
    """
    grid = config.grid()
    plugin = config.make_plugin()
    rc = config.reg_config()
    if J is not None or L is not None:
        rc = replace(rc, J=J or rc.J, L=L or rc.L)
    sched = config.kam_schedule()
    if kam_N0:
        sched = replace(sched, N0=kam_N0)
    tables, failures = {}, {}
    for i, om in enumerate(grid.points):
        params = config.params(om)
        u = fc.zeros(config.d, config.N0) if state_fn is None else state_fn(om)
        try:
            red = reduce_at(u, params, plugin, rc, sched)
            tables[i] = mk.EigenTable.from_normal_form(red.normal_form)
        except (oa.SmallDivisorError, kam.ReducibilityError, rg.RegularizationError, oa.NoInverseError) as exc:
            failures[i] = f"{type(exc).__name__}: {exc}"
        if progress:
            progress(i, len(grid))
    return tables, failures


def measure_scan(config, eps_list, a=None, iterates=1, J=10, L=10, exclude_l0=False):
    """Excluded fractions for each eps with gamma = eps^a on the configured grid.

    Uses the normal forms of the linearized operator at u = 0 for each
    iterate slot (the scan is per iterate of the mask, the state being the
    zero iterate).  Returns (MeasureReport, details).
    """
    a = config.gamma_exp if a is None else a
    runs, details = [], {}
    tau = config.tau_
    for eps in eps_list:
        cfg = config.with_(eps=eps, gamma_exp=a)
        gamma = eps**a
        grid = cfg.grid()
        base = mk.diophantine_mask(grid, cfg.gamma0, cfg.tau0, max(cfg.kam_N0, 4))
        tables, failures = reduce_on_grid(cfg, J=J, L=L)
        plugin = cfg.make_plugin()
        e = nm.check_hyp2(plugin, cfg.d)
        N_list = [kam.KamSchedule(N0=cfg.kam_N0).N(n) for n in range(iterates)]
        N_list = [min(x, L) for x in N_list]
        sets = mk.build_good_sets([tables] * iterates, grid, gamma, tau, N_list, eps=eps, e=e,
                                  exclude_l0=exclude_l0, base_mask=base)
        viol, fails, tested = mk.verify_cutoff_soundness(tables, grid, gamma, tau, N_list[-1], eps, e)
        runs.append({"eps": eps, "gamma": gamma, "sets": sets})
        details[eps] = {
            "gamma": gamma,
            "reduction_failures": failures,
            "counts": sets.counts,
            "cutoff_violations": viol,
            "O_failures": fails,
            "O_tested": tested,
            "O_skipped_by_cutoff": sets.O_skipped,
            "excluded_fraction": sets.excluded_fraction(),
            "nested": sets.is_nested(),
            "ell_shells": sets.ell_shells,
        }
    return mk.measure_report(runs), details


# ---------------------------------------------------------------------------
# dense oracles at small cutoffs


def window_indices(P, d=1):
    """Basis (s, l, j) with |l|_inf, |j| <= P (d = 1 only)."""
    if d != 1:
        raise NotImplementedError("dense windows are built for d = 1")
    return [(a, l, j) for l in range(-P, P + 1) for a in range(2) for j in range(-P, P + 1)]


def conjugated_window(red, P=3, Nb=16):
    """Matrix of W1^{-1} L W2 on the window |l|, |j| <= P and its block-diagonal prediction.

    L is applied pseudo-spectrally, so the comparison with
    omega.d_phi + D is independent of the block representation.
    Returns (M, predicted, indices).
    """
    idx = window_indices(P, red.L.d)
    n = len(idx)
    om = float(np.atleast_1d(red.omega)[0])
    nf = red.normal_form
    M = np.zeros((n, n), complex)
    pred = np.zeros((n, n), complex)
    W1, W2 = red.W1, red.W2
    for col, (a, l, j) in enumerate(idx):
        c = np.zeros((2, 2 * Nb + 1, 2 * Nb + 1), complex)
        c[a, l + Nb, j + Nb] = 1
        y = W1.apply_inverse(red.L.apply(W2.apply(fc.TorusFunction(c, 1), Nb), Nb), Nb)
        for row, (b, l2, j2) in enumerate(idx):
            M[row, col] = y.coeffs[b, l2 + Nb, j2 + Nb]
            if l2 == l and abs(j2) == abs(j) and max(abs(j), abs(j2)) <= nf.J:
                pred[row, col] = nf.matrix[b, j2 + nf.J, a, j + nf.J] + (1j * om * l if row == col else 0)
    return M, pred, idx


def dense_eigen_match(u, params, plugin, nf, P_big=9, P_inner=3):
    """Distance from each i omega.l + mu (|l|, |j| <= P_inner) to the dense spectrum of L(u).

    The dense matrix is the truncation of L(u) to |l|, |j| <= P_big.
    Returns the largest distance.
    """
    _, lin = nm.assemble_linearized(u, params, plugin, J=P_big, L=2 * P_big)
    ev = np.linalg.eigvals(lin.dense(P_big))
    om = float(np.atleast_1d(params.omega)[0])
    mu = nf.eigenvalues()
    worst = 0.0
    for l in range(-P_inner, P_inner + 1):
        for a in range(2):
            for j in range(-P_inner, P_inner + 1):
                target = 1j * om * l + mu[a, j + nf.J]
                worst = max(worst, float(np.min(np.abs(ev - target))))
    return worst
