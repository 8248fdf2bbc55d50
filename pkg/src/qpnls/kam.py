"""Quadratic block diagonalization of the regularized operator.

The operator omega.d_phi + D + R, with D time independent and
block diagonal over the pairs (sigma, {j, -j}), is conjugated by
exp(Psi) where Psi solves the homological equation

    [omega.d_phi + D, Psi] + Pi_N R = [R],

[R] being the time average of R restricted to the diagonal blocks.
Each step replaces D by D + [R] and R by a remainder quadratic in R.  The
blocks are anti-Hermitian 2x2 matrices (1x1 at j = 0); they are
diagonalized in closed form and the homological equation is solved by
elementwise division in the eigenbasis.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import fourier_core as fc
from . import operator_algebra as oa


class ReducibilityError(RuntimeError):
    """The iteration stagnated or a transformation could not be built."""


class QuadraticDecayWarning(UserWarning):
    """A step reduced the remainder less than a quadratic scheme should."""


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class KamSchedule:
    """Cutoffs N_nu = floor(N0^(chi^nu)) and stopping rules."""

    N0: int = 4
    chi: float = 1.5
    tau: float = 3.0
    gamma: float = 1e-2
    max_iters: int = 12
    stop_tol: float = 1e-13
    divisor_floor: float = 1e-12
    series_tol: float = 1e-17
    series_cap: int = 30
    s0: float = 1.5

    def __post_init__(self):
        if self.N0 < 2:
            raise ValueError("N0 must be at least 2")
        if self.chi <= 1:
            raise ValueError("chi must exceed 1")

    @property
    def alpha_exp(self):
        return 7 * self.tau + 3

    @property
    def beta_exp(self):
        return 7 * self.tau + 5

    def N(self, nu):
        return int(math.floor(self.N0 ** (self.chi**nu) + 1e-9))


# ---------------------------------------------------------------------------
# block structure


def _block_ids(J):
    """Block label of each basis index (sigma, j): same label iff same (sigma, |j|)."""
    j = np.abs(np.arange(-J, J + 1))
    return np.concatenate([j, j + J + 1])


def _sgn(a):
    return 1.0 if a == 0 else -1.0


def constant_diagonal(J, m2, m1, m0):
    """Diagonal of i (m2 d_xx + m1 d_x + m0) on pairs, shape (2, 2J+1)."""
    j = np.arange(-J, J + 1, dtype=float)
    mu1 = complex(m1).imag
    return np.stack([1j * (m0 - m2 * j**2) - 1j * mu1 * j, -1j * (m0 - m2 * j**2) - 1j * mu1 * j])


def eigenvalues_of_block(block, sigma, j):
    """Eigenvalues (mu_{sigma,j}, mu_{sigma,-j}) of an anti-Hermitian block.

    ``block`` is the 2x2 matrix on the basis (j, -j) (or 1x1 for j = 0).
    Each eigenvalue is attached to the index on which its eigenvector has
    the larger weight, so the labels follow the unperturbed ones.
    """
    B = np.atleast_2d(np.asarray(block, complex))
    if B.shape == (1, 1) or j == 0:
        mu = complex(1j * (B[0, 0] / 1j).real)
        return mu, mu
    H = B / (1j * sigma)
    lam, _ = oa.hermitian_eig2(0.5 * (H + H.conj().T))
    hi, lo = (sigma * 1j * lam[0], sigma * 1j * lam[1])
    if H[0, 0].real >= H[1, 1].real:
        return hi, lo
    return lo, hi


def corrections_of_block(block, sigma, j, m2, m1, m0):
    """r = block/(i sigma) minus the constant-coefficient diagonal, on the basis (j, -j)."""
    B = np.atleast_2d(np.asarray(block, complex))
    H = B / (1j * sigma)
    mu1 = complex(m1).imag
    base = m0 - m2 * j * j
    if B.shape == (1, 1):
        return H - base
    return H - np.diag([base - sigma * mu1 * j, base + sigma * mu1 * j])


def formula_eigenvalue(block, sigma, j, m2, m1, m0):
    """Closed-form eigenvalue i sigma (mean + |a_j| b_j / 2) with a_j = j (1 at j = 0).

    mean = m0 - m2 j^2 + (r_j^j + r_{-j}^{-j})/2 and
    b_j = sqrt((-2 sigma mu1 + (r_j^j - r_{-j}^{-j})/a_j)^2 + 4 |r_j^{-j}|^2 / a_j^2),
    with m1 = i mu1.  This is the larger of the two eigenvalues of
    block/(i sigma), times i sigma.
    """
    r = corrections_of_block(block, sigma, j, m2, m1, m0)
    if r.shape == (1, 1):
        return complex(1j * sigma * (m0 + r[0, 0].real))
    a = j if j != 0 else 1
    mu1 = complex(m1).imag
    b = math.sqrt((-2 * sigma * mu1 + (r[0, 0] - r[1, 1]).real / a) ** 2 + 4 * abs(r[0, 1]) ** 2 / a**2)
    mean = m0 - m2 * j * j + 0.5 * (r[0, 0] + r[1, 1]).real
    return complex(1j * sigma * (mean + 0.5 * abs(a) * b))


@dataclass
class NormalForm:
    """Time-independent block-diagonal operator D on pairs.

    ``matrix`` has shape (2, 2J+1, 2, 2J+1) and is nonzero only on the
    blocks (sigma, {j, -j}).  Outside |j| <= J the operator is the
    constant-coefficient diagonal.
    """

    matrix: np.ndarray
    m2: float
    m1: complex
    m0: float
    d: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def J(self):
        return (self.matrix.shape[1] - 1) // 2

    @property
    def n(self):
        return 2 * (2 * self.J + 1)

    @classmethod
    def unperturbed(cls, J, m2=1.0, m1=0.0, m0=1.0, d=1):
        D = np.diag(constant_diagonal(J, m2, m1, m0).reshape(-1)).reshape(2, 2 * J + 1, 2, 2 * J + 1)
        return cls(D, m2, complex(m1), m0, d)

    def block(self, sigma, j):
        """Omega_{sigma,j} on the basis (j, -j) (1x1 for j = 0)."""
        a = 0 if sigma > 0 else 1
        J = self.J
        idx = [J + j] if j == 0 else [J + j, J - j]
        return self.matrix[a][np.ix_(idx, [a], idx)][:, 0, :]

    def as_operator(self, L=0):
        data = np.zeros((2 * L + 1,) * self.d + self.matrix.shape, complex)
        data[(L,) * self.d] = self.matrix
        return oa.BlockOperator(data, self.d)

    def eigen(self):
        """Eigenvalues mu (2, 2J+1) and the block unitary U (n x n), columns labelled like the basis."""
        if "eigen" in self.meta:
            return self.meta["eigen"]
        J = self.J
        n = self.n
        U = np.zeros((n, n), complex)
        mu = np.zeros((2, 2 * J + 1), complex)
        M = self.matrix.reshape(n, n)
        for a in range(2):
            sg = _sgn(a)
            base = a * (2 * J + 1)
            p0 = base + J
            mu[a, J] = 1j * (M[p0, p0] / (1j * sg)).real * sg
            U[p0, p0] = 1.0
            if J == 0:
                continue
            js = np.arange(1, J + 1)
            ip, im = base + J + js, base + J - js
            H = np.empty((J, 2, 2), complex)
            H[:, 0, 0] = M[ip, ip]
            H[:, 0, 1] = M[ip, im]
            H[:, 1, 0] = M[im, ip]
            H[:, 1, 1] = M[im, im]
            H = H / (1j * sg)
            H = 0.5 * (H + np.conj(np.swapaxes(H, -1, -2)))
            lam, V = oa.hermitian_eig2(H)
            swap = H[:, 0, 0].real < H[:, 1, 1].real
            lj = np.where(swap, lam[:, 1], lam[:, 0])
            lmj = np.where(swap, lam[:, 0], lam[:, 1])
            cj = np.where(swap[:, None], V[:, :, 1], V[:, :, 0])
            cmj = np.where(swap[:, None], V[:, :, 0], V[:, :, 1])
            mu[a, J + js] = 1j * sg * lj
            mu[a, J - js] = 1j * sg * lmj
            U[ip, ip] = cj[:, 0]
            U[im, ip] = cj[:, 1]
            U[ip, im] = cmj[:, 0]
            U[im, im] = cmj[:, 1]
        self.meta["eigen"] = (mu, U)
        return mu, U

    def eigenvalues(self):
        return self.eigen()[0]

    def max_real_part(self):
        mu = self.eigenvalues()
        return float(np.max(np.abs(mu.real) / (1 + np.abs(mu))))

    def corrections(self):
        """r blocks: arrays (2, J+1, 2, 2); entry [a, j] is r on basis (j, -j)."""
        J = self.J
        out = np.zeros((2, J + 1, 2, 2), complex)
        for a in range(2):
            sg = _sgn(a)
            for j in range(J + 1):
                r = corrections_of_block(self.block(sg, j), sg, j, self.m2, self.m1, self.m0)
                if j == 0:
                    out[a, 0, 0, 0] = r[0, 0]
                else:
                    out[a, j] = r
        return out

    def correction_decay(self, eps):
        """max over blocks at each j >= 0 of <j> |r_j| / eps."""
        r = self.corrections()
        mag = np.max(np.abs(r), axis=(0, 2, 3))
        j = np.arange(self.J + 1)
        return np.maximum(j, 1) * mag / eps if eps > 0 else np.zeros_like(mag)

    def solve(self, G, omega, divisor_floor=1e-12, return_min_divisor=False):
        """Solve (omega.d_phi + D) H = G for a two-component function G.

        Blockwise closed-form inversion in the eigenbasis; modes |j| > J
        use the constant-coefficient diagonal.

        Raises
        ------
        SmallDivisorError
            If some |i omega.l + mu| falls below ``divisor_floor``; the
            message names (l, sigma, j).
        """
        d, N = G.d, G.N
        J = self.J
        mu, U = self.eigen()
        om = np.atleast_1d(np.asarray(omega, float))
        Jb = max(J, N)
        wl = fc.omega_dot(om, d, Jb)[..., 0]
        c = np.stack([fc._resize_array(G.coeffs[k], N, Jb) for k in range(2)])  # (2, time..., 2Jb+1)
        c = np.moveaxis(c, 0, d)  # time..., 2, 2Jb+1
        jj = np.arange(-Jb, Jb + 1)
        inbox = np.abs(jj) <= J
        x = c[..., inbox].reshape(c.shape[:d] + (self.n,))
        xt = np.einsum("ab,...b->...a", U.conj().T, x)
        div = 1j * wl[..., None] + mu.reshape(-1)
        outer = constant_diagonal(Jb, self.m2, self.m1, self.m0)[:, ~inbox]
        div_out = 1j * wl[..., None, None] + outer
        mins = [np.min(np.abs(div)) if div.size else np.inf]
        if (~inbox).any():
            mins.append(np.min(np.abs(div_out)))
        dmin = float(min(mins))
        if dmin < divisor_floor:
            k = np.unravel_index(np.argmin(np.abs(div)), div.shape)
            ell = tuple(int(g) for g in (np.array(k[:-1]) - N)) if d else ()
            a, j = divmod(int(k[-1]), 2 * J + 1)
            raise oa.SmallDivisorError(
                f"first Melnikov divisor {dmin:.3e} below floor at l={ell}, sigma={'+' if a == 0 else '-'}, j={j - J}",
                gap=dmin, index=(ell, 1 if a == 0 else -1, j - J),
            )
        ht = xt / div
        h = np.einsum("ab,...b->...a", U, ht).reshape(c.shape[:d] + (2, 2 * J + 1))
        out = np.zeros_like(c)
        out[..., inbox] = h
        out[..., ~inbox] = c[..., ~inbox] / div_out
        out = np.moveaxis(out, d, 0)
        res = fc.TorusFunction(np.stack([fc._resize_array(out[k], Jb, N) for k in range(2)]), d, G.reality)
        return (res, dmin) if return_min_divisor else res

    def apply(self, H, omega):
        """(omega.d_phi + D) H."""
        D = self.as_operator()
        return oa.apply_operator(D, H, outside="zero") + fc.derivative(H, "omega", omega) + _outside_diag(self, H)


def _outside_diag(nf, H):
    d, N = H.d, H.N
    J = nf.J
    if N <= J:
        return H * 0.0
    diag = constant_diagonal(N, nf.m2, nf.m1, nf.m0)
    jj = np.arange(-N, N + 1)
    mask = np.abs(jj) > J
    out = np.zeros_like(H.coeffs)
    for k in range(2):
        out[k][..., mask] = H.coeffs[k][..., mask] * diag[k][mask]
    return fc.TorusFunction(out, d, H.reality)


# ---------------------------------------------------------------------------
# homological equation


def kernel_mask(J):
    """(n, n) boolean: entries of the same (sigma, {j, -j}) block."""
    b = _block_ids(J)
    return b[:, None] == b[None, :]


def block_average(R):
    """[R]: the l = 0 symbol restricted to the diagonal blocks."""
    J, d = R.J, R.d
    K = kernel_mask(J).reshape(2, 2 * J + 1, 2, 2 * J + 1)
    data = np.zeros_like(R.data)
    c = (R.L,) * d
    data[c] = np.where(K, R.data[c], 0)
    return oa.BlockOperator(data, d)


def homological_residual(Psi, D, R, N, omega):
    """|[omega.d_phi + D, Psi] + Pi_N R - [R]|_max relative to |R|_max."""
    Dop = D.as_operator(0)
    comm = oa.compose(Dop, Psi, Psi.L) - oa.compose(Psi, Dop, Psi.L) + oa.time_derivative_symbol(Psi, omega)
    res = comm + oa.smooth_truncate(R, N) - block_average(R)
    return res.max_abs() / max(R.max_abs(), 1e-300)


def solve_homological(D, R, N, omega, divisor_floor=1e-12, return_info=False):
    """Generator Psi of one step, zero on the kernel and on |l| > N.

    In the eigenbasis of D the equation is elementwise:
    Psi_pq = -(R - [R])_pq / (i omega.l + mu_p - mu_q).

    Raises
    ------
    SmallDivisorError
        If a needed divisor is below ``divisor_floor``; names
        (sigma, j, sigma', j', l).
    """
    J, d, L = R.J, R.d, R.L
    if D.J != J:
        raise ValueError("normal form and remainder boxes differ")
    n = D.n
    mu, U = D.eigen()
    muf = mu.reshape(-1)
    wl = oa._omega_dot_time(omega, d, L)
    tw = oa._time_weight(d, L) if d else np.zeros(())
    Rf = R.data.reshape(wl.shape + (n, n))
    Rt = U.conj().T @ Rf @ U
    div = 1j * wl[..., None, None] + muf[:, None] - muf[None, :]
    allowed = np.broadcast_to((tw <= N)[..., None, None], div.shape).copy()
    K = kernel_mask(J)
    zero = (tw == 0)
    allowed[zero] &= ~K
    scale = max(float(np.max(np.abs(Rt), initial=0.0)), 1e-300)
    needed = allowed & (np.abs(Rt) > 1e-15 * scale)
    info = {"min_divisor": np.inf, "min_divisor_l0": np.inf, "min_divisor_lnz": np.inf, "argmin": None}
    if needed.any():
        ad = np.where(needed, np.abs(div), np.inf)
        k = np.unravel_index(np.argmin(ad), ad.shape)
        info["min_divisor"] = float(ad[k])
        ell = tuple(int(g) - L for g in k[:-2])
        p, q = divmod(k[-2], 2 * J + 1), divmod(k[-1], 2 * J + 1)
        info["argmin"] = (("+" if p[0] == 0 else "-"), p[1] - J, ("+" if q[0] == 0 else "-"), q[1] - J, ell)
        l0 = ad[zero] if d else ad
        info["min_divisor_l0"] = float(np.min(l0))
        if d:
            info["min_divisor_lnz"] = float(np.min(ad[~zero], initial=np.inf))
        if info["min_divisor"] < divisor_floor:
            raise oa.SmallDivisorError(
                f"divisor {info['min_divisor']:.3e} below floor at (sigma,j,sigma',j',l)={info['argmin']}",
                gap=info["min_divisor"], index=info["argmin"],
            )
    # entries of R at roundoff level are dropped: their divisors may vanish
    Pt = np.zeros_like(Rt)
    Pt[needed] = -Rt[needed] / div[needed]
    P = U @ Pt @ U.conj().T
    Psi = oa.BlockOperator(P.reshape(R.data.shape), d)
    return (Psi, info) if return_info else Psi


# ---------------------------------------------------------------------------
# iteration


@dataclass
class KamState:
    nu: int
    D: NormalForm
    R: oa.BlockOperator
    factors: list = field(default_factory=list)
    history: list = field(default_factory=list)


def _series(first, Psi, L, tol, cap, s0, ref, start):
    """Sum of t_m for m >= start, where t_m = ad(t_{m-1}) / m and t_{start-1} = first."""
    total = None
    t = first
    for m in range(start, cap + 1):
        t = oa.commutator(t, Psi, L) * (1.0 / m)
        total = t if total is None else total + t
        if oa.decay_norm(t, s0) < tol * ref:
            break
    return total


def kam_step(state, schedule, omega):
    """One conjugation by exp(Psi).

    New blocks D + [R]; new remainder
    Pi_N^perp R + sum_{m>=1} ad^m(R)/m! + sum_{m>=2} ad^{m-1}([R] - Pi_N R)/m!,
    with ad(Y) = [Y, Psi], then projected onto the Hamiltonian class.
    """
    D, R = state.D, state.R
    L = R.L
    N = min(schedule.N(state.nu), max(L, 1))
    Psi, info = solve_homological(D, R, N, omega, schedule.divisor_floor, return_info=True)
    hom_res = homological_residual(Psi, D, R, N, omega)
    Phi = oa.exp_operator(Psi, series_tol=schedule.series_tol, max_terms=schedule.series_cap, s0=schedule.s0)
    s0 = schedule.s0
    ref = max(oa.decay_norm(R, s0), 1e-300)
    avg = block_average(R)
    low = oa.smooth_truncate(R, N)
    new_R = oa.smooth_truncate(R, N, complement=True)
    s1 = _series(R, Psi, L, schedule.series_tol, schedule.series_cap, s0, ref, 1)
    new_R = new_R + s1
    s2 = _series(avg - low, Psi, L, schedule.series_tol, schedule.series_cap, s0, ref, 2)
    if s2 is not None:
        new_R = new_R + s2
    projected = oa.hamiltonian_part(new_R)
    removed = (projected - new_R).max_abs()
    c = (L,) * R.d
    newD_op = oa.hamiltonian_part(oa.BlockOperator((D.matrix + avg.data[c])[(None,) * R.d], R.d))
    newD = NormalForm(newD_op.data[(0,) * R.d], D.m2, D.m1, D.m0, D.d)
    mu_old = D.eigenvalues()
    mu_new = newD.eigenvalues()
    rec = {
        "nu": state.nu,
        "N": N,
        "R_s0": oa.decay_norm(R, s0),
        "R_s0_beta": oa.decay_norm(R, s0 + schedule.beta_exp),
        "R_next_s0": oa.decay_norm(projected, s0),
        "psi_s0": oa.decay_norm(Psi, s0),
        "max_re_mu": newD.max_real_part(),
        "eig_drift": float(np.max(np.abs(mu_new - mu_old))),
        "diag_channel_R": max(oa.decay_norm(oa.channel(R, 0, 0), s0), oa.decay_norm(oa.channel(R, 1, 1), s0)),
        "homological_residual": hom_res,
        "hamiltonian_projection": removed,
        "exp_terms": Phi.meta.get("terms"),
        "mask": 1,
        **{k: v for k, v in info.items() if k != "argmin"},
        "argmin": str(info["argmin"]),
    }
    if rec["R_s0"] < 1 and rec["R_next_s0"] > rec["R_s0"] ** 1.2 and rec["R_next_s0"] > schedule.stop_tol:
        warnings.warn(
            f"remainder {rec['R_next_s0']:.2e} not below |R|^1.2 = {rec['R_s0'] ** 1.2:.2e}",
            QuadraticDecayWarning, stacklevel=2,
        )
    Phi.name = f"Phi_{state.nu}"
    return KamState(state.nu + 1, newD, projected, state.factors + [Phi], state.history + [rec])


@dataclass
class KamResult:
    normal_form: NormalForm
    Phi: oa.Chain
    history: list
    R_final: oa.BlockOperator
    initial_projection: float = 0.0

    @property
    def iterations(self):
        return len(self.history)


def initial_state(reg, J=None, L=None):
    """Normal form and remainder at the start of the iteration.

    The remainder is projected onto the Hamiltonian class; the size of
    the removed part is returned as well.
    """
    J = reg.R.J if J is None else J
    L = reg.R.L if L is None else L
    R0 = reg.remainder_block(J, L)
    R0h = oa.hamiltonian_part(R0)
    D0 = NormalForm.unperturbed(J, reg.m2, reg.m1, reg.m0, reg.L7.d)
    return KamState(0, D0, R0h), (R0h - R0).max_abs()


def reduce(reg, schedule=KamSchedule(), J=None, L=None, state=None):
    """Iterate :func:`kam_step` until |R|_{s0} <= stop_tol.

    Parameters
    ----------
    reg : RegularizationOutput
        Supplies m2, m1, m0 and the remainder of the regularized operator.
    schedule : KamSchedule
    state : KamState, optional
        Starting point (for warm starts); built from ``reg`` otherwise.

    Returns
    -------
    KamResult

    Raises
    ------
    ReducibilityError
        If the remainder fails to decrease over two consecutive steps.
    """
    removed = 0.0
    if state is None:
        state, removed = initial_state(reg, J, L)
    omega = reg.omega
    s0 = schedule.s0
    sizes = [oa.decay_norm(state.R, s0)]
    while sizes[-1] > schedule.stop_tol and state.nu < schedule.max_iters:
        try:
            state = kam_step(state, schedule, omega)
        except oa.NoInverseError as exc:
            raise ReducibilityError(f"omega={omega}: {exc}") from exc
        sizes.append(oa.decay_norm(state.R, s0))
        if len(sizes) >= 3 and sizes[-1] >= sizes[-2] >= sizes[-3]:
            raise ReducibilityError(f"omega={omega}: remainder stagnates at {sizes[-1]:.2e}")
    chain = oa.Chain(state.factors, name="Phi_inf")
    return KamResult(state.D, chain, state.history, state.R, removed)


def check_decay_schedule(history, tau, schedule=None, threshold=None):
    """Fit log |R_nu| against log N_{nu-1} and check superlinear decay.

    Returns a report with the fitted exponent (minus the slope), the
    per-step ratios log|R_{nu+1}| / log|R_nu| and whether the exponent
    reaches ``threshold`` (default tau + 1).
    """
    threshold = tau + 1 if threshold is None else threshold
    if len(history) < 2:
        return {"status": "insufficient data", "iterates": len(history)}
    Ns = np.array([h["N"] for h in history], float)
    R = np.array([h["R_next_s0"] for h in history], float)
    keep = R > 0
    rep = {"status": "ok", "iterates": len(history), "threshold": threshold}
    if keep.sum() >= 2 and len(set(Ns[keep])) >= 2:
        slope = np.polyfit(np.log(Ns[keep]), np.log(R[keep]), 1)[0]
        rep["exponent"] = float(-slope)
    else:
        rep["exponent"] = float("inf") if keep.sum() < len(R) else float("nan")
    rep["meets_threshold"] = bool(rep["exponent"] >= threshold)
    before = np.array([history[0]["R_s0"]] + list(R[:-1]))
    pairs = [(a, b) for a, b in zip(before, R) if 0 < a < 1e-3]
    rep["quadratic_pairs"] = [(float(a), float(b)) for a, b in pairs]
    rep["quadratic_ok"] = bool(all(b <= a**1.5 for a, b in pairs))
    return rep
