"""Toeplitz-in-time block operators and their calculus.

An operator acting on pairs W = (W_+, W_-) = (u, conj u) of functions on
T^d x T is stored through its time symbol

    (A W)_s(p, j) = sum_{p', s', j'} A[p - p'][s, j, s', j'] W_{s'}(p', j')

with ``A[l]`` an array of shape (2, 2J+1, 2, 2J+1) for every time
frequency |l| <= L.  Component index 0 is s = +1, index 1 is s = -1.  The
time derivative omega.d_phi is not Toeplitz and is always carried
separately; its commutator with A has symbol i omega.l A[l].

Real-linear operators on u satisfy the reality relation

    A[l][-s, j, -s', j'] = conj(A[-l][s, -j, s', -j']).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import fourier_core as fc


class SmallDivisorError(ArithmeticError):
    """A divisor used by a linear solve fell below its floor."""

    def __init__(self, message, gap=None, index=None):
        super().__init__(message)
        self.gap = gap
        self.index = index


class NoInverseError(ValueError):
    """The smallness gate of the exponential map is violated."""


# ---------------------------------------------------------------------------
# storage


def _time_shape(d, L):
    return (2 * L + 1,) * d


@dataclass(frozen=True)
class BlockOperator:
    """Time symbol of a Toeplitz operator on pairs.

    Parameters
    ----------
    data : ndarray
        Shape ``(2L+1,)*d + (2, 2J+1, 2, 2J+1)``.
    d : int
        Number of time angles.
    """

    data: np.ndarray
    d: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        a = np.asarray(self.data, dtype=complex)
        if a.ndim != self.d + 4 or a.shape[-4] != 2 or a.shape[-2] != 2:
            raise ValueError("bad block operator shape")
        object.__setattr__(self, "data", a)

    @property
    def J(self):
        return (self.data.shape[-1] - 1) // 2

    @property
    def L(self):
        return (self.data.shape[0] - 1) // 2 if self.d else 0

    @property
    def n(self):
        return 2 * (2 * self.J + 1)

    @property
    def flat(self):
        """Symbols as an array (n_l, n, n) with rows indexed by (s, j)."""
        nl = (2 * self.L + 1) ** self.d
        return self.data.reshape(nl, self.n, self.n)

    @classmethod
    def from_flat(cls, flat, d, J, L):
        return cls(flat.reshape(_time_shape(d, L) + (2, 2 * J + 1, 2, 2 * J + 1)), d)

    def at(self, ell):
        """The (2, 2J+1, 2, 2J+1) symbol at time frequency ``ell``."""
        ell = np.atleast_1d(ell)
        if np.max(np.abs(ell), initial=0) > self.L:
            return np.zeros((2, 2 * self.J + 1, 2, 2 * self.J + 1), complex)
        return self.data[tuple(int(k) + self.L for k in ell)]

    def entry(self, s, j, s2, j2, ell):
        a, b = (0 if s > 0 else 1), (0 if s2 > 0 else 1)
        return self.at(ell)[a, j + self.J, b, j2 + self.J]

    # arithmetic
    def _align(self, other):
        if other.d != self.d:
            raise ValueError("dimension mismatch")
        J, L = max(self.J, other.J), max(self.L, other.L)
        return self.resize(J, L).data, other.resize(J, L).data

    def __add__(self, other):
        a, b = self._align(other)
        return BlockOperator(a + b, self.d)

    def __sub__(self, other):
        a, b = self._align(other)
        return BlockOperator(a - b, self.d)

    def __neg__(self):
        return BlockOperator(-self.data, self.d)

    def __mul__(self, k):
        return BlockOperator(self.data * k, self.d)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return compose(self, other)

    def resize(self, J=None, L=None):
        """Galerkin restriction or zero padding in space (J) and time (L)."""
        J = self.J if J is None else J
        L = self.L if L is None else L
        a = self.data
        if L != self.L and self.d:
            a = _resize_axes(a, range(self.d), self.L, L)
        if J != self.J:
            a = _resize_axes(a, (self.d + 1, self.d + 3), self.J, J)
        return BlockOperator(a, self.d)

    def decay_norm(self, s):
        return decay_norm(self, s)

    def max_abs(self):
        return float(np.max(np.abs(self.data))) if self.data.size else 0.0

    def apply(self, W, N=None, outside="zero"):
        return apply_operator(self, W, N=N, outside=outside)


def _resize_axes(a, axes, old, new):
    for ax in axes:
        if new < old:
            cut = old - new
            a = np.take(a, np.arange(cut, cut + 2 * new + 1), axis=ax)
        elif new > old:
            pad = [(0, 0)] * a.ndim
            pad[ax] = (new - old, new - old)
            a = np.pad(a, pad)
    return a


def zero_operator(d, J, L):
    return BlockOperator(np.zeros(_time_shape(d, L) + (2, 2 * J + 1, 2, 2 * J + 1), complex), d)


def identity(d, J, L=0):
    A = np.zeros(_time_shape(d, L) + (2, 2 * J + 1, 2, 2 * J + 1), complex)
    eye = np.eye(2 * (2 * J + 1)).reshape(2, 2 * J + 1, 2, 2 * J + 1)
    A[(L,) * d] = eye
    return BlockOperator(A, d)


def diagonal_operator(diag, d, L=0):
    """Time-independent operator with given diagonal, shape (2, 2J+1)."""
    diag = np.asarray(diag, complex)
    J = (diag.shape[1] - 1) // 2
    A = np.zeros(_time_shape(d, L) + (2, 2 * J + 1, 2, 2 * J + 1), complex)
    A[(L,) * d] = np.diag(diag.reshape(-1)).reshape(2, 2 * J + 1, 2, 2 * J + 1)
    return BlockOperator(A, d)


# ---------------------------------------------------------------------------
# construction from functions


def _stripe_symbol(a, J, L):
    """Array (time cube L, 2J+1, 2J+1) with entry a_{l, j-j'}."""
    d, N = a.d, a.N
    c = a.c
    out = np.zeros(_time_shape(d, L) + (2 * J + 1, 2 * J + 1), complex)
    jj = np.arange(-J, J + 1)
    h = jj[:, None] - jj[None, :]
    ok = np.abs(h) <= N
    Lm = min(L, N)
    src = tuple(slice(N - Lm, N + Lm + 1) for _ in range(d))
    dst = tuple(slice(L - Lm, L + Lm + 1) for _ in range(d))
    sub = c[src]
    vals = np.zeros(sub.shape[:-1] + h.shape, complex)
    vals[..., ok] = sub[..., h[ok] + N]
    out[dst] = vals
    return out


def multiplication_operator(pp=None, pm=None, mp=None, mm=None, J=None, L=None):
    """Operator whose (s, s') channel is multiplication by the given function.

    Missing channels are zero.  Cutoffs default to the largest function
    cutoff.
    """
    funcs = [f for f in (pp, pm, mp, mm) if f is not None]
    if not funcs:
        raise ValueError("at least one channel needed")
    d = funcs[0].d
    Nmax = max(f.N for f in funcs)
    J = Nmax if J is None else J
    L = Nmax if L is None else L
    A = np.zeros(_time_shape(d, L) + (2, 2 * J + 1, 2, 2 * J + 1), complex)
    for (a, b), f in zip(((0, 0), (0, 1), (1, 0), (1, 1)), (pp, pm, mp, mm)):
        if f is not None:
            A[..., a, :, b, :] = _stripe_symbol(f, J, L)
    return BlockOperator(A, d)


def from_multiplication(a, placement="diagonal", J=None, L=None):
    """Real-linear multiplication u -> a u (diagonal) or u -> a conj(u) (antidiagonal).

    The s = -1 row carries the conjugate function, so ``a = 1`` gives the
    identity and the decay norm equals the Sobolev norm of ``a``.
    """
    if placement == "diagonal":
        return multiplication_operator(pp=a, mm=a.conj(), J=J, L=L)
    if placement == "antidiagonal":
        return multiplication_operator(pm=a, mp=a.conj(), J=J, L=L)
    raise ValueError("placement must be 'diagonal' or 'antidiagonal'")


def space_fourier_multiplier(symbol_plus, symbol_minus, d, L=0):
    """Diagonal time-independent operator from per-j symbols (length 2J+1)."""
    return diagonal_operator(np.stack([symbol_plus, symbol_minus]), d, L)


# ---------------------------------------------------------------------------
# norms


def decay_norm(A, s):
    """Off-diagonal decay norm, sup over the four (s, s') channels.

    For each time frequency l and space offset h = j - j' the stripe
    supremum of |A| is weighted by max(|l|, |h|, 1)^s.
    """
    s = min(float(s), fc.S_CAP)
    J, L, d = A.J, A.L, A.d
    tw = _time_weight(d, L) if d else np.zeros(())
    best = 0.0
    for a in range(2):
        for b in range(2):
            blk = A.data[..., a, :, b, :]
            total = 0.0
            for h in range(-2 * J, 2 * J + 1):
                diag = np.diagonal(blk, offset=-h, axis1=-2, axis2=-1)
                sup2 = np.max(np.abs(diag) ** 2, axis=-1)
                w = np.maximum(np.maximum(tw, abs(h)), 1.0) ** (2 * s)
                total += float(np.sum(sup2 * w))
            best = max(best, np.sqrt(total))
    return best


@lru_cache(maxsize=64)
def _time_weight(d, L):
    k = fc.freqs(L)
    grids = np.meshgrid(*([k] * d), indexing="ij")
    out = np.zeros(grids[0].shape)
    for g in grids:
        out = np.maximum(out, np.abs(g))
    return out


def channel(A, s, s2):
    """Copy of ``A`` with all but the (s, s2) channel zeroed."""
    a, b = (0 if s > 0 else 1), (0 if s2 > 0 else 1)
    out = np.zeros_like(A.data)
    out[..., a, :, b, :] = A.data[..., a, :, b, :]
    return BlockOperator(out, A.d)


def diagonal_channels(A):
    out = A.data.copy()
    out[..., 0, :, 1, :] = 0
    out[..., 1, :, 0, :] = 0
    return BlockOperator(out, A.d)


def d_weighted(A):
    """The operator diag(<j>) A (rows weighted by max(|j|, 1))."""
    w = np.maximum(np.abs(np.arange(-A.J, A.J + 1)), 1)
    return BlockOperator(A.data * w[:, None, None], A.d)


# ---------------------------------------------------------------------------
# composition and truncation


def _fft_len(n):
    from scipy.fft import next_fast_len

    return next_fast_len(n)


def compose(A, B, L=None):
    """Matrix product AB truncated to time cutoff ``L`` (default max(L_A, L_B)).

    Time symbols are convolved exactly through a zero-padded FFT; the
    space index is an exact Galerkin product on the common box.
    """
    if A.d != B.d:
        raise ValueError("dimension mismatch")
    d = A.d
    J = max(A.J, B.J)
    A, B = A.resize(J), B.resize(J)
    L = max(A.L, B.L) if L is None else L
    n = A.n
    if d == 0:
        return BlockOperator((A.flat[0] @ B.flat[0]).reshape(A.data.shape), 0)
    P = _fft_len(2 * (A.L + B.L) + 1)
    axes = tuple(range(d))
    fa = _to_fft(A.data.reshape(_time_shape(d, A.L) + (n, n)), A.L, P, d)
    fb = _to_fft(B.data.reshape(_time_shape(d, B.L) + (n, n)), B.L, P, d)
    Fa = np.fft.fftn(fa, axes=axes)
    Fb = np.fft.fftn(fb, axes=axes)
    Fc = np.matmul(Fa, Fb)
    c = np.fft.ifftn(Fc, axes=axes)
    idx = np.ix_(*([np.arange(-L, L + 1) % P] * d))
    out = c[idx]
    return BlockOperator(out.reshape(_time_shape(d, L) + (2, 2 * J + 1, 2, 2 * J + 1)), d)


def _to_fft(a, L, P, d):
    big = np.zeros((P,) * d + a.shape[d:], complex)
    idx = np.ix_(*([np.arange(-L, L + 1) % P] * d))
    big[idx] = a
    return big


def commutator(A, B, L=None):
    return compose(A, B, L) - compose(B, A, L)


def time_derivative_symbol(A, omega):
    """Symbol of [omega.d_phi, A], i.e. i omega.l A[l]."""
    wl = _omega_dot_time(omega, A.d, A.L)
    return BlockOperator(A.data * (1j * wl)[(...,) + (None,) * 4], A.d)


def _omega_dot_time(omega, d, L):
    om = np.atleast_1d(np.asarray(omega, float))
    k = fc.freqs(L)
    grids = np.meshgrid(*([k] * d), indexing="ij")
    return sum(om[i] * grids[i] for i in range(d))


def smooth_truncate(A, N, complement=False):
    """Keep time frequencies |l| <= N (or their complement)."""
    if N < 0:
        raise ValueError("N must be >= 0")
    if A.d == 0:
        return A if not complement else A * 0
    keep = _time_weight(A.d, A.L) <= N
    mask = keep if not complement else ~keep
    return BlockOperator(A.data * mask[(...,) + (None,) * 4], A.d)


def interpolation_ratio(A, B, s, s0):
    """|AB|_s / (|A|_s |B|_s0 + |A|_s0 |B|_s); should stay bounded."""
    num = decay_norm(compose(A, B), s)
    den = decay_norm(A, s) * decay_norm(B, s0) + decay_norm(A, s0) * decay_norm(B, s)
    return num / den if den > 0 else 0.0


# ---------------------------------------------------------------------------
# structure


def reflect(A):
    """The symbol B[l][s,j,s',j'] = conj(A[-l][-s,-j,-s',-j'])."""
    idx = tuple(slice(None, None, -1) for _ in range(A.d + 4))
    return BlockOperator(np.conj(A.data[idx]), A.d)


def reality_violation(A):
    return float(np.max(np.abs(A.data - reflect(A).data), initial=0.0))


def realify(A):
    """Average ``A`` with its conjugate reflection (enforces the reality relation)."""
    return BlockOperator(0.5 * (A.data + reflect(A).data), A.d)


def _hamiltonian_mirror(A):
    """Image of A under the two Hamiltonian relations (a fixed point iff Hamiltonian).

    (H1) A[l][+,j,+,j'] = -conj(A[-l][+,j',+,j])
    (H2) A[l][+,j,-,j'] = A[l][+,-j',-,-j]
    and the s = -1 rows follow from the reality relation.
    """
    data = A.data
    tidx = tuple(slice(None, None, -1) for _ in range(A.d))
    pp = data[..., 0, :, 0, :]
    pm = data[..., 0, :, 1, :]
    pp_m = -np.conj(np.swapaxes(pp[tidx], -1, -2))
    pm_m = np.swapaxes(pm[..., ::-1, ::-1], -1, -2)
    out = data.copy()
    out[..., 0, :, 0, :] = pp_m
    out[..., 0, :, 1, :] = pm_m
    return BlockOperator(out, A.d)


def is_hamiltonian(A, tol=1e-10):
    """Check the Hamiltonian relations entrywise.

    Returns
    -------
    ok : bool
    violation : float
        Maximum entrywise defect of (H1), (H2) and the reality relation,
        relative to max(1, max|A|).
    """
    m = _hamiltonian_mirror(A)
    v_ham = float(np.max(np.abs(A.data[..., 0, :, :, :] - m.data[..., 0, :, :, :]), initial=0.0))
    v_real = reality_violation(A)
    v = max(v_ham, v_real)
    return v <= tol, v


def hamiltonian_part(A):
    """Projection of ``A`` onto operators satisfying the Hamiltonian and reality relations."""
    B = realify(A)
    m = _hamiltonian_mirror(B)
    data = B.data.copy()
    data[..., 0, :, :, :] = 0.5 * (B.data[..., 0, :, :, :] + m.data[..., 0, :, :, :])
    return realify_from_plus(BlockOperator(data, A.d))


def realify_from_plus(A):
    """Rebuild the s = -1 rows of ``A`` from its s = +1 rows."""
    r = reflect(A)
    data = A.data.copy()
    data[..., 1, :, :, :] = r.data[..., 1, :, :, :]
    return BlockOperator(data, A.d)


# ---------------------------------------------------------------------------
# 2x2 blocks


def hermitian_eig2(H):
    """Closed-form eigen-decomposition of Hermitian 2x2 matrices (batched).

    Returns eigenvalues (..., 2) in the order (lambda_+, lambda_-) with
    lambda_+ >= lambda_- and unitary eigenvector matrices (..., 2, 2) whose
    columns are the eigenvectors.  The eigenvector for lambda_+ tends to
    the first basis vector when the off-diagonal entry vanishes and
    H[0,0] >= H[1,1].
    """
    H = np.asarray(H, complex)
    a = H[..., 0, 0].real
    c = H[..., 1, 1].real
    b = 0.5 * (H[..., 0, 1] + np.conj(H[..., 1, 0]))
    m = 0.5 * (a + c)
    delta = 0.5 * (a - c)
    ab = np.abs(b)
    r = np.hypot(delta, ab)
    theta = 0.5 * np.arctan2(ab, delta)
    ph = np.where(ab > 0, b / np.where(ab > 0, ab, 1), 1.0)
    ct, st = np.cos(theta), np.sin(theta)
    U = np.empty(H.shape, complex)
    U[..., 0, 0] = ct
    U[..., 1, 0] = np.conj(ph) * st
    U[..., 0, 1] = -ph * st
    U[..., 1, 1] = ct
    lam = np.stack([m + r, m - r], axis=-1)
    return lam, U


def normal_eig(Mx, tol=1e-8):
    """Eigen-decomposition of a 1x1 or 2x2 Hermitian or anti-Hermitian matrix.

    The input is symmetrized to the nearer of the two classes; a matrix
    that is neither within ``tol`` (relative) is rejected.
    """
    Mx = np.atleast_2d(np.asarray(Mx, complex))
    n = Mx.shape[0]
    scale = max(1.0, float(np.max(np.abs(Mx))))
    herm = np.max(np.abs(Mx - Mx.conj().T)) / scale
    anti = np.max(np.abs(Mx + Mx.conj().T)) / scale
    if min(herm, anti) > tol:
        raise ValueError("matrix is neither Hermitian nor anti-Hermitian within tolerance")
    k = 1.0 if herm <= anti else 1j
    H = (Mx / k)
    H = 0.5 * (H + H.conj().T)
    if n == 1:
        return np.array([k * H[0, 0].real]), np.eye(1, dtype=complex)
    lam, U = hermitian_eig2(H)
    return k * lam, U


def sylvester_oracle(A, B, R):
    """Solve AC - CB = R through the Kronecker system (A x I - I x B^T)."""
    A, B, R = (np.atleast_2d(np.asarray(x, complex)) for x in (A, B, R))
    n, k = R.shape
    K = np.kron(A, np.eye(k)) - np.kron(np.eye(n), B.T)
    return np.linalg.solve(K, R.reshape(-1)).reshape(n, k)


def solve_sylvester_2x2(A, B, R, divisor_floor=1e-12, tol=1e-8):
    """Solve AC - CB = R for 1x1 or 2x2 normal A, B.

    A and B must be Hermitian or anti-Hermitian up to ``tol``; they are
    diagonalized in closed form and the equation becomes elementwise
    division by lambda_p - beta_q.

    Raises
    ------
    SmallDivisorError
        If some gap |lambda_p - beta_q| is below ``divisor_floor``.
    """
    lamA, U = normal_eig(A, tol)
    lamB, V = normal_eig(B, tol)
    R = np.atleast_2d(np.asarray(R, complex))
    gaps = lamA[:, None] - lamB[None, :]
    g = float(np.min(np.abs(gaps)))
    if g < divisor_floor:
        raise SmallDivisorError(f"eigenvalue gap {g:.3e} below floor", gap=g)
    Ct = (U.conj().T @ R @ V) / gaps
    return U @ Ct @ V.conj().T


# ---------------------------------------------------------------------------
# slices and application to functions


def phase_slice(A, phi):
    """Space operator A(phi) = sum_l A[l] exp(i l.phi), shape (2, 2J+1, 2, 2J+1)."""
    if A.d == 0:
        return A.data.copy()
    phi = np.atleast_1d(np.asarray(phi, float))
    k = fc.freqs(A.L)
    grids = np.meshgrid(*([k] * A.d), indexing="ij")
    ph = np.exp(1j * sum(phi[i] * grids[i] for i in range(A.d)))
    return np.tensordot(ph, A.data, axes=(tuple(range(A.d)), tuple(range(A.d))))


def apply_operator(A, W, N=None, outside="zero"):
    """Apply A to a two-component function W; result at cutoff ``N`` (default W.N).

    Space modes |j| > J of the input are dropped (``outside='zero'``) or
    copied to the output (``outside='identity'``).
    """
    if W.ncomp != 2:
        raise ValueError("operators act on two-component functions")
    d, J = A.d, A.J
    N = W.N if N is None else N
    Nin = W.N
    c = W.coeffs
    # restrict input to |j| <= J (space) keeping its time box
    Nj = max(J, Nin)
    cin = fc._resize_array(c[0], Nin, Nj), fc._resize_array(c[1], Nin, Nj)
    cin = np.stack(cin)
    jj = np.arange(-Nj, Nj + 1)
    inbox = np.abs(jj) <= J
    if d == 0:
        v = cin[:, inbox].reshape(-1)
        w = (A.flat[0] @ v).reshape(2, 2 * J + 1)
        out = np.zeros_like(cin)
        out[:, inbox] = w
    else:
        P = _fft_len(A.L + Nin + Nj + 1)
        axes = tuple(range(d))
        sym = _to_fft(A.data.reshape(_time_shape(d, A.L) + (A.n, A.n)), A.L, P, d)
        Aphi = np.fft.ifftn(sym, axes=axes) * P**d
        x = cin[:, ..., inbox]
        x = np.moveaxis(x, 0, d)  # time..., comp, j
        x = x[tuple(slice(Nj - Nin, Nj + Nin + 1) for _ in range(d))]
        x = x.reshape(_time_shape(d, Nin) + (A.n,))
        xb = _to_fft(x, Nin, P, d)
        xphi = np.fft.ifftn(xb, axes=axes) * P**d
        yphi = np.einsum("...ab,...b->...a", Aphi, xphi)
        y = np.fft.fftn(yphi, axes=axes) / P**d
        idx = np.ix_(*([np.arange(-Nj, Nj + 1) % P] * d))
        y = y[idx].reshape(_time_shape(d, Nj) + (2, 2 * J + 1))
        y = np.moveaxis(y, d, 0)
        out = np.zeros_like(cin)
        out[..., inbox] = y
    if outside == "identity":
        keep = ~inbox
        out[..., keep] += cin[..., keep]
    elif outside != "zero":
        raise ValueError("outside must be 'zero' or 'identity'")
    out = np.stack([fc._resize_array(o, Nj, N) for o in out])
    return fc.TorusFunction(out, d, "pair" if W.reality == "pair" else "complex")


def apply_slice(M, v, J_op, outside="zero"):
    """Apply a slice matrix (2, 2J+1, 2, 2J+1) to x-coefficients v of shape (2, 2K+1)."""
    K = (v.shape[1] - 1) // 2
    Kb = max(K, J_op)
    vb = np.stack([fc._resize_array(v[0], K, Kb), fc._resize_array(v[1], K, Kb)])
    jj = np.arange(-Kb, Kb + 1)
    inbox = np.abs(jj) <= J_op
    y = (M.reshape(M.shape[0] * M.shape[1], -1) @ vb[:, inbox].reshape(-1)).reshape(2, 2 * J_op + 1)
    out = np.zeros_like(vb)
    out[:, inbox] = y
    if outside == "identity":
        out[:, ~inbox] = vb[:, ~inbox]
    return np.stack([fc._resize_array(out[0], Kb, K), fc._resize_array(out[1], Kb, K)])


def to_dense(A, P, omega=None):
    """Dense matrix of A (plus omega.d_phi if ``omega`` given) on |p| <= P.

    Basis ordering: time multi-index p (row-major), then s, then j.
    """
    d = A.d
    pts = np.stack([g.reshape(-1) for g in np.meshgrid(*([fc.freqs(P)] * d), indexing="ij")], 1)
    npnt, n = pts.shape[0], A.n
    D = np.zeros((npnt * n, npnt * n), complex)
    for a in range(npnt):
        for b in range(npnt):
            ell = pts[a] - pts[b]
            if np.max(np.abs(ell), initial=0) <= A.L:
                D[a * n : (a + 1) * n, b * n : (b + 1) * n] = A.at(ell).reshape(n, n)
    if omega is not None:
        om = np.atleast_1d(np.asarray(omega, float))
        D += np.diag(np.repeat(1j * pts @ om, n))
    return D


# ---------------------------------------------------------------------------
# transformations


class Transformation:
    """Invertible map on two-component functions.

    Subclasses provide ``apply``/``apply_inverse`` on functions of
    (phi, x) and ``slice_apply`` on x-coefficient pairs at fixed phi.
    ``time_map(phi)`` is the time angle at which the factors to the right
    of this map are evaluated (identity unless the map reparametrizes
    time).
    """

    kind = "explicit-matrix"
    symplectic = True
    name = "T"

    def apply(self, W, N=None):
        raise NotImplementedError

    def apply_inverse(self, W, N=None):
        raise NotImplementedError

    def slice_apply(self, phi, v):
        raise NotImplementedError

    def slice_apply_inverse(self, phi, v):
        raise NotImplementedError

    def time_map(self, phi):
        return np.atleast_1d(np.asarray(phi, float))

    def inverse_time_map(self, theta):
        return np.atleast_1d(np.asarray(theta, float))

    def round_trip_error(self, W):
        back = self.apply_inverse(self.apply(W))
        return fc.sobolev_norm(back - W, 0) / max(fc.sobolev_norm(W, 0), 1e-300)


class IdentityTransformation(Transformation):
    name = "identity"

    def apply(self, W, N=None):
        return W if N is None else W.resize(N)

    apply_inverse = apply

    def slice_apply(self, phi, v):
        return v.copy()

    slice_apply_inverse = slice_apply


class OperatorTransformation(Transformation):
    """Transformation given by a Toeplitz forward operator and its inverse.

    Space modes outside the operator box are passed through unchanged.
    """

    def __init__(self, forward, inverse, kind="explicit-matrix", name="Phi", symplectic=True, meta=None):
        self.forward = forward
        self.inverse = inverse
        self.kind = kind
        self.name = name
        self.symplectic = symplectic
        self.meta = meta or {}

    def apply(self, W, N=None):
        return apply_operator(self.forward, W, N=N, outside="identity")

    def apply_inverse(self, W, N=None):
        return apply_operator(self.inverse, W, N=N, outside="identity")

    def slice_apply(self, phi, v):
        return apply_slice(phase_slice(self.forward, phi), v, self.forward.J, "identity")

    def slice_apply_inverse(self, phi, v):
        return apply_slice(phase_slice(self.inverse, phi), v, self.inverse.J, "identity")


class Chain(Transformation):
    """Ordered product T_1 T_2 ... T_k (T_k is applied first)."""

    kind = "composition-chain"

    def __init__(self, factors, name="chain"):
        flat = []
        for f in factors:
            flat.extend(f.factors if isinstance(f, Chain) else [f])
        self.factors = flat
        self.name = name

    @property
    def symplectic(self):
        return all(f.symplectic for f in self.factors)

    def apply(self, W, N=None):
        Nout = W.N if N is None else N
        for f in reversed(self.factors):
            W = f.apply(W)
        return W.resize(Nout)

    def apply_inverse(self, W, N=None):
        Nout = W.N if N is None else N
        for f in self.factors:
            W = f.apply_inverse(W)
        return W.resize(Nout)

    def slice_apply(self, phi, v):
        """Apply at time angle phi; later factors see the mapped time angle."""
        return self.slice_apply_at(phi, lambda theta: v)

    def slice_apply_at(self, phi, vfunc):
        """Apply to a time-dependent datum: ``vfunc(theta)`` is evaluated
        at the time angle reached after all time reparametrizations."""
        angles = []
        t = np.atleast_1d(np.asarray(phi, float))
        for f in self.factors:
            angles.append(t)
            t = f.time_map(t)
        v = vfunc(t)
        for f, a in zip(reversed(self.factors), reversed(angles)):
            v = f.slice_apply(a, v)
        return v

    def slice_apply_inverse(self, phi, v):
        """Inverse slice map, undoing factors from left to right."""
        t = np.atleast_1d(np.asarray(phi, float))
        for f in self.factors:
            v = f.slice_apply_inverse(t, v)
            t = f.time_map(t)
        return v

    def time_map(self, phi):
        t = np.atleast_1d(np.asarray(phi, float))
        for f in self.factors:
            t = f.time_map(t)
        return t


# ---------------------------------------------------------------------------
# exponentials


_COMPOSITION_CONSTANTS = {}


def composition_constant(s, d=1, J=6, L=3, samples=12, seed=0):
    """Empirical constant C with |AB|_s <= C (|A|_s |B|_s0 + |A|_s0 |B|_s), s0 = s.

    Measured on random decaying operators and cached per key.
    """
    key = (round(float(s), 6), d, J, L)
    if key in _COMPOSITION_CONSTANTS:
        return _COMPOSITION_CONSTANTS[key]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        A = random_operator(rng, d, J, L)
        B = random_operator(rng, d, J, L)
        num = decay_norm(compose(A, B), s)
        den = decay_norm(A, s) * decay_norm(B, s)
        worst = max(worst, num / den)
    _COMPOSITION_CONSTANTS[key] = max(worst, 1.0)
    return _COMPOSITION_CONSTANTS[key]


def random_operator(rng, d, J, L, decay=0.7, hamiltonian=False):
    """Random operator with entries ~ exp(-decay * <(l, j - j')>)."""
    shape = _time_shape(d, L) + (2, 2 * J + 1, 2, 2 * J + 1)
    data = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    jj = np.arange(-J, J + 1)
    h = np.abs(jj[:, None] - jj[None, :])
    tw = _time_weight(d, L) if d else np.zeros(())
    w = np.exp(-decay * np.maximum(tw[(...,) + (None,) * 4], h[None, :, None, :]))
    A = BlockOperator(data * w, d)
    if hamiltonian:
        A = hamiltonian_part(A)
    return A


def exp_series(Psi, series_tol=1e-14, max_terms=40, s0=1.5, L=None):
    """sum_k Psi^k / k! truncated when the next term is below ``series_tol``."""
    L = Psi.L if L is None else L
    out = identity(Psi.d, Psi.J, L)
    term = identity(Psi.d, Psi.J, L)
    nterms = 0
    for k in range(1, max_terms + 1):
        term = compose(term, Psi, L) * (1.0 / k)
        out = out + term
        nterms = k
        if decay_norm(term, s0) < series_tol:
            break
    return out, nterms


def exp_operator(Psi, series_tol=1e-14, max_terms=40, s0=1.5, c_s0=None, L=None):
    """exp(Psi) as a :class:`OperatorTransformation` with inverse exp(-Psi).

    Raises
    ------
    NoInverseError
        If C(s0) |Psi|_s0 > 1/2 with C(s0) the measured composition constant.
    """
    c_s0 = composition_constant(s0, Psi.d) if c_s0 is None else c_s0
    size = c_s0 * decay_norm(Psi, s0)
    if size > 0.5:
        raise NoInverseError(f"C(s0)|Psi|_s0 = {size:.3g} exceeds 1/2")
    fwd, n1 = exp_series(Psi, series_tol, max_terms, s0, L)
    inv, n2 = exp_series(-Psi, series_tol, max_terms, s0, L)
    rt = decay_norm(compose(inv, fwd) - identity(Psi.d, Psi.J, fwd.L), s0)
    return OperatorTransformation(
        fwd, inv, kind="exp-of-generator", name="exp",
        meta={"terms": max(n1, n2), "round_trip": rt, "size": size},
    )


def conjugate_series(X, Psi, omega=None, tol=1e-15, max_terms=30, s0=1.5, L=None):
    """exp(-Psi) (omega.d_phi + X) exp(Psi) - omega.d_phi via the Lie series.

    Uses sum_k ad^k(.)/k! with ad(Y) = [Y, Psi]; the time-derivative part
    contributes [omega.d_phi, Psi] = i omega.l Psi.
    """
    L = max(X.L, Psi.L) if L is None else L
    out = X.resize(L=L)
    term = X.resize(L=L)
    first = commutator(term, Psi, L)
    if omega is not None:
        first = first + time_derivative_symbol(Psi, omega).resize(L=L)
    term = first
    out = out + term
    ref = max(decay_norm(X, s0), 1e-300)
    for k in range(2, max_terms + 1):
        term = commutator(term, Psi, L) * (1.0 / k)
        out = out + term
        if decay_norm(term, s0) < tol * ref:
            break
    return out


# ---------------------------------------------------------------------------
# text dump


def dump_operator(A):
    """Header ``d J L`` then ``s j s' j' l... re im`` sorted lexicographically."""
    d, J, L = A.d, A.J, A.L
    rows = []
    tgrid = np.stack([g.reshape(-1) for g in np.meshgrid(*([fc.freqs(L)] * d), indexing="ij")], 1) if d else np.zeros((1, 0), int)
    flat = A.data.reshape(-1, 2, 2 * J + 1, 2, 2 * J + 1)
    for s in (-1, 1):
        a = 0 if s > 0 else 1
        for j in range(-J, J + 1):
            for s2 in (-1, 1):
                b = 0 if s2 > 0 else 1
                for j2 in range(-J, J + 1):
                    for t in range(tgrid.shape[0]):
                        v = flat[t, a, j + J, b, j2 + J]
                        ell = " ".join(str(int(x)) for x in tgrid[t])
                        rows.append(f"{s} {j} {s2} {j2} {ell} {float(v.real)!r} {float(v.imag)!r}")
    return f"{d} {J} {L}\n" + "\n".join(rows) + "\n"


def load_operator(text):
    lines = text.strip().splitlines()
    d, J, L = (int(x) for x in lines[0].split())
    A = np.zeros(_time_shape(d, L) + (2, 2 * J + 1, 2, 2 * J + 1), complex)
    for row in lines[1:]:
        p = row.split()
        s, j, s2, j2 = (int(x) for x in p[:4])
        ell = tuple(int(x) + L for x in p[4 : 4 + d])
        A[ell + (0 if s > 0 else 1, j + J, 0 if s2 > 0 else 1, j2 + J)] = float(p[4 + d]) + 1j * float(p[5 + d])
    return BlockOperator(A, d)
