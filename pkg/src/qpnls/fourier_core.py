"""Truncated Fourier representation of functions on T^d x T.

A :class:`TorusFunction` stores the coefficients u_{l,j} of

    u(phi, x) = sum_{|l|, |j| <= N} u_{l,j} exp(i (l.phi + j x))

on a centred cube: array index ``k`` along every axis holds frequency
``k - N``.  The first ``d`` axes are time angles, the last axis is space.
A leading axis holds one or two components; two components are used for
the pair (u, conj(u)) on which the linearized operators act.

Pointwise work (products, square roots, compositions with
diffeomorphisms) goes through physical grids and is re-projected onto the
declared cutoff.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

REALITY_TAGS = ("real", "complex", "pair")

S_CAP = 12.0
N_CAP = 512


class ResonanceError(ArithmeticError):
    """A small divisor fell below its floor.

    Attributes
    ----------
    index : tuple
        The offending frequency index.
    divisor : float
        Absolute value of the divisor.
    """

    def __init__(self, message, index=None, divisor=None):
        super().__init__(message)
        self.index = index
        self.divisor = divisor


class DiffeoError(ValueError):
    """A torus map is not invertible or its inversion did not converge."""


# ---------------------------------------------------------------------------
# index helpers


def freqs(N):
    return np.arange(-N, N + 1)


def mode_grids(d, N):
    """Integer frequency arrays (l_1, ..., l_d, j) on the centred cube."""
    k = freqs(N)
    return np.meshgrid(*([k] * (d + 1)), indexing="ij")


def index_weight(d, N):
    """The weight <i> = max(|l|_inf, |j|, 1) on the centred cube."""
    grids = mode_grids(d, N)
    w = np.ones_like(grids[0])
    for g in grids:
        w = np.maximum(w, np.abs(g))
    return w.astype(float)


def time_norm(d, N):
    """|l|_inf on the centred cube (space index ignored)."""
    grids = mode_grids(d, N)
    out = np.zeros_like(grids[0])
    for g in grids[:-1]:
        out = np.maximum(out, np.abs(g))
    return out


def conj_reflect(c):
    """Coefficients of conj(u) given those of u (all axes reversed)."""
    idx = tuple(slice(None, None, -1) for _ in range(c.ndim))
    return np.conj(c[idx])


def _resize_array(c, N_old, N_new):
    """Pad or truncate a centred coefficient cube (trailing d+1 axes)."""
    nd = c.ndim
    if N_new == N_old:
        return c.copy()
    if N_new < N_old:
        cut = N_old - N_new
        sl = tuple(slice(cut, cut + 2 * N_new + 1) for _ in range(nd))
        return c[sl].copy()
    pad = N_new - N_old
    return np.pad(c, [(pad, pad)] * nd)


# ---------------------------------------------------------------------------
# the function type


@dataclass(frozen=True)
class TorusFunction:
    """Truncated Fourier coefficients on T^{d+1}.

    Parameters
    ----------
    coeffs : ndarray
        Shape ``(ncomp,) + (2N+1,)*(d+1)``, complex.
    d : int
        Number of time angles.
    reality : str
        ``'real'`` (u_{-i} = conj u_i), ``'complex'`` or ``'pair'``
        (second component is the conjugate of the first).
    """

    coeffs: np.ndarray
    d: int
    reality: str = "complex"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != self.d + 2:
            raise ValueError(f"coefficient array must have {self.d + 2} axes, got {c.ndim}")
        n = c.shape[1]
        if any(s != n for s in c.shape[1:]) or n % 2 == 0:
            raise ValueError("coefficient cube must be (2N+1)^(d+1)")
        if c.shape[0] not in (1, 2):
            raise ValueError("one or two components only")
        if self.reality not in REALITY_TAGS:
            raise ValueError(f"unknown reality tag {self.reality!r}")
        if self.reality == "pair" and c.shape[0] != 2:
            raise ValueError("a conjugate pair needs two components")
        object.__setattr__(self, "coeffs", c)

    # basic attributes
    @property
    def N(self):
        return (self.coeffs.shape[1] - 1) // 2

    @property
    def ncomp(self):
        return self.coeffs.shape[0]

    @property
    def c(self):
        """Coefficients of the first component."""
        return self.coeffs[0]

    def __getitem__(self, index):
        """Coefficient of the first component at frequency ``(l..., j)``."""
        N = self.N
        return self.coeffs[(0,) + tuple(int(k) + N for k in index)]

    # arithmetic
    def _check(self, other):
        if not isinstance(other, TorusFunction):
            raise TypeError("expected a TorusFunction")
        if other.d != self.d:
            raise ValueError("dimension mismatch")

    def _aligned(self, other):
        self._check(other)
        N = max(self.N, other.N)
        a, b = self.resize(N).coeffs, other.resize(N).coeffs
        if a.shape[0] != b.shape[0]:
            raise ValueError("component count mismatch")
        return a, b

    def _tag(self, other):
        return self.reality if self.reality == other.reality else "complex"

    def __add__(self, other):
        if np.isscalar(other):
            return self + constant(other, self.d, self.N, self.ncomp)
        a, b = self._aligned(other)
        return TorusFunction(a + b, self.d, self._tag(other))

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return self - constant(other, self.d, self.N, self.ncomp)
        a, b = self._aligned(other)
        return TorusFunction(a - b, self.d, self._tag(other))

    def __rsub__(self, other):
        return (-1) * self + other

    def __neg__(self):
        return TorusFunction(-self.coeffs, self.d, self.reality)

    def __mul__(self, k):
        if isinstance(k, TorusFunction):
            return multiply(self, k)
        tag = self.reality if np.isrealobj(k) else "complex"
        return TorusFunction(self.coeffs * k, self.d, tag)

    __rmul__ = __mul__

    def __truediv__(self, k):
        return self * (1.0 / k)

    def conj(self):
        """The function conj(u) (componentwise)."""
        return TorusFunction(
            np.stack([conj_reflect(c) for c in self.coeffs]), self.d, self.reality
        )

    def real_part(self):
        return 0.5 * (self + self.conj()).with_reality("real")

    def imag_part(self):
        return (-0.5j * (self - self.conj())).with_reality("real")

    def with_reality(self, tag):
        c = self.coeffs
        if tag == "real":
            c = 0.5 * (c + np.stack([conj_reflect(x) for x in c]))
        return TorusFunction(c, self.d, tag)

    def resize(self, N):
        """Zero-pad or truncate to cutoff ``N``."""
        if N == self.N:
            return self
        c = np.stack([_resize_array(x, self.N, N) for x in self.coeffs])
        return TorusFunction(c, self.d, self.reality)

    def component(self, k):
        tag = "complex" if self.reality == "pair" else self.reality
        return TorusFunction(self.coeffs[k : k + 1], self.d, tag)

    def mean(self):
        """Average over T^{d+1} of the first component."""
        N = self.N
        return self.coeffs[(0,) + (N,) * (self.d + 1)]

    def max_abs_coeff(self):
        return float(np.max(np.abs(self.coeffs))) if self.coeffs.size else 0.0

    def copy(self):
        return TorusFunction(self.coeffs.copy(), self.d, self.reality)


# ---------------------------------------------------------------------------
# constructors


def zeros(d, N, ncomp=1, reality="complex"):
    return TorusFunction(np.zeros((ncomp,) + (2 * N + 1,) * (d + 1), complex), d, reality)


def constant(value, d, N, ncomp=1):
    u = np.zeros((ncomp,) + (2 * N + 1,) * (d + 1), complex)
    u[(slice(None),) + (N,) * (d + 1)] = value
    tag = "real" if np.isrealobj(value) else "complex"
    return TorusFunction(u, d, tag)


def from_modes(modes, d, N, reality="complex"):
    """Build a scalar function from ``{(l_1,...,l_d, j): value}``."""
    u = np.zeros((1,) + (2 * N + 1,) * (d + 1), complex)
    for key, val in modes.items():
        key = tuple(int(k) for k in key)
        if len(key) != d + 1:
            raise ValueError(f"mode {key} must have d+1 = {d + 1} entries")
        if max(abs(k) for k in key) > N:
            raise ValueError(f"mode {key} outside cutoff {N}")
        u[(0,) + tuple(k + N for k in key)] += val
    return TorusFunction(u, d, reality)


def pair(u):
    """The conjugate pair (u, conj u) of a scalar function."""
    if u.ncomp != 1:
        raise ValueError("pair() expects a scalar function")
    return TorusFunction(np.stack([u.c, conj_reflect(u.c)]), u.d, "pair")


def random_function(rng, d, N, decay=1.0, amplitude=1.0, reality="complex"):
    """Random analytic-looking function with coefficients ~ exp(-decay*<i>)."""
    shape = (1,) + (2 * N + 1,) * (d + 1)
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    c *= amplitude * np.exp(-decay * index_weight(d, N))[None]
    u = TorusFunction(c, d, "complex")
    if reality == "real":
        u = u.with_reality("real")
    return u


# ---------------------------------------------------------------------------
# physical grids


def grid_points(M, d):
    """Angles 2 pi a / M of a uniform grid, one array per axis (ij indexing)."""
    t = 2 * np.pi * np.arange(M) / M
    return np.meshgrid(*([t] * (d + 1)), indexing="ij")


def _embed(c, M):
    """Place centred coefficients of cutoff N into an FFT-ordered M-cube."""
    N = (c.shape[-1] - 1) // 2
    if 2 * N + 1 > M:
        raise ValueError(f"grid size {M} too small for cutoff {N}")
    nd = c.ndim
    big = np.zeros((M,) * nd, complex)
    idx = np.ix_(*([np.arange(-N, N + 1) % M] * nd))
    big[idx] = c
    return big


def _extract(big, N):
    M = big.shape[0]
    idx = np.ix_(*([np.arange(-N, N + 1) % M] * big.ndim))
    return big[idx]


def to_grid(u, M, comp=0):
    """Values of one component on the uniform M^{d+1} grid."""
    big = _embed(u.coeffs[comp], M)
    return np.fft.ifftn(big) * big.size


def from_grid(values, N, d, reality="complex", return_tail=False):
    """Coefficients up to cutoff ``N`` of grid values (trigonometric interpolant).

    Frequencies above ``N`` present in the grid spectrum are dropped; their
    l2 mass is returned when ``return_tail`` is set.
    """
    values = np.asarray(values)
    M = values.shape[0]
    spec = np.fft.fftn(values) / values.size
    Nk = min(N, (M - 1) // 2)
    c = _extract(spec, Nk)
    tail = 0.0
    if return_tail:
        tail = float(np.sqrt(max(np.sum(np.abs(spec) ** 2) - np.sum(np.abs(c) ** 2), 0.0)))
    if Nk < N:
        c = _resize_array(c, Nk, N)
    u = TorusFunction(c[None], d, reality)
    if reality == "real":
        u = u.with_reality("real")
    return (u, tail) if return_tail else u


def grid_size(N, oversample=2):
    return max(oversample * (2 * N + 1), 2 * N + 1)


def apply_pointwise(fn, *funcs, N=None, oversample=4, reality="complex"):
    """Evaluate ``fn`` pointwise on grid values of scalar functions.

    ``fn`` receives one grid array per input and returns grid values.
    """
    d = funcs[0].d
    Nmax = max(f.N for f in funcs)
    N = Nmax if N is None else N
    M = grid_size(max(N, Nmax), oversample)
    vals = [to_grid(f, M) for f in funcs]
    return from_grid(fn(*vals), N, d, reality)


# ---------------------------------------------------------------------------
# norms and projections


def sobolev_norm(u, s):
    """Weighted l2 norm with weight <i>^s; max over components."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    s = min(float(s), S_CAP)
    w = index_weight(u.d, u.N) ** (2 * s)
    vals = [np.sqrt(np.sum(np.abs(c) ** 2 * w)) for c in u.coeffs]
    return float(max(vals)) if vals else 0.0


def project(u, N):
    """Split ``u`` into (Pi_N u, Pi_N^perp u), both at the cutoff of ``u``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    keep = index_weight(u.d, u.N) <= N
    keep[(u.N,) * (u.d + 1)] = True
    low = np.where(keep[None], u.coeffs, 0)
    return TorusFunction(low, u.d, u.reality), TorusFunction(u.coeffs - low, u.d, u.reality)


def multiply(u, v, N=None, return_tail=False):
    """Product of two functions, projected to cutoff ``N``.

    The convolution is computed exactly on a grid large enough to hold
    every product frequency; with ``return_tail`` the l2 mass of the
    discarded modes is returned too.
    """
    if u.d != v.d:
        raise ValueError("dimension mismatch")
    N = max(u.N, v.N) if N is None else N
    K = u.N + v.N
    M = 2 * K + 1
    comps = max(u.ncomp, v.ncomp)
    out, tail2 = [], 0.0
    for k in range(comps):
        a = to_grid(u, M, min(k, u.ncomp - 1))
        b = to_grid(v, M, min(k, v.ncomp - 1))
        full = from_grid(a * b, K, u.d).c
        low = _resize_array(full, K, N)
        if return_tail and N < K:
            tail2 += float(np.sum(np.abs(full) ** 2) - np.sum(np.abs(low) ** 2))
        out.append(low)
    tag = u.reality if u.reality == v.reality and u.reality != "pair" else "complex"
    if u.reality == "pair" and v.reality == "pair":
        tag = "complex"
    w = TorusFunction(np.stack(out), u.d, tag)
    if tag == "real":
        w = w.with_reality("real")
    return (w, float(np.sqrt(max(tail2, 0.0)))) if return_tail else w


def derivative(u, which, omega=None):
    """Derivative in ``'x'``, ``('phi', k)`` or ``'omega'`` (omega . d/dphi)."""
    grids = mode_grids(u.d, u.N)
    if which == "x":
        if omega is not None:
            raise ValueError("omega is only used with which='omega'")
        sym = 1j * grids[-1]
    elif which == "omega":
        if omega is None:
            raise ValueError("omega . d_phi needs omega")
        om = np.atleast_1d(np.asarray(omega, float))
        sym = 1j * sum(om[k] * grids[k] for k in range(u.d))
    elif isinstance(which, tuple) and which[0] == "phi":
        sym = 1j * grids[int(which[1])]
    else:
        raise ValueError(f"unknown derivative {which!r}")
    return TorusFunction(u.coeffs * sym[None], u.d, u.reality)


def dx(u, k=1):
    for _ in range(k):
        u = derivative(u, "x")
    return u


def dx_inverse(u):
    """Divide modes j != 0 by ij and drop the x-average."""
    j = mode_grids(u.d, u.N)[-1]
    sym = np.zeros(j.shape, complex)
    nz = j != 0
    sym[nz] = 1.0 / (1j * j[nz])
    return TorusFunction(u.coeffs * sym[None], u.d, u.reality)


def omega_dot(omega, d, N):
    """omega . l on the centred cube."""
    grids = mode_grids(d, N)
    om = np.atleast_1d(np.asarray(omega, float))
    if om.size != d:
        raise ValueError("omega has wrong length")
    return sum(om[k] * grids[k] for k in range(d)) if d else np.zeros(grids[0].shape)


def omega_dphi_inverse(u, omega, divisor_floor=1e-12):
    """Divide modes l != 0 by i omega.l and drop the phi-average.

    Raises
    ------
    ResonanceError
        If some |omega . l| with l != 0 in the cube is below ``divisor_floor``.
    """
    grids = mode_grids(u.d, u.N)
    wl = omega_dot(omega, u.d, u.N)
    lnz = time_norm(u.d, u.N) > 0
    bad = lnz & (np.abs(wl) < divisor_floor)
    if np.any(bad):
        pos = tuple(int(g[bad][0]) for g in grids[:-1])
        raise ResonanceError(
            f"|omega.l| below floor at l={pos}", index=pos, divisor=float(np.abs(wl[bad]).min())
        )
    sym = np.zeros(wl.shape, complex)
    sym[lnz] = 1.0 / (1j * wl[lnz])
    return TorusFunction(u.coeffs * sym[None], u.d, u.reality)


def average_x(u):
    """x-average (keeps the j = 0 slice)."""
    j = mode_grids(u.d, u.N)[-1]
    return TorusFunction(np.where(j[None] == 0, u.coeffs, 0), u.d, u.reality)


def average_phi(u):
    """phi-average (keeps the l = 0 slice)."""
    keep = time_norm(u.d, u.N) == 0
    return TorusFunction(np.where(keep[None], u.coeffs, 0), u.d, u.reality)


def max_imag_violation(u):
    """Sup over the grid of |Im u| (for real-valuedness checks)."""
    M = grid_size(u.N, 2)
    return float(np.max(np.abs(to_grid(u, M).imag)))


def max_real_violation(u):
    M = grid_size(u.N, 2)
    return float(np.max(np.abs(to_grid(u, M).real)))


def sup_norm(u, oversample=2):
    M = grid_size(u.N, oversample)
    return float(max(np.max(np.abs(to_grid(u, M, k))) for k in range(u.ncomp)))


# ---------------------------------------------------------------------------
# composition with torus maps


def _eval_in_x(cj, pts):
    """Evaluate x-Fourier series (rows of ``cj``) at per-row points.

    ``cj`` has shape (P, 2N+1), ``pts`` shape (P, Q); returns (P, Q).
    Horner's rule in z = exp(i x) avoids forming the (P, Q, 2N+1) tensor.
    """
    N = (cj.shape[-1] - 1) // 2
    z = np.exp(1j * pts)
    acc = np.zeros(pts.shape, complex)
    for k in range(2 * N, -1, -1):
        acc = acc * z + cj[:, k : k + 1]
    return acc * np.exp(-1j * N * pts)


def _phi_partial_grid(c, d, M):
    """Inverse FFT over the time axes only: returns (M^d, 2N+1) array of x-coefficients."""
    N = (c.shape[-1] - 1) // 2
    if d == 0:
        return c[None, :]
    big = np.zeros((M,) * d + (2 * N + 1,), complex)
    idx = np.ix_(*([np.arange(-N, N + 1) % M] * d + [np.arange(2 * N + 1)]))
    big[idx] = c
    vals = np.fft.ifftn(big, axes=tuple(range(d))) * M**d
    return vals.reshape(M**d, 2 * N + 1)


def _x_partial_grid(c, d, M):
    """Inverse FFT over x only: returns ((2N+1)^d, M) time-coefficients per x point."""
    N = (c.shape[-1] - 1) // 2
    big = np.zeros((2 * N + 1,) * d + (M,), complex)
    big[..., np.arange(-N, N + 1) % M] = c
    vals = np.fft.ifft(big, axis=-1) * M
    return vals.reshape((2 * N + 1) ** d, M)


def _check_real(u, name, tol=1e-10):
    if u.ncomp != 1:
        raise ValueError(f"{name} must be scalar")
    if u.reality != "real":
        scale = max(1.0, u.max_abs_coeff())
        if np.max(np.abs(u.c - conj_reflect(u.c))) > tol * scale:
            raise ValueError(f"{name} must be real-valued")


def compose_space_diffeo(u, xi, oversample=4, jacobian=False, N=None, return_tail=False):
    """Evaluate u(phi, x + xi(phi, x)), optionally times sqrt(1 + xi_x).

    Each component of ``u`` is composed separately.  The result is
    resampled on a grid refined by ``oversample`` and projected to cutoff
    ``N`` (default ``u.N``).

    Raises
    ------
    DiffeoError
        If sup |xi_x| > 1/2.
    """
    if oversample < 2:
        raise ValueError("oversample must be >= 2")
    _check_real(xi, "xi")
    d = u.d
    N = u.N if N is None else N
    M = grid_size(max(N, u.N, xi.N), oversample)
    X = grid_points(M, d)
    xiv = to_grid(xi, M).real
    xix = to_grid(derivative(xi, "x"), M).real
    if np.max(np.abs(xix)) > 0.5:
        raise DiffeoError(f"sup|xi_x| = {np.max(np.abs(xix)):.3g} exceeds 1/2")
    pts = (X[-1] + xiv).reshape(M**d, M)
    out, tail2 = [], 0.0
    for comp in range(u.ncomp):
        cj = _phi_partial_grid(u.coeffs[comp], d, M)
        vals = _eval_in_x(cj, pts).reshape((M,) * (d + 1))
        if jacobian:
            vals = vals * np.sqrt(1.0 + xix)
        w, t = from_grid(vals, N, d, return_tail=True)
        out.append(w.c)
        tail2 += t**2
    res = TorusFunction(np.stack(out), d, u.reality)
    if u.reality == "real":
        res = res.with_reality("real")
    return (res, float(np.sqrt(tail2))) if return_tail else res


def evaluate_at_x(u, pts, comp=0, M=None):
    """Values of one component at x-points ``pts`` (shape (M^d, Q)) on the phi-grid."""
    d = u.d
    M = grid_size(u.N, 4) if M is None else M
    cj = _phi_partial_grid(u.coeffs[comp], d, M)
    return _eval_in_x(cj, pts)


def invert_diffeo(xi, tol=1e-13, max_iter=200, oversample=4, N=None, return_residual=False):
    """Inverse of y = x + xi(phi, x) in the form x = y + xihat(phi, y).

    Fixed-point iteration xihat <- -xi(y + xihat) on the physical grid.
    The identity xi_x(x) + xihat_y(y) + xi_x(x) xihat_y(y) = 0 is checked
    at the grid points; its maximum is returned with ``return_residual``.

    Raises
    ------
    DiffeoError
        If sup |xi_x| > 1/2 or the iteration budget is exhausted.
    """
    _check_real(xi, "xi")
    d = xi.d
    N = xi.N if N is None else N
    M = grid_size(max(N, xi.N), oversample)
    X = grid_points(M, d)
    y = X[-1].reshape(M**d, M)
    xix_grid = to_grid(derivative(xi, "x"), M).real
    if np.max(np.abs(xix_grid)) > 0.5:
        raise DiffeoError(f"sup|xi_x| = {np.max(np.abs(xix_grid)):.3g} exceeds 1/2")
    cj = _phi_partial_grid(xi.c, d, M)
    h = -to_grid(xi, M).real.reshape(M**d, M)
    for it in range(max_iter):
        hn = -_eval_in_x(cj, y + h).real
        err = np.max(np.abs(hn - h))
        h = hn
        if err <= tol:
            break
    else:
        raise DiffeoError(f"inverse diffeomorphism did not converge (err={err:.2e})")
    xihat = from_grid(h.reshape((M,) * (d + 1)), N, d, "real")
    if not return_residual:
        return xihat
    cjx = _phi_partial_grid(derivative(xi, "x").c, d, M)
    xix_at = _eval_in_x(cjx, y + h).real
    yh = to_grid(derivative(xihat, "x"), M).real.reshape(M**d, M)
    res = float(np.max(np.abs(xix_at + yh + xix_at * yh)))
    return xihat, res


def compose_time_diffeo(u, alpha, omega, oversample=4, N=None, return_tail=False):
    """Evaluate u(phi + omega alpha(phi), x) for a real, x-independent alpha.

    Raises
    ------
    DiffeoError
        If the Jacobian 1 + omega.d_phi alpha is not positive on the grid.
    """
    _check_real(alpha, "alpha")
    d = u.d
    if d == 0:
        return u
    om = np.atleast_1d(np.asarray(omega, float))
    N = u.N if N is None else N
    M = grid_size(max(N, u.N, alpha.N), oversample)
    jac = 1.0 + to_grid(derivative(alpha, "omega", om), M).real
    if np.min(jac) <= 0:
        raise DiffeoError("time reparametrization has non-positive Jacobian")
    if np.max(np.abs(to_grid(derivative(alpha, "x"), M))) > 1e-10 * max(1.0, alpha.max_abs_coeff()):
        raise ValueError("alpha must be x-independent")
    av = to_grid(alpha, M).real[..., 0].reshape(M**d)
    Phi = [g[..., 0].reshape(M**d) for g in grid_points(M, d)[:-1]]
    theta = np.stack([Phi[k] + om[k] * av for k in range(d)], axis=1)
    lgrid = np.stack([g.reshape(-1) for g in np.meshgrid(*([freqs(u.N)] * d), indexing="ij")], 1)
    E = np.exp(1j * theta @ lgrid.T)
    out, tail2 = [], 0.0
    for comp in range(u.ncomp):
        cx = _x_partial_grid(u.coeffs[comp], d, M)
        vals = (E @ cx).reshape((M,) * (d + 1))
        w, t = from_grid(vals, N, d, return_tail=True)
        out.append(w.c)
        tail2 += t**2
    res = TorusFunction(np.stack(out), d, u.reality)
    if u.reality == "real":
        res = res.with_reality("real")
    return (res, float(np.sqrt(tail2))) if return_tail else res


def invert_time_diffeo(alpha, omega, tol=1e-13, max_iter=200, oversample=4, N=None):
    """alpha_tilde with theta = phi + omega alpha(phi)  <=>  phi = theta + omega alpha_tilde(theta).

    Solves alpha_tilde(theta) = -alpha(theta + omega alpha_tilde(theta)) by
    fixed-point iteration on the phi-grid.
    """
    _check_real(alpha, "alpha")
    d = alpha.d
    om = np.atleast_1d(np.asarray(omega, float))
    N = alpha.N if N is None else N
    M = grid_size(max(N, alpha.N), oversample)
    Th = np.stack([g[..., 0].reshape(M**d) for g in grid_points(M, d)[:-1]], 1)
    lgrid = np.stack([g.reshape(-1) for g in np.meshgrid(*([freqs(alpha.N)] * d), indexing="ij")], 1)
    ca = alpha.c[..., alpha.N].reshape(-1)
    h = -(np.exp(1j * Th @ lgrid.T) @ ca).real
    for _ in range(max_iter):
        pts = Th + h[:, None] * om[None, :]
        hn = -(np.exp(1j * pts @ lgrid.T) @ ca).real
        err = np.max(np.abs(hn - h))
        h = hn
        if err <= tol:
            break
    else:
        raise DiffeoError("inverse time map did not converge")
    vals = np.repeat(h.reshape((M,) * d)[..., None], M, axis=-1)
    return from_grid(vals, N, d, "real")


# ---------------------------------------------------------------------------
# parameter grids and families


@dataclass(frozen=True)
class ParamGrid:
    """Uniform grid of frequency vectors in [1/2, 3/2]^d."""

    points: np.ndarray
    spacing: float
    diophantine_params: tuple = (0.0, 1.0, 1)

    @property
    def d(self):
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]


def uniform_grid(d, n, lo=0.5, hi=1.5, diophantine_params=(0.0, 1.0, 1)):
    """``n`` points per axis, endpoints included."""
    t = np.linspace(lo, hi, n)
    pts = np.stack([g.reshape(-1) for g in np.meshgrid(*([t] * d), indexing="ij")], 1)
    return ParamGrid(pts, float(t[1] - t[0]) if n > 1 else 0.0, tuple(diophantine_params))


@dataclass
class ParamFamily:
    """Values tabulated on the active mask of a :class:`ParamGrid`."""

    grid: ParamGrid
    values: dict

    @property
    def mask(self):
        m = np.zeros(len(self.grid), bool)
        m[list(self.values)] = True
        return m


@dataclass(frozen=True)
class LipNorm:
    value: float
    sup: float
    lip: float
    single_point: bool = False


def _payload_norm(x, s):
    if isinstance(x, TorusFunction):
        return sobolev_norm(x, s)
    if hasattr(x, "decay_norm"):
        return x.decay_norm(s)
    return float(np.abs(x))


def lip_norm(family, gamma, s=0.0, mode="all"):
    """Weighted Lipschitz norm sup + gamma * lip over the active mask.

    ``mode='adjacent'`` uses only neighbouring grid points for the
    difference quotients.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    keys = sorted(family.values)
    if not keys:
        raise ValueError("empty family")
    sup = max(_payload_norm(family.values[k], s) for k in keys)
    if len(keys) == 1:
        warnings.warn("single-point mask: Lipschitz part set to 0", stacklevel=2)
        return LipNorm(sup, sup, 0.0, True)
    pts = family.grid.points
    if mode == "all":
        pairs = itertools.combinations(keys, 2)
    elif mode == "adjacent":
        pairs = zip(keys[:-1], keys[1:])
    else:
        raise ValueError("mode must be 'all' or 'adjacent'")
    lip = 0.0
    for a, b in pairs:
        dist = float(np.max(np.abs(pts[a] - pts[b])))
        if dist == 0:
            continue
        diff = family.values[a] - family.values[b]
        lip = max(lip, _payload_norm(diff, s) / dist)
    return LipNorm(sup + gamma * lip, sup, lip, False)


# ---------------------------------------------------------------------------
# text dump


def dump_coefficients(u):
    """Line-oriented text: header ``d N components reality`` then ``l... j re im``."""
    lines = [f"{u.d} {u.N} {u.ncomp} {u.reality}"]
    grids = [g.reshape(-1) for g in mode_grids(u.d, u.N)]
    for comp in range(u.ncomp):
        flat = u.coeffs[comp].reshape(-1)
        for n in range(flat.size):
            idx = " ".join(str(int(g[n])) for g in grids)
            lines.append(f"{idx} {float(flat[n].real)!r} {float(flat[n].imag)!r}")
    return "\n".join(lines) + "\n"


def load_coefficients(text):
    rows = text.strip().splitlines()
    d, N, ncomp, tag = rows[0].split()
    d, N, ncomp = int(d), int(N), int(ncomp)
    c = np.zeros((ncomp,) + (2 * N + 1,) * (d + 1), complex)
    per = (2 * N + 1) ** (d + 1)
    for n, row in enumerate(rows[1:]):
        parts = row.split()
        comp = n // per
        idx = tuple(int(k) + N for k in parts[: d + 1])
        c[(comp,) + idx] = float(parts[d + 1]) + 1j * float(parts[d + 2])
    return TorusFunction(c, d, tag)
