"""The forced NLS functional and its linearization.

The equation is

    i u_t = u_xx + m u + eps f(omega t, x, u, u_x, u_xx)

with f derived from a real density G(phi, x, xi, eta, xi_x, eta_x) of
u = xi + i eta:

    f = d_{zb0} G - d/dx d_{zb1} G,      d_{zb} = d_Re + i d_Im.

Quasi-periodic solutions u(omega t, x) are zeros of

    F(u) = omega.d_phi u + i (u_xx + m u + eps f),

and the derivative of F along pairs (h, conj h) is the real-linear
operator

    L h = omega.d_phi h + i (c2 h_xx + c1 h_x + c0 h) + i (d2 hb_xx + d1 hb_x + d0 hb)

with c2 = 1 + a2, c1 = a1, c0 = m + a0, d_k = b_k and
a_k = eps W_{z_k} f, b_k = eps W_{zb_k} f (Wirtinger derivatives
W = (d_Re -/+ i d_Im) / 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fourier_core as fc
from . import operator_algebra as oa


class StructureError(ValueError):
    """A plugin or an assembled operator violates a structural identity."""


class ModelEvaluationError(ArithmeticError):
    """Non-finite values during a pointwise evaluation."""


class DegeneracyWarning(UserWarning):
    """The first-order average e of the nonlinearity vanishes."""


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ModelParams:
    """Mass, coupling, frequency vector and function cutoff."""

    m: float = 1.0
    eps: float = 1e-3
    omega: tuple = (1.118033988749895,)
    N: int = 8
    oversample: int = 4

    def __post_init__(self):
        om = tuple(float(w) for w in np.atleast_1d(self.omega))
        object.__setattr__(self, "omega", om)
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.m <= 0:
            raise ValueError("m must be positive")

    @property
    def d(self):
        return len(self.omega)

    def with_(self, **kw):
        data = dict(m=self.m, eps=self.eps, omega=self.omega, N=self.N, oversample=self.oversample)
        data.update(kw)
        return ModelParams(**data)


# ---------------------------------------------------------------------------
# plugins


def _eval_modes(modes, phi, x):
    """sum_k c_k exp(i (l_k . phi + j_k x)); ``phi`` has leading axis d."""
    out = np.zeros(np.shape(x), complex)
    for key, val in modes.items():
        ell, j = np.asarray(key[:-1], float), key[-1]
        arg = j * x
        for k in range(len(ell)):
            arg = arg + ell[k] * phi[k]
        out = out + val * np.exp(1j * arg)
    return out


def _dx_modes(modes):
    return {k: 1j * k[-1] * v for k, v in modes.items() if k[-1] != 0}


class NonlinearityPlugin:
    """Interface of a Hamiltonian nonlinearity.

    Subclasses implement the density ``G``, its first and second partials
    in (xi, eta, xi_x, eta_x), the function ``f`` and the Wirtinger-type
    partials of ``f`` in (z0, z1, z2) = (u, u_x, u_xx) and their
    conjugates, normalized as d_z = d_Re - i d_Im.
    """

    name = "abstract"
    VARS = ("xi", "eta", "xix", "etax")

    def G(self, phi, x, xi, eta, xix, etax):
        raise NotImplementedError

    def G_partials(self, phi, x, xi, eta, xix, etax):
        """Returns (grad, hess): lists of length 4 and 4x4 nested lists."""
        raise NotImplementedError

    def f(self, phi, x, z0, z1, z2):
        raise NotImplementedError

    def f_partials(self, phi, x, z0, z1, z2):
        """Dict with keys 'z0','zb0','z1','zb1','z2','zb2'."""
        raise NotImplementedError

    def modes_cutoff(self):
        """Largest Fourier index of the explicit (phi, x) dependence."""
        return 1


class BuiltinPlugin(NonlinearityPlugin):
    """G = xi Re h + eta Im h + p (xi eta_x - eta xi_x) + kappa |u|^2 |u_x|^2.

    ``h`` and ``p`` are finite mode lists ``{(l_1,...,l_d, j): value}``;
    ``p`` must be real-valued.  The resulting

        f = h - 2 i p u_x - i p_x u - 2 kappa conj(u) u_x^2 - 2 kappa |u|^2 u_xx

    depends on u_xx (quasi-linear) and has first-order average
    e = -2 i mean(p).
    """

    name = "builtin"

    def __init__(self, d=1, h=None, p=None, kappa=1.0):
        self.d = d
        z = (0,) * (d - 1)
        if h is None:
            h = {(1,) + z + (1,): 0.25, (1,) + z + (-1,): 0.25, (-1,) + z + (1,): 0.25, (-1,) + z + (-1,): 0.25}
        if p is None:
            p = {(0,) * d + (0,): 1.0, (1,) + z + (1,): 0.5, (-1,) + z + (-1,): 0.5}
        self.h = {tuple(int(a) for a in k): complex(v) for k, v in h.items()}
        self.p = {tuple(int(a) for a in k): complex(v) for k, v in p.items()}
        for k, v in self.p.items():
            mirror = tuple(-a for a in k)
            if abs(self.p.get(mirror, 0) - np.conj(v)) > 1e-14:
                raise StructureError("p must be real-valued")
        self.px = _dx_modes(self.p)
        self.kappa = float(kappa)

    def modes_cutoff(self):
        keys = list(self.h) + list(self.p)
        return max(max(abs(a) for a in k) for k in keys) if keys else 0

    def _hp(self, phi, x):
        h = _eval_modes(self.h, phi, x)
        p = _eval_modes(self.p, phi, x).real
        return h, p

    def G(self, phi, x, xi, eta, xix, etax):
        h, p = self._hp(phi, x)
        k = self.kappa
        return xi * h.real + eta * h.imag + p * (xi * etax - eta * xix) + k * (xi**2 + eta**2) * (xix**2 + etax**2)

    def G_partials(self, phi, x, xi, eta, xix, etax):
        h, p = self._hp(phi, x)
        k = self.kappa
        r0 = xi**2 + eta**2
        r1 = xix**2 + etax**2
        grad = [
            h.real + p * etax + 2 * k * xi * r1,
            h.imag - p * xix + 2 * k * eta * r1,
            -p * eta + 2 * k * r0 * xix,
            p * xi + 2 * k * r0 * etax,
        ]
        zero = np.zeros_like(xi)
        hess = [
            [2 * k * r1, zero, 4 * k * xi * xix, p + 4 * k * xi * etax],
            [zero, 2 * k * r1, -p + 4 * k * eta * xix, 4 * k * eta * etax],
            [4 * k * xi * xix, -p + 4 * k * eta * xix, 2 * k * r0, zero],
            [p + 4 * k * xi * etax, 4 * k * eta * etax, zero, 2 * k * r0],
        ]
        return grad, hess

    def f(self, phi, x, z0, z1, z2):
        h, p = self._hp(phi, x)
        px = _eval_modes(self.px, phi, x).real
        k = self.kappa
        return h - 2j * p * z1 - 1j * px * z0 - 2 * k * np.conj(z0) * z1**2 - 2 * k * np.abs(z0) ** 2 * z2

    def f_partials(self, phi, x, z0, z1, z2):
        h, p = self._hp(phi, x)
        px = _eval_modes(self.px, phi, x).real
        k = self.kappa
        zb0 = np.conj(z0)
        zero = np.zeros_like(z0)
        return {
            "z0": 2 * (-1j * px - 2 * k * zb0 * z2),
            "zb0": 2 * (-2 * k * z1**2 - 2 * k * z0 * z2),
            "z1": 2 * (-2j * p - 4 * k * zb0 * z1),
            "zb1": zero,
            "z2": 2 * (-2 * k * np.abs(z0) ** 2),
            "zb2": zero,
        }


class ZeroPlugin(NonlinearityPlugin):
    """G = 0, f = 0."""

    name = "zero"

    def G(self, phi, x, xi, eta, xix, etax):
        return np.zeros_like(xi)

    def G_partials(self, phi, x, xi, eta, xix, etax):
        z = np.zeros_like(xi)
        return [z] * 4, [[z] * 4 for _ in range(4)]

    def f(self, phi, x, z0, z1, z2):
        return np.zeros_like(z0)

    def f_partials(self, phi, x, z0, z1, z2):
        z = np.zeros_like(z0)
        return {k: z for k in ("z0", "zb0", "z1", "zb1", "z2", "zb2")}

    def modes_cutoff(self):
        return 0


PLUGINS = {"builtin": BuiltinPlugin, "zero": ZeroPlugin}


def make_plugin(name="builtin", **kw):
    if name not in PLUGINS:
        raise KeyError(f"unknown plugin {name!r}; known: {sorted(PLUGINS)}")
    return PLUGINS[name](**kw)


def validate_plugin(plugin, d=1, samples=64, h=1e-5, tol=1e-6, seed=0):
    """Compare closed-form partials of G against central differences.

    Returns the maximal relative mismatch; raises :class:`StructureError`
    above ``tol``.
    """
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0, 2 * np.pi, (d, samples))
    x = rng.uniform(0, 2 * np.pi, samples)
    v = [rng.normal(0, 0.7, samples) for _ in range(4)]
    grad, hess = plugin.G_partials(phi, x, *v)
    worst = 0.0
    for a in range(4):
        vp = [w.copy() for w in v]
        vm = [w.copy() for w in v]
        vp[a] += h
        vm[a] -= h
        fd = (plugin.G(phi, x, *vp) - plugin.G(phi, x, *vm)) / (2 * h)
        worst = max(worst, np.max(np.abs(fd - grad[a])) / (1 + np.max(np.abs(grad[a]))))
        gp, _ = plugin.G_partials(phi, x, *vp)
        gm, _ = plugin.G_partials(phi, x, *vm)
        for b in range(4):
            fd2 = (gp[b] - gm[b]) / (2 * h)
            worst = max(worst, np.max(np.abs(fd2 - hess[b][a])) / (1 + np.max(np.abs(hess[b][a]))))
    if worst > tol:
        raise StructureError(f"plugin partials disagree with finite differences ({worst:.2e})")
    return float(worst)


# ---------------------------------------------------------------------------
# pointwise helpers


def _grid_fields(u, M):
    """Grid values of u, u_x, u_xx and the grid angles."""
    X = fc.grid_points(M, u.d)
    phi = np.stack(X[:-1]) if u.d else np.zeros((0,) + X[-1].shape)
    z0 = fc.to_grid(u, M)
    z1 = fc.to_grid(fc.derivative(u, "x"), M)
    z2 = fc.to_grid(fc.dx(u, 2), M)
    return phi, X[-1], z0, z1, z2


def _finite(a, what):
    if not np.all(np.isfinite(a)):
        raise ModelEvaluationError(f"non-finite values in {what}")
    return a


def _scalar(U):
    return U.component(0) if U.ncomp == 2 else U


def nonlinearity(u, plugin, N=None, oversample=4):
    """Coefficients of f(phi, x, u, u_x, u_xx) at cutoff ``N``."""
    u = _scalar(u)
    N = u.N if N is None else N
    M = fc.grid_size(max(N, u.N) + plugin.modes_cutoff(), oversample)
    phi, x, z0, z1, z2 = _grid_fields(u, M)
    vals = _finite(plugin.f(phi, x, z0, z1, z2), "f")
    return fc.from_grid(vals, N, u.d)


def eval_F(U, params, plugin, N=None):
    """F(u) = omega.d_phi u + i (u_xx + m u + eps f) as a conjugate pair.

    ``U`` may be a pair or a scalar function; the result is the pair
    (F, conj F) at cutoff ``N`` (default the input cutoff).
    """
    u = _scalar(U)
    N = u.N if N is None else N
    uN = u.resize(max(N, u.N))
    lin = fc.derivative(uN, "omega", params.omega) + 1j * (fc.dx(uN, 2) + params.m * uN)
    out = lin.resize(N)
    if params.eps:
        f = nonlinearity(u, plugin, N, params.oversample)
        out = out + 1j * params.eps * f
    return fc.pair(TorusFunctionScalar(out))


def TorusFunctionScalar(u):
    return fc.TorusFunction(u.coeffs[:1], u.d, "complex")


def complex_residual(U, params, plugin, N=None):
    """i omega.d_phi u - u_xx - m u - eps f  (equals i F)."""
    return 1j * eval_F(U, params, plugin, N).component(0)


def residual_at_points(u, params, plugin, phi, x):
    """Pointwise residual i omega.d_phi u - u_xx - m u - eps f at arbitrary points.

    Evaluates the truncated Fourier series directly (no grids), which makes
    it an independent check of a computed solution.
    """
    u = _scalar(u)
    d, N = u.d, u.N
    grids = [g.reshape(-1) for g in fc.mode_grids(d, N)]
    c = u.c.reshape(-1)
    phi = np.atleast_2d(phi)
    arg = np.outer(x, grids[-1])
    for k in range(d):
        arg = arg + np.outer(phi[k], grids[k])
    E = np.exp(1j * arg)
    om = np.asarray(params.omega)
    wl = sum(om[k] * grids[k] for k in range(d))
    z0 = E @ c
    z1 = E @ (1j * grids[-1] * c)
    z2 = E @ (-(grids[-1] ** 2) * c)
    zt = E @ (1j * wl * c)
    f = plugin.f(phi, x, z0, z1, z2)
    return 1j * zt - z2 - params.m * z0 - params.eps * f


# ---------------------------------------------------------------------------
# Hamiltonian structure


def hamiltonian_energy(u, params, plugin, phi, M=256):
    """H(u) = int 1/2 |u_x|^2 - m/2 |u|^2 - eps G dx at a fixed time angle.

    Its differential is dH(u)[h] = Omega(X(u), h) with
    X(u) = i (u_xx + m u + eps f).
    """
    uj = x_coefficients(_scalar(u), phi)
    K = (uj.size - 1) // 2
    k = fc.freqs(K)
    x = 2 * np.pi * np.arange(M) / M
    E = np.exp(1j * np.outer(x, k))
    z0 = E @ uj
    z1 = E @ (1j * k * uj)
    ph = np.repeat(np.atleast_1d(phi)[:, None], M, axis=1)
    g = plugin.G(ph, x, z0.real, z0.imag, z1.real, z1.imag)
    dens = 0.5 * np.abs(z1) ** 2 - 0.5 * params.m * np.abs(z0) ** 2 - params.eps * g
    return float(np.mean(dens) * 2 * np.pi)


def x_coefficients(u, phi):
    """x-Fourier coefficients of u(phi, .) (length 2N+1)."""
    u = _scalar(u)
    if u.d == 0:
        return u.c.copy()
    phi = np.atleast_1d(np.asarray(phi, float))
    k = fc.freqs(u.N)
    grids = np.meshgrid(*([k] * u.d), indexing="ij")
    ph = np.exp(1j * sum(phi[i] * grids[i] for i in range(u.d)))
    return np.tensordot(ph, u.c, axes=(tuple(range(u.d)), tuple(range(u.d))))


def symplectic_form(u, v, phi=None):
    """Omega(u, v) = Re int i u conj(v) dx.

    ``u``, ``v`` are scalar TorusFunctions (evaluated at the time angle
    ``phi``) or arrays of x-Fourier coefficients.  With TorusFunctions and
    ``phi=None`` the phi-dependent value is returned as a real function.
    """
    if isinstance(u, fc.TorusFunction) and phi is None:
        w = fc.multiply(_scalar(u), _scalar(v).conj(), N=max(u.N, v.N))
        val = 2 * np.pi * fc.average_x(1j * w)
        return val.real_part()
    if isinstance(u, fc.TorusFunction):
        u = x_coefficients(u, phi)
        v = x_coefficients(v, phi)
    u, v = np.asarray(u), np.asarray(v)
    if u.ndim == 2:
        u, v = u[0], v[0]
    n = max(u.size, v.size)
    K = (n - 1) // 2
    u = fc._resize_array(u, (u.size - 1) // 2, K)
    v = fc._resize_array(v, (v.size - 1) // 2, K)
    return float((2 * np.pi * 1j * np.sum(u * np.conj(v))).real)


def check_symplectic(T, samples=20, tol=1e-9, J=6, pad=14, seed=0, return_all=False):
    """Check Omega(T u, T v) = Omega(u, v) on random pairs at random phi.

    ``T`` must offer ``slice_apply(phi, v)`` acting on x-coefficient pairs
    of shape (2, 2K+1) and ``d`` time angles (``T.d`` or 1).

    Returns
    -------
    ok : bool
    violation : float
        max |Omega(Tu,Tv) - Omega(u,v)| / (1 + |u|_1 |v|_1).
    """
    rng = np.random.default_rng(seed)
    d = getattr(T, "d", 1)
    K = J + pad
    worst = 0.0
    k = fc.freqs(K)
    w1 = np.maximum(np.abs(k), 1)
    for _ in range(samples):
        phi = rng.uniform(0, 2 * np.pi, d)
        vecs = []
        for _ in range(2):
            c = np.zeros(2 * K + 1, complex)
            c[K - J : K + J + 1] = rng.standard_normal(2 * J + 1) + 1j * rng.standard_normal(2 * J + 1)
            c *= np.exp(-0.3 * np.abs(k))
            vecs.append(np.stack([c, np.conj(c[::-1])]))
        u, v = vecs
        Tu = T.slice_apply(phi, u)
        Tv = T.slice_apply(phi, v)
        lhs = symplectic_form(Tu[0], Tv[0])
        rhs = symplectic_form(u[0], v[0])
        nu = np.sqrt(np.sum(np.abs(u[0]) ** 2 * w1**2))
        nv = np.sqrt(np.sum(np.abs(v[0]) ** 2 * w1**2))
        worst = max(worst, abs(lhs - rhs) / (1 + nu * nv))
    return worst <= tol, float(worst)


class MultiplicationSlice(oa.Transformation):
    """Slice map u -> g(x) u (and conj(g) conj(u)) for a function of x."""

    def __init__(self, values_fn, d=1, name="mult"):
        self.values_fn = values_fn
        self.d = d
        self.name = name

    def slice_apply(self, phi, v):
        K = (v.shape[1] - 1) // 2
        M = 4 * (2 * K + 1)
        x = 2 * np.pi * np.arange(M) / M
        g = self.values_fn(phi, x)
        out = []
        for comp, gg in ((0, g), (1, np.conj(g))):
            vals = np.fft.ifft(_embed1(v[comp], M)) * M
            spec = np.fft.fft(vals * gg) / M
            out.append(spec[np.arange(-K, K + 1) % M])
        return np.stack(out)


def _embed1(c, M):
    K = (c.size - 1) // 2
    big = np.zeros(M, complex)
    big[np.arange(-K, K + 1) % M] = c
    return big


def real_symplectic_form(w1, w2):
    """Omega on real coordinates (u^1, u^2): int (w^1 w'^2 - w^2 w'^1) dx.

    Arrays of shape (2, M) hold grid values of the two real components;
    with u = u^1 + i u^2 this agrees with :func:`symplectic_form`.
    """
    M = w1.shape[1]
    return float(np.sum(w1[0] * w2[1] - w1[1] * w2[0]) * 2 * np.pi / M)


# ---------------------------------------------------------------------------
# linearized operator


@dataclass
class DifferentialOperator:
    """omega.d_phi + i (c2 d_xx + c1 d_x + c0) + i (d2 d_xx + d1 d_x + d0) conj  [+ R].

    Coefficient functions are scalar TorusFunctions on a common cutoff;
    ``remainder`` is an optional BlockOperator added on the pair space and
    ``time_factor`` an optional positive function of phi multiplying
    omega.d_phi.
    """

    omega: tuple
    c: tuple
    dcoef: tuple
    remainder: object = None
    oversample: int = 4
    meta: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.c[0].d

    @property
    def Nc(self):
        return max(f.N for f in self.c + self.dcoef)

    def apply(self, W, N=None):
        """Pseudo-spectral application to a two-component function."""
        if W.ncomp != 2:
            raise ValueError("expects a two-component function")
        N = W.N if N is None else N
        d = W.d
        Nw = max(N, W.N)
        M = fc.grid_size(self.Nc + Nw + N, 2)
        wp, wm = W.component(0).resize(Nw), W.component(1).resize(Nw)
        gp = [fc.to_grid(fc.dx(wp, k), M) for k in range(3)]
        gm = [fc.to_grid(fc.dx(wm, k), M) for k in range(3)]
        cv = [fc.to_grid(f, M) for f in self.c]
        dv = [fc.to_grid(f, M) for f in self.dcoef]
        top = 1j * sum(cv[k] * gp[k] + dv[k] * gm[k] for k in range(3))
        bot = -1j * sum(np.conj(cv[k]) * gm[k] + np.conj(dv[k]) * gp[k] for k in range(3))
        tp = fc.from_grid(top, N, d)
        tm = fc.from_grid(bot, N, d)
        tp = tp + fc.derivative(wp, "omega", self.omega).resize(N)
        tm = tm + fc.derivative(wm, "omega", self.omega).resize(N)
        out = fc.TorusFunction(np.stack([tp.c, tm.c]), d, W.reality)
        if self.remainder is not None:
            out = out + oa.apply_operator(self.remainder, W, N=N)
        return out

    def block(self, J, L=None):
        """Toeplitz part (everything except omega.d_phi) as a BlockOperator."""
        L = self.Nc if L is None else L
        A = second_order_block(self.c, self.dcoef, J, L)
        if self.remainder is not None:
            A = A + self.remainder.resize(J, max(L, self.remainder.L)).resize(L=L)
        return A

    def coefficient(self, name):
        names = {"c0": self.c[0], "c1": self.c[1], "c2": self.c[2], "d0": self.dcoef[0], "d1": self.dcoef[1], "d2": self.dcoef[2]}
        return names[name]


def second_order_block(c, dcoef, J, L):
    """BlockOperator of i (c2 d_xx + c1 d_x + c0) + i (d2 d_xx + d1 d_x + d0) conj."""
    jj = np.arange(-J, J + 1)
    syms = [np.ones(2 * J + 1), 1j * jj, -(jj**2.0)]
    data = np.zeros(((2 * L + 1),) * c[0].d + (2, 2 * J + 1, 2, 2 * J + 1), complex)
    for k in range(3):
        data[..., 0, :, 0, :] += 1j * oa._stripe_symbol(c[k], J, L) * syms[k][None, :]
        data[..., 0, :, 1, :] += 1j * oa._stripe_symbol(dcoef[k], J, L) * syms[k][None, :]
    return oa.realify_from_plus(oa.BlockOperator(data, c[0].d))


@dataclass
class LinearizedCoefficients:
    """a_k, b_k (k = 0, 1, 2) of the linearized operator at a state."""

    a: tuple
    b: tuple
    m: float
    eps: float
    omega: tuple

    def operator(self):
        d = self.a[0].d
        N = max(f.N for f in self.a + self.b)
        one = fc.constant(1.0, d, N)
        c = (self.a[0] + self.m, self.a[1], self.a[2] + one)
        return DifferentialOperator(self.omega, tuple(x.resize(N) for x in c), tuple(x.resize(N) for x in self.b))

    def hamiltonian_relations(self):
        """Defects of: a2 real; Re a1 = d_x a2; b1 = d_x b2; Im a0 = d_x Im a1 / 2."""
        a0, a1, a2 = self.a
        b0, b1, b2 = self.b
        return {
            "a2_real": fc.sobolev_norm(a2.imag_part(), 0),
            "a1_real_part": fc.sobolev_norm(a1.real_part() - fc.derivative(a2.real_part(), "x"), 0),
            "b1": fc.sobolev_norm(b1 - fc.derivative(b2, "x"), 0),
            "a0_imag": fc.sobolev_norm(a0.imag_part() - 0.5 * fc.derivative(a1.imag_part(), "x"), 0),
        }


def linearized_coefficients(Z, params, plugin, Nc=None):
    """a_k = eps/2 d_{z_k} f and b_k = eps/2 d_{zb_k} f along the state ``Z``."""
    z = _scalar(Z)
    Nc = 2 * z.N + plugin.modes_cutoff() if Nc is None else Nc
    M = fc.grid_size(max(Nc, z.N) + plugin.modes_cutoff(), params.oversample)
    phi, x, z0, z1, z2 = _grid_fields(z, M)
    parts = plugin.f_partials(phi, x, z0, z1, z2)
    half = 0.5 * params.eps
    a = tuple(fc.from_grid(_finite(half * parts[f"z{k}"], "f partials"), Nc, z.d) for k in range(3))
    b = tuple(fc.from_grid(_finite(half * parts[f"zb{k}"], "f partials"), Nc, z.d) for k in range(3))
    a = (a[0], a[1], a[2].with_reality("real"))
    return LinearizedCoefficients(a, b, params.m, params.eps, params.omega)


@dataclass
class LinearizedOperator:
    """omega.d_phi + block, with the block a Toeplitz BlockOperator."""

    omega: tuple
    block: oa.BlockOperator
    differential: DifferentialOperator

    def apply(self, W, N=None):
        return self.differential.apply(W, N)

    def dense(self, P):
        return oa.to_dense(self.block, P, self.omega)


def assemble_linearized(Z, params, plugin, J=None, L=None, Nc=None):
    """Coefficients and Toeplitz assembly of the linearized operator at ``Z``.

    Raises
    ------
    StructureError
        If the assembled coefficients violate the Hamiltonian relations.
    """
    coeffs = linearized_coefficients(Z, params, plugin, Nc)
    rel = coeffs.hamiltonian_relations()
    scale = max(1.0, max(fc.sobolev_norm(f, 0) for f in coeffs.a + coeffs.b))
    if max(rel.values()) > 1e-8 * scale:
        raise StructureError(f"Hamiltonian relations violated: {rel}")
    op = coeffs.operator()
    J = op.Nc if J is None else J
    L = op.Nc if L is None else L
    return coeffs, LinearizedOperator(params.omega, op.block(J, L), op)


# ---------------------------------------------------------------------------
# hypotheses


def check_hyp1(plugin, d=1, samples=4, tol=1e-10, N=6, seed=0, return_error=False):
    """Reconstruct f = d_{zb0} G - d_x d_{zb1} G spectrally and compare with ``plugin.f``.

    Random band-limited states are used; the x-derivative is taken on the
    Fourier side.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        u = fc.random_function(rng, d, N, decay=0.8, amplitude=0.5)
        M = fc.grid_size(4 * N + 2 * plugin.modes_cutoff() + 2, 2)
        phi, x, z0, z1, z2 = _grid_fields(u, M)
        grad, _ = plugin.G_partials(phi, x, z0.real, z0.imag, z1.real, z1.imag)
        gz0 = grad[0] + 1j * grad[1]
        gz1 = grad[2] + 1j * grad[3]
        K = (M - 1) // 2
        q = fc.from_grid(gz1, K, d)
        qx = fc.to_grid(fc.derivative(q, "x"), M)
        f_rec = gz0 - qx
        f_ref = plugin.f(phi, x, z0, z1, z2)
        scale = 1 + np.max(np.abs(f_ref))
        worst = max(worst, float(np.max(np.abs(f_rec - f_ref)) / scale))
    ok = worst <= tol
    return (ok, worst) if return_error else ok


def check_hyp2(plugin, d=1, M=64, floor=1e-8):
    """e = average over T^{d+1} of (1/2) d_{z1} f at the zero state.

    Emits a :class:`DegeneracyWarning` when |e| < ``floor``.
    """
    import warnings

    X = fc.grid_points(M, d)
    phi = np.stack(X[:-1])
    z = np.zeros(X[-1].shape, complex)
    parts = plugin.f_partials(phi, X[-1], z, z, z)
    e = complex(np.mean(0.5 * parts["z1"]))
    if abs(e) < floor:
        warnings.warn(f"non-degeneracy violated: |e| = {abs(e):.2e}", DegeneracyWarning, stacklevel=2)
    return e
