"""Reduction of the linearized operator to constant coefficients.

Seven successive changes of variables bring

    L = omega.d_phi + i (c2 d_xx + c1 d_x + c0) + i (d2 d_xx + d1 d_x + d0) conj

to the form

    L7 = omega.d_phi + i (m2 d_xx + m1 d_x + m0) + i q0 conj + R7

with real constants m2, m0, a purely imaginary m1 and a remainder R7
that is one order smoother than the differential part.  The steps are

1. a pointwise 2x2 map removing the d_xx coupling to conj(u);
2. a phase-dependent change of the space variable making the d_xx
   coefficient independent of x;
3. a reparametrization of time making it constant;
4. a phase-dependent translation making the x-average of the first order
   coefficient constant;
5. multiplication by exp(s) removing the rest of the first order term;
6. a symplectic exponential of an order -1 generator removing the
   x-dependence of the zero order diagonal term;
7. multiplication by exp(Gamma(phi)) making it constant.

Steps 1-5 and 7 are exact pointwise formulas evaluated on an oversampled
grid; step 6 works on Toeplitz block operators.  Step 3 also produces a
scalar factor rho(theta): the conjugated operator equals rho times the
new one, and rho is kept as a separate factor of the left map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fourier_core as fc
from . import nls_model as nm
from . import operator_algebra as oa

# generators below this size are roundoff and the step is skipped
NEGLIGIBLE = 1e-14


class RegularizationError(RuntimeError):
    """A step failed; carries the step index and frequency."""

    def __init__(self, message, step=None, omega=None):
        super().__init__(f"step {step} (omega={omega}): {message}")
        self.step = step
        self.omega = omega


class EllipticityError(ArithmeticError):
    """The second order coefficient matrix lost positivity."""


class SmallnessError(ArithmeticError):
    """A generator is too large for its series to be trusted."""


@dataclass(frozen=True)
class RegConfig:
    """Cutoffs and tolerances of the reduction.

    ``Nc`` is the cutoff of the coefficient functions, ``J``/``L`` the
    space/time box of the Toeplitz remainder and ``pad`` the extra room
    used while conjugating in step 6.
    """

    Nc: int = 16
    J: int = 16
    L: int = 16
    pad: int = 6
    oversample: int = 4
    series_tol: float = 1e-16
    series_cap: int = 30
    divisor_floor: float = 1e-10
    s0: float = 1.5
    smallness: float = 0.5


# ---------------------------------------------------------------------------
# grid helpers


def _grid(N, oversample):
    return fc.grid_size(N, oversample)


def _vals(f, M):
    return fc.to_grid(f, M)


def _to_func(values, N, d, real=False):
    out = fc.from_grid(values, N, d)
    return out.real_part().with_reality("real") if real else out


def _point_eval(f, pts, M):
    """Values of ``f`` at x = pts on the phi-grid of size M; pts shape (M,)*(d+1)."""
    d = f.d
    flat = pts.reshape(M**d, M)
    return fc.evaluate_at_x(f, flat, 0, M).reshape(pts.shape)


def _coeff_values(Lop, M):
    c = [_vals(f, M) for f in Lop.c]
    dd = [_vals(f, M) for f in Lop.dcoef]
    return c, dd


def _make_op(Lop, c, dd, N, remainder=None, meta=None):
    d = Lop.d
    cf = tuple(_to_func(v, N, d) for v in c)
    df = tuple(_to_func(v, N, d) for v in dd)
    return nm.DifferentialOperator(Lop.omega, cf, df, remainder, Lop.oversample, dict(meta or {}))


def _slice_grid(K, factor=4):
    M = factor * (2 * K + 1)
    return M, 2 * np.pi * np.arange(M) / M


def _x_series_at(coeffs, x):
    K = (coeffs.size - 1) // 2
    return np.exp(1j * np.outer(x, fc.freqs(K))) @ coeffs


def _x_project(vals, K):
    M = vals.size
    spec = np.fft.fft(vals) / M
    return spec[np.arange(-K, K + 1) % M]


def _eval_phi(f, phi):
    """Value at time angle ``phi`` of an x-independent function."""
    return complex(nm.x_coefficients(f, phi)[f.N])


# ---------------------------------------------------------------------------
# transformations


class PointwiseTransformation(oa.Transformation):
    """u -> alpha u + beta conj(u) with functions alpha, beta of (phi, x).

    ``alpha`` is given directly or as ``exp(log_alpha)``; ``beta`` may be
    None.  The inverse uses the pointwise inverse matrix.
    """

    kind = "pointwise"

    def __init__(self, d, alpha=None, beta=None, log_alpha=None, name="pointwise", symplectic=True):
        self.d = d
        self.alpha = alpha
        self.beta = beta
        self.log_alpha = log_alpha
        self.name = name
        self.symplectic = symplectic

    def _ab(self, vals_of):
        if self.log_alpha is not None:
            a = np.exp(vals_of(self.log_alpha))
        else:
            a = vals_of(self.alpha)
        b = vals_of(self.beta) if self.beta is not None else np.zeros_like(a)
        return a, b

    def _act(self, W, N, inverse):
        N = W.N if N is None else N
        Nf = max(f.N for f in (self.alpha, self.beta, self.log_alpha) if f is not None)
        M = fc.grid_size(max(N, W.N) + Nf, 3)
        a, b = self._ab(lambda f: _vals(f, M))
        wp, wm = _vals(W.component(0), M), _vals(W.component(1), M)
        if inverse:
            det = np.abs(a) ** 2 - np.abs(b) ** 2
            a, b = np.conj(a) / det, -b / det
        top = a * wp + b * wm
        bot = np.conj(a) * wm + np.conj(b) * wp
        out = np.stack([fc.from_grid(top, N, W.d).c, fc.from_grid(bot, N, W.d).c])
        return fc.TorusFunction(out, W.d, W.reality)

    def apply(self, W, N=None):
        return self._act(W, N, False)

    def apply_inverse(self, W, N=None):
        return self._act(W, N, True)

    def _slice(self, phi, v, inverse):
        K = (v.shape[1] - 1) // 2
        M, x = _slice_grid(K)
        a, b = self._ab(lambda f: _x_series_at(nm.x_coefficients(f, phi), x))
        if inverse:
            det = np.abs(a) ** 2 - np.abs(b) ** 2
            a, b = np.conj(a) / det, -b / det
        vp, vm = _x_series_at(v[0], x), _x_series_at(v[1], x)
        return np.stack([_x_project(a * vp + b * vm, K), _x_project(np.conj(a) * vm + np.conj(b) * vp, K)])

    def slice_apply(self, phi, v):
        return self._slice(phi, v, False)

    def slice_apply_inverse(self, phi, v):
        return self._slice(phi, v, True)

    def determinant_defect(self, M=64):
        a, b = self._ab(lambda f: _vals(f, M))
        return float(np.max(np.abs(np.abs(a) ** 2 - np.abs(b) ** 2 - 1.0)))


class SpaceDiffeoTransformation(oa.Transformation):
    """u(phi, x) -> sqrt(1 + xi_x) u(phi, x + xi(phi, x)).

    ``xihat`` describes the inverse map x = y + xihat(phi, y).  For an
    x-independent ``xi`` this is a phase-dependent translation.
    """

    kind = "space-diffeo"

    def __init__(self, xi, xihat, name="space-diffeo"):
        self.xi = xi
        self.xihat = xihat
        self.d = xi.d
        self.name = name

    def apply(self, W, N=None):
        N = W.N if N is None else N
        return fc.compose_space_diffeo(W, self.xi, jacobian=True, N=N)

    def apply_inverse(self, W, N=None):
        N = W.N if N is None else N
        return fc.compose_space_diffeo(W, self.xihat, jacobian=True, N=N)

    def _slice(self, phi, v, xi):
        K = (v.shape[1] - 1) // 2
        M, x = _slice_grid(K)
        xc = nm.x_coefficients(xi, phi)
        shift = _x_series_at(xc, x).real
        jac = 1.0 + _x_series_at(1j * fc.freqs(xi.N) * xc, x).real
        pts = x + shift
        out = [_x_project(np.sqrt(jac) * _x_series_at(v[k], pts), K) for k in range(2)]
        return np.stack(out)

    def slice_apply(self, phi, v):
        return self._slice(phi, v, self.xi)

    def slice_apply_inverse(self, phi, v):
        return self._slice(phi, v, self.xihat)


class TimeReparamTransformation(oa.Transformation):
    """u(phi, x) -> u(phi + omega alpha(phi), x).

    On a phase slice this is the identity; it moves the time angle at
    which the factors to its right are evaluated.
    """

    kind = "time-reparam"

    def __init__(self, alpha, alpha_inv, omega, name="time-reparam"):
        self.alpha = alpha
        self.alpha_inv = alpha_inv
        self.omega = np.atleast_1d(np.asarray(omega, float))
        self.d = alpha.d
        self.name = name

    def apply(self, W, N=None):
        return fc.compose_time_diffeo(W, self.alpha, self.omega, N=W.N if N is None else N)

    def apply_inverse(self, W, N=None):
        return fc.compose_time_diffeo(W, self.alpha_inv, self.omega, N=W.N if N is None else N)

    def slice_apply(self, phi, v):
        return v.copy()

    slice_apply_inverse = slice_apply

    def time_map(self, phi):
        phi = np.atleast_1d(np.asarray(phi, float))
        return phi + self.omega * _eval_phi(self.alpha, phi).real

    def inverse_time_map(self, theta):
        theta = np.atleast_1d(np.asarray(theta, float))
        return theta + self.omega * _eval_phi(self.alpha_inv, theta).real


class ScalarFactor(oa.Transformation):
    """Multiplication by a positive function rho(phi); scales the symplectic form by rho^2."""

    kind = "scalar-factor"
    symplectic = False

    def __init__(self, rho, name="rho"):
        self.rho = rho
        self.d = rho.d
        self.name = name

    def _act(self, W, N, power):
        N = W.N if N is None else N
        M = fc.grid_size(max(N, W.N) + self.rho.N, 3)
        r = _vals(self.rho, M).real ** power
        out = np.stack([fc.from_grid(r * _vals(W.component(k), M), N, W.d).c for k in range(2)])
        return fc.TorusFunction(out, W.d, W.reality)

    def apply(self, W, N=None):
        return self._act(W, N, 1)

    def apply_inverse(self, W, N=None):
        return self._act(W, N, -1)

    def slice_apply(self, phi, v):
        return v * _eval_phi(self.rho, phi).real

    def slice_apply_inverse(self, phi, v):
        return v / _eval_phi(self.rho, phi).real

    def defect(self, M=64):
        return float(np.max(np.abs(_vals(self.rho, M).real - 1.0)))


# ---------------------------------------------------------------------------
# pointwise conjugation


def _jet(f, M, omega):
    """Grid values of f, f_x, f_xx and omega.d_phi f."""
    return (
        _vals(f, M),
        _vals(fc.dx(f, 1), M),
        _vals(fc.dx(f, 2), M),
        _vals(fc.derivative(f, "omega", omega), M),
    )


def _exp_jet(s, M, omega):
    v, vx, vxx, vt = _jet(s, M, omega)
    a = np.exp(v)
    return a, vx * a, (vxx + vx**2) * a, vt * a


def conjugate_pointwise(c, dd, ja, jb):
    """New coefficient values after u = alpha v + beta conj(v).

    ``c``, ``dd`` are lists (order 0, 1, 2) of grid values; ``ja``, ``jb``
    are jets (value, x, xx, omega.d_phi) of alpha and beta.
    """
    c0, c1, c2 = c
    d0, d1, d2 = dd
    a, ax, axx, at = ja
    b, bx, bxx, bt = jb
    cb, cbx, cbxx = np.conj(b), np.conj(bx), np.conj(bxx)
    ca, cax, caxx = np.conj(a), np.conj(ax), np.conj(axx)
    X2 = 1j * (c2 * a + d2 * cb)
    X1 = 1j * (2 * c2 * ax + c1 * a + 2 * d2 * cbx + d1 * cb)
    X0 = at + 1j * (c2 * axx + c1 * ax + c0 * a + d2 * cbxx + d1 * cbx + d0 * cb)
    Y2 = 1j * (c2 * b + d2 * ca)
    Y1 = 1j * (2 * c2 * bx + c1 * b + 2 * d2 * cax + d1 * ca)
    Y0 = bt + 1j * (c2 * bxx + c1 * bx + c0 * b + d2 * caxx + d1 * cax + d0 * ca)
    det = np.abs(a) ** 2 - np.abs(b) ** 2
    X, Y = (X0, X1, X2), (Y0, Y1, Y2)
    nc = [(ca * X[k] - b * np.conj(Y[k])) / (1j * det) for k in range(3)]
    nd = [(ca * Y[k] - b * np.conj(X[k])) / (1j * det) for k in range(3)]
    return nc, nd


# ---------------------------------------------------------------------------
# step results


@dataclass
class StepResult:
    """Outcome of one conjugation step."""

    index: int
    name: str
    operator: nm.DifferentialOperator
    transformation: oa.Transformation
    artifacts: dict = field(default_factory=dict)
    rho: object = None


def _real_check(f, what, tol=1e-8):
    scale = max(1e-300, f.max_abs_coeff())
    v = fc.sobolev_norm(f.imag_part(), 0)
    if v > tol * max(1.0, scale):
        raise nm.StructureError(f"{what} is not real (imaginary part {v:.2e})")
    return f.real_part().with_reality("real")


def _imag_check(f, what, tol=1e-8):
    v = fc.sobolev_norm(f.real_part(), 0)
    if v > tol * max(1.0, f.max_abs_coeff()):
        raise nm.StructureError(f"{what} is not purely imaginary (real part {v:.2e})")
    return 1j * f.imag_part()


def step1_diagonalize_a2(L0, config=RegConfig()):
    """Remove the d_xx coupling to conj(u) with a pointwise map of unit determinant.

    With lambda = sqrt(c2^2 - |d2|^2) and k = sqrt(2 lambda (c2 + lambda)),
    alpha = (c2 + lambda)/k and beta = -d2/k; the new d_xx coefficient is
    lambda and the conj coupling at order two vanishes.
    """
    d, N = L0.d, L0.Nc
    M = _grid(N, config.oversample)
    c2 = _real_check(L0.c[2], "second order coefficient")
    c2v = _vals(c2, M).real
    d2v = _vals(L0.dcoef[2], M)
    rad = c2v**2 - np.abs(d2v) ** 2
    if np.min(rad) <= 0 or np.min(c2v) <= 0:
        raise EllipticityError(f"(1+a2)^2 - |b2|^2 = {np.min(rad):.3g} is not positive")
    lam = np.sqrt(rad)
    k = np.sqrt(2 * lam * (c2v + lam))
    alpha = _to_func((c2v + lam) / k, N, d, real=True)
    beta = _to_func(-d2v / k, N, d)
    if beta.max_abs_coeff() <= NEGLIGIBLE:
        beta = None
        if fc.sobolev_norm(alpha - 1.0, 0) <= NEGLIGIBLE:
            return StepResult(1, "diagonalize second order", L0, oa.IdentityTransformation(), {"alpha": alpha, "beta": None, "det_defect": 0.0})
    ja = _jet(alpha, M, L0.omega)
    jb = _jet(beta, M, L0.omega) if beta is not None else tuple(np.zeros_like(ja[0]) for _ in range(4))
    c, dd = _coeff_values(L0, M)
    nc, nd = conjugate_pointwise(c, dd, ja, jb)
    L1 = _make_op(L0, nc, nd, N)
    T1 = PointwiseTransformation(d, alpha=alpha, beta=beta, name="T1")
    return StepResult(1, "diagonalize second order", L1, T1, {"alpha": alpha, "beta": beta, "det_defect": T1.determinant_defect()})


def step2_space_diffeo(L1, config=RegConfig()):
    """Make the d_xx coefficient independent of x by y = x + xi(phi, x).

    The new coefficient is (mean_x c2^{-1/2})^{-2}; xi = d_x^{-1} rho0
    with rho0 = sqrt(c2_new) c2^{-1/2} - 1.
    """
    d, N = L1.d, L1.Nc
    om = L1.omega
    M = _grid(N, config.oversample)
    c2 = _real_check(L1.c[2], "second order coefficient")
    c2v = _vals(c2, M).real
    if np.max(np.abs(c2v - 1.0)) >= 0.5:
        raise EllipticityError("second order coefficient too far from 1")
    inv_sqrt = c2v**-0.5
    mean_inv = np.mean(inv_sqrt, axis=-1, keepdims=True)
    c2_new = np.broadcast_to(mean_inv**-2, c2v.shape)
    rho0 = np.sqrt(c2_new) * inv_sqrt - 1.0
    xi = fc.dx_inverse(_to_func(rho0, N, d, real=True)).with_reality("real")
    a2_phi = _to_func(c2_new, N, d, real=True)
    if xi.max_abs_coeff() <= NEGLIGIBLE:
        return StepResult(2, "space diffeomorphism", L1, oa.IdentityTransformation(), {"xi": xi, "xihat": xi, "a2_phi": a2_phi})
    try:
        xihat, inv_res = fc.invert_diffeo(xi, N=N, oversample=config.oversample, return_residual=True)
    except fc.DiffeoError as exc:
        raise RegularizationError(str(exc), step=2, omega=om) from exc
    # jets of xi at x, then evaluated at x = y + xihat(y)
    X = fc.grid_points(M, d)
    pts = X[-1] + _vals(xihat, M).real
    at = lambda f: _point_eval(f, pts, M)
    q = 1.0 + at(fc.dx(xi, 1)).real
    qx = at(fc.dx(xi, 2)).real
    qxx = at(fc.dx(xi, 3)).real
    xit = at(fc.derivative(xi, "omega", om)).real
    qt = at(fc.derivative(fc.dx(xi, 1), "omega", om)).real
    gx_g = qx / (2 * q)
    gxx_g = qxx / (2 * q) - qx**2 / (4 * q**2)
    gt_g = qt / (2 * q)
    c = [at(f) for f in L1.c]
    dd = [at(f) for f in L1.dcoef]
    nc = [
        c[0] + c[2] * gxx_g + c[1] * gx_g - 1j * gt_g,
        2 * c[2] * qx + c[1] * q - 1j * xit,
        c[2] * q**2,
    ]
    nd = [dd[0] + dd[2] * gxx_g + dd[1] * gx_g, 2 * dd[2] * qx + dd[1] * q, dd[2] * q**2]
    L2 = _make_op(L1, nc, nd, N)
    T2 = SpaceDiffeoTransformation(xi, xihat, name="T2")
    return StepResult(2, "space diffeomorphism", L2, T2, {"xi": xi, "xihat": xihat, "a2_phi": a2_phi, "inverse_residual": inv_res})


def step3_time_reparam(L2, config=RegConfig()):
    """Make the d_xx coefficient constant by reparametrizing time.

    m2 is the phi-average of the (x-independent) d_xx coefficient;
    omega.d_phi alpha = (c2 - m2)/m2.  The conjugated operator equals
    rho(theta) times the returned one.
    """
    d, N = L2.d, L2.Nc
    om = L2.omega
    c2 = _real_check(fc.average_x(L2.c[2]), "second order coefficient")
    m2 = float(c2.mean().real)
    rhs = (c2 - m2) * (1.0 / m2)
    try:
        alpha = fc.omega_dphi_inverse(rhs, om, config.divisor_floor).with_reality("real")
    except fc.ResonanceError as exc:
        raise RegularizationError(str(exc), step=3, omega=om) from exc
    one = fc.constant(1.0, d, N)
    if alpha.max_abs_coeff() <= NEGLIGIBLE:
        L3 = nm.DifferentialOperator(om, (L2.c[0], L2.c[1], one * m2), L2.dcoef, None, L2.oversample)
        return StepResult(3, "time reparametrization", L3, oa.IdentityTransformation(), {"alpha": alpha, "alpha_inv": alpha, "m2": m2}, rho=one.with_reality("real"))
    jac = one + fc.derivative(alpha, "omega", om)
    M = _grid(N, config.oversample)
    if np.max(np.abs(_vals(jac, M).real - 1.0)) >= 1.0:
        raise RegularizationError("sup |omega.d_phi alpha| >= 1", step=3, omega=om)
    alpha_inv = fc.invert_time_diffeo(alpha, om, N=N, oversample=config.oversample)
    jv = _vals(jac, M).real

    def pull(f):
        q = _to_func(_vals(f.resize(N), M) / jv, N, d)
        return fc.compose_time_diffeo(q, alpha_inv, om, N=N, oversample=config.oversample)

    new_c = [pull(f) for f in L2.c]
    new_d = [pull(f) for f in L2.dcoef]
    rho = fc.compose_time_diffeo(jac.with_reality("real"), alpha_inv, om, N=N, oversample=config.oversample)
    L3 = nm.DifferentialOperator(om, tuple(new_c), tuple(new_d), None, L2.oversample)
    T3 = TimeReparamTransformation(alpha, alpha_inv, om, name="T3")
    return StepResult(3, "time reparametrization", L3, T3, {"alpha": alpha, "alpha_inv": alpha_inv, "m2": m2}, rho=rho.real_part().with_reality("real"))


def step4_translation(L3, config=RegConfig()):
    """Make the x-average of the first order coefficient constant by a translation.

    m1 is the full average of c1 (purely imaginary); beta = i (omega.d)^{-1} V
    with V = m1 - mean_x c1 must be real.
    """
    d, N = L3.d, L3.Nc
    om = L3.omega
    c1 = L3.c[1]
    m1 = complex(c1.mean())
    scale = max(1.0, c1.max_abs_coeff())
    if abs(m1.real) > 1e-8 * scale:
        raise nm.StructureError(f"first order average not imaginary (Re m1 = {m1.real:.2e})")
    m1 = 1j * m1.imag
    V = fc.constant(m1, d, N) - fc.average_x(c1)
    try:
        beta = 1j * fc.omega_dphi_inverse(V, om, config.divisor_floor)
    except fc.ResonanceError as exc:
        raise RegularizationError(str(exc), step=4, omega=om) from exc
    try:
        beta = _real_check(beta, "translation beta")
    except nm.StructureError as exc:
        raise RegularizationError(str(exc), step=4, omega=om) from exc
    if beta.max_abs_coeff() <= NEGLIGIBLE:
        return StepResult(4, "translation", L3, oa.IdentityTransformation(), {"beta": beta, "m1": m1})
    back = -beta

    def shift(f):
        return fc.compose_space_diffeo(f, back, oversample=config.oversample, N=N)

    new_c = [shift(f) for f in L3.c]
    new_c[1] = new_c[1] - 1j * fc.derivative(beta, "omega", om)
    new_d = [shift(f) for f in L3.dcoef]
    L4 = nm.DifferentialOperator(om, tuple(new_c), tuple(new_d), None, L3.oversample)
    T4 = SpaceDiffeoTransformation(beta, back, name="T4")
    return StepResult(4, "translation", L4, T4, {"beta": beta, "m1": m1})


def step5_descent_mult(L4, m1, config=RegConfig()):
    """Remove the x-dependent part of the first order term with exp(s).

    s solves 2 m2 s_x + c1 - m1 = 0 and is purely imaginary.
    """
    d, N = L4.d, L4.Nc
    om = L4.omega
    m2 = float(L4.c[2].mean().real)
    r = L4.c[1] - m1
    s = fc.dx_inverse(r) * (-1.0 / (2 * m2))
    s = _imag_check(s, "descent exponent s")
    if s.max_abs_coeff() <= NEGLIGIBLE:
        return StepResult(5, "descent multiplication", L4, oa.IdentityTransformation(), {"s": s})
    M = _grid(N, config.oversample)
    ja = _exp_jet(s, M, om)
    jb = tuple(np.zeros_like(ja[0]) for _ in range(4))
    c, dd = _coeff_values(L4, M)
    nc, nd = conjugate_pointwise(c, dd, ja, jb)
    L5 = _make_op(L4, nc, nd, N)
    T5 = PointwiseTransformation(d, log_alpha=s, name="T5")
    eq_res = fc.sobolev_norm(2 * m2 * fc.dx(s) + r - fc.average_x(r), 0)
    return StepResult(5, "descent multiplication", L5, T5, {"s": s, "equation_residual": eq_res})


def upsilon_symbol(J):
    """Symbol j/(1+j^2) of the order -1 multiplier used in step 6."""
    j = np.arange(-J, J + 1, dtype=float)
    return j / (1.0 + j**2)


def step6_generator(a, J, L):
    """Block operator of G = i (a Ups + Ups a)/2 (real, skew, order -1)."""
    ups = upsilon_symbol(J)
    S = oa._stripe_symbol(a, J, L)
    plus = 0.5j * S * (ups[None, :] + ups[:, None])
    data = np.zeros(S.shape[:-2] + (2, 2 * J + 1, 2, 2 * J + 1), complex)
    data[..., 0, :, 0, :] = plus
    return oa.realify_from_plus(oa.BlockOperator(data, a.d))


def step6_pseudo_descent(L5, config=RegConfig()):
    """Remove the x-dependence of the zero order diagonal term.

    Conjugates with exp(G), G = i (a Ups + Ups a)/2, a = d_x^{-1}(a0 - mean_x a0)/(2 m2).
    The result keeps the differential part with x-averaged zero order
    coefficient and collects the rest into a Toeplitz remainder.
    """
    om = L5.omega
    m2 = float(L5.c[2].mean().real)
    c0 = _real_check(L5.c[0], "zero order coefficient after step 5")
    avg = fc.average_x(c0)
    a = (fc.dx_inverse(c0 - avg) * (1.0 / (2 * m2))).with_reality("real")
    new_c = (avg, L5.c[1], L5.c[2])
    if a.max_abs_coeff() <= NEGLIGIBLE:
        L6 = nm.DifferentialOperator(om, new_c, L5.dcoef, None, L5.oversample)
        return StepResult(6, "pseudo-differential descent", L6, oa.IdentityTransformation(), {"a": a, "w": 1j * a, "terms": 0})
    Jp, Lp = config.J + config.pad, config.L + config.pad
    Gp = step6_generator(a, Jp, Lp)
    size = oa.decay_norm(Gp, config.s0)
    if size > config.smallness:
        raise SmallnessError(f"step 6 generator too large ({size:.3g})")
    A5 = L5.block(Jp, Lp)
    Lt = nm.DifferentialOperator(om, new_c, L5.dcoef, None, L5.oversample)
    At = Lt.block(Jp, Lp)
    conj = oa.conjugate_series(A5, Gp, om, tol=config.series_tol, max_terms=config.series_cap, s0=config.s0, L=Lp)
    R6 = (conj - At).resize(config.J, config.L)
    G = Gp.resize(config.J, config.L)
    fwd, n1 = oa.exp_series(G, config.series_tol, config.series_cap, config.s0)
    inv, _ = oa.exp_series(-G, config.series_tol, config.series_cap, config.s0)
    T6 = oa.OperatorTransformation(fwd, inv, kind="exp-of-generator", name="T6", meta={"terms": n1})
    L6 = nm.DifferentialOperator(om, new_c, L5.dcoef, R6, L5.oversample)
    return StepResult(6, "pseudo-differential descent", L6, T6, {"a": a, "w": 1j * a, "generator": G, "terms": n1, "generator_size": size})


def step7_time_mult(L6, m, config=RegConfig()):
    """Make the zero order diagonal coefficient constant with exp(Gamma(phi)).

    m0 = m + mean(a0_hat); Gamma = -i (omega.d)^{-1}(c0 - m0) is imaginary.
    """
    d, N = L6.d, L6.Nc
    om = L6.omega
    c0 = _real_check(fc.average_x(L6.c[0]), "averaged zero order coefficient")
    m0 = float(c0.mean().real)
    try:
        Gam = -1j * fc.omega_dphi_inverse(c0 - m0, om, config.divisor_floor)
    except fc.ResonanceError as exc:
        raise RegularizationError(str(exc), step=7, omega=om) from exc
    Gam = _imag_check(Gam, "Gamma")
    if Gam.max_abs_coeff() <= NEGLIGIBLE:
        return StepResult(7, "time multiplication", L6, oa.IdentityTransformation(), {"Gamma": Gam, "m0": m0})
    M = _grid(N, config.oversample)
    ja = _exp_jet(Gam, M, om)
    jb = tuple(np.zeros_like(ja[0]) for _ in range(4))
    c, dd = _coeff_values(L6, M)
    nc, nd = conjugate_pointwise(c, dd, ja, jb)
    R7 = None
    if L6.remainder is not None:
        R = L6.remainder
        Ne = max(N, R.L)
        eG = fc.apply_pointwise(np.exp, Gam, N=Ne)
        emG = fc.apply_pointwise(lambda v: np.exp(-v), Gam, N=Ne)
        Mp = oa.from_multiplication(eG, "diagonal", J=R.J, L=R.L)
        Mm = oa.from_multiplication(emG, "diagonal", J=R.J, L=R.L)
        R7 = oa.compose(Mm, oa.compose(R, Mp, R.L), R.L)
    L7 = _make_op(L6, nc, nd, N, remainder=R7)
    T7 = PointwiseTransformation(d, log_alpha=Gam, name="T7")
    return StepResult(7, "time multiplication", L7, T7, {"Gamma": Gam, "m0": m0})


# ---------------------------------------------------------------------------
# diagnostics


def structural_zeros(Lop, step, m1=None, m2=None, m0=None):
    """Sobolev norms of the coefficients that must vanish after ``step``."""
    out = {}
    c0, c1, c2 = Lop.c
    d0, d1, d2 = Lop.dcoef
    jnz = lambda f: fc.sobolev_norm(f - fc.average_x(f), 0)
    if step >= 1:
        out["d2"] = fc.sobolev_norm(d2, 0)
        out["d1"] = fc.sobolev_norm(d1, 0)
        out["c2_imag"] = fc.sobolev_norm(c2.imag_part(), 0)
    if step >= 2:
        out["c2_x_dependence"] = jnz(c2)
        out["c1_real"] = fc.sobolev_norm(c1.real_part(), 0)
    if step >= 3 and m2 is not None:
        out["c2_minus_m2"] = fc.sobolev_norm(c2 - m2, 0)
    if step >= 4 and m1 is not None:
        out["c1_avg_minus_m1"] = fc.sobolev_norm(fc.average_x(c1) - m1, 0)
    if step >= 5 and m1 is not None:
        out["c1_minus_m1"] = fc.sobolev_norm(c1 - m1, 0)
        out["c0_imag"] = fc.sobolev_norm(c0.imag_part(), 0)
    if step >= 6:
        out["c0_x_dependence"] = jnz(c0)
    if step >= 7 and m0 is not None:
        out["c0_minus_m0"] = fc.sobolev_norm(c0 - m0, 0)
    if step < 6:
        out["remainder"] = 0.0 if Lop.remainder is None else Lop.remainder.max_abs()
    return out


def _random_pair(rng, d, Nh):
    return fc.pair(fc.random_function(rng, d, Nh, decay=0.6, amplitude=1.0))


def conjugation_residual(L_prev, L_next, T, rho=None, samples=3, Nh=4, Nbig=None, s0=1.5, seed=0):
    """max over random h of |T^{-1} L_prev T h - rho L_next h|_{s0} / |h|_{s0+2}."""
    rng = np.random.default_rng(seed)
    d = L_prev.d
    Nbig = Nh + 2 * max(L_prev.Nc, L_next.Nc) if Nbig is None else Nbig
    worst = 0.0
    for _ in range(samples):
        h = _random_pair(rng, d, Nh)
        H = h.resize(Nbig)
        lhs = T.apply_inverse(L_prev.apply(T.apply(H, Nbig), Nbig), Nbig)
        rhs = L_next.apply(H, Nbig)
        if rho is not None:
            rhs = ScalarFactor(rho).apply(rhs, Nbig)
        worst = max(worst, fc.sobolev_norm(lhs - rhs, s0) / fc.sobolev_norm(h, s0 + 2))
    return float(worst)


# ---------------------------------------------------------------------------
# full reduction


@dataclass
class RegularizationOutput:
    """Result of the seven steps at one frequency."""

    L0: nm.DifferentialOperator
    L7: nm.DifferentialOperator
    m2: float
    m1: complex
    m0: float
    q0: fc.TorusFunction
    R: oa.BlockOperator
    V1: oa.Chain
    V2: oa.Chain
    steps: list
    step_artifacts: dict
    report: dict = field(default_factory=dict)

    @property
    def omega(self):
        return self.L0.omega

    def diagonal(self, J):
        """Diagonal of the constant part, shape (2, 2J+1)."""
        j = np.arange(-J, J + 1, dtype=float)
        mu1 = self.m1.imag
        plus = 1j * (self.m0 - self.m2 * j**2) - 1j * mu1 * j
        minus = -1j * (self.m0 - self.m2 * j**2) - 1j * mu1 * j
        return np.stack([plus, minus])

    def remainder_block(self, J=None, L=None):
        """Everything in L7 except omega.d_phi and the constant diagonal."""
        J = self.R.J if J is None else J
        L = self.R.L if L is None else L
        full = self.L7.block(J, L)
        return full - oa.diagonal_operator(self.diagonal(J), self.L7.d, L)


def regularize(z, params, plugin, config=RegConfig(), check=True, residual_samples=2, seed=0):
    """Run steps 1-7 for the linearized operator at the state ``z``.

    Parameters
    ----------
    z : TorusFunction
        State (scalar or pair).
    params : ModelParams
    plugin : NonlinearityPlugin
    config : RegConfig
    check : bool
        Record conjugation residuals and structural zeros per step.

    Returns
    -------
    RegularizationOutput
    """
    om = params.omega
    coeffs = nm.linearized_coefficients(z, params, plugin, config.Nc)
    L0 = coeffs.operator()
    scale = max(fc.sup_norm(f) for f in coeffs.a + coeffs.b)
    if scale > config.smallness:
        raise RegularizationError(f"coefficients too large ({scale:.3g})", step=0, omega=om)
    steps = []
    cur = L0
    m1 = m2 = m0 = None
    try:
        s = step1_diagonalize_a2(cur, config); steps.append(s); cur = s.operator
        s = step2_space_diffeo(cur, config); steps.append(s); cur = s.operator
        s = step3_time_reparam(cur, config); steps.append(s); cur = s.operator; m2 = s.artifacts["m2"]
        s = step4_translation(cur, config); steps.append(s); cur = s.operator; m1 = s.artifacts["m1"]
        s = step5_descent_mult(cur, m1, config); steps.append(s); cur = s.operator
        s = step6_pseudo_descent(cur, config); steps.append(s); cur = s.operator
        s = step7_time_mult(cur, params.m, config); steps.append(s); cur = s.operator; m0 = s.artifacts["m0"]
    except RegularizationError:
        raise
    except (ArithmeticError, ValueError) as exc:
        raise RegularizationError(str(exc), step=len(steps) + 1, omega=om) from exc
    L7 = cur
    R = L7.remainder if L7.remainder is not None else oa.zero_operator(L7.d, config.J, config.L)
    rho = steps[2].rho
    T = [st.transformation for st in steps]
    V2 = oa.Chain(T, name="V2")
    V1 = oa.Chain(T[:3] + [ScalarFactor(rho)] + T[3:], name="V1")
    report = {"steps": []}
    if check:
        prev = L0
        for st in steps:
            entry = {"step": st.index, "name": st.name, "structural": structural_zeros(st.operator, st.index, m1, m2, m0)}
            entry["residual"] = conjugation_residual(prev, st.operator, st.transformation, st.rho, samples=residual_samples, seed=seed)
            report["steps"].append(entry)
            prev = st.operator
    report["rho_defect"] = ScalarFactor(rho).defect()
    arts = {st.index: st.artifacts for st in steps}
    return RegularizationOutput(L0, L7, m2, m1, m0, L7.dcoef[0], R, V1, V2, steps, arts, report)


def end_to_end_residual(out, samples=2, Nh=4, Nbig=None, s0=1.5, seed=0):
    """|V1^{-1} L V2 h - L7 h|_{s0} / |h|_{s0+2} on random h."""
    rng = np.random.default_rng(seed)
    L0, L7 = out.L0, out.L7
    Nbig = Nh + 2 * L0.Nc if Nbig is None else Nbig
    worst = 0.0
    for _ in range(samples):
        h = _random_pair(rng, L0.d, Nh)
        H = h.resize(Nbig)
        lhs = out.V1.apply_inverse(L0.apply(out.V2.apply(H, Nbig), Nbig), Nbig)
        rhs = L7.apply(H, Nbig)
        worst = max(worst, fc.sobolev_norm(lhs - rhs, s0) / fc.sobolev_norm(h, s0 + 2))
    return float(worst)


def regularize_grid(states, params, plugin, grid, config=RegConfig(), **kw):
    """Run :func:`regularize` at every active grid point.

    ``states`` maps grid index to the state at that frequency.  Failures
    are recorded and the point dropped from the returned family.
    """
    values, failures = {}, {}
    for idx, z in states.items():
        p = params.with_(omega=tuple(grid.points[idx]))
        try:
            values[idx] = regularize(z, p, plugin, config, **kw)
        except (RegularizationError, nm.StructureError) as exc:
            failures[idx] = str(exc)
    return fc.ParamFamily(grid, values), failures


class DegeneracyError(ArithmeticError):
    """|m1| fell below the non-degeneracy floor."""


def check_nondegeneracy(m1_values, eps, e, gamma=None, c=None, points=None, raise_on_fail=True):
    """Check c eps <= |m1(omega)| <= C eps and the Lipschitz quotient of m1.

    Parameters
    ----------
    m1_values : dict or ParamFamily
        Grid index -> m1 (or a sequence of values with ``points``).
    eps : float
    e : complex
        First-order average of the nonlinearity.
    gamma : float, optional
        Used to report the fitted constant of quotient * gamma / eps^2.
    c : float, optional
        Lower constant; defaults to |e|/4.
    """
    if isinstance(m1_values, fc.ParamFamily):
        pts = m1_values.grid.points
        keys = sorted(m1_values.values)
        vals = np.array([m1_values.values[k] for k in keys], complex)
        pts = pts[keys]
    else:
        vals = np.asarray(list(m1_values.values()) if isinstance(m1_values, dict) else m1_values, complex)
        pts = None if points is None else np.asarray(points, float).reshape(len(vals), -1)
    report = {"skipped": False}
    if eps == 0:
        report.update(skipped=True, reason="eps = 0")
        return report
    c = abs(e) / 4 if c is None else c
    ratio = np.abs(vals) / eps
    report.update(min_ratio=float(ratio.min()), max_ratio=float(ratio.max()), lower=c, ok=bool(ratio.min() >= c))
    report["max_real_part"] = float(np.max(np.abs(vals.real)))
    if pts is not None and len(vals) > 1:
        q = 0.0
        for a in range(len(vals) - 1):
            dist = np.max(np.abs(pts[a + 1] - pts[a]))
            if dist > 0:
                q = max(q, abs(vals[a + 1] - vals[a]) / dist)
        report["lipschitz_quotient"] = float(q)
        if gamma:
            report["lipschitz_constant"] = float(q * gamma / eps**2)
    if raise_on_fail and not report["ok"]:
        raise DegeneracyError(f"|m1|/eps = {ratio.min():.3g} below {c:.3g}")
    return report
