"""Non-resonance predicates and grid measurement of excluded frequencies.

Divisors use the eigenvalues of a normal form in the convention
mu_{sigma,j} = i sigma lambda, so a first Melnikov divisor reads
|i omega.l + mu| and a second one |i omega.l + mu - mu'|.  With
mu = i sigma (m - j^2) this is |omega.l + sigma (m - j^2)|.

"Measure" is the fraction of grid points; every scan is deterministic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .kam import NormalForm, constant_diagonal

KINDS = ("diophantine", "S", "O", "P")


class MelnikovUsageError(ValueError):
    """Index constraints of a test kind are violated."""


def bracket(ell):
    """<l> = max(|l|_inf, 1)."""
    a = np.abs(np.atleast_1d(np.asarray(ell)))
    return max(int(a.max(initial=0)), 1)


def lattice(d, N, nonzero=False):
    """All l in [-N, N]^d as an (M, d) integer array."""
    k = np.arange(-N, N + 1)
    pts = np.array(list(itertools.product(k, repeat=d)), int).reshape(-1, d)
    if nonzero:
        pts = pts[np.any(pts != 0, axis=1)]
    return pts


# ---------------------------------------------------------------------------
# eigenvalue tables


@dataclass
class EigenTable:
    """Eigenvalues mu (2, 2J+1) with the constant asymptotics used outside |j| <= J."""

    mu: np.ndarray
    m2: float = 1.0
    m1: complex = 0.0
    m0: float = 1.0

    @property
    def J(self):
        return (self.mu.shape[1] - 1) // 2

    @classmethod
    def from_normal_form(cls, nf: NormalForm):
        return cls(nf.eigenvalues().copy(), nf.m2, nf.m1, nf.m0)

    @classmethod
    def unperturbed(cls, J, m):
        return cls(constant_diagonal(J, 1.0, 0.0, m), 1.0, 0.0, float(m))

    def __call__(self, sigma, j):
        a = 0 if sigma > 0 else 1
        if abs(j) <= self.J:
            return complex(self.mu[a, j + self.J])
        return complex(constant_diagonal(abs(j), self.m2, self.m1, self.m0)[a, j + abs(j)])

    def b(self, j, sigma=1):
        """b_j with |mu_{sigma,j} - mu_{sigma,-j}| = |j| b_j (j != 0)."""
        if j == 0:
            raise MelnikovUsageError("b_j is undefined at j = 0")
        return abs(self(sigma, j) - self(sigma, -j)) / abs(j)


def _table(provider):
    if isinstance(provider, EigenTable):
        return provider
    if isinstance(provider, NormalForm):
        return EigenTable.from_normal_form(provider)
    raise TypeError("expected an EigenTable or NormalForm")


# ---------------------------------------------------------------------------
# single tests


@dataclass(frozen=True)
class ResonanceQuery:
    kind: str
    ell: tuple
    sigma: int
    j: int
    sigma2: int
    j2: int
    gamma: float
    tau: float
    divisor: float
    threshold: float
    passed: bool


def melnikov_test(kind, provider, omega, ell, sigma=1, j=0, sigma2=None, j2=None, gamma=0.0, tau=3.0):
    """Evaluate one non-resonance condition.

    S: |i w.l + mu - mu'| >= 2 gamma |sigma j^2 - sigma' j'^2| / <l>^tau
    O: |i w.l + mu_{sigma,j} - mu_{sigma,k}| >= 2 gamma / (<l>^tau <j>), l != 0, k = +-j, same sigma
    P: |i w.l + mu_{sigma,j}| >= 2 gamma <j>^2 / <l>^tau
    diophantine: |w.l| >= gamma / |l|^tau, l != 0
    """
    if kind not in KINDS:
        raise MelnikovUsageError(f"unknown kind {kind!r}")
    ell = tuple(int(x) for x in np.atleast_1d(ell))
    om = np.atleast_1d(np.asarray(omega, float))
    if len(ell) != om.size:
        raise MelnikovUsageError("l and omega have different lengths")
    wl = float(np.dot(om, ell))
    br = bracket(ell) ** tau
    sigma2 = sigma if sigma2 is None else sigma2
    j2 = j if j2 is None else j2
    if kind == "diophantine":
        if not any(ell):
            raise MelnikovUsageError("diophantine test needs l != 0")
        div = abs(wl)
        thr = gamma / max(abs(x) for x in ell) ** tau
    else:
        mu = _table(provider)
        if kind == "S":
            div = abs(1j * wl + mu(sigma, j) - mu(sigma2, j2))
            thr = 2 * gamma * abs(sigma * j * j - sigma2 * j2 * j2) / br
        elif kind == "O":
            if not any(ell):
                raise MelnikovUsageError("O test needs l != 0")
            if abs(j2) != abs(j) or sigma2 != sigma:
                raise MelnikovUsageError("O test needs k = +-j and equal sigma")
            div = abs(1j * wl + mu(sigma, j) - mu(sigma, j2))
            thr = 2 * gamma / (br * max(abs(j), 1))
        else:
            div = abs(1j * wl + mu(sigma, j))
            thr = 2 * gamma * max(abs(j), 1) ** 2 / br
    return ResonanceQuery(kind, ell, sigma, j, sigma2, j2, gamma, tau, float(div), float(thr), bool(div >= thr))


# ---------------------------------------------------------------------------
# masks


def diophantine_mask(grid, gamma0, tau0, L_max):
    """Grid points with |omega.l| >= gamma0/|l|^tau0 for all 0 < |l|_inf <= L_max."""
    if L_max < 1:
        raise ValueError("L_max must be >= 1")
    pts = np.asarray(grid.points if hasattr(grid, "points") else grid, float)
    pts = pts.reshape(len(pts), -1)
    ells = lattice(pts.shape[1], L_max, nonzero=True)
    wl = np.abs(pts @ ells.T)
    thr = gamma0 / np.max(np.abs(ells), axis=1).astype(float) ** tau0
    return np.all(wl >= thr[None, :], axis=1)


def _scan_arrays(table, omega, N, J_scan):
    om = np.atleast_1d(np.asarray(omega, float))
    ells = lattice(om.size, N)
    wl = ells @ om
    br = np.max(np.abs(ells), axis=1).clip(min=1).astype(float)
    js = np.arange(-J_scan, J_scan + 1)
    mu = np.array([[table(s, j) for j in js] for s in (1, -1)])
    return ells, wl, br, js, mu


def scan_point(table, omega, gamma, tau, N, J_scan=None, kinds=("S", "O", "P"), exclude_l0=False, o_filter=None):
    """Test every index with |l|_inf <= N and |j| <= J_scan at one frequency.

    ``o_filter(l, j) -> bool`` restricts which O indices are tested
    (used to apply cutoff ranges) with k = -j; untested O indices are
    counted as skipped.  The k = +j half of the O-condition reads
    |omega.l| >= 2 gamma/(<l>^tau <j>) and is always tested.  Returns a dict with pass flags, failure counts, the worst
    ratio divisor/threshold per kind and, for O, the failing (l, sigma, j).
    """
    table = _table(table)
    J_scan = table.J if J_scan is None else J_scan
    ells, wl, br, js, mu = _scan_arrays(table, omega, N, J_scan)
    brt = br**tau
    sig = np.array([1, -1])
    out = {"fail": {}, "ratio": {}, "O_failures": [], "O_same_failures": 0, "O_skipped": 0, "O_tested": 0}
    keep_l = np.ones(len(ells), bool)
    if exclude_l0:
        keep_l = np.any(ells != 0, axis=1)
    if "P" in kinds:
        div = np.abs(1j * wl[:, None, None] + mu[None])
        thr = 2 * gamma * np.maximum(np.abs(js), 1)[None, None, :] ** 2 / brt[:, None, None]
        bad = (div < thr) & keep_l[:, None, None]
        out["fail"]["P"] = int(bad.sum())
        out["ratio"]["P"] = _min_ratio(div, thr, keep_l)
    if "S" in kinds:
        mf = mu.reshape(-1)
        sj = (sig[:, None] * js[None, :] ** 2).reshape(-1)
        div = np.abs(1j * wl[:, None, None] + mf[None, :, None] - mf[None, None, :])
        thr = 2 * gamma * np.abs(sj[:, None] - sj[None, :])[None] / brt[:, None, None]
        bad = (div < thr) & keep_l[:, None, None]
        out["fail"]["S"] = int(bad.sum())
        out["ratio"]["S"] = _min_ratio(div, thr, keep_l)
    if "O" in kinds:
        nz = np.any(ells != 0, axis=1)
        jpos = js != 0
        diff = mu - mu[:, ::-1]  # mu_{sigma,j} - mu_{sigma,-j}
        div = np.abs(1j * wl[:, None, None] + diff[None])
        thr = 2 * gamma / (brt[:, None, None] * np.maximum(np.abs(js), 1)[None, None, :])
        tested = np.broadcast_to((nz[:, None, None] & jpos[None, None, :]), div.shape).copy()
        if o_filter is not None:
            allow = np.array([[o_filter(tuple(l), int(j)) for j in js] for l in ells])
            out["O_skipped"] = int((tested & ~allow[:, None, :]).sum())
            tested &= allow[:, None, :]
        out["O_tested"] = int(tested.sum())
        bad = (div < thr) & tested
        # k = +j: the divisor is |omega.l| for every sigma and j != 0
        same = np.broadcast_to((nz[:, None, None] & jpos[None, None, :]), div.shape)
        bad_same = same & (np.abs(wl)[:, None, None] < thr)
        out["O_same_failures"] = int(bad_same.sum())
        out["fail"]["O"] = int(bad.sum()) + out["O_same_failures"]
        r = np.where(tested & (thr > 0), div / np.where(thr > 0, thr, 1), np.inf)
        rs = np.where(same & (thr > 0), np.abs(wl)[:, None, None] / np.where(thr > 0, thr, 1), np.inf)
        out["ratio"]["O"] = float(min(r.min(initial=np.inf), rs.min(initial=np.inf)))
        for li, a, ji in zip(*np.nonzero(bad)):
            out["O_failures"].append((tuple(int(x) for x in ells[li]), 1 if a == 0 else -1, int(js[ji])))
    out["passed"] = {k: v == 0 for k, v in out["fail"].items()}
    return out


def _min_ratio(div, thr, keep_l):
    thr = np.broadcast_to(thr, div.shape)
    m = (thr > 0) & keep_l.reshape((-1,) + (1,) * (div.ndim - 1))
    if not m.any():
        return float("inf")
    return float(np.min(div[m] / thr[m]))


# ---------------------------------------------------------------------------
# cutoffs


@dataclass(frozen=True)
class CutoffRange:
    ell: tuple
    js: tuple
    lower: float
    upper: float
    jmax: float
    applicable: bool
    note: str = ""

    def __contains__(self, j):
        return abs(int(j)) in self.js


def default_cutoff_constant(omega):
    return 4 * float(np.max(np.abs(np.atleast_1d(omega))))


def cutoff_j_range(ell, omega, eps, e, b, C=None, j_limit=None):
    """Values of |j| that can fail the O-condition at this l.

    Parameters
    ----------
    b : callable or array
        b_j for j >= 1 (``b(j)`` or ``b[j-1]``).
    C : float, optional
        Constant of the bound |j| <= C |l| / (eps |e|); default 4 max|omega|.

    Returns
    -------
    CutoffRange
        ``js`` holds the |j| with |omega.l|/2 <= |j| b_j <= 2 |omega.l| and
        |j| <= C|l|/(eps|e|).  Every other j is certified: its divisor is
        at least |omega.l|/2.
    """
    ell = tuple(int(x) for x in np.atleast_1d(ell))
    if not any(ell):
        return CutoffRange(ell, (), 0.0, 0.0, 0.0, False, "l = 0: O-condition not applicable")
    om = np.atleast_1d(np.asarray(omega, float))
    wl = abs(float(np.dot(om, ell)))
    C = default_cutoff_constant(om) if C is None else C
    ae = abs(e)
    jmax = math.inf if eps * ae == 0 else C * max(abs(x) for x in ell) / (eps * ae)
    bj = b if callable(b) else (lambda j, arr=np.asarray(b, float): float(arr[j - 1]))
    if j_limit is None:
        j_limit = int(min(jmax, 10**6)) if math.isfinite(jmax) else (len(b) if not callable(b) else 10**4)
    js = tuple(j for j in range(1, j_limit + 1) if wl / 2 <= j * bj(j) <= 2 * wl and j <= jmax)
    return CutoffRange(ell, js, wl / 2, 2 * wl, jmax, True)


def nbar(eps, gamma, N0, kappa, tau, C=1.0):
    """Iterate index from which the summable-regime bound applies.

    (1/log(3/2)) log[ log(1/(C gamma eps)) / ((kappa - tau - 3) log N0) ],
    rounded up; clamped to 0 (with a flag) when an inner log is not
    positive.  Returns (n, clamped).
    """
    if min(eps, gamma, N0, C) <= 0:
        raise ValueError("arguments must be positive")
    if kappa <= tau + 3:
        raise ValueError("kappa must exceed tau + 3")
    inner = math.log(1.0 / (C * gamma * eps))
    if inner <= 0:
        return 0, True
    arg = inner / ((kappa - tau - 3) * math.log(N0))
    if arg <= 1:
        return 0, True
    return int(math.ceil(math.log(arg) / math.log(1.5))), False


# ---------------------------------------------------------------------------
# nested good sets


@dataclass
class GoodSets:
    grid: object
    base: np.ndarray
    G: list
    H: list
    P: list
    counts: list
    gammas: list
    O_skipped: int = 0
    O_tested: int = 0
    ell_shells: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.G[-1] & self.H[-1] & self.P[-1]

    def excluded_fraction(self, n=None):
        n = len(self.G) - 1 if n is None else n
        good = self.G[n] & self.H[n] & self.P[n]
        return 1.0 - float(good.sum()) / len(good)

    def is_nested(self):
        return all(
            np.all(~X[k + 1] | X[k]) for X in (self.G, self.H, self.P) for k in range(len(X) - 1)
        )


def build_good_sets(tables, grid, gamma, tau, N_list, eps=0.0, e=0.0, C=None, J_scan=None,
                    use_cutoff=True, exclude_l0=False, base_mask=None):
    """Nested masks G_n (S-tests), H_n (O-tests), P_n (P-tests).

    Parameters
    ----------
    tables : list of dict
        One dict per iterate mapping grid index to an EigenTable or
        NormalForm (missing entries mean the reduction failed there).
    gamma : float
        gamma_n = (1 + 2^-n) gamma at iterate n.
    N_list : list of int
        Time cutoff of the scan at each iterate.
    use_cutoff : bool
        Restrict O-tests to cutoff ranges (needs eps * |e| > 0).
    exclude_l0 : bool
        Diagnostic: skip the l = 0 shell of the S and P tests.
    """
    npts = len(grid)
    base = np.ones(npts, bool) if base_mask is None else np.asarray(base_mask, bool)
    G, H, P = [base.copy()], [base.copy()], [base.copy()]
    counts, gammas, shells = [], [], {}
    skipped = tested = 0
    for n, tab in enumerate(tables):
        gn = (1 + 2.0**-n) * gamma
        gammas.append(gn)
        g, h, p = G[-1].copy(), H[-1].copy(), P[-1].copy()
        cnt = {"S": 0, "O": 0, "P": 0, "reduction": 0}
        N = N_list[min(n, len(N_list) - 1)]
        for i in range(npts):
            if not (g[i] or h[i] or p[i]):
                continue
            t = tab.get(i)
            if t is None:
                for X in (g, h, p):
                    X[i] = False
                cnt["reduction"] += 1
                continue
            t = _table(t)
            om = grid.points[i]
            filt = None
            if use_cutoff and eps * abs(e) > 0:
                cache = {}

                def in_range(ell, j, t=t, om=om, cache=cache):
                    if ell not in cache:
                        cache[ell] = cutoff_j_range(ell, om, eps, e, lambda jj: t.b(jj), C, j_limit=J_scan or t.J)
                    return j in cache[ell]

                filt = in_range

            res = scan_point(t, om, gn, tau, N, J_scan, exclude_l0=exclude_l0, o_filter=filt)
            skipped += res["O_skipped"]
            tested += res["O_tested"]
            for key, X in (("S", g), ("O", h), ("P", p)):
                if X[i] and not res["passed"][key]:
                    X[i] = False
                    cnt[key] += 1
            for ell, _, _ in res["O_failures"]:
                sh = bracket(ell)
                shells[sh] = shells.get(sh, 0) + 1
        G.append(g)
        H.append(h)
        P.append(p)
        counts.append(cnt)
    return GoodSets(grid, base, G, H, P, counts, gammas, skipped, tested, shells)


def verify_cutoff_soundness(tables, grid, gamma, tau, N, eps, e, C=None, J_scan=None):
    """Exhaustive O-scan; every failure must lie inside its predicted j-range.

    Returns (violations, failures, tested) where ``violations`` lists
    (grid index, l, sigma, j) failing the O-test with |j| outside the range.
    """
    violations, failures, tested = [], 0, 0
    for i, t in tables.items():
        t = _table(t)
        om = grid.points[i]
        res = scan_point(t, om, gamma, tau, N, J_scan, kinds=("O",))
        tested += res["O_tested"]
        for ell, s, j in res["O_failures"]:
            failures += 1
            rng = cutoff_j_range(ell, om, eps, e, lambda jj: t.b(jj), C, j_limit=J_scan or t.J)
            if abs(j) not in rng.js:
                violations.append((i, ell, s, j))
    return violations, failures, tested


# ---------------------------------------------------------------------------
# reports


@dataclass
class MeasureReport:
    rows: list
    fractions: dict
    trend_ok: bool
    trend_checked: bool
    notes: list = field(default_factory=list)

    def csv(self):
        lines = ["eps,gamma,iterate,kind,excluded_fraction"]
        for r in self.rows:
            lines.append(f"{r['eps']:.6e},{r['gamma']:.6e},{r['iterate']},{r['kind']},{r['excluded_fraction']:.6f}")
        return "\n".join(lines) + "\n"

    def as_dict(self):
        return {
            "fractions": {f"{k:.3e}": v for k, v in self.fractions.items()},
            "trend_ok": self.trend_ok,
            "trend_checked": self.trend_checked,
            "notes": list(self.notes),
            "rows": self.rows,
        }


def measure_report(runs):
    """Tabulate excluded fractions against eps.

    ``runs`` is a list of dicts with keys eps, gamma and sets
    (a :class:`GoodSets`).  The trend check requires the final excluded
    fraction to decrease strictly as eps decreases; a single eps skips
    the check with a note.
    """
    rows, fractions, notes = [], {}, []
    for run in runs:
        gs = run["sets"]
        npts = len(gs.base)
        for n in range(1, len(gs.G)):
            rows.append({"eps": run["eps"], "gamma": run["gamma"], "iterate": n, "kind": "total",
                         "excluded_fraction": gs.excluded_fraction(n)})
            for key, X in (("S", gs.G), ("O", gs.H), ("P", gs.P)):
                rows.append({"eps": run["eps"], "gamma": run["gamma"], "iterate": n, "kind": key,
                             "excluded_fraction": 1.0 - float(X[n].sum()) / npts})
        fractions[run["eps"]] = gs.excluded_fraction()
    if len(runs) < 2:
        notes.append("single eps: trend check skipped")
        return MeasureReport(rows, fractions, True, False, notes)
    order = sorted(fractions, reverse=True)
    vals = [fractions[k] for k in order]
    ok = all(b < a for a, b in zip(vals, vals[1:]))
    if not ok:
        notes.append("excluded fraction does not decrease strictly as eps decreases: " +
                     ", ".join(f"eps={k:.1e}: {fractions[k]:.4f}" for k in order))
    return MeasureReport(rows, fractions, ok, True, notes)
