"""Command-line entry point ``qpnls``.

Subcommands: solve, reduce-only, measure, stability, verify-golden.
Exit codes: 0 all checks passed, 1 a check failed, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import driver as dv
from . import fourier_core as fc
from . import kam
from . import operator_algebra as oa

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, default=_json_default)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def build_config(args):
    cfg = dv.load_config(args.config) if args.config else dv.SolverConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.epsilon is not None:
        over["eps"] = args.epsilon
    if args.gamma_exp is not None:
        over["gamma_exp"] = args.gamma_exp
    if args.grid_points is not None:
        over["grid_points"] = args.grid_points
    if args.max_iters is not None:
        over["max_iters"] = args.max_iters
    if args.tol is not None:
        over["tol"] = args.tol
    return cfg.with_(**over) if over else cfg


def _history_rows(history, mask_size=1):
    return [
        (h["nu"], h["N"], h["R_s0"], h["R_s0_beta"], h["max_re_mu"], mask_size)
        for h in history
    ]


HISTORY_HEADER = ["nu", "N_nu", "R_s0", "R_s0_plus_beta", "max_re_mu", "mask_size"]


def _load_state(path, d, N):
    if not path:
        return fc.zeros(d, N)
    with open(path) as fh:
        return fc.load_coefficients(fh.read())


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(cfg, args):
    res = dv.nash_moser_run(cfg, keep=True)
    p = res.points[0]
    summary = res.summary()
    checks = {
        "converged": p.converged,
        "final_residual_ok": bool(p.residuals and p.residuals[-1] <= cfg.tol),
        "collocation_ok": bool(p.collocation_residual is not None and p.collocation_residual <= 1e-8),
    }
    summary["checks"] = checks
    _write_json(os.path.join(args.out, "run.json"), summary)
    _write_csv(os.path.join(args.out, "residuals.csv"), ["iterate", "N", "residual_s0"],
               [(i, p.cutoffs[i], r) for i, r in enumerate(p.residuals)])
    if p.reductions:
        _write_csv(os.path.join(args.out, "kam_history.csv"), HISTORY_HEADER,
                   _history_rows(p.reductions[-1].kam.history))
    if p.u is not None:
        with open(os.path.join(args.out, "solution.txt"), "w") as fh:
            fh.write(fc.dump_coefficients(p.u))
    _report(checks)
    return EXIT_OK if all(checks.values()) else EXIT_FAIL


def cmd_reduce_only(cfg, args):
    params = cfg.params()
    u = _load_state(args.state, cfg.d, cfg.N0)
    red = dv.reduce_at(u, params, cfg.make_plugin(), cfg.reg_config(), cfg.kam_schedule())
    nf = red.normal_form
    hist = red.kam.history
    dec = kam.check_decay_schedule(hist, cfg.tau_)
    final = oa.decay_norm(red.kam.R_final, cfg.s0_)
    checks = {
        "remainder_below_stop_tol": bool(final <= cfg.kam_stop_tol),
        "eigenvalues_imaginary": bool(nf.max_real_part() <= 1e-10),
    }
    summary = {
        "config": cfg.to_dict(),
        "m2": red.reg.m2, "m1": red.reg.m1, "m0": red.reg.m0,
        "kam_iterations": red.kam.iterations,
        "final_remainder": final,
        "decay": dec,
        "eigenvalues": {"plus": nf.eigenvalues()[0].tolist(), "minus": nf.eigenvalues()[1].tolist()},
        "checks": checks,
    }
    _write_json(os.path.join(args.out, "run.json"), summary)
    _write_csv(os.path.join(args.out, "kam_history.csv"), HISTORY_HEADER, _history_rows(hist))
    with open(os.path.join(args.out, "normal_form.txt"), "w") as fh:
        fh.write(oa.dump_operator(nf.as_operator(0)))
    _report(checks)
    return EXIT_OK if all(checks.values()) else EXIT_FAIL


def cmd_measure(cfg, args):
    eps_list = [float(x) for x in args.eps_list.split(",")] if args.eps_list else [1e-2, 1e-3, 1e-4]
    rep, details = dv.measure_scan(cfg, eps_list, iterates=args.iterates, J=args.box, L=args.box)
    with open(os.path.join(args.out, "measure.csv"), "w") as fh:
        fh.write(rep.csv())
    sound = all(not v["cutoff_violations"] for v in details.values())
    checks = {"trend_strictly_decreasing": rep.trend_ok, "cutoff_sound": sound,
              "masks_nested": all(v["nested"] for v in details.values())}
    _write_json(os.path.join(args.out, "run.json"),
                {"config": cfg.to_dict(), "report": rep.as_dict(), "details": {str(k): v for k, v in details.items()},
                 "checks": checks})
    _report(checks)
    return EXIT_OK if all(checks.values()) else EXIT_FAIL


def cmd_stability(cfg, args):
    res = dv.nash_moser_run(cfg, keep=True)
    p = res.points[0]
    if p.u is None or p.excluded:
        _report({"solution_available": False})
        return EXIT_FAIL
    red = dv.reduce_at(p.u, cfg.params(), cfg.make_plugin(), cfg.reg_config(), cfg.kam_schedule())
    rng = np.random.default_rng(cfg.seed)
    K = 6
    jj = np.arange(-K, K + 1)
    a = (rng.standard_normal(2 * K + 1) + 1j * rng.standard_normal(2 * K + 1)) * np.exp(-np.abs(jj))
    h0 = np.stack([a, np.conj(a[::-1])])
    T = args.horizon * 2 * np.pi
    rep = dv.stability_check(red.normal_form, red.W2, h0, cfg.omega, T=T, s=args.s, samples=args.samples, eps=cfg.eps)
    rows = dv.stability_series(red.normal_form, red.W2, h0, cfg.omega, T, args.s, min(args.samples, 41))
    _write_csv(os.path.join(args.out, "stability.csv"), ["t", "norm_v", "norm_h"], rows)
    checks = {"norm_conserved": rep["norm_drift"] <= 1e-8, "block_energy_conserved": rep["energy_drift"] <= 1e-10}
    _write_json(os.path.join(args.out, "run.json"), {"config": cfg.to_dict(), "stability": rep, "checks": checks})
    _report(checks)
    return EXIT_OK if all(checks.values()) else EXIT_FAIL


def cmd_verify_golden(cfg, args):
    if not args.golden:
        raise UsageError("verify-golden needs --golden DIR")
    res = dv.nash_moser_run(cfg, keep=True)
    p = res.points[0]
    if p.u is None or not p.reductions:
        _report({"solution_available": False})
        return EXIT_FAIL
    current = {
        "solution.txt": fc.dump_coefficients(p.u),
        "normal_form.txt": oa.dump_operator(p.reductions[-1].normal_form.as_operator(0)),
    }
    os.makedirs(args.golden, exist_ok=True)
    checks = {}
    for name, text in current.items():
        path = os.path.join(args.golden, name)
        if args.update or not os.path.exists(path):
            if not args.update:
                raise UsageError(f"missing golden file {path}; rerun with --update to create it")
            with open(path, "w") as fh:
                fh.write(text)
            checks[name] = True
            continue
        with open(path) as fh:
            gold = fh.read()
        checks[name] = _compare_dumps(gold, text, args.golden_tol)
    _write_json(os.path.join(args.out, "run.json"), {"config": cfg.to_dict(), "checks": checks})
    _report(checks)
    return EXIT_OK if all(checks.values()) else EXIT_FAIL


def _compare_dumps(a, b, tol):
    la, lb = a.strip().splitlines(), b.strip().splitlines()
    if la[0] != lb[0] or len(la) != len(lb):
        return False
    if tol == 0:
        return la == lb
    for x, y in zip(la[1:], lb[1:]):
        xa, ya = x.split(), y.split()
        if xa[:-2] != ya[:-2]:
            return False
        va = complex(float(xa[-2]), float(xa[-1]))
        vb = complex(float(ya[-2]), float(ya[-1]))
        if abs(va - vb) > tol * max(1.0, abs(va)):
            return False
    return True


def _report(checks):
    for k, v in checks.items():
        print(f"{'PASS' if v else 'FAIL'} {k}")


COMMANDS = {
    "solve": cmd_solve,
    "reduce-only": cmd_reduce_only,
    "measure": cmd_measure,
    "stability": cmd_stability,
    "verify-golden": cmd_verify_golden,
}


def make_parser():
    ap = argparse.ArgumentParser(prog="qpnls", description="Quasi-periodic solutions of a forced Hamiltonian NLS.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file (keys: SolverConfig fields)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--gamma-exp", type=float)
    common.add_argument("--grid-points", type=int)
    common.add_argument("--max-iters", type=int)
    common.add_argument("--tol", type=float)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="Newton loop at the configured frequency")
    p = sub.add_parser("reduce-only", parents=[common], help="regularize and reduce at a state")
    p.add_argument("--state", help="coefficient dump of the state (default u = 0)")
    p = sub.add_parser("measure", parents=[common], help="excluded-frequency fractions versus eps")
    p.add_argument("--eps-list", help="comma-separated eps values (default 1e-2,1e-3,1e-4)")
    p.add_argument("--iterates", type=int, default=1)
    p.add_argument("--box", type=int, default=10, help="space/time box of the reduction")
    p = sub.add_parser("stability", parents=[common], help="reduced linear flow and its pullback")
    p.add_argument("--horizon", type=float, default=100.0, help="T in units of 2 pi")
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=101)
    p = sub.add_parser("verify-golden", parents=[common], help="compare dumps with golden files")
    p.add_argument("--golden", help="directory of golden files")
    p.add_argument("--update", action="store_true", help="write the golden files")
    p.add_argument("--golden-tol", type=float, default=1e-10)
    return ap


def main(argv=None):
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        os.makedirs(args.out, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", kam.QuadraticDecayWarning)
            return COMMANDS[args.command](cfg, args)
    except (dv.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
