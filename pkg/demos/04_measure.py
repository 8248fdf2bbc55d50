"""
How many frequencies survive
============================

The Melnikov conditions remove frequencies near resonances.  With
gamma = eps^(1/2) the removed fraction should shrink as eps decreases.
At m = 1 the modes j = +-1 have eigenvalues of size eps, so the l = 0
conditions (thresholds of size gamma, much larger than eps) fail for
every frequency.  Dropping that shell shows the expected trend.
"""

import os
import warnings

from qpnls import driver as dv
from qpnls import kam
from _scratch import scratch_dir

out = scratch_dir("04_measure")
warnings.simplefilter("ignore", kam.QuadraticDecayWarning)
cfg = dv.SolverConfig(grid_points=9)
eps_list = [1e-2, 1e-3, 1e-4]

for exclude_l0 in (False, True):
    rep, det = dv.measure_scan(cfg, eps_list, J=8, L=8, exclude_l0=exclude_l0)
    label = "without l = 0" if exclude_l0 else "all shells   "
    print(label, " ".join(f"eps={e:.0e}: {rep.fractions[e]:.3f}" for e in eps_list),
          " strictly decreasing:", rep.trend_ok)
    for e in eps_list:
        print(f"    eps={e:.0e}: cutoff violations {len(det[e]['cutoff_violations'])}, "
              f"O-tests {det[e]['O_tested']}, skipped by the cutoff {det[e]['O_skipped_by_cutoff']}")
    with open(os.path.join(out, f"measure{'_no_l0' if exclude_l0 else ''}.csv"), "w") as fh:
        fh.write(rep.csv())
print("output written to", out)
