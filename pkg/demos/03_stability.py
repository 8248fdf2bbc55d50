"""
Linear stability of the solution
================================

In the reduced coordinates the linearized flow is v(t) = exp(-t D) v(0),
a rotation inside each block {j, -j}.  Pulling it back through W2 gives
the linearized flow near the solution; its H^s norm oscillates by O(eps)
and never grows.
"""

import os
import warnings

import numpy as np

from qpnls import driver as dv
from qpnls import kam
from _scratch import scratch_dir

out = scratch_dir("03_stability")
warnings.simplefilter("ignore", kam.QuadraticDecayWarning)

for eps in (1e-2, 1e-3):
    cfg = dv.SolverConfig(eps=eps, tol=1e-16, max_iters=4)
    sol = dv.newton_point(cfg, cfg.omega)
    red = dv.reduce_at(sol.u, cfg.params(), cfg.make_plugin(), cfg.reg_config(), cfg.kam_schedule())
    K = 6
    jj = np.arange(-K, K + 1)
    a = np.random.default_rng(0).standard_normal(2 * K + 1) * np.exp(-np.abs(jj))
    h0 = np.stack([a + 0j, np.conj(a[::-1]) + 0j])
    T = 100 * 2 * np.pi
    rep = dv.stability_check(red.normal_form, red.W2, h0, cfg.omega, T=T, s=1.0, samples=101, eps=eps)
    print(f"eps = {eps:.0e}: norm drift {rep['norm_drift']:.1e}, block energy drift {rep['energy_drift']:.1e}, "
          f"pullback ratio in [{rep['pullback_min']:.6f}, {rep['pullback_max']:.6f}], "
          f"fitted constant {rep['fitted_constant']:.3f}")
    rows = dv.stability_series(red.normal_form, red.W2, h0, cfg.omega, T, 1.0, 41)
    np.savetxt(os.path.join(out, f"stability_eps{eps:.0e}.csv"), np.array(rows), delimiter=",",
               header="t,norm_v,norm_h", comments="")

# %%
# The fitted constant is nearly the same for both eps: the oscillation of
# the pullback scales linearly with eps.
print("output written to", out)
