"""
Regularization and KAM reduction of the linearized operator
===========================================================

The linearized operator at a state is brought to constant coefficients
in seven steps, then a KAM iteration removes the remaining smoothing
remainder.  What is left is omega.d_phi + D with D block diagonal in
|j|, and its eigenvalues are purely imaginary.
"""

import os
import warnings

from qpnls import driver as dv
from qpnls import kam
from qpnls import operator_algebra as oa
from qpnls import regularization as rg
from _scratch import scratch_dir

out = scratch_dir("02_reducibility")
warnings.simplefilter("ignore", kam.QuadraticDecayWarning)
cfg = dv.SolverConfig()
plugin = cfg.make_plugin()

# %%
# Take the first Newton iterate as the state.
u1 = dv.newton_point(cfg.with_(max_iters=1), cfg.omega, plugin).u

# %%
# The seven steps, each checked against an independently applied conjugation.
reg = rg.regularize(u1, cfg.params(), plugin, cfg.reg_config(), check=True)
for e in reg.report["steps"]:
    print(f"step {e['step']} {e['name']:<28s} residual {e['residual']:.1e}  "
          f"largest vanishing coefficient {max(e['structural'].values()):.1e}")
print(f"m2 = {reg.m2:.12f}  m1 = {reg.m1:.3e}  m0 = {reg.m0:.12f}")

# %%
# KAM iteration: the remainder decays faster than geometrically.
sched = cfg.kam_schedule()
res = kam.reduce(reg, sched)
for h in res.history:
    print(f"nu = {h['nu']}  N = {h['N']:2d}  |R|_s0 = {h['R_s0']:.2e} -> {h['R_next_s0']:.2e}")
print("decay schedule:", kam.check_decay_schedule(res.history, cfg.tau_))

# %%
# Final eigenvalues against the constant-coefficient ones.
nf = res.normal_form
mu = nf.eigenvalues()
base = kam.constant_diagonal(nf.J, reg.m2, reg.m1, reg.m0)
J = nf.J
for j in range(0, 5):
    print(f"j = {j}: mu_+ = {mu[0, J + j]:.10f}  shift from constant part {abs(mu[0, J + j] - base[0, J + j]):.2e}")
print("max |Re mu| =", nf.max_real_part())

with open(os.path.join(out, "normal_form.txt"), "w") as fh:
    fh.write(oa.dump_operator(nf.as_operator(0)))
print("output written to", out)
