"""Shared fixtures: desk-scale runs are computed once per session."""

import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qpnls import driver as dv
from qpnls import fourier_core as fc
from qpnls import kam
from qpnls import regularization as rg

settings.register_profile(
    "desk",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("desk")


@pytest.fixture(scope="session")
def desk_config():
    return dv.SolverConfig()


@pytest.fixture(scope="session")
def plugin(desk_config):
    return desk_config.make_plugin()


@pytest.fixture(scope="session")
def reduction_u0(desk_config, plugin):
    """Regularize + reduce of the linearization at u = 0, eps = 1e-3."""
    cfg = desk_config
    return dv.reduce_at(fc.zeros(cfg.d, cfg.N0), cfg.params(), plugin, cfg.reg_config(), cfg.kam_schedule())


@pytest.fixture(scope="session")
def newton_u1(desk_config, plugin):
    """First Newton iterate at the default frequency."""
    p = dv.newton_point(desk_config.with_(max_iters=1), desk_config.omega, plugin)
    return p.u


@pytest.fixture(scope="session")
def reduction_u1(desk_config, plugin, newton_u1):
    cfg = desk_config
    return dv.reduce_at(newton_u1, cfg.params(), plugin, cfg.reg_config(), cfg.kam_schedule())


@pytest.fixture(scope="session")
def regularization_u1(desk_config, plugin, newton_u1):
    """Regularization at u1 with per-step structural and conjugation checks."""
    return rg.regularize(newton_u1, desk_config.params(), plugin, desk_config.reg_config(), check=True)


@pytest.fixture(scope="session")
def newton_run(desk_config, plugin):
    """Full Newton run with the tolerance used by the acceptance suite."""
    cfg = desk_config.with_(tol=1e-16, max_iters=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", kam.QuadraticDecayWarning)
        return dv.newton_point(cfg, cfg.omega, plugin, keep=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
