"""Quasi-periodic solutions of a forced Hamiltonian NLS on the circle.

The package is organised in layers:

``fourier_core``
    truncated Fourier representation of functions on T^{d+1}.
``operator_algebra``
    Toeplitz-in-time block operators, decay norms, 2x2 Sylvester solves.
``nls_model``
    the forced NLS functional, nonlinearity plugins, linearization.
``regularization``
    seven conjugations reducing the linearized operator to constant
    coefficients plus a smoothing remainder.
``kam``
    quadratic block diagonalization of the regularized operator.
``melnikov``
    non-resonance predicates and excluded-parameter measurements.
``driver``
    inversion of the linearized operator, Newton loop, stability check.
``cli``
    the ``qpnls`` command.
"""

import importlib

_MODULES = ("fourier_core", "operator_algebra", "nls_model", "regularization", "kam", "melnikov", "driver", "cli")


def __getattr__(name):
    if name in _MODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(name)


__all__ = [
    "fourier_core",
    "operator_algebra",
    "nls_model",
    "regularization",
    "kam",
    "melnikov",
    "driver",
    "cli",
]

__version__ = "0.1.0"
