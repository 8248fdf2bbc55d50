"""Scratch output directory shared by the demos."""

import os
import tempfile


def scratch_dir(name):
    """Directory for demo output: $QPNLS_DEMO_OUT/name, else under the system temp dir."""
    root = os.environ.get("QPNLS_DEMO_OUT", os.path.join(tempfile.gettempdir(), "qpnls_demos"))
    path = os.path.join(root, name)
    os.makedirs(path, exist_ok=True)
    return path
