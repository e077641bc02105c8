"""Kernel backend selection.

The compiled ``_core`` extension is used when importable. Setting the
environment variable ``HYBRIDYN_PURE_PYTHON=1`` forces the NumPy fallback.
"""
import os

if os.environ.get("HYBRIDYN_PURE_PYTHON", "") not in ("", "0"):
    from . import _pycore as core
else:
    try:
        from . import _core as core
    except ImportError:  # extension not built
        from . import _pycore as core

BACKEND = core.NAME
