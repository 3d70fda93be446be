"""Backend selection for the inner loops.

The compiled extension is used when it was built; otherwise, or when the
``FEDTD_PURE_PYTHON`` environment variable is set to a non-empty value
other than ``0``, the numpy fallback is used. Both produce identical traces.
"""

from __future__ import annotations

import importlib
import os

from . import _kernels_py
from .errors import ConfigError


def _load_compiled():
    try:
        return importlib.import_module("fedtd._kernels")
    except ImportError:
        return None


_compiled = _load_compiled()
_force_python = os.environ.get("FEDTD_PURE_PYTHON", "") not in ("", "0")

if _compiled is not None and not _force_python:
    _active = _compiled
    BACKEND = "cython"
else:
    _active = _kernels_py
    BACKEND = "python"

run_sampled = _active.run_sampled
run_expected = _active.run_expected


def available_backends() -> list[str]:
    return (["cython"] if _compiled is not None else []) + ["python"]


def get_backend(name: str | None = None):
    """Kernel module by name; ``None`` means the one selected at import."""
    if name is None:
        return _active
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    if name == "python":
        return _kernels_py
    raise ConfigError(f"unknown backend {name!r}", "backend")
