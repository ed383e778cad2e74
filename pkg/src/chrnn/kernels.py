"""Scan-kernel backend selection.

The compiled ``_scan_ext`` module is used when it was built; otherwise the
NumPy kernels in ``_scan_py`` take over. ``HRNN_KERNEL=python`` forces the
fallback, ``HRNN_KERNEL=compiled`` makes a missing extension an error.
"""
from __future__ import annotations

import logging
import os
from types import ModuleType

from . import _scan_py

log = logging.getLogger(__name__)

try:
    from . import _scan_ext
except ImportError:  # extension not built
    _scan_ext = None

BACKENDS: dict[str, ModuleType] = {"python": _scan_py}
if _scan_ext is not None:
    BACKENDS["compiled"] = _scan_ext


def _select() -> ModuleType:
    want = os.environ.get("HRNN_KERNEL", "").strip().lower()
    if want == "python":
        return _scan_py
    if want == "compiled":
        if _scan_ext is None:
            raise ImportError("HRNN_KERNEL=compiled but chrnn._scan_ext is not built")
        return _scan_ext
    if want:
        raise ValueError(f"HRNN_KERNEL must be 'python' or 'compiled', got {want!r}")
    return _scan_ext if _scan_ext is not None else _scan_py


default = _select()
log.debug("scan kernels: %s", default.__name__)


def get(name: str | None = None) -> ModuleType:
    """Kernel module by name; None gives the import-time default."""
    if name is None:
        return default
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {sorted(BACKENDS)}") from None


def name_of(mod: ModuleType) -> str:
    return "compiled" if mod is _scan_ext else "python"
