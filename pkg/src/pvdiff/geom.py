"""Geometry kernel backend selection.

The compiled extension is preferred when it imported cleanly; the numpy
fallback is always available. PVDIFF_GEOM=py or =ext forces a backend
(the benchmark and the cross-backend tests use this).
"""

from __future__ import annotations

import os

from . import _geom_np

try:
    from . import _geom_cy  # type: ignore[attr-defined]
except ImportError:
    _geom_cy = None

_FORCED = os.environ.get("PVDIFF_GEOM", "").strip().lower()
if _FORCED == "py":
    _impl = _geom_np
elif _FORCED == "ext":
    if _geom_cy is None:
        raise ImportError("PVDIFF_GEOM=ext but the compiled extension is not built")
    _impl = _geom_cy
else:
    _impl = _geom_cy if _geom_cy is not None else _geom_np


def backend_name() -> str:
    return "ext" if _impl is _geom_cy else "py"


def available_backends() -> list[str]:
    return ["py"] if _geom_cy is None else ["py", "ext"]


def get_backend(name: str):
    if name == "py":
        return _geom_np
    if name == "ext":
        if _geom_cy is None:
            raise ValueError("compiled geometry extension is not built")
        return _geom_cy
    raise ValueError(f"unknown geometry backend {name!r}")


def fps_kernel(pts, m: int, start: int):
    return _impl.fps_indices(pts, m, start)


def knn_kernel(pts, center_idx, k: int):
    return _impl.knn_indices(pts, center_idx, k)
