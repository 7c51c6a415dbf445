"""Grid kernels: compiled extension when available, pure Python otherwise.

Set ``DCCMAPF_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels as python_backend

try:
    if os.environ.get("DCCMAPF_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels as compiled_backend
except ImportError:
    compiled_backend = None

_impl = compiled_backend or python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

bfs_distance = _impl.bfs_distance
heuristic_planes = _impl.heuristic_planes
resolve_moves = _impl.resolve_moves
im2col = _impl.im2col
col2im = _impl.col2im
MOVES = python_backend.MOVES

__all__ = ["BACKEND", "MOVES", "bfs_distance", "compiled_backend", "col2im", "heuristic_planes",
           "im2col", "python_backend", "resolve_moves"]
