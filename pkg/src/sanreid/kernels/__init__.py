"""Hot numeric kernels: horizontal average pooling, distances, ranking.

The numba implementation is used when available. Set
``SANREID_DISABLE_NUMBA=1`` to force the pure-numpy path. Both paths are
importable directly via :func:`backend` for testing and benchmarking.
"""
import os
from types import ModuleType

import numpy as np

from . import _numpy

__all__ = [
    "BACKEND",
    "backend",
    "hap_forward",
    "hap_backward",
    "pairwise_distance",
    "rank_queries",
]


def _load_numba():
    # the bundled TBB is too old; skip probing it
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    try:
        from . import _numba
    except ImportError:
        return None
    return _numba


_numba = _load_numba()

if os.environ.get("SANREID_DISABLE_NUMBA", "").strip() not in ("", "0") or _numba is None:
    _impl: ModuleType = _numpy
    BACKEND = "numpy"
else:
    _impl = _numba
    BACKEND = "numba"


def backend(name: str) -> ModuleType:
    """Return the kernel module for ``"numpy"`` or ``"numba"``."""
    if name == "numpy":
        return _numpy
    if name == "numba":
        if _numba is None:
            raise RuntimeError("numba is not installed")
        return _numba
    raise ValueError(f"unknown kernel backend {name!r}")


def _as_batch(F):
    F = np.asarray(F)
    if F.ndim == 3:
        return F[None], True
    if F.ndim != 4:
        raise ValueError(f"feature map must be (H, W, C) or (N, H, W, C), got shape {F.shape}")
    return F, False


def hap_forward(F, q: int, impl: ModuleType | None = None) -> np.ndarray:
    """Average each of ``q`` horizontal stripes of a channels-last feature map.

    ``F`` has shape ``(H, W, C)`` or ``(N, H, W, C)``; stripe ``i`` covers
    rows ``[i*H/q, (i+1)*H/q)`` and all ``W`` columns. Returns ``(q, C)``
    or ``(N, q, C)``.
    """
    F, single = _as_batch(F)
    h = F.shape[1]
    if q <= 0 or h % q:
        raise ValueError(f"feature map height {h} is not divisible by q={q}")
    out = (impl or _impl).hap_forward(np.ascontiguousarray(F), q)
    return out[0] if single else out


def hap_backward(dP, h: int, w: int | None = None, impl: ModuleType | None = None) -> np.ndarray:
    """Gradient of :func:`hap_forward` w.r.t. the feature map.

    Every cell of stripe ``i`` receives ``dP[i] * q / (h * w)``; ``w``
    defaults to ``h`` (square maps).
    """
    dP = np.asarray(dP)
    single = dP.ndim == 2
    if single:
        dP = dP[None]
    if dP.ndim != 3:
        raise ValueError(f"pooled gradient must be (q, C) or (N, q, C), got shape {dP.shape}")
    w = h if w is None else w
    q = dP.shape[1]
    if q <= 0 or h % q:
        raise ValueError(f"height {h} is not divisible by q={q}")
    out = (impl or _impl).hap_backward(np.ascontiguousarray(dP), h, w)
    return out[0] if single else out


def pairwise_distance(Q, G, impl: ModuleType | None = None) -> np.ndarray:
    """Euclidean distance matrix between rows of ``Q`` and rows of ``G`` (float64)."""
    Q = np.atleast_2d(np.asarray(Q))
    G = np.atleast_2d(np.asarray(G))
    if Q.shape[1] != G.shape[1]:
        raise ValueError(f"feature dims differ: {Q.shape[1]} vs {G.shape[1]}")
    return (impl or _impl).pairwise_distance(Q, G)


def rank_queries(dist, q_ids, g_ids, excluded=None, impl: ModuleType | None = None):
    """Return ``(first_hit, ap, num_matches)`` per query; see ``_numpy.rank_queries``."""
    dist = np.ascontiguousarray(dist, dtype=np.float64)
    nq, ng = dist.shape
    q_ids = np.ascontiguousarray(q_ids, dtype=np.int64)
    g_ids = np.ascontiguousarray(g_ids, dtype=np.int64)
    if q_ids.shape != (nq,) or g_ids.shape != (ng,):
        raise ValueError("id vectors do not match the distance matrix shape")
    if excluded is None:
        excluded = np.zeros((nq, ng), dtype=np.bool_)
    excluded = np.ascontiguousarray(excluded, dtype=np.bool_)
    if excluded.shape != (nq, ng):
        raise ValueError("exclusion mask does not match the distance matrix shape")
    return (impl or _impl).rank_queries(dist, q_ids, g_ids, excluded)
