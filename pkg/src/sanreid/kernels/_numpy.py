"""Pure-numpy reference implementations of the hot kernels.

Every function here has a twin in ``_numba`` with the same signature and
the same output contract. Shapes are validated by the dispatching layer.
"""
import numpy as np


def hap_forward(F, q):
    # F: (N, H, W, C) channels-last
    n, h, w, c = F.shape
    return F.reshape(n, q, h // q, w, c).mean(axis=(2, 3))


def hap_backward(dP, h, w):
    n, q, c = dP.shape
    scale = q / (h * w)
    dF = np.broadcast_to((dP * scale)[:, :, None, None, :], (n, q, h // q, w, c))
    return np.ascontiguousarray(dF).reshape(n, h, w, c)


# cap on the float64 difference block, about 128 MB
_BLOCK_ELEMENTS = 1 << 24


def pairwise_distance(Q, G, chunk=None):
    out = np.empty((Q.shape[0], G.shape[0]), dtype=np.float64)
    if chunk is None:
        chunk = max(1, _BLOCK_ELEMENTS // max(G.shape[0] * G.shape[1], 1))
    for start in range(0, Q.shape[0], chunk):
        diff = Q[start:start + chunk, None, :].astype(np.float64) - G[None, :, :]
        out[start:start + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def rank_queries(dist, q_ids, g_ids, excluded):
    """Per-query rank of the first true match and average precision.

    Ranks are 0-based positions in the list of non-excluded gallery
    entries sorted by ascending distance, ties broken by gallery index.
    Queries without a valid match get rank -1 and AP nan.
    """
    nq = dist.shape[0]
    first = np.full(nq, -1, dtype=np.int64)
    ap = np.full(nq, np.nan, dtype=np.float64)
    nmatch = np.zeros(nq, dtype=np.int64)
    for i in range(nq):
        order = np.argsort(dist[i], kind="stable")
        order = order[~excluded[i, order]]
        hits = g_ids[order] == q_ids[i]
        k = int(hits.sum())
        nmatch[i] = k
        if k == 0:
            continue
        pos = np.flatnonzero(hits)
        first[i] = pos[0]
        ap[i] = np.mean(np.arange(1, k + 1) / (pos + 1))
    return first, ap, nmatch
