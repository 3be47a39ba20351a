"""numba-compiled kernels; same contracts as ``_numpy``."""
import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def hap_forward(F, q):
    n, h, w, c = F.shape
    rows = h // q
    inv = 1.0 / (rows * w)
    out = np.zeros((n, q, c), dtype=F.dtype)
    for b in prange(n * q):
        s = b % q
        img = b // q
        acc = np.zeros(c, dtype=np.float64)
        for r in range(s * rows, (s + 1) * rows):
            for x in range(w):
                for ch in range(c):
                    acc[ch] += F[img, r, x, ch]
        for ch in range(c):
            out[img, s, ch] = acc[ch] * inv
    return out


@njit(cache=True, parallel=True)
def hap_backward(dP, h, w):
    n, q, c = dP.shape
    rows = h // q
    scale = q / (h * w)
    dF = np.empty((n, h, w, c), dtype=dP.dtype)
    for b in prange(n * q):
        img = b // q
        s = b % q
        row = (dP[img, s] * scale).astype(dP.dtype)
        for r in range(s * rows, (s + 1) * rows):
            for x in range(w):
                dF[img, r, x, :] = row
    return dF


@njit(cache=True, parallel=True)
def _pairwise_distance(Q, G):
    nq, d = Q.shape
    ng = G.shape[0]
    out = np.empty((nq, ng), dtype=np.float64)
    for i in prange(nq):
        for j in range(ng):
            acc = 0.0
            for k in range(d):
                t = np.float64(Q[i, k]) - np.float64(G[j, k])
                acc += t * t
            out[i, j] = np.sqrt(acc)
    return out


def pairwise_distance(Q, G, chunk=None):
    return _pairwise_distance(np.ascontiguousarray(Q), np.ascontiguousarray(G))


@njit(cache=True, parallel=True)
def rank_queries(dist, q_ids, g_ids, excluded):
    nq, ng = dist.shape
    first = np.full(nq, -1, dtype=np.int64)
    ap = np.full(nq, np.nan, dtype=np.float64)
    nmatch = np.zeros(nq, dtype=np.int64)
    for i in prange(nq):
        order = np.argsort(dist[i], kind="mergesort")
        pos = 0
        k = 0
        total = 0.0
        for t in range(ng):
            j = order[t]
            if excluded[i, j]:
                continue
            if g_ids[j] == q_ids[i]:
                if k == 0:
                    first[i] = pos
                k += 1
                total += k / (pos + 1.0)
            pos += 1
        nmatch[i] = k
        if k > 0:
            ap[i] = total / k
    return first, ap, nmatch
