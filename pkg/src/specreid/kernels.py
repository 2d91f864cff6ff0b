"""Backend-switchable numeric kernels.

Two hot paths get a numba-compiled variant: squared-distance matrices
and the per-query retrieval walk that turns a ranked match list into
AP and CMC numbers. Pure-numpy fallbacks ship alongside; set
``SPECREID_NUMBA=0`` to force them. The flag is read per call so a
single process can exercise both paths.

The retrieval walk accumulates hits strictly left to right in both
variants, so reported metrics are identical whichever backend runs.
The distance kernels may differ between backends in the last float
ulp (loop order vs BLAS); rankings consume one matrix computed once,
so this never reaches the metrics.
"""

import os

import numpy as np

from .errors import ShapeError

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def numba_enabled() -> bool:
    """True when the compiled kernels are active for this call."""
    return HAVE_NUMBA and os.environ.get("SPECREID_NUMBA", "1") != "0"


# ---------------------------------------------------------------------
# squared euclidean distance matrix
# ---------------------------------------------------------------------

def pairwise_sqdist_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.einsum("ij,ij->i", a, a)[:, None]
    bb = np.einsum("ij,ij->i", b, b)[None, :]
    d = aa + bb - 2.0 * (a @ b.T)
    # BLAS cancellation can leave tiny negatives on self-distances.
    np.maximum(d, 0.0, out=d)
    return d


@njit(cache=True)
def _pairwise_sqdist_jit(a, b):  # pragma: no cover - exercised via dispatch
    n, dim = a.shape
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(dim):
                diff = a[i, k] - b[j, k]
                s += diff * diff
            out[i, j] = s
    return out


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared euclidean distances, shape (len(a), len(b))."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"pairwise_sqdist expects matching feature dims, got {a.shape} and {b.shape}"
        )
    if numba_enabled():
        return _pairwise_sqdist_jit(a, b)
    return pairwise_sqdist_numpy(a, b)


# ---------------------------------------------------------------------
# per-query AP / CMC walk over a pre-sorted gallery
# ---------------------------------------------------------------------
# Inputs are boolean matrices aligned with the sorted gallery order:
# sorted_match[q, j] marks a correct hit, sorted_junk[q, j] marks an
# entry to drop before ranks are counted. Returns per-query average
# precision, per-query CMC hit rows, and a validity mask (queries with
# no reachable match are flagged invalid and excluded by the caller).

def rank_walk_numpy(sorted_match, sorted_junk, max_rank):
    nq = sorted_match.shape[0]
    aps = np.zeros(nq)
    cmc = np.zeros((nq, max_rank))
    valid = np.zeros(nq, dtype=bool)
    for q in range(nq):
        keep = ~sorted_junk[q]
        m = sorted_match[q][keep]
        if m.size == 0 or not m.any():
            continue
        hits = np.cumsum(m)
        pos = np.flatnonzero(m)
        # python sum keeps left-to-right accumulation, matching the
        # compiled walk bit for bit
        aps[q] = sum((hits[pos] / (pos + 1.0)).tolist()) / int(hits[-1])
        first = int(pos[0])
        if first < max_rank:
            cmc[q, first:] = 1.0
        valid[q] = True
    return aps, cmc, valid


@njit(cache=True)
def _rank_walk_jit(sorted_match, sorted_junk, max_rank):  # pragma: no cover
    nq, ng = sorted_match.shape
    aps = np.zeros(nq)
    cmc = np.zeros((nq, max_rank))
    valid = np.zeros(nq, dtype=np.bool_)
    for q in range(nq):
        rank = 0
        hits = 0
        ap = 0.0
        first = -1
        for j in range(ng):
            if sorted_junk[q, j]:
                continue
            if sorted_match[q, j]:
                hits += 1
                ap += hits / (rank + 1.0)
                if first < 0:
                    first = rank
            rank += 1
        if hits > 0:
            aps[q] = ap / hits
            if first < max_rank:
                for r in range(first, max_rank):
                    cmc[q, r] = 1.0
            valid[q] = True
    return aps, cmc, valid


def rank_walk(sorted_match, sorted_junk, max_rank):
    sorted_match = np.ascontiguousarray(sorted_match, dtype=bool)
    sorted_junk = np.ascontiguousarray(sorted_junk, dtype=bool)
    if sorted_match.shape != sorted_junk.shape or sorted_match.ndim != 2:
        raise ShapeError(
            f"rank_walk expects equal 2d masks, got {sorted_match.shape} and {sorted_junk.shape}"
        )
    if numba_enabled():
        return _rank_walk_jit(sorted_match, sorted_junk, max_rank)
    return rank_walk_numpy(sorted_match, sorted_junk, max_rank)
