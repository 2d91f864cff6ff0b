"""Retrieval evaluation: distance matrices, mAP/CMC, feature assembly.

Ranking uses a stable sort with gallery index as the tie-break, and a
strictly sequential accumulation of precision terms, so results are
reproducible across backends and match a naive reference walk exactly.
Junk protocol: a gallery entry is removed for a query when it shares
both identity and camera with it (camera-aware datasets only), plus the
query's own gallery row when query and gallery are the same set.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import EvalError, ShapeError

# Branch order is fixed; evaluation modes are subsets of this.
BRANCHES = ("rgb", "nir", "tir", "proxy")


@dataclass
class EvalResult:
    mean_ap: float
    cmc: np.ndarray  # (max_rank,) cumulative match curve
    n_queries: int
    n_valid: int
    per_query_ap: np.ndarray = field(repr=False, default=None)

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])


def distance_matrix(query: np.ndarray, gallery: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Pairwise distances between feature rows.

    euclidean: sqrt of squared distances. cosine: 1 - cos similarity,
    computed on L2-normalized copies (zero rows stay zero).
    """
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if metric == "euclidean":
        return np.sqrt(kernels.pairwise_sqdist(query, gallery))
    if metric == "cosine":
        qn = np.linalg.norm(query, axis=1, keepdims=True)
        gn = np.linalg.norm(gallery, axis=1, keepdims=True)
        q = query / np.maximum(qn, 1e-12)
        g = gallery / np.maximum(gn, 1e-12)
        return 1.0 - q @ g.T
    raise EvalError(f"unknown metric '{metric}' (expected euclidean or cosine)")


def compute_map_cmc(
    distmat: np.ndarray,
    query_ids: np.ndarray,
    gallery_ids: np.ndarray,
    query_cams: np.ndarray = None,
    gallery_cams: np.ndarray = None,
    max_rank: int = 50,
    exclude_self: bool = False,
) -> EvalResult:
    """Mean average precision and CMC curve for a retrieval problem.

    ``exclude_self`` marks gallery column q as junk for query row q;
    use it when ranking a set against itself.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if distmat.ndim != 2:
        raise ShapeError(f"distmat must be 2d, got shape {distmat.shape}")
    nq, ng = distmat.shape
    if query_ids.shape != (nq,) or gallery_ids.shape != (ng,):
        raise ShapeError(
            f"id arrays ({query_ids.shape}, {gallery_ids.shape}) do not match distmat {distmat.shape}"
        )
    if (query_cams is None) != (gallery_cams is None):
        raise EvalError("camera ids must be given for both sides or neither")
    if exclude_self and nq != ng:
        raise EvalError("exclude_self requires query and gallery to be the same set")
    if max_rank < 1:
        raise EvalError(f"max_rank must be positive, got {max_rank}")
    max_rank = min(max_rank, ng)

    match = gallery_ids[None, :] == query_ids[:, None]
    if query_cams is not None:
        query_cams = np.asarray(query_cams)
        gallery_cams = np.asarray(gallery_cams)
        same_cam = gallery_cams[None, :] == query_cams[:, None]
        junk = match & same_cam
    else:
        junk = np.zeros_like(match)
    if exclude_self:
        junk = junk | np.eye(nq, dtype=bool)

    # stable sort: ties resolved by gallery index, the reference order
    order = np.argsort(distmat, axis=1, kind="stable")
    rows = np.arange(nq)[:, None]
    aps, cmc_rows, valid = kernels.rank_walk(match[rows, order], junk[rows, order], max_rank)

    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EvalError("every query was skipped: no cross-camera matches in the gallery")
    # sequential sum over queries keeps the value backend-independent
    mean_ap = sum(aps[valid].tolist()) / n_valid
    cmc = cmc_rows[valid].sum(axis=0) / n_valid
    return EvalResult(
        mean_ap=float(mean_ap),
        cmc=cmc,
        n_queries=nq,
        n_valid=n_valid,
        per_query_ap=np.where(valid, aps, np.nan),
    )


def assemble_inference_feature(parts: dict, include=BRANCHES) -> np.ndarray:
    """Concatenate per-branch descriptors into one retrieval feature.

    Each branch is L2-normalized on its own before concatenation so no
    spectrum dominates by scale. Branch order is fixed by BRANCHES
    regardless of the order names appear in ``include``.
    """
    include = set(include)
    unknown = include - set(BRANCHES)
    if unknown:
        raise EvalError(f"unknown branch names {sorted(unknown)}; expected subset of {BRANCHES}")
    chosen = [name for name in BRANCHES if name in include]
    if not chosen:
        raise EvalError("at least one branch must be included")
    blocks = []
    n_rows = None
    for name in chosen:
        if name not in parts:
            raise EvalError(f"branch '{name}' requested but not present in extracted features")
        arr = np.asarray(parts[name], dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"branch '{name}' must be 2d (n, dim), got {arr.shape}")
        if n_rows is None:
            n_rows = arr.shape[0]
        elif arr.shape[0] != n_rows:
            raise ShapeError(f"branch '{name}' has {arr.shape[0]} rows, expected {n_rows}")
        norms = np.maximum(np.linalg.norm(arr, axis=1, keepdims=True), 1e-12)
        blocks.append(arr / norms)
    return np.concatenate(blocks, axis=1)


def distance_distributions(features: np.ndarray, ids: np.ndarray, n_bins: int = 40) -> dict:
    """Histogram same-identity vs cross-identity pair distances."""
    features = np.asarray(features, dtype=np.float64)
    ids = np.asarray(ids)
    if features.shape[0] != ids.shape[0]:
        raise ShapeError(f"{features.shape[0]} feature rows vs {ids.shape[0]} ids")
    n = features.shape[0]
    if n < 2:
        raise EvalError("need at least two samples for pair distances")
    d = np.sqrt(kernels.pairwise_sqdist(features, features))
    iu = np.triu_indices(n, k=1)
    same = ids[iu[0]] == ids[iu[1]]
    intra = d[iu][same]
    inter = d[iu][~same]
    hi = float(d[iu].max()) if d[iu].size else 1.0
    edges = np.linspace(0.0, max(hi, 1e-9), n_bins + 1)
    return {
        "intra": intra,
        "inter": inter,
        "edges": edges,
        "intra_hist": np.histogram(intra, bins=edges)[0],
        "inter_hist": np.histogram(inter, bins=edges)[0],
        "intra_mean": float(intra.mean()) if intra.size else float("nan"),
        "inter_mean": float(inter.mean()) if inter.size else float("nan"),
    }


def format_distance_report(dist: dict) -> str:
    lines = [
        f"intra_pairs = {dist['intra'].size}",
        f"inter_pairs = {dist['inter'].size}",
        f"intra_mean = {dist['intra_mean']:.6f}",
        f"inter_mean = {dist['inter_mean']:.6f}",
        "bin_lo bin_hi intra inter",
    ]
    edges = dist["edges"]
    for i in range(len(edges) - 1):
        lines.append(
            f"{edges[i]:.4f} {edges[i + 1]:.4f} {dist['intra_hist'][i]} {dist['inter_hist'][i]}"
        )
    return "\n".join(lines) + "\n"
