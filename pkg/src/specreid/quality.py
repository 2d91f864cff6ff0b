"""Per-spectrum quality scoring and the sort it induces.

A spectrum's quality for one sample is the mean cosine similarity
between its patch tokens and the fused proxy tokens, matched position
by position. Scores only ever pick an ordering (they are computed on
detached arrays and carry no gradient); the reorder itself is
differentiable so enhanced tokens can flow back to their source
spectra.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError

# Running count of tokens whose norm was too small to score; exposed
# for diagnostics since a silent zero can hide a collapsed embedding.
_zero_norm_tokens = 0


def zero_norm_token_count() -> int:
    return _zero_norm_tokens


def reset_zero_norm_token_count() -> None:
    global _zero_norm_tokens
    _zero_norm_tokens = 0


def token_cosine(tokens: np.ndarray, reference: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Row-paired cosine similarity between two equally shaped token stacks.

    tokens (..., n, d) against reference (..., n, d) -> (..., n), where
    entry i is cos(tokens_i, reference_i). Pairs where either row has
    near-zero norm score 0.
    """
    global _zero_norm_tokens
    tokens = np.asarray(tokens, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if tokens.shape != reference.shape:
        raise ShapeError(
            f"token stacks must match row for row, got {tokens.shape} vs {reference.shape}"
        )
    tn = np.linalg.norm(tokens, axis=-1)
    rn = np.linalg.norm(reference, axis=-1)
    dots = np.einsum("...nd,...nd->...n", tokens, reference)
    denom = tn * rn
    dead = denom <= eps
    _zero_norm_tokens += int(dead.sum())
    out = np.zeros_like(dots)
    np.divide(dots, denom, out=out, where=~dead)
    return out


@dataclass
class QualityRanking:
    """Descending-quality spectrum order per sample.

    order[i, k] is the spectrum index (0 rgb, 1 nir, 2 tir) ranked k-th
    for sample i; inverse[i, s] is the rank position spectrum s landed
    at, so inverse undoes order. Equal scores keep the lower spectrum
    index first.
    """

    scores: np.ndarray  # (b, 3) float
    order: np.ndarray  # (b, 3) int
    inverse: np.ndarray  # (b, 3) int

    @property
    def first_choice(self) -> np.ndarray:
        return self.order[:, 0]


def quality_scores(spectrum_tokens, reference: np.ndarray) -> QualityRanking:
    """Rank the three spectra of each sample by mean token cosine.

    spectrum_tokens: sequence of 3 arrays shaped (b, n, d).
    reference: (b, n, d) fused proxy tokens, compared row for row.
    """
    if len(spectrum_tokens) != 3:
        raise ShapeError(f"expected 3 spectra, got {len(spectrum_tokens)}")
    arrays = [np.asarray(t, dtype=np.float64) for t in spectrum_tokens]
    base = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != base:
            raise ShapeError(f"spectrum token shapes differ: {a.shape} vs {base}")
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != base:
        raise ShapeError(f"proxy token shape {reference.shape} does not match spectra {base}")
    scores = np.stack([token_cosine(a, reference).mean(axis=-1) for a in arrays], axis=-1)
    # stable argsort on negated scores: ties fall back to spectrum index
    order = np.argsort(-scores, axis=1, kind="stable")
    inverse = np.empty_like(order)
    b = scores.shape[0]
    inverse[np.arange(b)[:, None], order] = np.arange(3)[None, :]
    return QualityRanking(scores=scores, order=order, inverse=inverse)


def _select_triplet(tensors, choice):
    if len(tensors) != 3:
        raise ShapeError(f"expected 3 tensors, got {len(tensors)}")
    return ad.spectrum_select(tensors[0], tensors[1], tensors[2], choice)


def apply_sort(tensors, order: np.ndarray):
    """Reorder per-sample spectrum tensors into ranked positions.

    Returns [best, middle, worst] where best[i] is tensors[order[i, 0]][i].
    """
    return [_select_triplet(tensors, order[:, k]) for k in range(3)]


def inverse_sort(ranked, inverse: np.ndarray):
    """Undo apply_sort, restoring fixed rgb/nir/tir positions."""
    return [_select_triplet(ranked, inverse[:, s]) for s in range(3)]
