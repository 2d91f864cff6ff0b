import itertools

import numpy as np
import numpy.testing as npt
import pytest

from specreid import autodiff as ad
from specreid import quality
from specreid.errors import ShapeError


# ---------------------------------------------------------------------
# token_cosine
# ---------------------------------------------------------------------

def test_cosine_hand_cases():
    a = np.array([[2.0, 0.0], [-3.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    b = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    npt.assert_allclose(quality.token_cosine(a, b),
                        [1.0, -1.0, 0.0, 1.0 / np.sqrt(2.0)], atol=1e-12)


def test_cosine_self_similarity_is_one():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(3, 7, 5)) + 0.1
    npt.assert_allclose(quality.token_cosine(t, t.copy()), np.ones((3, 7)), atol=1e-12)


def test_cosine_bounds_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = rng.normal(size=(4, 9, 6))
        r = rng.normal(size=(4, 9, 6))
        c = quality.token_cosine(t, r)
        assert c.shape == (4, 9)
        assert (c <= 1.0 + 1e-12).all() and (c >= -1.0 - 1e-12).all()


def test_cosine_scale_invariance():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(5, 8))
    r = rng.normal(size=(5, 8))
    base = quality.token_cosine(t, r)
    npt.assert_allclose(quality.token_cosine(t * 37.0, r * 0.002), base, atol=1e-12)


def test_cosine_zero_norm_scores_zero_and_counts():
    quality.reset_zero_norm_token_count()
    tokens = np.array([[0.0, 0.0], [1.0, 0.0]])
    ref = np.array([[1.0, 0.0], [1.0, 0.0]])
    out = quality.token_cosine(tokens, ref)
    npt.assert_array_equal(out, [0.0, 1.0])
    assert quality.zero_norm_token_count() == 1
    quality.token_cosine(np.ones((3, 2)), np.zeros((3, 2)))
    assert quality.zero_norm_token_count() == 4
    quality.reset_zero_norm_token_count()


def test_cosine_shape_mismatch():
    with pytest.raises(ShapeError):
        quality.token_cosine(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(ShapeError):
        quality.token_cosine(np.ones((2, 3)), np.ones((3, 3)))


# ---------------------------------------------------------------------
# quality_scores ranking
# ---------------------------------------------------------------------

def _tokens_with_cosine(target: float, n: int = 4) -> np.ndarray:
    # 2d tokens at a fixed angle to the reference [1, 0]
    theta = np.arccos(target)
    return np.tile([np.cos(theta), np.sin(theta)], (n, 1))


def test_ranking_recovers_every_permutation():
    perms = list(itertools.permutations(range(3)))
    ref = np.tile([1.0, 0.0], (len(perms), 4, 1))
    # per sample, give the spectrum at rank k cosine 0.9 - 0.3k
    per_spectrum = np.zeros((3, len(perms), 4, 2))
    for i, perm in enumerate(perms):
        for k, s in enumerate(perm):
            per_spectrum[s, i] = _tokens_with_cosine(0.9 - 0.3 * k)
    ranking = quality.quality_scores(list(per_spectrum), ref)
    npt.assert_array_equal(ranking.order, np.array(perms))
    npt.assert_array_equal(ranking.first_choice, [p[0] for p in perms])


def test_ranking_self_reference_is_maximal():
    rng = np.random.default_rng(8)
    ref = rng.normal(size=(4, 6, 3)) + 0.1
    other = [rng.normal(size=(4, 6, 3)) for _ in range(2)]
    ranking = quality.quality_scores([ref.copy()] + other, ref)
    npt.assert_allclose(ranking.scores[:, 0], np.ones(4), atol=1e-12)
    npt.assert_array_equal(ranking.first_choice, np.zeros(4, dtype=int))


def test_ranking_tie_break_prefers_lower_spectrum_index():
    ref = np.ones((2, 5, 3))
    same = np.ones((2, 5, 3))
    ranking = quality.quality_scores([same, same.copy(), same.copy()], ref)
    npt.assert_array_equal(ranking.order, [[0, 1, 2], [0, 1, 2]])


def test_inverse_undoes_order():
    rng = np.random.default_rng(2)
    tokens = [rng.normal(size=(16, 6, 4)) for _ in range(3)]
    ranking = quality.quality_scores(tokens, rng.normal(size=(16, 6, 4)))
    b = np.arange(16)[:, None]
    npt.assert_array_equal(ranking.inverse[b, ranking.order], np.tile(np.arange(3), (16, 1)))


def test_ranking_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        quality.quality_scores(
            [np.ones((2, 3, 4)), np.ones((2, 3, 4)), np.ones((2, 5, 4))], np.ones((2, 3, 4))
        )
    with pytest.raises(ShapeError):
        quality.quality_scores(
            [np.ones((2, 3, 4))] * 3, np.ones((2, 4, 4))
        )


def test_ranking_scale_invariant_per_spectrum():
    rng = np.random.default_rng(9)
    tokens = [rng.normal(size=(8, 5, 4)) for _ in range(3)]
    ref = rng.normal(size=(8, 5, 4))
    base = quality.quality_scores(tokens, ref)
    scaled = quality.quality_scores(
        [tokens[0] * 250.0, tokens[1] * 0.004, tokens[2]], ref * 3.0
    )
    npt.assert_allclose(scaled.scores, base.scores, atol=1e-12)
    npt.assert_array_equal(scaled.order, base.order)


# ---------------------------------------------------------------------
# differentiable sort round-trip
# ---------------------------------------------------------------------

def test_sort_round_trip_exact_for_all_permutations():
    rng = np.random.default_rng(3)
    perms = list(itertools.permutations(range(3)))
    order = np.array(perms)
    inverse = np.empty_like(order)
    inverse[np.arange(6)[:, None], order] = np.arange(3)[None, :]
    tensors = [ad.Tensor(rng.normal(size=(6, 5, 4))) for _ in range(3)]
    ranked = quality.apply_sort(tensors, order)
    restored = quality.inverse_sort(ranked, inverse)
    for orig, back in zip(tensors, restored):
        npt.assert_array_equal(back.data, orig.data)


def test_sort_places_best_first():
    a = ad.Tensor(np.full((2, 1, 1), 10.0))
    b = ad.Tensor(np.full((2, 1, 1), 20.0))
    c = ad.Tensor(np.full((2, 1, 1), 30.0))
    order = np.array([[2, 0, 1], [1, 2, 0]])
    ranked = quality.apply_sort([a, b, c], order)
    npt.assert_array_equal(ranked[0].data.ravel(), [30.0, 20.0])
    npt.assert_array_equal(ranked[2].data.ravel(), [20.0, 10.0])


def test_sort_round_trip_routes_gradients_home():
    rng = np.random.default_rng(4)
    order = np.array([[1, 2, 0], [2, 0, 1], [0, 1, 2]])
    inverse = np.empty_like(order)
    inverse[np.arange(3)[:, None], order] = np.arange(3)[None, :]
    tensors = [ad.Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True) for _ in range(3)]
    ranked = quality.apply_sort(tensors, order)
    restored = quality.inverse_sort(ranked, inverse)
    weights = [rng.normal(size=(3, 2, 2)) for _ in range(3)]
    loss = ad.add(
        ad.add(
            ad.mul(restored[0], ad.Tensor(weights[0])).sum(),
            ad.mul(restored[1], ad.Tensor(weights[1])).sum(),
        ),
        ad.mul(restored[2], ad.Tensor(weights[2])).sum(),
    )
    loss.backward()
    # round trip is the identity map, so each tensor's grad is its weight
    for t, w in zip(tensors, weights):
        npt.assert_allclose(t.grad, w, atol=1e-12)
