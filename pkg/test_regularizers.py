"""
正则项测试: 相似矩阵, 稀疏和流形损失, 权重调度, 自适应比值
"""

import numpy as np
import pytest

from regularizers import (AdaptiveRegState, RegWeights, SimilarityMatrix, adaptive_update,
                          build_similarity_eps, build_similarity_kmeans, build_similarity_label,
                          farthest_point_centroids, kmeans_labels, manifold_loss, sparsity_loss)


def test_sparsity_loss_and_subgradient():
    loss, grad = sparsity_loss(np.array([[1.0, -2.0], [0.0, 0.5]]))
    assert loss == 3.5
    np.testing.assert_array_equal(grad, [[1.0, -1.0], [0.0, 1.0]])


def test_sparsity_homogeneity(rng):
    theta = rng.normal(size=(4, 3))
    assert sparsity_loss(3.0 * theta)[0] == pytest.approx(3.0 * sparsity_loss(theta)[0])


def test_label_similarity_block_structure():
    sim = build_similarity_label(np.array([0, 1, 0, 2, 1]))
    beta = sim.to_dense()
    np.testing.assert_array_equal(beta, beta.T)
    np.testing.assert_array_equal(np.diag(beta), 0.0)
    assert beta[0, 2] == 1 and beta[1, 4] == 1 and beta[0, 1] == 0
    assert sim.pair_count == len(sim.pairs) == 4


def test_one_hot_labels_group_by_row():
    labels = np.eye(3)[[0, 2, 0]]
    assert build_similarity_label(labels).to_dense()[0, 2] == 1


def test_subset_renumbers_rows():
    sim = build_similarity_label(np.array([0, 0, 1, 1]))
    sub = sim.subset([1, 2, 3])
    np.testing.assert_array_equal(sub.to_dense(), [[0, 0, 0], [0, 0, 1], [0, 1, 0]])
    explicit = SimilarityMatrix(4, "custom", explicit_pairs=np.array([[0, 3], [3, 0], [1, 2]]))
    np.testing.assert_array_equal(explicit.subset([3, 0]).pairs, [[1, 0], [0, 1]])


def test_eps_similarity_is_lazy_and_symmetric():
    X = np.array([[0.0, 0.0], [0.03, 0.0], [0.5, 0.5], [0.52, 0.5]])
    sim = build_similarity_eps(X, 0.05)
    assert sim.points is not None
    beta = sim.to_dense()
    np.testing.assert_array_equal(beta, beta.T)
    assert beta[0, 1] == 1 and beta[2, 3] == 1 and beta[0, 2] == 0
    sub = sim.subset([2, 3])
    assert sub.pair_count == 2
    with pytest.raises(ValueError):
        build_similarity_eps(X, -1.0)


def test_manifold_loss_two_points():
    Y = np.array([[0.0, 0.0], [1.0, 2.0]])
    sim = SimilarityMatrix(2, "custom", explicit_pairs=np.array([[0, 1], [1, 0]]))
    loss, grad = manifold_loss(Y, sim)
    assert loss == pytest.approx(5.0)
    np.testing.assert_allclose(grad, [[-2.0, -4.0], [2.0, 4.0]])


def test_group_fast_path_matches_pairs(rng):
    Y = rng.normal(size=(7, 3))
    grouped = build_similarity_label(np.array([0, 1, 0, 0, 2, 1, 2]))
    explicit = SimilarityMatrix(7, "custom", explicit_pairs=grouped.pairs)
    loss_a, grad_a = manifold_loss(Y, grouped)
    loss_b, grad_b = manifold_loss(Y, explicit)
    assert loss_a == pytest.approx(loss_b)
    np.testing.assert_allclose(grad_a, grad_b, atol=1e-12)


def test_manifold_loss_translation_invariant_and_nonnegative(rng):
    Y = rng.normal(size=(6, 4))
    sim = build_similarity_label(np.array([0, 0, 1, 1, 1, 2]))
    loss, _ = manifold_loss(Y, sim)
    shifted, _ = manifold_loss(Y + rng.normal(size=(1, 4)), sim)
    assert loss >= 0
    assert shifted == pytest.approx(loss)


def test_manifold_gradient_finite_differences(rng):
    Y = rng.normal(size=(5, 2))
    sim = build_similarity_label(np.array([0, 1, 0, 1, 0]))
    _, grad = manifold_loss(Y, sim)
    h = 1e-6
    for idx in np.ndindex(*Y.shape):
        dY = np.zeros_like(Y)
        dY[idx] = h
        numeric = (manifold_loss(Y + dY, sim)[0] - manifold_loss(Y - dY, sim)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_manifold_loss_index_out_of_range():
    sim = SimilarityMatrix(3, "custom", explicit_pairs=np.array([[0, 5]]))
    with pytest.raises(IndexError):
        manifold_loss(np.zeros((3, 2)), sim)


def test_farthest_point_centroids(rng):
    X = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [0.0, 10.0]])
    centroids = farthest_point_centroids(X, 3, rng)
    assert len({tuple(c) for c in centroids}) == 3


def test_kmeans_separates_clusters(rng):
    X = np.vstack([rng.normal(0.0, 0.1, size=(20, 2)), rng.normal(5.0, 0.1, size=(20, 2))])
    labels = kmeans_labels(X, 2, rng)
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1
    assert labels[0] != labels[-1]
    sim = build_similarity_kmeans(X, 2, rng)
    assert sim.kind == "kmeans" and sim.pair_count == 2 * 20 * 19
    with pytest.raises(ValueError):
        kmeans_labels(X, 0, rng)


def test_reg_weights_schedule():
    weights = RegWeights(alpha=0.1, gamma=0.06, delta=0.0, alpha_schedule=(0.1, 0.2),
                         delta_schedule=(10.0, 15.0, 20.0))
    assert weights.for_layer(2) == (0.1, 0.06, 10.0)
    alpha, gamma, delta = weights.for_layer(4)
    assert (alpha, delta) == (0.2, 20.0)
    assert gamma == pytest.approx(0.015)
    assert weights.for_layer(9)[2] == 20.0
    doubling = RegWeights(gamma=0.001, gamma_factor=2.0)
    assert doubling.for_layer(3)[1] == pytest.approx(0.002)
    with pytest.raises(ValueError):
        weights.for_layer(1)


def test_adaptive_ratio_clamped():
    state = AdaptiveRegState(alpha0=0.1, gamma0=0.2)
    assert adaptive_update(state, 2.0, 1.0) == pytest.approx((0.05, 0.1))
    assert adaptive_update(state, 0.01, 5.0) == pytest.approx((1.0, 2.0))
    assert adaptive_update(state, 0.0, 1.0) == pytest.approx((1.0, 2.0))
    assert state.ratio == 10.0
