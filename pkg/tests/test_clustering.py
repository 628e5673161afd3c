import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from moce import numerics as nx
from moce.clustering import (
    ClusteringError, FeatureTransform, SinkhornOverflowError, assign, centroid_cross_entropy,
    cluster, extract_features, fit_feature_transform, normalize_columns, objective, plan_targets,
    raw_features, sinkhorn_project, update_centroids,
)
from moce.experiments import Protocol, make_corpus
from moce.model import MoceNetwork
from moce.numerics import fd_gradient
from moce.training import TrainConfig, pretrain_dense


def plain_sinkhorn(K, iters):
    """Independent oracle: diagonal scaling in the linear domain."""
    m, n = K.shape
    Q = K / K.sum()
    for _ in range(iters):
        Q = Q / Q.sum(axis=0, keepdims=True) / n
        Q = Q / Q.sum(axis=1, keepdims=True) / m
    return Q


def two_blobs(seed=0, per=30, spread=0.15):
    rng = np.random.default_rng(seed)
    angles = np.concatenate([rng.normal(0.3, spread, per), rng.normal(0.3 + np.pi * 0.8, spread,
                                                                     per)])
    F = np.stack([np.cos(angles), np.sin(angles)])
    return F, np.repeat([0, 1], per)


def exhaustive_two_means_on_circle(F):
    """Best 2-means partition of unit-circle points.

    A 2-means split is cut by a line, so on the circle each part is an arc
    of consecutive points in angular order; trying every arc is exhaustive.
    """
    n = F.shape[1]
    order = np.argsort(np.arctan2(F[1], F[0]))
    best, best_labels = np.inf, None
    for start in range(n):
        for length in range(1, n):
            idx = order[(start + np.arange(length)) % n]
            lab = np.zeros(n, dtype=int)
            lab[idx] = 1
            cost = sum(((F[:, lab == k] - F[:, lab == k].mean(1, keepdims=True)) ** 2).sum()
                       for k in (0, 1))
            if cost < best - 1e-12:
                best, best_labels = cost, lab
    return best_labels


def purity(pred, truth):
    return sum(np.bincount(truth[pred == c]).max() for c in np.unique(pred)) / len(truth)


# -- features

def test_extract_features_contract():
    net = MoceNetwork.init(tiny_config(moe_layers=[]), 0)
    imgs = np.random.default_rng(0).random((5, 16, 16, 3))
    F = extract_features(net, imgs)
    assert F.shape == (16, 5)
    np.testing.assert_allclose(np.linalg.norm(F, axis=0), 1.0, atol=1e-6)
    assert F.tobytes() == extract_features(net, imgs).tobytes()
    with pytest.raises(ClusteringError):
        extract_features(net, imgs[:0])


def test_whitening_transform_decorrelates():
    rng = np.random.default_rng(1)
    rot, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    raw = rng.normal(size=(500, 4)) @ np.diag([1.0, 2.0, 3.0, 4.0]) @ rot + 3.0
    z = fit_feature_transform(raw, eps=1e-12).apply(raw)
    np.testing.assert_allclose(z.mean(0), 0, atol=1e-10)
    np.testing.assert_allclose(np.cov(z, rowvar=False), np.eye(4), atol=1e-9)
    # the default floor shrinks each whitened variance to lam / (lam + 1e-3 lam_max)
    t = fit_feature_transform(raw)
    lam = np.linalg.eigvalsh(np.cov(raw, rowvar=False))
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(np.cov(t.apply(raw), rowvar=False))),
                               np.sort(lam / (lam + 1e-3 * lam.max())), rtol=1e-9)
    plain = fit_feature_transform(raw, whiten=False)
    np.testing.assert_array_equal(plain.matrix, np.eye(4))
    with pytest.raises(ClusteringError):
        t.apply(np.zeros((2, 3)))
    with pytest.raises(ClusteringError):
        FeatureTransform(np.zeros(3), np.zeros((2, 2)))


def test_transform_applies_before_normalisation():
    net = MoceNetwork.init(tiny_config(moe_layers=[]), 0)
    imgs = np.random.default_rng(2).random((6, 16, 16, 3))
    raw = raw_features(net, imgs)
    t = fit_feature_transform(raw)
    np.testing.assert_allclose(extract_features(net, imgs, t), normalize_columns(t.apply(raw).T))


# -- sinkhorn

def test_sinkhorn_uniform_scores_give_uniform_plan():
    Q = sinkhorn_project(np.full((3, 7), 0.4), 0.05, 3).Q
    np.testing.assert_allclose(Q, 1 / 21, rtol=1e-12)


def test_sinkhorn_single_cluster():
    Q = sinkhorn_project(np.random.default_rng(0).uniform(-1, 1, (1, 5)), 0.05, 3).Q
    np.testing.assert_allclose(Q, [[0.2] * 5], rtol=1e-12)


def test_sinkhorn_identity_against_linear_domain_oracle():
    A = np.array([[1.0, 0.0], [0.0, 1.0]])
    Q = sinkhorn_project(A, 0.05, 200).Q
    oracle = plain_sinkhorn(np.exp(A / 0.05), 10_000)
    np.testing.assert_allclose(Q, oracle, atol=1e-12)
    np.testing.assert_allclose(Q, [[0.5, 0], [0, 0.5]], atol=1e-3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_sinkhorn_matches_oracle_at_every_iteration_count(seed, iters):
    A = np.random.default_rng(seed).uniform(-1, 1, (4, 9))
    np.testing.assert_allclose(sinkhorn_project(A, 0.5, iters).Q,
                               plain_sinkhorn(np.exp(A / 0.5), iters), rtol=1e-9)


def test_sinkhorn_row_marginals_exact_after_final_step():
    A = np.random.default_rng(3).uniform(-1, 1, (5, 40))
    rows, _ = sinkhorn_project(A, 0.05, 1).marginal_deviation()
    assert rows < 1e-15


def test_sinkhorn_overflow_advises_larger_weight():
    with pytest.raises(SinkhornOverflowError, match="larger entropy weight"):
        sinkhorn_project(np.array([[1e308, 0.0]]), 1e-10, 3)


@pytest.mark.parametrize("kw", [dict(entropy_weight=0.0), dict(iters=0)])
def test_sinkhorn_preconditions(kw):
    with pytest.raises(ValueError):
        sinkhorn_project(np.zeros((2, 2)), **kw)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 8), st.integers(8, 40),
       st.floats(0.05, 2.0))
def test_sinkhorn_plan_is_a_distribution(seed, m, n, eps):
    Q = sinkhorn_project(np.random.default_rng(seed).uniform(-1, 1, (m, n)), eps, 3).Q
    assert np.all(Q >= 0)
    assert Q.sum() == pytest.approx(1.0, abs=1e-9)


# -- centroid updates

def test_centroid_cross_entropy_gradient_matches_fd():
    rng = np.random.default_rng(4)
    F = normalize_columns(rng.normal(size=(6, 4)))
    C = normalize_columns(rng.normal(size=(6, 3)))
    Q = sinkhorn_project((F.T @ C).T, 0.05, 3).Q
    T = plan_targets(Q)
    Ct = nx.Tensor(C, requires_grad=True)
    with nx.Graph() as g:
        nx.backward(g, centroid_cross_entropy(Ct, F, T))

    def f(c):
        s = F.T @ c
        s = s - s.max(1, keepdims=True)
        logp = s - np.log(np.exp(s).sum(1, keepdims=True))
        return float(-(T * logp).sum() / F.shape[1])

    fd = fd_gradient(f, C, 1e-5)
    assert np.max(np.abs(Ct.grad - fd)) / np.max(np.abs(fd)) < 1e-4


def test_update_centroids_contracts():
    rng = np.random.default_rng(5)
    F = normalize_columns(rng.normal(size=(6, 20)))
    C = normalize_columns(rng.normal(size=(6, 3)))
    Q = sinkhorn_project((F.T @ C).T).Q
    C2 = update_centroids(Q, F, C)
    np.testing.assert_allclose(np.linalg.norm(C2, axis=0), 1, atol=1e-12)
    np.testing.assert_allclose(update_centroids(Q, F, C, lr=0.0), C, atol=1e-15)
    with pytest.raises(ClusteringError):
        update_centroids(Q, F, C[:5])
    with pytest.raises(ClusteringError):
        update_centroids(Q, F * np.nan, C)


def test_minibatch_update_is_seeded():
    rng = np.random.default_rng(6)
    F = normalize_columns(rng.normal(size=(6, 30)))
    C = normalize_columns(rng.normal(size=(6, 3)))
    Q = sinkhorn_project((F.T @ C).T).Q
    a = update_centroids(Q, F, C, batch_size=8, rng=np.random.default_rng(1))
    b = update_centroids(Q, F, C, batch_size=8, rng=np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


# -- cluster / assign

def test_two_blob_purity_against_exhaustive_oracle():
    F, truth = two_blobs()
    oracle = exhaustive_two_means_on_circle(F)
    assert purity(oracle, truth) == 1.0
    cm = cluster(F, 2, epochs=10, seed=0)
    assert purity(cm.assignments, truth) >= 0.95
    assert purity(cm.assignments, oracle) >= 0.95
    sizes = cm.sizes()
    assert np.all(np.abs(sizes - 30) <= 0.2 * 30)


def test_cluster_is_deterministic_and_validates():
    F, _ = two_blobs(1)
    a, b = cluster(F, 2, seed=3), cluster(F, 2, seed=3)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    np.testing.assert_allclose(np.linalg.norm(a.centroids, axis=0), 1, atol=1e-6)
    with pytest.raises(ClusteringError):
        cluster(F, 1)
    with pytest.raises(ClusteringError):
        cluster(F[:, :3], 4)


@pytest.fixture(scope="module")
def desk_features():
    p = Protocol()
    X = make_corpus(0, p).float_images()
    dense = pretrain_dense(TrainConfig(epochs=2, base_lr=p.base_lr, seed=0),
                           p.model_config(moe_layers=[]), X).network
    t = fit_feature_transform(raw_features(dense, X))
    return extract_features(dense, X, t)


def test_objective_non_decreasing_on_desk_corpus(desk_features):
    cm = cluster(desk_features, 32, epochs=10, seed=0)
    steps = np.diff(cm.objective)
    assert np.all(steps >= -1e-6), steps.min()


def test_objective_helper_matches_definition():
    Q = np.array([[0.25, 0.25], [0.5, 0.0]])
    S = np.array([[1.0, 2.0], [3.0, 4.0]])
    H = -(2 * 0.25 * np.log(0.25) + 0.5 * np.log(0.5))
    assert objective(Q, S, 0.1) == pytest.approx(0.25 + 0.5 + 1.5 + 0.1 * H)


def test_assign_examples():
    C = np.eye(3)
    assert assign(C, C[:, 1]).tolist() == [1]
    f = (C[:, 0] + 2 * C[:, 1]) / np.sqrt(5)
    assert assign(C, f).tolist() == [1]
    tie = np.array([1.0, 1.0, 0.0]) / np.sqrt(2)
    assert assign(C, tie).tolist() == [0]
    with pytest.raises(ClusteringError):
        assign(C, np.ones((4, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3))
def test_assign_invariant_to_positive_rescaling(seed, scale):
    rng = np.random.default_rng(seed)
    C = normalize_columns(rng.normal(size=(5, 4)))
    F = normalize_columns(rng.normal(size=(5, 12)))
    np.testing.assert_array_equal(assign(C, F), assign(C * scale, F))
