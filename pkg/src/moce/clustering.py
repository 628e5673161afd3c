"""Balanced clustering of image features.

Assignments come from an entropy-regularised transport problem with uniform
marginals (rows: clusters, columns: images), solved by a few Sinkhorn-Knopp
sweeps. Centroids are refined by SGD on the cross-entropy between that plan
and the softmax of the feature/centroid scores.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import numerics as nx

DEFAULT_ENTROPY_WEIGHT = 0.05
DEFAULT_SINKHORN_ITERS = 3


class SinkhornOverflowError(FloatingPointError):
    pass


class ClusteringError(ValueError):
    pass


def normalize_columns(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    norms = np.linalg.norm(F, axis=0, keepdims=True)
    if np.any(norms == 0):
        raise ClusteringError("cannot normalise an all-zero column")
    return F / norms


@dataclass
class TransportPlan:
    Q: np.ndarray  # (m, n)

    def marginal_deviation(self) -> tuple[float, float]:
        m, n = self.Q.shape
        rows = np.abs(self.Q.sum(axis=1) - 1.0 / m).max()
        cols = np.abs(self.Q.sum(axis=0) - 1.0 / n).max()
        return float(rows), float(cols)


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (d, m), unit columns
    assignments: np.ndarray  # (n,)
    entropy_weight: float = DEFAULT_ENTROPY_WEIGHT
    sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS
    objective: list = field(default_factory=list)
    # affine map applied to raw pooled features before normalisation
    transform: "FeatureTransform | None" = None

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[1]

    def config(self) -> dict:
        return {"num_clusters": self.num_clusters, "entropy_weight": self.entropy_weight,
                "sinkhorn_iters": self.sinkhorn_iters}

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.num_clusters)


@dataclass
class FeatureTransform:
    """Affine feature map ``(x - mean) @ matrix`` applied before unit normalisation.

    Pooled transformer features share a large common component and are
    dominated by a few directions (here: which domain an image comes from),
    so raw cosine similarities are all close to one. Whitening with the
    statistics of the pre-training corpus spreads them out.
    """
    mean: np.ndarray  # (d,)
    matrix: np.ndarray  # (d, d)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        d = self.mean.shape[0]
        if self.mean.shape != (d,) or self.matrix.shape != (d, d):
            raise ClusteringError(f"transform shapes {self.mean.shape}, {self.matrix.shape}")

    def apply(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.mean.shape[0]:
            raise ClusteringError(f"features {feats.shape} do not match transform dim "
                                  f"{self.mean.shape[0]}")
        return (feats - self.mean) @ self.matrix


def fit_feature_transform(feats: np.ndarray, whiten: bool = True,
                          eps: float = 1e-3) -> FeatureTransform:
    """Centre (and optionally PCA-whiten) raw ``(n, d)`` features.

    Eigenvalues are floored at ``eps`` times the largest one so that
    near-constant directions are not blown up into noise.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ClusteringError("need at least two feature rows to fit a transform")
    mean = feats.mean(axis=0)
    d = feats.shape[1]
    if not whiten:
        return FeatureTransform(mean, np.eye(d))
    evals, evecs = np.linalg.eigh(np.cov(feats - mean, rowvar=False))
    floor = eps * max(float(evals.max()), 1e-300)
    return FeatureTransform(mean, evecs / np.sqrt(np.maximum(evals, 0.0) + floor))


def raw_features(network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Pooled encoder features, (n, d), every patch visible and no gate noise."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ClusteringError("no images to featurise")
    return network.features(images, batch_size=batch_size, mode="average"
                            if not network.config.is_dense else "routed").astype(np.float64)


def extract_features(network, images: np.ndarray, transform: FeatureTransform | None = None,
                     batch_size: int = 256) -> np.ndarray:
    """Unit-norm pooled encoder features of ``images`` as a (d, n) matrix.

    With ``transform`` the raw features pass through it first. The result is
    a pure function of the weights, the pixels and the transform.
    """
    feats = raw_features(network, images, batch_size)
    if transform is not None:
        feats = transform.apply(feats)
    return normalize_columns(feats.T)


def sinkhorn_project(scores: np.ndarray, entropy_weight: float = DEFAULT_ENTROPY_WEIGHT,
                     iters: int = DEFAULT_SINKHORN_ITERS) -> TransportPlan:
    """Rescale exp(scores / entropy_weight) towards row sums 1/m and column sums 1/n.

    Each iteration rescales columns then rows, so row sums are exact on return.
    Works on log-potentials throughout.
    """
    if entropy_weight <= 0:
        raise ValueError("entropy weight must be positive")
    if iters < 1:
        raise ValueError("need at least one Sinkhorn iteration")
    scores = np.asarray(scores, dtype=np.float64)
    m, n = scores.shape
    with np.errstate(over="ignore", invalid="ignore"):
        log_k = scores / entropy_weight
    if not np.all(np.isfinite(log_k)):
        raise SinkhornOverflowError(
            f"scores / entropy_weight is not finite (entropy_weight={entropy_weight}); "
            "use a larger entropy weight")
    log_u = np.zeros(m)
    log_v = np.zeros(n)
    for _ in range(iters):
        log_v = -np.log(n) - logsumexp(log_k + log_u[:, None], axis=0)
        log_u = -np.log(m) - logsumexp(log_k + log_v[None, :], axis=1)
    Q = np.exp(log_u[:, None] + log_k + log_v[None, :])
    if not np.all(np.isfinite(Q)):
        raise SinkhornOverflowError("transport plan overflowed; use a larger entropy weight")
    return TransportPlan(Q)


def objective(Q: np.ndarray, scores: np.ndarray, entropy_weight: float) -> float:
    """<Q, scores> + entropy_weight * H(Q), with scores laid out like Q (m, n)."""
    q = Q[Q > 0]
    return float((Q * scores).sum() - entropy_weight * (q * np.log(q)).sum())


def centroid_cross_entropy(C, F: np.ndarray, targets: np.ndarray) -> nx.Tensor:
    """Mean over images of H(target_i, softmax(f_i^T C)); ``targets`` is (n, m)."""
    scores = nx.matmul(np.ascontiguousarray(F.T), C)
    return nx.scale(nx.sum(nx.mul(nx.log_softmax(scores, axis=1), targets)), -1.0 / F.shape[1])


def plan_targets(Q: np.ndarray) -> np.ndarray:
    """Per-image target distributions over clusters, (n, m)."""
    return (Q / Q.sum(axis=0, keepdims=True)).T


def update_centroids(Q: np.ndarray, F: np.ndarray, C: np.ndarray, lr: float = 0.1,
                     momentum: float = 0.9, weight_decay: float = 0.9,
                     batch_size: int | None = None,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """One SGD-with-momentum pass of the centroid cross-entropy, then column renormalisation.

    The momentum buffer lives for this one pass only. Weight decay is the
    coupled (L2) kind. ``batch_size=None`` means a single full-batch step.
    """
    F = np.asarray(F, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    d, n = F.shape
    if C.shape[0] != d or Q.shape != (C.shape[1], n):
        raise ClusteringError(f"shape mismatch: F {F.shape}, C {C.shape}, Q {Q.shape}")
    targets = plan_targets(Q)
    if batch_size is None or batch_size >= n:
        batches = [np.arange(n)]
    else:
        order = (rng or np.random.default_rng(0)).permutation(n)
        batches = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    vel = None
    for idx in batches:
        Ct = nx.Tensor(C.copy(), requires_grad=True)
        with nx.Graph() as g:
            loss = centroid_cross_entropy(Ct, F[:, idx], targets[idx])
            if not np.isfinite(loss.item()):
                raise ClusteringError(f"non-finite centroid loss {loss.item()}")
            nx.backward(g, loss)
        grad = Ct.grad + weight_decay * C
        vel = grad if vel is None else momentum * vel + grad
        C = C - lr * vel
    return normalize_columns(C)


def init_centroids(F: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """m distinct feature columns drawn uniformly without replacement."""
    return F[:, np.sort(rng.choice(F.shape[1], m, replace=False))].copy()


def cluster(F: np.ndarray, m: int, epochs: int = 10, seed: int = 0,
            entropy_weight: float = DEFAULT_ENTROPY_WEIGHT,
            sinkhorn_iters: int = DEFAULT_SINKHORN_ITERS, lr: float = 0.1,
            momentum: float = 0.9, weight_decay: float = 0.9,
            batch_size: int | None = None,
            transform: FeatureTransform | None = None) -> ClusterModel:
    """Alternate Sinkhorn assignment and centroid SGD for ``epochs`` rounds.

    ``F`` is (d, n) with unit columns; ``transform`` is only recorded on the
    result so downstream features can be mapped the same way. The default
    weight decay of 0.9 is unusually large. Since centroids are renormalised
    after every pass it mostly shrinks the step.
    """
    F = np.asarray(F, dtype=np.float64)
    d, n = F.shape
    if m < 2:
        raise ClusteringError("need at least two clusters")
    if n < m:
        raise ClusteringError(f"{n} images cannot fill {m} clusters")
    rng = np.random.default_rng(seed)
    C = init_centroids(F, m, rng)
    history = []
    for _ in range(epochs):
        scores = (F.T @ C).T
        Q = sinkhorn_project(scores, entropy_weight, sinkhorn_iters).Q
        history.append(objective(Q, scores, entropy_weight))
        C = update_centroids(Q, F, C, lr, momentum, weight_decay, batch_size, rng)
    scores = (F.T @ C).T
    Q = sinkhorn_project(scores, entropy_weight, sinkhorn_iters).Q
    history.append(objective(Q, scores, entropy_weight))
    return ClusterModel(C, np.argmax(Q, axis=0), entropy_weight, sinkhorn_iters, history,
                        transform)


def assign(C: np.ndarray, features: np.ndarray) -> np.ndarray:
    """argmax over clusters of F^T C per column; ties go to the lower index."""
    C = np.asarray(C)
    features = np.asarray(features)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] != C.shape[0]:
        raise ClusteringError(f"feature dim {features.shape[0]} != centroid dim {C.shape[0]}")
    return np.argmax(features.T @ C, axis=1)
