"""
Balanced clustering with Sinkhorn assignments
=============================================

Cluster unit-norm features into ``m`` groups of roughly equal size, then
cluster the pooled features of a freshly trained dense MAE.

Run with ``python notebooks/01_balanced_clustering.py``; it takes under a
minute on one core.
"""

# %%
# A transport plan from cosine scores. Rows are clusters, columns are
# samples. Each Sinkhorn iteration rescales the columns and then the rows,
# so after any number of iterations the row sums are exact and the column
# sums approach 1/n.
import numpy as np

from moce.clustering import (
    cluster, extract_features, fit_feature_transform, normalize_columns, raw_features,
    sinkhorn_project,
)

rng = np.random.default_rng(0)
F = normalize_columns(rng.normal(size=(32, 64)))
C = normalize_columns(rng.normal(size=(32, 16)))
for iters in (1, 3, 10, 100):
    rows, cols = sinkhorn_project(C.T @ F, entropy_weight=0.05, iters=iters).marginal_deviation()
    print(f"{iters:>3} iterations: row deviation {rows:.1e}, column deviation {cols:.1e}")

# %%
# Two blobs on the unit circle. The solver alternates a 3-iteration
# Sinkhorn plan with momentum SGD on the centroids; the balance constraint
# keeps the two clusters close to 30 points each.
angles = np.concatenate([rng.normal(0.3, 0.15, 30), rng.normal(0.3 + 0.8 * np.pi, 0.15, 30)])
blobs = np.stack([np.cos(angles), np.sin(angles)])
cm = cluster(blobs, 2, epochs=10, seed=0)
print("cluster sizes:", cm.sizes().tolist())
print("objective per epoch:", np.round(cm.objective, 4).tolist())

# %%
# The same solver on real features: pooled encoder outputs of a small dense
# MAE trained for two epochs on the two-domain corpus, whitened before
# normalisation so that the cosine scores spread out.
from moce.experiments import Protocol, make_corpus
from moce.training import TrainConfig, pretrain_dense

protocol = Protocol(images_per_class=40)
corpus = make_corpus(0, protocol)
X = corpus.float_images()
dense = pretrain_dense(TrainConfig(epochs=2, seed=0), protocol.model_config(moe_layers=[]),
                       X).network
transform = fit_feature_transform(raw_features(dense, X))
cm = cluster(extract_features(dense, X, transform), 16, seed=0, transform=transform)
sizes = cm.sizes()
print(f"16 clusters over {len(X)} images, sizes {sizes.min()}..{sizes.max()}")

# How pure are the clusters with respect to the two generator domains?
for c in np.argsort(-sizes)[:5]:
    members = corpus.domains[cm.assignments == c]
    print(f"cluster {c:>2}: {len(members):>3} images, domain-0 share {np.mean(members == 0):.2f}")
