"""
Deploying a sub-model and saving it
===================================

Train a tiny MoCE, pick the expert path for a downstream set, fold it into a
plain dense network, check that the two agree, and round-trip everything
through the binary checkpoint format.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from moce.clustering import assign, cluster, extract_features, fit_feature_transform, \
    raw_features
from moce.deployment import extract_submodel, psnr, reconstruction_psnr, select_expert
from moce.io import load_checkpoint, save_checkpoint
from moce.model import ModelConfig
from moce.synthetic import DomainSpec, SyntheticCorpusConfig, gen_synthetic
from moce.training import (
    TrainConfig, cluster_model_from_checkpoint, network_from_checkpoint, network_to_checkpoint,
    pretrain_dense, pretrain_moce,
)

corpus = gen_synthetic(SyntheticCorpusConfig(
    domains=[DomainSpec("blobs", 2), DomainSpec("gratings", 2)], images_per_class=30,
    image_size=16, seed=0))
X = corpus.float_images()
cfg = ModelConfig(image_size=16, patch_size=4, embed_dim=16, decoder_dim=16, encoder_depth=2,
                  heads=2, num_experts=4, moe_layers=[1], gate="cluster")

dense = pretrain_dense(TrainConfig(epochs=3, batch_size=16), cfg.dense(), X).network
transform = fit_feature_transform(raw_features(dense, X))
cm = cluster(extract_features(dense, X, transform), 6, seed=0, transform=transform)
moce = pretrain_moce(TrainConfig(epochs=2, batch_size=16), cfg, X, cm, init=dense).network

# %%
# Selection runs the downstream images once through the dense MAE, assigns
# them to clusters and reads off the gate decision of the largest cluster.
task = X[corpus.domains == 1]
sel = select_expert(cm, dense, moce, task)
print("histogram:", sel.histogram.tolist(), "-> cluster", sel.chosen_cluster,
      "experts", sel.experts)

# The extracted network has the dense parameter count and reproduces the
# routed forward pass for every image of the chosen cluster.
sub = extract_submodel(moce, sel)
ids = assign(cm.centroids, extract_features(dense, task, cm.transform))
members = task[ids == sel.chosen_cluster]
gap = np.abs(sub.features(members)
             - moce.features(members, cluster_ids=np.full(len(members), sel.chosen_cluster)))
print(f"parameters {sub.num_parameters()} (dense {dense.num_parameters()}), "
      f"max feature gap {gap.max():.1e} over {len(members)} images")

# %%
# Reconstruction quality in dB on masked patches.
print("PSNR dense:", round(reconstruction_psnr(dense, task), 2))
print("PSNR sub-model:", round(reconstruction_psnr(sub, task), 2))
print("PSNR of identical arrays is capped:", psnr(task[:1], task[:1]))

# %%
# Checkpoints hold the config as JSON and every tensor as float32, followed
# by a CRC-32. The MoCE checkpoint also carries the cluster model.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "moce.ckpt"
    save_checkpoint(path, network_to_checkpoint(moce, cm))
    ck = load_checkpoint(path)
    again = network_from_checkpoint(ck, dtype=np.float32)
    same = all(np.array_equal(again.state_dict()[k], v) for k, v in moce.state_dict().items())
    print(f"{path.stat().st_size} bytes, tensors identical: {same}, "
          f"clusters: {cluster_model_from_checkpoint(ck).num_clusters}")
