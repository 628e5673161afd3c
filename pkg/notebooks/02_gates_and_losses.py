"""
Token gates, cluster gates and the auxiliary losses
===================================================

How a token gate and a cluster gate pick experts, why the cluster gate keeps
all tokens of an image together, and what each auxiliary loss measures.
"""

# %%
import numpy as np

from moce.clustering import normalize_columns
from moce.model import (
    ModelConfig, MoceNetwork, imbalance_loss, importance_loss, moce_gate, patchify, token_gate,
)

rng = np.random.default_rng(0)
D, N, m = 16, 4, 5
Wg = rng.normal(size=(D, N))
C = normalize_columns(rng.normal(size=(D, m)))

# A token gate routes every token on its own features.
tokens = rng.normal(size=(6, D))
dec = token_gate(tokens, Wg, k=1)
print("token gate choices:", dec.chosen.ravel().tolist())

# The cluster gate only sees the centroid of the image's cluster, so the
# decision is a lookup: one per cluster, shared by all images in it.
for c in range(m):
    d = moce_gate(c, C, Wg, k=1)
    print(f"cluster {c}: expert {int(d.chosen[0])}, weight {float(d.weights[d.chosen[0]]):.3f}")

# %%
# Whole-image routing inside the network. The encoder records one gate
# decision per MoE layer; with the cluster gate every token of an image
# carries the same expert id.
cfg = ModelConfig(image_size=16, patch_size=4, embed_dim=D, decoder_dim=16, encoder_depth=2,
                  heads=2, num_experts=N, moe_layers=[1], gate="cluster")
net = MoceNetwork.init(cfg, 0, centroids=C)
net.params["encoder.block1.mlp.gate.w"].data[...] = Wg
images = rng.random((3, 16, 16, 3))
enc = net.encode(patchify(images, 4), cluster_ids=np.array([0, 2, 4]))
per_token = enc.gates[0].token_chosen.reshape(3, cfg.num_tokens)
print("experts per image (all tokens):", [sorted(set(row.tolist())) for row in per_token])

# %%
# The imbalance loss rewards confident gates: it is minus the squared
# coefficient of variation of each row, so a one-hot row over N=8 experts
# scores -7 and a uniform row scores 0.
print("one-hot row:", imbalance_loss(np.eye(8)[:1]).item())
print("uniform row:", imbalance_loss(np.full((1, 8), 1 / 8)).item())

# The importance loss looks across the batch instead and is zero when every
# expert gets the same total probability.
print("balanced batch:", importance_loss(np.eye(4)).item())
print("collapsed batch:", importance_loss(np.eye(4)[[0, 0, 0, 0]]).item())
