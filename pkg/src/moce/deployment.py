"""Matching a downstream task to a cluster, extracting its dense sub-model, and evaluating it."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .clustering import ClusterModel, assign, extract_features
from .model import MoceNetwork, batch_visible, masked_from_visible, moce_gate, patchify

PSNR_CAP_DB = 99.0


class SelectionError(ValueError):
    pass


@dataclass
class ExpertSelection:
    chosen_cluster: int
    histogram: np.ndarray
    experts: dict = field(default_factory=dict)  # layer -> expert index
    gate_weights: dict = field(default_factory=dict)  # layer -> kept gate probability
    top_k: int = 1

    def to_dict(self) -> dict:
        return {"chosen_cluster": int(self.chosen_cluster),
                "histogram": [int(v) for v in self.histogram],
                "experts": {str(k): int(v) for k, v in self.experts.items()},
                "gate_weights": {str(k): float(v) for k, v in self.gate_weights.items()}}


def choose_cluster(histogram) -> int:
    """Most populated cluster; ties go to the lower index."""
    hist = np.asarray(histogram)
    if hist.size == 0 or hist.sum() <= 0:
        raise SelectionError("no downstream image was assigned to any cluster")
    return int(np.argmax(hist))


def select_expert(cluster_model: ClusterModel, dense: MoceNetwork, moce: MoceNetwork,
                  images: np.ndarray) -> ExpertSelection:
    """One noise-free pass over the downstream images picks the most populated
    cluster and, per MoE layer, the expert its gate favours."""
    if len(images) == 0:
        raise SelectionError("downstream dataset is empty")
    F = extract_features(dense, images, cluster_model.transform)
    ids = assign(cluster_model.centroids, F)
    hist = np.bincount(ids, minlength=cluster_model.num_clusters)
    chosen = choose_cluster(hist)
    experts, weights = {}, {}
    for layer in moce.config.moe_layers:
        Wg = moce.params[f"encoder.block{layer}.mlp.gate.w"].data
        dec = moce_gate(chosen, cluster_model.centroids.astype(Wg.dtype), Wg, 1)
        experts[layer] = int(dec.chosen[0])
        weights[layer] = float(dec.weights[dec.chosen[0]])
    return ExpertSelection(chosen, hist, experts, weights, moce.config.top_k)


def extract_submodel(moce: MoceNetwork, selection: ExpertSelection) -> MoceNetwork:
    """A plain dense network computing exactly the chosen expert path.

    Since y = g * (W2 gelu(W1 x + b1) + b2), the kept gate weight g folds into the
    second affine map of the selected expert.
    """
    if moce.config.top_k != 1 or selection.top_k != 1:
        raise SelectionError("sub-model extraction only supports K=1 routing")
    cfg = moce.config.dense()
    params: dict[str, np.ndarray] = {}
    for name, t in moce.params.items():
        if ".mlp.expert" in name or name.endswith(".mlp.gate.w"):
            continue
        params[name] = t.data.copy()
    for layer in moce.config.moe_layers:
        pre = f"encoder.block{layer}.mlp"
        e = selection.experts[layer]
        g = selection.gate_weights[layer]
        params[f"{pre}.w1"] = moce.params[f"{pre}.expert{e}.w1"].data.copy()
        params[f"{pre}.b1"] = moce.params[f"{pre}.expert{e}.b1"].data.copy()
        params[f"{pre}.w2"] = g * moce.params[f"{pre}.expert{e}.w2"].data
        params[f"{pre}.b2"] = g * moce.params[f"{pre}.expert{e}.b2"].data
    return MoceNetwork(cfg, params, dtype=moce.dtype)


# ---------------------------------------------------------------- fine-tuning probe

@dataclass
class ProbeResult:
    accuracy: float
    best_lr: float
    per_lr: dict


def split_indices(n: int, seed: int, train_frac: float = 0.8):
    order = np.random.default_rng([seed, 80]).permutation(n)
    cut = int(round(train_frac * n))
    return order[:cut], order[cut:]


def _probe_once(net: MoceNetwork, tokens, labels, tr, te, num_classes, lr, steps,
                batch_size, seed, momentum):
    work = MoceNetwork(net.config, net.state_dict(), dtype=net.dtype)
    D = net.config.embed_dim
    head_w = nx.Tensor(np.zeros((D, num_classes), dtype=net.dtype), requires_grad=True,
                       name="head.w")
    head_b = nx.Tensor(np.zeros(num_classes, dtype=net.dtype), requires_grad=True, name="head.b")
    params = [p for n_, p in work.params.items() if not n_.startswith("decoder.")]
    params += [head_w, head_b]
    vel = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng([seed, 81])
    onehot = np.eye(num_classes, dtype=net.dtype)
    order = np.array([], dtype=np.intp)
    for step in range(steps):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(tr)])
        idx, order = order[:batch_size], order[batch_size:]
        with nx.Graph() as g:
            feats = work.encode(tokens[idx]).pooled()
            logits = nx.add_bias(nx.matmul(feats, head_w), head_b)
            loss = nx.scale(nx.sum(nx.mul(nx.log_softmax(logits), onehot[labels[idx]])),
                            -1.0 / len(idx))
            nx.backward(g, loss)
        cur = 0.5 * lr * (1 + math.cos(math.pi * step / steps))
        for p, v in zip(params, vel):
            if p.grad is None:
                continue
            v *= momentum
            v += p.grad
            p.data -= cur * v
            p.grad = None
    with nx.no_grad():
        preds = []
        for s in range(0, len(te), 256):
            feats = work.encode(tokens[te[s:s + 256]]).pooled()
            preds.append(np.argmax(feats.data @ head_w.data + head_b.data, axis=1))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)
    return float((pred == labels[te]).mean())


def finetune_probe(net: MoceNetwork, images: np.ndarray, labels: np.ndarray,
                   lr_grid=(3e-3, 1e-2, 3e-2), steps: int = 60, batch_size: int = 64,
                   seed: int = 0, momentum: float = 0.9, split=None) -> ProbeResult:
    """Linear head on pooled features, fine-tuned end to end with SGD + momentum.

    Each learning rate in ``lr_grid`` is a separate run from the same weights;
    the best held-out accuracy is reported. ``split`` is an optional
    (train_idx, test_idx) pair, otherwise an 80/20 seeded split is drawn.
    """
    if not net.config.is_dense:
        raise ValueError("finetune_probe expects a dense network (extract a sub-model first)")
    if len(lr_grid) == 0:
        raise ValueError("learning-rate grid is empty")
    labels = np.asarray(labels)
    classes, labels = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("probe task needs at least two classes")
    tokens = patchify(np.asarray(images, dtype=net.dtype), net.config.patch_size)
    tr, te = split if split is not None else split_indices(len(labels), seed)
    per = {float(lr): _probe_once(net, tokens, labels, np.asarray(tr), np.asarray(te),
                                  len(classes), lr, steps, batch_size, seed, momentum)
           for lr in lr_grid}
    best = max(per, key=lambda k: (per[k], -k))
    return ProbeResult(per[best], best, per)


def psnr(reconstruction, target, max_value: float = 1.0) -> float:
    """10 log10(max^2 / MSE) in dB; a perfect match reports the 99 dB cap."""
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    a = np.asarray(reconstruction, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise nx.ShapeError("psnr", a.shape, b.shape)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_value ** 2 / mse))


def reconstruction_psnr(net: MoceNetwork, images: np.ndarray, seed: int = 0,
                        cluster_ids=None, batch_size: int = 256) -> float:
    """Mean per-image PSNR of masked-patch predictions under seeded random masks."""
    images = np.asarray(images, dtype=np.float64)
    cfg = net.config
    rng = np.random.default_rng([seed, 82])
    vals = []
    for s in range(0, len(images), batch_size):
        chunk = images[s:s + batch_size]
        tok = patchify(chunk, cfg.patch_size)
        vis = batch_visible(len(chunk), cfg.num_tokens, cfg.mask_ratio, rng)
        masked = masked_from_visible(vis, cfg.num_tokens)
        cid = None if cluster_ids is None else np.asarray(cluster_ids)[s:s + batch_size]
        pred = net.reconstruct(chunk, vis, cid)
        for b in range(len(chunk)):
            vals.append(psnr(pred[b, masked[b]], tok[b, masked[b]]))
    return float(np.mean(vals))
