"""Pre-training loops for the dense MAE, TokenMoE and cluster-conditional MoE."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .clustering import ClusterModel, FeatureTransform, cluster, normalize_columns
from .io import Checkpoint
from .model import (
    ModelConfig, MoceNetwork, batch_visible, distill_loss, imbalance_loss, importance_loss,
    load_loss, mae_loss, masked_from_visible, patchify,
)

log = logging.getLogger(__name__)

LOSS_COMPONENTS = ("mae", "imbalance", "importance", "load", "distill")


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"non-finite training loss {value} at step {step}")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 1.5e-3
    # None -> 0.1 when continuing from a checkpoint, else 1.0
    lr_multiplier: float | None = None
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    warmup_frac: float = 0.05
    seed: int = 0
    init_checkpoint: str | None = None
    # None -> 0.01 x the per-tensor std of the dense weights
    expert_init_noise: float | None = None
    # cluster-gate initialisation: "grouped" (see grouped_gate_init) or "random"
    gate_init: str = "grouped"
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        if self.gate_init not in ("grouped", "random"):
            raise ValueError(f"unknown gate init {self.gate_init!r}")
        self.betas = tuple(self.betas)

    def resolved_lr_multiplier(self, continuing: bool) -> float:
        if self.lr_multiplier is not None:
            return self.lr_multiplier
        return 0.1 if continuing else 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(step: int, total: int, peak: float, warmup_frac: float) -> float:
    """Linear warmup then cosine decay to zero."""
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return peak * (step + 1) / warm
    span = max(1, total - warm)
    return 0.5 * peak * (1.0 + math.cos(math.pi * min(1.0, (step - warm) / span)))


class AdamW:
    """Adaptive moments with decoupled weight decay; per-parameter lr scale."""

    def __init__(self, params, betas=(0.9, 0.95), weight_decay=0.05, eps=1e-8,
                 lr_scale: dict | None = None, no_decay=()):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        lr_scale = lr_scale or {}
        self.scale = [lr_scale.get(p.name, 1.0) for p in self.params]
        self.decay = [0.0 if (p.data.ndim < 2 or p.name in no_decay) else 1.0 for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v, s, d in zip(self.params, self.m, self.v, self.scale, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            step_lr = lr * s
            if d:
                p.data *= (1.0 - step_lr * self.wd)
            p.data -= step_lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


@dataclass
class TrainResult:
    network: MoceNetwork
    history: list = field(default_factory=list)  # one dict per step
    config: TrainConfig | None = None

    def epoch_losses(self, key: str = "total") -> np.ndarray:
        by_epoch: dict[int, list] = {}
        for row in self.history:
            by_epoch.setdefault(row["epoch"], []).append(row[key])
        return np.array([np.mean(by_epoch[e]) for e in sorted(by_epoch)])

    def checkpoint(self, cluster_model: ClusterModel | None = None) -> Checkpoint:
        extra = {"train": self.config.to_dict()} if self.config else None
        return network_to_checkpoint(self.network, cluster_model, extra)


def network_to_checkpoint(net: MoceNetwork, cluster_model: ClusterModel | None = None,
                          extra: dict | None = None) -> Checkpoint:
    config = {"model": net.config.to_dict()}
    tensors = net.state_dict()
    if net.centroids is not None:
        tensors["cluster.centroids"] = net.centroids
    if cluster_model is not None:
        extra_ck = cluster_to_checkpoint(cluster_model)
        tensors.update(extra_ck.tensors)
        config.update(extra_ck.config)
    if extra:
        config.update(extra)
    return Checkpoint(config, tensors)


def network_from_checkpoint(ckpt: Checkpoint, dtype=np.float64) -> MoceNetwork:
    cfg = ModelConfig.from_dict(ckpt.config["model"])
    params = {k: v for k, v in ckpt.tensors.items() if not k.startswith("cluster.")}
    centroids = ckpt.tensors.get("cluster.centroids") if cfg.gate == "cluster" and not cfg.is_dense \
        else None
    return MoceNetwork(cfg, params, centroids, dtype)


def cluster_to_checkpoint(cluster_model: ClusterModel, extra: dict | None = None) -> Checkpoint:
    """A checkpoint holding only the ``cluster.*`` entries."""
    tensors = {"cluster.centroids": cluster_model.centroids,
               "cluster.assignments": cluster_model.assignments.astype(np.float32)}
    if cluster_model.transform is not None:
        tensors["cluster.feature_mean"] = cluster_model.transform.mean
        tensors["cluster.feature_matrix"] = cluster_model.transform.matrix
    config = {"cluster.config": cluster_model.config()}
    config.update(extra or {})
    return Checkpoint(config, tensors)


def cluster_model_from_checkpoint(ckpt: Checkpoint) -> ClusterModel:
    if "cluster.centroids" not in ckpt.tensors or "cluster.config" not in ckpt.config:
        raise KeyError("checkpoint carries no cluster model")
    cc = ckpt.config["cluster.config"]
    C = ckpt.tensors["cluster.centroids"].astype(np.float64)
    a = ckpt.tensors.get("cluster.assignments", np.zeros(0)).astype(np.int64)
    transform = None
    if "cluster.feature_mean" in ckpt.tensors:
        transform = FeatureTransform(ckpt.tensors["cluster.feature_mean"],
                                     ckpt.tensors["cluster.feature_matrix"])
    return ClusterModel(C, a, cc["entropy_weight"], cc["sinkhorn_iters"], transform=transform)


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch, 7]).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def _train(net: MoceNetwork, images: np.ndarray, cfg: TrainConfig, *, peak_lr: float,
           lr_scale: dict | None = None, cluster_ids=None, moe: bool = False,
           log_every: int = 0) -> TrainResult:
    mc = net.config
    tokens = patchify(np.asarray(images, dtype=net.dtype), mc.patch_size)
    n, T = len(tokens), mc.num_tokens
    steps_per_epoch = math.ceil(n / cfg.batch_size) if n else 0
    total = cfg.epochs * steps_per_epoch
    opt = AdamW(net.parameters(), cfg.betas, cfg.weight_decay, lr_scale=lr_scale,
                no_decay={"decoder.mask_token"})
    weights = mc.loss_weights
    cluster_mode = moe and mc.gate == "cluster"
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(n, cfg.batch_size, cfg.seed, epoch):
            tok = tokens[idx]
            B = len(idx)
            with nx.Graph(_step_seed(cfg.seed, step)) as g:
                visible = batch_visible(B, T, mc.mask_ratio, g.rng)
                masked = masked_from_visible(visible, T)
                cids = None if cluster_ids is None else cluster_ids[idx]
                enc = net.encode(tok, visible, cids, noise_rng=g.rng if moe else None)
                loss = mae_loss(net.decode(enc), tok, masked)
                parts = {"mae": loss.item()}
                total_loss = loss
                if moe:
                    aux = {"imbalance": None, "importance": None, "load": None}
                    for rec in enc.gates:
                        terms = {"importance": importance_loss(rec.combined),
                                 "load": load_loss(rec.logits, rec.noisy_logits,
                                                   mc.noise_scale, mc.top_k)}
                        if cluster_mode:
                            terms["imbalance"] = imbalance_loss(rec.probs)
                        for k, t in terms.items():
                            aux[k] = t if aux[k] is None else nx.add(aux[k], t)
                    if cluster_mode and weights["distill"]:
                        with nx.no_grad():
                            dense = net.encode(tok, visible, mode="average").pooled()
                        aux["distill"] = distill_loss(dense, enc.pooled())
                    for k, t in aux.items():
                        if t is None:
                            continue
                        parts[k] = t.item()
                        if weights[k]:
                            total_loss = nx.add(total_loss, nx.scale(t, weights[k]))
                value = total_loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(step, value)
                nx.backward(g, total_loss)
            opt.step(lr_at(step, total, peak_lr, cfg.warmup_frac))
            row = {"step": step, "epoch": epoch, "total": value}
            row.update({k: parts.get(k, 0.0) for k in LOSS_COMPONENTS})
            history.append(row)
            if log_every and step % log_every == 0:
                log.info("step %d epoch %d loss %.5f", step, epoch, value)
            step += 1
    return TrainResult(net, history, cfg)


def pretrain_dense(cfg: TrainConfig, model_cfg: ModelConfig, images: np.ndarray,
                   init: Checkpoint | None = None) -> TrainResult:
    """Masked-reconstruction training of a dense MAE."""
    model_cfg = model_cfg if model_cfg.is_dense else model_cfg.dense()
    if init is not None:
        net = MoceNetwork(model_cfg, {k: v for k, v in init.tensors.items()
                                      if not k.startswith("cluster.")}, dtype=cfg.dtype)
    else:
        net = MoceNetwork.init(model_cfg, cfg.seed, dtype=cfg.dtype)
    peak = cfg.base_lr * cfg.resolved_lr_multiplier(init is not None)
    return _train(net, images, cfg, peak_lr=peak)


def init_experts(dense: Checkpoint | MoceNetwork, model_cfg: ModelConfig,
                 noise_std: float | None = None, seed: int = 0,
                 centroids: np.ndarray | None = None, dtype=np.float64) -> MoceNetwork:
    """Expand the dense MLPs at ``model_cfg.moe_layers`` into perturbed expert copies.

    ``noise_std=None`` uses 0.01 x the std of each source tensor.
    """
    src = dense.state_dict() if isinstance(dense, MoceNetwork) else {
        k: v for k, v in dense.tensors.items() if not k.startswith("cluster.")}
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    template = MoceNetwork.init(model_cfg, seed, dtype=np.float64)
    for name in template.params:
        if ".mlp.expert" in name or name.endswith(".mlp.gate.w"):
            continue
        if name not in src:
            raise KeyError(f"dense checkpoint lacks {name}")
        if src[name].shape != template.params[name].shape:
            raise nx.ShapeError("init_experts", src[name].shape, template.params[name].shape)
        params[name] = np.array(src[name], copy=True)
    for layer in model_cfg.moe_layers:
        pre = f"encoder.block{layer}.mlp"
        for k in ("w1", "b1", "w2", "b2"):
            base = np.asarray(src[f"{pre}.{k}"], dtype=np.float64)
            if base.shape != template.params[f"{pre}.expert0.{k}"].shape:
                raise nx.ShapeError("init_experts", base.shape,
                                    template.params[f"{pre}.expert0.{k}"].shape)
            std = noise_std if noise_std is not None else 0.01 * float(base.std())
            for e in range(model_cfg.num_experts):
                params[f"{pre}.expert{e}.{k}"] = base + (rng.normal(0.0, std, base.shape)
                                                         if std > 0 else 0.0)
        params[f"{pre}.gate.w"] = template.params[f"{pre}.gate.w"].data.copy()
    return MoceNetwork(model_cfg, params, centroids, dtype)


def grouped_gate_init(centroids: np.ndarray, num_experts: int, seed: int = 0) -> np.ndarray:
    """Gate weights whose columns are the mean directions of balanced centroid groups.

    The m cluster centroids are themselves clustered into ``num_experts``
    groups with the same balanced solver, so every expert starts out as the
    favourite of a few similar clusters. Needs m >= num_experts.
    """
    C = np.asarray(centroids, dtype=np.float64)
    m = C.shape[1]
    if m < num_experts:
        raise ValueError(f"{m} clusters cannot seed {num_experts} expert gates")
    groups = cluster(C, num_experts, seed=seed).assignments.copy()
    # the solver only balances approximately; hand empty groups a member of the largest
    for e in range(num_experts):
        if np.any(groups == e):
            continue
        big = np.argmax(np.bincount(groups, minlength=num_experts))
        members = np.nonzero(groups == big)[0]
        centre = C[:, members].mean(axis=1)
        groups[members[np.argmin(centre @ C[:, members])]] = e
    W = np.stack([C[:, groups == e].sum(axis=1) for e in range(num_experts)], axis=1)
    return normalize_columns(W)


def pretrain_moce(cfg: TrainConfig, model_cfg: ModelConfig, images: np.ndarray,
                  cluster_model: ClusterModel | None = None,
                  init: Checkpoint | MoceNetwork | None = None,
                  cluster_ids: np.ndarray | None = None) -> TrainResult:
    """Train an expert-augmented MAE with gate noise and auxiliary losses.

    Cluster-gate mode adds the imbalance and distillation terms to the
    importance/load balancing used by both modes. ``cluster_ids`` defaults to
    the cluster model's assignments (which must then align with ``images``).
    Parameters copied from ``init`` train at ``lr_multiplier`` x the base rate;
    freshly created gates train at the base rate. Cluster gates start from
    :func:`grouped_gate_init` unless ``cfg.gate_init == "random"``.
    """
    if model_cfg.is_dense:
        raise ValueError("model config has no MoE layers")
    cluster_mode = model_cfg.gate == "cluster"
    if cluster_mode and cluster_model is None:
        raise ValueError("cluster-gate training needs a cluster model")
    centroids = cluster_model.centroids if cluster_mode else None
    if cluster_mode:
        cluster_ids = cluster_model.assignments if cluster_ids is None else cluster_ids
        cluster_ids = np.asarray(cluster_ids, dtype=np.intp)
        if len(cluster_ids) != len(images):
            raise ValueError("need one cluster id per training image")
    else:
        cluster_ids = None
    if init is None:
        net = MoceNetwork.init(model_cfg, cfg.seed, dtype=cfg.dtype, centroids=centroids)
        continuing = False
    else:
        net = init_experts(init, model_cfg, cfg.expert_init_noise, cfg.seed, centroids,
                           dtype=cfg.dtype)
        continuing = True
    if cluster_mode and cfg.gate_init == "grouped" and centroids.shape[1] >= model_cfg.num_experts:
        for layer in model_cfg.moe_layers:
            W = grouped_gate_init(centroids, model_cfg.num_experts, seed=cfg.seed + layer)
            net.params[f"encoder.block{layer}.mlp.gate.w"].data[...] = W
    mult = cfg.resolved_lr_multiplier(continuing)
    lr_scale = None
    if continuing and mult:
        lr_scale = {name: 1.0 / mult for name in net.params if name.endswith(".mlp.gate.w")}
    return _train(net, images, cfg, peak_lr=cfg.base_lr * mult, lr_scale=lr_scale,
                  cluster_ids=cluster_ids, moe=True)


# ---------------------------------------------------------------- routing analysis

@dataclass
class RoutingTable:
    layer: int
    by_class: np.ndarray  # (num_classes, N) row-stochastic
    by_cluster: np.ndarray | None  # (m, N) row-stochastic
    class_counts: np.ndarray  # raw token counts, (num_classes, N)


def _row_normalize(counts: np.ndarray) -> np.ndarray:
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts, dtype=np.float64), where=sums > 0)


def routing_table(net: MoceNetwork, images: np.ndarray, labels: np.ndarray,
                  cluster_ids: np.ndarray | None = None,
                  num_classes: int | None = None) -> dict[int, RoutingTable]:
    """Token-level routing proportions per MoE layer, noise off."""
    labels = np.asarray(labels)
    cfg = net.config
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    cid = cluster_ids if cfg.gate == "cluster" else None
    routes = net.routing(images, cid)
    N = cfg.num_experts
    out = {}
    for layer, chosen in routes.items():
        first = chosen[..., 0]  # (B, T) top-1 expert per token
        by_class = np.zeros((num_classes, N))
        np.add.at(by_class, (np.repeat(labels, first.shape[1]), first.reshape(-1)), 1)
        by_cluster = None
        if cluster_ids is not None:
            m = int(np.max(cluster_ids)) + 1 if net.centroids is None else net.centroids.shape[1]
            by_cluster = np.zeros((m, N))
            np.add.at(by_cluster, (np.repeat(np.asarray(cluster_ids), first.shape[1]),
                                   first.reshape(-1)), 1)
            by_cluster = _row_normalize(by_cluster)
        out[layer] = RoutingTable(layer, _row_normalize(by_class), by_cluster, by_class)
    return out


def mutual_information(counts: np.ndarray) -> float:
    """MI in nats of the joint distribution given by a count table."""
    p = np.asarray(counts, dtype=np.float64)
    p = p / p.sum()
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / (px @ py)[nz])).sum())


def distinct_decisions(net: MoceNetwork, images: np.ndarray, cluster_ids=None,
                       batch_size: int = 256) -> dict[int, set]:
    """Distinct (chosen experts, weights) decisions per MoE layer over one noise-free pass."""
    images = np.asarray(images)
    out: dict[int, set] = {i: set() for i in net.config.moe_layers}
    with nx.no_grad():
        for s in range(0, len(images), batch_size):
            tok = patchify(images[s:s + batch_size], net.config.patch_size)
            cid = None if cluster_ids is None else np.asarray(cluster_ids)[s:s + batch_size]
            enc = net.encode(tok, None, cid)
            for rec in enc.gates:
                w = rec.combined.data
                for r in range(w.shape[0]):
                    out[rec.layer].add((tuple(rec.chosen[r].tolist()),
                                        tuple(np.round(w[r], 12).tolist())))
    return out
