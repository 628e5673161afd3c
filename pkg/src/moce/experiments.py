"""Reference protocol: the end-to-end desk-scale pipeline run once per seed.

One seed trains two dense MAEs (full corpus and domain A only, equal step
budgets), clusters the full corpus with the full-corpus features, trains a
cluster-gated and a token-gated MoCE from the full-corpus MAE, selects and
extracts the sub-model for a fresh domain-A task and fine-tunes every
candidate on that task.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .clustering import ClusterModel, assign, cluster, extract_features, fit_feature_transform, \
    raw_features
from .deployment import ExpertSelection, extract_submodel, finetune_probe, \
    reconstruction_psnr, select_expert
from .io import Dataset
from .model import ModelConfig, MoceNetwork
from .synthetic import DomainSpec, SyntheticCorpusConfig, gen_synthetic, reference_config
from .training import TrainConfig, TrainResult, mutual_information, network_to_checkpoint, \
    pretrain_dense, pretrain_moce, routing_table

log = logging.getLogger(__name__)

DOMAIN_A = 0


@dataclass
class Protocol:
    images_per_class: int = 200
    task_images_per_class: int = 100
    task_train_per_class: int = 25
    dense_epochs: int = 20
    moce_epochs: int = 10
    num_clusters: int = 32
    cluster_epochs: int = 10
    base_lr: float = 2e-3
    batch_size: int = 64
    probe_steps: int = 300
    probe_lrs: tuple = (1e-2, 3e-2, 1e-1)
    # ModelConfig overrides shared by every network in the run
    model: dict = field(default_factory=dict)

    def model_config(self, **overrides) -> ModelConfig:
        kw = dict(self.model)
        kw.update(overrides)
        return ModelConfig(**kw)

    def train_config(self, seed: int, epochs: int, **kw) -> TrainConfig:
        return TrainConfig(epochs=epochs, batch_size=self.batch_size, base_lr=self.base_lr,
                           seed=seed, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["probe_lrs"] = list(self.probe_lrs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Protocol":
        d = dict(d)
        if "probe_lrs" in d:
            d["probe_lrs"] = tuple(d["probe_lrs"])
        return cls(**d)

    @classmethod
    def quick(cls) -> "Protocol":
        """Cheaper settings for the selection-stability sweep and smoke runs."""
        return cls(dense_epochs=8, moce_epochs=3, probe_steps=100)


def make_corpus(seed: int, protocol: Protocol) -> Dataset:
    return gen_synthetic(reference_config(seed, protocol.images_per_class))


def make_task(seed: int, protocol: Protocol):
    """Fresh domain-A images sharing the corpus class definitions.

    Returns ``(dataset, train_idx, test_idx)``; the first
    ``task_train_per_class`` images of each class form the train split.
    """
    ref = reference_config(seed)
    cfg = SyntheticCorpusConfig(domains=[DomainSpec(ref.domains[DOMAIN_A].family,
                                                    ref.domains[DOMAIN_A].num_classes)],
                                images_per_class=protocol.task_images_per_class,
                                seed=seed + 1000, latent_seed=seed)
    ds = gen_synthetic(cfg)
    k = protocol.task_train_per_class
    train = np.concatenate([np.nonzero(ds.labels == c)[0][:k] for c in np.unique(ds.labels)])
    test = np.setdiff1d(np.arange(len(ds)), train)
    return ds, train, test


def build_clusters(dense: MoceNetwork, images: np.ndarray, protocol: Protocol,
                   seed: int) -> ClusterModel:
    transform = fit_feature_transform(raw_features(dense, images))
    F = extract_features(dense, images, transform)
    return cluster(F, protocol.num_clusters, epochs=protocol.cluster_epochs, seed=seed,
                   transform=transform)


def cluster_expert_map(net: MoceNetwork) -> dict[int, np.ndarray]:
    """Noise-free expert chosen for each cluster, per MoE layer (top-1)."""
    if net.config.gate != "cluster" or net.centroids is None:
        raise ValueError("cluster-expert map needs a cluster-gated network")
    C = net.centroids
    out = {}
    for layer in net.config.moe_layers:
        logits = C.T @ net.params[f"encoder.block{layer}.mlp.gate.w"].data
        out[layer] = np.argmax(logits, axis=1)
    return out


def cluster_domains(assignments: np.ndarray, domains: np.ndarray, m: int) -> np.ndarray:
    """Majority domain of each cluster's training images (-1 for empty clusters)."""
    out = np.full(m, -1)
    for c in range(m):
        members = np.asarray(domains)[np.asarray(assignments) == c]
        if members.size:
            out[c] = int(np.argmax(np.bincount(members)))
    return out


def expert_domain_share(net: MoceNetwork, assignments: np.ndarray, domains: np.ndarray,
                        domain: int = DOMAIN_A) -> dict[int, np.ndarray]:
    """Per layer and expert, the share of its routed training mass that comes from
    clusters whose majority domain is ``domain``.

    Cluster gates route whole clusters, so an expert's mass is the summed size of
    the clusters it receives. Experts that receive nothing report NaN.
    """
    N = net.config.num_experts
    m = net.centroids.shape[1]
    sizes = np.bincount(np.asarray(assignments), minlength=m).astype(np.float64)
    is_domain = cluster_domains(assignments, domains, m) == domain
    out = {}
    for layer, cmap in cluster_expert_map(net).items():
        total = np.bincount(cmap, weights=sizes, minlength=N)
        hits = np.bincount(cmap, weights=sizes * is_domain, minlength=N)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[layer] = hits / total
    return out


def routing_mi(net: MoceNetwork, images: np.ndarray, labels: np.ndarray,
               cluster_ids=None) -> dict[int, float]:
    """Mutual information (nats) between class label and chosen expert, per layer."""
    tables = routing_table(net, images, labels, cluster_ids)
    return {layer: mutual_information(t.class_counts) for layer, t in tables.items()}


@dataclass
class SeedReport:
    seed: int
    accuracy: dict = field(default_factory=dict)  # model -> probe accuracy
    psnr: dict = field(default_factory=dict)  # (model, domain) -> dB
    mi: dict = field(default_factory=dict)  # gate mode -> mean MI over layers
    mi_per_layer: dict = field(default_factory=dict)
    experts_covered: dict = field(default_factory=dict)  # layer -> experts with >=1 cluster
    selection: dict | None = None
    selected_domain_share: dict = field(default_factory=dict)  # layer -> share of domain A
    cluster_sizes: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr"] = [{"model": m, "domain": dom, "psnr": v} for (m, dom), v in self.psnr.items()]
        return d


@dataclass
class SeedArtifacts:
    corpus: Dataset
    task: tuple
    dense_full: TrainResult
    dense_a: TrainResult | None = None
    cluster_model: ClusterModel | None = None
    moce: TrainResult | None = None
    token_moce: TrainResult | None = None
    selection: ExpertSelection | None = None
    submodel: MoceNetwork | None = None


def _timed(report: SeedReport, key: str, fn, *args, **kw):
    t = time.perf_counter()
    out = fn(*args, **kw)
    report.timings[key] = time.perf_counter() - t
    log.info("seed %d: %s took %.1fs", report.seed, key, report.timings[key])
    return out


def _probe(net: MoceNetwork, task, protocol: Protocol, seed: int) -> float:
    ds, tr, te = task
    work = MoceNetwork(net.config, net.state_dict(), dtype=np.float32)
    res = finetune_probe(work, ds.float_images(), ds.labels, lr_grid=protocol.probe_lrs,
                         steps=protocol.probe_steps, batch_size=protocol.batch_size,
                         seed=seed, split=(tr, te))
    return res.accuracy


def run_seed(seed: int, protocol: Protocol | None = None, *, domain_only: bool = True,
             token_gate: bool = True, probes: bool = True, psnr: bool = False):
    """Run the reference pipeline for one seed; returns ``(SeedReport, SeedArtifacts)``.

    The stages can be trimmed: ``domain_only=False`` skips the domain-A
    MAE, ``token_gate=False`` the token-gated MoCE and ``probes=False`` all
    fine-tuning.
    """
    protocol = protocol or Protocol()
    report = SeedReport(seed)
    corpus = make_corpus(seed, protocol)
    X = corpus.float_images()
    task = make_task(seed, protocol)
    dense_cfg = protocol.model_config(moe_layers=[])

    full = _timed(report, "dense_full", pretrain_dense,
                  protocol.train_config(seed, protocol.dense_epochs), dense_cfg, X)
    art = SeedArtifacts(corpus, task, full)
    if domain_only:
        XA = corpus.where_domain(DOMAIN_A).float_images()
        # equal optimisation budget: the half-size corpus gets twice the epochs
        epochs_a = protocol.dense_epochs * max(1, round(len(X) / max(1, len(XA))))
        art.dense_a = _timed(report, "dense_a", pretrain_dense,
                             protocol.train_config(seed, epochs_a), dense_cfg, XA)

    cm = _timed(report, "cluster", build_clusters, full.network, X, protocol, seed)
    art.cluster_model = cm
    report.cluster_sizes = cm.sizes().tolist()

    init = network_to_checkpoint(full.network)
    moce_cfg = protocol.model_config(gate="cluster")
    art.moce = _timed(report, "moce_cluster", pretrain_moce,
                      protocol.train_config(seed, protocol.moce_epochs), moce_cfg, X, cm,
                      init=init)
    net = art.moce.network
    report.mi_per_layer["cluster"] = routing_mi(net, X, corpus.labels, cm.assignments)
    report.experts_covered = {layer: sorted(set(v.tolist()))
                              for layer, v in cluster_expert_map(net).items()}

    if token_gate:
        art.token_moce = _timed(report, "moce_token", pretrain_moce,
                                protocol.train_config(seed, protocol.moce_epochs),
                                protocol.model_config(gate="token"), X, None, init=init)
        report.mi_per_layer["token"] = routing_mi(art.token_moce.network, X, corpus.labels)
    report.mi = {k: float(np.mean(list(v.values()))) for k, v in report.mi_per_layer.items()}

    task_ds = task[0]
    sel = select_expert(cm, full.network, net, task_ds.float_images())
    art.selection = sel
    report.selection = sel.to_dict()
    shares = expert_domain_share(net, cm.assignments, corpus.domains)
    report.selected_domain_share = {layer: float(shares[layer][e])
                                    for layer, e in sel.experts.items()}
    art.submodel = extract_submodel(net, sel)

    if probes:
        report.accuracy["dense_full"] = _timed(report, "probe_full", _probe, full.network, task,
                                               protocol, seed)
        if art.dense_a is not None:
            report.accuracy["dense_a"] = _timed(report, "probe_a", _probe, art.dense_a.network,
                                                task, protocol, seed)
        report.accuracy["moce"] = _timed(report, "probe_moce", _probe, art.submodel, task,
                                         protocol, seed)
    if psnr:
        report.psnr = psnr_table(art)
    return report, art


def psnr_table(art: SeedArtifacts, seed: int = 0) -> dict:
    """Masked-reconstruction PSNR per (model, domain) on the pre-training corpus."""
    corpus = art.corpus
    cm = art.cluster_model
    out = {}
    for dom in np.unique(corpus.domains):
        sub = corpus.where_domain(int(dom))
        X = sub.float_images()
        out[("dense_full", int(dom))] = reconstruction_psnr(art.dense_full.network, X, seed)
        if art.moce is not None and cm is not None:
            ids = assign(cm.centroids, extract_features(art.dense_full.network, X, cm.transform))
            out[("moce", int(dom))] = reconstruction_psnr(art.moce.network, X, seed, ids)
    return out
