import numpy as np
import pytest

from moce.clustering import ClusterModel, normalize_columns
from moce.model import ModelConfig, MoceNetwork
from moce.synthetic import DomainSpec, SyntheticCorpusConfig, gen_synthetic

ACCEPTANCE_LINES: list[str] = []


def tiny_config(**kw) -> ModelConfig:
    base = dict(image_size=16, patch_size=4, embed_dim=16, decoder_dim=16, encoder_depth=2,
                decoder_depth=1, heads=2, num_experts=4, top_k=1, moe_layers=[1],
                gate="cluster")
    base.update(kw)
    return ModelConfig(**base)


def tiny_corpus(images_per_class=8, classes=2, seed=0, size=16):
    return gen_synthetic(SyntheticCorpusConfig(
        domains=[DomainSpec("blobs", classes), DomainSpec("gratings", classes)],
        images_per_class=images_per_class, image_size=size, seed=seed))


def random_centroids(d, m, seed=0):
    return normalize_columns(np.random.default_rng(seed).normal(size=(d, m)))


def tiny_moce(seed=0, m=3, **kw):
    cfg = tiny_config(**kw)
    C = random_centroids(cfg.embed_dim, m, seed + 100)
    net = MoceNetwork.init(cfg, seed, centroids=C if cfg.gate == "cluster" else None)
    # sharper gates than the tiny init so routing differs between clusters
    rng = np.random.default_rng(seed + 7)
    for layer in cfg.moe_layers:
        net.params[f"encoder.block{layer}.mlp.gate.w"].data[...] = rng.normal(
            0, 1.0, (cfg.embed_dim, cfg.num_experts))
    return net


def cluster_model_for(C, n, seed=0):
    a = np.random.default_rng(seed).integers(0, C.shape[1], n)
    return ClusterModel(C, a)


@pytest.fixture
def corpus():
    return tiny_corpus()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
