"""Procedural two-family image corpus for negative-transfer experiments.

Family ``"blobs"`` draws one to three Gaussian blobs whose radius and profile
(round, ring, wide, tall) define the class; family ``"gratings"`` draws oriented sinusoidal gratings whose
orientation and frequency band define the class. Colours are drawn per image
from a shared palette, so classes are told apart by structure, not by colour.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .io import Dataset

FAMILIES = ("blobs", "gratings")


@dataclass
class DomainSpec:
    family: str
    num_classes: int = 8
    class_params: list | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown generator family {self.family!r}")
        if self.num_classes < 1:
            raise ValueError("a domain needs at least one class")


@dataclass
class SyntheticCorpusConfig:
    domains: list = field(default_factory=lambda: [DomainSpec("blobs"), DomainSpec("gratings")])
    images_per_class: int = 200
    image_size: int = 32
    seed: int = 0
    # seed of the per-class latent parameters; None -> ``seed``
    latent_seed: int | None = None
    noise: float = 0.05

    def __post_init__(self):
        self.domains = [d if isinstance(d, DomainSpec) else DomainSpec(**d) for d in self.domains]
        if len(self.domains) < 1:
            raise ValueError("need at least one domain")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCorpusConfig":
        return cls(**d)

    def class_offsets(self) -> list[int]:
        return [0] + list(itertools.accumulate(d.num_classes for d in self.domains))[:-1]


def reference_config(seed: int = 0, images_per_class: int = 200) -> SyntheticCorpusConfig:
    """Two domains x eight classes x ``images_per_class`` images of 32x32."""
    return SyntheticCorpusConfig(images_per_class=images_per_class, seed=seed)


def _palette(rng, n, hue=(0.0, 1.0)):
    hues = rng.uniform(hue[0], hue[1], n) % 1.0
    sat = rng.uniform(0.5, 1.0, n)
    val = rng.uniform(0.6, 1.0, n)
    return np.stack([_hsv_to_rgb(h, s, v) for h, s, v in zip(hues, sat, val)])


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def default_class_params(spec: DomainSpec, rng: np.random.Generator) -> list[dict]:
    n = spec.num_classes
    if spec.family == "blobs":
        combos = list(itertools.product((2.5, 4.5), BLOB_PROFILES))
        out = []
        for c in range(n):
            radius, profile = combos[c % len(combos)]
            out.append({"radius": float(radius * rng.uniform(0.95, 1.05)), "profile": profile})
        return out
    n_orient = max(1, math.ceil(n / 2))
    out = []
    for c in range(n):
        o, band = c % n_orient, c // n_orient
        out.append({"theta": float(math.pi * o / n_orient + rng.uniform(-0.05, 0.05)),
                    "freq": float((0.09, 0.2, 0.32)[band % 3] * rng.uniform(0.95, 1.05))})
    return out


BLOB_PROFILES = ("round", "ring", "wide", "tall")


def _blob_weight(profile, dy, dx, r):
    if profile == "ring":
        rad = np.sqrt(dy * dy + dx * dx)
        return np.exp(-((rad - r) ** 2) / (2 * (0.35 * r) ** 2))
    sy, sx = {"round": (1.0, 1.0), "wide": (0.55, 1.6), "tall": (1.6, 0.55)}[profile]
    return np.exp(-((dy / sy) ** 2 + (dx / sx) ** 2) / (2 * r * r))


def _render_blobs(p, size, rng, yy, xx):
    bg = rng.uniform(0.0, 0.25) * np.ones(3)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    color = _palette(rng, 1, (0.95, 1.12))[0]
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(6, size - 6, 2)
        r = p["radius"] * rng.uniform(0.85, 1.15)
        w = _blob_weight(p["profile"], yy - cy, xx - cx, r)
        img = img * (1 - w[..., None]) + color * w[..., None]
    return img


def _render_grating(p, size, rng, yy, xx):
    theta = p["theta"] + rng.normal(0, 0.06)
    freq = p["freq"] * rng.uniform(0.92, 1.08)
    phase = rng.uniform(0, 2 * np.pi)
    a, b = _palette(rng, 2, (0.45, 0.7))
    s = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    contrast = rng.uniform(0.6, 1.0)
    s = 0.5 + contrast * (s - 0.5)
    return a * s[..., None] + b * (1 - s[..., None])


def gen_synthetic(config: SyntheticCorpusConfig) -> Dataset:
    """Generate the corpus; byte-for-byte deterministic in the config."""
    size = config.image_size
    latent_rng = np.random.default_rng(config.seed if config.latent_seed is None
                                       else config.latent_seed)
    params = [d.class_params or default_class_params(d, latent_rng) for d in config.domains]
    rng = np.random.default_rng(config.seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, labels, domains = [], [], []
    for di, (spec, plist, offset) in enumerate(zip(config.domains, params, config.class_offsets())):
        render = _render_blobs if spec.family == "blobs" else _render_grating
        for c, p in enumerate(plist):
            for _ in range(config.images_per_class):
                img = render(p, size, rng, yy, xx)
                img = img + rng.normal(0, config.noise, img.shape)
                images.append(np.clip(np.round(img * 255), 0, 255).astype(np.uint8))
                labels.append(offset + c)
                domains.append(di)
    return Dataset(np.stack(images), np.array(labels), np.array(domains))


def pixel_statistics(images: np.ndarray) -> np.ndarray:
    """Channel means/stds and mean absolute gradients, one row per image."""
    x = np.asarray(images, dtype=np.float64)
    if x.max() > 1.0:
        x = x / 255.0
    means = x.mean(axis=(1, 2))
    stds = x.std(axis=(1, 2))
    gx = np.abs(np.diff(x, axis=2)).mean(axis=(1, 2, 3))
    gy = np.abs(np.diff(x, axis=1)).mean(axis=(1, 2, 3))
    return np.column_stack([means, stds, gx, gy])


def domain_separability(ds: Dataset, seed: int = 0) -> float:
    """Held-out accuracy of a least-squares linear probe on pixel statistics
    predicting the domain id (one-vs-rest)."""
    X = pixel_statistics(ds.images)
    X = (X - X.mean(0)) / (X.std(0) + 1e-12)
    X = np.column_stack([X, np.ones(len(X))])
    y = ds.domains
    k = int(y.max()) + 1
    if k < 2:
        return 1.0
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(X))
    cut = int(0.8 * len(X))
    tr, te = order[:cut], order[cut:]
    Y = np.eye(k)[y]
    W, *_ = np.linalg.lstsq(X[tr], Y[tr], rcond=None)
    return float((np.argmax(X[te] @ W, axis=1) == y[te]).mean())
