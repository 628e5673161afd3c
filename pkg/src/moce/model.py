"""Masked-autoencoder ViT whose chosen encoder MLPs are expert banks.

Two gate flavours are supported: ``"token"`` routes every token on its own
embedding, ``"cluster"`` routes a whole image on the embedding of the data
cluster it belongs to, so all of its tokens share one decision.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

DEFAULT_LOSS_WEIGHTS = {"imbalance": 0.01, "importance": 0.01, "load": 0.01, "distill": 0.01}


class ConfigError(ValueError):
    pass


class RoutingError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    encoder_depth: int = 4
    decoder_depth: int = 1
    embed_dim: int = 32
    decoder_dim: int = 32
    heads: int = 2
    mlp_ratio: int = 2
    mask_ratio: float = 0.75
    num_experts: int = 8
    top_k: int = 1
    # None -> the two deepest encoder MLPs; () -> plain dense MAE.
    moe_layers: Sequence[int] | None = None
    gate: str = "cluster"
    noise_scale: float | None = None
    loss_weights: dict = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.heads or self.decoder_dim % self.heads:
            raise ConfigError("embedding widths must be divisible by the head count")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError("mask ratio must lie in [0, 1)")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"need 1 <= K <= N, got K={self.top_k}, N={self.num_experts}")
        if self.moe_layers is None:
            self.moe_layers = [i for i in (self.encoder_depth - 2, self.encoder_depth - 1) if i >= 0]
        self.moe_layers = sorted(int(i) for i in self.moe_layers)
        if len(set(self.moe_layers)) != len(self.moe_layers) or any(
                not 0 <= i < self.encoder_depth for i in self.moe_layers):
            raise ConfigError(f"invalid MoE layer indices {self.moe_layers}")
        if self.gate not in ("token", "cluster"):
            raise ConfigError(f"unknown gate {self.gate!r}")
        if self.noise_scale is None:
            self.noise_scale = math.sqrt(1.0 / self.num_experts)
        weights = dict(DEFAULT_LOSS_WEIGHTS)
        weights.update(self.loss_weights or {})
        self.loss_weights = weights

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def is_dense(self) -> bool:
        return not self.moe_layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["moe_layers"] = list(self.moe_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def dense(self) -> "ModelConfig":
        """Same backbone with every MLP dense."""
        d = self.to_dict()
        d["moe_layers"] = []
        return ModelConfig.from_dict(d)


# ---------------------------------------------------------------- tokens / masks

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) or (H, W, C) -> (B, T, patch*patch*C), row-major patches, channel-last pixels."""
    single = images.ndim == 3
    x = images[None] if single else images
    B, H, W, C = x.shape
    if H % patch or W % patch:
        raise ConfigError(f"image {H}x{W} not divisible by patch {patch}")
    gh, gw = H // patch, W // patch
    t = x.reshape(B, gh, patch, gw, patch, C).transpose(0, 1, 3, 2, 4, 5)
    t = t.reshape(B, gh * gw, patch * patch * C)
    return t[0] if single else t


def unpatchify(tokens: np.ndarray, patch: int, channels: int = 3) -> np.ndarray:
    single = tokens.ndim == 2
    t = tokens[None] if single else tokens
    B, T, _ = t.shape
    g = int(round(math.sqrt(T)))
    if g * g != T:
        raise ConfigError(f"{T} tokens do not form a square grid")
    x = t.reshape(B, g, g, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(B, g * patch, g * patch, channels)
    return x[0] if single else x


@dataclass(frozen=True)
class MaskSpec:
    visible: np.ndarray
    masked: np.ndarray
    seed: int | None = None

    @property
    def num_tokens(self) -> int:
        return len(self.visible) + len(self.masked)


def num_masked(num_tokens: int, mask_ratio: float) -> int:
    if not 0 <= mask_ratio < 1:
        raise ConfigError("mask ratio must lie in [0, 1)")
    return int(round(mask_ratio * num_tokens))


def random_mask(num_tokens: int, mask_ratio: float, seed: int) -> MaskSpec:
    rng = np.random.default_rng(seed)
    k = num_masked(num_tokens, mask_ratio)
    perm = rng.permutation(num_tokens)
    return MaskSpec(np.sort(perm[k:]), np.sort(perm[:k]), seed)


def batch_visible(batch: int, num_tokens: int, mask_ratio: float,
                  rng: np.random.Generator) -> np.ndarray:
    """(B, V) sorted visible token indices, one independent mask per image."""
    k = num_masked(num_tokens, mask_ratio)
    keys = rng.random((batch, num_tokens))
    order = np.argsort(keys, axis=1, kind="stable")
    return np.sort(order[:, k:], axis=1)


def masked_from_visible(visible: np.ndarray, num_tokens: int) -> np.ndarray:
    B = visible.shape[0]
    keep = np.ones((B, num_tokens), dtype=bool)
    np.put_along_axis(keep, visible, False, axis=1)
    return np.nonzero(keep)[1].reshape(B, -1)


def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine position table, (grid*grid, dim)."""
    def one_d(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    gy, gx = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64),
                         indexing="ij")
    half = dim // 2
    emb = np.concatenate([one_d(half, gy.reshape(-1)), one_d(dim - half, gx.reshape(-1))], axis=1)
    return emb[:, :dim]


# ---------------------------------------------------------------- gates

@dataclass(frozen=True)
class GateDecision:
    weights: np.ndarray
    chosen: np.ndarray

    def key(self) -> tuple:
        return tuple(self.chosen.tolist()) + tuple(np.round(self.weights, 12).tolist())


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k column indices; ties go to the lower index."""
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def _decide(logits: np.ndarray, k: int, noise: np.ndarray | None) -> GateDecision:
    z = logits + noise if noise is not None else logits
    z = z - z.max()
    p = np.exp(z) / np.exp(z).sum()
    chosen = np.sort(topk_indices(p, k))
    w = np.zeros_like(p)
    w[chosen] = p[chosen]
    return GateDecision(w, chosen)


def token_gate(x: np.ndarray, gate_weight: np.ndarray, k: int, noise_on: bool = False,
               rng: np.random.Generator | None = None) -> GateDecision:
    """TopK(softmax(x @ W_g + noise)) for a single token; kept entries are not renormalized."""
    logits = np.asarray(x) @ gate_weight
    noise = None
    if noise_on:
        n = gate_weight.shape[1]
        noise = (rng or np.random.default_rng()).normal(0.0, math.sqrt(1.0 / n), n)
    return _decide(logits, k, noise)


def moce_gate(cluster_id: int, centroids: np.ndarray, gate_weight: np.ndarray, k: int,
              noise_on: bool = False, rng: np.random.Generator | None = None) -> GateDecision:
    """Gate on the centroid column of ``cluster_id`` (centroids are d x m)."""
    m = centroids.shape[1]
    if not 0 <= cluster_id < m:
        raise RoutingError(f"cluster id {cluster_id} outside [0, {m})")
    return token_gate(centroids[:, cluster_id], gate_weight, k, noise_on, rng)


@dataclass
class ExpertBank:
    experts: list[dict[str, np.ndarray]]
    gate_weight: np.ndarray

    def __post_init__(self):
        shapes = {tuple((k, v.shape) for k, v in sorted(e.items())) for e in self.experts}
        if len(shapes) != 1:
            raise ConfigError("experts in a bank must share shapes")

    @property
    def num_experts(self) -> int:
        return len(self.experts)


def expert_mlp(x, p) -> Tensor:
    h = nx.gelu(nx.add_bias(nx.matmul(x, p["w1"]), p["b1"]))
    return nx.add_bias(nx.matmul(h, p["w2"]), p["b2"])


def moe_forward(x: np.ndarray, decision: GateDecision, bank: ExpertBank) -> np.ndarray:
    """y = sum_i w_i E_i(x), evaluating only the chosen experts."""
    if decision.weights.shape != (bank.num_experts,):
        raise RoutingError("gate decision does not match the expert bank")
    x2 = np.atleast_2d(x)
    y = np.zeros_like(x2)
    for i in decision.chosen:
        with nx.no_grad():
            y = y + decision.weights[i] * expert_mlp(x2, bank.experts[int(i)]).data
    return y.reshape(np.shape(x))


# ---------------------------------------------------------------- losses

def mae_loss(pred, target: np.ndarray, masked: np.ndarray) -> Tensor:
    """Mean squared error over the pixels of masked tokens only.

    ``pred``/``target`` are (B, T, P); ``masked`` is (B, M) token indices.
    """
    pred = nx.as_tensor(pred)
    masked = np.asarray(masked)
    if masked.size == 0:
        raise ValueError("mae_loss needs at least one masked token")
    if masked.ndim == 1:
        masked = masked[None]
    B, T, P = pred.shape
    rows = (np.arange(B)[:, None] * T + masked).reshape(-1)
    sel = nx.gather_rows(nx.reshape(pred, (B * T, P)), rows)
    tgt = np.asarray(target, dtype=pred.data.dtype).reshape(B * T, P)[rows]
    return nx.mean(nx.square(nx.sub(sel, tgt)))


def _cv_squared(x: Tensor) -> Tensor:
    m = nx.mean(x)
    return nx.div(nx.var(x), nx.square(m))


def imbalance_loss(gates) -> Tensor:
    """-sum over rows of (std(row) / mean(row))**2, population std over the N experts."""
    gates = nx.as_tensor(gates)
    if gates.ndim != 2:
        raise nx.ShapeError("imbalance_loss", gates.shape)
    if np.any(gates.data.mean(axis=1) == 0):
        raise ValueError("gate row with zero mean")
    ratio = nx.div(nx.var(gates, axis=1), nx.square(nx.mean(gates, axis=1)))
    return nx.scale(nx.sum(ratio), -1.0)


def importance_loss(gates) -> Tensor:
    """Squared coefficient of variation of per-expert summed gate values."""
    gates = nx.as_tensor(gates)
    return _cv_squared(nx.sum(gates, axis=0))


def load_loss(logits, noisy_logits: np.ndarray, noise_scale: float, k: int = 1) -> Tensor:
    """Squared CV of expected per-expert selection counts under Gaussian gate noise.

    An expert is selected when its noisy logit beats the k-th largest noisy
    logit among the other experts; that threshold is held constant.
    """
    logits = nx.as_tensor(logits)
    noisy = np.asarray(noisy_logits, dtype=logits.data.dtype)
    R, N = noisy.shape
    if N == 1:
        return nx.scale(nx.sum(logits), 0.0)
    thr = np.empty_like(noisy)
    for i in range(N):
        others = np.delete(noisy, i, axis=1)
        thr[:, i] = -np.sort(-others, axis=1)[:, min(k, N - 1) - 1]
    z = nx.scale(nx.sub(logits, thr), 1.0 / noise_scale)
    load = nx.sum(nx.normal_cdf(z), axis=0)
    return _cv_squared(load)


def distill_loss(dense_features, expert_features) -> Tensor:
    """Mean squared difference; the dense branch is a constant target."""
    dense_features = nx.as_tensor(dense_features)
    expert_features = nx.as_tensor(expert_features)
    if dense_features.shape != expert_features.shape:
        raise nx.ShapeError("distill_loss", dense_features.shape, expert_features.shape)
    return nx.mean(nx.square(nx.sub(expert_features, nx.detach(dense_features))))


# ---------------------------------------------------------------- network

@dataclass
class GateRecord:
    """What one MoE layer decided for one forward pass.

    ``rows`` are tokens (token gate) or images (cluster gate).
    """
    layer: int
    probs: Tensor
    logits: Tensor
    noisy_logits: np.ndarray
    chosen: np.ndarray
    combined: Tensor
    per: str
    token_chosen: np.ndarray  # (R_tokens, K) chosen experts for every token


@dataclass
class EncodeResult:
    latents: Tensor  # (B*V, D), after the final norm
    batch: int
    visible: np.ndarray
    gates: list[GateRecord]

    def pooled(self) -> Tensor:
        B = self.batch
        D = self.latents.shape[-1]
        return nx.mean(nx.reshape(self.latents, (B, -1, D)), axis=1)


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, shape), -2 * std, 2 * std)


def _xavier(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, (fan_in, fan_out))


class MoceNetwork:
    """Parameters plus the forward passes of a (possibly expert-augmented) MAE."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 centroids: np.ndarray | None = None, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {
            k: Tensor(np.asarray(v, dtype=self.dtype), requires_grad=True, name=k)
            for k, v in params.items()}
        self.centroids = None if centroids is None else np.asarray(centroids, dtype=self.dtype)
        c = config
        self._pos = sincos_pos_embed(c.embed_dim, c.grid).astype(self.dtype)
        self._dec_pos = sincos_pos_embed(c.decoder_dim, c.grid).astype(self.dtype)

    # -- construction

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float64,
             centroids: np.ndarray | None = None) -> "MoceNetwork":
        rng = np.random.default_rng(seed)
        # expert jitter and gates draw from their own stream, so the shared
        # weights match a dense network built with the same seed
        moe_rng = np.random.default_rng([seed, 1])
        c = config
        D, Dd, P = c.embed_dim, c.decoder_dim, c.patch_dim
        p: dict[str, np.ndarray] = {}
        p["patch_embed.w"] = _xavier(rng, P, D)
        p["patch_embed.b"] = np.zeros(D)

        def block(prefix, dim, moe):
            p[f"{prefix}.norm1.w"] = np.ones(dim)
            p[f"{prefix}.norm1.b"] = np.zeros(dim)
            for name in ("q", "k", "v", "proj"):
                p[f"{prefix}.attn.{name}.w"] = _xavier(rng, dim, dim)
                p[f"{prefix}.attn.{name}.b"] = np.zeros(dim)
            p[f"{prefix}.norm2.w"] = np.ones(dim)
            p[f"{prefix}.norm2.b"] = np.zeros(dim)
            hidden = dim * c.mlp_ratio
            mlp = {"w1": _xavier(rng, dim, hidden), "b1": np.zeros(hidden),
                   "w2": _xavier(rng, hidden, dim), "b2": np.zeros(dim)}
            if not moe:
                for k, v in mlp.items():
                    p[f"{prefix}.mlp.{k}"] = v
                return
            for e in range(c.num_experts):
                for k, v in mlp.items():
                    jitter = 0.0 if e == 0 else moe_rng.normal(0.0, 0.01 * (v.std() or 1.0), v.shape)
                    p[f"{prefix}.mlp.expert{e}.{k}"] = v + jitter
            p[f"{prefix}.mlp.gate.w"] = _trunc_normal(moe_rng, (dim, c.num_experts))

        for i in range(c.encoder_depth):
            block(f"encoder.block{i}", D, i in c.moe_layers)
        p["encoder.norm.w"] = np.ones(D)
        p["encoder.norm.b"] = np.zeros(D)
        p["decoder.embed.w"] = _xavier(rng, D, Dd)
        p["decoder.embed.b"] = np.zeros(Dd)
        p["decoder.mask_token"] = _trunc_normal(rng, (Dd,))
        for i in range(c.decoder_depth):
            block(f"decoder.block{i}", Dd, False)
        p["decoder.norm.w"] = np.ones(Dd)
        p["decoder.norm.b"] = np.zeros(Dd)
        p["decoder.pred.w"] = _xavier(rng, Dd, P)
        p["decoder.pred.b"] = np.zeros(P)
        return cls(config, p, centroids, dtype)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return int(np.sum([v.data.size for v in self.params.values()]))

    def expert_bank(self, layer: int) -> ExpertBank:
        pre = f"encoder.block{layer}.mlp"
        experts = [{k: self.params[f"{pre}.expert{e}.{k}"].data for k in ("w1", "b1", "w2", "b2")}
                   for e in range(self.config.num_experts)]
        return ExpertBank(experts, self.params[f"{pre}.gate.w"].data)

    # -- pieces

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _linear(self, x, prefix):
        return nx.add_bias(nx.matmul(x, self._p(prefix + ".w")), self._p(prefix + ".b"))

    def _attention(self, x, prefix, B, L, dim):
        H = self.config.heads
        dh = dim // H

        def heads(t):
            return nx.transpose(nx.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q = heads(self._linear(x, prefix + ".q"))
        k = heads(self._linear(x, prefix + ".k"))
        v = heads(self._linear(x, prefix + ".v"))
        att = nx.softmax(nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)))
        out = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B * L, dim))
        return self._linear(out, prefix + ".proj")

    def _dense_mlp(self, h, prefix):
        return expert_mlp(h, {k: self._p(f"{prefix}.{k}") for k in ("w1", "b1", "w2", "b2")})

    def _expert(self, prefix, e):
        return {k: self._p(f"{prefix}.expert{e}.{k}") for k in ("w1", "b1", "w2", "b2")}

    def _moe(self, h, layer, B, L, cluster_ids, noise_rng, mode, forced):
        c = self.config
        N, K = c.num_experts, c.top_k
        prefix = f"encoder.block{layer}.mlp"
        R = B * L
        if mode == "average":
            out = None
            for e in range(N):
                y = expert_mlp(h, self._expert(prefix, e))
                out = y if out is None else nx.add(out, y)
            return nx.scale(out, 1.0 / N), None

        Wg = self._p(prefix + ".gate.w")
        if c.gate == "cluster":
            if cluster_ids is None:
                raise RoutingError("cluster gate needs a cluster id for every image")
            if self.centroids is None:
                raise RoutingError("network has no cluster centroids")
            cluster_ids = np.asarray(cluster_ids, dtype=np.intp)
            m = self.centroids.shape[1]
            if cluster_ids.shape != (B,) or cluster_ids.min() < 0 or cluster_ids.max() >= m:
                raise RoutingError(f"cluster ids must be {B} values in [0, {m})")
            # one gate per cluster, then shared by its images
            cl_logits = nx.matmul(self.centroids.T, Wg)
            noise = None
            if noise_rng is not None:
                noise = noise_rng.normal(0.0, c.noise_scale, (m, N)).astype(self.dtype)
            logits = nx.gather_rows(cl_logits, cluster_ids)
            noisy = logits.data if noise is None else logits.data + noise[cluster_ids]
            probs = nx.softmax(logits if noise is None else nx.add(logits, noise[cluster_ids]))
            per = "image"
            row_of_token = np.repeat(np.arange(B), L)
        else:
            logits = nx.matmul(h, Wg)
            noise = None
            if noise_rng is not None:
                noise = noise_rng.normal(0.0, c.noise_scale, (R, N)).astype(self.dtype)
            noisy = logits.data if noise is None else logits.data + noise
            probs = nx.softmax(logits if noise is None else nx.add(logits, noise))
            per = "token"
            row_of_token = np.arange(R)

        chosen = topk_indices(probs.data, K) if forced is None else np.asarray(forced)[:, None]
        sel = np.zeros(probs.shape, dtype=self.dtype)
        np.put_along_axis(sel, chosen, 1.0, axis=1)
        combined = nx.mul(probs, sel)
        flat_probs = nx.reshape(probs, (-1,))
        out = None
        tok_chosen = chosen[row_of_token]
        for e in range(N):
            rows = np.nonzero((tok_chosen == e).any(axis=1))[0]
            if rows.size == 0:
                continue
            w = nx.gather_rows(flat_probs, row_of_token[rows] * N + e)
            y = nx.mul_rows(expert_mlp(nx.gather_rows(h, rows), self._expert(prefix, e)), w)
            y = nx.scatter_rows(y, rows, R)
            out = y if out is None else nx.add(out, y)
        rec = GateRecord(layer, probs, logits, noisy, chosen, combined, per, tok_chosen)
        return out, rec

    # -- public passes

    def encode(self, tokens: np.ndarray, visible: np.ndarray | None = None,
               cluster_ids=None, noise_rng: np.random.Generator | None = None,
               mode: str = "routed", forced_experts: dict | None = None) -> EncodeResult:
        """Encode the visible tokens of a batch.

        ``tokens`` is (B, T, P); ``visible`` is (B, V) indices (default: all).
        ``mode="average"`` replaces every expert bank by the mean of its experts.
        ``forced_experts`` maps layer -> per-image expert ids, bypassing the gate.
        """
        c = self.config
        tokens = np.asarray(tokens, dtype=self.dtype)
        if tokens.ndim == 2:
            tokens = tokens[None]
        B, T, P = tokens.shape
        if T != c.num_tokens or P != c.patch_dim:
            raise nx.ShapeError("encode", tokens.shape, (B, c.num_tokens, c.patch_dim))
        if visible is None:
            visible = np.tile(np.arange(T), (B, 1))
        visible = np.asarray(visible)
        L = visible.shape[1]
        if c.gate == "cluster" and not c.is_dense and mode == "routed" and cluster_ids is None \
                and not forced_experts:
            raise RoutingError("cluster gate needs a cluster id for every image")
        rows = (np.arange(B)[:, None] * T + visible).reshape(-1)
        x_vis = tokens.reshape(B * T, P)[rows]
        x = self._linear(Tensor(x_vis), "patch_embed")
        x = nx.add(x, self._pos[visible.reshape(-1)])
        gates: list[GateRecord] = []
        for i in range(c.encoder_depth):
            pre = f"encoder.block{i}"
            h = nx.layer_norm(x, self._p(pre + ".norm1.w"), self._p(pre + ".norm1.b"))
            x = nx.add(x, self._attention(h, pre + ".attn", B, L, c.embed_dim))
            h = nx.layer_norm(x, self._p(pre + ".norm2.w"), self._p(pre + ".norm2.b"))
            if i in c.moe_layers:
                forced = None
                if forced_experts is not None and i in forced_experts:
                    forced = np.broadcast_to(np.asarray(forced_experts[i]), (B,))
                    if c.gate == "token":
                        forced = np.repeat(forced, L)
                y, rec = self._moe(h, i, B, L, cluster_ids, noise_rng, mode, forced)
                if rec is not None:
                    gates.append(rec)
            else:
                y = self._dense_mlp(h, pre + ".mlp")
            x = nx.add(x, y)
        x = nx.layer_norm(x, self._p("encoder.norm.w"), self._p("encoder.norm.b"))
        return EncodeResult(x, B, visible, gates)

    def decode(self, enc: EncodeResult) -> Tensor:
        """Predicted patch pixels for every token, (B, T, P)."""
        c = self.config
        B, T, Dd = enc.batch, c.num_tokens, c.decoder_dim
        visible = enc.visible
        masked = masked_from_visible(visible, T)
        z = self._linear(enc.latents, "decoder.embed")
        vis_rows = (np.arange(B)[:, None] * T + visible).reshape(-1)
        full = nx.scatter_rows(z, vis_rows, B * T)
        if masked.size:
            mrows = (np.arange(B)[:, None] * T + masked).reshape(-1)
            tok = nx.gather_rows(nx.reshape(self._p("decoder.mask_token"), (1, Dd)),
                                 np.zeros(mrows.size, dtype=np.intp))
            full = nx.add(full, nx.scatter_rows(tok, mrows, B * T))
        x = nx.add(full, np.tile(self._dec_pos, (B, 1)))
        for i in range(c.decoder_depth):
            pre = f"decoder.block{i}"
            h = nx.layer_norm(x, self._p(pre + ".norm1.w"), self._p(pre + ".norm1.b"))
            x = nx.add(x, self._attention(h, pre + ".attn", B, T, Dd))
            h = nx.layer_norm(x, self._p(pre + ".norm2.w"), self._p(pre + ".norm2.b"))
            x = nx.add(x, self._dense_mlp(h, pre + ".mlp"))
        x = nx.layer_norm(x, self._p("decoder.norm.w"), self._p("decoder.norm.b"))
        return nx.reshape(self._linear(x, "decoder.pred"), (B, T, c.patch_dim))

    def reconstruct(self, images: np.ndarray, visible: np.ndarray, cluster_ids=None) -> np.ndarray:
        tokens = patchify(np.asarray(images), self.config.patch_size)
        with nx.no_grad():
            pred = self.decode(self.encode(tokens, visible, cluster_ids)).data
        return pred

    def features(self, images: np.ndarray, cluster_ids=None, mode: str = "routed",
                 batch_size: int = 256) -> np.ndarray:
        """Mean-pooled encoder output with every patch visible, (B, D)."""
        images = np.asarray(images)
        outs = []
        with nx.no_grad():
            for s in range(0, len(images), batch_size):
                tok = patchify(images[s:s + batch_size], self.config.patch_size)
                cid = None if cluster_ids is None else np.asarray(cluster_ids)[s:s + batch_size]
                enc = self.encode(tok, None, cid, mode=mode)
                outs.append(enc.pooled().data)
        return np.concatenate(outs, axis=0)

    def routing(self, images: np.ndarray, cluster_ids=None, batch_size: int = 256):
        """Noise-free per-layer expert choices: {layer: (B, T, K)} token-level."""
        images = np.asarray(images)
        T = self.config.num_tokens
        out: dict[int, list] = {i: [] for i in self.config.moe_layers}
        with nx.no_grad():
            for s in range(0, len(images), batch_size):
                tok = patchify(images[s:s + batch_size], self.config.patch_size)
                cid = None if cluster_ids is None else np.asarray(cluster_ids)[s:s + batch_size]
                enc = self.encode(tok, None, cid)
                for rec in enc.gates:
                    out[rec.layer].append(rec.token_chosen.reshape(len(tok), T, -1))
        return {k: np.concatenate(v, axis=0) for k, v in out.items()}
