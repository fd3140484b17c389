"""Pixel encoder-decoder plus a query decoder with masked attention.

The backbone downsamples the fused phase features twice (1x, 1/2x, 1/4x with
widths C, 2C, 4C) and a small feature pyramid brings them back to a
full-resolution per-voxel feature map of width ``d_model``. A set of learnable
queries then alternates masked cross-attention onto one pyramid scale
(coarse to fine, round robin), self-attention and a feed-forward layer. Each
query yields class logits (8 lesion classes + no-object), a mask (dot product
of its descriptor with the per-voxel features) and a unit-norm embedding for
contrastive learning.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from liverdx.errors import ConfigError, PhaseError
from liverdx.fusion import LEAKY_SLOPE, NORM_EPS, ConvBlock, EarlyConcatFusion, PhaseFusion
from liverdx.labels import NUM_CLASSES, PHASES, REQUIRED_PHASES


@dataclass
class ModelConfig:
    grid_size: int = 48
    channels: int = 16
    d_model: int = 64
    d_embed: int = 128
    num_queries: int = 50
    decoder_layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    fusion: str = "ifm"  # "ifm" or "early" (3-phase early concatenation ablation)
    fusion_shared: bool = True
    masked_attention: bool = True
    mask_threshold: float = 0.5
    leaky_slope: float = LEAKY_SLOPE
    norm_eps: float = NORM_EPS
    intensity_center: float = 100.0
    intensity_scale: float = 50.0

    def validate(self):
        if self.grid_size % 4:
            raise ConfigError(f"grid_size {self.grid_size} must be divisible by 4")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.fusion not in ("ifm", "early"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        for name in ("channels", "d_model", "d_embed", "num_queries", "decoder_layers", "heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class BackboneFeatures:
    scales: list  # [(B, C, G, G, G), (B, 2C, G/2, ...), (B, 4C, G/4, ...)]
    pixel: torch.Tensor  # (B, d_model, G, G, G)


@dataclass
class HeadOutput:
    class_logits: torch.Tensor  # (B, Q, 9)
    mask_logits: torch.Tensor  # (B, Q, G, G, G)
    embeddings: torch.Tensor  # (B, Q, d_embed), unit norm

    @property
    def batch_size(self):
        return self.class_logits.shape[0]

    def item(self, b):
        return HeadOutput(self.class_logits[b:b + 1], self.mask_logits[b:b + 1], self.embeddings[b:b + 1])

    def detach(self):
        return HeadOutput(self.class_logits.detach(), self.mask_logits.detach(), self.embeddings.detach())


class Backbone(nn.Module):
    """Two stride-2 stages on top of the fused map and an FPN-style top-down path."""

    def __init__(self, channels, d_model, slope=LEAKY_SLOPE, eps=NORM_EPS):
        super().__init__()
        c = channels
        self.widths = (c, 2 * c, 4 * c)
        self.down1 = nn.Sequential(ConvBlock(c, 2 * c, 2, slope, eps), ConvBlock(2 * c, 2 * c, 1, slope, eps))
        self.down2 = nn.Sequential(ConvBlock(2 * c, 4 * c, 2, slope, eps), ConvBlock(4 * c, 4 * c, 1, slope, eps))
        self.lateral = nn.ModuleList([nn.Conv3d(w, c, 1) for w in self.widths])
        self.smooth = ConvBlock(c, c, 1, slope, eps)
        self.pixel_proj = nn.Conv3d(c, d_model, 1)

    def forward(self, fused):
        if any(s % 4 for s in fused.shape[2:]):
            raise ConfigError(f"spatial size {tuple(fused.shape[2:])} must be divisible by 4")
        s0 = fused
        s1 = self.down1(s0)
        s2 = self.down2(s1)
        top = self.lateral[2](s2)
        top = self.lateral[1](s1) + F.interpolate(top, scale_factor=2, mode="nearest")
        top = self.lateral[0](s0) + F.interpolate(top, scale_factor=2, mode="nearest")
        pixel = self.pixel_proj(self.smooth(top))
        return BackboneFeatures(scales=[s0, s1, s2], pixel=pixel)


def encode_decode(fused, backbone: Backbone) -> BackboneFeatures:
    return backbone(fused)


_POS_CACHE = {}


def sine_position_encoding(shape, dim, dtype=torch.float32):
    """Fixed 3D sinusoidal encoding, (prod(shape), dim); unused tail channels are zero."""
    key = (tuple(shape), dim, dtype)
    if key not in _POS_CACHE:
        per_axis = (dim // 6) * 2
        enc = torch.zeros(*shape, dim, dtype=torch.float64)
        coords = torch.meshgrid(*[torch.arange(n, dtype=torch.float64) / max(n, 1) for n in shape], indexing="ij")
        m = per_axis // 2
        top = max(max(shape) / 2.0, 1.0)
        freqs = math.pi * top ** (torch.arange(m, dtype=torch.float64) / max(m - 1, 1))
        for axis, c in enumerate(coords):
            arg = c[..., None] * freqs
            sl = slice(axis * per_axis, (axis + 1) * per_axis)
            enc[..., sl] = torch.cat([arg.sin(), arg.cos()], dim=-1)
        _POS_CACHE[key] = enc.reshape(-1, dim).to(dtype)
    return _POS_CACHE[key]


def multihead_attention(q, k, v, heads, allowed=None):
    """Scaled dot-product attention.

    ``allowed`` is an optional boolean (B, Q, N) mask; the unmasked code path
    is taken when it is None. Returns the merged output and the post-softmax
    weights (B, heads, Q, N).
    """
    b, nq, d = q.shape
    dh = d // heads
    qh = q.reshape(b, nq, heads, dh).transpose(1, 2)
    kh = k.reshape(b, k.shape[1], heads, dh).transpose(1, 2)
    vh = v.reshape(b, v.shape[1], heads, dh).transpose(1, 2)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    if allowed is not None:
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = (weights @ vh).transpose(1, 2).reshape(b, nq, d)
    return out, weights


class Attention(nn.Module):
    def __init__(self, d_model, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.last_weights = None

    def forward(self, query, key, value, allowed=None):
        out, w = multihead_attention(self.q(query), self.k(key), self.v(value), self.heads, allowed)
        self.last_weights = w.detach()
        return self.out(out)


class DecoderLayer(nn.Module):
    """Masked cross-attention, then self-attention, then feed-forward (post-norm)."""

    def __init__(self, d_model, heads, ffn_dim):
        super().__init__()
        self.cross = Attention(d_model, heads)
        self.self_attn = Attention(d_model, heads)
        self.ffn = nn.Sequential(nn.Linear(d_model, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, d_model))
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, queries, memory, pos, allowed=None):
        queries = self.norm1(queries + self.cross(queries, memory + pos, memory, allowed))
        queries = self.norm2(queries + self.self_attn(queries, queries, queries))
        return self.norm3(queries + self.ffn(queries))


class QueryDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, widths):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.queries = nn.Parameter(torch.randn(cfg.num_queries, d))
        self.memory_proj = nn.ModuleList([nn.Linear(w, d) for w in widths])
        self.level_embed = nn.Parameter(torch.zeros(len(widths), d))
        self.layers = nn.ModuleList([DecoderLayer(d, cfg.heads, cfg.ffn_dim) for _ in range(cfg.decoder_layers)])
        self.norm = nn.LayerNorm(d)
        self.class_head = nn.Linear(d, NUM_CLASSES + 1)
        self.mask_embed = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        self.embed_head = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, cfg.d_embed))

    def scale_for_layer(self, layer):
        n = len(self.memory_proj)
        return n - 1 - (layer % n)

    def attention_mask(self, queries, pixel, scale_shape):
        """Boolean (B, Q, N) mask: voxels whose current mask sigmoid exceeds the threshold.

        Queries whose mask is empty at this scale fall back to attending everywhere.
        """
        with torch.no_grad():
            factor = pixel.shape[2] // scale_shape[0]
            pooled = F.avg_pool3d(pixel, factor) if factor > 1 else pixel
            desc = self.mask_embed(self.norm(queries))
            logits = torch.einsum("bqd,bdn->bqn", desc, pooled.flatten(2))
            allowed = torch.sigmoid(logits) > self.cfg.mask_threshold
            empty = ~allowed.any(dim=-1, keepdim=True)
            return allowed | empty

    def forward(self, features: BackboneFeatures, queries=None) -> HeadOutput:
        pixel = features.pixel
        b = pixel.shape[0]
        q = self.queries if queries is None else queries
        q = q[None].expand(b, -1, -1)
        for i, layer in enumerate(self.layers):
            s = self.scale_for_layer(i)
            feat = features.scales[s]
            shape = tuple(feat.shape[2:])
            memory = self.memory_proj[s](feat.flatten(2).transpose(1, 2)) + self.level_embed[s]
            pos = sine_position_encoding(shape, memory.shape[-1], memory.dtype)[None]
            allowed = self.attention_mask(q, pixel, shape) if self.cfg.masked_attention else None
            q = layer(q, memory, pos, allowed)
        x = self.norm(q)
        class_logits = self.class_head(x)
        desc = self.mask_embed(x)
        mask_logits = torch.einsum("bqd,bdn->bqn", desc, pixel.flatten(2)).reshape(b, q.shape[1], *pixel.shape[2:])
        embeddings = F.normalize(self.embed_head(x), dim=-1)
        return HeadOutput(class_logits, mask_logits, embeddings)


def transformer_decode(features: BackboneFeatures, decoder: QueryDecoder, queries=None) -> HeadOutput:
    return decoder(features, queries)


class LesionSegmenter(nn.Module):
    """Phase fusion -> backbone -> query decoder."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = (cfg or ModelConfig()).validate()
        c = self.cfg
        if c.fusion == "ifm":
            self.fusion = PhaseFusion(c.channels, c.fusion_shared, c.leaky_slope, c.norm_eps)
        else:
            self.fusion = EarlyConcatFusion(c.channels, c.leaky_slope, c.norm_eps)
        self.backbone = Backbone(c.channels, c.d_model, c.leaky_slope, c.norm_eps)
        self.decoder = QueryDecoder(c, self.backbone.widths)

    @property
    def dtype(self):
        return self.decoder.queries.dtype

    def normalize(self, volume):
        x = torch.as_tensor(volume, dtype=self.dtype)
        return (x - self.cfg.intensity_center) / self.cfg.intensity_scale

    def forward(self, volumes) -> HeadOutput:
        """``volumes`` maps phase -> (B, 1, G, G, G) tensor in raw intensity units."""
        vols = {p: self.normalize(v) for p, v in volumes.items()}
        fused = self.fusion(vols)
        return self.decoder(self.backbone(fused))

    def forward_case(self, case) -> HeadOutput:
        return self(case_inputs([case]))


def case_inputs(cases):
    """Stack cases that share one phase set into a phase -> (B, 1, G, G, G) dict."""
    phases = tuple(cases[0].phases_present)
    if any(tuple(c.phases_present) != phases for c in cases):
        raise PhaseError("cases in one forward batch must share their phases")
    if phases not in (REQUIRED_PHASES, PHASES):
        raise PhaseError(f"cases need phases (NC, A, V[, D]), got {phases}")
    return {p: torch.from_numpy(np.stack([c.volumes[p] for c in cases])[:, None]) for p in phases}


def forward(case, model: LesionSegmenter) -> HeadOutput:
    return model.forward_case(case)
