"""Vision-transformer building blocks on top of :mod:`psvit.tensor`.

Token tensors are ``[B, N, dim]``; images are channel-last ``[B, H, W, C]``.
Attention maps travel as ``[B, heads, N, N]`` tensors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .arch import CONV1D_KERNEL, POOL_KERNEL, POOL_PADDING, POOL_STRIDE, Genotype, require_valid
from .tensor import ContractError, ShapeError, Tensor, parameter

LN_EPS = 1e-6


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            yield from _walk(f"{prefix}{key}", val)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict and set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in params:
                continue
            if params[name].shape != tuple(arr.shape):
                raise ShapeError(f"{name}: checkpoint shape {tuple(arr.shape)} != model shape {params[name].shape}")
            params[name].data[...] = arr


def _walk(name, val):
    if isinstance(val, Tensor) and val.requires_grad:
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(f"{name}.{i}", item)
    elif isinstance(val, dict):
        for k, item in val.items():
            yield from _walk(f"{name}.{k}", item)


def _xavier(rng, fan_in, fan_out, shape):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = parameter(_xavier(rng, d_in, d_out, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, LN_EPS)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def scaled_dot_product_attention(q, k, v):
    """softmax(Q Kᵀ / sqrt(d_h)) V over the last two axes; returns (output, scores)."""
    if q.ndim < 2 or q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ContractError(f"attention operands disagree: Q{q.shape} K{k.shape} V{v.shape}")
    d_h = q.shape[-1]
    if d_h == 0:
        raise ContractError("attention head dimension is zero")
    logits = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d_h))
    scores = T.softmax(logits, axis=-1)
    return T.matmul(scores, v), scores


@dataclass(frozen=True)
class EncoderLayerConfig:
    dim: int
    heads: int
    mlp_ratio: int = 4
    share_attention_from_previous: bool = False

    def __post_init__(self):
        if self.heads <= 0 or self.dim % self.heads:
            raise ContractError(f"dim {self.dim} is not divisible by heads {self.heads}")

    @property
    def head_dim(self):
        return self.dim // self.heads


def _split_heads(x, heads):
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    return T.swapaxes(x, -3, -2)  # [..., heads, N, d_h]


def _merge_heads(x):
    *lead, h, n, dh = x.shape
    x = T.swapaxes(x, -3, -2)
    return T.reshape(x, (*lead, n, h * dh))


class MultiHeadAttention(Module):
    """Multi-head self-attention; in sharing mode only V and the output projection exist."""

    def __init__(self, cfg: EncoderLayerConfig, rng):
        self.cfg = cfg
        d = cfg.dim
        if cfg.share_attention_from_previous:
            self.q = self.k = None
        else:
            self.q = Linear(d, d, rng)
            self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.proj = Linear(d, d, rng)

    def __call__(self, x, shared_in=None):
        cfg = self.cfg
        v = _split_heads(self.v(x), cfg.heads)
        if cfg.share_attention_from_previous:
            if shared_in is None:
                raise ContractError("sharing layer called without attention maps from the previous layer")
            if shared_in.shape != v.shape[:-1] + (v.shape[-2],):
                raise ContractError(f"shared maps {shared_in.shape} do not fit {v.shape[:-1]} tokens")
            maps = shared_in
            out = T.matmul(maps, v)
        else:
            q = _split_heads(self.q(x), cfg.heads)
            k = _split_heads(self.k(x), cfg.heads)
            out, maps = scaled_dot_product_attention(q, k, v)
        return self.proj(_merge_heads(out)), maps


def multi_head_attention(x, attn: MultiHeadAttention, shared_in=None):
    return attn(x, shared_in)


class EncoderLayer(Module):
    """Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.)) with a GELU hidden layer."""

    def __init__(self, cfg: EncoderLayerConfig, rng):
        self.cfg = cfg
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.fc1 = Linear(cfg.dim, cfg.mlp_ratio * cfg.dim, rng)
        self.fc2 = Linear(cfg.mlp_ratio * cfg.dim, cfg.dim, rng)

    def __call__(self, x, shared_in=None):
        a, maps = self.attn(self.norm1(x), shared_in)
        x = T.add(x, a)
        h = self.fc2(T.gelu(self.fc1(self.norm2(x))))
        return T.add(x, h), maps


def encoder_layer(x, layer: EncoderLayer, shared_in=None):
    return layer(x, shared_in)


# ---------------------------------------------------------------------------
# token pooling
# ---------------------------------------------------------------------------


def pooled_length_1d(n):
    return T.window_out_len(n, POOL_KERNEL, POOL_STRIDE, POOL_PADDING)


class TokenPool1D(Module):
    """conv1d over the token axis (width change) then stride-2 maxpool (token reduction).

    A CLS token is pooled as an ordinary sequence position. ``tokens_out`` sizes
    the freshly learned positional embedding of the next stage.
    """

    def __init__(self, dim_in, dim_out, tokens_out, rng):
        if dim_out < dim_in:
            raise ContractError(f"token pooling must not shrink width ({dim_in} -> {dim_out})")
        self.weight = parameter(_xavier(rng, CONV1D_KERNEL * dim_in, dim_out, (CONV1D_KERNEL, dim_in, dim_out)))
        self.bias = parameter(np.zeros(dim_out))
        self.pos = parameter(rng.normal(0.0, 0.02, size=(tokens_out, dim_out)))

    def pool(self, x):
        if x.shape[-2] < 2:
            raise ShapeError(f"token pooling needs at least 2 tokens, got {x.shape[-2]}")
        y = T.conv1d(x, self.weight, self.bias, CONV1D_KERNEL, 1, CONV1D_KERNEL // 2)
        return T.maxpool1d(y, POOL_KERNEL, POOL_STRIDE, POOL_PADDING)

    def __call__(self, x):
        return T.add(self.pool(x), self.pos)


def token_pool_1d(x, pool: TokenPool1D):
    return pool(x)


class TokenPool2D(Module):
    """Stride-2 3x3 convolution on the token grid; halves each spatial side."""

    def __init__(self, dim_in, dim_out, tokens_out, rng):
        if dim_out < dim_in:
            raise ContractError(f"token pooling must not shrink width ({dim_in} -> {dim_out})")
        self.weight = parameter(_xavier(rng, POOL_KERNEL**2 * dim_in, dim_out, (POOL_KERNEL, POOL_KERNEL, dim_in, dim_out)))
        self.bias = parameter(np.zeros(dim_out))
        self.pos = parameter(rng.normal(0.0, 0.02, size=(tokens_out, dim_out)))

    def pool_grid(self, x):
        """x[..., H, W, C] -> [..., H/2, W/2, C']."""
        h, w = x.shape[-3], x.shape[-2]
        if h % 2 or w % 2:
            raise ShapeError(f"2D token pooling needs even H and W, got {h}x{w}")
        return T.conv2d(x, self.weight, self.bias, POOL_KERNEL, POOL_STRIDE, POOL_PADDING)

    def __call__(self, x):
        *lead, n, d = x.shape
        side = math.isqrt(n)
        if side * side != n:
            raise ShapeError(f"2D pooling needs a square token grid, got {n} tokens")
        y = self.pool_grid(T.reshape(x, (*lead, side, side, d)))
        *_, ho, wo, dout = y.shape
        return T.add(T.reshape(y, (*lead, ho * wo, dout)), self.pos)


def token_pool_2d(x, pool: TokenPool2D):
    """x[..., H, W, C] -> pooled grid (no positional term)."""
    return pool.pool_grid(x)


# ---------------------------------------------------------------------------
# embedding and head
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchEmbedConfig:
    image_size: int
    patch_size: int
    in_channels: int
    embed_dim: int
    use_cls_token: bool = True

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ShapeError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")

    @property
    def num_tokens(self):
        return (self.image_size // self.patch_size) ** 2 + (1 if self.use_cls_token else 0)


class PatchEmbed(Module):
    """Non-overlapping patches -> linear projection, optional CLS, learned positions."""

    def __init__(self, cfg: PatchEmbedConfig, rng):
        self.cfg = cfg
        fan_in = cfg.patch_size**2 * cfg.in_channels
        self.proj = Linear(fan_in, cfg.embed_dim, rng)
        self.cls = parameter(rng.normal(0.0, 0.02, size=cfg.embed_dim)) if cfg.use_cls_token else None
        self.pos = parameter(rng.normal(0.0, 0.02, size=(cfg.num_tokens, cfg.embed_dim)))

    def __call__(self, images):
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
            raise ShapeError(
                f"expected images [B, {cfg.image_size}, {cfg.image_size}, {cfg.in_channels}], got {images.shape}"
            )
        b = images.shape[0]
        g, p, c = cfg.image_size // cfg.patch_size, cfg.patch_size, cfg.in_channels
        x = T.reshape(images, (b, g, p, g, p, c))
        x = T.swapaxes(x, 2, 3)
        x = T.reshape(x, (b, g * g, p * p * c))
        x = self.proj(x)
        if self.cls is not None:
            cls = T.add(Tensor(np.zeros((b, 1, cfg.embed_dim))), self.cls)
            x = T.concat([cls, x], axis=1)
        return T.add(x, self.pos)


def patch_embed(images, embed: PatchEmbed):
    return embed(images)


def pool_features(features, mode, has_cls):
    """Reduce ``[B, N, d]`` to ``[B, d]`` by CLS selection or global average pooling."""
    if mode == "cls_token":
        if not has_cls:
            raise ContractError("cls_token readout requested but the sequence has no CLS token")
        return features[:, 0]
    if mode == "gap":
        if has_cls:
            raise ContractError("gap readout expects spatial tokens only; drop the CLS token first")
        return T.mean(features, axes=-2)
    raise ContractError(f"unknown readout mode {mode!r}")


class ClassifierHead(Module):
    def __init__(self, dim, num_classes, mode, rng):
        self.mode = mode
        self.norm = LayerNorm(dim)
        self.fc = Linear(dim, num_classes, rng)

    def __call__(self, features, has_cls):
        return self.fc(self.norm(pool_features(features, self.mode, has_cls)))


def classify(features, head: ClassifierHead, has_cls):
    return head(features, has_cls)


# ---------------------------------------------------------------------------
# whole model
# ---------------------------------------------------------------------------


def readout_mode(g: Genotype):
    return "cls_token" if g.pooling_mode == "1D" else "gap"


class StageBackbone(Module):
    """Embedding, pools and head shared by standalone models and the supernet."""

    def __init__(self, g: Genotype, rng):
        require_valid(g)
        self.genotype = g
        s0 = g.stages[0]
        p = g.patch
        self.embed = PatchEmbed(PatchEmbedConfig(p.image_size, p.patch_size, p.channels, s0.dim, p.cls_token), rng)
        pool_cls = TokenPool1D if g.pooling_mode == "1D" else TokenPool2D
        self.pools = [
            pool_cls(a.dim, b.dim, b.tokens, rng) for a, b in zip(g.stages[:-1], g.stages[1:])
        ]
        self.head = ClassifierHead(g.stages[-1].dim, g.num_classes, readout_mode(g), rng)


def run_stage(x, layers, flags, maps_out=None):
    """Apply one stage's realised layers; a flagged layer reuses its predecessor's maps."""
    maps = None
    for layer, shared in zip(layers, flags):
        x, maps = layer(x, maps if shared else None)
        if maps_out is not None:
            maps_out.append(maps)
    return x


class ViT(StageBackbone):
    """Standalone model realised from a genotype."""

    def __init__(self, g: Genotype, rng):
        super().__init__(g, rng)
        self.stages = []
        for s in g.stages:
            cfgs = [EncoderLayerConfig(s.dim, s.heads, g.mlp_ratio, f) for f in s.layer_flags()]
            self.stages.append([EncoderLayer(c, rng) for c in cfgs])

    def stage_flags(self):
        return [s.layer_flags() for s in self.genotype.stages]

    def __call__(self, images, maps_out=None):
        """Logits ``[B, classes]``; per-stage attention maps are appended to ``maps_out``."""
        x = self.embed(images)
        for si, (layers, flags) in enumerate(zip(self.stages, self.stage_flags())):
            if si > 0:
                x = self.pools[si - 1](x)
            stage_maps = [] if maps_out is not None else None
            x = run_stage(x, layers, flags, stage_maps)
            if maps_out is not None:
                maps_out.append(stage_maps)
        return self.head(x, self.genotype.patch.cls_token)


# ---------------------------------------------------------------------------
# attention-map diagnostics
# ---------------------------------------------------------------------------


class UndefinedCorrelation(ArithmeticError):
    """Pearson correlation of a constant map is undefined."""


def _as_head_major(maps):
    arr = maps.data if isinstance(maps, Tensor) else np.asarray(maps, dtype=np.float64)
    if arr.ndim < 3 or arr.shape[-1] != arr.shape[-2]:
        raise ShapeError(f"attention maps must be [..., heads, N, N], got {arr.shape}")
    heads = arr.shape[-3]
    return np.moveaxis(arr, -3, 0).reshape(heads, -1)


def attention_correlation(a, b):
    """Per-head Pearson correlation of two attention-map stacks ``[..., heads, N, N]``."""
    fa, fb = _as_head_major(a), _as_head_major(b)
    if fa.shape != fb.shape:
        raise ShapeError(f"attention maps differ in shape: {np.shape(a)} vs {np.shape(b)}")
    ca = fa - fa.mean(axis=1, keepdims=True)
    cb = fb - fb.mean(axis=1, keepdims=True)
    na = np.sqrt((ca * ca).sum(axis=1))
    nb = np.sqrt((cb * cb).sum(axis=1))
    if np.any(na == 0) or np.any(nb == 0):
        raise UndefinedCorrelation("a head has a constant attention map (zero variance)")
    r = (ca * cb).sum(axis=1) / (na * nb)
    return np.clip(r, -1.0, 1.0)


_MAPS_MAGIC = b"PSAM"
_MAPS_VERSION = 1


def save_attention_maps(path, maps):
    """Write ``[heads, N, N]`` maps: magic, version, heads, N (uint32 LE), then float64 LE row-major."""
    arr = np.asarray(maps.data if isinstance(maps, Tensor) else maps, dtype="<f8")
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ShapeError(f"expected [heads, N, N] maps, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(_MAPS_MAGIC + struct.pack("<III", _MAPS_VERSION, arr.shape[0], arr.shape[1]))
        f.write(np.ascontiguousarray(arr).tobytes())


def load_attention_maps(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAPS_MAGIC:
        raise ValueError(f"{path}: not an attention-map dump")
    version, heads, n = struct.unpack_from("<III", blob, 4)
    if version != _MAPS_VERSION:
        raise ValueError(f"{path}: unsupported map dump version {version}")
    data = np.frombuffer(blob, dtype="<f8", offset=16)
    if data.size != heads * n * n:
        raise ValueError(f"{path}: payload holds {data.size} values, header says {heads}x{n}x{n}")
    return data.reshape(heads, n, n).astype(np.float64)
