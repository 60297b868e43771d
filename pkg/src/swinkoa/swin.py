"""Hierarchical shifted-window transformer encoder.

Token grids travel as ``(B, h, w, d)`` tensors. Windowed attention flattens
them to ``(B * num_windows, M*M, d)`` and back.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from swinkoa import numerics as nx
from swinkoa.config import ConfigError, ModelConfig
from swinkoa.nn import MLP, LayerNorm, Linear, Module, trunc_normal
from swinkoa.numerics import DimensionError, Parameter, Tensor

MASK_VALUE = -1e9


@dataclass
class TokenGrid:
    """A batch of token grids, ``tensor`` shaped ``(B, h, w, d)``."""

    tensor: Tensor

    @property
    def h(self) -> int:
        return self.tensor.shape[1]

    @property
    def w(self) -> int:
        return self.tensor.shape[2]

    @property
    def d(self) -> int:
        return self.tensor.shape[3]

    def tokens(self) -> Tensor:
        """Flattened ``(B, h*w, d)`` view."""
        b = self.tensor.shape[0]
        return self.tensor.reshape(b, self.h * self.w, self.d)


# ---------------------------------------------------------------------------
# rearrangements
# ---------------------------------------------------------------------------


def patch_partition(images, patch_size: int = 4):
    """Cut ``(B, H, W, C)`` images into ``(B, H/p, W/p, p*p*C)`` patch tokens.

    Token ``(i, j)`` holds rows ``p*i .. p*i+p-1`` and columns ``p*j .. p*j+p-1``
    flattened in (row, column, channel) order. Accepts a single ``(H, W, C)``
    image too. Works on numpy arrays and on tensors.
    """
    single = np.ndim(images.data if isinstance(images, Tensor) else images) == 3
    x = images if isinstance(images, Tensor) else np.asarray(images)
    if single:
        x = x.reshape((1,) + tuple(x.shape))
    b, H, W, C = x.shape
    p = patch_size
    if H % p or W % p:
        raise ConfigError([f"image {H}x{W} not divisible by patch size {p}"])
    shape6 = (b, H // p, p, W // p, p, C)
    perm = (0, 1, 3, 2, 4, 5)
    out_shape = (b, H // p, W // p, p * p * C)
    out = x.reshape(shape6).transpose(perm).reshape(out_shape)
    return out[0] if single else out


def patch_unpartition(tokens: np.ndarray, patch_size: int = 4, channels: int = 3) -> np.ndarray:
    """Inverse of :func:`patch_partition` for numpy arrays."""
    single = tokens.ndim == 3
    t = tokens[None] if single else tokens
    b, h, w, _ = t.shape
    p = patch_size
    img = t.reshape(b, h, w, p, p, channels).transpose(0, 1, 3, 2, 4, 5).reshape(b, h * p, w * p, channels)
    return img[0] if single else img


def window_partition(x: Tensor, m: int) -> Tensor:
    """``(B, h, w, d)`` -> ``(B * (h/m) * (w/m), m*m, d)``, windows in row-major order."""
    b, h, w, d = x.shape
    if h % m or w % m:
        raise DimensionError(f"grid {h}x{w} not divisible by window {m}")
    x = nx.reshape(x, (b, h // m, m, w // m, m, d))
    x = nx.transpose(x, (0, 1, 3, 2, 4, 5))
    return nx.reshape(x, (b * (h // m) * (w // m), m * m, d))


def window_reverse(windows: Tensor, m: int, h: int, w: int) -> Tensor:
    d = windows.shape[-1]
    b = windows.shape[0] // ((h // m) * (w // m))
    x = nx.reshape(windows, (b, h // m, w // m, m, m, d))
    x = nx.transpose(x, (0, 1, 3, 2, 4, 5))
    return nx.reshape(x, (b, h, w, d))


def cyclic_shift(x: Tensor, s: int) -> Tensor:
    """Toroidal roll of a ``(B, h, w, d)`` grid by ``(-s, -s)``."""
    return nx.roll(x, (-s, -s), (1, 2))


def reverse_cyclic_shift(x: Tensor, s: int) -> Tensor:
    return nx.roll(x, (s, s), (1, 2))


def shift_size(window: int) -> int:
    return window // 2


# ---------------------------------------------------------------------------
# masks and relative positions
# ---------------------------------------------------------------------------


def shifted_region_ids(h: int, w: int, m: int, s: int) -> np.ndarray:
    """Region label of every token after the cyclic shift, grouped per window.

    Returns ``(num_windows, m*m)``. Tokens that were not spatial neighbours
    before the roll carry different labels.
    """
    img = np.zeros((h, w), dtype=np.int64)
    cuts = (slice(0, -m), slice(-m, -s), slice(-s, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            img[hs, ws] = label
            label += 1
    win = img.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    return win


def attention_mask(h: int, w: int, m: int, s: int) -> np.ndarray:
    """Additive ``(num_windows, m*m, m*m)`` mask: 0 within a region, -1e9 across."""
    ids = shifted_region_ids(h, w, m, s)
    diff = ids[:, :, None] != ids[:, None, :]
    return np.where(diff, MASK_VALUE, 0.0).astype(nx.DTYPE)


def relative_position_index(m: int) -> np.ndarray:
    """``(m*m, m*m)`` index into a ``(2m-1)^2`` bias table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (m - 1)
    return rel[:, :, 0] * (2 * m - 1) + rel[:, :, 1]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class WindowAttention(Module):
    """Multi-head self-attention restricted to the tokens of each window."""

    def __init__(self, dim: int, num_heads: int, window: int, rng: np.random.Generator, rel_bias: bool = True):
        if dim % num_heads:
            raise ConfigError([f"dim {dim} not divisible by {num_heads} heads"])
        self.dim = dim
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        if rel_bias:
            self.relative_position_bias_table = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, num_heads)))
            self._rel_index = relative_position_index(window)
        else:
            self.relative_position_bias_table = None
        self.probe = False
        self.last_attn: np.ndarray | None = None

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        bn, n, d = x.shape
        h = self.num_heads
        qkv = nx.reshape(self.qkv(x), (bn, n, 3, h, d // h))
        qkv = nx.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = nx.matmul(q * self.scale, nx.transpose(k, (0, 1, 3, 2)))
        if self.relative_position_bias_table is not None:
            bias = nx.take_rows(self.relative_position_bias_table, self._rel_index.reshape(-1))
            bias = nx.transpose(nx.reshape(bias, (n, n, h)), (2, 0, 1))
            attn = attn + bias
        if mask is not None:
            nw = mask.shape[0]
            attn = nx.reshape(attn, (bn // nw, nw, h, n, n)) + mask[None, :, None]
            attn = nx.reshape(attn, (bn, h, n, n))
        attn = nx.softmax(attn, axis=-1)
        if self.probe:
            self.last_attn = attn.data.copy()
        out = nx.matmul(attn, v)
        out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (bn, n, d))
        return self.proj(out)


class SwinBlock(Module):
    """Pre-norm transformer block over (optionally shifted) windows."""

    def __init__(self, dim, num_heads, resolution, window, shift, mlp_ratio, rng, rel_bias=True):
        self.dim = dim
        self.resolution = resolution
        self.window = window
        self.shift = shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window, rng, rel_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP([dim, mlp_ratio * dim, dim], rng, activation=nx.gelu)
        self.mask = attention_mask(resolution, resolution, window, shift) if shift else None

    @property
    def kind(self) -> str:
        return "SW-MSA" if self.shift else "W-MSA"

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, d = x.shape
        y = self.norm1(x)
        if self.shift:
            y = cyclic_shift(y, self.shift)
        y = window_partition(y, self.window)
        y = self.attn(y, self.mask)
        y = window_reverse(y, self.window, h, w)
        if self.shift:
            y = reverse_cyclic_shift(y, self.shift)
        x = x + y
        return x + self.mlp(self.norm2(x))


class PatchMerging(Module):
    """Concatenate each 2x2 neighbourhood (TL, TR, BL, BR), normalise, project 4d -> 2d."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    @staticmethod
    def gather(x: Tensor) -> Tensor:
        b, h, w, d = x.shape
        if h % 2 or w % 2:
            raise ConfigError([f"patch merging needs even grid, got {h}x{w}"])
        x = nx.reshape(x, (b, h // 2, 2, w // 2, 2, d))
        x = nx.transpose(x, (0, 1, 3, 2, 4, 5))
        return nx.reshape(x, (b, h // 2, w // 2, 4 * d))

    def __call__(self, x: Tensor) -> Tensor:
        return self.reduction(self.norm(self.gather(x)))


class Stage(Module):
    def __init__(self, cfg: ModelConfig, s: int, rng: np.random.Generator):
        dim = cfg.stage_dim(s)
        res = cfg.stage_resolution(s)
        window, shift = cfg.stage_window(s)
        self.downsample = PatchMerging(cfg.stage_dim(s - 1), rng) if s > 0 else None
        self.blocks = [
            SwinBlock(
                dim,
                cfg.stage_heads[s],
                res,
                window,
                shift if i % 2 else 0,
                cfg.mlp_ratio,
                rng,
                cfg.use_relative_position_bias,
            )
            for i in range(cfg.stage_depths[s])
        ]

    def __call__(self, x: Tensor) -> Tensor:
        if self.downsample is not None:
            x = self.downsample(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class SwinEncoder(Module):
    """Image batch ``(B, H, W, 3)`` -> pooled feature vectors ``(B, 8C)``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.check()
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.base_channels, rng)
        self.patch_norm = LayerNorm(cfg.base_channels)
        self.stages = [Stage(cfg, s, rng) for s in range(4)]
        self.norm = LayerNorm(cfg.feature_dim)

    def _check_input(self, images) -> np.ndarray:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        n = self.cfg.image_size
        if arr.ndim != 4 or arr.shape[1:] != (n, n, 3):
            raise DimensionError(f"expected images of shape (B, {n}, {n}, 3), got {arr.shape}")
        return arr

    def stage_outputs(self, images) -> list[Tensor]:
        arr = self._check_input(images)
        arr = (arr - np.float32(self.cfg.pixel_mean)) / np.float32(self.cfg.pixel_std)
        x = Tensor(patch_partition(arr, self.cfg.patch_size))
        x = self.patch_norm(self.patch_embed(x))
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs

    def features(self, images) -> tuple[TokenGrid, Tensor]:
        """Final normed stage-4 grid and its token mean."""
        x = self.stage_outputs(images)[-1]
        x = self.norm(x)
        b, h, w, d = x.shape
        pooled = nx.mean_pool(nx.reshape(x, (b, h * w, d)))
        return TokenGrid(x), pooled

    def __call__(self, images) -> Tensor:
        return self.features(images)[1]


def linear_embed(tokens: Tensor, layer: Linear) -> Tensor:
    """Project patch tokens to the embedding width with a single affine map."""
    return layer(nx.as_tensor(tokens))


def global_attention_reference(x: np.ndarray, attn: WindowAttention) -> np.ndarray:
    """Plain multi-head self-attention over all tokens of each row of ``x``.

    Written with explicit per-head loops in float64 so it shares nothing with
    the windowed path except the weights.
    """
    x = np.asarray(x, dtype=np.float64)
    bsz, n, d = x.shape
    h = attn.num_heads
    hd = d // h
    wqkv = attn.qkv.weight.data.astype(np.float64)
    bqkv = attn.qkv.bias.data.astype(np.float64)
    wp = attn.proj.weight.data.astype(np.float64)
    bp = attn.proj.bias.data.astype(np.float64)
    if attn.relative_position_bias_table is not None:
        table = attn.relative_position_bias_table.data.astype(np.float64)
        side = int(round(np.sqrt(n)))
        idx = relative_position_index(side)
    out = np.zeros_like(x)
    for bi in range(bsz):
        qkv = x[bi] @ wqkv + bqkv
        heads = []
        for hi in range(h):
            q = qkv[:, hi * hd:(hi + 1) * hd]
            k = qkv[:, d + hi * hd:d + (hi + 1) * hd]
            v = qkv[:, 2 * d + hi * hd:2 * d + (hi + 1) * hd]
            logits = (q @ k.T) / np.sqrt(hd)
            if attn.relative_position_bias_table is not None:
                logits = logits + table[idx, hi]
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            heads.append(p @ v)
        out[bi] = np.concatenate(heads, axis=1) @ wp + bp
    return out
