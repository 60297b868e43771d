"""t-SNE projection and GradCAM heatmaps."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from swinkoa import kernels
from swinkoa import numerics as nx
from swinkoa.numerics import Tensor


# ---------------------------------------------------------------------------
# t-SNE
# ---------------------------------------------------------------------------


@dataclass
class TSNEResult:
    embedding: np.ndarray  # (n, 2)
    kl: float
    entropies: np.ndarray  # achieved conditional entropies, natural log
    betas: np.ndarray


def joint_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetrised input affinities ``(P + P^T) / 2n`` plus the search diagnostics."""
    x = np.asarray(x, dtype=np.float64)
    d = kernels.sq_dists(x, x)
    cond, betas, ent = kernels.perplexity_search(d, np.log(perplexity), tol)
    p = (cond + cond.T) / (2.0 * len(x))
    return np.maximum(p, 1e-12), betas, ent


def tsne_2d(
    x,
    perplexity: float = 30.0,
    seed: int = 0,
    iters: int = 1000,
    learning_rate: float | None = None,
    exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
) -> TSNEResult:
    """Exact O(n^2) t-SNE to two dimensions.

    Gradient descent with momentum (0.5, then 0.8 once exaggeration ends) and
    per-coordinate gains. The learning rate defaults to ``max(n / 12, 50)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if perplexity <= 0:
        raise ValueError("perplexity must be positive")
    if n < 3 * perplexity:
        raise ValueError(f"t-SNE needs n >= 3*perplexity ({3 * perplexity:g}), got n={n}")
    p, betas, ent = joint_affinities(x, perplexity)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, (n, 2))
    lr = learning_rate if learning_rate is not None else max(n / 12.0, 50.0)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    kl = float("nan")
    for it in range(iters):
        early = it < exaggeration_iters
        grad, kl = kernels.tsne_grad(p * exaggeration if early else p, y)
        momentum = 0.5 if early else 0.8
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - lr * gains * grad
        y = y + update
        y -= y.mean(axis=0)
    _, kl = kernels.tsne_grad(p, y)
    return TSNEResult(y, kl, ent, betas)


# ---------------------------------------------------------------------------
# GradCAM
# ---------------------------------------------------------------------------


def raw_cams(model, images, class_index) -> np.ndarray:
    """Stage-4 maps ``(B, h, w)`` after ReLU, before upsampling.

    The stage-4 token grid is detached into a leaf so gradients of the
    selected logit flow only through the final norm, pooling and head.
    Model parameter gradients are left as they were.
    """
    images = np.asarray(images, dtype=nx.DTYPE)
    if images.ndim == 3:
        images = images[None]
    b = len(images)
    cls = np.broadcast_to(np.asarray(class_index, dtype=np.int64), (b,))
    enc = model.encoder
    with nx.no_grad():
        act = enc.stage_outputs(images)[-1].data
    params = model.parameters()
    saved = [p.grad for p in params]
    try:
        grid = Tensor(act, requires_grad=True)
        _, h, w, d = act.shape
        pooled = nx.mean_pool(nx.reshape(enc.norm(grid), (b, h * w, d)))
        logits = model.head(pooled)
        seed = np.zeros(logits.shape, dtype=nx.DTYPE)
        seed[np.arange(b), cls] = 1.0
        nx.backward(logits, seed)
        grads = grid.grad
    finally:
        for p, g in zip(params, saved):
            p.grad = g
    weights = grads.astype(np.float64).mean(axis=(1, 2))  # (B, d)
    return np.maximum(np.einsum("bhwd,bd->bhw", act.astype(np.float64), weights), 0.0)


def gradcam_batch(model, images, class_index) -> np.ndarray:
    """Heatmaps ``(B, H, W)`` in [0, 1] for each image and its class index."""
    n = model.cfg.image_size
    cams = raw_cams(model, images, class_index)
    return np.stack([normalize(kernels.upsample_bilinear(c, n, n)) for c in cams]).astype(np.float32)


def gradcam(model, image, class_index: int) -> np.ndarray:
    return gradcam_batch(model, image, class_index)[0]


def normalize(m: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 1e-12:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def localization(heatmap: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """(share of heat inside ``mask``, share of pixels inside ``mask``)."""
    total = float(heatmap.sum())
    area = float(mask.mean())
    if total <= 0:
        return area, area  # a flat map localises no better than uniform
    return float(heatmap[mask].sum()) / total, area


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def write_pgm(heatmap: np.ndarray, path) -> Path:
    """8-bit binary PGM (P5) of a [0, 1] map."""
    path = Path(path)
    h, w = heatmap.shape
    pix = np.clip(np.rint(np.asarray(heatmap) * 255.0), 0, 255).astype(np.uint8)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(data[m.end():m.end() + w * h], dtype=np.uint8).reshape(h, w)


def write_heatmap(heatmap: np.ndarray, stem) -> tuple[Path, Path]:
    """PGM preview plus a raw little-endian float32 sidecar (row-major)."""
    stem = Path(stem)
    pgm = write_pgm(heatmap, stem.with_suffix(".pgm"))
    raw = stem.with_suffix(".f32")
    raw.write_bytes(np.ascontiguousarray(heatmap, dtype="<f4").tobytes())
    return pgm, raw
