"""Numba vs numpy timings for the hot kernels and one full training step.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel is timed on both routes after one warm-up call (which also
triggers JIT compilation), and both outputs are compared. The end-to-end row
toggles the dispatch flag around a forward/backward pass of the toy model.
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from swinkoa import _jit, kernels
from swinkoa import numerics as nx
from swinkoa.config import TOY
from swinkoa.model import KOANet
from swinkoa.train import multi_head_loss


def _kernel_cases(rng):
    x = rng.normal(size=(4096, 96)).astype(np.float32)
    gamma = rng.normal(size=96).astype(np.float32)
    beta = rng.normal(size=96).astype(np.float32)
    y, xhat, rstd = kernels.layer_norm_fwd_np(x, gamma, beta, 1e-5)
    scores = rng.normal(size=(8192, 16)).astype(np.float32)
    sm = kernels.softmax_fwd_np(scores)
    img = rng.random((64, 64, 3))
    ys, xs = np.meshgrid(np.linspace(0, 63, 64), np.linspace(0, 63, 64), indexing="ij")
    emb = rng.normal(size=(500, 192))
    dist = kernels.sq_dists_np(emb, emb)
    P = rng.random((500, 500))
    P = (P + P.T) / (2 * P.sum())
    Y = rng.normal(size=(500, 2))
    eps = np.float32(1e-5)
    return {
        "layer_norm_fwd": (lambda: kernels._layer_norm_fwd_jit(x, gamma, beta, eps),
                           lambda: kernels.layer_norm_fwd_np(x, gamma, beta, 1e-5)),
        "layer_norm_bwd": (lambda: kernels._layer_norm_bwd_jit(x, xhat, rstd, gamma),
                           lambda: kernels.layer_norm_bwd_np(x, xhat, rstd, gamma)),
        "softmax_fwd": (lambda: kernels._softmax_fwd_jit(scores), lambda: kernels.softmax_fwd_np(scores)),
        "softmax_bwd": (lambda: kernels._softmax_bwd_jit(scores, sm), lambda: kernels.softmax_bwd_np(scores, sm)),
        "bilinear_sample": (lambda: kernels._bilinear_sample_jit(img, ys, xs),
                            lambda: kernels.bilinear_sample_np(img, ys, xs)),
        "perplexity_search": (lambda: kernels._perplexity_search_jit(dist, np.log(30.0), 1e-5, 100),
                              lambda: kernels.perplexity_search_np(dist, np.log(30.0), 1e-5, 100)),
        "tsne_grad": (lambda: kernels._tsne_grad_jit(P, Y), lambda: kernels.tsne_grad_np(P, Y)),
    }


def _rel_diff(a, b) -> float:
    """Largest |a - b| relative to the largest |b|, over every output array."""
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    out = 0.0
    for u, v in zip(a, b):
        u, v = np.asarray(u, np.float64), np.asarray(v, np.float64)
        out = max(out, float(np.max(np.abs(u - v)) / max(np.max(np.abs(v)), 1e-30)))
    return out


def _best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def train_step_case(rng):
    model = KOANet(TOY, 0)
    images = rng.random((16, 64, 64, 3)).astype(np.float32)
    grades = rng.integers(0, 5, 16)

    def step():
        loss = multi_head_loss(model(images), grades)
        nx.backward(loss)
        return loss.item()

    return step


def run(repeat: int = 20, seed: int = 0) -> list[dict]:
    if not _jit.HAS_NUMBA:
        raise SystemExit("numba is unavailable or disabled via SWINKOA_DISABLE_JIT; nothing to compare")
    rng = np.random.default_rng(seed)
    rows = []
    for name, (jit_fn, np_fn) in _kernel_cases(rng).items():
        diff = _rel_diff(jit_fn(), np_fn())  # warm-up, compiles the jit route
        rows.append({"kernel": name, "numba_ms": 1e3 * _best(jit_fn, repeat),
                     "numpy_ms": 1e3 * _best(np_fn, repeat), "max_rel_diff": diff})
    step = train_step_case(rng)
    saved = _jit.USE_JIT
    try:
        timings, losses = {}, {}
        for flag in (True, False):
            _jit.USE_JIT = flag
            losses[flag] = step()
            timings[flag] = 1e3 * _best(step, max(3, repeat // 4))
    finally:
        _jit.USE_JIT = saved
    rows.append({"kernel": "train_step (batch 16)", "numba_ms": timings[True],
                 "numpy_ms": timings[False],
                 "max_rel_diff": abs(losses[True] - losses[False]) / abs(losses[False])})
    return rows


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write the rows as JSON")
    args = p.parse_args(argv)
    rows = run(args.repeat, args.seed)
    print(f"{'kernel':<24}{'numba ms':>11}{'numpy ms':>11}{'speedup':>9}{'max rel diff':>14}")
    for r in rows:
        print(f"{r['kernel']:<24}{r['numba_ms']:>11.3f}{r['numpy_ms']:>11.3f}"
              f"{r['numpy_ms'] / r['numba_ms']:>8.2f}x{r['max_rel_diff']:>14.2e}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
