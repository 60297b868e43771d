"""Hot numeric kernels with a numba path and a pure-numpy path.

Loop-shaped kernels dispatch on :data:`swinkoa._jit.USE_JIT`; their numpy
twins stay importable as ``*_np`` so tests and the benchmark can compare the
two routes directly.
"""
import math

import numpy as np

from swinkoa import _jit
from swinkoa._jit import njit


# ---------------------------------------------------------------------------
# layer norm over the last axis (rows of a 2-D view)
# ---------------------------------------------------------------------------


def layer_norm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd_np(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxhat = g * gamma
    d = xhat.shape[1]
    m1 = dxhat.sum(axis=1, keepdims=True) / d
    m2 = (dxhat * xhat).sum(axis=1, keepdims=True) / d
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


@njit(cache=True, fastmath=False)
def _layer_norm_fwd_jit(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True, fastmath=False)
def _layer_norm_bwd_jit(g, xhat, rstd, gamma):
    n, d = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(d, dtype=np.float64)
    dbeta = np.zeros(d, dtype=np.float64)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dh = g[i, j] * gamma[j]
            m1 += dh
            m2 += dh * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        m1 /= d
        m2 /= d
        r = rstd[i]
        for j in range(d):
            dx[i, j] = (g[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * r
    return dx, dgamma.astype(g.dtype), dbeta.astype(g.dtype)


def layer_norm_fwd(x, gamma, beta, eps):
    if _jit.USE_JIT:
        return _layer_norm_fwd_jit(x, gamma, beta, x.dtype.type(eps))
    return layer_norm_fwd_np(x, gamma, beta, eps)


def layer_norm_bwd(g, xhat, rstd, gamma):
    if _jit.USE_JIT:
        return _layer_norm_bwd_jit(np.ascontiguousarray(g), xhat, rstd, gamma)
    return layer_norm_bwd_np(g, xhat, rstd, gamma)


# ---------------------------------------------------------------------------
# GELU, tanh form. numpy's vectorised tanh beats a scalar-loop kernel here, so
# both routes share this implementation.
# ---------------------------------------------------------------------------

_GELU_C = np.float32(math.sqrt(2.0 / math.pi))
_GELU_A = np.float32(0.044715)


def gelu_fwd(x):
    """Returns ``(y, t)`` where ``t`` is the tanh term reused by the backward pass."""
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(g, x, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


# ---------------------------------------------------------------------------
# softmax over the last axis of a 2-D view
# ---------------------------------------------------------------------------


def softmax_fwd_np(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


@njit(cache=True)
def _softmax_fwd_jit(x):
    n, d = x.shape
    y = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            e = math.exp(x[i, j] - m)
            y[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(d):
            y[i, j] *= inv
    return y


@njit(cache=True)
def _softmax_bwd_jit(g, y):
    n, d = g.shape
    dx = np.empty_like(g)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += g[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (g[i, j] - s)
    return dx


def softmax_fwd(x):
    if _jit.USE_JIT:
        return _softmax_fwd_jit(x)
    return softmax_fwd_np(x)


def softmax_bwd(g, y):
    if _jit.USE_JIT:
        return _softmax_bwd_jit(np.ascontiguousarray(g), y)
    return softmax_bwd_np(g, y)


# ---------------------------------------------------------------------------
# bilinear sampling (augmentation warps, GradCAM upsampling)
# ---------------------------------------------------------------------------


def bilinear_sample_np(img, ys, xs):
    """Sample ``img`` (H, W, C) at float coordinates; outside pixels read as 0."""
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    out = np.zeros(ys.shape + img.shape[2:], dtype=np.float64)
    for dy, fy in ((0, 1.0 - wy), (1, wy)):
        for dx, fx in ((0, 1.0 - wx), (1, wx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.zeros_like(out)
            vals[ok] = img[yy[ok], xx[ok]]
            out += fy * fx * vals
    return out.astype(img.dtype)


@njit(cache=True)
def _bilinear_sample_jit(img, ys, xs):
    h, w, c = img.shape
    oh, ow = ys.shape
    out = np.zeros((oh, ow, c), dtype=img.dtype)
    for i in range(oh):
        for j in range(ow):
            y = ys[i, j]
            x = xs[i, j]
            y0 = int(math.floor(y))
            x0 = int(math.floor(x))
            wy = y - y0
            wx = x - x0
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= h:
                    continue
                fy = wy if dy == 1 else 1.0 - wy
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= w:
                        continue
                    fx = wx if dx == 1 else 1.0 - wx
                    f = fy * fx
                    if f == 0.0:
                        continue
                    for k in range(c):
                        out[i, j, k] += f * img[yy, xx, k]
    return out


def bilinear_sample(img, ys, xs):
    if _jit.USE_JIT:
        return _bilinear_sample_jit(np.ascontiguousarray(img), ys.astype(np.float64), xs.astype(np.float64))
    return bilinear_sample_np(img, ys, xs)


def upsample_bilinear(grid, out_h, out_w):
    """Resize a 2-D map with half-pixel centres and edge clamping.

    Matches the usual ``align_corners=False`` convention of deep-learning
    frameworks.
    """
    h, w = grid.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(grid[:, :, None].astype(np.float64), yy, xx)[:, :, 0]


# ---------------------------------------------------------------------------
# pairwise squared distances / t-SNE
# ---------------------------------------------------------------------------


def sq_dists_np(x, y):
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def sq_dists(x, y):
    """Pairwise squared distances in float64. The BLAS form beats a numba loop
    by an order of magnitude, so both routes use it."""
    return sq_dists_np(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))


def _row_entropy_np(d_row, beta):
    p = np.exp(-(d_row - d_row.min()) * beta)
    s = p.sum()
    p /= s
    h = beta * (p * (d_row - d_row.min())).sum() + np.log(s)
    return h, p


def perplexity_search_np(dist, target_entropy, tol=1e-5, max_iter=100):
    """Binary-search Gaussian precisions so each row hits ``target_entropy``.

    ``dist`` holds squared distances; the diagonal is ignored. Returns the
    conditional affinity matrix, the precisions and the achieved entropies
    (natural log).
    """
    n = dist.shape[0]
    P = np.zeros((n, n))
    betas = np.ones(n)
    entropies = np.zeros(n)
    for i in range(n):
        row = np.concatenate([dist[i, :i], dist[i, i + 1:]])
        lo, hi = 0.0, np.inf
        beta = 1.0
        h, p = _row_entropy_np(row, beta)
        for _ in range(max_iter):
            diff = h - target_entropy
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            h, p = _row_entropy_np(row, beta)
        P[i, :i] = p[:i]
        P[i, i + 1:] = p[i:]
        betas[i] = beta
        entropies[i] = h
    return P, betas, entropies


@njit(cache=True)
def _perplexity_search_jit(dist, target_entropy, tol, max_iter):
    n = dist.shape[0]
    P = np.zeros((n, n))
    betas = np.ones(n)
    entropies = np.zeros(n)
    for i in range(n):
        dmin = np.inf
        for j in range(n):
            if j != i and dist[i, j] < dmin:
                dmin = dist[i, j]
        lo = 0.0
        hi = np.inf
        beta = 1.0
        h = 0.0
        for it in range(max_iter + 1):
            s = 0.0
            sd = 0.0
            for j in range(n):
                if j == i:
                    P[i, j] = 0.0
                    continue
                e = math.exp(-(dist[i, j] - dmin) * beta)
                P[i, j] = e
                s += e
                sd += e * (dist[i, j] - dmin)
            h = beta * sd / s + math.log(s)
            for j in range(n):
                P[i, j] /= s
            diff = h - target_entropy
            if abs(diff) < tol or it == max_iter:
                break
            if diff > 0:
                lo = beta
                if hi == np.inf:
                    beta = beta * 2.0
                else:
                    beta = 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        betas[i] = beta
        entropies[i] = h
    return P, betas, entropies


def perplexity_search(dist, target_entropy, tol=1e-5, max_iter=100):
    if _jit.USE_JIT:
        return _perplexity_search_jit(np.ascontiguousarray(dist, dtype=np.float64), float(target_entropy), tol, max_iter)
    return perplexity_search_np(dist, target_entropy, tol, max_iter)


def tsne_grad_np(P, Y):
    """KL gradient for Student-t output affinities. Returns (grad, kl)."""
    sq = sq_dists_np(Y, Y)
    num = 1.0 / (1.0 + sq)
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-12)
    W = (P - Q) * num
    grad = 4.0 * (W.sum(1)[:, None] * Y - W @ Y)
    terms = P * np.log(np.maximum(P, 1e-12) / Q)
    np.fill_diagonal(terms, 0.0)  # self-pairs are not part of the divergence
    return grad, float(terms.sum())


@njit(cache=True)
def _tsne_grad_jit(P, Y):
    n, k = Y.shape
    num = np.zeros((n, n))
    z = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for c in range(k):
                t = Y[i, c] - Y[j, c]
                s += t * t
            v = 1.0 / (1.0 + s)
            num[i, j] = v
            num[j, i] = v
            z += 2.0 * v
    grad = np.zeros((n, k))
    kl = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            q = max(num[i, j] / z, 1e-12)
            p = P[i, j]
            w = (p - q) * num[i, j]
            for c in range(k):
                grad[i, c] += 4.0 * w * (Y[i, c] - Y[j, c])
            kl += p * math.log(max(p, 1e-12) / q)
    return grad, kl


def tsne_grad(P, Y):
    if _jit.USE_JIT:
        return _tsne_grad_jit(P, Y)
    return tsne_grad_np(P, Y)
