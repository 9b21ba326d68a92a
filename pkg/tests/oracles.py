"""Independent reference computations used by the tests.

Nothing here calls into the autodiff engine; everything is plain loops or
closed forms so a bug in the library cannot hide in both sides.
"""
from __future__ import annotations

import math

import numpy as np


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_direct(row):
    e = [math.exp(v - max(row)) for v in row]
    z = sum(e)
    return np.array([v / z for v in e])


def logsumexp_ce(logits, labels):
    """Mean of logsumexp(row) - row[label], one row at a time."""
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        total += m + math.log(sum(math.exp(v - m) for v in row)) - row[y]
    return total / len(labels)


def layer_norm_direct(row, gain, bias, eps):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return np.array([(v - mu) / math.sqrt(var + eps) * g + b for v, g, b in zip(row, gain, bias)])


def rel_err(a, b, floor=1e-6):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_fd(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def logistic_loss(W, b, x, y):
    """Cross-entropy of a single input ``x`` (d,) under ``logits = x @ W + b``."""
    z = x @ W + b
    m = z.max(axis=-1, keepdims=True)
    return (m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))) - z[..., y]


def grid_max_increase(W, b, x, y, eps, n_radii=1000, n_angles=1000):
    """Max loss increase over a polar grid of the 2-D eps-disk (n_radii * n_angles points)."""
    r = np.linspace(0.0, eps, n_radii)
    th = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    R, TH = np.meshgrid(r, th, indexing="ij")
    pts = np.stack([R * np.cos(TH), R * np.sin(TH)], axis=-1).reshape(-1, 2)
    losses = logistic_loss(W, b, x[None, :] + pts, y)
    return float(losses.max() - logistic_loss(W, b, x, y))


def linear_margin_radius(W, b, x, y):
    """Distance from ``x`` to the decision boundary of a 2-class linear model."""
    w = W[:, y] - W[:, 1 - y]
    return float((x @ w + b[y] - b[1 - y]) / np.linalg.norm(w))


def cardinality_by_hand(K, eps, alpha):
    start = eps / math.sqrt(3.0)
    return min(K, math.ceil((eps - start) / alpha) + 1)
