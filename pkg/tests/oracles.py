"""Independent reference implementations used as test oracles.

Everything here is deliberately written against the straightforward textbook
formulation (explicit loops, numpy float64) and shares no code with the
package implementations it checks.
"""

from __future__ import annotations

import math

import numpy as np


def gaussian_window_reference(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    w = np.zeros((size, size), dtype=np.float64)
    c = (size - 1) / 2.0
    for i in range(size):
        for j in range(size):
            w[i, j] = math.exp(-((i - c) ** 2 + (j - c) ** 2) / (2.0 * sigma**2))
    return w / w.sum()


def ssim_reference(x: np.ndarray, y: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Sliding-window SSIM on a single-channel image, valid windows only."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    assert x.shape == y.shape and x.ndim == 2
    win = gaussian_window_reference()
    size = win.shape[0]
    c1, c2 = k1**2, k2**2
    h, w = x.shape
    values = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            px = x[i:i + size, j:j + size]
            py = y[i:i + size, j:j + size]
            mx = (win * px).sum()
            my = (win * py).sum()
            vx = (win * px * px).sum() - mx * mx
            vy = (win * py * py).sum() - my * my
            vxy = (win * px * py).sum() - mx * my
            values.append(((2 * mx * my + c1) * (2 * vxy + c2))
                          / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(values))


def ssim_reference_multichannel(x: np.ndarray, y: np.ndarray) -> float:
    """Channel-mean of the single-channel reference for (H, W, C) images."""
    if x.ndim == 2:
        return ssim_reference(x, y)
    return float(np.mean([ssim_reference(x[..., c], y[..., c]) for c in range(x.shape[2])]))


def softmax_reference(logits) -> np.ndarray:
    exps = [math.exp(v) for v in logits]
    total = sum(exps)
    return np.array([e / total for e in exps], dtype=np.float64)


def attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                        pe: np.ndarray, head_dim: int) -> np.ndarray:
    """Row-by-row softmax attention with explicit loops; q, k, v are (N, d)."""
    n = q.shape[0]
    out = np.zeros_like(v, dtype=np.float64)
    for i in range(n):
        logits = [(float(q[i] @ k[j]) + float(pe[i, j])) / math.sqrt(head_dim)
                  for j in range(n)]
        weights = softmax_reference(logits)
        for j in range(n):
            out[i] += weights[j] * v[j]
    return out


def layer_norm_reference(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean()
    var = x.var()
    return (x - mu) / math.sqrt(var + eps)


def gelu_reference(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def reverse_step_reference(x: np.ndarray, eps_hat: np.ndarray, z: np.ndarray,
                           alpha: float, alpha_bar: float, sigma: float) -> np.ndarray:
    """Scalar closed form of the reverse update in float64."""
    coef = 0.0 if alpha == 1.0 else (1.0 - alpha) / math.sqrt(1.0 - alpha_bar)
    return (np.asarray(x, np.float64) - coef * np.asarray(eps_hat, np.float64)) \
        / math.sqrt(alpha) + sigma * np.asarray(z, np.float64)
