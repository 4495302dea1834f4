"""Independent reference computations used by the tests.

Nothing in here calls the package's forward/backward code paths.
"""

import math

import numpy as np


def straight_line_forward(params: dict, sizes, x):
    """Layer-by-layer loop with explicit sums, no matrix products."""
    h = [list(map(float, row)) for row in np.atleast_2d(x)]
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        W = params[f"layer{i}.weight"]
        b = params[f"layer{i}.bias"]
        out = []
        for row in h:
            z = []
            for j in range(sizes[i + 1]):
                acc = float(b[j])
                for k in range(sizes[i]):
                    acc += float(W[j, k]) * row[k]
                z.append(acc if i == n_layers - 1 else math.tanh(acc))
            out.append(z)
        h = out
    return np.array(h)


def softmax_row(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def ce_direct(logits, labels):
    total = 0.0
    for row, y in zip(np.atleast_2d(logits), labels):
        total += -math.log(softmax_row(list(row))[int(y)])
    return total / len(labels)


def kl_direct(p_logits, q_logits):
    total = 0.0
    for a, b in zip(np.atleast_2d(p_logits), np.atleast_2d(q_logits)):
        p, q = softmax_row(list(a)), softmax_row(list(b))
        total += sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    return total / len(p_logits)


def central_differences(f, params: dict, keys, eps=1e-5):
    """d f / d params[k] for k in keys via (f(x+eps) - f(x-eps)) / 2 eps, entry by entry."""
    params = {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}
    grads = {}
    for k in keys:
        arr = params[k]
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = f(params)
            arr[idx] = orig - eps
            down = f(params)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads[k] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / (||a|| + ||n||), 0 when both vanish."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
