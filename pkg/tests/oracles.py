"""Independent reference implementations used only by tests."""
import math

import numpy as np


def brute_greedy(a_hat, wh, ww, K):
    """Enumerate every window each round with exact (fsum) sums; row-major ties."""
    grid = np.array(a_hat, dtype=np.float64)
    h, w = grid.shape
    picks = []
    for _ in range(K):
        best, best_pos = None, None
        for i in range(h - wh + 1):
            for j in range(w - ww + 1):
                s = math.fsum(grid[i:i + wh, j:j + ww].ravel().tolist())
                if best is None or s > best:
                    best, best_pos = s, (i, j)
        picks.append((best_pos, best))
        i, j = best_pos
        grid[i:i + wh, j:j + ww] = 0.0
    return picks


def minmax_loop(g):
    g = np.asarray(g, dtype=np.float64)
    lo, hi = min(g.ravel()), max(g.ravel())
    out = np.zeros_like(g)
    if hi > lo:
        for ix in np.ndindex(g.shape):
            out[ix] = (g[ix] - lo) / (hi - lo)
    return out


def auc_pairwise(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def gated_attention_loop(H, V, U, w):
    """Scalar-loop gated attention for one bag; H is [K, L]."""
    K, L = H.shape
    D = V.shape[0]
    logits = []
    for k in range(K):
        a = 0.0
        for d in range(D):
            v = sum(V[d, l] * H[k, l] for l in range(L))
            u = sum(U[d, l] * H[k, l] for l in range(L))
            a += w[d] * math.tanh(v) * (1.0 / (1.0 + math.exp(-u)))
        logits.append(a)
    mx = max(logits)
    e = [math.exp(a - mx) for a in logits]
    s = sum(e)
    alpha = [x / s for x in e]
    z = [sum(alpha[k] * H[k, l] for k in range(K)) for l in range(L)]
    return np.array(alpha), np.array(z)
