"""Independent reference computations used as test oracles.

Nothing here imports the package under test.
"""
import itertools

import mpmath as mp
import numpy as np

mp.mp.dps = 50


def entropy_hp(p):
    p = mp.mpf(p)
    out = mp.mpf(0)
    for v in (p, 1 - p):
        if v > 0:
            out -= v * mp.log(v)
    return out


def kl_hp(p, q):
    p, q = mp.mpf(p), mp.mpf(q)
    out = mp.mpf(0)
    if p > 0:
        out += p * mp.log(p / q)
    if p < 1:
        out += (1 - p) * mp.log((1 - p) / (1 - q))
    return out


def softmax_hp(z):
    e = [mp.e ** mp.mpf(v) for v in z]
    s = mp.fsum(e)
    return [v / s for v in e]


def gated_scores_hp(w, U, V, H):
    """Per-instance attention scores by explicit scalar loops."""
    scores = []
    for h in H:
        s = mp.mpf(0)
        for l in range(len(w)):
            vh = mp.fsum(mp.mpf(V[l][j]) * mp.mpf(h[j]) for j in range(len(h)))
            uh = mp.fsum(mp.mpf(U[l][j]) * mp.mpf(h[j]) for j in range(len(h)))
            s += mp.mpf(w[l]) * mp.tanh(vh) / (1 + mp.e ** (-uh))
        scores.append(s)
    return scores


def auroc_pairs(scores, labels):
    """Brute force over all positive/negative pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a, b in itertools.product(pos, neg):
        total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def central_diff(f, x, step=1e-5):
    """Central finite-difference gradient of scalar f at flat array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        g.flat[i] = (f(xp) - f(xm)) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
