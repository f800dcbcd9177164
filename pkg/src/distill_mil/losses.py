"""Scalar and tensor versions of the probability losses used for training.

Scalar functions validate their inputs and follow ``0 * log 0 = 0``. Tensor
versions clamp probabilities to ``[EPS, 1 - EPS]`` so gradients stay finite.
"""
import math

import numpy as np
import torch

EPS = 1e-7


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"{name}={p!r} is not a probability")


def _xlogy(x, y):
    return 0.0 if x == 0 else x * math.log(y)


def conditional_entropy(p: float) -> float:
    """Entropy (nats) of a Bernoulli(p) prediction."""
    p = float(p)
    _check_prob("p", p)
    return -_xlogy(p, p) - _xlogy(1 - p, 1 - p)


def bernoulli_kl(p: float, q: float) -> float:
    """KL(Bernoulli(p) || Bernoulli(q)).

    Both arguments are clamped to ``[EPS, 1 - EPS]`` so that equal inputs give
    exactly zero and saturated ones stay finite.
    """
    p, q = float(p), float(q)
    _check_prob("p", p)
    _check_prob("q", q)
    p = min(max(p, EPS), 1 - EPS)
    q = min(max(q, EPS), 1 - EPS)
    return _xlogy(p, p) - _xlogy(p, q) + _xlogy(1 - p, 1 - p) - _xlogy(1 - p, 1 - q)


def soften(logits, tau: float) -> np.ndarray:
    """Temperature softmax ``softmax(logits / tau)``."""
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau!r}")
    z = np.asarray(logits, dtype=np.float64) / tau
    e = np.exp(z - z.max())
    return e / e.sum()


def bce_t(target, prob):
    """``-t log q - (1 - t) log(1 - q)`` with q clamped."""
    q = prob.clamp(EPS, 1 - EPS)
    return -(target * torch.log(q) + (1 - target) * torch.log1p(-q))


def entropy_t(prob):
    p = prob.clamp(EPS, 1 - EPS)
    return -(p * torch.log(p) + (1 - p) * torch.log1p(-p))


def bernoulli_kl_t(p, q):
    p = p.clamp(EPS, 1 - EPS)
    q = q.clamp(EPS, 1 - EPS)
    return p * (torch.log(p) - torch.log(q)) + (1 - p) * (torch.log1p(-p) - torch.log1p(-q))


def positive_prob(logits, tau: float = 1.0):
    return torch.softmax(logits / tau, dim=-1)[..., 1]
