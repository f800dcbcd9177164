"""Bag perturbations and the consistency-regularized teacher loss.

Three perturbed copies of a training bag are built: one with extra uniform
noise instances, one with every instance jittered inside a norm ball, and one
or more with a random subset of instances removed. The teacher is penalized
for changing its prediction on the first two and for being uncertain on the
pruned ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple

import numpy as np
import torch

from .losses import bce_t, conditional_entropy, entropy_t, positive_prob
from .types import Bag, ConfigError, VatConfig, WeakBag, weak_view

__all__ = [
    "LossResult",
    "PerturbedBagSet",
    "conditional_entropy",
    "drop_instances",
    "inject_noise_instances",
    "jitter_instances",
    "perturb_bag",
    "sample_noise_count",
    "vat_loss",
]


def _rebuild(bag: WeakBag, instances: np.ndarray, instance_labels=None) -> WeakBag:
    if isinstance(bag, Bag):
        return Bag(instances, bag.label, bag.bag_id, instance_labels)
    return WeakBag(instances, bag.label, bag.bag_id)


def inject_noise_instances(bag: WeakBag, count: int, value_range, rng) -> WeakBag:
    """Append ``count`` instances drawn i.i.d. uniform over ``value_range``."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    noise = _noise(bag.instance_shape, count, value_range, rng)
    labels = None
    if isinstance(bag, Bag) and bag.instance_labels is not None:
        labels = np.concatenate([bag.instance_labels, np.zeros(count, dtype=np.int64)])
    return _rebuild(bag, np.concatenate([bag.instances, noise]), labels)


def _noise(shape, count, value_range, rng) -> np.ndarray:
    lo, hi = value_range
    return rng.uniform(lo, hi, size=(count, *shape)).astype(np.float32)


def _keep_indices(k: int, drop_fraction: float, rng) -> np.ndarray:
    keep = min(k - 1, max(1, int(round(k * (1 - drop_fraction)))))
    return np.sort(rng.choice(k, size=keep, replace=False))


def sample_ball(shape, delta: float, norm: str, rng, n: int) -> np.ndarray:
    """``n`` offsets of the given shape inside the radius-``delta`` ball."""
    if norm == "linf":
        return rng.uniform(-delta, delta, size=(n, *shape))
    if norm != "l2":
        raise ValueError(f"unknown norm {norm!r}")
    g = rng.standard_normal(size=(n, int(np.prod(shape))))
    g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    g *= rng.uniform(0.0, delta, size=(n, 1))
    return g.reshape(n, *shape)


def jitter_instances(bag: WeakBag, delta: float, norm: str, rng, value_range=(0.0, 1.0)) -> WeakBag:
    """Move each instance by a random offset of norm at most ``delta``, then clip."""
    if not delta > 0:
        raise ValueError(f"delta must be > 0, got {delta}")
    x = _jitter(bag.instances, delta, norm, rng, value_range)
    return _rebuild(bag, x, getattr(bag, "instance_labels", None))


def _jitter(instances, delta, norm, rng, value_range) -> np.ndarray:
    offsets = sample_ball(instances.shape[1:], delta, norm, rng, len(instances))
    return np.clip(instances + offsets, *value_range).astype(np.float32)


def drop_instances(bag: WeakBag, drop_fraction: float, rng):
    """Keep a uniformly random subset of ``max(1, round(K * (1 - drop_fraction)))``
    instances (always fewer than K).

    Returns ``(bag, dropped)``. A bag of one instance comes back unchanged with
    ``dropped=False``.
    """
    if not 0 < drop_fraction < 1:
        raise ValueError("drop_fraction must lie in (0, 1)")
    k = len(bag)
    if k == 1:
        return bag, False
    idx = _keep_indices(k, drop_fraction, rng)
    labels = getattr(bag, "instance_labels", None)
    return _rebuild(bag, bag.instances[idx], None if labels is None else labels[idx]), True


def sample_noise_count(k: int, cfg: VatConfig, rng) -> int:
    lo, hi = cfg.noise_count_range or (1, max(1, math.ceil(k / 2)))
    return int(rng.integers(lo, hi + 1))


@dataclass(frozen=True)
class PerturbedBagSet:
    noisy: WeakBag
    jittered: WeakBag
    pruned: List[WeakBag]


def perturb_bag(bag: WeakBag, cfg: VatConfig, rng) -> PerturbedBagSet:
    noisy = inject_noise_instances(bag, sample_noise_count(len(bag), cfg, rng), cfg.value_range, rng)
    jittered = jitter_instances(bag, cfg.delta, cfg.norm, rng, cfg.value_range)
    pruned = [drop_instances(bag, cfg.drop_fraction, rng)[0] for _ in range(cfg.entropy_realizations)]
    return PerturbedBagSet(noisy, jittered, pruned)


class LossResult(NamedTuple):
    """Differentiable total plus raw (unweighted) term values and their weights."""

    total: torch.Tensor
    terms: dict
    weights: dict

    def weighted(self) -> dict:
        return {k: self.weights[k] * v for k, v in self.terms.items()}

    def record(self) -> dict:
        return {**self.terms, "total": self.total.item()}


def vat_loss(teacher, bag: WeakBag, cfg: VatConfig, rng, detach_clean: bool = True) -> LossResult:
    """Classification BCE plus noise, jitter and pruned-entropy regularizers.

    The clean prediction is detached when used as the target of the two
    consistency terms (``detach_clean=False`` keeps it live, which makes the
    returned gradient the exact gradient of the loss value). Terms whose weight is zero are skipped (reported as 0)
    and consume no randomness.
    """
    if not isinstance(cfg, VatConfig):
        raise ConfigError("cfg must be a VatConfig")
    bag = weak_view(bag)
    k = len(bag)
    x = teacher.as_tensor(bag.instances)
    parts = [x]
    n_noise = 0
    if cfg.lambda_n > 0:
        n_noise = sample_noise_count(k, cfg, rng)
        noise = _noise(bag.instance_shape, n_noise, cfg.value_range, rng)
        parts.append(torch.as_tensor(noise, dtype=x.dtype))
    if cfg.lambda_delta > 0:
        jit = _jitter(bag.instances, cfg.delta, cfg.norm, rng, cfg.value_range)
        parts.append(torch.as_tensor(jit, dtype=x.dtype))

    # Originals are shared by X, X_n and every pruned bag; one extractor pass
    # gives the same features as running each bag separately.
    h_all = teacher.extractor(torch.cat(parts) if len(parts) > 1 else x)
    h = h_all[:k]

    def bag_prob(feats):
        z, _ = teacher.pool(feats)
        return positive_prob(teacher.classifier(z))

    p = bag_prob(h)
    y = torch.tensor(float(bag.label), dtype=p.dtype)
    zero = torch.zeros((), dtype=p.dtype)
    l_c = bce_t(y, p)
    target = p.detach() if detach_clean else p
    l_n = l_d = l_e = zero
    if cfg.lambda_n > 0:
        l_n = bce_t(target, bag_prob(h_all[: k + n_noise]))
    if cfg.lambda_delta > 0:
        l_d = bce_t(target, bag_prob(h_all[k + n_noise :]))
    if cfg.lambda_e > 0:
        ents = []
        for _ in range(cfg.entropy_realizations):
            idx = np.arange(1) if k == 1 else _keep_indices(k, cfg.drop_fraction, rng)
            ents.append(entropy_t(bag_prob(h[torch.as_tensor(idx)])))
        l_e = torch.stack(ents).mean()

    weights = {"cls": cfg.lambda_c, "noise": cfg.lambda_n, "jitter": cfg.lambda_delta,
               "entropy": cfg.lambda_e}
    vals = {"cls": l_c, "noise": l_n, "jitter": l_d, "entropy": l_e}
    total = sum(weights[n] * v for n, v in vals.items())
    return LossResult(total, {n: v.item() for n, v in vals.items()}, weights)
