"""Bag- and instance-level distillation from a frozen teacher into a student."""
from __future__ import annotations

import numpy as np
import torch

from .losses import bce_t, bernoulli_kl, bernoulli_kl_t, entropy_t, positive_prob, soften
from .types import DistillConfig, WeakBag, weak_view
from .vat import LossResult

__all__ = ["bernoulli_kl", "soften", "student_loss"]


def student_loss(student, teacher, bag: WeakBag, cfg: DistillConfig, rng=None) -> LossResult:
    """Supervised bag BCE, softened bag KL, summed softened instance KL and
    summed instance entropy.

    Each instance is scored as a bag of size one by both models. Teacher
    outputs carry no gradient. When ``cfg.max_instances`` is set and the bag is
    larger, the instance sums are estimated from a uniform subsample scaled by
    ``K / max_instances``.
    """
    bag = weak_view(bag)
    tau = cfg.tau
    x = student.as_tensor(bag.instances)
    k = len(bag)
    idx = None
    if cfg.max_instances is not None and k > cfg.max_instances:
        rng = rng if rng is not None else np.random.default_rng()
        idx = torch.as_tensor(np.sort(rng.choice(k, cfg.max_instances, replace=False)))
    scale = 1.0 if idx is None else k / cfg.max_instances

    with torch.no_grad():
        ht = teacher.extractor(x.to(teacher.dtype))
        zt, _ = teacher.pool(ht)
        t_bag = teacher.classifier(zt).to(x.dtype)
        t_inst = teacher.instance_logits(ht if idx is None else ht[idx]).to(x.dtype)

    hs = student.extractor(x)
    zs, _ = student.pool(hs)
    s_bag = student.classifier(zs)
    s_inst = student.instance_logits(hs if idx is None else hs[idx])

    y = torch.tensor(float(bag.label), dtype=x.dtype)
    vals = {
        "cls": bce_t(y, positive_prob(s_bag)),
        "bag_kd": bernoulli_kl_t(positive_prob(t_bag, tau), positive_prob(s_bag, tau)),
        "inst_kd": scale * bernoulli_kl_t(positive_prob(t_inst, tau), positive_prob(s_inst, tau)).sum(),
        "entropy": scale * entropy_t(positive_prob(s_inst)).sum(),
    }
    weights = {"cls": cfg.gamma_c, "bag_kd": cfg.gamma_b, "inst_kd": cfg.gamma_i,
               "entropy": cfg.gamma_e}
    total = sum(weights[n] * v for n, v in vals.items())
    return LossResult(total, {n: v.item() for n, v in vals.items()}, weights)
