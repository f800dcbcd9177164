"""Optimization loops for the teacher and the student."""
from __future__ import annotations

import logging
import math
from typing import Callable, Optional, Sequence

import torch

from .distill import student_loss
from .metrics import SingleClassError, auroc
from .model import (
    LENET5, FeatureExtractorSpec, MilModel, build_model, clone_model, parameter_digest, predict_bags,
)
from .seeding import substream
from .types import DistillConfig, History, TrainConfig, VatConfig, WeakBag, weak_view
from .vat import vat_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "rmsprop":
        return torch.optim.RMSprop(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _bag_auroc(model, bags) -> float:
    try:
        return auroc(predict_bags(model, bags), [b.label for b in bags])
    except SingleClassError:
        return float("nan")


def fit(
    model: MilModel,
    bags: Sequence[WeakBag],
    loss_fn: Callable,
    cfg: TrainConfig,
    valid: Optional[Sequence[WeakBag]] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> History:
    """Minimize ``loss_fn(model, bag, rng)`` one bag at a time.

    Gradients are accumulated over ``cfg.batch_size`` bags per step. With a
    validation set the bag AUROC is tracked; with ``cfg.patience`` set training
    stops after that many epochs without improvement and the best parameters
    are restored.
    """
    history = History()
    if cfg.epochs == 0:
        return history
    opt = make_optimizer([p for p in model.parameters() if p.requires_grad], cfg)
    rng = substream(cfg.seed, "perturbation")
    best, best_state, stale = -math.inf, None, 0
    for epoch in range(cfg.epochs):
        model.train()
        order = substream(cfg.seed, "shuffle", epoch).permutation(len(bags))
        sums: dict = {}
        opt.zero_grad()
        for step, i in enumerate(order, 1):
            res = loss_fn(model, bags[i], rng)
            if not torch.isfinite(res.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, bag {bags[i].bag_id!r}")
            (res.total / cfg.batch_size).backward()
            if step % cfg.batch_size == 0 or step == len(order):
                opt.step()
                opt.zero_grad()
            for k, v in res.record().items():
                sums[k] = sums.get(k, 0.0) + v
        model.eval()
        record = {"epoch": epoch, **{k: v / len(order) for k, v in sums.items()}}
        if valid:
            score = _bag_auroc(model, valid)
            record["valid_auroc"] = score
            if score > best:
                best, stale = score, 0
                history.best_epoch = epoch
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            else:
                stale += 1
        history.append(record)
        log.debug("epoch %d %s", epoch, record)
        if on_epoch is not None:
            on_epoch(record)
        if cfg.patience is not None and valid and stale >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
            break
    if cfg.patience is not None and best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


def train_teacher(
    bags: Sequence[WeakBag],
    vat_cfg: VatConfig,
    train_cfg: TrainConfig,
    spec: FeatureExtractorSpec = LENET5,
    attention_dim: int = 128,
    valid: Optional[Sequence[WeakBag]] = None,
    on_epoch=None,
    dtype=torch.float32,
) -> tuple:
    """Train a teacher with the regularized loss. Returns ``(model, history)``."""
    if not bags:
        raise ValueError("empty training set")
    bags = [weak_view(b) for b in bags]
    valid = [weak_view(b) for b in valid] if valid else None
    init_seed = int(substream(train_cfg.seed, "init").integers(2**31))
    model = build_model(spec, attention_dim, seed=init_seed, dtype=dtype)

    def loss_fn(m, bag, rng):
        return vat_loss(m, bag, vat_cfg, rng)

    history = fit(model, bags, loss_fn, train_cfg, valid, on_epoch)
    return model, history


def train_student(
    teacher: MilModel,
    bags: Sequence[WeakBag],
    cfg: DistillConfig,
    train_cfg: TrainConfig,
    valid: Optional[Sequence[WeakBag]] = None,
    on_epoch=None,
) -> tuple:
    """Distill ``teacher`` into a student of the same architecture.

    The teacher is never modified. Returns ``(student, history)``.
    """
    if not bags:
        raise ValueError("empty training set")
    bags = [weak_view(b) for b in bags]
    valid = [weak_view(b) for b in valid] if valid else None
    digest = parameter_digest(teacher)
    frozen = clone_model(teacher).eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    if cfg.student_init == "from_teacher":
        student = clone_model(teacher)
    else:
        init_seed = int(substream(train_cfg.seed, "init", 1).integers(2**31))
        student = build_model(teacher.spec, teacher.attention_dim, seed=init_seed, dtype=teacher.dtype)
    for p in student.parameters():
        p.requires_grad_(True)

    def loss_fn(m, bag, rng):
        return student_loss(m, frozen, bag, cfg, rng)

    history = fit(student, bags, loss_fn, train_cfg, valid, on_epoch)
    if parameter_digest(teacher) != digest:
        raise TrainingError("teacher parameters changed during distillation")
    return student.eval(), history
