"""Value types shared across the package.

Bags carry optional per-instance ground truth for evaluation. Training code
never sees it: every training entry point calls :func:`weak_view` first, which
returns a :class:`WeakBag` that has no such attribute.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration or mismatched shapes."""


def _frozen_array(a, dtype=np.float32) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class WeakBag:
    """A bag as training code sees it: instances plus the bag label only."""

    instances: np.ndarray  # (K, C, H, W)
    label: int
    bag_id: str = ""

    def __post_init__(self):
        inst = self.instances
        if not (isinstance(inst, np.ndarray) and not inst.flags.writeable):
            inst = _frozen_array(inst)
            object.__setattr__(self, "instances", inst)
        if inst.ndim != 4:
            raise ConfigError(f"instances must be (K, C, H, W), got shape {inst.shape}")
        if inst.shape[0] < 1:
            raise ConfigError("a bag needs at least one instance")
        if not np.all(np.isfinite(inst)):
            raise ConfigError("instance values must be finite")
        if self.label not in (0, 1):
            raise ConfigError(f"bag label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "label", int(self.label))

    def __len__(self) -> int:
        return self.instances.shape[0]

    @property
    def instance_shape(self) -> tuple:
        return tuple(self.instances.shape[1:])


@dataclass(frozen=True, eq=False)
class Bag(WeakBag):
    """A labelled bag, optionally with evaluation-only instance labels."""

    instance_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        super().__post_init__()
        if self.instance_labels is not None:
            lab = _frozen_array(self.instance_labels, dtype=np.int64)
            if lab.shape != (len(self),):
                raise ConfigError(
                    f"instance_labels has length {lab.shape}, bag has {len(self)} instances"
                )
            if not np.isin(lab, (0, 1)).all():
                raise ConfigError("instance labels must be binary")
            object.__setattr__(self, "instance_labels", lab)

    @classmethod
    def from_instances(cls, instances: Sequence[np.ndarray], label: int, **kw) -> "Bag":
        return cls(np.stack([np.asarray(x, dtype=np.float32) for x in instances]), label, **kw)


def weak_view(bag: WeakBag) -> WeakBag:
    """Strip evaluation-only fields. Idempotent."""
    if type(bag) is WeakBag:
        return bag
    return WeakBag(bag.instances, bag.label, bag.bag_id)


@dataclass(frozen=True, eq=False)
class FeatureBag:
    """Per-instance latent vectors, shape (K, d). Holds a torch tensor."""

    features: "object"

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Gated-attention parameters as plain arrays: w (L,), U (L, d), V (L, d)."""

    w: np.ndarray
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        w = _frozen_array(self.w, np.float64).reshape(-1)
        U = _frozen_array(self.U, np.float64)
        V = _frozen_array(self.V, np.float64)
        if U.ndim != 2 or U.shape != V.shape or U.shape[0] != w.shape[0]:
            raise ConfigError(f"inconsistent attention shapes w{w.shape} U{U.shape} V{V.shape}")
        for a in (w, U, V):
            if not np.all(np.isfinite(a)):
                raise ConfigError("attention parameters must be finite")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)

    @property
    def hidden(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.U.shape[1]


@dataclass(frozen=True, eq=False)
class PredictionOutput:
    bag_logits: np.ndarray
    bag_probs: np.ndarray
    attention_weights: np.ndarray
    instance_probs: Optional[np.ndarray] = None

    @property
    def positive_prob(self) -> float:
        return float(self.bag_probs[1])


@dataclass(frozen=True)
class VatConfig:
    """Weights and perturbation settings for the regularized teacher loss.

    ``noise_count_range`` of ``None`` means ``[1, ceil(K / 2)]`` per bag.
    ``value_range`` is the instance value range the noise instances are drawn
    from and the jitter is clipped to.
    """

    lambda_c: float = 1.0
    lambda_n: float = 0.5
    lambda_delta: float = 0.3
    lambda_e: float = 0.3
    delta: float = 0.05
    norm: str = "l2"
    noise_count_range: Optional[tuple] = None
    drop_fraction: float = 0.3
    entropy_realizations: int = 1
    value_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        for name in ("lambda_c", "lambda_n", "lambda_delta", "lambda_e"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.delta <= 0:
            raise ConfigError("delta must be > 0")
        if self.norm not in ("l2", "linf"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if not 0 < self.drop_fraction < 1:
            raise ConfigError("drop_fraction must lie in (0, 1)")
        if self.entropy_realizations < 1:
            raise ConfigError("entropy_realizations must be >= 1")
        if self.noise_count_range is not None:
            lo, hi = self.noise_count_range
            if lo < 1 or hi < lo:
                raise ConfigError(f"bad noise_count_range {self.noise_count_range}")
            object.__setattr__(self, "noise_count_range", (int(lo), int(hi)))
        lo, hi = self.value_range
        if hi < lo:
            raise ConfigError("value_range must be (lo, hi) with lo <= hi")
        object.__setattr__(self, "value_range", (float(lo), float(hi)))

    @classmethod
    def baseline(cls, **kw) -> "VatConfig":
        """Plain attention-MIL: classification term only."""
        return cls(lambda_c=1.0, lambda_n=0.0, lambda_delta=0.0, lambda_e=0.0, **kw)

    @property
    def is_baseline(self) -> bool:
        return self.lambda_n == 0 and self.lambda_delta == 0 and self.lambda_e == 0


COLON_VAT = VatConfig(lambda_c=1.0, lambda_n=0.5, lambda_delta=0.3, lambda_e=0.3)
BREAST_VAT = VatConfig(
    lambda_c=0.8, lambda_n=0.8, lambda_delta=0.3, lambda_e=0.3, entropy_realizations=5
)


@dataclass(frozen=True)
class DistillConfig:
    gamma_c: float = 0.3
    gamma_b: float = 0.5
    gamma_i: float = 0.5
    gamma_e: float = 0.1
    tau: float = 2.0
    student_init: str = "from_teacher"
    max_instances: Optional[int] = None  # cap on instance-level terms per bag

    def __post_init__(self):
        for name in ("gamma_c", "gamma_b", "gamma_i", "gamma_e"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.student_init not in ("from_teacher", "from_scratch"):
            raise ConfigError(f"unknown student_init {self.student_init!r}")
        if self.max_instances is not None and self.max_instances < 1:
            raise ConfigError("max_instances must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-4
    batch_size: int = 1
    epochs: int = 20
    patience: Optional[int] = None
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "rmsprop", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1")


@dataclass
class History:
    """Per-epoch loss-term means and optional validation scores."""

    records: list = field(default_factory=list)
    best_epoch: Optional[int] = None

    def append(self, record: dict):
        self.records.append(dict(record))

    def series(self, key: str) -> list:
        return [r[key] for r in self.records if key in r]

    def __len__(self):
        return len(self.records)
