"""Attention-MIL network: per-instance CNN features, gated attention pooling,
and a single linear classifier producing two logits.

The same class serves as teacher and student. A single instance is just a bag
of size one, whose attention weight is exactly 1, so instance predictions are
``classifier(features)``.
"""
from __future__ import annotations

import copy
import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .types import AttentionParams, ConfigError, FeatureBag, PredictionOutput, WeakBag

CHECKPOINT_FORMAT = "distill-mil-checkpoint/1"


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """Conv(+ReLU+2x2 max-pool) blocks followed by three fully connected layers.

    ``fc_dims[-1]`` is the feature dimension d.
    """

    name: str
    in_channels: int
    image_size: tuple
    conv_channels: tuple
    kernel_sizes: tuple
    paddings: tuple
    fc_dims: tuple

    def __post_init__(self):
        n = len(self.conv_channels)
        if n < 1:
            raise ConfigError("need at least one conv block")
        if len(self.kernel_sizes) != n or len(self.paddings) != n:
            raise ConfigError("kernel_sizes/paddings must match conv_channels")
        if len(self.fc_dims) != 3:
            raise ConfigError("the extractor has exactly 3 fully connected layers")
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        for f in ("conv_channels", "kernel_sizes", "paddings", "fc_dims"):
            object.__setattr__(self, f, tuple(int(v) for v in getattr(self, f)))
        if self.flat_dim < 1:
            raise ConfigError(f"spec {self.name!r} shrinks the image to nothing")

    @property
    def conv_block_count(self) -> int:
        return len(self.conv_channels)

    @property
    def output_dim(self) -> int:
        return self.fc_dims[-1]

    @property
    def instance_shape(self) -> tuple:
        return (self.in_channels, *self.image_size)

    @property
    def flat_dim(self) -> int:
        h, w = self.image_size
        for k, p in zip(self.kernel_sizes, self.paddings):
            h, w = (h + 2 * p - k + 1) // 2, (w + 2 * p - k + 1) // 2
        return self.conv_channels[-1] * max(h, 0) * max(w, 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureExtractorSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# LeNet5 layout for 28x28 digits: padding 2 on the first conv mimics the 32x32 input.
LENET5 = FeatureExtractorSpec(
    "lenet5", 1, (28, 28), (6, 16), (5, 5), (2, 0), (120, 84, 64)
)
COLON = FeatureExtractorSpec(
    "colon", 3, (27, 27), (36, 48), (4, 3), (0, 0), (512, 256, 128)
)
BREAST = FeatureExtractorSpec(
    "breast", 3, (32, 32), (32, 48, 64, 96, 128), (3,) * 5, (1,) * 5, (512, 256, 128)
)
PRESETS = {s.name: s for s in (LENET5, COLON, BREAST)}


class FeatureExtractor(nn.Module):
    def __init__(self, spec: FeatureExtractorSpec):
        super().__init__()
        self.spec = spec
        layers = []
        c = spec.in_channels
        for out, k, p in zip(spec.conv_channels, spec.kernel_sizes, spec.paddings):
            layers += [nn.Conv2d(c, out, k, padding=p), nn.ReLU(), nn.MaxPool2d(2)]
            c = out
        self.conv = nn.Sequential(*layers)
        fc = []
        d = spec.flat_dim
        for out in spec.fc_dims:
            fc += [nn.Linear(d, out), nn.ReLU()]
            d = out
        self.fc = nn.Sequential(*fc)

    def forward(self, x):
        return self.fc(self.conv(x).flatten(1))


class GatedAttention(nn.Module):
    """softmax_k( w^T (tanh(V h_k) * sigm(U h_k)) ), no bias terms."""

    def __init__(self, dim: int, hidden: int = 128):
        super().__init__()
        self.V = nn.Linear(dim, hidden, bias=False)
        self.U = nn.Linear(dim, hidden, bias=False)
        self.w = nn.Linear(hidden, 1, bias=False)

    def scores(self, h):
        return self.w(torch.tanh(self.V(h)) * torch.sigmoid(self.U(h))).squeeze(-1)

    def forward(self, h):
        return torch.softmax(self.scores(h), dim=0)

    def params(self) -> AttentionParams:
        return AttentionParams(
            w=self.w.weight.detach().cpu().numpy()[0],
            U=self.U.weight.detach().cpu().numpy(),
            V=self.V.weight.detach().cpu().numpy(),
        )

    @classmethod
    def from_params(cls, p: AttentionParams, dtype=torch.float64) -> "GatedAttention":
        m = cls(p.dim, p.hidden).to(dtype)
        with torch.no_grad():
            m.w.weight.copy_(torch.tensor(p.w).reshape(1, -1))
            m.U.weight.copy_(torch.tensor(p.U))
            m.V.weight.copy_(torch.tensor(p.V))
        return m


class MilModel(nn.Module):
    def __init__(self, spec: FeatureExtractorSpec, attention_dim: int = 128):
        super().__init__()
        self.spec = spec
        self.attention_dim = attention_dim
        self.extractor = FeatureExtractor(spec)
        self.attention = GatedAttention(spec.output_dim, attention_dim)
        self.classifier = nn.Linear(spec.output_dim, 2)

    def pool(self, h):
        a = self.attention(h)
        return a @ h, a

    def forward(self, x):
        """(K, C, H, W) -> (logits of shape (2,), attention weights of shape (K,))."""
        z, a = self.pool(self.extractor(x))
        return self.classifier(z), a

    def instance_logits(self, h):
        """Logits for each row of ``h`` as its own bag of size one."""
        return self.classifier(h)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def as_tensor(self, instances) -> torch.Tensor:
        x = torch.tensor(np.asarray(instances), dtype=self.dtype)
        if tuple(x.shape[1:]) != self.spec.instance_shape:
            raise ConfigError(
                f"instances of shape {tuple(x.shape[1:])} do not match "
                f"{self.spec.name!r} input {self.spec.instance_shape}"
            )
        return x


def build_model(
    spec: Union[FeatureExtractorSpec, str], attention_dim: int = 128, seed: int = 0,
    dtype=torch.float32,
) -> MilModel:
    if isinstance(spec, str):
        try:
            spec = PRESETS[spec]
        except KeyError:
            raise ConfigError(f"unknown extractor preset {spec!r}") from None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MilModel(spec, attention_dim)
    return model.to(dtype).eval()


def clone_model(model: MilModel) -> MilModel:
    return copy.deepcopy(model)


def extract_features(model: MilModel, bag: WeakBag) -> FeatureBag:
    model.eval()
    with torch.no_grad():
        return FeatureBag(model.extractor(model.as_tensor(bag.instances)))


def _as_attention_module(attn, dtype) -> GatedAttention:
    if isinstance(attn, AttentionParams):
        return GatedAttention.from_params(attn, dtype=dtype)
    return attn


def attention_weights(attn: Union[AttentionParams, GatedAttention], feats) -> np.ndarray:
    h = feats.features if isinstance(feats, FeatureBag) else torch.as_tensor(feats)
    if isinstance(h, np.ndarray):
        h = torch.as_tensor(h)
    if isinstance(attn, AttentionParams):
        h = h.to(torch.float64)
    module = _as_attention_module(attn, h.dtype)
    if h.ndim != 2 or h.shape[1] != module.V.in_features:
        raise ConfigError(
            f"features of shape {tuple(h.shape)} do not match attention dim {module.V.in_features}"
        )
    with torch.no_grad():
        return module(h.to(module.V.weight.dtype)).cpu().numpy()


def aggregate(feats, weights) -> np.ndarray:
    """Attention-weighted sum of instance features."""
    h = feats.features if isinstance(feats, FeatureBag) else feats
    h = h.detach().cpu().numpy() if torch.is_tensor(h) else np.asarray(h, dtype=float)
    a = np.asarray(weights, dtype=float)
    if a.ndim != 1 or a.shape[0] != h.shape[0]:
        raise ConfigError(f"{a.shape[0]} weights for {h.shape[0]} instances")
    if abs(a.sum() - 1.0) > 1e-6:
        raise ConfigError(f"weights sum to {a.sum()}, expected 1")
    return a @ h


def predict_bag(model: MilModel, bag: WeakBag, with_instances: bool = False) -> PredictionOutput:
    model.eval()
    with torch.no_grad():
        h = model.extractor(model.as_tensor(bag.instances))
        z, a = model.pool(h)
        logits = model.classifier(z)
        inst = torch.softmax(model.instance_logits(h), -1).cpu().numpy() if with_instances else None
    return PredictionOutput(
        bag_logits=logits.cpu().numpy(),
        bag_probs=torch.softmax(logits, -1).cpu().numpy(),
        attention_weights=a.cpu().numpy(),
        instance_probs=inst,
    )


def predict_instance(model: MilModel, instance) -> np.ndarray:
    """Class probabilities for one instance, treated as a bag of size one."""
    x = np.asarray(instance)[None]
    return predict_bag(model, WeakBag(x, 0)).bag_probs


def predict_instances(model: MilModel, instances, batch_size: int = 1024) -> np.ndarray:
    """Batched single-instance probabilities, shape (n, 2)."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(instances), batch_size):
            x = model.as_tensor(instances[i : i + batch_size])
            out.append(torch.softmax(model.instance_logits(model.extractor(x)), -1))
    if not out:
        return np.zeros((0, 2))
    return torch.cat(out).cpu().numpy()


def predict_bags(model: MilModel, bags: Sequence[WeakBag]) -> np.ndarray:
    """Positive-class bag probabilities."""
    return np.array([predict_bag(model, b).positive_prob for b in bags])


def save_checkpoint(path, model: MilModel, metadata: Optional[dict] = None) -> Path:
    """Write parameters plus a JSON header into one ``.npz`` archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CHECKPOINT_FORMAT,
        "spec": model.spec.to_dict(),
        "attention_dim": model.attention_dim,
        "dtype": str(model.dtype).replace("torch.", ""),
        "metadata": metadata or {},
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple:
    """Returns ``(model, metadata)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: not a checkpoint ({header.get('format')!r})")
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    spec = FeatureExtractorSpec.from_dict(header["spec"])
    model = MilModel(spec, header["attention_dim"]).to(getattr(torch, header["dtype"]))
    model.load_state_dict(state)
    return model.eval(), header["metadata"]


def parameter_digest(model: MilModel) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()

