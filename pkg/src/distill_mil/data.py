"""Bag datasets: synthetic MNIST-bags, whole-slide patch bags, manifests and folds."""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .seeding import substream
from .types import Bag, ConfigError

MANIFEST_FORMAT = "distill-mil-manifest/1"
SPLIT_FRACTIONS = (0.70, 0.10, 0.20)


# --------------------------------------------------------------------------- digits


@dataclass(frozen=True)
class DigitPool:
    images: np.ndarray  # (n, 1, 28, 28) in [0, 1]
    digits: np.ndarray  # (n,)

    def __post_init__(self):
        if len(self.images) != len(self.digits):
            raise ConfigError("images and digits differ in length")

    def __len__(self):
        return len(self.digits)

    def subset(self, idx) -> "DigitPool":
        return DigitPool(self.images[idx], self.digits[idx])

    def split(self, test_fraction: float, seed: int) -> tuple:
        """Disjoint (train, test) pools, stratified by digit."""
        rng = substream(seed, "split")
        test = []
        for d in np.unique(self.digits):
            idx = np.flatnonzero(self.digits == d)
            test.extend(rng.choice(idx, int(round(len(idx) * test_fraction)), replace=False))
        mask = np.zeros(len(self), bool)
        mask[test] = True
        return self.subset(~mask), self.subset(mask)


def load_digit_pool(source: str = "mnist5k", path: Optional[str] = None) -> DigitPool:
    """Labelled digit images as (n, 1, H, W) scaled to [0, 1].

    ``mnist5k`` is the 5000-image MNIST sample bundled with ``mlxtend``;
    ``npz`` reads arrays ``images`` and ``digits`` from ``path``.
    """
    if source == "npz":
        if path is None:
            raise ConfigError("source 'npz' needs a path")
        with np.load(path) as z:
            images, digits = z["images"], z["digits"]
    elif source == "mnist5k":
        try:
            from mlxtend.data import mnist_data
        except ImportError as e:  # pragma: no cover
            raise ConfigError("digit pool 'mnist5k' needs the optional 'mlxtend' package") from e
        images, digits = mnist_data()
    else:
        raise ConfigError(f"unknown digit source {source!r}")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 2:  # flattened 28x28
        images = images.reshape(-1, 1, 28, 28)
    elif images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise ConfigError(f"digit images must be (n, H, W) or (n, 1, H, W), got shape {images.shape}")
    if images.max() > 1.0:
        images = images / 255.0
    return DigitPool(images.astype(np.float32), np.asarray(digits, dtype=np.int64))


@dataclass(frozen=True)
class MnistBagsSpec:
    num_bags: int = 100
    mean_bag_size: float = 10
    bag_size_variance: float = 5.0
    positive_digit: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.num_bags < 1 or self.mean_bag_size < 1:
            raise ConfigError("num_bags and mean_bag_size must be >= 1")
        if self.bag_size_variance < 0:
            raise ConfigError("bag_size_variance must be >= 0")


def generate_mnist_bags(spec: MnistBagsSpec, pool: DigitPool, prefix: str = "mnist") -> List[Bag]:
    """Bags of random digits; a bag is positive iff it holds ``positive_digit``.

    Bag sizes are ``round(Normal(K, variance))`` clamped to at least 1.
    """
    if len(pool) == 0:
        raise ConfigError("empty digit pool")
    rng = substream(spec.seed, "data")
    sizes = np.maximum(
        1, np.rint(rng.normal(spec.mean_bag_size, math.sqrt(spec.bag_size_variance), spec.num_bags))
    ).astype(int)
    bags = []
    for i, k in enumerate(sizes):
        idx = rng.integers(0, len(pool), size=k)
        y = (pool.digits[idx] == spec.positive_digit).astype(np.int64)
        bags.append(Bag(pool.images[idx], int(y.any()), f"{prefix}-{spec.seed}-{i}", y))
    return bags


# --------------------------------------------------------------------------- patches


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int = 27
    stride: Optional[int] = None
    white_threshold: float = 0.9
    white_fraction_cutoff: float = 0.75

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not 0 < self.white_fraction_cutoff <= 1:
            raise ConfigError("white_fraction_cutoff must lie in (0, 1]")

    @property
    def step(self) -> int:
        return self.stride or self.patch_size


COLON_PATCHES = PatchSpec(27)
BREAST_PATCHES = PatchSpec(32)


def normalize_image(image) -> np.ndarray:
    """(H, W) or (H, W, C) image -> float32 (C, H, W) in [0, 1]."""
    img = np.asarray(image)
    scale = 255.0 if img.dtype == np.uint8 or img.max() > 1.0 else 1.0
    img = img.astype(np.float32) / scale
    if img.ndim == 2:
        img = img[None]
    elif img.ndim == 3:
        img = np.moveaxis(img, -1, 0)
    else:
        raise ConfigError(f"expected a 2D or 3D image, got shape {img.shape}")
    return img


def white_fraction(patch, white_threshold: float = 0.9) -> float:
    """Fraction of pixels whose channel-mean intensity is at least the threshold.

    ``patch`` is (C, H, W) or (H, W) with values in [0, 1].
    """
    p = np.asarray(patch, dtype=np.float32)
    gray = p.mean(axis=0) if p.ndim == 3 else p
    return float(np.mean(gray >= white_threshold))


def patch_grid(image_shape, spec: PatchSpec) -> tuple:
    """Top-left (row, col) corners of the full patches that fit; partial border strips are dropped."""
    h, w = image_shape
    if h < spec.patch_size or w < spec.patch_size:
        raise ConfigError(f"image {h}x{w} is smaller than one {spec.patch_size}px patch")
    rows = np.arange(0, h - spec.patch_size + 1, spec.step)
    cols = np.arange(0, w - spec.patch_size + 1, spec.step)
    return rows, cols


def extract_patches(image, spec: PatchSpec, return_coords: bool = False, keep_background: bool = False):
    """Tile an image into patches, row-major, dropping mostly-white ones.

    ``image`` is anything :func:`normalize_image` accepts. With
    ``return_coords`` a second list of (row, col) corners is returned.
    """
    img = normalize_image(image)
    rows, cols = patch_grid(img.shape[1:], spec)
    s = spec.patch_size
    patches, coords = [], []
    for r in rows:
        for c in cols:
            p = img[:, r : r + s, c : c + s]
            if not keep_background and white_fraction(p, spec.white_threshold) >= spec.white_fraction_cutoff:
                continue
            patches.append(p)
            coords.append((int(r), int(c)))
    return (patches, coords) if return_coords else patches


def label_patches_by_centers(coords, patch_size: int, centers) -> np.ndarray:
    """1 for each patch containing at least one of the given (x, y) centers."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    out = np.zeros(len(coords), dtype=np.int64)
    for i, (r, c) in enumerate(coords):
        x, y = centers[:, 0], centers[:, 1]
        inside = (x >= c) & (x < c + patch_size) & (y >= r) & (y < r + patch_size)
        out[i] = int(inside.any())
    return out


def read_centers(path) -> np.ndarray:
    """Nucleus centers as (x, y) rows from a ``.mat`` (key ``detection``) or CSV file."""
    path = Path(path)
    if path.suffix == ".mat":
        from scipy.io import loadmat

        return np.asarray(loadmat(path)["detection"], dtype=float).reshape(-1, 2)
    arr = np.loadtxt(path, delimiter=",", ndmin=2)
    return arr.reshape(-1, 2)


def image_to_bag(image, bag_label: int, spec: PatchSpec, bag_id: str = "", centers=None) -> Bag:
    patches, coords = extract_patches(image, spec, return_coords=True)
    if not patches:
        raise ConfigError(f"bag {bag_id!r}: every patch was filtered as background")
    labels = None if centers is None else label_patches_by_centers(coords, spec.patch_size, centers)
    return Bag(np.stack(patches), bag_label, bag_id, labels)


def scan_colon_directory(root) -> list:
    """Manifest records for the CRCHistoPhenotypes layout.

    Expects ``Detection/imgN/imgN.bmp`` and, for instance labels,
    ``Classification/imgN/imgN_epithelial.mat``. A bag is positive iff it has
    at least one epithelial nucleus.
    """
    from scipy.io import loadmat

    root = Path(root)
    records = []
    for img in sorted((root / "Detection").glob("img*/img*.bmp"), key=lambda p: int(p.stem[3:])):
        mat = root / "Classification" / img.stem / f"{img.stem}_epithelial.mat"
        label = 0
        if mat.exists():
            label = int(np.asarray(loadmat(mat)["detection"]).size > 0)
        records.append(ManifestRecord(img.stem, str(img), label, str(mat) if mat.exists() else None))
    if not records:
        raise FileNotFoundError(f"no Detection/img*/img*.bmp under {root}")
    return records


# --------------------------------------------------------------------------- persistence


def save_bag(path, bag: Bag) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"instances": bag.instances, "label": np.array(bag.label), "bag_id": np.array(bag.bag_id)}
    if getattr(bag, "instance_labels", None) is not None:
        arrays["instance_labels"] = bag.instance_labels
    buf = io.BytesIO()
    np.savez_compressed(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_bag(path) -> Bag:
    with np.load(path, allow_pickle=False) as z:
        labels = z["instance_labels"] if "instance_labels" in z.files else None
        return Bag(z["instances"], int(z["label"]), str(z["bag_id"]), labels)


@dataclass
class ManifestRecord:
    bag_id: str
    source: str
    label: int
    instance_labels: Optional[str] = None
    fold: Optional[int] = None
    archive: Optional[str] = None


@dataclass
class DatasetManifest:
    """One record per bag plus a header describing how the bags were made.

    On disk: line 1 is a JSON header ``{"format", "spec", "count", "checksum"}``,
    then one JSON object per bag in ``bag_id`` order. ``checksum`` is the
    SHA-256 of the record lines joined with ``\\n``.
    """

    records: List[ManifestRecord]
    spec: dict = field(default_factory=dict)
    split: tuple = SPLIT_FRACTIONS

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions {self.split} do not sum to 1")
        ids = [r.bag_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate bag ids in manifest")

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def _lines(self) -> list:
        return [json.dumps(asdict(r), sort_keys=True) for r in self.records]

    def checksum(self) -> str:
        return hashlib.sha256("\n".join(self._lines()).encode()).hexdigest()

    def dumps(self) -> str:
        header = {"format": MANIFEST_FORMAT, "spec": self.spec, "split": list(self.split),
                  "count": len(self.records), "checksum": self.checksum()}
        return "\n".join([json.dumps(header, sort_keys=True), *self._lines()]) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ConfigError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("format") != MANIFEST_FORMAT:
            raise ConfigError(f"{path}: unknown manifest format {header.get('format')!r}")
        records = []
        for n, line in enumerate(lines[1:], 2):
            try:
                records.append(ManifestRecord(**json.loads(line)))
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{path}:{n}: bad record ({e})") from None
        m = cls(records, header.get("spec", {}), tuple(header.get("split", SPLIT_FRACTIONS)))
        if m.checksum() != header.get("checksum"):
            raise ConfigError(f"{path}: checksum mismatch")
        return m

    def load_bags(self, root=None) -> List[Bag]:
        base = Path(root) if root is not None else Path(".")
        out = []
        for r in self.records:
            if r.archive is None:
                raise ConfigError(f"bag {r.bag_id!r} has no archive; run prepare first")
            out.append(load_bag(base / r.archive))
        return out


# --------------------------------------------------------------------------- folds


def make_folds(labels: Sequence[int], k: int = 5, seed: int = 0) -> np.ndarray:
    """Stratified fold id per bag.

    Bags of each class are shuffled and dealt round-robin, the deal continuing
    from one class to the next, so fold sizes differ by at most one and each
    fold's positive count is within one of ``n_pos / k``.
    """
    labels = np.asarray(labels)
    if len(labels) < k:
        raise ConfigError(f"{len(labels)} bags cannot fill {k} folds")
    rng = substream(seed, "split", k)
    folds = np.empty(len(labels), dtype=np.int64)
    start = 0
    for cls in (1, 0):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        folds[idx] = (start + np.arange(len(idx))) % k
        start = (start + len(idx)) % k
    return folds


def fold_split(labels: Sequence[int], folds: np.ndarray, test_fold: int, seed: int = 0,
               split=SPLIT_FRACTIONS) -> tuple:
    """(train, valid, test) index arrays for one cross-validation run.

    The held-out fold is the test set; the rest is divided train:valid in the
    ratio ``split[0]:split[1]``, stratified by label.
    """
    labels = np.asarray(labels)
    test = np.flatnonzero(folds == test_fold)
    rest = np.flatnonzero(folds != test_fold)
    rng = substream(seed, "split", 1000 + test_fold)
    frac = split[1] / (split[0] + split[1])
    valid = []
    for cls in (1, 0):
        idx = rng.permutation(rest[labels[rest] == cls])
        valid.extend(idx[: int(round(len(idx) * frac))])
    valid = np.sort(np.array(valid, dtype=np.int64))
    train = np.setdiff1d(rest, valid)
    return train, valid, test


def random_split(n: int, seed: int = 0, split=SPLIT_FRACTIONS) -> tuple:
    rng = substream(seed, "split")
    idx = rng.permutation(n)
    a = int(round(split[0] * n))
    b = a + int(round(split[1] * n))
    return np.sort(idx[:a]), np.sort(idx[a:b]), np.sort(idx[b:])
