import itertools

import numpy as np
import pytest

from distill_mil.data import (
    DatasetManifest, DigitPool, ManifestRecord, MnistBagsSpec, PatchSpec, extract_patches,
    fold_split, generate_mnist_bags, image_to_bag, label_patches_by_centers, load_bag,
    load_digit_pool, make_folds, patch_grid, random_split, save_bag, white_fraction,
)
from distill_mil.types import Bag, ConfigError


def toy_pool(n=200, digits=range(10), seed=0):
    rng = np.random.default_rng(seed)
    d = rng.choice(list(digits), size=n)
    images = rng.uniform(size=(n, 1, 28, 28)).astype(np.float32)
    return DigitPool(images, d)


# ------------------------------------------------------------------ MNIST-bags

def test_no_nines_means_all_negative():
    bags = generate_mnist_bags(MnistBagsSpec(50, 10), toy_pool(digits=range(9)))
    assert all(b.label == 0 for b in bags)


def test_label_is_any_nine():
    bags = generate_mnist_bags(MnistBagsSpec(200, 10, seed=3), toy_pool())
    for b in bags:
        assert b.label == int(b.instance_labels.any())
    assert 0 < sum(b.label for b in bags) < 200


def test_instance_labels_mark_the_digit():
    pool = toy_pool()
    bags = generate_mnist_bags(MnistBagsSpec(20, 10, seed=1), pool)
    lookup = {img.tobytes(): d for img, d in zip(pool.images, pool.digits)}
    for b in bags:
        for x, y in zip(b.instances, b.instance_labels):
            assert y == int(lookup[x.tobytes()] == 9)


def test_bag_size_distribution():
    bags = generate_mnist_bags(MnistBagsSpec(10**4, 10, seed=0), toy_pool(50))
    sizes = np.array([len(b) for b in bags])
    assert sizes.min() >= 1
    assert abs(sizes.mean() - 10) < 0.1
    # rounding to the nearest integer adds 1/12 to the variance
    assert abs(sizes.var() - 5) < 0.3


def test_generator_reproducible():
    a = generate_mnist_bags(MnistBagsSpec(30, 5, seed=9), toy_pool())
    b = generate_mnist_bags(MnistBagsSpec(30, 5, seed=9), toy_pool())
    assert all(np.array_equal(x.instances, y.instances) and x.label == y.label for x, y in zip(a, b))


def test_empty_pool():
    with pytest.raises(ConfigError):
        generate_mnist_bags(MnistBagsSpec(3, 3), DigitPool(np.zeros((0, 1, 28, 28)), np.zeros(0)))


def test_bundled_digits():
    pool = load_digit_pool()
    assert pool.images.shape == (5000, 1, 28, 28)
    assert pool.images.min() >= 0 and pool.images.max() <= 1
    assert (pool.digits == 9).sum() == 500
    tr, te = pool.split(0.2, 0)
    assert len(te) == 1000 and len(tr) == 4000


def test_digit_pool_split_disjoint():
    pool = toy_pool(300)
    tr, te = pool.split(0.25, 1)
    a = {x.tobytes() for x in tr.images}
    b = {x.tobytes() for x in te.images}
    assert not a & b and len(a) + len(b) == 300


def test_npz_pool(tmp_path):
    p = tmp_path / "pool.npz"
    np.savez(p, images=np.full((4, 28, 28), 255, np.uint8), digits=np.arange(4))
    pool = load_digit_pool("npz", p)
    assert pool.images.shape == (4, 1, 28, 28) and pool.images.max() == 1.0


# ------------------------------------------------------------------ patches

@pytest.mark.parametrize("shape,size,n", [((500, 500), 27, 324), ((768, 896), 32, 672), ((896, 768), 32, 672)])
def test_candidate_patch_counts(shape, size, n):
    rows, cols = patch_grid(shape, PatchSpec(size))
    assert len(rows) * len(cols) == n
    img = np.zeros((*shape, 3), np.uint8)
    assert len(extract_patches(img, PatchSpec(size))) == n


def test_all_white_image_gives_no_patches():
    assert extract_patches(np.full((100, 100, 3), 255, np.uint8), PatchSpec(27)) == []


def test_too_small_image():
    with pytest.raises(ConfigError):
        extract_patches(np.zeros((20, 20)), PatchSpec(27))


def test_white_fraction_examples():
    assert white_fraction(np.zeros((3, 8, 8))) == 0.0
    assert white_fraction(np.ones((3, 8, 8))) == 1.0
    checker = (np.indices((8, 8)).sum(0) % 2).astype(float)
    assert white_fraction(np.stack([checker] * 3)) == 0.5


def test_white_filter_cutoff():
    img = np.zeros((54, 54))
    img[:27, :27] = 1.0            # all white -> dropped
    img[:27, 27:][:20] = 1.0       # 20/27 rows white (74%) -> kept
    img[27:, :27][:21] = 1.0       # 21/27 rows white (78%) -> dropped
    patches, coords = extract_patches(img, PatchSpec(27), return_coords=True)
    assert coords == [(0, 27), (27, 27)]
    assert patches[0].shape == (1, 27, 27)


def test_patches_row_major_and_exact():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 0.5, size=(64, 96, 3)).astype(np.float32)
    patches, coords = extract_patches(img, PatchSpec(32), return_coords=True)
    assert coords == [(0, 0), (0, 32), (0, 64), (32, 0), (32, 32), (32, 64)]
    np.testing.assert_array_equal(patches[4], np.moveaxis(img[32:64, 32:64], -1, 0))


def test_stride_option():
    rows, cols = patch_grid((100, 100), PatchSpec(20, stride=10))
    assert len(rows) == 9


def test_center_containment_labels():
    coords = [(0, 0), (0, 27), (27, 0)]
    centers = [(30.0, 5.0), (26.9, 26.9)]  # (x, y)
    assert list(label_patches_by_centers(coords, 27, centers)) == [1, 1, 0]


def test_image_to_bag():
    img = np.zeros((54, 54, 3), np.uint8)
    bag = image_to_bag(img, 1, PatchSpec(27), "img1", centers=[(40, 40)])
    assert len(bag) == 4 and list(bag.instance_labels) == [0, 0, 0, 1]


# ------------------------------------------------------------------ persistence

def test_bag_archive_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    bag = Bag(rng.uniform(size=(3, 1, 4, 4)), 1, "abc", [0, 1, 0])
    back = load_bag(save_bag(tmp_path / "b.npz", bag))
    assert np.array_equal(back.instances, bag.instances)
    assert back.label == 1 and back.bag_id == "abc" and list(back.instance_labels) == [0, 1, 0]
    nolab = load_bag(save_bag(tmp_path / "c.npz", Bag(bag.instances, 0, "c")))
    assert nolab.instance_labels is None


def test_manifest_roundtrip_and_checksum(tmp_path):
    recs = [ManifestRecord(f"b{i}", f"seed:{i}", i % 2, None, i % 5, f"bags/b{i}.npz") for i in range(10)]
    m = DatasetManifest(recs, {"kind": "mnist_bags", "K": 10})
    path = m.save(tmp_path / "manifest.jsonl")
    back = DatasetManifest.load(path)
    assert back.records == recs and back.spec == m.spec
    assert path.read_text() == m.dumps()
    lines = path.read_text().splitlines()
    lines[3] = lines[3].replace("seed:2", "seed:99")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ConfigError, match="checksum"):
        DatasetManifest.load(path)


def test_manifest_bad_line_reports_line_number(tmp_path):
    m = DatasetManifest([ManifestRecord("a", "s", 0)])
    p = tmp_path / "m.jsonl"
    p.write_text(m.dumps() + "{not json\n")
    with pytest.raises(ConfigError, match=":3:"):
        DatasetManifest.load(p)


def test_manifest_validation():
    with pytest.raises(ConfigError):
        DatasetManifest([ManifestRecord("a", "s", 0), ManifestRecord("a", "t", 1)])
    with pytest.raises(ConfigError):
        DatasetManifest([], split=(0.5, 0.2, 0.2))


# ------------------------------------------------------------------ folds

def test_folds_equal_size():
    labels = np.array([1] * 37 + [0] * 63)
    folds = make_folds(labels, 5, seed=0)
    assert np.bincount(folds).tolist() == [20] * 5


def test_folds_too_few_bags():
    with pytest.raises(ConfigError):
        make_folds([0, 1, 0], 5)


def _stratification_ok(labels, folds, k):
    n_pos = labels.sum()
    for f in range(k):
        frac = labels.sum() / len(labels)
        members = folds == f
        if abs(labels[members].sum() - frac * members.sum()) > 1 + 1e-9:
            return False
        if abs(labels[members].sum() - n_pos / k) >= 1:
            return False
    return True


def test_fold_stratification_exhaustive():
    """Every positive count on a 20-bag toy manifest, several shuffles each."""
    for n_pos in range(21):
        labels = np.array([1] * n_pos + [0] * (20 - n_pos))
        for seed in range(5):
            folds = make_folds(labels, 5, seed)
            counts = [int(labels[folds == f].sum()) for f in range(5)]
            # counting oracle: the best possible spread puts floor or ceil(n_pos/5) in each fold
            assert set(counts) <= {n_pos // 5, -(-n_pos // 5)}
            assert _stratification_ok(labels, folds, 5)


def test_each_bag_in_exactly_one_test_fold():
    labels = np.random.default_rng(0).integers(0, 2, 53)
    folds = make_folds(labels, 5, 1)
    seen = []
    for f in range(5):
        tr, va, te = fold_split(labels, folds, f, seed=1)
        assert not set(tr) & set(va) and not set(tr) & set(te) and not set(va) & set(te)
        assert len(tr) + len(va) + len(te) == 53
        seen.extend(te)
    assert sorted(seen) == list(range(53))


def test_fold_split_fractions():
    labels = np.array([1] * 40 + [0] * 60)
    folds = make_folds(labels, 5, 0)
    tr, va, te = fold_split(labels, folds, 0, 0)
    assert (len(tr), len(va), len(te)) == (70, 10, 20)


def test_random_split():
    tr, va, te = random_split(100, 0)
    assert (len(tr), len(va), len(te)) == (70, 10, 20)
    assert sorted(itertools.chain(tr, va, te)) == list(range(100))
