import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from effnetv2.data import (
    CIFAR_RECORD_BYTES,
    RANDAUG_OPS,
    AugmentConfig,
    Dataset,
    DatasetError,
    apply_op,
    channel_stats,
    cutout,
    load_cifar10,
    mixup,
    one_hot,
    op_strength,
    randaugment,
    resize,
    split_minival,
    standardize,
    synthetic_dataset,
    write_cifar10_binary,
)
from oracles import bilinear_pixel


def fake_cifar(tmp_path, seed=0):
    rng = np.random.default_rng(seed)
    train = Dataset(rng.integers(0, 256, (50000, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, 50000), 10)
    test = Dataset(rng.integers(0, 256, (10000, 3, 32, 32), dtype=np.uint8), rng.integers(0, 10, 10000), 10)
    write_cifar10_binary(tmp_path, train, test)
    return train, test


@pytest.fixture(scope="module")
def cifar_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cifar")
    train, test = fake_cifar(path)
    return path, train, test


class TestCifar:
    def test_split_counts(self, cifar_dir):
        path, _, _ = cifar_dir
        splits = load_cifar10(path)
        assert (len(splits.train), len(splits.minival), len(splits.eval)) == (49000, 1000, 10000)
        assert splits.train.images.shape[1:] == (3, 32, 32)

    def test_first_label_byte(self, cifar_dir):
        path, train, _ = cifar_dir
        raw = (path / "data_batch_1.bin").read_bytes()
        assert raw[0] == train.labels[0]
        assert len(raw) == 10000 * CIFAR_RECORD_BYTES
        assert bytes(train.images[0, 0, 0, :4]) == raw[1:5]  # red plane first, row-major

    def test_splits_disjoint_and_cover_source(self, cifar_dir):
        path, train, _ = cifar_dir
        splits = load_cifar10(path, seed=3)
        both = np.concatenate([splits.train.images, splits.minival.images]).reshape(50000, -1)
        a = {r.tobytes() for r in splits.train.images.reshape(49000, -1)[:2000]}
        b = {r.tobytes() for r in splits.minival.images.reshape(1000, -1)}
        assert not a & b
        assert np.array_equal(np.sort(both.sum(axis=1)), np.sort(train.images.reshape(50000, -1).sum(axis=1)))

    def test_split_deterministic(self, cifar_dir):
        path, _, _ = cifar_dir
        assert np.array_equal(load_cifar10(path, seed=1).minival.labels, load_cifar10(path, seed=1).minival.labels)

    def test_truncated_file(self, tmp_path):
        fake_cifar(tmp_path)
        target = tmp_path / "data_batch_3.bin"
        target.write_bytes(target.read_bytes()[:-5])
        with pytest.raises(DatasetError, match="data_batch_3.bin.*30730000"):
            load_cifar10(tmp_path)

    def test_missing_file(self, tmp_path):
        fake_cifar(tmp_path)
        (tmp_path / "test_batch.bin").unlink()
        with pytest.raises(DatasetError, match="test_batch.bin"):
            load_cifar10(tmp_path)


class TestSynthetic:
    def test_same_seed_identical(self):
        a, b = synthetic_dataset(4, 50, 16, 0), synthetic_dataset(4, 50, 16, 0)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)

    def test_empty(self):
        ds = synthetic_dataset(3, 0, 16, 0)
        assert len(ds) == 0 and ds.images.shape == (0, 3, 16, 16)

    def test_balanced_labels(self):
        ds = synthetic_dataset(5, 100, 8, 1)
        assert np.bincount(ds.labels).tolist() == [20] * 5

    def test_high_snr_nearest_template_separates(self):
        ds = synthetic_dataset(2, 200, 16, 0, snr=8.0)
        x = ds.images.reshape(len(ds), -1).astype(float)
        means = np.stack([x[ds.labels == k].mean(0) for k in range(2)])
        pred = np.argmin(((x[:, None] - means[None]) ** 2).sum(-1), axis=1)
        assert (pred == ds.labels).mean() == 1.0


def test_minival_split_sizes():
    ds = synthetic_dataset(2, 300, 8, 0)
    train, minival = split_minival(ds)
    assert len(train) + len(minival) == 300 and len(minival) == 6


class TestResize:
    def test_identity(self):
        img = np.random.default_rng(0).random((3, 17, 17))
        assert np.array_equal(resize(img, 17), img)

    def test_constant(self):
        img = np.full((3, 10, 10), 0.3)
        for size in (8, 13, 40):
            np.testing.assert_allclose(resize(img, size), 0.3, atol=1e-12)

    def test_upscale_matches_oracle(self):
        yy, xx = np.mgrid[0:12, 0:12]
        ramp = np.stack([yy * 0.1 + xx * 0.05, xx * 0.02, (yy * xx) % 7 / 7.0]).astype(np.float64)
        out = resize(ramp, 24)
        for oy in range(24):
            for ox in range(24):
                assert np.max(np.abs(out[:, oy, ox] - bilinear_pixel(ramp, oy, ox, 24, 24))) < 1e-5

    def test_batch_and_downscale(self):
        x = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
        out = resize(x, 16)
        assert out.shape == (2, 3, 16, 16) and out.dtype == np.float32
        np.testing.assert_allclose(out[1, 2, 5, 7], bilinear_pixel(x[1], 5, 7, 16, 16)[2], atol=1e-5)

    def test_too_small(self):
        with pytest.raises(ValueError):
            resize(np.zeros((3, 16, 16)), 7)


class TestRandAugment:
    def test_zero_magnitude_identity(self):
        img = np.random.default_rng(0).random((3, 16, 16))
        for seed in range(20):
            assert np.array_equal(randaugment(img, 0, 2, np.random.default_rng(seed)), img)

    @pytest.mark.parametrize("op", RANDAUG_OPS)
    def test_every_op_identity_at_zero(self, op):
        img = np.random.default_rng(1).random((3, 12, 12))
        assert np.array_equal(apply_op(img, op, op_strength(op, 0)), img)

    def test_rotate_strength_mapping(self):
        assert op_strength("rotate", 15) == 15.0
        assert op_strength("rotate", 30) == 30.0
        for seed in range(50):
            trace = []
            randaugment(np.zeros((3, 8, 8)), 15, 3, np.random.default_rng(seed), trace=trace)
            for op, s in trace:
                if op == "rotate":
                    assert abs(s) == 15.0
                    return
        pytest.fail("rotate never sampled")

    def test_rotate_by_90_moves_pixels(self):
        img = np.zeros((1, 9, 9))
        img[0, 4, 8] = 1.0
        out = apply_op(img, "rotate", 90.0)
        assert np.unravel_index(np.argmax(out[0]), (9, 9)) in {(0, 4), (8, 4)}

    def test_translate(self):
        img = np.zeros((1, 10, 10))
        img[0, 5, 2] = 1.0
        out = apply_op(img, "translate_x", 0.3)
        assert out[0, 5, 5] == pytest.approx(1.0)

    def test_posterize(self):
        img = np.array([[[0.0, 100 / 255, 1.0]]])
        out = apply_op(img, "posterize", 4.0)
        np.testing.assert_allclose(out[0, 0], [0, 96 / 255, 240 / 255])

    def test_uniform_op_choice(self):
        rng = np.random.default_rng(0)
        trace = []
        for _ in range(4000):
            randaugment(np.zeros((1, 8, 8)), 10, 1, rng, trace=trace)
        counts = np.array([sum(op == o for op, _ in trace) for o in RANDAUG_OPS])
        assert np.all(np.abs(counts - 500) < 3 * np.sqrt(4000 * 1 / 8 * 7 / 8))

    def test_bad_magnitude(self):
        with pytest.raises(ValueError):
            op_strength("rotate", 31)


@settings(max_examples=40, deadline=None)
@given(eps=st.floats(0, 30), seed=st.integers(0, 2**32 - 1), ops=st.integers(0, 4))
def test_randaugment_stays_in_range(eps, seed, ops):
    img = np.random.default_rng(seed).random((3, 10, 10))
    out = randaugment(img, eps, ops, np.random.default_rng(seed))
    assert out.min() >= 0 and out.max() <= 1 and out.shape == img.shape


@settings(max_examples=40, deadline=None)
@given(eps=st.floats(0, 30), seed=st.integers(0, 2**32 - 1))
def test_randaugment_deterministic(eps, seed):
    img = np.random.default_rng(0).random((3, 10, 10))
    a = randaugment(img, eps, 2, np.random.default_rng(seed))
    b = randaugment(img, eps, 2, np.random.default_rng(seed))
    assert np.array_equal(a, b)


class TestMixup:
    def test_alpha_zero_is_identity(self):
        x = np.random.default_rng(0).random((4, 3, 8, 8))
        y = one_hot(np.array([0, 1, 2, 1]), 3)
        mx, my, lam = mixup(x, y, 0.0, np.random.default_rng(0))
        assert lam == 0 and np.array_equal(mx, x) and np.array_equal(my, y)

    def test_full_swap(self):
        x = np.random.default_rng(0).random((3, 3, 4, 4))
        y = one_hot(np.array([0, 1, 2]), 3)
        perm = np.array([2, 0, 1])
        mx, my, _ = mixup(x, y, 1.0, None, lam=1.0, perm=perm)
        np.testing.assert_array_equal(mx, x[perm])
        np.testing.assert_array_equal(my, y[perm])

    def test_quarter_on_constants(self):
        x = np.stack([np.zeros((3, 4, 4)), np.full((3, 4, 4), 4.0)])
        mx, _, _ = mixup(x, one_hot(np.array([0, 1]), 2), 1.0, None, lam=0.25, perm=np.array([1, 0]))
        np.testing.assert_array_equal(mx[0], 1.0)

    def test_lambda_distribution(self):
        rng = np.random.default_rng(0)
        x, y = np.zeros((2, 1, 1, 1)), one_hot(np.array([0, 1]), 2)
        lams = [mixup(x, y, 0.5, rng)[2] for _ in range(4000)]
        # Beta(0.5, 0.5): mean 1/2, variance 1/8
        assert abs(np.mean(lams) - 0.5) < 0.02 and abs(np.var(lams) - 0.125) < 0.01

    def test_rejects_small_batch(self):
        with pytest.raises(ValueError):
            mixup(np.zeros((1, 3, 4, 4)), np.ones((1, 2)) / 2, 0.2, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(0, 2), n=st.integers(2, 8))
def test_mixup_preserves_mean_and_simplex(seed, alpha, n):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3, 6, 6)).astype(np.float32)
    y = rng.dirichlet(np.ones(4), size=n).astype(np.float32)
    mx, my, lam = mixup(x, y, alpha, rng)
    assert 0 <= lam <= 1
    assert abs(float(mx.astype(np.float64).mean()) - float(x.astype(np.float64).mean())) <= 1e-6
    assert my.min() >= 0 and np.all(np.abs(my.sum(axis=1) - 1) <= 1e-6)


class TestCutout:
    def test_zero_size_identity(self):
        img = np.ones((3, 8, 8))
        assert np.array_equal(cutout(img, 0, np.random.default_rng(0)), img)

    def test_deterministic_location(self):
        img = np.ones((3, 16, 16))
        a = cutout(img, 5, np.random.default_rng(42))
        b = cutout(img, 5, np.random.default_rng(42))
        assert np.array_equal(a, b)
        rng = np.random.default_rng(42)
        cy, cx = int(rng.integers(16)), int(rng.integers(16))
        assert a[0, cy, cx] == 0

    def test_too_large(self):
        with pytest.raises(ValueError):
            cutout(np.ones((3, 8, 8)), 9, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), size=st.integers(0, 10))
def test_cutout_fraction_bound(seed, size):
    out = cutout(np.ones((1, 10, 10)), size, np.random.default_rng(seed))
    assert (out == 0).mean() <= size * size / 100


def test_augment_config_validation():
    AugmentConfig(15, 2, 0.2, 8)
    with pytest.raises(ValueError, match="randaug_magnitude.*mixup_alpha"):
        AugmentConfig(randaug_magnitude=40, mixup_alpha=-1)


def test_standardize_with_stats():
    ds = synthetic_dataset(3, 60, 8, 0)
    mean, std = channel_stats(ds)
    x = standardize(ds.images.astype(np.float64) / 255, mean, std)
    np.testing.assert_allclose(x.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(x.std(axis=(0, 2, 3)), 1, atol=1e-10)
