import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tlens import data


def reference_idx_images(path):
    """Second, minimal IDX reader used as an oracle."""
    raw = open(path, "rb").read()
    assert raw[2] == 0x08 and raw[3] == 3
    n, h, w = (int.from_bytes(raw[4 + 4 * k : 8 + 4 * k], "big") for k in range(3))
    first = list(raw[16 : 16 + h * w])
    return n, h, w, first


@pytest.fixture
def idx_pair(tmp_path):
    imgs = np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4) * 7
    labels = np.array([3, 5], dtype=np.uint8)
    data.write_idx(tmp_path / "img", imgs)
    data.write_idx(tmp_path / "lab", labels)
    return tmp_path / "img", tmp_path / "lab", imgs, labels


class TestIdx:
    def test_round_trip(self, idx_pair):
        ip, lp, imgs, labels = idx_pair
        got_i, got_l = data.load_idx_pair(ip, lp)
        np.testing.assert_array_equal(got_i, imgs)
        np.testing.assert_array_equal(got_l, labels)

    def test_gzip(self, idx_pair, tmp_path):
        ip, _, imgs, _ = idx_pair
        with gzip.open(tmp_path / "img.gz", "wb") as fh:
            fh.write(ip.read_bytes())
        np.testing.assert_array_equal(data.load_idx(tmp_path / "img.gz"), imgs)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(struct.pack(">II", 0x00000802, 1) + b"\x00")
        with pytest.raises(ValueError):
            data.load_idx(tmp_path / "x")

    def test_truncated(self, idx_pair):
        ip = idx_pair[0]
        ip.write_bytes(ip.read_bytes()[:-3])
        with pytest.raises(ValueError):
            data.load_idx(ip)

    def test_count_mismatch(self, idx_pair, tmp_path):
        data.write_idx(tmp_path / "lab3", np.array([1, 2, 3], dtype=np.uint8))
        with pytest.raises(ValueError):
            data.load_idx_pair(idx_pair[0], tmp_path / "lab3")

    def test_against_reference_parser(self, tmp_path):
        images, labels, _ = data.load_mnist()
        data.write_idx(tmp_path / "train-images-idx3-ubyte", images[:50])
        data.write_idx(tmp_path / "train-labels-idx1-ubyte", labels[:50])
        n, h, w, first = reference_idx_images(tmp_path / "train-images-idx3-ubyte")
        ours = data.load_idx(tmp_path / "train-images-idx3-ubyte")
        assert (n, h, w) == ours.shape
        assert sum(first) == int(ours[0].sum()) and first == ours[0].ravel().tolist()

    def test_data_dir_takes_precedence(self, tmp_path, monkeypatch):
        images = np.full((4, 28, 28), 9, dtype=np.uint8)
        data.write_idx(tmp_path / "train-images-idx3-ubyte", images)
        data.write_idx(tmp_path / "train-labels-idx1-ubyte", np.array([3, 5, 3, 5], dtype=np.uint8))
        monkeypatch.setenv(data.DATA_DIR_ENV, str(tmp_path))
        got, labels, source = data.load_mnist()
        assert source.startswith("idx:") and got.shape == (4, 28, 28)


class TestBinaryTask:
    def test_constant_image_pools_to_constant(self):
        out = data.downsample(np.full((28, 28), 3.0), (8, 8))
        np.testing.assert_allclose(out, 3.0, rtol=1e-14)

    def test_checkerboard(self):
        board = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
        np.testing.assert_allclose(data.downsample(board, (8, 8)), 0.5)

    def test_pooling_preserves_range(self):
        img = np.random.default_rng(0).integers(0, 256, size=(3, 28, 28))
        out = data.downsample(img, (8, 8)) / 255
        assert out.min() >= 0 and out.max() <= 1

    def test_counts_balance_and_range(self):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(3000, 16, 16), dtype=np.uint8)
        labels = np.repeat([3, 5, 7], 1000)
        ds = data.make_binary_task(images, labels, 3, 5, 1000, 400, (8, 8), seed=2)
        assert ds.x_train.shape == (1000, 64) and ds.x_test.shape == (400, 64)
        assert ds.y_train.sum() == 500 and ds.y_test.sum() == 200
        assert set(np.unique(ds.y_train)) == {0.0, 1.0}
        assert ds.x_train.min() >= 0 and ds.x_train.max() <= 1
        again = data.make_binary_task(images, labels, 3, 5, 1000, 400, (8, 8), seed=2)
        np.testing.assert_array_equal(ds.x_train, again.x_train)

    def test_splits_disjoint(self):
        images = np.arange(200, dtype=np.uint8).reshape(200, 1, 1).repeat(2, 1).repeat(2, 2)
        labels = np.repeat([0, 1], 100)
        ds = data.make_binary_task(images, labels, 0, 1, 120, 80, (1, 1), seed=0, scale=1.0)
        assert not set(ds.x_train.ravel()) & set(ds.x_test.ravel())

    def test_insufficient(self):
        with pytest.raises(ValueError):
            data.make_binary_task(np.zeros((10, 4, 4)), np.repeat([0, 1], 5), 0, 1, 8, 8)
        with pytest.raises(ValueError):
            data.make_binary_task(np.zeros((10, 4, 4)), np.zeros(10), 0, 1, 2, 2)

    def test_mnist_fallback_split(self):
        ds = data.mnist_binary_task()
        assert ds.x_train.shape[1] == 64
        assert ds.n_train + len(ds.y_test) <= 1000 or ds.manifest["source"].startswith("idx")


class TestLabelNoise:
    def setup_method(self):
        rng = np.random.default_rng(0)
        y = (rng.random(1000) > 0.5).astype(float)
        self.ds = data.Dataset(rng.normal(size=(1000, 2)), y, rng.normal(size=(10, 2)), np.ones(10))

    def test_zero_rate(self):
        np.testing.assert_array_equal(data.add_label_noise(self.ds, 0.0).y_train, self.ds.y_train)

    def test_full_rate(self):
        np.testing.assert_array_equal(data.add_label_noise(self.ds, 1.0).y_train, 1 - self.ds.y_train)

    def test_exact_count_and_determinism(self):
        a = data.add_label_noise(self.ds, 0.2, seed=4)
        b = data.add_label_noise(self.ds, 0.2, seed=4)
        assert int(np.sum(a.y_train != self.ds.y_train)) == 200
        np.testing.assert_array_equal(a.y_train, b.y_train)
        np.testing.assert_array_equal(a.y_test, self.ds.y_test)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 1), st.integers(1, 300))
    def test_floor_count(self, rate, n):
        ds = data.Dataset(np.zeros((n, 1)), np.zeros(n), np.zeros((0, 1)), np.zeros(0))
        assert int(data.add_label_noise(ds, rate).y_train.sum()) == math.floor(rate * n + 1e-9)

    def test_rate_out_of_range(self):
        with pytest.raises(ValueError):
            data.add_label_noise(self.ds, 1.5)


class TestPolynomial:
    def test_target_examples(self):
        beta = np.eye(5)[0]
        assert data.polynomial_target(np.array([2.0, 0, 0, 0, 0]), beta) == 2.0
        assert data.polynomial_target(np.zeros(5), beta) == 0.0

    def test_defaults(self):
        ds, beta = data.polynomial_task()
        assert ds.x_train.shape == (550, 100) and ds.x_test.shape == (500, 100)
        assert np.linalg.norm(beta) == pytest.approx(1.0)
        np.testing.assert_allclose(ds.y_train, 0.5 * (ds.x_train @ beta) ** 2)

    def test_input_variance(self):
        d, n = 10, 100_000
        ds, _ = data.polynomial_task(d=d, n_train=n, n_test=0, seed=3)
        var = ds.x_train.var(axis=0)
        # standard error of a Gaussian sample variance is sigma^2 sqrt(2/(n-1))
        se = (1 / d) * np.sqrt(2 / (n - 1))
        assert np.all(np.abs(var - 1 / d) < 3 * se * 1.5)

    def test_bad_dimension(self):
        with pytest.raises(ValueError):
            data.polynomial_task(d=0)


class TestIrregularity:
    def test_one_dimensional(self):
        assert data.pca_irregularity_rank(np.array([0.0, 0.0, 10.0]))[0] == 2

    def test_degenerate(self):
        with pytest.raises(ValueError):
            data.pca_irregularity_rank(np.ones((5, 3)))
        with pytest.raises(ValueError):
            data.pca_irregularity_rank(np.ones((1, 3)))

    def test_brute_force_top(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(200, 2)) @ np.array([[3.0, 1.0], [0.0, 0.5]])
        Xc = X - X.mean(axis=0)
        # power iteration for the leading direction, independent of eigh
        v = np.ones(2)
        for _ in range(500):
            v = Xc.T @ (Xc @ v)
            v /= np.linalg.norm(v)
        s = Xc @ v
        dev = np.abs(s - np.median(s))
        assert data.pca_irregularity_rank(X)[0] == int(np.argmax(dev))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(31, 3)) * np.array([3.0, 1.0, 0.3])
        perm = rng.permutation(31)
        base = data.pca_irregularity_rank(X)
        permuted = data.pca_irregularity_rank(X[perm])
        # odd n: the two middle rows never tie around the median
        np.testing.assert_array_equal(perm[permuted], base)

    def test_split_fraction(self):
        X = np.random.default_rng(0).normal(size=(100, 3))
        reg, irr = data.split_irregular(X, 0.1)
        assert len(irr) == 10 and len(reg) == 90 and not set(reg) & set(irr)


class TestMixture:
    def test_counts(self):
        reg, irr = np.arange(5000), np.arange(5000, 6500)
        for p, k in [(0.0, 0), (1.0, 1500), (0.25, 1000)]:
            size = 1500 if p == 1.0 else 4000
            idx = data.build_mixture_testset(reg, irr, p, size, seed=1)
            assert len(idx) == size and int(np.sum(idx >= 5000)) == k

    def test_insufficient_pool(self):
        with pytest.raises(ValueError):
            data.build_mixture_testset(np.arange(10), np.arange(10, 12), 0.5, 10)

    def test_deterministic(self):
        a = data.build_mixture_testset(np.arange(100), np.arange(100, 150), 0.3, 60, seed=5)
        b = data.build_mixture_testset(np.arange(100), np.arange(100, 150), 0.3, 60, seed=5)
        np.testing.assert_array_equal(a, b)


class TestCsv:
    def write(self, path, rows, header=("a", "b", "y")):
        path.write_text(",".join(header) + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")

    def test_identity(self, tmp_path):
        self.write(tmp_path / "t.csv", [(1, 2, 3), (4, 5, 6), (7, 8, 9)])
        x, y, _ = data.load_csv_tabular(tmp_path / "t.csv", "y", standardize_features=False, rescale_target=False)
        np.testing.assert_array_equal(x, [[1, 2], [4, 5], [7, 8]])
        np.testing.assert_array_equal(y, [3, 6, 9])

    def test_log(self, tmp_path):
        e = math.e
        self.write(tmp_path / "t.csv", [(1, 0, 1), (e, 0, 2), (e * e, 0, 3)])
        x, _, m = data.load_csv_tabular(tmp_path / "t.csv", "y", {"a": "log"}, standardize_features=False)
        np.testing.assert_allclose(x[:, 0], [0, 1, 2], atol=1e-15)
        assert m["transforms"] == {"a": "log"}

    def test_standardized(self, tmp_path):
        rng = np.random.default_rng(0)
        self.write(tmp_path / "t.csv", rng.lognormal(size=(50, 3)).tolist())
        x, y, _ = data.load_csv_tabular(tmp_path / "t.csv", "y", {"b": "log1p"})
        assert np.all(np.abs(x.mean(axis=0)) <= 1e-12)
        np.testing.assert_allclose(x.var(axis=0), 1.0, atol=1e-9)
        assert abs(y.mean()) <= 1e-12

    def test_errors(self, tmp_path):
        self.write(tmp_path / "t.csv", [(1, "x", 3)])
        with pytest.raises(ValueError):
            data.load_csv_tabular(tmp_path / "t.csv", "y")
        self.write(tmp_path / "u.csv", [(1, 2, 3)])
        with pytest.raises(ValueError):
            data.load_csv_tabular(tmp_path / "u.csv", "target")


class TestSynthetic:
    def test_mnist1d_shape_and_determinism(self):
        a = data.mnist1d_task(100, 50, seed=3)
        b = data.mnist1d_task(100, 50, seed=3)
        assert a.x_train.shape == (100, 40)
        np.testing.assert_array_equal(a.x_train, b.x_train)
        assert set(np.unique(a.y_train)) == {0.0, 1.0}

    def test_heavy_tailed(self):
        x, y = data.heavy_tailed_regression(2000, seed=1)
        assert x.shape == (2000, 8) and np.all(np.isfinite(y))
        # heavier than Gaussian tails in at least one feature
        z = (x - x.mean(0)) / x.std(0)
        assert np.max((z**4).mean(axis=0)) > 5

    def test_dataset_rejects_nan(self):
        with pytest.raises(ValueError):
            data.Dataset(np.array([[np.nan]]), np.zeros(1), np.zeros((0, 1)), np.zeros(0))
