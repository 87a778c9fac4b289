import numpy as np
import pytest

from dpmae import data


class TestGenerate:
    def test_rerun_is_byte_identical(self, tmp_path):
        m1 = data.generate_synthetic(2, 16, master_seed=7, out_dir=tmp_path / "a")
        m2 = data.generate_synthetic(2, 16, master_seed=7, out_dir=tmp_path / "b")
        for i in range(2):
            assert m1.image_path(i).read_bytes() == m2.image_path(i).read_bytes()
        assert m1.digest == m2.digest

    def test_different_seeds_differ(self, tmp_path):
        m1 = data.generate_synthetic(2, 16, master_seed=7, out_dir=tmp_path / "a")
        m2 = data.generate_synthetic(2, 16, master_seed=8, out_dir=tmp_path / "b")
        assert m1.digest != m2.digest

    def test_pixels_in_unit_range(self, tmp_path):
        m = data.generate_synthetic(4, 16, master_seed=0, out_dir=tmp_path / "d")
        batch = data.fetch(m, range(4))
        assert batch.min() >= 0.0 and batch.max() <= 1.0

    def test_image_diversity(self, tmp_path):
        # mean pairwise correlation over 100 samples, frozen regression bound;
        # observed -0.0015 on the reference run
        m = data.generate_synthetic(100, 16, master_seed=1, out_dir=tmp_path / "d")
        flat = data.fetch(m, range(100)).reshape(100, -1)
        flat = flat - flat.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(flat, axis=1)
        corr = (flat @ flat.T) / np.outer(norms, norms)
        pairs = corr[np.triu_indices(100, k=1)]
        assert pairs.mean() < 0.5

    def test_labeled_generation(self, tmp_path):
        m = data.generate_synthetic(20, 16, master_seed=2, out_dir=tmp_path / "d",
                                    classes=10, role="eval")
        assert m.labels is not None
        assert np.array_equal(np.unique(m.labels), np.arange(10))
        reloaded = data.load_dataset(tmp_path / "d")
        assert np.array_equal(reloaded.labels, m.labels)

    def test_bad_args_rejected(self, tmp_path):
        with pytest.raises(data.DatasetError):
            data.generate_synthetic(0, 16, 0, tmp_path / "d")
        with pytest.raises(data.DatasetError):
            data.generate_synthetic(1, 0, 0, tmp_path / "d")


class TestLoadFetch:
    def test_roundtrip(self, tmp_path):
        gen = data.generate_synthetic(3, 16, master_seed=3, out_dir=tmp_path / "d")
        loaded = data.load_dataset(tmp_path / "d")
        assert (loaded.n, loaded.resolution, loaded.channels) == (3, 16, 3)
        assert loaded.digest == gen.digest
        assert loaded.role == "synthetic-pretrain"

    def test_empty_directory_is_error(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(data.DatasetError):
            data.load_dataset(tmp_path / "empty")

    def test_missing_image_named_in_error(self, tmp_path):
        m = data.generate_synthetic(3, 16, master_seed=4, out_dir=tmp_path / "d")
        m.image_path(1).rename(tmp_path / "d" / "img_00000099.ppm")
        with pytest.raises(data.DatasetError, match="img_00000001"):
            data.fetch(m, [1])

    def test_corrupt_image_named_in_error(self, tmp_path):
        m = data.generate_synthetic(2, 16, master_seed=5, out_dir=tmp_path / "d")
        m.image_path(0).write_bytes(b"P6\n16 16\n255\nshort")
        with pytest.raises(data.DatasetError, match="img_00000000"):
            data.fetch(m, [0])

    def test_duplicate_indices_fetch_identical_tensors(self, tmp_path):
        m = data.generate_synthetic(3, 16, master_seed=6, out_dir=tmp_path / "d")
        batch = data.fetch(m, [1, 1])
        assert np.array_equal(batch[0], batch[1])

    def test_digest_tracks_content(self, tmp_path):
        m = data.generate_synthetic(2, 16, master_seed=7, out_dir=tmp_path / "d")
        assert data.compute_digest(m) == m.digest
        raw = bytearray(m.image_path(0).read_bytes())
        raw[-1] ^= 0xFF
        m.image_path(0).write_bytes(bytes(raw))
        assert data.compute_digest(m) != m.digest

    def test_fetch_does_not_mutate_files(self, tmp_path):
        m = data.generate_synthetic(2, 16, master_seed=8, out_dir=tmp_path / "d")
        before = [m.image_path(i).read_bytes() for i in range(2)]
        data.fetch(m, [0, 1, 0])
        after = [m.image_path(i).read_bytes() for i in range(2)]
        assert before == after


class TestPoissonSample:
    def test_extremes(self):
        assert data.poisson_sample(10, 0.0, seed=0).size == 0
        assert np.array_equal(data.poisson_sample(10, 1.0, seed=0), np.arange(10))

    def test_deterministic(self):
        a = data.poisson_sample(1000, 0.1, seed=42)
        b = data.poisson_sample(1000, 0.1, seed=42)
        assert np.array_equal(a, b)
        c = data.poisson_sample(1000, 0.1, seed=43)
        assert not np.array_equal(a, c)

    def test_mean_batch_size(self):
        n, q, steps = 10_000, 0.1, 1000
        sizes = [data.poisson_sample(n, q, seed=s).size for s in range(steps)]
        expected = n * q
        sd = np.sqrt(n * q * (1 - q))
        assert abs(np.mean(sizes) - expected) < 3 * sd / np.sqrt(steps)

    def test_inclusion_independence_chi_square(self):
        # pairs of indices across seeded steps: observed joint inclusion
        # counts vs independence; chi-square should stay modest
        n, q, steps = 40, 0.3, 2000
        incl = np.zeros((steps, n), dtype=bool)
        for s in range(steps):
            incl[s, data.poisson_sample(n, q, seed=10_000 + s)] = True
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(30):
            i, j = rng.choice(n, size=2, replace=False)
            both = np.sum(incl[:, i] & incl[:, j])
            only_i = np.sum(incl[:, i] & ~incl[:, j])
            only_j = np.sum(~incl[:, i] & incl[:, j])
            neither = steps - both - only_i - only_j
            obs = np.array([[both, only_i], [only_j, neither]], dtype=float)
            row = obs.sum(axis=1, keepdims=True)
            col = obs.sum(axis=0, keepdims=True)
            exp = row * col / steps
            chi2 = ((obs - exp) ** 2 / exp).sum()
            worst = max(worst, chi2)
        # chi-square with 1 dof: P(X > 15) ~ 1e-4; 30 pairs
        assert worst < 15.0

    def test_invalid_q(self):
        with pytest.raises(ValueError):
            data.poisson_sample(10, 1.5, seed=0)
