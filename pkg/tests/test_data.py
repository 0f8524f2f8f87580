import json
import struct

import numpy as np
import pytest

from fedclust.data import (
    IdxFormatError,
    PartitionSpec,
    load_idx,
    partition_heterogeneous,
    shard_purity,
    synth_gmm,
    write_shard_manifests,
)
from fedclust.metrics import nmi
from fedclust.numerics import kmeans


def write_idx_pair(tmp_path, images, labels, image_magic=0x803, label_magic=0x801):
    """images: uint8 array (n, rows, cols); labels: uint8 (n,)."""
    img_path = tmp_path / "images.idx"
    lab_path = tmp_path / "labels.idx"
    n, rows, cols = images.shape
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", image_magic, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with open(lab_path, "wb") as f:
        f.write(struct.pack(">II", label_magic, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())
    return img_path, lab_path


class TestLoadIdx:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
        labels = np.array([3, 1, 4, 1], dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, images, labels)
        ds = load_idx(img, lab)
        assert ds.n == 4 and ds.d == 784
        np.testing.assert_array_equal(ds.y, labels)
        np.testing.assert_allclose(ds.X[:, 2], images[2].ravel() / 255.0)
        assert ds.X.min() >= 0.0 and ds.X.max() <= 1.0

    def test_bad_magic(self, tmp_path):
        images = np.zeros((1, 2, 2), dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, images, [0], image_magic=0x1234)
        with pytest.raises(IdxFormatError, match="magic 0x00001234 at offset 0"):
            load_idx(img, lab)

    def test_truncated(self, tmp_path):
        images = np.zeros((2, 3, 3), dtype=np.uint8)
        img, lab = write_idx_pair(tmp_path, images, [0, 1])
        data = img.read_bytes()
        img.write_bytes(data[:-5])
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        a_dir.mkdir(), b_dir.mkdir()
        img, _ = write_idx_pair(a_dir, np.zeros((2, 3, 3), dtype=np.uint8), [0, 1])
        _, lab3 = write_idx_pair(b_dir, np.zeros((3, 3, 3), dtype=np.uint8), [0, 1, 2])
        with pytest.raises(IdxFormatError, match="count mismatch"):
            load_idx(img, lab3)


class TestSynthGmm:
    def test_zero_separation_uninformative(self):
        ds = synth_gmm(k_star=2, d=4, n_per_cluster=1000, separation=0.0, seed=0)
        labels = kmeans(ds.X.T, k=2, seed=0).labels
        assert nmi(labels, ds.y) < 0.05

    def test_well_separated_recovered(self):
        ds = synth_gmm(k_star=4, d=8, n_per_cluster=50, separation=20.0, seed=1)
        labels = kmeans(ds.X.T, k=4, seed=0).labels
        assert nmi(labels, ds.y) == 1.0

    def test_deterministic(self):
        a = synth_gmm(3, 5, 10, 2.0, seed=7)
        b = synth_gmm(3, 5, 10, 2.0, seed=7)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)

    def test_cluster_centers(self):
        ds = synth_gmm(k_star=3, d=6, n_per_cluster=4000, separation=5.0, seed=2)
        for c in range(3):
            mean = ds.X[:, ds.y == c].mean(axis=1)
            expected = np.zeros(6)
            expected[c] = 5.0
            assert np.abs(mean - expected).max() < 0.1


class TestPartition:
    def make_ds(self, k_star=4, n_per=200, seed=0):
        return synth_gmm(k_star=k_star, d=4, n_per_cluster=n_per, separation=3.0, seed=seed)

    def test_p_one_pure(self):
        ds = self.make_ds()
        shards = partition_heterogeneous(ds, PartitionSpec(m=4, p=1.0, s=100, seed=0))
        for shard in shards:
            assert shard_purity(ds, shard) == 1.0

    def test_p_zero_multinomial_bound(self):
        ds = self.make_ds()
        k = ds.k_star
        s = 500
        passed = total = 0
        for seed in range(20):
            shards = partition_heterogeneous(ds, PartitionSpec(m=k, p=0.0, s=s, seed=seed))
            for shard in shards:
                counts = np.bincount(ds.y[shard.indices], minlength=k)
                bound = 3 * np.sqrt(s * (1 / k) * (1 - 1 / k))
                for c in range(k):
                    total += 1
                    passed += abs(counts[c] - s / k) <= bound
        assert passed / total >= 0.95

    def test_half_p_exact_counts(self):
        ds = self.make_ds()
        shards = partition_heterogeneous(ds, PartitionSpec(m=4, p=0.5, s=100, seed=3))
        for shard in shards:
            assert len(shard.indices) == 100
            # dominant slice is stored first
            assert np.all(ds.y[shard.indices[:50]] == shard.client_id)

    def test_expected_dominant_fraction(self):
        ds = self.make_ds(n_per=500)
        k = ds.k_star
        p = 0.4
        fractions = []
        for seed in range(50):
            shards = partition_heterogeneous(ds, PartitionSpec(m=k, p=p, s=500, seed=seed))
            fractions.extend(shard_purity(ds, shard) for shard in shards)
        expected = p + (1 - p) / k
        assert abs(np.mean(fractions) - expected) < 0.03

    def test_m_must_match_k_star(self):
        ds = self.make_ds()
        with pytest.raises(ValueError, match="k_star"):
            partition_heterogeneous(ds, PartitionSpec(m=3, p=0.5, s=10, seed=0))

    def test_deterministic(self):
        ds = self.make_ds()
        spec = PartitionSpec(m=4, p=0.3, s=80, seed=9)
        a = partition_heterogeneous(ds, spec)
        b = partition_heterogeneous(ds, spec)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.indices, sb.indices)

    def test_empty_cluster_rejected(self):
        ds = self.make_ds()
        ds.y[ds.y == 2] = 1  # wipe out cluster 2
        with pytest.raises(ValueError, match="zero members"):
            partition_heterogeneous(ds, PartitionSpec(m=4, p=0.5, s=10, seed=0))

    def test_manifest_files(self, tmp_path):
        ds = self.make_ds()
        shards = partition_heterogeneous(ds, PartitionSpec(m=4, p=0.25, s=40, seed=5))
        paths = write_shard_manifests(shards, seed=5, out_dir=tmp_path)
        assert len(paths) == 4
        doc = json.loads(paths[1].read_text())
        assert doc["client_id"] == 1 and doc["p"] == 0.25 and doc["seed"] == 5
        assert doc["indices"] == [int(i) for i in shards[1].indices]
