import numpy as np
import pytest

from pvdiff import autodiff as ad
from pvdiff.autodiff import ShapeError, Tensor
from pvdiff.pointcloud import (GroupEncoder, PointCloud, encode_groups, fps,
                               knn_group, normalize_cloud)


def brute_fps(pts: np.ndarray, m: int) -> np.ndarray:
    """Independent greedy oracle: recompute all distances from scratch each
    round instead of keeping a running minimum."""
    pts = np.asarray(pts, dtype=np.float64)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    centroid = pts.mean(axis=0)
    sel = [int(np.argmax(((pts - centroid) ** 2).sum(axis=-1)))]
    for _ in range(m - 1):
        to_sel = d2[:, sel].min(axis=1)
        sel.append(int(np.argmax(to_sel)))
    return np.array(sel, dtype=np.int64)


def brute_knn(pts: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Exhaustive search sorted by (squared distance, index)."""
    pts = np.asarray(pts, dtype=np.float64)
    out = []
    for ci in centers:
        d2 = ((pts - pts[ci]) ** 2).sum(axis=-1)
        order = np.lexsort((np.arange(len(pts)), d2))
        out.append(order[:k])
    return np.asarray(out, dtype=np.int64)


def random_cloud(rng, n):
    return rng.normal(0.0, 1.0, size=(n, 3))


class TestFps:
    def test_m_equals_n_is_exhaustive(self):
        rng = np.random.default_rng(0)
        pts = random_cloud(rng, 12)
        idx = fps(pts, 12)
        assert sorted(idx.tolist()) == list(range(12))
        assert np.array_equal(idx, brute_fps(pts, 12))

    def test_three_collinear_points(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [10.0, 0, 0]])
        # centroid ~3.67: the farthest point is 10, then 0 maximizes min-distance
        assert fps(pts, 2).tolist() == [2, 0]

    def test_paper_scale_shape(self):
        rng = np.random.default_rng(1)
        pts = rng.random((4096, 3))
        idx = fps(pts, 256)
        assert len(idx) == 256
        assert len(set(idx.tolist())) == 256

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            n = int(rng.integers(2, 65))
            pts = random_cloud(rng, n)
            m = int(rng.integers(1, n + 1))
            assert np.array_equal(fps(pts, m), brute_fps(pts, m))

    def test_translation_and_scale_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pts = random_cloud(rng, 40)
            base = fps(pts, 10)
            shift = rng.normal(0.0, 5.0, size=3)
            scale = float(rng.uniform(0.1, 20.0))
            assert np.array_equal(base, fps(pts + shift, 10))
            assert np.array_equal(base, fps(pts * scale, 10))

    def test_errors(self):
        pts = np.zeros((4, 3))
        with pytest.raises(ValueError):
            fps(pts, 0)
        with pytest.raises(ValueError):
            fps(pts, 5)


class TestKnn:
    def test_k1_is_self(self):
        rng = np.random.default_rng(4)
        pts = random_cloud(rng, 20)
        centers = np.array([0, 7, 19])
        g = knn_group(pts, centers, 1)
        assert np.array_equal(g.groups, np.zeros((3, 1, 3)))
        assert np.array_equal(g.centers, pts[centers])

    def test_collinear_middle_center(self):
        pts = np.array([[float(i), 0, 0] for i in range(5)])
        g = knn_group(pts, np.array([2]), 3)
        # middle point plus its two neighbors, matching the exhaustive oracle
        oracle = brute_knn(pts, np.array([2]), 3)
        rebuilt = g.groups[0] + g.centers[0]
        assert np.array_equal(np.sort(oracle[0]), np.array([1, 2, 3]))
        assert np.array_equal(rebuilt, pts[oracle[0]])

    def test_paper_scale_shape(self):
        rng = np.random.default_rng(5)
        pts = rng.random((4096, 3))
        centers = fps(pts, 256)
        g = knn_group(pts, centers, 32)
        assert g.groups.shape == (256, 32, 3)

    def test_matches_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            n = int(rng.integers(2, 257))
            pts = random_cloud(rng, n)
            m = int(rng.integers(1, min(n, 16) + 1))
            k = int(rng.integers(1, n + 1))
            centers = rng.choice(n, size=m, replace=False)
            g = knn_group(pts, centers, k)
            oracle = brute_knn(pts, centers, k)
            assert np.array_equal(g.groups, pts[oracle] - g.centers[:, None, :])

    def test_relative_coordinates_recover_exactly(self):
        rng = np.random.default_rng(7)
        pts = rng.random((100, 3)).astype(np.float32)
        centers = fps(pts, 10)
        g = knn_group(pts, centers, 5)
        rebuilt = g.groups + g.centers[:, None, :]
        oracle = brute_knn(np.asarray(pts, dtype=np.float64), centers, 5)
        assert np.array_equal(rebuilt, np.asarray(pts, dtype=np.float64)[oracle])

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            knn_group(np.zeros((3, 3)), np.array([0]), 4)


class TestGroupEncoder:
    def test_within_group_permutation_invariance(self):
        rng = np.random.default_rng(8)
        enc = GroupEncoder(hidden=16, dim=8, rng=rng)
        groups = rng.normal(size=(6, 10, 3))
        base = enc(groups).data
        for _ in range(5):
            perm = rng.permutation(10)
            assert np.array_equal(base, enc(groups[:, perm]).data)

    def test_group_order_maps_to_row_order(self):
        rng = np.random.default_rng(9)
        enc = GroupEncoder(hidden=16, dim=8, rng=rng)
        groups = rng.normal(size=(6, 10, 3))
        base = enc(groups).data
        perm = rng.permutation(6)
        assert np.array_equal(base[perm], enc(groups[perm]).data)

    def test_duplicate_points_idempotent(self):
        rng = np.random.default_rng(10)
        enc = GroupEncoder(hidden=16, dim=8, rng=rng)
        pair = rng.normal(size=(1, 2, 3))
        duplicated = pair[:, [0, 1, 1, 0, 1]]
        assert np.array_equal(enc(pair).data, enc(duplicated).data)

    def test_hand_oracle_hidden_two(self):
        rng = np.random.default_rng(11)
        enc = GroupEncoder(hidden=2, dim=3, rng=rng)
        w1 = enc.mlp.layers[0].weight.data
        b1 = enc.mlp.layers[0].bias.data
        w2 = enc.mlp.layers[1].weight.data
        b2 = enc.mlp.layers[1].bias.data
        group = rng.normal(size=(1, 2, 3)).astype(np.float32)

        def gelu(x):
            return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))

        rows = gelu(group[0] @ w1 + b1) @ w2 + b2
        expected = np.maximum(rows[0], rows[1])
        assert np.allclose(enc(group).data[0], expected, atol=1e-6)

    def test_width_mismatch(self):
        rng = np.random.default_rng(12)
        enc = GroupEncoder(hidden=4, dim=2, rng=rng)
        with pytest.raises(ShapeError):
            enc(rng.normal(size=(2, 5, 4)))  # points must be 3-wide

    def test_gradients_flow(self):
        rng = np.random.default_rng(13)
        enc = GroupEncoder(hidden=4, dim=2, rng=rng)
        groups = rng.normal(size=(3, 4, 3))
        with ad.GradientTape() as tape:
            loss = ad.sum_(ad.mul(enc(groups), 2.0))
            tape.backward(loss, params=enc.parameters())
        assert all(p.grad is not None for p in enc.parameters())


class TestNormalizeCloud:
    def test_already_normalized_unchanged(self):
        rng = np.random.default_rng(14)
        cloud, _ = normalize_cloud(random_cloud(rng, 30))
        again, _ = normalize_cloud(cloud)
        assert np.allclose(cloud.points, again.points, atol=1e-6)

    def test_translation_removed(self):
        rng = np.random.default_rng(15)
        pts = random_cloud(rng, 30)
        a, _ = normalize_cloud(pts)
        b, _ = normalize_cloud(pts + np.array([5.0, 5.0, 5.0]))
        assert np.allclose(a.points, b.points, atol=1e-9)

    def test_round_trip(self):
        rng = np.random.default_rng(16)
        pts = random_cloud(rng, 50) * 3.0 + 1.0
        normed, tf = normalize_cloud(pts)
        assert np.allclose(tf.invert(normed.points), pts, atol=1e-5)
        assert np.allclose(tf.apply(pts), normed.points, atol=1e-12)

    def test_single_point_degenerate(self):
        cloud, tf = normalize_cloud(np.array([[2.0, 3.0, 4.0]]))
        assert np.allclose(cloud.points, np.zeros((1, 3)))
        assert tf.scale == 1.0

    def test_max_radius_is_one(self):
        rng = np.random.default_rng(17)
        normed, _ = normalize_cloud(random_cloud(rng, 40))
        radii = np.linalg.norm(normed.points, axis=1)
        assert abs(radii.max() - 1.0) < 1e-12

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            normalize_cloud(np.array([[np.nan, 0.0, 0.0]]))


def test_full_tokenizer_shape_contract():
    rng = np.random.default_rng(18)
    pts = rng.random((4096, 3))
    centers = fps(pts, 256)
    groups = knn_group(pts, centers, 32)
    enc = GroupEncoder(hidden=8, dim=32, rng=rng)
    tokens = encode_groups(groups, enc)
    assert tokens.shape == (256, 32)
    assert np.isfinite(tokens.data).all()
