import numpy as np
import pytest
from hypothesis import given, strategies as st

from promptpose.cloud import EmbeddedCloud
from promptpose.errors import NoObjectFoundError, ValidationError
from promptpose.relevancy import RelevancyField
from promptpose.segmentation import (ClusterLabeling, crop_region, dbscan_cluster, default_eps,
                                     model_diameter, object_centroid, parse_grid, segment,
                                     select_target_cluster, set_metrics, threshold_filter,
                                     threshold_sweep, write_sweep_csv)

from conftest import brute_force_dbscan, random_transform

CUBE_CORNERS = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)


def field(scores, method="lerf"):
    return RelevancyField(np.asarray(scores, dtype=float), method)


class TestThreshold:
    def test_basic(self):
        assert threshold_filter(field([0.2, 0.6, 0.9]), 0.5).tolist() == [1, 2]

    def test_minus_infinity_keeps_all(self):
        assert threshold_filter(field([0.2, 0.6, 0.9]), -np.inf).tolist() == [0, 1, 2]

    def test_above_max_is_empty(self):
        assert threshold_filter(field([0.2, 0.6, 0.9]), np.nextafter(0.9, 1)).size == 0

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_tau(self, scores, a, b):
        lo, hi = sorted((a, b))
        f = field(scores)
        assert threshold_filter(f, hi).size <= threshold_filter(f, lo).size


class TestDbscan:
    def test_two_separated_blobs(self, rng):
        eps = 0.1
        a = rng.normal(scale=0.02, size=(50, 3))
        b = a + [10 * eps + 0.5, 0, 0]
        c = EmbeddedCloud(np.vstack([a, b]))
        lab = dbscan_cluster(c, np.arange(100), eps, 5)
        assert lab.cluster_count == 2
        assert (lab.labels >= 0).all()
        ref, count = brute_force_dbscan(c.points, eps, 5)
        assert count == 2 and np.array_equal(lab.labels, ref)

    def test_isolated_point_is_noise(self):
        lab = dbscan_cluster(EmbeddedCloud([[0, 0, 0.0]]), [0], 0.1, 2)
        assert lab.labels.tolist() == [-1] and lab.cluster_count == 0

    def test_identical_points_form_one_cluster(self):
        c = EmbeddedCloud(np.ones((7, 3)))
        lab = dbscan_cluster(c, np.arange(7), 1e-6, 7)
        assert lab.cluster_count == 1 and (lab.labels == 0).all()

    def test_closed_ball_counts_self(self):
        # two points exactly eps apart: each has 2 neighbors including itself
        c = EmbeddedCloud([[0, 0, 0], [0.5, 0, 0]])
        assert dbscan_cluster(c, [0, 1], 0.5, 2).labels.tolist() == [0, 0]
        assert dbscan_cluster(c, [0, 1], 0.5, 3).labels.tolist() == [-1, -1]

    def test_border_point_joins_nearest_core(self):
        # point 2 borders two cores from different clusters and is closer to the right one
        pts = [[-1.0, 0, 0], [-1.1, 0, 0], [-1.2, 0, 0], [0, 0, 0], [0.9, 0, 0], [1.0, 0, 0], [1.1, 0, 0]]
        c = EmbeddedCloud(pts)
        lab = dbscan_cluster(c, np.arange(7), 1.0, 3)
        ref, _ = brute_force_dbscan(np.asarray(pts), 1.0, 3)
        assert np.array_equal(lab.labels, ref)
        assert lab.labels[3] == lab.labels[4]

    def test_matches_reference_on_random_scenes(self, rng):
        for _ in range(25):
            n = int(rng.integers(1, 200))
            pts = rng.uniform(0, 1, size=(n, 3))
            eps = float(rng.uniform(0.03, 0.2))
            min_pts = int(rng.integers(1, 8))
            lab = dbscan_cluster(EmbeddedCloud(pts), np.arange(n), eps, min_pts)
            ref, count = brute_force_dbscan(pts, eps, min_pts)
            assert lab.cluster_count == count
            assert np.array_equal(lab.labels, ref)

    def test_points_within_eps_of_a_core(self, rng):
        pts = rng.uniform(0, 1, size=(300, 3))
        eps, min_pts = 0.12, 5
        lab = dbscan_cluster(EmbeddedCloud(pts), np.arange(300), eps, min_pts)
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        core = (d <= eps).sum(axis=1) >= min_pts
        for i in np.flatnonzero(lab.labels >= 0):
            same = core & (lab.labels == lab.labels[i])
            assert (d[i, same] <= eps).any()

    def test_order_invariance(self, rng):
        pts = rng.uniform(0, 1, size=(150, 3))
        base = dbscan_cluster(EmbeddedCloud(pts), np.arange(150), 0.15, 4)
        perm = rng.permutation(150)
        moved = dbscan_cluster(EmbeddedCloud(pts[perm]), np.arange(150), 0.15, 4)
        # same partition once both are expressed per original point
        a = base.labels
        b = np.empty(150, dtype=int)
        b[perm] = moved.labels
        assert np.array_equal(a == -1, b == -1)
        for cid in range(base.cluster_count):
            assert len(set(b[a == cid])) == 1

    def test_subset_labels_align_with_sorted_indices(self):
        c = EmbeddedCloud([[0, 0, 0], [5, 5, 5], [0.01, 0, 0]])
        lab = dbscan_cluster(c, [2, 0], 0.1, 2)
        assert lab.indices.tolist() == [0, 2] and lab.labels.tolist() == [0, 0]

    def test_invalid_arguments(self):
        c = EmbeddedCloud(np.zeros((2, 3)))
        with pytest.raises(ValidationError):
            dbscan_cluster(c, [], 0.1, 2)
        with pytest.raises(ValidationError):
            dbscan_cluster(c, [0], 0.0, 2)

    def test_default_eps_keeps_surface_points_core(self, rng):
        v = rng.normal(size=(2000, 3))
        pts = 0.1 * v / np.linalg.norm(v, axis=1, keepdims=True)
        eps = default_eps(pts, 10)
        lab = dbscan_cluster(EmbeddedCloud(pts), np.arange(2000), eps, 10)
        assert lab.cluster_count == 1 and (lab.labels == 0).mean() > 0.99


class TestSelection:
    def lab(self, labels):
        labels = np.asarray(labels)
        return ClusterLabeling(np.arange(len(labels)), labels, int(labels.max()) + 1, 0.1, 2)

    def test_largest(self):
        lab = self.lab([0] * 10 + [1] * 40)
        assert select_target_cluster(lab, field(np.zeros(50)), "largest") == 1

    def test_highest_mean(self):
        lab = self.lab([0] * 5 + [1] * 5)
        assert select_target_cluster(lab, field([0.6] * 5 + [0.9] * 5), "highest-mean") == 1

    def test_tie_goes_to_lower_id(self):
        lab = self.lab([0] * 5 + [1] * 5)
        f = field(np.full(10, 0.7))
        assert select_target_cluster(lab, f, "highest-mean") == 0
        assert select_target_cluster(lab, f, "largest") == 0

    def test_no_cluster(self):
        lab = ClusterLabeling(np.arange(2), np.array([-1, -1]), 0, 0.1, 2)
        with pytest.raises(NoObjectFoundError):
            select_target_cluster(lab, field([0.5, 0.5]))


class TestCentroidAndCrop:
    def test_cube_corners(self):
        assert np.allclose(object_centroid(EmbeddedCloud(CUBE_CORNERS), np.arange(8)), 0.5)

    def test_single_point(self):
        assert object_centroid(EmbeddedCloud([[1.0, 2, 3]]), [0]).tolist() == [1, 2, 3]

    def test_equivariance(self, rng):
        pts = rng.normal(size=(40, 3))
        T = random_transform(rng)
        a = T.apply(object_centroid(EmbeddedCloud(pts), np.arange(40))[None])[0]
        b = object_centroid(EmbeddedCloud(T.apply(pts)), np.arange(40))
        assert np.abs(a - b).max() < 1e-9

    def test_crop_all_and_none(self, rng):
        c = EmbeddedCloud(rng.normal(size=(30, 3)))
        cen = c.points.mean(axis=0)
        assert crop_region(c, cen, model_diameter(c.points)).size == 30
        nearest = np.linalg.norm(c.points - cen, axis=1).min()
        assert crop_region(c, cen, 0.5 * nearest).size == 0

    def test_crop_cube_corners(self):
        assert crop_region(EmbeddedCloud(CUBE_CORNERS), [0.5, 0.5, 0.5], 0.87).size == 8

    def test_diameter_of_bounding_sphere(self):
        assert model_diameter(CUBE_CORNERS) == pytest.approx(np.sqrt(3))


class TestSegmentAndSweep:
    def scene(self, rng):
        target = rng.normal(scale=0.02, size=(80, 3))
        other = rng.normal(scale=0.02, size=(80, 3)) + [1, 0, 0]
        clutter = rng.uniform(-2, 2, size=(40, 3))
        pts = np.vstack([target, other, clutter])
        labels = np.r_[np.zeros(80, int), np.ones(80, int), -np.ones(40, int)]
        return EmbeddedCloud(pts, labels=labels)

    def test_segment_picks_target(self, rng):
        c = self.scene(rng)
        scores = np.where(c.labels == 0, 1.0, 0.0)
        res = segment(c, field(scores), 0.5)
        assert np.array_equal(res.selected_indices, np.arange(80))
        assert np.allclose(res.centroid, c.points[:80].mean(axis=0))

    def test_segment_nothing_passes(self, rng):
        c = self.scene(rng)
        with pytest.raises(NoObjectFoundError):
            segment(c, field(np.zeros(len(c))), 0.5)

    def test_separable_sweep(self, rng):
        c = self.scene(rng)
        scores = np.where(c.labels == 0, 1.0, 0.0)
        rows = threshold_sweep(c, field(scores), [0.5, 1.5], None, 10, 0)
        assert (rows[0].precision, rows[0].recall, rows[0].iou) == (1.0, 1.0, 1.0)
        assert rows[1] == type(rows[1])(1.5, 0.0, 0.0, 0.0, 0, 0)

    def test_selected_size_non_increasing(self, rng):
        c = self.scene(rng)
        rows = threshold_sweep(c, field(rng.uniform(size=len(c))), parse_grid("0:1:0.05"), 0.3, 3, 0)
        sizes = [r.selected_size for r in rows]
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))

    def test_sweep_csv(self, rng, tmp_path):
        c = self.scene(rng)
        rows = threshold_sweep(c, field(np.where(c.labels == 0, 1.0, 0.0)), [0.25, 0.5], None, 10, 0)
        write_sweep_csv(rows, tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "tau,precision,recall,iou,cluster_count,selected_size"
        assert lines[1] == "0.25,1,1,1,1,80"

    def test_parse_grid(self):
        assert parse_grid("0:1:0.25") == [0.0, 0.25, 0.5, 0.75, 1.0]
        assert len(parse_grid("0:1:0.1")) == 11
        with pytest.raises(ValidationError):
            parse_grid("1:0:0.1")
        with pytest.raises(ValidationError):
            parse_grid("a:b")


class TestSetMetrics:
    def test_identical(self):
        assert set_metrics([1, 2, 3], [1, 2, 3]) == (1.0, 1.0, 1.0)

    def test_disjoint(self):
        assert set_metrics([1], [2]) == (0.0, 0.0, 0.0)

    def test_hand_arithmetic(self):
        assert set_metrics(np.arange(100), np.arange(50)) == (0.5, 1.0, 0.5)

    def test_empty_ground_truth(self):
        with pytest.raises(ValidationError):
            set_metrics([1], [])

    @given(st.sets(st.integers(0, 30), min_size=1), st.sets(st.integers(0, 30), min_size=1))
    def test_iou_bounded_by_precision_and_recall(self, sel, gt):
        p, r, iou = set_metrics(sorted(sel), sorted(gt))
        assert iou <= min(p, r) + 1e-15
