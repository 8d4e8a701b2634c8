import itertools
import math

import numpy as np
import pytest

from gazekit import clustering
from gazekit.clustering import ClusterModel, cluster_stats, fit_kmeans, js_divergence, lloyd_once
from gazekit.geometry import angles_to_vec, normalize
from gazekit.rngs import stream


def brute_force_objective(vecs, k):
    """Global optimum over all k^n assignments; centroid of a group is the
    normalized mean (the minimizer of total cosine distance)."""
    n = len(vecs)
    best = math.inf
    for assignment in itertools.product(range(k), repeat=n):
        total = 0.0
        for j in range(k):
            members = vecs[[i for i in range(n) if assignment[i] == j]]
            if len(members) == 0:
                continue
            mean = members.sum(axis=0)
            norm = np.linalg.norm(mean)
            if norm == 0:
                total += len(members)  # all-cancelling group: distance 1 each
                continue
            total += float(np.sum(1.0 - members @ (mean / norm)))
        best = min(best, total)
    return best


def random_poses(n, seed, pitch=0.9, yaw=2.5):
    rng = np.random.default_rng(seed)
    return np.stack(
        [rng.uniform(-pitch, pitch, n), rng.uniform(-yaw, yaw, n)], axis=1
    )


class TestFitKmeans:
    def test_k1_is_normalized_mean(self):
        poses = random_poses(40, seed=0)
        model = fit_kmeans(poses, 1, seed=1)
        expected = normalize(angles_to_vec(poses).mean(axis=0))
        np.testing.assert_allclose(model.centroids[0], expected, atol=1e-9)
        assert np.all(model.assign(poses) == 0)

    def test_symmetric_two_cluster_case(self):
        yaw = math.radians(60)
        poses = np.array([[0.0, -yaw]] * 5 + [[0.0, yaw]] * 5)
        model = fit_kmeans(poses, 2, seed=2)
        ids = model.assign(poses)
        assert len(set(ids[:5])) == 1 and len(set(ids[5:])) == 1
        assert ids[0] != ids[5]
        got = sorted(np.degrees(model.centroid_angles())[:, 1])
        np.testing.assert_allclose(got, [-60, 60], atol=1e-6)

    @pytest.mark.parametrize("seed", [3, 4, 5, 6])
    def test_matches_brute_force_on_8_points(self, seed):
        poses = random_poses(8, seed=seed)
        model = fit_kmeans(poses, 3, n_restarts=20, seed=seed)
        got = model.objective(poses)
        want = brute_force_objective(angles_to_vec(poses), 3)
        assert got == pytest.approx(want, abs=1e-9)

    def test_k2_brute_force(self):
        poses = random_poses(7, seed=8)
        model = fit_kmeans(poses, 2, n_restarts=20, seed=8)
        want = brute_force_objective(angles_to_vec(poses), 2)
        assert model.objective(poses) == pytest.approx(want, abs=1e-9)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            fit_kmeans(np.zeros((0, 2)), 1)

    def test_k_exceeding_distinct_poses_rejected(self):
        poses = np.array([[0.1, 0.2]] * 5 + [[0.3, -0.1]] * 5)
        with pytest.raises(ValueError):
            fit_kmeans(poses, 3)
        fit_kmeans(poses, 2)  # exactly the distinct count is fine

    def test_k_equals_n_gives_zero_objective(self):
        poses = random_poses(6, seed=9)
        model = fit_kmeans(poses, 6, n_restarts=5, seed=9)
        assert model.objective(poses) == pytest.approx(0.0, abs=1e-12)

    def test_deterministic_given_seed(self):
        poses = random_poses(50, seed=10)
        a = fit_kmeans(poses, 4, seed=11)
        b = fit_kmeans(poses, 4, seed=11)
        assert np.array_equal(a.centroids, b.centroids)

    def test_objective_monotone_within_restarts(self):
        for trial in range(100):
            poses = random_poses(30, seed=100 + trial)
            vecs = angles_to_vec(poses)
            _, _, _, history = lloyd_once(vecs, 4, 100, stream(trial, 0xAA))
            diffs = np.diff(history)
            assert np.all(diffs <= 1e-12), f"trial {trial}: {history}"

    def test_assign_consistent_with_fit(self):
        poses = random_poses(200, seed=12)
        model = fit_kmeans(poses, 5, seed=13)
        ids = model.assign(poses)
        # one more Lloyd pass from the fitted centroids changes nothing
        again = model.assign(poses)
        assert np.array_equal(ids, again)
        centroids = np.array(
            [normalize(angles_to_vec(poses[ids == j]).sum(axis=0)) for j in range(5)]
        )
        np.testing.assert_allclose(centroids, model.centroids, atol=1e-9)


class TestAssign:
    def test_pose_at_centroid(self):
        model = ClusterModel.from_angles([[0.0, -0.5], [0.0, 0.0], [0.0, 0.5]])
        for i, pose in enumerate([[0.0, -0.5], [0.0, 0.0], [0.0, 0.5]]):
            assert model.assign(np.array(pose)) == i

    def test_tie_breaks_to_lowest_index(self):
        model = ClusterModel.from_angles([[0.0, -0.3], [0.0, 0.3]])
        assert model.assign(np.array([0.0, 0.0])) == 0

    def test_matches_linear_scan_oracle(self):
        model = ClusterModel.from_angles(
            [[0.1, -1.0], [0.0, -0.3], [-0.2, 0.1], [0.3, 0.8], [0.0, 1.4]]
        )
        rng = np.random.default_rng(14)
        for _ in range(200):
            pose = np.array([rng.uniform(-1.2, 1.2), rng.uniform(-3.0, 3.0)])
            v = angles_to_vec(pose)
            dists = [1.0 - float(v @ c) for c in model.centroids]
            assert model.assign(pose) == int(np.argmin(dists))

    def test_direction_only(self):
        # assignment is purely directional: equal vectors, equal ids
        model = ClusterModel.from_angles([[0.0, -0.4], [0.0, 0.4]])
        a = model.assign(np.array([0.2, 0.3]))
        b = model.assign(np.array([0.2, 0.3]))
        assert a == b


class TestClusterModelIO:
    def test_json_round_trip(self):
        model = ClusterModel.from_angles([[0.1, -0.5], [0.0, 0.5]])
        again = ClusterModel.from_json(model.to_json())
        assert np.array_equal(model.centroids, again.centroids)

    def test_invalid_centroids_rejected(self):
        with pytest.raises(ValueError):
            ClusterModel(centroids=np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))
        with pytest.raises(ValueError):
            ClusterModel(centroids=np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]]))

    def test_fixed_centroid_injection_echoes(self):
        pairs = np.radians([[0.0, -30.0], [0.0, -15.0], [0.0, 0.0], [0.0, 15.0], [0.0, 30.0]])
        model = ClusterModel.from_angles(pairs)
        np.testing.assert_allclose(model.centroid_angles(), pairs, atol=1e-12)


class TestClusterStats:
    def test_single_sample_cluster(self):
        model = ClusterModel.from_angles([[0.0, -0.8], [0.0, 0.8]])
        heads = np.array([[0.0, -0.8], [0.0, 0.9]])
        gazes = np.array([[0.1, -0.7], [0.0, 0.85]])
        stats = cluster_stats(model, heads, gazes)
        assert stats[0].count == 1
        np.testing.assert_allclose(
            stats[0].gaze_mean_deg, np.degrees([0.1, -0.7]), atol=1e-9
        )
        np.testing.assert_allclose(stats[0].gaze_cov_deg2, np.zeros((2, 2)))

    def test_empty_cluster_reported_null(self):
        model = ClusterModel.from_angles([[0.0, -0.8], [0.0, 0.8]])
        heads = np.array([[0.0, 0.7], [0.0, 0.9]])
        gazes = heads.copy()
        stats = cluster_stats(model, heads, gazes)
        assert stats[0].count == 0
        assert stats[0].gaze_mean_deg is None and stats[0].hist is None

    def test_all_zero_poses_mass_in_central_bin(self):
        model = ClusterModel.from_angles([[0.0, 0.0], [0.0, 1.0]])
        heads = np.zeros((10, 2))
        gazes = np.zeros((10, 2))
        stats = cluster_stats(model, heads, gazes)
        assert stats[0].count == 10 and stats[1].count == 0
        hist = stats[0].hist
        # 2-degree bins over [-90, 90]: (0, 0) falls in bin 45 of each axis
        assert hist[45, 45] == 10 and hist.sum() == 10

    def test_csv_has_row_per_cluster(self):
        model = ClusterModel.from_angles([[0.0, -0.8], [0.0, 0.8]])
        heads = np.array([[0.0, -0.8], [0.0, 0.9], [0.1, 0.7]])
        gazes = heads.copy()
        csv_text = clustering.stats_to_csv(cluster_stats(model, heads, gazes))
        lines = csv_text.strip().splitlines()
        assert len(lines) == 3  # header + 2 clusters


class TestJSDivergence:
    def test_identical_histograms_zero(self):
        h = np.array([1.0, 2.0, 3.0, 0.0])
        assert js_divergence(h, h) == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_histograms_ln2(self):
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 1.0])
        assert js_divergence(a, b) == pytest.approx(math.log(2), abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(15)
        a, b = rng.random(50), rng.random(50)
        assert js_divergence(a, b) == pytest.approx(js_divergence(b, a), abs=1e-12)
