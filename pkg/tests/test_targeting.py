import numpy as np
import pytest

from gazekit import dataio
from gazekit.train import (
    TargetingError,
    TargetingSpec,
    chi2_distance,
    target_dataset,
    targeting_keep_probs,
)


def pose_dataset(tmp_path, name, heads, seed=0):
    rng = np.random.default_rng(seed)
    samples, images = [], []
    for i, (hp, hy) in enumerate(heads):
        samples.append(
            dataio.Sample(
                id=f"{name}_{i:05d}", subject=f"s{i % 4}", side="L",
                head=(float(hp), float(hy)),
                gaze=(float(hp) * 0.5, float(hy) * 0.5),
                image="",
            )
        )
        images.append(rng.integers(0, 256, (6, 8), dtype=np.uint8))
    return dataio.write_dataset(samples, images, tmp_path / name)


class TestChi2:
    def test_identical_zero(self):
        h = np.array([3.0, 1.0, 6.0])
        assert chi2_distance(h, h) == 0.0

    def test_disjoint_maximal(self):
        assert chi2_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(2.0)

    def test_hand_value(self):
        # normalized: a = (0.5, 0.5), b = (1, 0) -> 0.25/1.5 + 0.25/0.5 = 2/3
        assert chi2_distance([1.0, 1.0], [2.0, 0.0]) == pytest.approx(2 / 3)


class TestKeepProbs:
    def test_target_equal_source_keeps_everything(self):
        rng = np.random.default_rng(0)
        feats = rng.uniform(-60, 60, (4000, 2))
        probs, _ = targeting_keep_probs(feats, feats.copy(), TargetingSpec())
        np.testing.assert_allclose(probs, 1.0)

    def test_max_keep_ratio_scales(self):
        rng = np.random.default_rng(1)
        feats = rng.uniform(-60, 60, (2000, 2))
        probs, _ = targeting_keep_probs(
            feats, feats.copy(), TargetingSpec(max_keep_ratio=0.25)
        )
        np.testing.assert_allclose(probs, 0.25)

    def test_zero_target_mass_means_zero_probability(self):
        rng = np.random.default_rng(2)
        source = rng.uniform(-60, 60, (5000, 2))
        target = rng.uniform(-15, 15, (5000, 2))
        probs, _ = targeting_keep_probs(source, target, TargetingSpec(bin_deg=5))
        outside = np.any(np.abs(source) > 20, axis=1)  # beyond bin-boundary width
        assert np.all(probs[outside] == 0.0)


class TestTargetDataset:
    def test_output_is_strict_subset(self, tmp_path):
        rng = np.random.default_rng(3)
        src = pose_dataset(tmp_path, "src", rng.uniform(-1.0, 1.0, (800, 2)))
        ref = pose_dataset(tmp_path, "ref", rng.normal(0, 0.2, (800, 2)).clip(-1, 1))
        out, info = target_dataset(src, TargetingSpec(), ref, seed=4, out_root=tmp_path / "out")
        src_ids = {s.id for s in src.samples}
        out_ids = {s.id for s in out.samples}
        assert out_ids < src_ids
        assert info["kept"] == len(out_ids)
        # value identity with the source for the kept samples
        src_by_id = {s.id: s for s in src.samples}
        for s in out.samples:
            assert s.head == src_by_id[s.id].head
            assert np.array_equal(out.load_image(s), src.load_image(src_by_id[s.id]))

    def test_uniform_to_narrow_excludes_outside(self, tmp_path):
        rng = np.random.default_rng(5)
        src = pose_dataset(tmp_path, "src", np.stack([
            rng.uniform(-np.radians(60), np.radians(60), 4000),
            rng.uniform(-np.radians(60), np.radians(60), 4000),
        ], axis=1))
        ref = pose_dataset(tmp_path, "ref", np.stack([
            rng.uniform(-np.radians(15), np.radians(15), 4000),
            rng.uniform(-np.radians(15), np.radians(15), 4000),
        ], axis=1))
        out, _ = target_dataset(src, TargetingSpec(bin_deg=5), ref, seed=6,
                                out_root=tmp_path / "out")
        heads_deg = np.degrees(out.heads())
        assert np.all(np.abs(heads_deg) <= 20)  # 15 + one bin width

    def test_chi2_reduction_uniform_to_gaussian(self, tmp_path):
        rng = np.random.default_rng(7)
        src = pose_dataset(tmp_path, "src", np.stack([
            rng.uniform(-1.0, 1.0, 6000), rng.uniform(-1.0, 1.0, 6000)
        ], axis=1))
        ref = pose_dataset(tmp_path, "ref", np.stack([
            rng.normal(0, 0.25, 6000).clip(-1, 1), rng.normal(0, 0.25, 6000).clip(-1, 1)
        ], axis=1))
        _, info = target_dataset(src, TargetingSpec(bin_deg=10), ref, seed=8,
                                 out_root=tmp_path / "out")
        assert info["chi2_after"] <= 0.2 * info["chi2_before"]

    def test_deterministic_given_seed(self, tmp_path):
        rng = np.random.default_rng(9)
        src = pose_dataset(tmp_path, "src", rng.uniform(-1, 1, (500, 2)))
        ref = pose_dataset(tmp_path, "ref", rng.normal(0, 0.3, (500, 2)).clip(-1, 1))
        a, _ = target_dataset(src, TargetingSpec(), ref, seed=10, out_root=tmp_path / "a")
        b, _ = target_dataset(src, TargetingSpec(), ref, seed=10, out_root=tmp_path / "b")
        assert [s.id for s in a.samples] == [s.id for s in b.samples]

    def test_disjoint_supports_rejected(self, tmp_path):
        src = pose_dataset(tmp_path, "src", np.full((50, 2), 0.9))
        ref = pose_dataset(tmp_path, "ref", np.full((50, 2), -0.9))
        with pytest.raises(TargetingError, match="disjoint"):
            target_dataset(src, TargetingSpec(bin_deg=5), ref, seed=11,
                           out_root=tmp_path / "out")

    def test_joint_gaze_binning_runs(self, tmp_path):
        rng = np.random.default_rng(12)
        src = pose_dataset(tmp_path, "src", rng.uniform(-1, 1, (600, 2)))
        ref = pose_dataset(tmp_path, "ref", rng.uniform(-0.5, 0.5, (600, 2)))
        out, info = target_dataset(
            src, TargetingSpec(bin_deg=15, joint_gaze=True), ref, seed=13,
            out_root=tmp_path / "out",
        )
        assert 0 < info["kept"] < len(src)
