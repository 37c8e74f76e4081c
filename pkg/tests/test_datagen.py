import numpy as np
import pytest

from diagfuse import datagen, fusion, metrics
from diagfuse.datagen import GenConfig, RaterProfile
from diagfuse.errors import DataError

CFG = GenConfig()


def _contained(inner, outer):
    return bool(((np.asarray(inner) > 0) <= (np.asarray(outer) > 0)).all())


class TestSynthSample:
    def test_determinism(self):
        a = datagen.synth_sample(123, CFG)
        b = datagen.synth_sample(123, CFG)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.true_disc, b.true_disc)
        assert np.array_equal(a.true_cup, b.true_cup)
        assert (a.label, a.true_cdr) == (b.label, b.true_cdr)

    def test_label_matches_threshold(self):
        for seed in range(30):
            s = datagen.synth_sample(seed, CFG)
            assert s.label == int(s.true_cdr > CFG.tau_gen)

    def test_label_fraction_tracks_config(self):
        # empirical class balance over many seeds
        for frac in (0.3, 0.5):
            cfg = GenConfig(glaucoma_frac=frac)
            labels = [datagen.synth_sample(seed, cfg).label for seed in range(1000)]
            assert abs(np.mean(labels) - frac) < 0.05

    def test_truth_containment_and_connectivity(self):
        for seed in range(25):
            s = datagen.synth_sample(seed, CFG)
            assert _contained(s.true_cup, s.true_disc)
            assert datagen.count_components(s.true_disc) == 1
            assert datagen.count_components(s.true_cup) == 1

    def test_image_range(self):
        s = datagen.synth_sample(7, CFG)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_rejects_tiny_size(self):
        with pytest.raises(DataError):
            datagen.synth_sample(0, GenConfig(h=16, w=16))


class TestSimulateRaters:
    def test_zero_noise_profile_reproduces_truth(self):
        s = datagen.synth_sample(11, CFG)
        ann = datagen.simulate_raters(s, [RaterProfile(0.0, 0.0, 1)], seed=11)
        assert np.array_equal(ann[0, 0], s.true_disc)
        assert np.array_equal(ann[0, 1], s.true_cup)

    def test_zero_noise_majority_vote_equals_truth(self):
        s = datagen.synth_sample(13, CFG)
        profiles = [RaterProfile(0.0, 0.0, k) for k in range(3)]
        ann = datagen.simulate_raters(s, profiles, seed=13)
        mv = fusion.majority_vote(ann)
        assert np.array_equal(mv[..., 0] > 0.5, s.true_disc > 0)
        assert np.array_equal(mv[..., 1] > 0.5, s.true_cup > 0)

    def test_positive_cup_bias_never_shrinks_vcdr(self):
        from diagfuse.models import vcdr_score

        for seed in range(20):
            s = datagen.synth_sample(seed, CFG)
            ann = datagen.simulate_raters(s, [RaterProfile(0.0, 3.0, 1)], seed=seed)
            assert vcdr_score(ann[0, 0], ann[0, 1]) >= vcdr_score(s.true_disc, s.true_cup)

    def test_iou_decreases_with_boundary_noise(self):
        levels = [0.5, 1.5, 3.0, 5.0]
        means = []
        for noise in levels:
            vals = []
            for seed in range(100):
                s = datagen.synth_sample(seed, CFG)
                ann = datagen.simulate_raters(s, [RaterProfile(noise, 0.0, 1)], seed=seed)
                vals.append(metrics.iou(ann[0, 0], s.true_disc))
            means.append(np.mean(vals))
        assert all(a > b for a, b in zip(means, means[1:])), means

    def test_containment_and_connectivity(self):
        for seed in range(15):
            s = datagen.synth_sample(seed, CFG)
            ann = datagen.simulate_raters(s, datagen.default_profiles(), seed=seed)
            for k in range(ann.shape[0]):
                assert _contained(ann[k, 1], ann[k, 0])
                assert datagen.count_components(ann[k, 0]) == 1
                assert datagen.count_components(ann[k, 1]) == 1

    def test_requires_profiles(self):
        s = datagen.synth_sample(1, CFG)
        with pytest.raises(DataError):
            datagen.simulate_raters(s, [], seed=1)


class TestDegradeMask:
    def test_target_one_is_identity(self):
        s = datagen.synth_sample(3, CFG)
        out = datagen.degrade_mask(s.true_disc, 1.0, seed=0)
        assert np.array_equal(out, s.true_disc)

    def test_quality_tiers(self):
        for target in (0.3, 0.5, 0.7):
            for seed in range(8):
                s = datagen.synth_sample(seed, CFG)
                out = datagen.degrade_mask(s.true_disc, target, seed=seed)
                achieved = metrics.iou(out, s.true_disc)
                assert abs(achieved - target) <= 0.05, (target, achieved)

    def test_single_component_over_seeds(self):
        bad = 0
        for seed in range(100):
            s = datagen.synth_sample(seed, CFG)
            out = datagen.degrade_mask(s.true_disc, 0.3, seed=seed)
            if datagen.count_components(out) != 1:
                bad += 1
        assert bad == 0, f"{bad} disconnected degradations"

    def test_pair_preserves_containment(self):
        for seed in range(10):
            s = datagen.synth_sample(seed, CFG)
            d, c = datagen.degrade_pair(s.true_disc, s.true_cup, 0.5, seed=seed)
            assert _contained(c, d)
            assert abs(metrics.iou(d, s.true_disc) - 0.5) <= 0.05
            assert abs(metrics.iou(c, s.true_cup) - 0.5) <= 0.05

    def test_bad_target_rejected(self):
        s = datagen.synth_sample(4, CFG)
        with pytest.raises(DataError):
            datagen.degrade_mask(s.true_disc, 0.0, seed=0)
        with pytest.raises(DataError):
            datagen.degrade_mask(s.true_disc, 1.2, seed=0)


class TestDatasetIo:
    def test_roundtrip(self, tmp_path):
        samples = datagen.generate_dataset(4, seed=5)
        datagen.write_dataset(tmp_path / "ds", samples)
        back = datagen.load_dataset(tmp_path / "ds")
        assert len(back) == 4
        for orig, loaded in zip(samples, back):
            assert loaded.sample_id == orig.sample_id
            assert loaded.label == orig.label
            assert loaded.true_cdr == pytest.approx(orig.true_cdr, abs=1e-6)
            np.testing.assert_array_equal(loaded.image, orig.image)
            np.testing.assert_array_equal(loaded.true_disc, orig.true_disc)
            np.testing.assert_array_equal(loaded.annotations, orig.annotations)

    def test_dataset_determinism(self):
        a = datagen.generate_dataset(3, seed=9)
        b = datagen.generate_dataset(3, seed=9)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.annotations, sb.annotations)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            datagen.load_dataset(tmp_path)

    def test_profiles_json(self, tmp_path):
        p = tmp_path / "profiles.json"
        p.write_text(
            '[{"boundary_noise_px": 0.5, "cup_bias_px": -4, "seed_offset": 1}]'
        )
        profiles = datagen.load_profiles(p)
        assert profiles == [RaterProfile(0.5, -4.0, 1)]
