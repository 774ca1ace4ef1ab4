import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trimae.data import (
    MODALITIES,
    AugmentationPolicy,
    MissingnessConfig,
    augment,
    build_missing_eval_set,
    generate_synthetic,
    largest_remainder,
    load_samples,
    normalize_image,
    read_manifest,
    render_synthetic,
    rng_for,
    save_dataset,
    stratified_split,
)
from trimae.errors import DataError

from conftest import make_sample, make_samples


class TestStratifiedSplit:
    def test_clinic_scale_counts(self):
        # 600/200/200/200 with 6:2:2 -> 360/120/120 per large class, etc.
        samples = []
        for label, count in enumerate((600, 200, 200, 200)):
            samples += [make_sample(label, size=32, sid=f"c{label}-{i}") for i in range(count)]
        manifest = stratified_split(samples, (0.6, 0.2, 0.2), seed=0)
        assert manifest.per_class_counts[0] == (360, 120, 120)
        for label in (1, 2, 3):
            assert manifest.per_class_counts[label] == (120, 40, 40)
        assert len(manifest.train) == 720 and len(manifest.val) == 240 and len(manifest.test) == 240

    def test_exactly_divisible_single_class(self):
        samples = [make_sample(1, sid=f"x{i}") for i in range(10)]
        manifest = stratified_split(samples, (0.6, 0.2, 0.2), seed=3)
        assert manifest.per_class_counts[1] == (6, 2, 2)

    def test_deterministic_under_seed(self):
        samples = make_samples(8)
        a = stratified_split(samples, seed=42)
        b = stratified_split(samples, seed=42)
        assert a.train == b.train and a.val == b.val and a.test == b.test

    def test_different_seed_shuffles(self):
        samples = make_samples(20)
        a = stratified_split(samples, seed=1)
        b = stratified_split(samples, seed=2)
        assert a.train != b.train

    def test_partition_is_disjoint_and_exhaustive(self):
        samples = make_samples(13)
        manifest = stratified_split(samples, seed=5)
        ids = manifest.train + manifest.val + manifest.test
        assert sorted(ids) == sorted(s.id for s in samples)
        assert len(set(ids)) == len(ids)

    def test_small_class_rejected(self):
        samples = make_samples(6) + [make_sample(0, sid="lonely")]
        samples = [s for s in samples if s.label != 3] + [make_sample(3, sid="only3")]
        with pytest.raises(DataError):
            stratified_split(samples)

    def test_empty_input_rejected(self):
        with pytest.raises(DataError):
            stratified_split([])

    def test_bad_ratios_rejected(self):
        with pytest.raises(DataError):
            stratified_split(make_samples(5), ratios=(0.5, 0.2, 0.2))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(5, 64), min_size=1, max_size=4), st.integers(0, 999))
    def test_proportions_within_one_sample(self, class_sizes, seed):
        samples = []
        for label, count in enumerate(class_sizes):
            samples += [make_sample(label, size=32, sid=f"c{label}-{i}") for i in range(count)]
        ratios = (0.6, 0.2, 0.2)
        manifest = stratified_split(samples, ratios, seed=seed)
        for label, count in enumerate(class_sizes):
            for k, r in enumerate(ratios):
                assert abs(manifest.per_class_counts[label][k] - r * count) < 1.0


def test_largest_remainder_preserves_total():
    for n in range(1, 50):
        assert sum(largest_remainder(n, (0.6, 0.2, 0.2))) == n


class TestAugment:
    def test_identity_policy(self):
        sample = make_sample(seed=5)
        out = augment(sample, AugmentationPolicy.identity(), rng_for(0))
        for mod in MODALITIES:
            assert np.array_equal(out.images()[mod], sample.images()[mod])

    def test_forced_shared_hflip_mirrors_all_three(self):
        sample = make_sample(seed=6)
        policy = AugmentationPolicy(ops={}, flip_prob=1.0)
        out = augment(sample, policy, rng_for(1))
        for mod in MODALITIES:
            assert np.array_equal(out.images()[mod], sample.images()[mod][:, :, ::-1])

    def test_hflip_all_or_none(self):
        sample = make_sample(seed=7)
        policy = AugmentationPolicy(ops={}, flip_prob=0.5)
        for trial in range(50):
            out = augment(sample, policy, rng_for(trial))
            flipped = [
                np.array_equal(out.images()[m], sample.images()[m][:, :, ::-1]) for m in MODALITIES
            ]
            unchanged = [np.array_equal(out.images()[m], sample.images()[m]) for m in MODALITIES]
            assert all(flipped) or all(unchanged)

    def test_flip_coin_frequency(self):
        sample = make_sample(seed=8)
        policy = AugmentationPolicy(ops={}, flip_prob=0.5)
        flips = 0
        for trial in range(1000):
            out = augment(sample, policy, rng_for(99, trial))
            flips += np.array_equal(out.vf, sample.vf[:, :, ::-1])
        assert abs(flips / 1000 - 0.5) <= 0.05

    def test_output_size_unchanged(self):
        sample = make_sample(seed=9, size=64)
        out = augment(sample, AugmentationPolicy(), rng_for(4))
        for mod in MODALITIES:
            assert out.images()[mod].shape == (3, 64, 64)

    def test_oct_never_flips_vertically(self):
        # OCT receives jitter only; with jitter neutralized it passes through
        # untouched unless the shared horizontal flip fires.
        sample = make_sample(seed=10)
        policy = AugmentationPolicy(jitter_range=(1.0, 1.0), shared_hflip=False, flip_prob=1.0)
        out = augment(sample, policy, rng_for(5))
        assert np.allclose(out.oct, sample.oct)

    def test_unknown_op_rejected(self):
        sample = make_sample()
        policy = AugmentationPolicy(ops={"vf": ("sharpen",)})
        with pytest.raises(DataError):
            augment(sample, policy, rng_for(0))


class TestMissingness:
    def test_p_full_one_is_identity(self):
        sample = make_sample(seed=11)
        cfg = MissingnessConfig(p_full=1.0, p_drop_one=0.0, p_drop_two=0.0)
        out = sample_identity = sample_missingness_helper(sample, cfg, rng_for(0))
        assert out.present == (True, True, True)
        for mod in MODALITIES:
            assert np.array_equal(sample_identity.images()[mod], sample.images()[mod])

    def test_pattern_frequencies(self):
        sample = make_sample(seed=12)
        cfg = MissingnessConfig()
        counts = {0: 0, 1: 0, 2: 0}
        n = 10_000
        for i in range(n):
            out = sample_missingness_helper(sample, cfg, rng_for(7, i))
            counts[3 - sum(out.present)] += 1
        assert abs(counts[0] / n - 0.50) <= 0.02
        assert abs(counts[1] / n - 0.25) <= 0.02
        assert abs(counts[2] / n - 0.25) <= 0.02

    def test_drop_two_leaves_exactly_one(self):
        sample = make_sample(seed=13)
        cfg = MissingnessConfig(p_full=0.0, p_drop_one=0.0, p_drop_two=1.0)
        for i in range(20):
            out = sample_missingness_helper(sample, cfg, rng_for(8, i))
            assert sum(out.present) == 1
            for mod, bit in zip(MODALITIES, out.present):
                if not bit:
                    assert not out.images()[mod].any()

    def test_invalid_probabilities_rejected(self):
        with pytest.raises(DataError):
            MissingnessConfig(p_full=0.5, p_drop_one=0.3, p_drop_two=0.3).validate()

    def test_partial_sample_rejected(self):
        sample = make_sample(present=(True, False, True))
        with pytest.raises(DataError):
            sample_missingness_helper(sample, MissingnessConfig(), rng_for(0))


def sample_missingness_helper(sample, cfg, rng):
    from trimae.data import sample_missingness

    return sample_missingness(sample, cfg, rng)


class TestMissingEvalSet:
    def test_240_split_yields_480_composition(self):
        split = [make_sample(i % 4, size=32, sid=f"t{i:03d}") for i in range(240)]
        out = build_missing_eval_set(split, MissingnessConfig(), seed=0)
        assert len(out) == 480
        n_missing = [3 - sum(s.present) for s in out]
        assert n_missing.count(0) == 240
        assert n_missing.count(1) == 120
        assert n_missing.count(2) == 120

    def test_one_missing_balanced_per_modality(self):
        split = [make_sample(i % 4, size=32, sid=f"t{i:03d}") for i in range(240)]
        out = build_missing_eval_set(split, MissingnessConfig(), seed=0)
        for k, mod in enumerate(MODALITIES):
            dropped_k = [s for s in out if sum(s.present) == 2 and not s.present[k]]
            assert len(dropped_k) == 40, mod

    def test_two_missing_balanced_per_kept_modality(self):
        split = [make_sample(i % 4, size=32, sid=f"t{i:03d}") for i in range(240)]
        out = build_missing_eval_set(split, MissingnessConfig(), seed=0)
        for k in range(3):
            kept_k = [s for s in out if sum(s.present) == 1 and s.present[k]]
            assert len(kept_k) == 40

    def test_zero_modification_is_identity(self):
        split = [make_sample(i % 4, sid=f"t{i}") for i in range(12)]
        out = build_missing_eval_set(split, MissingnessConfig(1.0, 0.0, 0.0), seed=0)
        assert [s.id for s in out] == [s.id for s in split]

    def test_non_divisible_remainder_reported(self, caplog):
        split = [make_sample(i % 4, sid=f"t{i}") for i in range(8)]
        with caplog.at_level("WARNING"):
            out = build_missing_eval_set(split, MissingnessConfig(), seed=0)
        assert "remainder" in caplog.text or "divisible" in caplog.text
        assert len(out) == 8 + 4 + 4

    def test_deterministic(self):
        split = [make_sample(i % 4, sid=f"t{i}") for i in range(24)]
        a = build_missing_eval_set(split, MissingnessConfig(), seed=9)
        b = build_missing_eval_set(split, MissingnessConfig(), seed=9)
        assert [s.id for s in a] == [s.id for s in b]
        assert [s.present for s in a] == [s.present for s in b]


class TestSyntheticGenerator:
    def test_counts_and_balance(self):
        samples = generate_synthetic(5, 32, seed=0)
        assert len(samples) == 20
        for label in range(4):
            assert sum(1 for s in samples if s.label == label) == 5

    def test_vf_darkens_with_stage(self):
        samples = generate_synthetic(6, 64, seed=1)
        means = {
            label: np.mean([s.vf.mean() for s in samples if s.label == label]) for label in (0, 3)
        }
        assert means[3] < means[0]

    def test_deterministic_bytes(self):
        a = render_synthetic(3, 32, seed=7)
        b = render_synthetic(3, 32, seed=7)
        for ra, rb in zip(a, b):
            assert ra.id == rb.id
            for mod in MODALITIES:
                assert np.array_equal(ra.images[mod], rb.images[mod])

    def test_small_image_rejected(self):
        with pytest.raises(DataError):
            generate_synthetic(2, 16, seed=0)

    def test_zero_per_class_rejected(self):
        with pytest.raises(DataError):
            generate_synthetic(0, 32, seed=0)

    def test_vf_mean_threshold_beats_chance(self):
        # The generator must stay class-separable by construction.
        samples = generate_synthetic(12, 48, seed=2)
        means = np.array([s.vf.mean() for s in samples])
        labels = np.array([s.label for s in samples])
        centers = [means[labels == c].mean() for c in range(4)]
        preds = np.array([int(np.argmin([abs(m - c) for c in centers])) for m in means])
        assert (preds == labels).mean() > 0.25

    def test_oct_band_thins_with_stage(self):
        samples = generate_synthetic(6, 64, seed=3)
        bright = {
            label: np.mean([(s.oct > 0).mean() for s in samples if s.label == label])
            for label in (0, 3)
        }
        assert bright[3] < bright[0]


class TestDatasetIo:
    def test_round_trip(self, tmp_path):
        records = render_synthetic(2, 32, seed=4)
        manifest = save_dataset(records, str(tmp_path))
        entries = read_manifest(manifest)
        assert [e.id for e in entries] == [r.id for r in records]
        samples = load_samples(manifest)
        direct = [  # normalizing the rendered bytes directly must agree
            normalize_image(r.images["vf"].astype(np.float32).transpose(2, 0, 1) / 255.0)
            for r in records
        ]
        for s, want in zip(samples, direct):
            assert np.array_equal(s.vf, want)

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_samples(str(tmp_path / "nope" / "manifest.txt"))

    def test_malformed_manifest_rejected(self, tmp_path):
        path = tmp_path / "manifest.txt"
        path.write_text("too\tfew\tfields\n")
        with pytest.raises(DataError):
            read_manifest(str(path))
