"""Synthetic task generators, corruption policies, and dataset persistence."""

import json

import numpy as np
import pytest

from dicelab.errors import InvalidConfigError, InvalidParamsError, TargetNotFoundError
from dicelab.synthdata import (
    GRADE_A,
    GRADE_B,
    MANIFEST_NAME,
    PHASE_A,
    PHASE_B,
    BinaryTaskParams,
    MulticlassTaskParams,
    PartialAction,
    PartialPolicy,
    apply_partial,
    generate_binary,
    generate_multiclass,
    load_dataset,
    save_dataset,
)


class TestBinaryGenerator:
    def test_counts_tags_and_shapes(self):
        ds = generate_binary(BinaryTaskParams(), seed=0)
        assert len(ds) == 40
        assert ds.class_names == ("lesion",)
        assert sum(s.tag == GRADE_A for s in ds.samples) == 30
        assert sum(s.tag == GRADE_B for s in ds.samples) == 10
        assert [s.subject_id for s in ds.samples] == list(range(40))
        for s in ds.samples:
            assert s.image.shape == (32, 32)
            assert s.gt.shape == (1, 32, 32)
            assert s.availability.tolist() == [True]

    def test_deterministic(self):
        a = generate_binary(BinaryTaskParams(), seed=3)
        b = generate_binary(BinaryTaskParams(), seed=3)
        for sa, sb in zip(a.samples, b.samples):
            assert sa.tag == sb.tag
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.gt, sb.gt)

    def test_different_seeds_differ(self):
        a = generate_binary(BinaryTaskParams(), seed=1)
        b = generate_binary(BinaryTaskParams(), seed=2)
        assert not np.array_equal(a.samples[0].image, b.samples[0].image)

    def test_gt_is_binary_and_nonempty(self):
        ds = generate_binary(BinaryTaskParams(), seed=4)
        for s in ds.samples:
            assert set(np.unique(s.gt)) <= {0.0, 1.0}
            assert s.gt.sum() > 0

    def test_disk_area_tracks_radius_range(self):
        # radii drawn from (4.8, 5.3): E[pi r^2] = pi (a^2+ab+b^2)/3 = 80.2 pixels
        params = BinaryTaskParams(n_grade_a=50, n_grade_b=10,
                                  radius_a=(4.8, 5.3), radius_b=(4.8, 5.3))
        ds = generate_binary(params, seed=5)
        mean_area = np.mean([s.gt.sum() for s in ds.samples])
        assert 70.0 <= mean_area <= 90.0

    def test_zero_noise_gives_exact_plateaus(self):
        params = BinaryTaskParams(noise_sigma=0.0, n_grade_a=2, n_grade_b=2)
        ds = generate_binary(params, seed=6)
        for s in ds.samples:
            mask = s.gt[0].astype(bool)
            assert np.all(s.image[~mask] == params.background_level)
            assert len(np.unique(s.image[mask])) == 1

    def test_grades_occupy_their_intensity_bands(self):
        ds = generate_binary(BinaryTaskParams(noise_sigma=0.0), seed=7)
        for s in ds.samples:
            level = float(s.image[s.gt[0].astype(bool)][0])
            lo, hi = ((0.72, 0.9) if s.tag == GRADE_A else (0.5, 0.6))
            assert lo <= level <= hi

    @pytest.mark.parametrize("kwargs", [
        dict(image_size=8),
        dict(n_grade_a=0),
        dict(noise_sigma=-0.1),
        dict(intensity_a=(0.9, 0.7)),
        dict(intensity_b=(0.5, 1.4)),
        dict(radius_a=(4.0, 20.0)),
        dict(background_level=1.5),
    ])
    def test_invalid_params_rejected(self, kwargs):
        with pytest.raises(InvalidParamsError):
            generate_binary(BinaryTaskParams(**kwargs), seed=0)


class TestMulticlassGenerator:
    def test_counts_and_class_layout(self):
        ds = generate_multiclass(MulticlassTaskParams(), seed=0)
        assert len(ds) == 40
        assert ds.class_names == ("core", "shell", "satellite")
        assert sum(s.tag == PHASE_A for s in ds.samples) == 30
        assert sum(s.tag == PHASE_B for s in ds.samples) == 10
        for s in ds.samples:
            assert s.gt.shape == (3, 48, 48)

    def test_classes_are_disjoint_and_nonempty(self):
        ds = generate_multiclass(MulticlassTaskParams(), seed=1)
        for s in ds.samples:
            assert np.all(s.gt.sum(axis=0) <= 1.0)
            assert np.all(s.gt.sum(axis=(1, 2)) > 0)

    def test_shell_is_a_ring_around_core(self):
        ds = generate_multiclass(MulticlassTaskParams(), seed=2)
        s = ds.samples[0]
        core, shell = s.gt[0].astype(bool), s.gt[1].astype(bool)
        assert not np.any(core & shell)
        # every core-adjacent outside pixel belongs to the shell
        grown = np.zeros_like(core)
        grown[1:, :] |= core[:-1, :]
        grown[:-1, :] |= core[1:, :]
        grown[:, 1:] |= core[:, :-1]
        grown[:, :-1] |= core[:, 1:]
        assert np.all(shell[grown & ~core])

    def test_shrink_factor_reduces_phase_b_area(self):
        ds = generate_multiclass(MulticlassTaskParams(n_phase_a=30, n_phase_b=30), seed=3)
        area = {PHASE_A: [], PHASE_B: []}
        for s in ds.samples:
            area[s.tag].append(s.gt.sum())
        ratio = np.mean(area[PHASE_B]) / np.mean(area[PHASE_A])
        # linear shrink 0.8 -> area factor 0.64, biased low by pixelation
        assert 0.55 <= ratio <= 0.73

    def test_deterministic(self):
        a = generate_multiclass(MulticlassTaskParams(), seed=8)
        b = generate_multiclass(MulticlassTaskParams(), seed=8)
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a.samples, b.samples))

    @pytest.mark.parametrize("kwargs", [
        dict(image_size=16),                  # structures cannot fit
        dict(core_radius=(4.0, 16.0)),        # would collide with the satellite
        dict(phase_b_shrink=0.0),
        dict(n_phase_b=0),
        dict(satellite_intensity=(0.6, 0.4)),
    ])
    def test_invalid_params_rejected(self, kwargs):
        with pytest.raises(InvalidParamsError):
            generate_multiclass(MulticlassTaskParams(**kwargs), seed=0)


class TestApplyPartial:
    def test_empty_map_keeps_availability(self):
        ds = generate_binary(BinaryTaskParams(), seed=0)
        out = apply_partial(ds, PartialPolicy(PartialAction.EMPTY_MAP, tag=GRADE_B))
        for before, after in zip(ds.samples, out.samples):
            if before.tag == GRADE_B:
                assert after.gt.sum() == 0.0
                assert after.availability.tolist() == [True]
                assert np.array_equal(after.image, before.image)
            else:
                assert after is before  # untouched samples are shared, not copied

    def test_mark_unavailable_single_class(self):
        ds = generate_multiclass(MulticlassTaskParams(), seed=0)
        policy = PartialPolicy(PartialAction.MARK_UNAVAILABLE, tag=PHASE_B, class_index=1)
        out = apply_partial(ds, policy)
        for before, after in zip(ds.samples, out.samples):
            if before.tag == PHASE_B:
                assert after.gt[1].sum() == 0.0
                assert after.availability.tolist() == [True, False, True]
                assert np.array_equal(after.gt[0], before.gt[0])
                assert np.array_equal(after.gt[2], before.gt[2])
            else:
                assert after is before

    def test_idempotent(self):
        ds = generate_binary(BinaryTaskParams(), seed=1)
        policy = PartialPolicy(PartialAction.EMPTY_MAP, tag=GRADE_B)
        once = apply_partial(ds, policy)
        twice = apply_partial(once, policy)
        for a, b in zip(once.samples, twice.samples):
            assert np.array_equal(a.gt, b.gt)
            assert np.array_equal(a.availability, b.availability)

    def test_policies_are_recorded(self):
        ds = generate_binary(BinaryTaskParams(), seed=1)
        out = apply_partial(ds, PartialPolicy(PartialAction.EMPTY_MAP, tag=GRADE_B))
        assert out.origin["policies"] == [
            {"action": "empty-map", "tag": GRADE_B, "class_index": None}
        ]
        assert "policies" not in ds.origin

    def test_unknown_tag_rejected(self):
        ds = generate_binary(BinaryTaskParams(), seed=0)
        with pytest.raises(TargetNotFoundError):
            apply_partial(ds, PartialPolicy(PartialAction.EMPTY_MAP, tag="grade-c"))

    def test_class_index_out_of_range(self):
        ds = generate_binary(BinaryTaskParams(), seed=0)
        with pytest.raises(TargetNotFoundError):
            apply_partial(ds, PartialPolicy(PartialAction.EMPTY_MAP, class_index=1))

    def test_policy_must_select_something(self):
        ds = generate_binary(BinaryTaskParams(), seed=0)
        with pytest.raises(TargetNotFoundError):
            apply_partial(ds, PartialPolicy(PartialAction.EMPTY_MAP))


class TestPersistence:
    def small_dataset(self):
        params = BinaryTaskParams(image_size=16, n_grade_a=3, n_grade_b=2,
                                  radius_a=(3.0, 4.5), radius_b=(2.0, 3.0))
        return generate_binary(params, seed=9)

    def test_round_trip(self, tmp_path):
        ds = self.small_dataset()
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert back.task == ds.task
        assert back.class_names == ds.class_names
        assert back.origin == json.loads(json.dumps(ds.origin))  # tuples become lists
        for a, b in zip(ds.samples, back.samples):
            assert (a.subject_id, a.tag) == (b.subject_id, b.tag)
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.gt, b.gt)
            assert np.array_equal(a.availability, b.availability)

    def test_round_trip_keeps_unavailability(self, tmp_path):
        ds = generate_multiclass(MulticlassTaskParams(), seed=4)
        ds = apply_partial(ds, PartialPolicy(PartialAction.MARK_UNAVAILABLE,
                                             tag=PHASE_B, class_index=1))
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert any(not s.availability[1] for s in back.samples)

    def test_rewrite_is_byte_identical(self, tmp_path):
        ds = self.small_dataset()
        save_dataset(ds, tmp_path / "a")
        save_dataset(ds, tmp_path / "b")
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(InvalidConfigError):
            load_dataset(tmp_path)

    def test_wrong_schema_version(self, tmp_path):
        ds = self.small_dataset()
        save_dataset(ds, tmp_path / "d")
        manifest = json.loads((tmp_path / "d" / MANIFEST_NAME).read_text())
        manifest["schema_version"] = 99
        (tmp_path / "d" / MANIFEST_NAME).write_text(json.dumps(manifest))
        with pytest.raises(InvalidConfigError):
            load_dataset(tmp_path / "d")
