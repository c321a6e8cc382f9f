import numpy as np
import pytest
from scipy import ndimage

from cinefuse.errors import ContractError
from cinefuse.rng import rng_for
from cinefuse.synth import GenConfig, generate_clip, generate_dataset
from cinefuse.windowing import load_manifest


def small_cfg(**kw):
    defaults = dict(n_clips=6, frames_min=6, frames_max=12, image_side=48, seed=3)
    defaults.update(kw)
    return GenConfig(**defaults)


class TestGenerateClip:
    def test_deterministic_given_rng_state(self):
        cfg = small_cfg()
        a = generate_clip(1, cfg, rng_for(0, "c", 5))
        b = generate_clip(1, cfg, rng_for(0, "c", 5))
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.masks, b.masks)
        assert a.roi_box == b.roi_box

    def test_masks_connected_with_min_area(self):
        cfg = small_cfg(shape_snr=2.0)
        for label in (0, 1):
            clip = generate_clip(label, cfg, rng_for(1, "c", label))
            for t in range(clip.n_frames):
                _, count = ndimage.label(clip.masks[t])
                assert count == 1
                assert clip.masks[t].sum() >= 25

    def test_frames_and_masks_aligned_and_bounded(self):
        clip = generate_clip(1, small_cfg(), rng_for(2, "c", 0))
        assert clip.frames.shape == clip.masks.shape
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0
        assert set(np.unique(clip.masks)) <= {0.0, 1.0}

    def test_roi_covers_mask_union(self):
        clip = generate_clip(1, small_cfg(shape_snr=1.5), rng_for(3, "c", 0))
        x0, y0, x1, y1 = clip.roi_box
        union = clip.masks.any(axis=0)
        assert union[y0:y1, x0:x1].sum() == union.sum()
        assert 0 <= x0 < x1 <= 48 and 0 <= y0 < y1 <= 48

    def test_zero_snr_pixels_identical_across_labels(self):
        # with both gates at zero the same rng stream must give the same pixels
        cfg = small_cfg(texture_snr=0.0, shape_snr=0.0)
        benign = generate_clip(0, cfg, rng_for(4, "c", 9))
        malignant = generate_clip(1, cfg, rng_for(4, "c", 9))
        np.testing.assert_array_equal(benign.frames, malignant.frames)
        np.testing.assert_array_equal(benign.masks, malignant.masks)

    def test_complementarity_one_frames_carry_no_label_signal(self):
        # texture channel never activates, so frames are identical across labels
        cfg = small_cfg(complementarity=1.0)
        benign = generate_clip(0, cfg, rng_for(5, "c", 2))
        malignant = generate_clip(1, cfg, rng_for(5, "c", 2))
        np.testing.assert_array_equal(benign.frames, malignant.frames)
        assert (benign.masks != malignant.masks).any()  # masks do differ

    def test_complementarity_zero_masks_carry_no_label_signal(self):
        cfg = small_cfg(complementarity=0.0)
        benign = generate_clip(0, cfg, rng_for(6, "c", 2))
        malignant = generate_clip(1, cfg, rng_for(6, "c", 2))
        np.testing.assert_array_equal(benign.masks, malignant.masks)
        assert (benign.frames != malignant.frames).any()

    def test_notches_only_move_boundary_inward(self):
        cfg = small_cfg(complementarity=1.0, shape_snr=2.0)
        benign = generate_clip(0, cfg, rng_for(7, "c", 1))
        malignant = generate_clip(1, cfg, rng_for(7, "c", 1))
        assert (malignant.masks <= benign.masks).all()

    def test_bad_label(self):
        with pytest.raises(ContractError):
            generate_clip(2, small_cfg(), rng_for(8, "c", 0))


class TestGenerateDataset:
    def test_default_counts(self):
        cfg = GenConfig()
        assert cfg.n_clips == 120
        assert cfg.n_malignant() == 11  # round(120 * 0.0885)

    def test_exact_class_counts_on_disk(self, tmp_path):
        manifest = generate_dataset(small_cfg(n_clips=9, malignant_fraction=1 / 3), tmp_path)
        refs = load_manifest(manifest)
        assert len(refs) == 9
        assert sum(r.label for r in refs) == 3

    def test_minority_class_clamped_to_one(self, tmp_path):
        manifest = generate_dataset(
            small_cfg(n_clips=4, malignant_fraction=0.01), tmp_path
        )
        refs = load_manifest(manifest)
        assert sum(r.label for r in refs) == 1

    def test_empty_dataset(self, tmp_path):
        manifest = generate_dataset(small_cfg(n_clips=0), tmp_path)
        assert load_manifest(manifest) == []
        assert list(tmp_path.glob("*.sttf")) == []

    def test_regeneration_byte_identical(self, tmp_path):
        cfg = small_cfg(n_clips=4)
        m1 = generate_dataset(cfg, tmp_path / "a")
        m2 = generate_dataset(cfg, tmp_path / "b")
        assert m1.read_bytes() == m2.read_bytes()
        for f1 in sorted((tmp_path / "a").glob("*.sttf")):
            f2 = tmp_path / "b" / f1.name
            assert f1.read_bytes() == f2.read_bytes(), f1.name

    def test_manifest_validates(self, tmp_path):
        manifest = generate_dataset(small_cfg(n_clips=5, malignant_fraction=0.4), tmp_path)
        refs = load_manifest(manifest)
        for ref in refs:
            assert ref.n_frames >= 6
            clip = ref.load()
            assert clip.frames.shape == clip.masks.shape

    def test_config_validation(self):
        with pytest.raises(ContractError):
            GenConfig(malignant_fraction=0.0)
        with pytest.raises(ContractError):
            GenConfig(complementarity=1.5)
        with pytest.raises(ContractError):
            GenConfig(frames_min=10, frames_max=5)
        with pytest.raises(ContractError):
            GenConfig(image_side=8)
