"""Phantom generation, splits, and the stack directory format."""

import json

import numpy as np
import pytest
from PIL import Image

from interslice import phantom
from interslice.errors import ConfigError, FormatError, SplitError


@pytest.fixture(scope="module")
def stack9():
    cfg = phantom.PhantomConfig(num_slices=9, height=64, width=64, seed=7)
    return phantom.generate_phantom_stack(cfg, "p000", "p000_s0")


def _boundary_rows(mask):
    """First row of each tissue label per column; shape (6, W)."""
    h, w = mask.shape
    rows = np.arange(h)[:, None]
    out = np.empty((6, w), dtype=np.int64)
    for lab in range(1, 7):
        hit = mask >= lab
        out[lab - 1] = np.where(hit.any(axis=0), hit.argmax(axis=0), h)
    return out


def test_mask_is_partition_with_depth_order(stack9):
    cfg_min = 3
    for p in stack9.pairs:
        assert p.image.shape == (64, 64)
        assert p.mask.dtype == np.uint8
        assert set(np.unique(p.mask)) <= set(range(7))
        b = _boundary_rows(p.mask)
        # all six layers present in every column, in strictly increasing depth order
        assert (b < 64).all()
        assert (np.diff(b, axis=0) >= cfg_min).all()
        # muscle reaches at least min thickness at the bottom
        assert (64 - b[5] >= cfg_min).all()


def test_determinism_bit_identical(stack9):
    cfg = phantom.PhantomConfig(num_slices=9, height=64, width=64, seed=7)
    again = phantom.generate_phantom_stack(cfg, "p000", "p000_s0")
    assert stack9.equals(again)
    other_scan = phantom.generate_phantom_stack(cfg, "p000", "p000_s1")
    assert not stack9.equals(other_scan)


def test_drift_bound_holds_between_adjacent_slices(stack9):
    drift_max = phantom.PhantomConfig().drift_max_px
    masks = stack9.masks()
    prev = _boundary_rows(masks[0])
    for z in range(1, len(masks)):
        cur = _boundary_rows(masks[z])
        assert np.abs(cur - prev).max() <= drift_max
        prev = cur


def test_zero_drift_gives_identical_masks():
    cfg = phantom.PhantomConfig(num_slices=9, drift_max_px=0.0, seed=3)
    st = phantom.generate_phantom_stack(cfg, "p0", "s0")
    masks = st.masks()
    for z in range(1, 9):
        assert np.array_equal(masks[z], masks[0])


def test_image_range_and_grid(stack9):
    for p in stack9.pairs:
        assert p.image.min() >= 0.0 and p.image.max() <= 1.0
        snapped = np.round(p.image * 255.0) / 255.0
        assert np.array_equal(p.image, snapped)


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(num_slices=2).validate()
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(height=16).validate()
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(drift_max_px=5.0, min_layer_thickness_px=3).validate()
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(height=32, min_layer_thickness_px=4,
                              boundary_amplitude_px=3.9).validate()


def test_persist_load_roundtrip(tmp_path, stack9):
    out = tmp_path / "stack"
    phantom.persist_stack(stack9, out)
    files = sorted(f.name for f in out.iterdir())
    assert files.count("manifest.json") == 1
    assert sum(f.startswith("image_") for f in files) == 9
    assert sum(f.startswith("mask_") for f in files) == 9
    loaded = phantom.load_stack(out)
    assert loaded.equals(stack9)


def test_load_rejects_bad_label(tmp_path, stack9):
    out = tmp_path / "stack"
    phantom.persist_stack(stack9, out)
    bad = np.asarray(Image.open(out / "mask_0003.png")).copy()
    bad[0, 0] = 7
    Image.fromarray(bad, mode="L").save(out / "mask_0003.png")
    with pytest.raises(FormatError, match="mask_0003"):
        phantom.load_stack(out)


def test_load_rejects_missing_manifest(tmp_path):
    with pytest.raises(FormatError, match="manifest"):
        phantom.load_stack(tmp_path)


def test_load_rejects_shape_mismatch(tmp_path, stack9):
    out = tmp_path / "stack"
    phantom.persist_stack(stack9, out)
    small = np.zeros((32, 64), dtype=np.uint8)
    Image.fromarray(small, mode="L").save(out / "mask_0002.png")
    with pytest.raises(FormatError, match="0002"):
        phantom.load_stack(out)


def _cohort(n, cfg=None):
    cfg = cfg or phantom.PhantomConfig(num_slices=5, seed=1)
    return phantom.make_phantom_cohort(cfg, n)


def test_split_19_10():
    patients = [f"p{i:03d}" for i in range(29)]
    stacks = _cohort(29)
    spec = phantom.SplitSpec(subset_a_patients=patients[:19], subset_b_patients=patients[19:])
    split = phantom.split_dataset(stacks, spec, seed=0)
    sets = split.patient_sets()
    assert len(sets["train"] | sets["val"] | sets["test"]) == 19
    assert len(sets["subset_b"]) == 10
    phantom.assert_no_patient_leakage(split)


def test_split_single_patient_all_in_a():
    stacks = _cohort(1)
    spec = phantom.SplitSpec(subset_a_patients=["p000"], subset_b_patients=[])
    split = phantom.split_dataset(stacks, spec, seed=0)
    assert [s.patient_id for s in split.train] == ["p000"]
    assert split.subset_b == [] and split.val == [] and split.test == []


def test_split_one_per_subset():
    stacks = _cohort(2)
    spec = phantom.SplitSpec(subset_a_patients=["p000"], subset_b_patients=["p001"])
    split = phantom.split_dataset(stacks, spec, seed=0)
    assert {s.patient_id for s in split.train} == {"p000"}
    assert {s.patient_id for s in split.subset_b} == {"p001"}


def test_split_rejects_patient_in_both_subsets():
    spec = phantom.SplitSpec(subset_a_patients=["p000"], subset_b_patients=["p000"])
    with pytest.raises(SplitError):
        spec.validate()


def test_split_rejects_uncovered_patient():
    stacks = _cohort(2)
    spec = phantom.SplitSpec(subset_a_patients=["p000"], subset_b_patients=[])
    with pytest.raises(SplitError, match="p001"):
        phantom.split_dataset(stacks, spec, seed=0)


def test_split_deterministic_given_seed():
    stacks = _cohort(8)
    patients = sorted({s.patient_id for s in stacks})
    spec = phantom.SplitSpec(subset_a_patients=patients[:6], subset_b_patients=patients[6:])
    s1 = phantom.split_dataset(stacks, spec, seed=5).patient_sets()
    s2 = phantom.split_dataset(stacks, spec, seed=5).patient_sets()
    assert s1 == s2


def test_explicit_split_lists():
    stacks = _cohort(4)
    spec = phantom.SplitSpec(
        subset_a_patients=["p000", "p001", "p002"], subset_b_patients=["p003"],
        train_patients=["p000"], val_patients=["p001"], test_patients=["p002"])
    split = phantom.split_dataset(stacks, spec, seed=0)
    assert {s.patient_id for s in split.train} == {"p000"}
    assert {s.patient_id for s in split.val} == {"p001"}
    assert {s.patient_id for s in split.test} == {"p002"}


def test_manifest_contents(tmp_path, stack9):
    phantom.persist_stack(stack9, tmp_path / "s")
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert manifest == {
        "patient_id": "p000", "scan_id": "p000_s0", "side": "left", "location": "MF",
        "num_slices": 9, "height": 64, "width": 64, "pixel_spacing_mm": 0.1,
        "format_version": 1,
    }
