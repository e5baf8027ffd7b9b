import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdgan.ct_ingest import (
    DatasetManifest,
    HUVolume,
    ManifestEntry,
    PhaseLabel,
    extract_axial_slices,
    load_slices,
    phase_code,
    read_manifest,
    read_pgm,
    read_volume,
    validate_phase_code,
    window_and_scale,
    write_manifest,
    write_pgm,
    write_volume,
)
from cdgan.errors import FormatError, InvalidInputError, SliceRangeError


@pytest.mark.parametrize("hu, expected", [(-1000, -1.0), (0, 0.0), (2500, 1.0), (500, 0.5), (-3000, -1.0)])
def test_window_and_scale_examples(hu, expected):
    assert window_and_scale(np.array([[hu]]))[0, 0] == pytest.approx(expected, abs=0)


def test_window_and_scale_rejects_empty():
    with pytest.raises(InvalidInputError):
        window_and_scale(np.zeros((0, 4)))


@given(st.lists(st.integers(-32768, 32767), min_size=2, max_size=50))
def test_window_is_monotone_and_bounded(values):
    hu = np.sort(np.array(values, dtype=np.int16))
    out = window_and_scale(hu[None, :])[0]
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= -1.0 and out.max() <= 1.0
    assert out.shape == hu.shape


def test_phase_codes():
    assert list(PhaseLabel) == [0, 1, 2]
    np.testing.assert_array_equal(phase_code(PhaseLabel.DELAYED), [0, 0, 1])
    codes = phase_code([0, 1, 2])
    validate_phase_code(codes)
    assert np.all(codes.sum(axis=1) == 1)
    with pytest.raises(InvalidInputError):
        validate_phase_code(np.array([0.5, 0.5, 0]))
    with pytest.raises(InvalidInputError):
        phase_code(3)


def _volume(n=80, value=0, shape=(8, 8)):
    return HUVolume(np.full((n, *shape), value, dtype=np.int16), (2.0, 0.8, 0.8), "s1", PhaseLabel.PORTAL_VENOUS)


def test_extract_all_slices():
    slices = extract_axial_slices(_volume(80))
    assert len(slices) == 80
    assert [s.slice_index for s in slices] == list(range(80))
    assert all(s.phase == PhaseLabel.PORTAL_VENOUS and s.subject_id == "s1" for s in slices)


def test_extract_range_and_constant_volume():
    slices = extract_axial_slices(_volume(80), (10, 19))
    assert [s.slice_index for s in slices] == list(range(10, 20))
    assert all(np.all(s.pixels == 0.0) for s in slices)


def test_extract_preserves_in_window_values():
    rng = np.random.default_rng(0)
    vox = rng.integers(-1000, 1001, size=(5, 6, 7)).astype(np.int16)
    vol = HUVolume(vox, (1, 1, 1), "x")
    slices = extract_axial_slices(vol)
    np.testing.assert_array_equal(np.stack([s.pixels for s in slices]), (vox / 1000.0).astype(np.float32))
    assert (slices[0].height, slices[0].width) == (6, 7)


@pytest.mark.parametrize("rng_", [(-1, 3), (0, 80), (5, 4)])
def test_extract_out_of_bounds(rng_):
    with pytest.raises(SliceRangeError):
        extract_axial_slices(_volume(80), rng_)


def test_volume_round_trip(tmp_path):
    vol = HUVolume(np.full((4, 4, 4), 100, np.int16), (0.8, 0.8, 2.0), "abc", PhaseLabel.DELAYED)
    write_volume(vol, tmp_path / "v.json")
    back = read_volume(tmp_path / "v.json")
    assert back.voxels.dtype == np.int16
    np.testing.assert_array_equal(back.voxels, vol.voxels)
    assert back.spacing_mm == (0.8, 0.8, 2.0)
    assert back.subject_id == "abc" and back.phase == PhaseLabel.DELAYED
    header = json.loads((tmp_path / "v.json").read_text())
    assert header["dtype"] == "int16le" and header["dims"] == [4, 4, 4]


def test_volume_round_trip_random_and_unknown_phase(tmp_path):
    vox = np.random.default_rng(1).integers(-32768, 32768, size=(3, 5, 2)).astype(np.int16)
    vol = HUVolume(vox, (5.0, 6.4, 6.4), "u", None)
    back = read_volume(write_volume(vol, tmp_path / "u"))
    assert back.voxels.tobytes() == vox.tobytes()
    assert back.phase is None


def test_short_raster_is_format_error(tmp_path):
    write_volume(_volume(4), tmp_path / "v.json")
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-2])
    with pytest.raises(FormatError):
        read_volume(tmp_path / "v.json")


def test_unknown_phase_is_format_error(tmp_path):
    write_volume(_volume(2), tmp_path / "v.json")
    header = json.loads((tmp_path / "v.json").read_text())
    header["phase"] = "arterial"
    (tmp_path / "v.json").write_text(json.dumps(header))
    with pytest.raises(FormatError):
        read_volume(tmp_path / "v.json")


def test_invalid_volume_rejected():
    with pytest.raises(InvalidInputError):
        HUVolume(np.zeros((2, 2, 2), np.int16), (1, 0, 1), "x")
    with pytest.raises(InvalidInputError):
        HUVolume(np.zeros((0, 2, 2), np.int16), (1, 1, 1), "x")


def test_manifest_round_trip(tmp_path):
    m = DatasetManifest([
        ManifestEntry("volumes/a.json", "a", PhaseLabel.NON_CONTRAST),
        ManifestEntry("volumes/b.json", "b", PhaseLabel.DELAYED, (2, 5)),
    ], "test", root=tmp_path)
    write_manifest(m, tmp_path / "m.jsonl")
    back = read_manifest(tmp_path / "m.jsonl")
    assert back.split == "test"
    assert back.entries == m.entries
    assert back.root == tmp_path
    write_manifest(back, tmp_path / "m2.jsonl")
    assert (tmp_path / "m.jsonl").read_bytes() == (tmp_path / "m2.jsonl").read_bytes()


def test_manifest_rejects_duplicate_paths():
    e = ManifestEntry("v.json", "a", PhaseLabel.NON_CONTRAST)
    with pytest.raises(InvalidInputError):
        DatasetManifest([e, ManifestEntry("v.json", "b", PhaseLabel.DELAYED)], "train")


def test_load_slices_respects_ranges(tmp_path):
    write_volume(_volume(6, value=300), tmp_path / "a.json")
    m = DatasetManifest([ManifestEntry("a.json", "s1", PhaseLabel.PORTAL_VENOUS, (1, 3))], "train", root=tmp_path)
    s = load_slices(m)
    assert s.pixels.shape == (3, 8, 8)
    assert list(s.slice_indices) == [1, 2, 3]
    assert np.all(s.pixels == np.float32(0.3))
    assert list(s.labels) == [1, 1, 1]


def test_pgm_round_trip(tmp_path):
    px = np.linspace(-1, 1, 30).reshape(5, 6)
    img = read_pgm(write_pgm(px, tmp_path / "x.pgm"))
    assert img.shape == (5, 6)
    assert img[0, 0] == 0 and img[-1, -1] == 255
