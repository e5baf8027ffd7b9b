"""Volume I/O, HU windowing and axial slice extraction.

Volumes live on disk as a pair of files: ``<name>.json`` holding the header
and ``<name>.raw`` holding little-endian int16 voxels in slice-major order.
Manifests are JSON-lines files with one entry per volume.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, InvalidInputError, SliceRangeError

HU_MIN = -1000
HU_MAX = 1000
NUM_PHASES = 3


class PhaseLabel(enum.IntEnum):
    NON_CONTRAST = 0
    PORTAL_VENOUS = 1
    DELAYED = 2

    @property
    def wire_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_wire(cls, name: str) -> "PhaseLabel":
        try:
            return cls[name.upper()]
        except KeyError:
            raise FormatError(f"unknown phase {name!r}") from None


def phase_to_wire(phase: Optional[PhaseLabel]) -> str:
    return "unknown" if phase is None else PhaseLabel(phase).wire_name


def phase_from_wire(name: str) -> Optional[PhaseLabel]:
    if name == "unknown":
        return None
    return PhaseLabel.from_wire(name)


def phase_code(phase, dtype=np.float32) -> np.ndarray:
    """One-hot contrast code for a phase, or a batch of them."""
    idx = np.asarray(phase, dtype=np.int64)
    if np.any((idx < 0) | (idx >= NUM_PHASES)):
        raise InvalidInputError(f"phase index out of range: {phase!r}")
    return np.eye(NUM_PHASES, dtype=dtype)[idx]


def validate_phase_code(code: np.ndarray) -> None:
    code = np.asarray(code)
    if code.shape[-1] != NUM_PHASES:
        raise InvalidInputError(f"phase code must have length {NUM_PHASES}")
    if not np.all((code == 0) | (code == 1)) or not np.all(code.sum(axis=-1) == 1):
        raise InvalidInputError("phase code must be one-hot")


@dataclass
class HUVolume:
    voxels: np.ndarray
    spacing_mm: tuple
    subject_id: str
    phase: Optional[PhaseLabel] = None

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or v.size == 0:
            raise InvalidInputError(f"volume must be a non-empty 3-D grid, got shape {v.shape}")
        if v.dtype != np.int16:
            if v.min() < np.iinfo(np.int16).min or v.max() > np.iinfo(np.int16).max:
                raise InvalidInputError("HU values exceed the int16 range")
            v = v.astype(np.int16)
        self.voxels = v
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(not s > 0 for s in self.spacing_mm):
            raise InvalidInputError(f"spacing must be three positive values, got {self.spacing_mm}")
        if self.phase is not None:
            self.phase = PhaseLabel(self.phase)

    @property
    def num_slices(self) -> int:
        return self.voxels.shape[0]


@dataclass
class SliceImage:
    pixels: np.ndarray
    phase: Optional[PhaseLabel]
    subject_id: str
    slice_index: int

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def window_and_scale(hu) -> np.ndarray:
    """Clamp HU to [-1000, 1000] and map linearly onto [-1, 1]."""
    hu = np.asarray(hu)
    if hu.size == 0:
        raise InvalidInputError("cannot window an empty grid")
    clipped = np.clip(hu.astype(np.float64), HU_MIN, HU_MAX)
    return (clipped / HU_MAX).astype(np.float32)


def extract_axial_slices(volume: HUVolume, slice_range=None) -> list:
    """Windowed axial slices for the inclusive ``slice_range`` (all slices if None)."""
    n = volume.num_slices
    if slice_range is None:
        lo, hi = 0, n - 1
    else:
        lo, hi = (int(v) for v in slice_range)
        if lo < 0 or hi >= n or lo > hi:
            raise SliceRangeError(f"slice range [{lo}, {hi}] outside volume of {n} slices")
    return [
        SliceImage(window_and_scale(volume.voxels[i]), volume.phase, volume.subject_id, i)
        for i in range(lo, hi + 1)
    ]


def _volume_paths(path) -> tuple:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".raw")


def write_volume(volume: HUVolume, path) -> Path:
    header_path, raw_path = _volume_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": list(volume.voxels.shape),
        "spacing_mm": list(volume.spacing_mm),
        "subject_id": volume.subject_id,
        "phase": phase_to_wire(volume.phase),
        "dtype": "int16le",
        "raw": raw_path.name,
    }
    raw_path.write_bytes(np.ascontiguousarray(volume.voxels, dtype="<i2").tobytes())
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path


def read_volume(path) -> HUVolume:
    header_path, raw_path = _volume_paths(path)
    try:
        header = json.loads(header_path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{header_path}: bad header ({exc})") from exc
    for key in ("dims", "spacing_mm", "subject_id", "phase", "dtype"):
        if key not in header:
            raise FormatError(f"{header_path}: missing key {key!r}")
    if header["dtype"] != "int16le":
        raise FormatError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    if "raw" in header:
        raw_path = header_path.parent / header["raw"]
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise FormatError(f"{header_path}: bad dims {header['dims']}")
    data = raw_path.read_bytes()
    expected = 2 * int(np.prod(dims))
    if len(data) != expected:
        raise FormatError(f"{raw_path}: raster has {len(data)} bytes, header implies {expected}")
    voxels = np.frombuffer(data, dtype="<i2").reshape(dims).astype(np.int16)
    try:
        return HUVolume(voxels, tuple(header["spacing_mm"]), str(header["subject_id"]),
                        phase_from_wire(header["phase"]))
    except InvalidInputError as exc:
        raise FormatError(f"{header_path}: {exc}") from exc


@dataclass
class ManifestEntry:
    path: str
    subject_id: str
    phase: PhaseLabel
    slice_range: Optional[tuple] = None

    def to_json(self, split: str) -> dict:
        return {
            "path": self.path,
            "subject_id": self.subject_id,
            "phase": phase_to_wire(self.phase),
            "slice_range": None if self.slice_range is None else list(self.slice_range),
            "split": split,
        }


@dataclass
class DatasetManifest:
    entries: list
    split: str
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise InvalidInputError(f"split must be 'train' or 'test', got {self.split!r}")
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise InvalidInputError("manifest paths must be unique")
        for e in self.entries:
            e.phase = PhaseLabel(e.phase)
        self.root = Path(self.root)

    def __len__(self):
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    @property
    def subjects(self) -> list:
        return sorted({e.subject_id for e in self.entries})


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(e.to_json(manifest.split), sort_keys=True) for e in manifest.entries]
    path.write_text("".join(line + "\n" for line in lines))
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    entries, splits = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            phase = phase_from_wire(rec["phase"])
            rng = rec.get("slice_range")
            entries.append(ManifestEntry(rec["path"], rec["subject_id"], phase,
                                         None if rng is None else tuple(rng)))
            splits.add(rec["split"])
        except (KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad manifest entry ({exc})") from exc
        if phase is None:
            raise FormatError(f"{path}:{lineno}: manifest entries need a known phase")
    if len(splits) > 1:
        raise FormatError(f"{path}: mixed splits {sorted(splits)}")
    return DatasetManifest(entries, splits.pop() if splits else "train", root=path.parent)


@dataclass
class SliceSet:
    """Windowed slices of a manifest stacked into arrays, in manifest order."""

    pixels: np.ndarray
    labels: np.ndarray
    subject_ids: list
    slice_indices: np.ndarray

    def __len__(self):
        return len(self.labels)


def load_slices(manifest: DatasetManifest) -> SliceSet:
    pixels, labels, subjects, indices = [], [], [], []
    for entry in manifest.entries:
        vol = read_volume(manifest.resolve(entry))
        for s in extract_axial_slices(vol, entry.slice_range):
            pixels.append(s.pixels)
            labels.append(int(entry.phase))
            subjects.append(entry.subject_id)
            indices.append(s.slice_index)
    if not pixels:
        return SliceSet(np.zeros((0, 0, 0), np.float32), np.zeros(0, np.int64), [],
                        np.zeros(0, np.int64))
    return SliceSet(np.stack(pixels), np.asarray(labels, np.int64), subjects,
                    np.asarray(indices, np.int64))


def write_pgm(pixels: np.ndarray, path) -> Path:
    """Write values in [-1, 1] as an 8-bit binary PGM image."""
    px = np.clip(np.asarray(pixels, dtype=np.float64), -1.0, 1.0)
    img = np.round((px + 1.0) * 127.5).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", data)
    if m is None:
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data[m.end(): m.end() + w * h], dtype=np.uint8).reshape(h, w)
