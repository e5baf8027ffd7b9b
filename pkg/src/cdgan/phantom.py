"""Procedural abdominal phantoms with phase-dependent contrast enhancement.

Each subject is a stack of ellipse-composited axial slices (body, liver,
spleen, kidneys with collecting systems, spine, aorta). Anatomy depends only
on ``(seed, subject_index)``, so one subject scanned in several phases shares
its geometry and differs only in enhancement and noise.

All randomness comes from Philox streams keyed by
``(seed, subject_index, stream, phase, slice)``, which makes every volume
independent of generation order.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .ct_ingest import (
    HU_MAX,
    HU_MIN,
    DatasetManifest,
    HUVolume,
    ManifestEntry,
    PhaseLabel,
    write_manifest,
    write_volume,
)
from .errors import ConfigurationError

ORGANS = (
    "soft_tissue",
    "liver",
    "spleen",
    "kidney_cortex",
    "urinary_system",
    "spine",
    "aorta",
)
# label-map codes; 0 is air
ORGAN_CODES = {name: i + 1 for i, name in enumerate(ORGANS)}
AIR_HU = -1000

# baseline HU, then deltas for (non-contrast, portal venous, delayed)
DEFAULT_ENHANCEMENT = {
    "soft_tissue": (40, (0, 10, 5)),
    "spine": (700, (0, 0, 0)),
    "aorta": (45, (0, 120, 30)),
    "liver": (55, (0, 60, 20)),
    "spleen": (50, (0, 70, 20)),
    "kidney_cortex": (40, (0, 90, 40)),
    "urinary_system": (10, (0, 30, 250)),
}

_STREAM_GEOMETRY = 0
_STREAM_NOISE = 1
_STREAM_LABEL = 2
_STREAM_SPLIT = 3


@dataclass
class EnhancementTable:
    baseline: dict = field(default_factory=lambda: {k: v[0] for k, v in DEFAULT_ENHANCEMENT.items()})
    delta: dict = field(default_factory=lambda: {k: tuple(v[1]) for k, v in DEFAULT_ENHANCEMENT.items()})

    def validate(self):
        for organ in ORGANS:
            if organ not in self.baseline or organ not in self.delta:
                raise ConfigurationError(f"enhancement table is missing organ {organ!r}")
            base = self.baseline[organ]
            if not HU_MIN <= base <= HU_MAX:
                raise ConfigurationError(f"enhancement.baseline.{organ} outside [-1000, 1000]")
            if len(self.delta[organ]) != 3:
                raise ConfigurationError(f"enhancement.delta.{organ} needs one value per phase")
            for d in self.delta[organ]:
                if not HU_MIN <= base + d <= HU_MAX:
                    raise ConfigurationError(f"enhancement.delta.{organ} pushes HU outside [-1000, 1000]")

    def hu(self, organ: str, phase: PhaseLabel, overlap: float = 0.0) -> float:
        return self.baseline[organ] + self.delta[organ][int(phase)] * (1.0 - overlap)


@dataclass
class PhantomSpec:
    image_size: tuple = (64, 64)
    slices_per_volume: int = 20
    # kept small: with few subjects per phase, larger anatomy jitter lets a
    # classifier memorize subjects instead of reading contrast
    center_jitter: float = 0.01
    radius_jitter: float = 0.02
    intensity_jitter_hu: int = 10
    enhancement: EnhancementTable = field(default_factory=EnhancementTable)
    noise_sigma_hu: float = 20.0
    enhancement_overlap: float = 0.0
    label_noise: float = 0.0
    slice_thickness_mm: float = 5.0
    seed: int = 0

    def validate(self):
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ConfigurationError("image_size must be positive")
        if self.slices_per_volume <= 0:
            raise ConfigurationError("slices_per_volume must be positive")
        if not 0.0 <= self.enhancement_overlap <= 1.0:
            raise ConfigurationError(f"enhancement_overlap must lie in [0, 1], got {self.enhancement_overlap}")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ConfigurationError(f"label_noise must lie in [0, 1], got {self.label_noise}")
        if self.noise_sigma_hu < 0:
            raise ConfigurationError("noise_sigma_hu must be non-negative")
        if not 0.0 <= self.center_jitter < 0.5 or not 0.0 <= self.radius_jitter < 1.0:
            raise ConfigurationError("center_jitter must be in [0, 0.5) and radius_jitter in [0, 1)")
        if self.intensity_jitter_hu < 0:
            raise ConfigurationError("intensity_jitter_hu must be non-negative")
        if self.slice_thickness_mm <= 0:
            raise ConfigurationError("slice_thickness_mm must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")
        self.enhancement.validate()
        return self

    @property
    def spacing_mm(self) -> tuple:
        # same field of view as 512 x 512 pixels at 0.8 mm
        h, w = self.image_size
        return (self.slice_thickness_mm, 0.8 * 512 / h, 0.8 * 512 / w)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        d["enhancement"] = {
            "baseline": dict(self.enhancement.baseline),
            "delta": {k: list(v) for k, v in self.enhancement.delta.items()},
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown phantom spec field(s): {', '.join(sorted(unknown))}")
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        if "enhancement" in d:
            enh = d["enhancement"]
            table = EnhancementTable()
            table.baseline.update(enh.get("baseline", {}))
            table.delta.update({k: tuple(v) for k, v in enh.get("delta", {}).items()})
            d["enhancement"] = table
        return cls(**d)


def _rng(seed: int, subject_index: int, stream: int, *extra: int) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed), int(subject_index), stream, *map(int, extra)])
    return np.random.Generator(np.random.Philox(key))


# nominal layout in normalized image coordinates: (cx, cy, rx, ry)
_LAYOUT = {
    "soft_tissue": (0.50, 0.52, 0.42, 0.32),
    "liver": (0.32, 0.45, 0.17, 0.15),
    "spleen": (0.72, 0.47, 0.08, 0.09),
    "kidney_left": (0.36, 0.63, 0.065, 0.085),
    "kidney_right": (0.64, 0.63, 0.065, 0.085),
    "spine": (0.50, 0.74, 0.06, 0.06),
    "aorta": (0.53, 0.58, 0.035, 0.035),
}


def _slice_scale(part: str, z: float) -> float:
    """Cranio-caudal size profile; z in (0, 1) runs from top to bottom slice."""
    if part == "liver":
        return 1.0 - 0.45 * z
    if part == "spleen":
        return 0.75 + 0.25 * np.sin(np.pi * z)
    if part.startswith("kidney"):
        return 0.7 + 0.3 * np.sin(np.pi * z)
    if part == "soft_tissue":
        return 1.0 - 0.05 * z
    return 1.0


@dataclass
class SubjectAnatomy:
    ellipses: dict
    hu_offset: dict


def subject_anatomy(spec: PhantomSpec, subject_index: int) -> SubjectAnatomy:
    rng = _rng(spec.seed, subject_index, _STREAM_GEOMETRY)
    ellipses = {}
    for part, (cx, cy, rx, ry) in _LAYOUT.items():
        dx, dy = rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
        sx, sy = 1.0 + rng.uniform(-spec.radius_jitter, spec.radius_jitter, size=2)
        ellipses[part] = (cx + dx, cy + dy, rx * sx, ry * sy)
    j = spec.intensity_jitter_hu
    offsets = {organ: int(rng.integers(-j, j + 1)) for organ in ORGANS}
    offsets["spine"] = 0
    return SubjectAnatomy(ellipses, offsets)


def organ_label_map(spec: PhantomSpec, subject_index: int) -> np.ndarray:
    """Integer organ codes (0 = air) of shape (slices, H, W); organs are disjoint."""
    anatomy = subject_anatomy(spec, subject_index)
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    n = spec.slices_per_volume
    labels = np.zeros((n, h, w), dtype=np.int8)

    def inside(part, z, shrink=1.0):
        cx, cy, rx, ry = anatomy.ellipses[part]
        s = _slice_scale(part, z) * shrink
        return ((u - cx) / (rx * s)) ** 2 + ((v - cy) / (ry * s)) ** 2 <= 1.0

    for k in range(n):
        z = (k + 0.5) / n
        lab = labels[k]
        lab[inside("soft_tissue", z)] = ORGAN_CODES["soft_tissue"]
        lab[inside("liver", z)] = ORGAN_CODES["liver"]
        lab[inside("spleen", z)] = ORGAN_CODES["spleen"]
        for side in ("kidney_left", "kidney_right"):
            lab[inside(side, z)] = ORGAN_CODES["kidney_cortex"]
            lab[inside(side, z, shrink=0.45)] = ORGAN_CODES["urinary_system"]
        lab[inside("spine", z)] = ORGAN_CODES["spine"]
        lab[inside("aorta", z)] = ORGAN_CODES["aorta"]
    return labels


def organ_masks(spec: PhantomSpec, subject_index: int) -> dict:
    labels = organ_label_map(spec, subject_index)
    return {organ: labels == code for organ, code in ORGAN_CODES.items()}


def noiseless_hu(spec: PhantomSpec, phase: PhaseLabel, subject_index: int) -> np.ndarray:
    """Painted HU before noise, as float64; every value lies in [-1000, 1000]."""
    anatomy = subject_anatomy(spec, subject_index)
    labels = organ_label_map(spec, subject_index)
    lut = np.full(len(ORGANS) + 1, AIR_HU, dtype=np.float64)
    for organ, code in ORGAN_CODES.items():
        value = spec.enhancement.hu(organ, phase, spec.enhancement_overlap) + anatomy.hu_offset[organ]
        lut[code] = np.clip(value, HU_MIN, HU_MAX)
    return lut[labels]


def generate_phantom_volume(spec: PhantomSpec, phase, subject_index: int,
                            subject_id: Optional[str] = None) -> HUVolume:
    spec.validate()
    phase = PhaseLabel(phase)
    hu = noiseless_hu(spec, phase, subject_index)
    if spec.noise_sigma_hu > 0:
        for k in range(hu.shape[0]):
            rng = _rng(spec.seed, subject_index, _STREAM_NOISE, int(phase), k)
            hu[k] += rng.normal(0.0, spec.noise_sigma_hu, size=hu.shape[1:])
    voxels = np.rint(np.clip(hu, HU_MIN, HU_MAX)).astype(np.int16)
    if subject_id is None:
        subject_id = subject_name(subject_index)
    return HUVolume(voxels, spec.spacing_mm, subject_id, phase)


def subject_name(subject_index: int) -> str:
    return f"subj{subject_index:03d}"


def _rle(mask: np.ndarray) -> list:
    flat = mask.ravel().astype(np.int8)
    edges = np.flatnonzero(np.diff(np.concatenate([[0], flat, [0]])))
    starts, stops = edges[::2], edges[1::2]
    return [[int(a), int(b - a)] for a, b in zip(starts, stops)]


def rle_decode(runs: list, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    for start, length in runs:
        flat[start:start + length] = True
    return flat.reshape(shape)


def write_masks(spec: PhantomSpec, subject_index: int, path) -> Path:
    masks = organ_masks(spec, subject_index)
    shape = next(iter(masks.values())).shape
    doc = {"shape": list(shape), "order": "C", "masks": {k: _rle(m) for k, m in masks.items()}}
    path = Path(path)
    path.write_text(json.dumps(doc) + "\n")
    return path


def split_subjects(spec: PhantomSpec, subjects_per_phase: int, split_fraction: float):
    """Subject indices for (train, test) plus the train subjects' phases.

    The pool holds ``3 * subjects_per_phase`` subjects. ``round(pool * split_fraction)``
    of them are training subjects, each scanned in one phase (assigned round-robin);
    the rest are test subjects scanned in all three phases.
    """
    if subjects_per_phase < 1:
        raise ConfigurationError("subjects_per_phase must be at least 1")
    if not 0.0 < split_fraction < 1.0:
        raise ConfigurationError("split_fraction must lie strictly between 0 and 1")
    pool = 3 * subjects_per_phase
    n_train = int(round(pool * split_fraction))
    if n_train < 1 or n_train >= pool:
        raise ConfigurationError(
            f"split_fraction {split_fraction} leaves an empty train or test set for {pool} subjects")
    order = _rng(spec.seed, 0, _STREAM_SPLIT).permutation(pool)
    train = sorted(int(i) for i in order[:n_train])
    test = sorted(int(i) for i in order[n_train:])
    phases = {s: PhaseLabel(i % 3) for i, s in enumerate(train)}
    return train, test, phases


def _recorded_phase(spec: PhantomSpec, subject_index: int, phase: PhaseLabel) -> PhaseLabel:
    if spec.label_noise <= 0:
        return phase
    rng = _rng(spec.seed, subject_index, _STREAM_LABEL)
    if rng.uniform() < spec.label_noise:
        return PhaseLabel((int(phase) + int(rng.integers(1, 3))) % 3)
    return phase


def generate_dataset(spec: PhantomSpec, subjects_per_phase: int, split_fraction: float,
                     out_dir, masks: bool = False):
    """Write phantom volumes plus ``train.jsonl`` / ``test.jsonl`` manifests under ``out_dir``.

    Label noise applies to training volumes only: a flipped volume keeps its
    true enhancement but is recorded under a different phase.
    """
    spec.validate()
    out_dir = Path(out_dir)
    train_ids, test_ids, train_phases = split_subjects(spec, subjects_per_phase, split_fraction)

    def emit(subject_index, phase, recorded):
        name = f"{subject_name(subject_index)}_{phase.wire_name}"
        rel = f"volumes/{name}.json"
        vol = generate_phantom_volume(spec, phase, subject_index)
        vol.phase = recorded
        try:
            write_volume(vol, out_dir / rel)
            if masks:
                write_masks(spec, subject_index, out_dir / "volumes" / f"{name}.masks.json")
        except OSError as exc:
            raise OSError(f"failed writing phantom volume {out_dir / rel}: {exc}") from exc
        return ManifestEntry(rel, vol.subject_id, recorded)

    train_entries = []
    for s in train_ids:
        true_phase = train_phases[s]
        train_entries.append(emit(s, true_phase, _recorded_phase(spec, s, true_phase)))
    test_entries = [emit(s, p, p) for s in test_ids for p in PhaseLabel]

    train = DatasetManifest(train_entries, "train", root=out_dir)
    test = DatasetManifest(test_entries, "test", root=out_dir)
    write_manifest(train, out_dir / "train.jsonl")
    write_manifest(test, out_dir / "test.jsonl")
    return train, test
