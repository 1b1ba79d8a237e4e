"""Dataset assembly for the 3-class task.

Manifest ingestion, subject-wise stratified 5-fold planning, median-slice
3-channel image extraction, neighbor-slice class balancing, and flip
augmentation. All randomness is seeded; plans and slices are deterministic
functions of their inputs.
"""

from __future__ import annotations

import csv
import json
import math
import os
import random
from dataclasses import dataclass, field, replace

import numpy as np

from .core import LABELS, stable_json
from .nifti import Volume3D

MODALITIES = ("T1w", "FA", "MD", "Black")
IMAGE_SIZE = 224
MANIFEST_COLUMNS = (
    "subject_id",
    "session_id",
    "label",
    "t1w_path",
    "dwi_path",
    "bval_path",
    "bvec_path",
)


class DatasetError(Exception):
    pass


class BadLabel(DatasetError):
    pass


class PartialDwiTriple(DatasetError):
    pass


class DuplicateRow(DatasetError):
    pass


class EmptyRecord(DatasetError):
    pass


class OffsetOutOfRange(DatasetError):
    pass


@dataclass
class SubjectRecord:
    """One (subject, session) manifest row; empty paths mean absent."""

    subject_id: str
    session_id: str
    label: str
    t1w_path: str | None = None
    dwi_path: str | None = None
    bval_path: str | None = None
    bvec_path: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise BadLabel(f"label {self.label!r} is not one of {LABELS}")
        triple = (self.dwi_path, self.bval_path, self.bvec_path)
        present = [p is not None for p in triple]
        if any(present) and not all(present):
            raise PartialDwiTriple(
                f"{self.subject_id}/{self.session_id}: dwi/bval/bvec must be all present or all absent"
            )
        if self.t1w_path is None and not all(present):
            raise EmptyRecord(f"{self.subject_id}/{self.session_id} has no usable modality")

    @property
    def has_t1w(self) -> bool:
        return self.t1w_path is not None

    @property
    def has_dwi(self) -> bool:
        return self.dwi_path is not None

    def availability_group(self) -> str:
        if self.has_t1w and self.has_dwi:
            return "both"
        return "t1w_only" if self.has_t1w else "dti_only"


def load_manifest(path) -> list:
    """Read and validate the cohort CSV; relative paths resolve against
    the manifest's own directory."""
    base = os.path.dirname(os.path.abspath(path))

    def resolve(cell):
        cell = cell.strip()
        if not cell:
            return None
        return cell if os.path.isabs(cell) else os.path.join(base, cell)

    records = []
    seen = set()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise DatasetError(f"manifest header must be {','.join(MANIFEST_COLUMNS)}")
        for row in reader:
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise DatasetError(f"row has {len(row)} cells, expected {len(MANIFEST_COLUMNS)}")
            sid, session, label = (row[0].strip(), row[1].strip(), row[2].strip())
            key = (sid, session)
            if key in seen:
                raise DuplicateRow(f"duplicate (subject_id, session_id) = {key}")
            seen.add(key)
            records.append(
                SubjectRecord(
                    sid,
                    session,
                    label,
                    resolve(row[3]),
                    resolve(row[4]),
                    resolve(row[5]),
                    resolve(row[6]),
                )
            )
    return records


#### fold planning ####


@dataclass
class FoldPlan:
    """Subject -> fold assignment; splits derive from it on demand."""

    fold_count: int
    assignment: dict
    notes: list = field(default_factory=list)

    def test_subjects(self, fold: int) -> list:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def train_subjects(self, fold: int) -> list:
        return sorted(s for s, f in self.assignment.items() if f != fold)

    def split_records(self, records, fold: int):
        """(train, test) record lists for one fold; a subject's sessions
        always travel together."""
        train = [r for r in records if self.assignment[r.subject_id] != fold]
        test = [r for r in records if self.assignment[r.subject_id] == fold]
        return train, test

    def group_split(self, records, fold: int) -> dict:
        """Per availability group: {'both': (train, test), ...}."""
        train, test = self.split_records(records, fold)
        out = {}
        for g in ("both", "t1w_only", "dti_only"):
            out[g] = (
                [r for r in train if r.availability_group() == g],
                [r for r in test if r.availability_group() == g],
            )
        return out

    def to_json(self) -> str:
        return stable_json(
            {"fold_count": self.fold_count, "assignment": self.assignment, "notes": self.notes}
        )

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        d = json.loads(text)
        return cls(int(d["fold_count"]), dict(d["assignment"]), list(d.get("notes", [])))


def _subject_strata(records) -> dict:
    """subject_id -> (availability group, label), cumulative over sessions.

    The label comes from the subject's first session (sorted by session id);
    modality availability accumulates across sessions.
    """
    by_subject = {}
    for r in records:
        by_subject.setdefault(r.subject_id, []).append(r)
    strata = {}
    for sid, rows in by_subject.items():
        rows = sorted(rows, key=lambda r: r.session_id)
        has_t1w = any(r.has_t1w for r in rows)
        has_dwi = any(r.has_dwi for r in rows)
        if has_t1w and has_dwi:
            group = "both"
        elif has_t1w:
            group = "t1w_only"
        else:
            group = "dti_only"
        strata[sid] = (group, rows[0].label)
    return strata


def plan_folds(records, seed: int, fold_count: int = 5) -> FoldPlan:
    """Deal subjects round-robin into folds, stratified by
    (availability group, label).

    Subjects are sorted then shuffled with a per-stratum seeded RNG, so the
    plan depends only on the record set and the seed, not on manifest row
    order. Strata smaller than fold_count degrade to a best-effort deal and
    are recorded in the plan's notes.
    """
    strata = _subject_strata(records)
    by_stratum = {}
    for sid, key in strata.items():
        by_stratum.setdefault(key, []).append(sid)
    assignment = {}
    notes = []
    for key in sorted(by_stratum):
        group, label = key
        subjects = sorted(by_stratum[key])
        # string seeds hash identically across runs, unlike Python objects
        rng = random.Random(f"{seed}|{group}|{label}")
        rng.shuffle(subjects)
        if len(subjects) < fold_count:
            notes.append(
                f"stratum ({group}, {label}) has {len(subjects)} subjects for {fold_count} folds"
            )
        for i, sid in enumerate(subjects):
            assignment[sid] = i % fold_count
    return FoldPlan(fold_count, assignment, notes)


#### slice images ####


@dataclass
class SliceImage:
    """Square H=W multi-channel image in [0,1]; channels are the
    (sagittal, coronal, axial) slices of one volume."""

    pixels: np.ndarray
    modality: str
    label: str
    subject_id: str
    slice_offset: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be HxWx3, got {self.pixels.shape}")
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"pixels must be square, got {self.pixels.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality {self.modality!r} not in {MODALITIES}")
        if self.label not in LABELS:
            raise BadLabel(f"label {self.label!r} is not one of {LABELS}")
        lo = float(self.pixels.min()) if self.pixels.size else 0.0
        hi = float(self.pixels.max()) if self.pixels.size else 0.0
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixels must lie in [0,1], got [{lo}, {hi}]")


def _normalize_channel(plane: np.ndarray) -> np.ndarray:
    lo = plane.min()
    hi = plane.max()
    if hi <= lo:
        return np.zeros_like(plane)
    return (plane - lo) / (hi - lo)


def _resize_nearest(plane: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor resize with pixel-center sampling."""
    h, w = plane.shape
    rows = np.minimum((np.arange(size) + 0.5) * (h / size), h - 1).astype(np.int64)
    cols = np.minimum((np.arange(size) + 0.5) * (w / size), w - 1).astype(np.int64)
    return plane[np.ix_(rows, cols)]


def extract_slices(
    volume: Volume3D, modality: str, label: str, subject_id: str, offset: int = 0
) -> SliceImage:
    """Median-plus-offset slice along each axis, normalized and resized.

    Slice index is floor(d/2) + offset per axis; each channel is min-max
    normalized to [0,1] (constant slices become all 0) and resized to
    224x224 by nearest neighbor.
    """
    if abs(offset) >= min(volume.dims) / 2:
        raise OffsetOutOfRange(f"|offset| {abs(offset)} >= min(dims)/2 for dims {volume.dims}")
    channels = []
    for axis in range(3):
        idx = volume.dims[axis] // 2 + offset
        plane = np.take(volume.data, idx, axis=axis)
        channels.append(_resize_nearest(_normalize_channel(plane), IMAGE_SIZE))
    pixels = np.stack(channels, axis=-1).astype(np.float32)
    # float32 rounding must not poke above 1.0
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return SliceImage(pixels, modality, label, subject_id, offset)


def black_image(label: str, subject_id: str, size: int = IMAGE_SIZE) -> SliceImage:
    """All-zero stand-in for a missing modality."""
    return SliceImage(np.zeros((size, size, 3), dtype=np.float32), "Black", label, subject_id)


#### class balancing ####


@dataclass
class SliceSource:
    """A source volume paired with its median (offset-0) SliceImage."""

    volume: Volume3D
    image: SliceImage


def make_source(volume: Volume3D, modality: str, label: str, subject_id: str) -> SliceSource:
    return SliceSource(volume, extract_slices(volume, modality, label, subject_id, 0))


def max_offset(volume: Volume3D) -> int:
    """Largest usable |offset| for extract_slices on this volume."""
    return int(math.ceil(min(volume.dims) / 2)) - 1


def balance_classes(sources, tolerance: float = 0.1) -> list:
    """Top minority classes up with neighboring slices of their volumes.

    Extra images are generated at offsets +1, -1, +2, -2, ... cycling
    through the class's volumes in input (manifest) order, until the class
    count reaches (1 - tolerance) x majority count or every volume has run
    out of offsets. The majority class is never touched, nothing is removed,
    and no (volume, offset) pair repeats.
    """
    images = [s.image for s in sources]
    counts = {lab: sum(1 for im in images if im.label == lab) for lab in LABELS}
    majority = max(counts.values()) if counts else 0
    target = (1.0 - tolerance) * majority
    out = list(images)
    for lab in LABELS:
        have = counts[lab]
        if have >= target or have == 0:
            continue
        mine = [s for s in sources if s.image.label == lab]
        limit = max(max_offset(s.volume) for s in mine)
        for magnitude in range(1, limit + 1):
            for off in (magnitude, -magnitude):
                for s in mine:
                    if have >= target:
                        break
                    if magnitude > max_offset(s.volume):
                        continue
                    out.append(
                        extract_slices(
                            s.volume, s.image.modality, s.image.label, s.image.subject_id, off
                        )
                    )
                    have += 1
            if have >= target:
                break
    return out


#### augmentation ####


def augment(image: SliceImage, rng) -> SliceImage:
    """Independent 50% horizontal and vertical flips of all channels.

    Consumes exactly two uniform draws (horizontal decided first) so the
    stream position of a shared generator stays predictable.
    """
    flip_h = rng.random() < 0.5
    flip_v = rng.random() < 0.5
    px = image.pixels
    if flip_h:
        px = px[:, ::-1]
    if flip_v:
        px = px[::-1]
    if flip_h or flip_v:
        px = np.ascontiguousarray(px)
    return replace(image, pixels=px)
