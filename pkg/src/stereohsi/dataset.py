"""Purity-filtered patch extraction and leave-subjects-out split planning."""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional, Sequence

import numpy as np

from .core import CLASSES, AnnotationMask, Hypercube, read_exact, seeded_rng, _Sink
from .errors import FormatError, SplitError, ValidationError
from .preprocess import SpecularMask

PATCH = 31
N_BANDS = 41
STRIDE = 10
TRAIN_PERCENT = 92
MIN_EVAL_SHARE = 0.12
MAX_COMBINATIONS = 20_000


@dataclass(eq=False)
class PatchSet:
    """Patches of shape (31, 31, 41) with per-patch provenance."""

    data: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    scenes: np.ndarray
    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32).reshape(-1, PATCH, PATCH, N_BANDS)
        n = len(self.data)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(n)
        for name in ("subjects", "scenes", "rows", "cols"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(n))
        if n and (self.labels.min() < 1 or self.labels.max() > len(CLASSES)):
            raise ValidationError("patch labels must be tissue codes 1..5")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, PATCH, PATCH, N_BANDS), np.float32), z, z, z, z, z)

    def subset(self, index) -> "PatchSet":
        index = np.asarray(index)
        return PatchSet(self.data[index], self.labels[index], self.subjects[index],
                        self.scenes[index], self.rows[index], self.cols[index])

    @classmethod
    def concatenate(cls, sets: Sequence["PatchSet"]) -> "PatchSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(*(np.concatenate([getattr(s, f) for s in sets])
                     for f in ("data", "labels", "subjects", "scenes", "rows", "cols")))

    def class_histogram(self) -> dict:
        counts = np.bincount(self.labels, minlength=len(CLASSES) + 1)
        return {c: int(counts[int(c)]) for c in CLASSES}

    def keys(self):
        """Identity tuples (subject, scene, row, col, label), one per patch."""
        return list(zip(self.subjects.tolist(), self.scenes.tolist(), self.rows.tolist(),
                        self.cols.tolist(), self.labels.tolist()))


def _window_sums(plane: np.ndarray, size: int) -> np.ndarray:
    s = np.zeros((plane.shape[0] + 1, plane.shape[1] + 1), dtype=np.int64)
    s[1:, 1:] = plane.astype(np.int64).cumsum(0).cumsum(1)
    return s[size:, size:] - s[:-size, size:] - s[size:, :-size] + s[:-size, :-size]


def _plane(flags, shape, name):
    if flags is None:
        return np.zeros(shape, dtype=bool)
    if isinstance(flags, SpecularMask):
        flags = flags.flags
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != shape:
        raise ValidationError(f"{name} shape {flags.shape} != mask shape {shape}")
    return flags


def window_origins(mask: AnnotationMask, specular=None, validity=None, stride: int = STRIDE):
    """Top-left corners of accepted windows in row-major order."""
    labels = mask.labels
    h, w = labels.shape
    if h < PATCH or w < PATCH:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.uint8)
    bad = _plane(specular, labels.shape, "specular")
    if validity is not None:
        bad = bad | ~_plane(validity, labels.shape, "validity")
    grid = np.ix_(np.arange(0, h - PATCH + 1, stride), np.arange(0, w - PATCH + 1, stride))
    clean = _window_sums(bad, PATCH)[grid] == 0
    label = np.zeros(clean.shape, dtype=np.uint8)
    for cls in CLASSES:
        pure = _window_sums(labels == cls, PATCH)[grid] == PATCH * PATCH
        label[pure] = int(cls)
    accept = clean & (label > 0)
    ri, ci = np.nonzero(accept)
    origins = np.stack([grid[0].ravel()[ri], grid[1].ravel()[ci]], axis=1)
    return origins, label[ri, ci]


def extract_patches(cube: Hypercube, mask: AnnotationMask, specular=None, validity=None,
                    stride: int = STRIDE, subject_id: int = 0, scene_id: int = 0) -> PatchSet:
    """Slide a 31x31 window with ``stride`` and keep windows of a single tissue.

    A window is kept iff all 961 pixels carry the same non-zero label and
    none is specular or outside the valid fusion area.  ``validity``
    defaults to the cube's own flag channel.
    """
    if cube.bands.count != N_BANDS:
        raise ValidationError(f"patch extraction needs a {N_BANDS}-band cube, got {cube.bands.count}")
    if cube.data.shape[:2] != mask.shape:
        raise ValidationError(f"cube {cube.data.shape[:2]} and mask {mask.shape} are not aligned")
    if validity is None:
        validity = cube.valid
    origins, labels = window_origins(mask, specular, validity, stride)
    n = len(origins)
    data = np.empty((n, PATCH, PATCH, N_BANDS), dtype=np.float32)
    for i, (r, c) in enumerate(origins):
        data[i] = cube.data[r:r + PATCH, c:c + PATCH]
    return PatchSet(data, labels, np.full(n, subject_id), np.full(n, scene_id),
                    origins[:, 0], origins[:, 1])


# --------------------------------------------------------------------- splits

@dataclass
class SplitPlan:
    eval_subjects: tuple
    seed: int
    eval_share: dict
    train_index: np.ndarray = field(repr=False)
    val_index: np.ndarray = field(repr=False)
    eval_index: np.ndarray = field(repr=False)
    train_fraction: float = TRAIN_PERCENT / 100
    val_fraction: float = 1 - TRAIN_PERCENT / 100

    def partitions(self, patches: PatchSet):
        return (patches.subset(self.train_index), patches.subset(self.val_index),
                patches.subset(self.eval_index))


def _subject_counts(patches: PatchSet):
    subjects = np.unique(patches.subjects)
    counts = np.zeros((len(subjects), len(CLASSES)), dtype=np.int64)
    lookup = {s: i for i, s in enumerate(subjects.tolist())}
    for s, lab in zip(patches.subjects.tolist(), patches.labels.tolist()):
        counts[lookup[s], lab - 1] += 1
    return subjects, counts


def _combinations(n, k, seed):
    total = math.comb(n, k)
    if total <= MAX_COMBINATIONS:
        yield from itertools.combinations(range(n), k)
        return
    rng = seeded_rng(seed)
    seen = set()
    for _ in range(MAX_COMBINATIONS):
        combo = tuple(sorted(rng.choice(n, size=k, replace=False).tolist()))
        if combo not in seen:
            seen.add(combo)
            yield combo


def split_train_val(index, seed: int):
    """Random 92/8 partition: ``floor(0.92 n)`` to training, the rest to validation."""
    index = np.sort(np.asarray(index, dtype=np.int64))
    perm = seeded_rng(seed).permutation(len(index))
    n_train = len(index) * TRAIN_PERCENT // 100
    return np.sort(index[perm[:n_train]]), np.sort(index[perm[n_train:]])


def apply_split(patches: PatchSet, eval_subjects, seed: int) -> SplitPlan:
    """Rebuild the partitions for a known choice of evaluation subjects."""
    eval_subjects = tuple(sorted(int(s) for s in eval_subjects))
    in_eval = np.isin(patches.subjects, eval_subjects)
    train, val = split_train_val(np.nonzero(~in_eval)[0], seed)
    totals = np.bincount(patches.labels, minlength=len(CLASSES) + 1)
    held = np.bincount(patches.labels[in_eval], minlength=len(CLASSES) + 1)
    share = {c: (held[int(c)] / totals[int(c)] if totals[int(c)] else 0.0) for c in CLASSES}
    return SplitPlan(eval_subjects, int(seed), share, train, val, np.nonzero(in_eval)[0])


def plan_split(patches: PatchSet, n_eval_subjects: int = 3, seed: int = 0) -> SplitPlan:
    """Choose evaluation subjects so every tissue keeps >= 12% of its patches held out.

    Among feasible subject combinations (each class keeps some training
    data and has an evaluation share of at least 12%), the one with the
    smallest maximum per-class share wins; ties go to the lexicographically
    smallest subject-id tuple.
    """
    subjects, counts = _subject_counts(patches)
    if len(subjects) < n_eval_subjects + 1:
        raise SplitError(f"need at least {n_eval_subjects + 1} subjects, got {len(subjects)}")
    totals = counts.sum(axis=0)
    if np.any(totals == 0):
        missing = [CLASSES[i].name for i in np.nonzero(totals == 0)[0]]
        raise SplitError(f"classes without any patches: {missing}")

    best_key, best_combo = None, None
    best_share = np.zeros(len(CLASSES))
    for combo in _combinations(len(subjects), n_eval_subjects, seed):
        held = counts[list(combo)].sum(axis=0)
        share = held / totals
        keeps_training = np.all(held < totals)
        if keeps_training:
            best_share = np.maximum(best_share, share)
        if not keeps_training or np.any(share < MIN_EVAL_SHARE):
            continue
        key = (float(share.max()), tuple(subjects[list(combo)].tolist()))
        if best_key is None or key < best_key:
            best_key, best_combo = key, combo
    if best_combo is None:
        detail = ", ".join(f"{c.name}={best_share[i]:.3f}" for i, c in enumerate(CLASSES))
        raise SplitError(
            f"no {n_eval_subjects}-subject combination gives every class >= "
            f"{MIN_EVAL_SHARE:.0%} evaluation share while keeping it in training; "
            f"best achievable shares: {detail}")
    return apply_split(patches, subjects[list(best_combo)].tolist(), seed)


def write_plan(plan: SplitPlan, path) -> None:
    lines = [
        "eval_subjects " + " ".join(str(s) for s in plan.eval_subjects),
        f"seed {plan.seed}",
    ]
    lines += [f"# share {c.name.lower()} {plan.eval_share[c]:.6f}" for c in CLASSES]
    Path(path).write_text("\n".join(lines) + "\n")


def read_plan(path):
    """Returns ``(eval_subjects, seed)`` from a split manifest."""
    subjects, seed = None, None
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "eval_subjects":
            subjects = tuple(int(v) for v in rest.split())
        elif key == "seed":
            seed = int(rest)
    if subjects is None or seed is None:
        raise FormatError(f"{path}: split plan needs 'eval_subjects' and 'seed' lines")
    return subjects, seed


# ----------------------------------------------------------------------- HSP1

_HSP_HEADER = struct.Struct("<4sI")
RECORD = np.dtype([("subject", "<u2"), ("scene", "<u2"), ("label", "u1"), ("row", "<u2"),
                   ("col", "<u2"), ("data", "<f4", (PATCH, PATCH, N_BANDS))])


def write_patches(patches: PatchSet, destination: BinaryIO) -> int:
    records = np.zeros(len(patches), dtype=RECORD)
    records["subject"] = patches.subjects
    records["scene"] = patches.scenes
    records["label"] = patches.labels
    records["row"] = patches.rows
    records["col"] = patches.cols
    records["data"] = patches.data
    sink = _Sink(destination)
    sink.write(_HSP_HEADER.pack(b"HSP1", len(patches)))
    sink.write(records.tobytes())
    return sink.offset


def read_patches(source: BinaryIO) -> PatchSet:
    magic, n = _HSP_HEADER.unpack(read_exact(source, _HSP_HEADER.size, "HSP1 header"))
    if magic != b"HSP1":
        raise FormatError(f"bad magic {magic!r}, expected b'HSP1'")
    rec = np.frombuffer(read_exact(source, n * RECORD.itemsize, "HSP1 records"), dtype=RECORD)
    return PatchSet(rec["data"].copy(), rec["label"], rec["subject"], rec["scene"],
                    rec["row"], rec["col"])
