"""Patch and full-image evaluation, specular post-processing and RGB overlays."""
from __future__ import annotations

from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np

from .core import CLASSES, N_CLASSES, Hypercube, TissueClass, _Sink, read_exact
from .errors import FormatError, ParameterError, ValidationError

PATCH = 31
HALF = PATCH // 2

PALETTE = {
    TissueClass.NERVE: (0xFF, 0xD7, 0x00),
    TissueClass.GLAND: (0x2E, 0x8B, 0x57),
    TissueClass.MUSCLE: (0xB2, 0x22, 0x22),
    TissueClass.VEIN: (0x1E, 0x3A, 0x8A),
    TissueClass.SKIN: (0xD2, 0x69, 0x1E),
}
RGB_TARGETS_NM = (640.0, 550.0, 460.0)
GAMMA = 2.2


class ConfusionMatrix:
    """5x5 counts; rows are true classes, columns predicted classes (code order)."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (N_CLASSES, N_CLASSES):
            raise ValidationError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES}")
        self.counts = counts

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise ValidationError("y_true and y_pred differ in length")
        counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        np.add.at(counts, (y_true - 1, y_pred - 1), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def metrics(self) -> "ClassMetrics":
        c = self.counts
        tp = np.diag(c).copy()
        fn = c.sum(axis=1) - tp
        fp = c.sum(axis=0) - tp
        tn = self.total - tp - fn - fp
        return ClassMetrics(tp, fn, fp, tn)


def _ratio(num, den):
    return num / den if den else float("nan")


@dataclass(eq=False)
class ClassMetrics:
    """One-vs-rest counts per class.  Undefined ratios (empty denominators) are NaN."""

    tp: np.ndarray
    fn: np.ndarray
    fp: np.ndarray
    tn: np.ndarray

    @property
    def sensitivity(self):
        return np.array([_ratio(int(a), int(a + b)) for a, b in zip(self.tp, self.fn)])

    @property
    def specificity(self):
        return np.array([_ratio(int(a), int(a + b)) for a, b in zip(self.tn, self.fp)])

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fn[0] + self.fp[0] + self.tn[0])

    @property
    def accuracy(self) -> float:
        return _ratio(int(self.tp.sum()), self.total)

    def same_as(self, other: "ClassMetrics") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("tp", "fn", "fp", "tn"))


def streaming_metrics(y_true, y_pred) -> ClassMetrics:
    """Accumulate one-vs-rest counts sample by sample, without building a matrix."""
    tp = [0] * N_CLASSES
    fn = [0] * N_CLASSES
    fp = [0] * N_CLASSES
    tn = [0] * N_CLASSES
    for t, p in zip(np.asarray(y_true).tolist(), np.asarray(y_pred).tolist()):
        for k in range(1, N_CLASSES + 1):
            if t == k and p == k:
                tp[k - 1] += 1
            elif t == k:
                fn[k - 1] += 1
            elif p == k:
                fp[k - 1] += 1
            else:
                tn[k - 1] += 1
    return ClassMetrics(*(np.array(v, dtype=np.int64) for v in (tp, fn, fp, tn)))


def evaluate_patches(net, patches, batch_size: int = 64):
    if len(patches) == 0:
        raise ValidationError("evaluation set is empty")
    pred = net.predict_proba(patches.data, batch_size).argmax(axis=1) + 1
    cm = ConfusionMatrix.from_predictions(patches.labels, pred)
    return cm, cm.metrics()


# ------------------------------------------------------------------ reporting

def format_report(cm: ConfusionMatrix, title: str = "evaluation") -> str:
    m = cm.metrics()
    sens, spec = m.sensitivity, m.specificity
    names = [c.name.lower() for c in CLASSES]
    lines = [f"# {title}", f"# samples: {cm.total}", "# confusion matrix (rows true, cols predicted)",
             "# " + " ".join(f"{n:>7}" for n in ["", *names])]
    for name, row in zip(names, cm.counts):
        lines.append("# " + " ".join(f"{v:>7}" for v in [name, *row.tolist()]))
    lines.append("class,tp,fn,fp,tn,sensitivity,specificity")
    for i, name in enumerate(names):
        lines.append(f"{name},{m.tp[i]},{m.fn[i]},{m.fp[i]},{m.tn[i]},{sens[i]:.6f},{spec[i]:.6f}")
    lines.append(f"overall_accuracy,{m.accuracy:.6f}")
    return "\n".join(lines) + "\n"


def parse_report(text: str):
    """Recover ``(ConfusionMatrix, {class: row}, overall_accuracy)`` from a report."""
    rows, matrix, accuracy = {}, [], None
    in_matrix = False
    for line in text.splitlines():
        if line.startswith("# confusion matrix"):
            in_matrix = True
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if (in_matrix and len(parts) == N_CLASSES + 1 and parts[1].isdigit()
                    and parts[0] in [c.name.lower() for c in CLASSES]):
                matrix.append([int(v) for v in parts[1:]])
            continue
        parts = line.split(",")
        if parts[0] == "overall_accuracy":
            accuracy = float(parts[1])
        elif parts[0] in [c.name.lower() for c in CLASSES]:
            rows[parts[0]] = [int(v) for v in parts[1:5]] + [float(v) for v in parts[5:7]]
    if accuracy is None or len(matrix) != N_CLASSES:
        raise FormatError("not a metrics report")
    return ConfusionMatrix(matrix), rows, accuracy


# ------------------------------------------------------------ dense prediction

def eligible_pixels(shape, validity=None) -> np.ndarray:
    """Pixels whose centered 31x31 window lies inside the image and the valid area."""
    h, w = shape
    ok = np.zeros((h, w), dtype=bool)
    if h < PATCH or w < PATCH:
        return ok
    valid = np.ones((h, w), dtype=bool) if validity is None else np.asarray(validity, dtype=bool)
    s = np.zeros((h + 1, w + 1), dtype=np.int64)
    s[1:, 1:] = (~valid).astype(np.int64).cumsum(0).cumsum(1)
    bad = s[PATCH:, PATCH:] - s[:-PATCH, PATCH:] - s[PATCH:, :-PATCH] + s[:-PATCH, :-PATCH]
    ok[HALF:h - HALF, HALF:w - HALF] = bad == 0
    return ok


def predict_image(net, cube: Hypercube, validity=None, where=None, stride: int = 1,
                  batch_size: int = 64):
    """Classify the centered window of every eligible pixel.

    Returns ``(labels, probabilities)``: an H x W code map (0 where the
    window leaves the valid area) and an H x W x 5 probability map (zero
    rows for unclassified pixels).  ``where`` restricts the pixels that are
    classified.  ``stride > 1`` is a coarse preview: only pixels on the
    ``stride`` grid are classified and every other eligible pixel copies the
    nearest grid pixel's result.
    """
    if cube.height < PATCH or cube.width < PATCH:
        raise ValidationError(f"cube {cube.height}x{cube.width} smaller than {PATCH}x{PATCH}")
    if validity is None:
        validity = cube.valid
    ok = eligible_pixels((cube.height, cube.width), validity)
    if where is not None:
        ok &= np.asarray(where, dtype=bool)
    h, w = ok.shape
    labels = np.zeros((h, w), dtype=np.uint8)
    probs = np.zeros((h, w, N_CLASSES))
    if stride > 1:
        grid = np.zeros_like(ok)
        grid[::stride, ::stride] = True
        targets = ok & grid
    else:
        targets = ok
    rr, cc = np.nonzero(targets)
    data = cube.data
    for start in range(0, len(rr), batch_size):
        r, c = rr[start:start + batch_size], cc[start:start + batch_size]
        batch = np.stack([data[y - HALF:y + HALF + 1, x - HALF:x + HALF + 1] for y, x in zip(r, c)])
        p = net.predict_proba(batch, batch_size)
        probs[r, c] = p
        labels[r, c] = p.argmax(axis=1) + 1
    if stride > 1:
        yy, xx = np.nonzero(ok & ~targets)
        gy = np.clip(np.rint(yy / stride).astype(int) * stride, 0, h - 1)
        gx = np.clip(np.rint(xx / stride).astype(int) * stride, 0, w - 1)
        hit = targets[gy, gx]
        labels[yy[hit], xx[hit]] = labels[gy[hit], gx[hit]]
        probs[yy[hit], xx[hit]] = probs[gy[hit], gx[hit]]
    return labels, probs


def postprocess_speculars(labels, specular, k: int = 11) -> np.ndarray:
    """Relabel specular pixels by majority vote of clean labeled neighbors.

    Only non-specular, labeled pixels in the k x k neighborhood vote; ties
    go to the smallest class code and an empty neighborhood yields 0.
    """
    if k % 2 == 0 or k < 1:
        raise ParameterError(f"window size must be odd and positive, got {k}")
    labels = np.asarray(labels, dtype=np.uint8)
    specular = np.asarray(specular, dtype=bool)
    if labels.shape != specular.shape:
        raise ValidationError("label map and specular mask are not aligned")
    if not specular.any():
        return labels.copy()
    h, w = labels.shape
    r = k // 2
    votes = np.zeros((N_CLASSES, h, w), dtype=np.int64)
    for i, cls in enumerate(CLASSES):
        plane = np.pad(((labels == cls) & ~specular).astype(np.int64), r)
        s = np.zeros((plane.shape[0] + 1, plane.shape[1] + 1), dtype=np.int64)
        s[1:, 1:] = plane.cumsum(0).cumsum(1)
        votes[i] = s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]
    winner = votes.argmax(axis=0) + 1
    winner[votes.max(axis=0) == 0] = 0
    out = labels.copy()
    out[specular] = winner[specular]
    return out


# --------------------------------------------------------------------- overlay

def rgb_base(cube: Hypercube) -> np.ndarray:
    """Gamma-encoded RGB in [0, 255] (float) from the bands nearest 640/550/460 nm.

    Bands equally close to a target are averaged.
    """
    centers = cube.bands.centers_nm.astype(np.float64)
    channels = []
    for target in RGB_TARGETS_NM:
        dist = np.abs(centers - target)
        pick = np.nonzero(dist <= dist.min() + 1e-3)[0]
        channels.append(cube.data[:, :, pick].astype(np.float64).mean(axis=2))
    rgb = np.clip(np.stack(channels, axis=-1), 0.0, 1.0)
    return 255.0 * rgb ** (1.0 / GAMMA)


def render_overlay(cube: Hypercube, labels, alpha: float = 0.45) -> np.ndarray:
    """H x W x 3 uint8 image: labeled pixels blended with the class palette."""
    labels = np.asarray(labels)
    if labels.shape != (cube.height, cube.width):
        raise ValidationError("label map is not aligned with the cube")
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError("alpha must lie in [0, 1]")
    out = rgb_base(cube)
    for cls, color in PALETTE.items():
        sel = labels == cls
        out[sel] = (1.0 - alpha) * out[sel] + alpha * np.array(color, dtype=np.float64)
    # round half up, the usual 8-bit quantization (np.rint would round half to even)
    return np.floor(out + 0.5).astype(np.uint8)


def write_ppm(image: np.ndarray, destination: BinaryIO) -> int:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    sink = _Sink(destination)
    sink.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
    sink.write(image.tobytes())
    return sink.offset


def read_ppm(source: BinaryIO) -> np.ndarray:
    tokens = []
    while len(tokens) < 4:
        line = source.readline()
        if not line:
            raise FormatError("truncated PPM header")
        tokens += line.split(b"#")[0].split()
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise FormatError("only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    raw = read_exact(source, w * h * 3, "PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()
