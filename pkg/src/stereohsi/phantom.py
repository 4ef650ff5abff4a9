"""Synthetic surgical scenes and the two-camera snapshot mosaic sensor model.

A scene is a Voronoi partition of the image plane: every blob seed claims
the pixels closest to it, and pixels within ``margin`` of a cell boundary
stay unannotated (the tissue is there, the surgeon just did not outline it).

Sensor model, per band ``b`` with white gain ``g[b]`` and dark level ``d``::

    raw = clip(d + (g[b] - d) * R, 0, 1)

so that a perfect reflector reads ``g[b]``, a black target reads ``d`` and
white/dark correction recovers ``R`` exactly.
"""
from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, NamedTuple, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import (
    CLASSES, AnnotationMask, BandSet, CubeKind, Hypercube, TissueClass,
    camera_a_bands, camera_b_bands, fused_bands, read_exact, seeded_rng, _Sink,
)
from .errors import FormatError, ValidationError

DARK_LEVEL = 0.02
SPECULAR_LEVEL = 2.0
SATURATION = 0.98
TEXTURE_SCALE = 3.0


class Camera(enum.IntEnum):
    A = 0
    B = 1

    @property
    def period(self) -> int:
        return 4 if self is Camera.A else 5

    def bands(self) -> BandSet:
        return camera_a_bands() if self is Camera.A else camera_b_bands()


# --------------------------------------------------------------- tissue spectra

def _gauss(lam, center, width):
    return np.exp(-0.5 * ((lam - center) / width) ** 2)


def _sigmoid(lam, center, width):
    return 1.0 / (1.0 + np.exp(-(lam - center) / width))


# (floor, ceiling, edge nm, edge width, hemoglobin depth, water depth)
_CURVES = {
    TissueClass.NERVE: (0.46, 0.66, 470.0, 30.0, 0.05, 0.04),
    TissueClass.GLAND: (0.20, 0.55, 520.0, 25.0, 0.08, 0.05),
    TissueClass.MUSCLE: (0.08, 0.44, 590.0, 15.0, 0.05, 0.08),
    TissueClass.VEIN: (0.06, 0.30, 640.0, 40.0, 0.03, 0.10),
    TissueClass.SKIN: (0.18, 0.62, 560.0, 60.0, 0.10, 0.03),
}


def _default_means(centers_nm):
    lam = np.asarray(centers_nm, dtype=np.float64)
    rows = []
    for cls in CLASSES:
        lo, hi, edge, width, hb, water = _CURVES[cls]
        curve = lo + (hi - lo) * _sigmoid(lam, edge, width)
        curve = curve - hb * (_gauss(lam, 542.0, 14.0) + _gauss(lam, 577.0, 10.0))
        curve = curve - water * _gauss(lam, 970.0, 30.0)
        rows.append(curve)
    return np.clip(np.array(rows), 0.05, 0.9)


@dataclass(frozen=True, eq=False)
class TissueSpectrumModel:
    """Per-class mean reflectance at the 41 fused centers plus noise levels.

    ``means[i]`` belongs to ``CLASSES[i]``.  ``sigma_class`` bounds the
    per-region spectral perturbation, ``sigma_noise`` is the per-pixel white
    noise standard deviation.
    """

    means: np.ndarray
    sigma_class: np.ndarray
    sigma_noise: float = 0.01
    bands: BandSet = field(default_factory=fused_bands)

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64)
        if means.shape != (len(CLASSES), self.bands.count):
            raise ValidationError(
                f"means must have shape ({len(CLASSES)}, {self.bands.count}), got {means.shape}")
        if means.min() < 0.02 or means.max() > 0.95:
            raise ValidationError("mean spectra must lie in [0.02, 0.95]")
        for i in range(len(CLASSES)):
            for j in range(i + 1, len(CLASSES)):
                separated = int(np.sum(np.abs(means[i] - means[j]) >= 0.03))
                if separated < 5:
                    raise ValidationError(
                        f"{CLASSES[i].name} and {CLASSES[j].name} differ by >= 0.03 in only "
                        f"{separated} bands (need 5)")
        sigma_class = np.broadcast_to(np.asarray(self.sigma_class, dtype=np.float64),
                                      (len(CLASSES),)).copy()
        if np.any(sigma_class < 0) or self.sigma_noise < 0:
            raise ValidationError("noise levels must be non-negative")
        means.setflags(write=False)
        sigma_class.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigma_class", sigma_class)

    def mean(self, cls) -> np.ndarray:
        return self.means[int(cls) - 1]


def default_spectrum_model(sigma_class=0.02, sigma_noise=0.01) -> TissueSpectrumModel:
    bands = fused_bands()
    return TissueSpectrumModel(_default_means(bands.centers_nm), sigma_class, sigma_noise, bands)


# ------------------------------------------------------------------------ scenes

@dataclass(frozen=True)
class Region:
    tissue: TissueClass
    seed: tuple  # (row, col) of the blob seed


@dataclass(frozen=True, eq=False)
class SceneSpec:
    height: int
    width: int
    subject_id: int
    regions: Sequence[Region]
    seed: int
    specular_density: float = 0.0
    gain_amplitude: float = 0.0
    margin: float = 3.0
    omit: frozenset = frozenset()
    scene_id: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValidationError("scene dimensions must be positive")
        if not 0.0 <= self.specular_density <= 0.05:
            raise ValidationError("specular_density must lie in [0, 0.05]")
        if not 0.0 <= self.gain_amplitude <= 0.3:
            raise ValidationError("gain_amplitude must lie in [0, 0.3] (gain within [0.7, 1.3])")
        if not self.regions:
            raise ValidationError("scene needs at least one region")
        regions = tuple(Region(TissueClass(r.tissue), tuple(r.seed)) for r in self.regions)
        if any(r.tissue == TissueClass.UNLABELED for r in regions):
            raise ValidationError("regions must carry a tissue class")
        seeds = [r.seed for r in regions]
        if len(set(seeds)) != len(seeds):
            raise ValidationError("overlapping regions: two blob seeds share a position")
        present = {r.tissue for r in regions}
        missing = set(CLASSES) - present - set(self.omit)
        if missing:
            raise ValidationError(
                f"classes {sorted(c.name for c in missing)} absent and not explicitly omitted")
        object.__setattr__(self, "regions", regions)


class Scene(NamedTuple):
    cube: Hypercube
    mask: AnnotationMask
    specular: np.ndarray


def gain_field(height, width, amplitude, rng) -> np.ndarray:
    """Smooth multiplicative illumination field within ``1 +/- amplitude``.

    A few broad cosine lobes model the light falloff; a fine shading term
    (Gaussian-filtered noise, scale ``TEXTURE_SCALE`` px) models surface
    relief and carries 40% of the amplitude.
    """
    if amplitude == 0:
        return np.ones((height, width))
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / max(height, 1)
    xx = xx / max(width, 1)
    broad = np.zeros((height, width))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.2, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        broad += np.cos(2 * np.pi * fy * yy + py) * np.cos(2 * np.pi * fx * xx + px)
    shading = gaussian_filter(rng.normal(size=(height, width)), TEXTURE_SCALE)
    for part in (broad, shading):
        peak = np.abs(part).max()
        if peak > 0:
            part /= peak
    return 1.0 + amplitude * (0.6 * broad + 0.4 * shading)


def _voronoi(spec: SceneSpec):
    seeds = np.array([r.seed for r in spec.regions], dtype=np.float64)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    dist = np.sqrt((yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2)
    owner = np.argmin(dist, axis=-1)
    if len(seeds) > 1:
        two = np.partition(dist, 1, axis=-1)[..., :2]
        annotated = (two[..., 1] - two[..., 0]) >= spec.margin
    else:
        annotated = np.ones(owner.shape, dtype=bool)
    return owner, annotated


def generate_scene(spec: SceneSpec, model: TissueSpectrumModel) -> Scene:
    """Render ground-truth reflectance, annotation mask and specular flags.

    Each pixel is its class mean plus a per-region spectral offset bounded by
    the class's ``sigma_class``, plus white noise, times the illumination
    field.  Specular pixels are set to ``SPECULAR_LEVEL`` in every band.
    """
    rng = seeded_rng(spec.seed)
    owner, annotated = _voronoi(spec)
    tissue = np.array([int(r.tissue) for r in spec.regions])
    owner_class = tissue[owner]

    nb = model.bands.count
    lam = np.linspace(0.0, 1.0, nb)
    region_spectra = np.empty((len(spec.regions), nb))
    for k, region in enumerate(spec.regions):
        sigma = model.sigma_class[int(region.tissue) - 1]
        coeffs = rng.normal(size=3)
        shape = sum(c * np.cos(np.pi * (i + 1) * lam + rng.uniform(0, np.pi))
                    for i, c in enumerate(coeffs))
        shape /= max(np.abs(shape).max(), 1e-12)
        region_spectra[k] = model.mean(region.tissue) + sigma * rng.uniform(-1, 1) * shape

    data = region_spectra[owner]
    if model.sigma_noise > 0:
        data = data + rng.normal(0.0, model.sigma_noise, size=data.shape)
    data = data * gain_field(spec.height, spec.width, spec.gain_amplitude, rng)[..., None]

    specular = np.zeros((spec.height, spec.width), dtype=bool)
    if spec.specular_density > 0:
        specular = rng.random((spec.height, spec.width)) < spec.specular_density
        data[specular] = SPECULAR_LEVEL

    labels = np.where(annotated, owner_class, 0).astype(np.uint8)
    cube = Hypercube(data.astype(np.float32), model.bands, CubeKind.REFLECTANCE)
    return Scene(cube, AnnotationMask(labels), specular)


# ------------------------------------------------------------------------ sensor

@dataclass(frozen=True, eq=False)
class MosaicFrame:
    """Single-sensor raw frame.  Pixel (y, x) carries band ``layout[y % n, x % n]``."""

    raw: np.ndarray
    layout: np.ndarray
    camera: Camera
    crop: Optional[tuple] = None

    def __post_init__(self):
        raw = np.array(self.raw, dtype=np.float32)
        layout = np.array(self.layout, dtype=np.int64)
        n = layout.shape[0]
        if layout.shape != (n, n) or sorted(layout.ravel().tolist()) != list(range(n * n)):
            raise ValidationError("mosaic layout must be an n x n permutation of 0..n^2-1")
        if raw.ndim != 2 or raw.shape[0] % n or raw.shape[1] % n:
            raise ValidationError(f"frame shape {raw.shape} not divisible by period {n}")
        if raw.size and (raw.min() < 0 or raw.max() > 1):
            raise ValidationError("raw values must lie in [0, 1]")
        raw.setflags(write=False)
        layout.setflags(write=False)
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "camera", Camera(self.camera))

    @property
    def period(self) -> int:
        return self.layout.shape[0]

    @property
    def height(self) -> int:
        return self.raw.shape[0]

    @property
    def width(self) -> int:
        return self.raw.shape[1]

    def band_index_map(self) -> np.ndarray:
        n = self.period
        reps = (self.height // n, self.width // n)
        return np.tile(self.layout, reps)


def default_layout(period: int) -> np.ndarray:
    return np.arange(period * period).reshape(period, period)


def default_white_gain(camera: Camera) -> np.ndarray:
    """Smooth per-band sensor response in [0.7, 0.97]."""
    lam = camera.bands().centers_nm.astype(np.float64)
    return 0.7 + 0.27 * np.exp(-0.5 * ((lam - 620.0) / 220.0) ** 2)


def _camera_band_source(truth_bands: BandSet, camera: Camera) -> np.ndarray:
    return np.array([truth_bands.nearest(c) for c in camera.bands().centers_nm])


def _sense(reflectance, band_map, white_gain, dark_level):
    gain = np.asarray(white_gain, dtype=np.float64)[band_map]
    raw = dark_level + (gain - dark_level) * reflectance
    return np.clip(raw, 0.0, 1.0).astype(np.float32)


def render_camera(truth: Hypercube, camera: Camera, disparity_px: int = 0,
                  white_gain=None, dark_level: float = DARK_LEVEL,
                  layout=None) -> MosaicFrame:
    """Sample the fused truth through one camera's mosaic.

    The camera sees ``truth[y, x - disparity_px]`` (edge-replicated), i.e. its
    view is the truth translated right by ``disparity_px``.  Frames whose
    size is not a multiple of the mosaic period are cropped to the largest
    valid size; the crop is reported with a warning and on ``frame.crop``.
    """
    camera = Camera(camera)
    n = camera.period
    layout = default_layout(n) if layout is None else np.asarray(layout)
    if white_gain is None:
        white_gain = np.ones(n * n)
    white_gain = np.asarray(white_gain, dtype=np.float64)
    if white_gain.shape != (n * n,):
        raise ValidationError(f"white_gain needs {n * n} entries for camera {camera.name}")
    h, w = truth.height, truth.width
    hc, wc = (h // n) * n, (w // n) * n
    if hc == 0 or wc == 0:
        raise ValidationError(f"truth {h}x{w} smaller than one mosaic period ({n})")
    crop = None
    if (hc, wc) != (h, w):
        crop = (hc, wc)
        warnings.warn(f"camera {camera.name}: cropped {h}x{w} to {hc}x{wc}", stacklevel=2)

    cols = np.clip(np.arange(wc) - int(disparity_px), 0, w - 1)
    source = _camera_band_source(truth.bands, camera)
    band_map = np.tile(layout, (hc // n, wc // n))
    yy = np.arange(hc)[:, None]
    reflectance = truth.data[yy, cols[None, :], source[band_map]].astype(np.float64)
    raw = _sense(reflectance, band_map, white_gain, dark_level)
    return MosaicFrame(raw, layout, camera, crop)


def render_references(camera: Camera, white_gain=None, shape=(100, 100),
                      dark_level: float = DARK_LEVEL, layout=None):
    """White (perfect reflector) and dark (no light) reference frames."""
    camera = Camera(camera)
    n = camera.period
    layout = default_layout(n) if layout is None else np.asarray(layout)
    if white_gain is None:
        white_gain = np.ones(n * n)
    h, w = shape
    band_map = np.tile(layout, (h // n, w // n))
    white = MosaicFrame(_sense(np.ones(band_map.shape), band_map, white_gain, dark_level),
                        layout, camera)
    dark = MosaicFrame(np.full(band_map.shape, dark_level, dtype=np.float32), layout, camera)
    return white, dark


# ------------------------------------------------------------------ recipes

MUSCLE_SHARE = 0.43


def default_recipe(seed: int, n_subjects: int = 18, size: int = 160,
                   two_scene_subjects: int = 9, seeds_per_scene: int = 6,
                   specular_density: float = 3e-4, gain_amplitude: float = 0.1,
                   muscle_weight: Optional[float] = None):
    """Scenes for a synthetic cohort: ``n_subjects`` subjects, 1-2 scenes each.

    Region seeds beyond one per tissue are muscle (or, with
    ``muscle_weight``, drawn with muscle that many times likelier than each
    other tissue), so muscle ends up with well over 43% of the patches.
    Subjects with two scenes split the non-muscle tissues between their
    scenes, so every tissue appears in at least one of them.
    """
    rng = seeded_rng(seed)
    doubles = set(rng.choice(np.arange(1, n_subjects + 1), size=two_scene_subjects,
                             replace=False).tolist())
    others = [c for c in CLASSES if c != TissueClass.MUSCLE]
    specs = []
    scene_id = 0
    for subject in range(1, n_subjects + 1):
        if subject in doubles:
            order = rng.permutation(len(others))
            groups = [[others[i] for i in order[:2]], [others[i] for i in order[2:]]]
        else:
            groups = [others]
        for group in groups:
            scene_id += 1
            classes = [TissueClass.MUSCLE] + list(group)
            extra = seeds_per_scene - len(classes)
            if extra > 0 and muscle_weight is None:
                classes += [TissueClass.MUSCLE] * extra
            elif extra > 0:
                weights = np.array([muscle_weight if c == TissueClass.MUSCLE else 1.0
                                    for c in classes])
                picks = rng.choice(len(classes), size=extra, p=weights / weights.sum())
                classes += [classes[i] for i in picks]
            seeds = _spread_seeds(rng, len(classes), size)
            regions = [Region(c, s) for c, s in zip(classes, seeds)]
            specs.append(SceneSpec(
                height=size, width=size, subject_id=subject, regions=regions,
                seed=int(rng.integers(0, 2 ** 63)), specular_density=specular_density,
                gain_amplitude=gain_amplitude, omit=frozenset(set(CLASSES) - set(classes)),
                scene_id=scene_id))
    return specs


def _spread_seeds(rng, k, size, min_gap=None):
    """Rejection-sample ``k`` seeds at least ``min_gap`` apart."""
    min_gap = min_gap or size / (1.2 * np.sqrt(k))
    seeds = []
    for _ in range(10000):
        cand = tuple(int(v) for v in rng.integers(0, size, size=2))
        if all((cand[0] - s[0]) ** 2 + (cand[1] - s[1]) ** 2 >= min_gap ** 2 for s in seeds):
            seeds.append(cand)
            if len(seeds) == k:
                return seeds
    raise ValidationError(f"could not place {k} separated seeds in a {size}x{size} scene")


# -------------------------------------------------------------------- file I/O

_RAW_HEADER = struct.Struct("<4sBBII")


def write_frame(frame: MosaicFrame, destination: BinaryIO) -> int:
    sink = _Sink(destination)
    n = frame.period
    sink.write(_RAW_HEADER.pack(b"HSR1", int(frame.camera), n, frame.height, frame.width))
    sink.write(frame.layout.astype("<u2").tobytes())
    sink.write(frame.raw.astype("<f4").tobytes())
    return sink.offset


def read_frame(source: BinaryIO) -> MosaicFrame:
    magic, camera, n, h, w = _RAW_HEADER.unpack(read_exact(source, _RAW_HEADER.size, "HSR1 header"))
    if magic != b"HSR1":
        raise FormatError(f"bad magic {magic!r}, expected b'HSR1'")
    if camera not in (0, 1):
        raise FormatError(f"unknown camera code {camera}")
    layout = np.frombuffer(read_exact(source, 2 * n * n, "HSR1 layout"), dtype="<u2").reshape(n, n)
    raw = np.frombuffer(read_exact(source, 4 * h * w, "HSR1 payload"), dtype="<f4").reshape(h, w)
    return MosaicFrame(raw, layout, Camera(camera))


MANIFEST_FIELDS = ("subject_id", "scene_id", "frame_a", "frame_b", "white_a", "dark_a",
                   "white_b", "dark_b", "mask", "disparity")


@dataclass(frozen=True)
class SceneRecord:
    subject_id: int
    scene_id: int
    frame_a: str
    frame_b: str
    white_a: str
    dark_a: str
    white_b: str
    dark_b: str
    mask: str
    disparity: int = 0


def write_manifest(records: Sequence[SceneRecord], path) -> None:
    lines = ["# " + "\t".join(MANIFEST_FIELDS)]
    for r in records:
        lines.append("\t".join(str(getattr(r, f)) for f in MANIFEST_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_FIELDS):
            raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields")
        vals = dict(zip(MANIFEST_FIELDS, parts))
        for key in ("subject_id", "scene_id", "disparity"):
            vals[key] = int(vals[key])
        records.append(SceneRecord(**vals))
    return records
