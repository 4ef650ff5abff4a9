"""Demosaicking and white/dark reflectance calibration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BandSet, CubeKind, Hypercube
from .errors import CalibrationError, ValidationError
from .phantom import SATURATION, MosaicFrame

__all__ = ["SpecularMask", "demosaic", "calibrate", "interpolation_matrix"]


@dataclass(frozen=True, eq=False)
class SpecularMask:
    flags: np.ndarray

    def __post_init__(self):
        flags = np.array(self.flags, dtype=bool)
        if flags.ndim != 2:
            raise ValidationError("specular flags must be 2-D")
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @property
    def shape(self):
        return self.flags.shape

    @property
    def rate(self) -> float:
        return float(self.flags.mean()) if self.flags.size else 0.0


def interpolation_matrix(length: int, offset: int, period: int) -> np.ndarray:
    """Linear interpolation weights from samples at ``offset + period*i`` to all positions.

    Positions outside the first/last sample are clamped (edge replication).
    Returns a ``(length, n_samples)`` matrix whose rows sum to one; rows at
    sample positions are unit vectors.
    """
    n_samples = len(range(offset, length, period))
    weights = np.zeros((length, n_samples))
    if n_samples == 1:
        weights[:, 0] = 1.0
        return weights
    t = np.clip((np.arange(length) - offset) / period, 0, n_samples - 1)
    i0 = np.minimum(np.floor(t).astype(int), n_samples - 2)
    frac = t - i0
    rows = np.arange(length)
    weights[rows, i0] = 1.0 - frac
    weights[rows, i0 + 1] += frac
    return weights


def demosaic(frame: MosaicFrame, bands: BandSet = None) -> Hypercube:
    """Per-band bilinear interpolation over each band's sparse sample grid."""
    n = frame.period
    bands = bands or frame.camera.bands()
    if bands.count != n * n:
        raise ValidationError(f"BandSet has {bands.count} bands, mosaic carries {n * n}")
    h, w = frame.height, frame.width
    raw = frame.raw.astype(np.float64)
    out = np.empty((h, w, n * n), dtype=np.float32)
    row_weights = {}
    col_weights = {}
    for r0 in range(n):
        for c0 in range(n):
            band = int(frame.layout[r0, c0])
            if r0 not in row_weights:
                row_weights[r0] = interpolation_matrix(h, r0, n)
            if c0 not in col_weights:
                col_weights[c0] = interpolation_matrix(w, c0, n)
            samples = raw[r0::n, c0::n]
            out[:, :, band] = row_weights[r0] @ samples @ col_weights[c0].T
    return Hypercube(out, bands, CubeKind.RAW)


def calibrate(raw: Hypercube, white: Hypercube, dark: Hypercube):
    """Reflectance ``(raw - dark) / (white - dark)``, clamped below at zero.

    Returns the reflectance cube and a :class:`SpecularMask` flagging pixels
    where any raw band reached the saturation level.
    """
    for name, ref in (("white", white), ("dark", dark)):
        if ref.shape != raw.shape:
            raise ValidationError(f"{name} reference shape {ref.shape} != raw shape {raw.shape}")
        if ref.bands != raw.bands:
            raise ValidationError(f"{name} reference has a different BandSet")
    span = white.data.astype(np.float64) - dark.data.astype(np.float64)
    bad = span <= 0
    if bad.any():
        y, x, b = np.unravel_index(int(np.argmax(bad)), bad.shape)
        raise CalibrationError(
            f"white <= dark at pixel ({y}, {x}), band {b} "
            f"({raw.bands.centers_nm[b]:.2f} nm): white={white.data[y, x, b]}, "
            f"dark={dark.data[y, x, b]}")
    refl = (raw.data.astype(np.float64) - dark.data) / span
    refl = np.maximum(refl, 0.0)
    flags = np.any(raw.data >= SATURATION, axis=2)
    return Hypercube(refl.astype(np.float32), raw.bands, CubeKind.REFLECTANCE), SpecularMask(flags)
