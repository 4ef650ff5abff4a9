"""Stereo registration (global integer translation) and 16+25 band fusion.

A shift ``(dx, dy)`` maps camera A onto camera B's pixel grid as
``B[y, x] ~ A[y - dy, x - dx]``.
"""
from __future__ import annotations

import numpy as np
from scipy import fft as sp_fft

from .core import BandSet, CubeKind, Hypercube, fusion_order
from .errors import DegenerateInputError, FusionError, ParameterError, ValidationError

__all__ = ["overlap_images", "ncc_scores", "estimate_translation", "fuse", "shift_flags",
           "fuse_flags", "OVERLAP_NM", "PATCH_SIZE"]

OVERLAP_NM = (475.0, 650.0)
PATCH_SIZE = 31


def overlap_images(cube_a: Hypercube, cube_b: Hypercube):
    """Band averages of both cameras over the shared 475-650 nm interval."""
    lo, hi = OVERLAP_NM
    sel_a = cube_a.bands.centers_nm >= lo
    sel_b = cube_b.bands.centers_nm <= hi
    if not sel_a.any() or not sel_b.any():
        raise ValidationError("cubes share no bands in the 475-650 nm overlap")
    img_a = cube_a.data[:, :, sel_a].astype(np.float64).mean(axis=2)
    img_b = cube_b.data[:, :, sel_b].astype(np.float64).mean(axis=2)
    return img_a, img_b


def _box_sums(img):
    s = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    s[1:, 1:] = img.cumsum(0).cumsum(1)
    return s


def _rect(s, y0, y1, x0, x1):
    return s[y1, x1] - s[y0, x1] - s[y1, x0] + s[y0, x0]


def ncc_scores(img_a: np.ndarray, img_b: np.ndarray, radius: int) -> np.ndarray:
    """NCC of every integer shift in ``[-radius, radius]^2``.

    Returns an array indexed ``[dy + radius, dx + radius]``; shifts whose
    overlap has zero variance in either image score ``-inf``.  Each score is
    the zero-mean normalized correlation over that shift's overlap only.
    """
    ha, wa = img_a.shape
    hb, wb = img_b.shape
    a = img_a - img_a.mean()
    b = img_b - img_b.mean()
    sa, saa = _box_sums(a), _box_sums(a * a)
    sb, sbb = _box_sums(b), _box_sums(b * b)

    # cross[dy, dx] = sum_{y,x} b[y, x] * a[y - dy, x - dx] via zero-padded FFT
    fh = sp_fft.next_fast_len(ha + hb)
    fw = sp_fft.next_fast_len(wa + wb)
    spec = sp_fft.rfft2(b, (fh, fw)) * np.conj(sp_fft.rfft2(a, (fh, fw)))
    cross_full = sp_fft.irfft2(spec, (fh, fw))

    size = 2 * radius + 1
    scores = np.full((size, size), -np.inf)
    for dy in range(-radius, radius + 1):
        y0, y1 = max(0, dy), min(hb, ha + dy)
        if y1 <= y0:
            continue
        for dx in range(-radius, radius + 1):
            x0, x1 = max(0, dx), min(wb, wa + dx)
            if x1 <= x0:
                continue
            n = (y1 - y0) * (x1 - x0)
            s_b = _rect(sb, y0, y1, x0, x1)
            s_bb = _rect(sbb, y0, y1, x0, x1)
            s_a = _rect(sa, y0 - dy, y1 - dy, x0 - dx, x1 - dx)
            s_aa = _rect(saa, y0 - dy, y1 - dy, x0 - dx, x1 - dx)
            s_ab = cross_full[dy % fh, dx % fw]
            var_a = s_aa - s_a * s_a / n
            var_b = s_bb - s_b * s_b / n
            denom = var_a * var_b
            if denom <= 1e-12 * (s_aa * s_bb + 1e-300):
                continue
            scores[dy + radius, dx + radius] = (s_ab - s_a * s_b / n) / np.sqrt(denom)
    return scores


def _candidates(radius):
    """Shifts in tie-break order: |dx|+|dy|, then dy, then dx."""
    rng = range(-radius, radius + 1)
    return sorted(((dx, dy) for dy in rng for dx in rng),
                  key=lambda s: (abs(s[0]) + abs(s[1]), s[1], s[0]))


def estimate_translation(cube_a: Hypercube, cube_b: Hypercube, search_radius: int):
    """Integer ``(dx, dy)`` maximizing NCC between the cameras' overlap images."""
    for name, cube in (("cube_a", cube_a), ("cube_b", cube_b)):
        if cube.kind != CubeKind.REFLECTANCE:
            raise ValidationError(f"{name} must be a reflectance cube")
    search_radius = int(search_radius)
    limit = min(cube_a.height, cube_a.width, cube_b.height, cube_b.width) / 4
    if search_radius < 0 or search_radius >= limit:
        raise ParameterError(f"search_radius must lie in [0, {limit}), got {search_radius}")
    img_a, img_b = overlap_images(cube_a, cube_b)
    if np.ptp(img_a) == 0 or np.ptp(img_b) == 0:
        raise DegenerateInputError("constant overlap image: NCC denominator is zero")
    scores = ncc_scores(img_a, img_b, search_radius)
    if not np.isfinite(scores).any():
        raise DegenerateInputError("NCC undefined for every candidate shift")
    best, best_score = None, -np.inf
    for dx, dy in _candidates(search_radius):
        score = scores[dy + search_radius, dx + search_radius]
        if score > best_score:
            best, best_score = (dx, dy), score
    return best


def shift_flags(flags: np.ndarray, shift, shape, fill=False) -> np.ndarray:
    """Resample an A-grid boolean plane onto B's grid; uncovered pixels get ``fill``."""
    dx, dy = shift
    out = np.full(shape, fill, dtype=bool)
    src = _shift_into(np.asarray(flags), dx, dy, shape)
    if src is not None:
        (ys, xs), (sy, sx) = src
        out[ys, xs] = np.asarray(flags, dtype=bool)[sy, sx]
    return out


def _shift_into(arr, dx, dy, shape):
    ha, wa = arr.shape[:2]
    hb, wb = shape[:2]
    y0, y1 = max(0, dy), min(hb, ha + dy)
    x0, x1 = max(0, dx), min(wb, wa + dx)
    if y1 <= y0 or x1 <= x0:
        return None
    return (slice(y0, y1), slice(x0, x1)), (slice(y0 - dy, y1 - dy), slice(x0 - dx, x1 - dx))


def _has_window(valid, size):
    h, w = valid.shape
    if h < size or w < size:
        return False
    s = _box_sums(valid.astype(np.float64))
    counts = s[size:, size:] - s[:-size, size:] - s[size:, :-size] + s[:-size, :-size]
    return bool((counts >= size * size).any())


def fuse(cube_a: Hypercube, cube_b: Hypercube, shift) -> Hypercube:
    """Warp A's bands into B's grid and stack all bands in wavelength order.

    The stack is ``[A bands, B bands]`` permuted by :func:`core.fusion_order`,
    so B's native bands are copied verbatim.  Pixels the shifted A view does
    not cover are filled with zero and cleared in the validity flag channel.
    """
    dx, dy = int(shift[0]), int(shift[1])
    hb, wb = cube_b.height, cube_b.width
    warped = np.zeros((hb, wb, cube_a.bands.count), dtype=np.float32)
    covered = np.zeros((hb, wb), dtype=bool)
    src = _shift_into(cube_a.data, dx, dy, (hb, wb))
    if src is not None:
        (ys, xs), (sy, sx) = src
        warped[ys, xs] = cube_a.data[sy, sx]
        covered[ys, xs] = cube_a.validity()[sy, sx]
    valid = covered & cube_b.validity()
    if not _has_window(valid, PATCH_SIZE):
        raise FusionError(
            f"shift ({dx}, {dy}) leaves no {PATCH_SIZE}x{PATCH_SIZE} valid area")
    order = fusion_order(cube_a.bands, cube_b.bands)
    stacked = np.concatenate([warped, cube_b.data], axis=2)[:, :, order]
    centers = np.concatenate([cube_a.bands.centers_nm, cube_b.bands.centers_nm])[order]
    kind = CubeKind.REFLECTANCE if (cube_a.kind == cube_b.kind == CubeKind.REFLECTANCE) \
        else CubeKind.RAW
    return Hypercube(stacked, BandSet(centers), kind, valid=valid)


def fuse_flags(flags_a: np.ndarray, flags_b: np.ndarray, shift) -> np.ndarray:
    """OR of B's flags with A's flags carried into B's grid."""
    return np.asarray(flags_b, dtype=bool) | shift_flags(flags_a, shift, np.shape(flags_b))
