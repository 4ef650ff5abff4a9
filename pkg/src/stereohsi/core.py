"""Domain types, binary cube/mask formats and the seeded generator.

All binary formats are little-endian.  Readers consume exactly the bytes a
record occupies, so records can be concatenated and re-read from any offset.

HSC1 (cube)::

    magic "HSC1" | version u16 = 1 | kind u16 (0 raw, 1 reflectance)
    | height u32 | width u32 | band_count u32 | reserved u64 = 0
    | band centers band_count x f32 | payload H*W*B x f32 (band innermost)

HSM1 (annotation mask)::  magic | height u32 | width u32 | H*W x u8 codes
HSB1 (boolean sidecar)::  magic | height u32 | width u32 | H*W x u8 in {0, 1}
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

import numpy as np

from .errors import CubeIOError, FormatError, LengthError, ValidationError

__all__ = [
    "TissueClass", "CLASSES", "BandSet", "Hypercube", "CubeKind", "AnnotationMask",
    "camera_a_bands", "camera_b_bands", "fused_bands", "fusion_order",
    "write_cube", "read_cube", "write_mask", "read_mask", "write_flags", "read_flags",
    "seeded_rng",
]


class TissueClass(enum.IntEnum):
    UNLABELED = 0
    NERVE = 1
    GLAND = 2
    MUSCLE = 3
    VEIN = 4
    SKIN = 5


#: The five classifiable tissues in code order; UNLABELED is never a target.
CLASSES = tuple(c for c in TissueClass if c != TissueClass.UNLABELED)
N_CLASSES = len(CLASSES)


class CubeKind(enum.IntEnum):
    RAW = 0
    REFLECTANCE = 1


@dataclass(frozen=True)
class BandSet:
    """Ordered band-center wavelengths in nanometers.

    Centers must be non-decreasing.  Coincident centers are allowed because
    the two default cameras share the 516.67 nm and 600 nm positions and the
    fused set keeps both copies.
    """

    centers_nm: np.ndarray

    def __post_init__(self):
        centers = np.array(self.centers_nm, dtype=np.float32).reshape(-1)
        if centers.size == 0:
            raise ValidationError("BandSet needs at least one band")
        if not np.all(np.isfinite(centers)):
            raise ValidationError("band centers must be finite")
        if np.any(np.diff(centers) < 0):
            bad = int(np.argmax(np.diff(centers) < 0))
            raise ValidationError(
                f"band centers not monotone at index {bad + 1}: "
                f"{centers[bad]} > {centers[bad + 1]}")
        centers.setflags(write=False)
        object.__setattr__(self, "centers_nm", centers)

    @property
    def count(self) -> int:
        return int(self.centers_nm.size)

    def __len__(self):
        return self.count

    def __eq__(self, other):
        return isinstance(other, BandSet) and np.array_equal(self.centers_nm, other.centers_nm)

    def __hash__(self):
        return hash(self.centers_nm.tobytes())

    @property
    def strictly_increasing(self) -> bool:
        return bool(np.all(np.diff(self.centers_nm) > 0))

    def nearest(self, wavelength_nm: float) -> int:
        return int(np.argmin(np.abs(self.centers_nm.astype(np.float64) - wavelength_nm)))


def _even_bands(lo, hi, n):
    return BandSet(np.linspace(lo, hi, n))


def camera_a_bands() -> BandSet:
    """16 evenly spaced centers spanning 400-650 nm (step 250/15 nm)."""
    return _even_bands(400.0, 650.0, 16)


def camera_b_bands() -> BandSet:
    """25 evenly spaced centers spanning 475-975 nm (step 500/24 nm)."""
    return _even_bands(475.0, 975.0, 25)


def fusion_order(bands_a: BandSet, bands_b: BandSet) -> np.ndarray:
    """Permutation sorting the stacked ``[A, B]`` centers.

    The sort is stable, so where a camera A center coincides with a camera B
    center the A band comes first.
    """
    stacked = np.concatenate([bands_a.centers_nm, bands_b.centers_nm])
    return np.argsort(stacked, kind="stable")


def fused_bands(bands_a: Optional[BandSet] = None, bands_b: Optional[BandSet] = None) -> BandSet:
    """Sorted concatenation of both cameras' centers (no de-duplication)."""
    bands_a = bands_a or camera_a_bands()
    bands_b = bands_b or camera_b_bands()
    stacked = np.concatenate([bands_a.centers_nm, bands_b.centers_nm])
    return BandSet(stacked[fusion_order(bands_a, bands_b)])


@dataclass(frozen=True, eq=False)
class Hypercube:
    """H x W x B float32 cube with band-innermost layout.

    ``valid`` is an optional H x W boolean flag channel marking pixels that
    carry data in every band (used after fusion).  It is not part of the
    HSC1 payload and travels as an HSB1 sidecar.
    """

    data: np.ndarray
    bands: BandSet
    kind: CubeKind = CubeKind.RAW
    valid: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"cube data must be 3-D (H, W, B), got shape {data.shape}")
        if data.shape[2] != self.bands.count:
            raise ValidationError(
                f"cube has {data.shape[2]} bands but BandSet lists {self.bands.count}")
        if data.dtype != np.float32 or data.flags.writeable or not data.flags.c_contiguous:
            data = np.array(data, dtype=np.float32, order="C")
            data.setflags(write=False)
        kind = CubeKind(self.kind)
        if kind == CubeKind.REFLECTANCE and not np.all(np.isfinite(data)):
            raise ValidationError("reflectance cube contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "kind", kind)
        if self.valid is not None:
            valid = np.array(self.valid, dtype=bool)
            if valid.shape != data.shape[:2]:
                raise ValidationError(
                    f"validity flags shape {valid.shape} != cube shape {data.shape[:2]}")
            valid.setflags(write=False)
            object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def validity(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.data.shape[:2], dtype=bool)
        return self.valid

    def equals(self, other: "Hypercube") -> bool:
        """Bit-exact comparison of payload, bands and kind."""
        return (self.kind == other.kind and self.bands == other.bands
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())


@dataclass(frozen=True, eq=False)
class AnnotationMask:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > max(TissueClass)):
            raise ValidationError("mask codes must lie in {0, ..., 5}")
        labels = np.array(labels, dtype=np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self):
        return self.labels.shape


# --------------------------------------------------------------------------- I/O

_CUBE_MAGIC = b"HSC1"
_CUBE_HEADER = struct.Struct("<4sHHIIIQ")
_PLANE_HEADER = struct.Struct("<4sII")


class _Sink:
    """Counts bytes so write failures can report where they happened."""

    def __init__(self, dest: BinaryIO):
        self.dest = dest
        self.offset = 0

    def write(self, payload: bytes):
        try:
            n = self.dest.write(payload)
        except OSError as exc:
            raise CubeIOError(f"write failed: {exc}", self.offset) from exc
        if n is not None and n != len(payload):
            raise CubeIOError(f"short write ({n} of {len(payload)} bytes)", self.offset + (n or 0))
        self.offset += len(payload)


def read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    buf = source.read(n)
    if buf is None:
        buf = b""
    if len(buf) != n:
        raise LengthError(what, n, len(buf))
    return buf


def write_cube(cube: Hypercube, destination: BinaryIO) -> int:
    """Serialize ``cube`` as HSC1; returns the number of bytes written."""
    data = np.asarray(cube.data)
    h, w, b = data.shape
    if data.size != h * w * cube.bands.count or b != cube.bands.count:
        raise ValidationError("cube payload length does not match H x W x B")
    sink = _Sink(destination)
    sink.write(_CUBE_HEADER.pack(_CUBE_MAGIC, 1, int(cube.kind), h, w, b, 0))
    sink.write(cube.bands.centers_nm.astype("<f4").tobytes())
    sink.write(data.astype("<f4", copy=False).tobytes())
    return sink.offset


def read_cube(source: BinaryIO) -> Hypercube:
    head = read_exact(source, _CUBE_HEADER.size, "HSC1 header")
    magic, version, kind, h, w, b, _reserved = _CUBE_HEADER.unpack(head)
    if magic != _CUBE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_CUBE_MAGIC!r}")
    if version != 1:
        raise FormatError(f"unsupported HSC1 version {version}")
    if kind not in (0, 1):
        raise FormatError(f"unknown cube kind {kind}")
    centers = np.frombuffer(read_exact(source, 4 * b, "HSC1 band centers"), dtype="<f4")
    payload = read_exact(source, 4 * h * w * b, "HSC1 payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, b).astype(np.float32)
    return Hypercube(data, BandSet(centers), CubeKind(kind))


def _write_plane(magic: bytes, plane: np.ndarray, destination: BinaryIO) -> int:
    sink = _Sink(destination)
    h, w = plane.shape
    sink.write(_PLANE_HEADER.pack(magic, h, w))
    sink.write(np.ascontiguousarray(plane, dtype=np.uint8).tobytes())
    return sink.offset


def _read_plane(magic: bytes, source: BinaryIO) -> np.ndarray:
    got, h, w = _PLANE_HEADER.unpack(read_exact(source, _PLANE_HEADER.size, f"{magic.decode()} header"))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    raw = read_exact(source, h * w, f"{magic.decode()} payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def write_mask(mask: AnnotationMask, destination: BinaryIO) -> int:
    return _write_plane(b"HSM1", mask.labels, destination)


def read_mask(source: BinaryIO) -> AnnotationMask:
    return AnnotationMask(_read_plane(b"HSM1", source))


def write_flags(flags: np.ndarray, destination: BinaryIO) -> int:
    return _write_plane(b"HSB1", np.asarray(flags, dtype=bool), destination)


def read_flags(source: BinaryIO) -> np.ndarray:
    plane = _read_plane(b"HSB1", source)
    if plane.size and plane.max() > 1:
        raise FormatError("HSB1 payload must contain only 0/1 bytes")
    return plane.astype(bool)


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: NumPy's PCG64 bit generator seeded with ``seed``.

    PCG64 (128-bit LCG state with an XSL-RR output permutation, seeded via
    NumPy's SeedSequence hashing) has a fixed, platform-independent bit
    stream, which is what makes seeded runs reproducible.
    """
    seed = int(seed)
    if not 0 <= seed < 2 ** 64:
        raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))
