"""Regenerate tests/data/overlay_4x4.ppm with plain-Python arithmetic.

Run from the repository root: ``python3 tests/make_overlay_golden.py``.
"""
import math
import os
import struct

from stereohsi.core import fused_bands

PALETTE = {1: (255, 215, 0), 2: (46, 139, 87), 3: (178, 34, 34), 4: (30, 58, 138), 5: (210, 105, 30)}
LABELS = [[0, 1, 2, 3], [4, 5, 0, 1], [2, 2, 3, 3], [5, 4, 0, 0]]
ALPHA = 0.45


def value(y, x, b):
    return ((7 * y + 3 * x + b) % 11) / 10.0 - 0.05      # a few values fall outside [0, 1]


def pixel(y, x, centers):
    rgb = []
    for target in (640.0, 550.0, 460.0):
        d = [abs(c - target) for c in centers]
        best = min(d)
        picks = [i for i, v in enumerate(d) if v <= best + 1e-3]
        mean = sum(float(_f32(value(y, x, i))) for i in picks) / len(picks)
        rgb.append(255.0 * min(max(mean, 0.0), 1.0) ** (1 / 2.2))
    lab = LABELS[y][x]
    if lab:
        rgb = [(1 - ALPHA) * v + ALPHA * p for v, p in zip(rgb, PALETTE[lab])]
    return bytes(int(math.floor(v + 0.5)) for v in rgb)


def _f32(v):
    return struct.unpack("<f", struct.pack("<f", v))[0]


def main():
    centers = [float(c) for c in fused_bands().centers_nm]
    body = b"".join(pixel(y, x, centers) for y in range(4) for x in range(4))
    path = os.path.join(os.path.dirname(__file__), "data", "overlay_4x4.ppm")
    with open(path, "wb") as fh:
        fh.write(b"P6\n4 4\n255\n" + body)


if __name__ == "__main__":
    main()
