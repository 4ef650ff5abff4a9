"""HSN1 checkpoint format.

Layout (all little-endian)::

    magic "HSN1" | version u16 = 1
    | architecture block:
        input H, W, L u16 x 3 | in_channels u16 | pool_size u8 | n_conv u8
        | per conv: out_channels u16, kH u8, kW u8, kL u8, pool_after u8
        | n_hidden u8 | per hidden layer: units u16 | n_classes u16
    | parameter count u32
    | parameter blobs, f32, in declaration order
      (conv1.weight [C_out, C_in, kH, kW, kL], conv1.bias, ..., fc1.weight [out, in], ...)
    | optimizer flag u8 (0 = absent, 1 = present)
    | if present: step u64 | learning rate f64 | first moments f32 | second moments f32
      (each in the same declaration order as the parameters)
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Optional, Tuple

import numpy as np

from ..core import _Sink, read_exact
from ..errors import FormatError
from .network import Architecture, Conv3dNet
from .training import AdamState

_MAGIC = b"HSN1"


def _arch_bytes(arch: Architecture) -> bytes:
    out = struct.pack("<HHHHBB", *arch.input_shape, arch.in_channels, arch.pool_size,
                      len(arch.conv_channels))
    for i, (ch, k) in enumerate(zip(arch.conv_channels, arch.conv_kernels)):
        out += struct.pack("<HBBBB", ch, *k, 1 if i in arch.pool_after else 0)
    out += struct.pack("<B", len(arch.hidden))
    out += b"".join(struct.pack("<H", u) for u in arch.hidden)
    out += struct.pack("<H", arch.n_classes)
    return out


def _read_arch(source) -> Architecture:
    h, w, l, cin, pool, n_conv = struct.unpack("<HHHHBB", read_exact(source, 10, "HSN1 architecture"))
    channels, kernels, pool_after = [], [], []
    for i in range(n_conv):
        ch, kh, kw, kl, pooled = struct.unpack("<HBBBB", read_exact(source, 6, "HSN1 conv spec"))
        channels.append(ch)
        kernels.append((kh, kw, kl))
        if pooled:
            pool_after.append(i)
    (n_hidden,) = struct.unpack("<B", read_exact(source, 1, "HSN1 hidden count"))
    hidden = struct.unpack(f"<{n_hidden}H", read_exact(source, 2 * n_hidden, "HSN1 hidden units"))
    (n_classes,) = struct.unpack("<H", read_exact(source, 2, "HSN1 class count"))
    return Architecture((h, w, l), cin, tuple(channels), tuple(kernels), tuple(pool_after),
                        pool, tuple(hidden), n_classes)


def _blobs(arrays) -> bytes:
    return b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)


def write_checkpoint(net: Conv3dNet, destination: BinaryIO, state: Optional[AdamState] = None,
                     lr: float = 0.0) -> int:
    sink = _Sink(destination)
    sink.write(_MAGIC + struct.pack("<H", 1))
    sink.write(_arch_bytes(net.architecture))
    sink.write(struct.pack("<I", net.n_params))
    sink.write(_blobs(net.params.values()))
    if state is None:
        sink.write(b"\x00")
    else:
        sink.write(b"\x01" + struct.pack("<Qd", state.step, lr))
        sink.write(_blobs(state.m[k] for k in net.params))
        sink.write(_blobs(state.v[k] for k in net.params))
    return sink.offset


def _read_params(source, shapes):
    out = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        out[name] = np.frombuffer(read_exact(source, 4 * n, f"HSN1 blob {name}"),
                                  dtype="<f4").reshape(shape).astype(np.float32)
    return out


def read_checkpoint(source: BinaryIO) -> Tuple[Conv3dNet, Optional[AdamState], float]:
    """Returns ``(net, optimizer state or None, learning rate)``."""
    head = read_exact(source, 6, "HSN1 header")
    if head[:4] != _MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}, expected {_MAGIC!r}")
    (version,) = struct.unpack("<H", head[4:])
    if version != 1:
        raise FormatError(f"unsupported HSN1 version {version}")
    arch = _read_arch(source)
    shapes = arch.param_shapes()
    (count,) = struct.unpack("<I", read_exact(source, 4, "HSN1 parameter count"))
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if count != expected:
        raise FormatError(f"parameter count {count} does not match architecture ({expected})")
    net = Conv3dNet(arch, _read_params(source, shapes), np.float32)
    flag = read_exact(source, 1, "HSN1 optimizer flag")
    if flag == b"\x00":
        return net, None, 0.0
    if flag != b"\x01":
        raise FormatError(f"bad optimizer flag {flag!r}")
    step, lr = struct.unpack("<Qd", read_exact(source, 16, "HSN1 optimizer header"))
    m = _read_params(source, shapes)
    v = _read_params(source, shapes)
    return net, AdamState(m, v, step), lr
