"""Six-convolution / three-dense 3-D CNN over (H, W, lambda) patches."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from ..core import seeded_rng
from ..errors import NumericError, ShapeError, ValidationError
from . import layers as L


@dataclass(frozen=True)
class Architecture:
    """Layer constants.  ``pool_after`` lists 0-based conv indices followed by a pool."""

    input_shape: Tuple[int, int, int] = (31, 31, 41)
    in_channels: int = 1
    conv_channels: Tuple[int, ...] = (8, 8, 16, 16, 32, 32)
    conv_kernels: Tuple[Tuple[int, int, int], ...] = (
        (3, 3, 3), (3, 3, 3), (3, 3, 3), (3, 3, 3), (3, 3, 3), (2, 2, 2))
    pool_after: Tuple[int, ...] = (1, 3)
    pool_size: int = 2
    hidden: Tuple[int, ...] = (64, 32)
    n_classes: int = 5

    def __post_init__(self):
        if len(self.conv_channels) != len(self.conv_kernels):
            raise ValidationError("conv_channels and conv_kernels differ in length")
        self.shape_trace()

    def shape_trace(self):
        """``[(layer name, output shape), ...]`` for one sample; raises on underflow."""
        shape = tuple(self.input_shape) + (self.in_channels,)
        trace = [("input", shape)]
        for i, (ch, k) in enumerate(zip(self.conv_channels, self.conv_kernels)):
            out = tuple(s - kk + 1 for s, kk in zip(shape[:3], k))
            if min(out) < 1:
                raise ShapeError(f"conv{i + 1}: kernel {k} does not fit {shape[:3]}; "
                                 f"trace so far: {trace}")
            shape = out + (ch,)
            trace.append((f"conv{i + 1}", shape))
            if i in self.pool_after:
                out = tuple(s // self.pool_size for s in shape[:3])
                if min(out) < 1:
                    raise ShapeError(f"pool after conv{i + 1} underflows {shape[:3]}; "
                                     f"trace so far: {trace}")
                shape = out + (ch,)
                trace.append((f"pool{i + 1}", shape))
        flat = int(np.prod(shape))
        trace.append(("flatten", (flat,)))
        for j, units in enumerate(self.hidden + (self.n_classes,)):
            trace.append((f"fc{j + 1}", (units,)))
        return trace

    @property
    def flat_features(self) -> int:
        return self.shape_trace()[-len(self.hidden) - 2][1][0]

    def param_shapes(self) -> Dict[str, tuple]:
        shapes = {}
        cin = self.in_channels
        for i, (ch, k) in enumerate(zip(self.conv_channels, self.conv_kernels)):
            shapes[f"conv{i + 1}.weight"] = (ch, cin) + tuple(k)
            shapes[f"conv{i + 1}.bias"] = (ch,)
            cin = ch
        fan_in = self.flat_features
        for j, units in enumerate(self.hidden + (self.n_classes,)):
            shapes[f"fc{j + 1}.weight"] = (units, fan_in)
            shapes[f"fc{j + 1}.bias"] = (units,)
            fan_in = units
        return shapes


DEFAULT_ARCHITECTURE = Architecture()


@dataclass(eq=False)
class Conv3dNet:
    """Parameter container plus forward/backward passes.

    Parameters live in an insertion-ordered dict; that order is the
    declaration order used by checkpoints and the optimizer.
    """

    architecture: Architecture = DEFAULT_ARCHITECTURE
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    dtype: type = np.float32

    @classmethod
    def initialize(cls, architecture: Architecture = DEFAULT_ARCHITECTURE, seed: int = 0,
                   dtype=np.float32, zero: bool = False) -> "Conv3dNet":
        """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
        rng = seeded_rng(seed)
        params = {}
        for name, shape in architecture.param_shapes().items():
            if name.endswith(".bias") or zero:
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return cls(architecture, params, dtype)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Conv3dNet":
        return Conv3dNet(self.architecture, {k: v.copy() for k, v in self.params.items()},
                         self.dtype)

    def astype(self, dtype) -> "Conv3dNet":
        return Conv3dNet(self.architecture,
                         {k: v.astype(dtype) for k, v in self.params.items()}, dtype)

    # ------------------------------------------------------------------ passes

    def _prepare(self, x):
        x = np.asarray(x, dtype=self.dtype)
        arch = self.architecture
        if x.ndim == 3:
            x = x[None]
        if x.ndim == 4 and arch.in_channels == 1:
            x = x[..., None]
        expected = tuple(arch.input_shape) + (arch.in_channels,)
        if x.ndim != 5 or x.shape[1:] != expected:
            raise ShapeError(f"input shape {x.shape} does not match {expected}")
        if not np.all(np.isfinite(x)):
            raise NumericError("input patch contains non-finite values")
        return x

    @staticmethod
    def _finite(a, name):
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activation in layer {name}")
        return a

    def logits(self, x, keep: bool = False):
        """Forward pass to the logits.  With ``keep`` the layer inputs are returned too."""
        # overflow surfaces as NumericError from _finite, not as a warning
        with np.errstate(over="ignore", invalid="ignore"):
            return self._forward(x, keep)

    def _forward(self, x, keep):
        arch = self.architecture
        p = self.params
        h = self._prepare(x)
        cache = []
        for i in range(len(arch.conv_channels)):
            name = f"conv{i + 1}"
            z = L.conv3d_forward(h, p[name + ".weight"], p[name + ".bias"])
            self._finite(z, name)
            cache.append(("conv", name, h, z))
            h = L.relu_forward(z)
            if i in arch.pool_after:
                pooled, arg = L.maxpool3d_forward(h, arch.pool_size)
                cache.append(("pool", f"pool{i + 1}", h.shape, arg))
                h = pooled
        conv_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        cache.append(("flatten", "flatten", conv_shape, None))
        n_fc = len(arch.hidden) + 1
        for j in range(n_fc):
            name = f"fc{j + 1}"
            z = L.dense_forward(h, p[name + ".weight"], p[name + ".bias"])
            self._finite(z, name)
            cache.append(("dense", name, h, z))
            h = L.relu_forward(z) if j < n_fc - 1 else z
        return (h, cache) if keep else h

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(x)
        single = x.ndim == 3
        if single:
            x = x[None]
        out = [L.softmax(self.logits(x[s:s + batch_size]).astype(np.float64))
               for s in range(0, len(x), batch_size)]
        probs = np.concatenate(out) if out else np.zeros((0, self.architecture.n_classes))
        return probs[0] if single else probs

    def loss_and_grads(self, x, targets):
        """Mean cross-entropy and gradient for every parameter.

        ``targets`` are 0-based class indices.
        """
        targets = np.asarray(targets, dtype=np.int64)
        if targets.size == 0:
            raise ValidationError("empty batch")
        logits, cache = self.logits(x, keep=True)
        loss, g = L.softmax_cross_entropy(logits, targets)
        g = g.astype(self.dtype)
        grads = {}
        n_fc = len(self.architecture.hidden) + 1
        for kind, name, a, b in reversed(cache):
            if kind == "dense":
                if not name.endswith(str(n_fc)):
                    g = L.relu_backward(b, g)
                g, grads[name + ".weight"], grads[name + ".bias"] = L.dense_backward(
                    a, self.params[name + ".weight"], g)
            elif kind == "flatten":
                g = g.reshape(a)
            elif kind == "pool":
                g = L.maxpool3d_backward(g, b, a, self.architecture.pool_size)
            else:
                g = L.relu_backward(b, g)
                first = name == "conv1"
                gx, grads[name + ".weight"], grads[name + ".bias"] = L.conv3d_backward(
                    a, self.params[name + ".weight"], g, need_input_grad=not first)
                g = gx
        ordered = {k: grads[k].astype(self.dtype) for k in self.params}
        return loss, ordered
