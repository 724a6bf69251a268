"""Primitive ops: each has a forward rule and an analytic backward rule.

Every function takes :class:`~rga.tensor.Tensor` inputs, validates shapes,
computes its value, and, when a tape is supplied, records a node whose
backward closure accumulates gradients into the inputs. Forward passes are
single-threaded and deterministic: identical inputs produce bit-identical
outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatchError, ShapeError
from .tensor import Tape, Tensor, accumulate, check_feature_map


# ---------------------------------------------------------------------------
# convolution family

def dwconv3x3(x: Tensor, kernel: Tensor, tape: Tape | None = None) -> Tensor:
    """Depthwise 3x3 cross-correlation, stride 1, one-pixel zero padding.

    Channel ``c`` of the output is channel ``c`` of the input correlated with
    kernel ``c``; there is no cross-channel mixing and spatial dims are
    preserved.
    """
    check_feature_map("dwconv3x3 input", x)
    n, c, h, w = x.shape
    if kernel.data.ndim != 4 or kernel.shape[1] != 1 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"depthwise kernel must be (C,1,3,3), got {kernel.shape}")
    if kernel.shape[0] != c:
        raise ShapeError(f"kernel has {kernel.shape[0]} channels, input has {c}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    k = kernel.data
    out = np.zeros_like(x.data)
    for dy in range(3):
        for dx in range(3):
            out += xp[:, :, dy:dy + h, dx:dx + w] * k[:, 0, dy, dx][None, :, None, None]
    y = Tensor(out)
    if tape is not None:
        def backward_fn(gy):
            gyp = np.pad(gy, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gx = np.zeros_like(x.data)
            gk = np.zeros_like(k)
            for dy in range(3):
                for dx in range(3):
                    tap = k[:, 0, dy, dx][None, :, None, None]
                    gx += gyp[:, :, 2 - dy:2 - dy + h, 2 - dx:2 - dx + w] * tap
                    gk[:, 0, dy, dx] = np.einsum(
                        "nchw,nchw->c", xp[:, :, dy:dy + h, dx:dx + w], gy
                    )
            accumulate(x, gx)
            accumulate(kernel, gk)

        tape.record("dwconv3x3", y, (x, kernel), backward_fn)
    return y


def pwconv(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           tape: Tape | None = None) -> Tensor:
    """Pointwise 1x1 convolution: a per-pixel linear map across channels."""
    check_feature_map("pwconv input", x)
    n, c, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise weight must be (Cout,Cin,1,1), got {weight.shape}")
    if weight.shape[1] != c:
        raise ShapeError(f"weight expects {weight.shape[1]} input channels, got {c}")
    cout = weight.shape[0]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    w2 = weight.data[:, :, 0, 0]
    out = np.einsum("oi,nihw->nohw", w2, x.data, optimize=True)
    if bias is not None:
        out += bias.data[None, :, None, None]
    y = Tensor(out)
    if tape is not None:
        def backward_fn(gy):
            accumulate(x, np.einsum("oi,nohw->nihw", w2, gy, optimize=True))
            gw = np.einsum("nohw,nihw->oi", gy, x.data, optimize=True)
            accumulate(weight, gw.reshape(cout, c, 1, 1))
            if bias is not None:
                accumulate(bias, gy.sum(axis=(0, 2, 3)))

        inputs = (x, weight) if bias is None else (x, weight, bias)
        tape.record("pwconv", y, inputs, backward_fn)
    return y


def conv_transpose2x2(x: Tensor, weight: Tensor, tape: Tape | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel.

    Output spatial dims are exactly doubled; with this kernel/stride the
    expanded 2x2 blocks do not overlap.
    """
    check_feature_map("conv_transpose2x2 input", x)
    n, c, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"weight must be (Cin,Cout,2,2), got {weight.shape}")
    if weight.shape[0] != c:
        raise ShapeError(f"weight expects {weight.shape[0]} input channels, got {c}")
    cout = weight.shape[1]
    y6 = np.einsum("nihw,iopq->nohpwq", x.data, weight.data, optimize=True)
    y = Tensor(y6.reshape(n, cout, 2 * h, 2 * w))
    if tape is not None:
        def backward_fn(gy):
            g6 = gy.reshape(n, cout, h, 2, w, 2)
            accumulate(x, np.einsum("nohpwq,iopq->nihw", g6, weight.data, optimize=True))
            accumulate(weight, np.einsum("nihw,nohpwq->iopq", x.data, g6, optimize=True))

        tape.record("conv_transpose2x2", y, (x, weight), backward_fn)
    return y


# ---------------------------------------------------------------------------
# normalization

@dataclass
class BNState:
    """Per-channel running statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int, dtype=np.float32) -> "BNState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, mode: str,
              eps: float = 1e-5, momentum: float = 0.9,
              tape: Tape | None = None) -> Tensor:
    """Per-channel batch normalization with scale/shift.

    Train mode normalizes with batch statistics over ``N*H*W`` (biased
    variance) and updates running stats as
    ``running = momentum * running + (1 - momentum) * batch``. Eval mode
    normalizes with the running stats and leaves the state untouched.
    """
    check_feature_map("batchnorm input", x)
    n, c, h, w = x.shape
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"{name} must have shape ({c},), got {t.shape}")
    if state.mean.shape != (c,) or state.var.shape != (c,):
        raise ShapeError(f"running stats must have length {c}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    axes = (0, 2, 3)
    if mode == "train":
        m = n * h * w
        if m == 1:
            raise DegenerateBatchError(
                "batch statistics are undefined with one element per channel"
            )
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean = momentum * state.mean + (1.0 - momentum) * mu
        state.var = momentum * state.var + (1.0 - momentum) * var
    else:
        mu = state.mean
        var = state.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    y = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])
    if tape is not None:
        if mode == "train":
            def backward_fn(gy):
                m_ = n * h * w
                sum_gy = gy.sum(axis=axes)
                sum_gy_xhat = (gy * xhat).sum(axis=axes)
                accumulate(gamma, sum_gy_xhat)
                accumulate(beta, sum_gy)
                coeff = (gamma.data * inv)[None, :, None, None]
                gx = coeff * (
                    gy
                    - sum_gy[None, :, None, None] / m_
                    - xhat * sum_gy_xhat[None, :, None, None] / m_
                )
                accumulate(x, gx)
        else:
            def backward_fn(gy):
                accumulate(gamma, (gy * xhat).sum(axis=axes))
                accumulate(beta, gy.sum(axis=axes))
                accumulate(x, gy * (gamma.data * inv)[None, :, None, None])

        tape.record("batchnorm", y, (x, gamma, beta), backward_fn)
    return y


# ---------------------------------------------------------------------------
# elementwise

def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Element-wise ``max(0, x)``."""
    y = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        mask = x.data > 0

        def backward_fn(gy):
            accumulate(x, gy * mask)

        tape.record("relu", y, (x,), backward_fn)
    return y


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Element-wise logistic function, computed without overflowing exp."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    y = Tensor(out)
    if tape is not None:
        def backward_fn(gy):
            accumulate(x, gy * out * (1.0 - out))

        tape.record("sigmoid", y, (x,), backward_fn)
    return y


def one_minus(x: Tensor, tape: Tape | None = None) -> Tensor:
    """``1 - x``; used as the inverse gate on sigmoid-activated maps."""
    y = Tensor(1.0 - x.data)
    if tape is not None:
        def backward_fn(gy):
            accumulate(x, -gy)

        tape.record("one_minus", y, (x,), backward_fn)
    return y


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Element-wise sum of two equally shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    y = Tensor(a.data + b.data)
    if tape is not None:
        def backward_fn(gy):
            accumulate(a, gy)
            accumulate(b, gy)

        tape.record("add", y, (a, b), backward_fn)
    return y


def scale(x: Tensor, factor: float, tape: Tape | None = None) -> Tensor:
    """Multiply by a constant scalar."""
    y = Tensor(x.data * factor)
    if tape is not None:
        def backward_fn(gy):
            accumulate(x, gy * factor)

        tape.record("scale", y, (x,), backward_fn)
    return y


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum every element down to a 0-D tensor."""
    y = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    if tape is not None:
        def backward_fn(gy):
            accumulate(x, gy * np.ones_like(x.data))

        tape.record("sum", y, (x,), backward_fn)
    return y


def hadamard_broadcast(features: Tensor, gate: Tensor,
                       tape: Tape | None = None) -> Tensor:
    """Multiply every feature channel element-wise by a single-channel map."""
    check_feature_map("hadamard features", features)
    check_feature_map("hadamard gate", gate)
    n, c, h, w = features.shape
    if gate.shape[1] != 1:
        raise ShapeError(f"gate must have exactly 1 channel, got {gate.shape[1]}")
    if gate.shape[0] != n or gate.shape[2:] != (h, w):
        raise ShapeError(f"gate shape {gate.shape} does not match features {features.shape}")
    y = Tensor(features.data * gate.data)
    if tape is not None:
        def backward_fn(gy):
            accumulate(features, gy * gate.data)
            accumulate(gate, (gy * features.data).sum(axis=1, keepdims=True))

        tape.record("hadamard_broadcast", y, (features, gate), backward_fn)
    return y


# ---------------------------------------------------------------------------
# shape movers

def maxpool2x2(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Non-overlapping 2x2 max pooling; halves both spatial dims."""
    check_feature_map("maxpool2x2 input", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = (
        x.data.reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = win.argmax(axis=-1)
    y = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])
    if tape is not None:
        def backward_fn(gy):
            gwin = np.zeros((n, c, h2, w2, 4), dtype=gy.dtype)
            np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
            gx = (
                gwin.reshape(n, c, h2, w2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )
            accumulate(x, gx)

        tape.record("maxpool2x2", y, (x,), backward_fn)
    return y


def concat_channels(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Concatenate along the channel axis; channels of ``a`` come first."""
    check_feature_map("concat lhs", a)
    check_feature_map("concat rhs", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat batch/spatial dims differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    y = Tensor(np.concatenate([a.data, b.data], axis=1))
    if tape is not None:
        def backward_fn(gy):
            accumulate(a, gy[:, :ca])
            accumulate(b, gy[:, ca:])

        tape.record("concat_channels", y, (a, b), backward_fn)
    return y


def _linear_coords(n_in: int, n_out: int, dtype):
    """Half-pixel-center source coordinates with edge clamping."""
    scale_ = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale_ - 0.5
    i0f = np.floor(src)
    frac = (src - i0f).astype(dtype)
    i0 = np.clip(i0f, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.int64)
    return i0, i1, frac


def resize_bilinear(x: Tensor, out_h: int, out_w: int,
                    tape: Tape | None = None) -> Tensor:
    """Bilinear resize with half-pixel centers; same-size calls are identity."""
    check_feature_map("resize input", x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    y0, y1, fy = _linear_coords(h, out_h, x.dtype)
    x0, x1, fx = _linear_coords(w, out_w, x.dtype)
    fy = fy[:, None]
    fx = fx[None, :]
    d = x.data
    out = (
        d[:, :, y0][:, :, :, x0] * (1 - fy) * (1 - fx)
        + d[:, :, y0][:, :, :, x1] * (1 - fy) * fx
        + d[:, :, y1][:, :, :, x0] * fy * (1 - fx)
        + d[:, :, y1][:, :, :, x1] * fy * fx
    )
    y = Tensor(out)
    if tape is not None:
        def backward_fn(gy):
            gx = np.zeros_like(d)
            nn = np.arange(n)[:, None, None, None]
            cc = np.arange(c)[None, :, None, None]
            for iy, wy in ((y0, 1 - fy), (y1, fy)):
                for ix, wx in ((x0, 1 - fx), (x1, fx)):
                    np.add.at(
                        gx,
                        (nn, cc, iy[None, None, :, None], ix[None, None, None, :]),
                        gy * wy * wx,
                    )
            accumulate(x, gx)

        tape.record("resize_bilinear", y, (x,), backward_fn)
    return y
