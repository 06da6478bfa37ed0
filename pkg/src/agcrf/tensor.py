"""Dense (channels, height, width) tensors with reverse-mode autodiff.

Three moving parts:

* ``Tensor``     - a block of float64 values, shape (C, H, W).  Treated as
  immutable once created; ops return fresh tensors.  Identity, not value,
  is what gradient bookkeeping tracks, so tensors hash by object id.
* ``ConvKernel`` - convolution weights plus stride/padding metadata.
* ``Tape``       - an ordered record of executed ops.  Walking it in reverse
  accumulates gradients for every tensor and kernel the forward pass touched.

Ops are plain functions.  With ``tape=None`` they are pure numpy
computations; with a ``Tape`` they additionally record a backward closure.
Convolution here means cross-correlation (no kernel flip), and all
arithmetic is float64 end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor and kernel shapes cannot be combined."""


class Tensor:
    """A dense (channels, height, width) block of float64 values."""

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[np.newaxis]
        if arr.ndim != 3:
            raise ShapeError(f"tensor data must be 2-d or 3-d, got shape {arr.shape}")
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    @staticmethod
    def zeros(channels: int, height: int, width: int) -> "Tensor":
        return Tensor(np.zeros((channels, height, width)))

    @staticmethod
    def full(channels: int, height: int, width: int, value: float) -> "Tensor":
        return Tensor(np.full((channels, height, width), float(value)))

    @staticmethod
    def ones_like(other: "Tensor") -> "Tensor":
        return Tensor(np.ones_like(other.data))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class ConvKernel:
    """Convolution weights in (out_ch, in_ch, kh, kw) layout plus stride/padding.

    One object serves both directions: ``conv2d`` maps in_ch -> out_ch, and
    ``deconv2d`` applies the exact transpose, mapping out_ch -> in_ch.  A
    standalone upsampling layer consuming A channels and emitting B therefore
    stores its weights with shape (A, B, kh, kw).
    """

    __slots__ = ("values", "stride", "padding")

    def __init__(self, values, stride: int = 1, padding: int = 0) -> None:
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim != 4:
            raise ShapeError(f"kernel values must be 4-d (out,in,kh,kw), got {vals.shape}")
        if vals.shape[2] < 1 or vals.shape[3] < 1:
            raise ShapeError(f"kernel window must be at least 1x1, got {vals.shape[2:]}")
        if int(stride) < 1:
            raise ShapeError(f"stride must be >= 1, got {stride}")
        if int(padding) < 0:
            raise ShapeError(f"padding must be >= 0, got {padding}")
        self.values = vals
        self.stride = int(stride)
        self.padding = int(padding)

    @property
    def out_channels(self) -> int:
        return self.values.shape[0]

    @property
    def in_channels(self) -> int:
        return self.values.shape[1]

    @property
    def ksize(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    @staticmethod
    def zeros(out_ch: int, in_ch: int, kh: int, kw: int,
              stride: int = 1, padding: int = 0) -> "ConvKernel":
        return ConvKernel(np.zeros((out_ch, in_ch, kh, kw)), stride, padding)

    def __repr__(self) -> str:
        return (f"ConvKernel(out={self.out_channels}, in={self.in_channels}, "
                f"k={self.ksize}, stride={self.stride}, padding={self.padding})")


# Parameters are either Tensors or ConvKernels; both expose mutable storage.
def param_array(param) -> np.ndarray:
    """Mutable storage backing a parameter object (Tensor or ConvKernel)."""
    if isinstance(param, Tensor):
        return param.data
    if isinstance(param, ConvKernel):
        return param.values
    raise TypeError(f"not a parameter object: {type(param).__name__}")


@dataclass
class TapeEntry:
    op: str
    note: str
    output: Tensor
    backward: Callable[[np.ndarray, dict], None]
    signature: str


class Tape:
    """Ordered record of executed ops, replayed in reverse for gradients.

    ``note`` is a free-form label copied onto every entry recorded while it
    is set; traces built from it let callers diff two recorded computations
    step by step.
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self.note: str = ""

    def record(self, op: str, output: Tensor,
               backward: Callable[[np.ndarray, dict], None],
               signature: str = "") -> None:
        self.entries.append(TapeEntry(op, self.note, output, backward, signature))

    def trace(self) -> list[str]:
        return [f"{e.note}|{e.op}|{e.signature}" for e in self.entries]

    def backward(self, seeds, seed=None) -> dict:
        """Accumulate gradients from output seeds back to every input.

        ``seeds`` is either a mapping {output Tensor: gradient array} or a
        single output Tensor (seeded with ``seed``, default all ones).
        Returns a dict keyed by object identity: tensors and kernels map to
        their gradient arrays.  Calling backward on an empty tape is an error.
        """
        if not self.entries:
            raise RuntimeError("backward before forward: no ops recorded on this tape")
        if isinstance(seeds, Tensor):
            g = np.ones_like(seeds.data) if seed is None else np.asarray(seed, dtype=np.float64)
            seeds = {seeds: g}
        grads: dict = {}
        for t, g in seeds.items():
            g = np.asarray(g, dtype=np.float64)
            if g.shape != t.data.shape:
                raise ShapeError(f"seed shape {g.shape} does not match output shape {t.data.shape}")
            _acc(grads, t, g.copy())
        for entry in reversed(self.entries):
            g = grads.get(entry.output)
            if g is None:
                continue
            entry.backward(g, grads)
        return grads


def _acc(grads: dict, key, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


# ---------------------------------------------------------------------------
# raw numpy cores shared by the forward and backward passes
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def deconv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k


def _window_cols(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """im2col: return (ho, wo, cols) where cols is (ho*wo, ci*kh*kw)."""
    ci, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, ci * kh * kw)
    return ho, wo, cols


def _corr2d(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    co, ci, kh, kw = w.shape
    ho, wo, cols = _window_cols(x, kh, kw, stride, pad)
    out = cols @ w.reshape(co, -1).T
    return np.ascontiguousarray(out.T.reshape(co, ho, wo))


def _corr2d_adjoint(y: np.ndarray, w: np.ndarray, stride: int, pad: int,
                    out_hw: tuple[int, int]) -> np.ndarray:
    """Exact transpose of ``_corr2d``: scatter (co,ho,wo) back to (ci,H,W)."""
    co, ho, wo = y.shape
    _, ci, kh, kw = w.shape
    h, w_ = out_hw
    cols = y.reshape(co, -1).T @ w.reshape(co, -1)
    cols = cols.reshape(ho, wo, ci, kh, kw)
    gx = np.zeros((ci, h + 2 * pad, w_ + 2 * pad))
    for a in range(kh):
        for b in range(kw):
            gx[:, a:a + (ho - 1) * stride + 1:stride,
                  b:b + (wo - 1) * stride + 1:stride] += cols[:, :, :, a, b].transpose(2, 0, 1)
    return np.ascontiguousarray(gx[:, pad:pad + h, pad:pad + w_])


def _corr2d_wgrad(x: np.ndarray, gy: np.ndarray, stride: int, pad: int,
                  kshape: tuple[int, int, int, int]) -> np.ndarray:
    co, ci, kh, kw = kshape
    _, _, cols = _window_cols(x, kh, kw, stride, pad)
    gw = gy.reshape(co, -1) @ cols
    return gw.reshape(kshape)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval even where float64 would round to exactly 0 or 1
    return np.clip(out, np.finfo(np.float64).tiny, 1.0 - 2.0 ** -53)


def _sig(*shapes) -> str:
    return ",".join(str(tuple(s)) for s in shapes)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: ConvKernel, tape: Tape | None = None) -> Tensor:
    """Cross-correlate ``x`` with ``kernel``.

    Output spatial size is floor((H + 2p - kh) / stride) + 1 per axis.
    """
    if kernel.in_channels != x.channels:
        raise ShapeError(f"conv2d: kernel expects {kernel.in_channels} input channels, "
                         f"input has {x.channels}")
    out = Tensor(_corr2d(x.data, kernel.values, kernel.stride, kernel.padding))

    if tape is not None:
        def bw(g, grads, x=x, k=kernel):
            _acc(grads, x, _corr2d_adjoint(g, k.values, k.stride, k.padding,
                                           (x.height, x.width)))
            _acc(grads, k, _corr2d_wgrad(x.data, g, k.stride, k.padding, k.values.shape))
        tape.record("conv2d", out, bw,
                    _sig(x.shape, kernel.values.shape) + f"s{kernel.stride}p{kernel.padding}")
    return out


def deconv2d(x: Tensor, kernel: ConvKernel, tape: Tape | None = None) -> Tensor:
    """Transposed convolution: the exact adjoint of ``conv2d`` with the same kernel.

    Consumes the kernel's out_ch side and emits its in_ch side; output spatial
    size is (H - 1) * stride - 2p + kh per axis, so that
    <conv2d(a, k), b> == <a, deconv2d(b, k)> for every matching a, b.
    """
    if kernel.out_channels != x.channels:
        raise ShapeError(f"deconv2d: kernel transposes {kernel.out_channels} channels, "
                         f"input has {x.channels}")
    kh, kw = kernel.ksize
    oh = deconv_output_size(x.height, kh, kernel.stride, kernel.padding)
    ow = deconv_output_size(x.width, kw, kernel.stride, kernel.padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"deconv2d: output size {oh}x{ow} is empty for input "
                         f"{x.height}x{x.width}")
    out = Tensor(_corr2d_adjoint(x.data, kernel.values, kernel.stride, kernel.padding,
                                 (oh, ow)))

    if tape is not None:
        def bw(g, grads, x=x, k=kernel):
            _acc(grads, x, _corr2d(g, k.values, k.stride, k.padding))
            _acc(grads, k, _corr2d_wgrad(g, x.data, k.stride, k.padding, k.values.shape))
        tape.record("deconv2d", out, bw,
                    _sig(x.shape, kernel.values.shape) + f"s{kernel.stride}p{kernel.padding}")
    return out


def maxpool(x: Tensor, window: int, stride: int | None = None,
            tape: Tape | None = None) -> Tensor:
    """Max pooling; ties route to the first maximum in row-major window order."""
    stride = window if stride is None else int(stride)
    window = int(window)
    if window < 1 or stride < 1:
        raise ShapeError(f"maxpool window/stride must be >= 1, got {window}/{stride}")
    if window > x.height or window > x.width:
        raise ShapeError(f"maxpool window {window} larger than input {x.height}x{x.width}")
    c = x.channels
    ho = (x.height - window) // stride + 1
    wo = (x.width - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo].reshape(c, ho, wo, window * window)
    idx = win.argmax(axis=3)
    out = Tensor(np.take_along_axis(win, idx[..., np.newaxis], axis=3)[..., 0])

    if tape is not None:
        def bw(g, grads, x=x, idx=idx):
            a, b = np.divmod(idx, window)
            rows = np.arange(ho)[np.newaxis, :, np.newaxis] * stride + a
            cols = np.arange(wo)[np.newaxis, np.newaxis, :] * stride + b
            chan = np.broadcast_to(np.arange(c)[:, np.newaxis, np.newaxis], idx.shape)
            gx = np.zeros_like(x.data)
            np.add.at(gx, (chan, rows, cols), g)
            _acc(grads, x, gx)
        tape.record("maxpool", out, bw, _sig(x.shape) + f"w{window}s{stride}")
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(_stable_sigmoid(x.data))
    if tape is not None:
        def bw(g, grads, x=x, y=out.data):
            _acc(grads, x, g * y * (1.0 - y))
        tape.record("sigmoid", out, bw, _sig(x.shape))
    return out


def tanh(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.tanh(x.data))
    if tape is not None:
        def bw(g, grads, x=x, y=out.data):
            _acc(grads, x, g * (1.0 - y * y))
        tape.record("tanh", out, bw, _sig(x.shape))
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        def bw(g, grads, x=x):
            _acc(grads, x, g * (x.data > 0.0))
        tape.record("relu", out, bw, _sig(x.shape))
    return out


def mul(x: Tensor, y: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if x.shape != y.shape:
        raise ShapeError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    out = Tensor(x.data * y.data)
    if tape is not None:
        def bw(g, grads, x=x, y=y):
            _acc(grads, x, g * y.data)
            _acc(grads, y, g * x.data)
        tape.record("mul", out, bw, _sig(x.shape, y.shape))
    return out


def add(x: Tensor, y: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise sum; shapes must match exactly."""
    if x.shape != y.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")
    out = Tensor(x.data + y.data)
    if tape is not None:
        def bw(g, grads, x=x, y=y):
            _acc(grads, x, g.copy())
            _acc(grads, y, g.copy())
        tape.record("add", out, bw, _sig(x.shape, y.shape))
    return out


def add_bias(x: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """Add a per-channel (C, 1, 1) bias, broadcast across the spatial axes."""
    if bias.shape != (x.channels, 1, 1):
        raise ShapeError(f"add_bias: bias must be ({x.channels}, 1, 1), got {bias.shape}")
    out = Tensor(x.data + bias.data)
    if tape is not None:
        def bw(g, grads, x=x, bias=bias):
            _acc(grads, x, g.copy())
            _acc(grads, bias, g.sum(axis=(1, 2), keepdims=True))
        tape.record("add_bias", out, bw, _sig(x.shape))
    return out


def smul(x: Tensor, scalar: float, tape: Tape | None = None) -> Tensor:
    """Multiply by a python constant (not a trainable parameter)."""
    c = float(scalar)
    out = Tensor(x.data * c)
    if tape is not None:
        def bw(g, grads, x=x, c=c):
            _acc(grads, x, g * c)
        tape.record("smul", out, bw, _sig(x.shape) + f"c{c!r}")
    return out


def concat_channels(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    """Stack tensors along the channel axis; spatial sizes must agree."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels: need at least one tensor")
    hw = (parts[0].height, parts[0].width)
    for p in parts[1:]:
        if (p.height, p.width) != hw:
            raise ShapeError(f"concat_channels: spatial mismatch {hw} vs {(p.height, p.width)}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    if tape is not None:
        splits = np.cumsum([p.channels for p in parts])[:-1]

        def bw(g, grads, parts=parts, splits=splits):
            for p, piece in zip(parts, np.split(g, splits, axis=0)):
                _acc(grads, p, piece.copy())
        tape.record("concat", out, bw, _sig(*(p.shape for p in parts)))
    return out


def tsum(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum every element down to a (1, 1, 1) tensor."""
    out = Tensor(np.array([[[x.data.sum()]]]))
    if tape is not None:
        def bw(g, grads, x=x):
            _acc(grads, x, np.full_like(x.data, float(g[0, 0, 0])))
        tape.record("tsum", out, bw, _sig(x.shape))
    return out
