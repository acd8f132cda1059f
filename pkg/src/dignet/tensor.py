"""Dense NCHW tensors and a reverse-mode tape.

Every differentiable operator here takes :class:`Tensor` inputs, computes its
forward value with numpy and, when a :class:`Tape` is active and any input
requires a gradient, records a vector-Jacobian closure on that tape.  Calling
:meth:`Tape.backward` replays the records in strict reverse order, so a graph
that reuses the same :class:`Parameter` across several unrolled iterations
sums the per-iteration contributions into ``Parameter.grad``.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255

_DTYPES = {"f32": np.float32, "f64": np.float64}


class NonFiniteError(FloatingPointError):
    """Raised when an operator produces NaN or Inf."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite value produced by {op} ({where})")
        self.op = op
        self.where = where


def as_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(_DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    return np.dtype(precision)


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Tensors are treated as immutable once produced; operators never write
    into ``data`` of their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class Parameter(Tensor):
    """A named trainable tensor whose gradient buffer always exists."""

    __slots__ = ()

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        """Convert value and gradient in place (used for f64 gradient checks)."""
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operators executed inside the ``with`` block
    are recorded.  Tapes do not nest: entering a tape while another is active
    raises.
    """

    records: list = field(default_factory=list)
    _leaves: dict = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise RuntimeError("a tape is already recording")
        _STATE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tape = None

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, op, out, inputs, vjp) -> None:
        node = len(self.records)
        for t in inputs:
            if t.requires_grad and t._node is not None:
                # inputs must already be on this tape (or be leaves)
                assert self.records[t._node].out is t, f"{op}: input from a foreign tape"
                assert t._node < node
        out._node = node
        self.records.append(_Record(op, out, tuple(inputs), vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._node is None or loss._node >= len(self.records) \
                or self.records[loss._node].out is not loss:
            raise ValueError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records[: loss._node + 1]):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NonFiniteError(rec.op, "backward")
                if t._node is None:
                    if t.grad is None:
                        t.grad = gi.astype(t.dtype, copy=True)
                    else:
                        t.grad += gi
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        # detach every recorded output so the tape can be discarded
        for rec in self.records:
            rec.out._node = None


# one recording tape per thread, so independent passes can run concurrently
_STATE = threading.local()


def active_tape() -> Optional[Tape]:
    return getattr(_STATE, "tape", None)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape._record(op, out, inputs, vjp)
    return out


def _check4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{op}: expected an NCHW tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation lowered to one matrix product over a patch matrix."""
    _check4(x, "conv2d")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d: weight must be (Cout, Cin, kh, kw), got {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be positive and pad non-negative")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cin}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: non-positive output size {ho}x{wo}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")

    xp = x.data
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = xp.shape[2], xp.shape[3]
    k = c * kh * kw
    m = n * ho * wo
    # transposed patch matrix: rows (c, i, j), columns (n, ho, wo)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win[:, :, :ho, :wo].transpose(1, 4, 5, 0, 2, 3)).reshape(k, m)
    w2 = weight.data.reshape(cout, k)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3), dtype=x.dtype)

    def vjp(g):
        gw = gx = gb = None
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, m)
        if bias is not None and bias.requires_grad:
            gb = gt.sum(axis=1)
        if weight.requires_grad:
            gw = (gt @ cols.T).reshape(weight.shape)
        if x.requires_grad:
            gcols = (w2.T @ gt).reshape(c, kh, kw, n, ho, wo)
            if kh == 1 and kw == 1 and stride == 1:
                acc = gcols[:, 0, 0]
            else:
                acc = np.zeros((c, n, hp, wp), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        acc[:, :, i: i + stride * (ho - 1) + 1: stride,
                            j: j + stride * (wo - 1) + 1: stride] += gcols[:, i, j]
            gx = acc.transpose(1, 0, 2, 3)
            if pad:
                gx = gx[:, :, pad: pad + h, pad: pad + w]
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, vjp)


# --------------------------------------------------------------------------
# separable linear resampling (bilinear upsampling and adaptive pooling)


def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix (out_size, in_size), half-pixel centres, edge-clamped."""
    m = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for d in range(out_size):
        src = (d + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[d, i0] += 1.0 - frac
        m[d, i1] += frac
    return m


def pool_windows(in_size: int, out_size: int) -> list[tuple[int, int]]:
    """Half-open windows [floor(i*H/out), ceil((i+1)*H/out)) for each output cell."""
    return [((i * in_size) // out_size, -((-(i + 1) * in_size) // out_size))
            for i in range(out_size)]


def pool_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    m = np.zeros((out_size, in_size), dtype=dtype)
    for i, (lo, hi) in enumerate(pool_windows(in_size, out_size)):
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def _separable(op: str, x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    mh = mh.astype(x.dtype)
    mw = mw.astype(x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def vjp(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return _emit(op, out, (x,), vjp)


def _identity(op: str, x: Tensor) -> Tensor:
    return _emit(op, x.data, (x,), lambda g: (g,))


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check4(x, "bilinear_upsample")
    h, w = x.shape[2], x.shape[3]
    if out_h < h or out_w < w:
        raise ValueError(f"bilinear_upsample: target {out_h}x{out_w} is smaller than "
                         f"input {h}x{w}")
    if (out_h, out_w) == (h, w):
        return _identity("bilinear_upsample", x)
    return _separable("bilinear_upsample", x, bilinear_matrix(h, out_h),
                      bilinear_matrix(w, out_w))


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check4(x, "adaptive_avg_pool")
    h, w = x.shape[2], x.shape[3]
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ValueError(f"adaptive_avg_pool: output {out_h}x{out_w} outside 1..{h}x1..{w}")
    if (out_h, out_w) == (h, w):
        return _identity("adaptive_avg_pool", x)
    return _separable("adaptive_avg_pool", x, pool_matrix(h, out_h), pool_matrix(w, out_w))


# --------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return _emit("relu", out, (x,), lambda g: (g * mask,))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _emit("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis, first argument's channels first."""
    if not tensors:
        raise ValueError("concat_channels: nothing to concatenate")
    for t in tensors:
        _check4(t, "concat_channels")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(f"concat_channels: cannot concatenate {tensors[0].shape} "
                             f"with {t.shape}")
    if len(tensors) == 1:
        return _identity("concat_channels", tensors[0])
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def vjp(g):
        return tuple(g[:, bounds[k]: bounds[k + 1]] for k in range(len(tensors)))

    return _emit("concat_channels", out, tensors, vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check4(x, "slice_channels")
    c = x.shape[1]
    if not (0 <= start < stop <= c):
        raise ValueError(f"slice_channels: [{start}, {stop}) outside 0..{c}")
    out = x.data[:, start:stop].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _emit("slice_channels", out, (x,), vjp)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    axes = tuple(k for k, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def eltwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; ``b`` may be (N, C, 1, 1) and broadcast over space."""
    _check4(a, "eltwise_mul")
    _check4(b, "eltwise_mul")
    ok = a.shape == b.shape or (
        b.shape[:2] == a.shape[:2] and b.shape[2:] == (1, 1))
    if not ok:
        raise ValueError(f"eltwise_mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def vjp(g):
        return g * b.data, _reduce_to(g * a.data, b.shape)

    return _emit("eltwise_mul", out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return _emit("scale", x.data * x.dtype.type(factor), (x,),
                 lambda g: (g * x.dtype.type(factor),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum_all", out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def dot(x: Tensor, coeffs: np.ndarray) -> Tensor:
    """Scalar sum(x * coeffs) against a constant array."""
    c = np.asarray(coeffs, dtype=x.dtype)
    out = np.asarray((x.data * c).sum(), dtype=x.dtype)
    return _emit("dot", out, (x,), lambda g: (g * c,))


# --------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean of -log softmax(logits)[label] over non-ignored pixels."""
    _check4(logits, "softmax_cross_entropy")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"softmax_cross_entropy: labels shape {labels.shape} does not "
                         f"match logits {logits.shape}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"softmax_cross_entropy: label {labels[bad][0]} outside [0, {k})")
    count = int(valid.sum())
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    if count == 0:
        loss = np.asarray(0.0, dtype=z.dtype)
    else:
        loss = np.asarray(-(picked * valid).sum() / count, dtype=z.dtype)

    def vjp(g):
        if count == 0:
            return (np.zeros_like(z),)
        p = np.exp(logp)
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        gz = (p - onehot) * valid[:, None] * (g / count)
        return (gz.astype(z.dtype),)

    return _emit("softmax_cross_entropy", loss, (logits,), vjp)
