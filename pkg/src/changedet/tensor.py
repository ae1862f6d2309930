"""Rank-4 tensors (batch, channel, height, width) with reverse-mode autodiff.

Values are NCHW float32 arrays by default; float64 is used in the
verification mode that backs the finite-difference gradient checks.  Ops
execute eagerly.  While a :class:`Tape` is active on the current thread,
each op appends a backward closure; ``Tape.backward`` replays the closures
in reverse execution order, so building the tape in forward order is all
the topological sorting we ever need.  The tape is rebuilt on every forward
pass (define-by-run).

Tensors are immutable by convention: ops return new tensors and never write
into their inputs.  A tape and its backward pass belong to a single thread.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, GraphError, NumericError, ShapeError

REAL32 = np.float32
REAL64 = np.float64

# Scan every op output for NaN/inf.  Cheap at desk scale; silent NaN
# propagation is treated as a bug, not a value.
CHECK_FINITE = True

_tls = threading.local()


def active_tape():
    """The tape recording on this thread, or None."""
    return getattr(_tls, "tape", None)


class FlopCounter:
    """Accumulates forward-pass FLOPs of ops executed while active.

    Convention (documented, not universal): a multiply-accumulate is 2 FLOPs;
    a convolution additionally pays 1 FLOP per output element for its bias;
    elementwise ops, reductions, and channel pools pay 1 FLOP per output
    element; bilinear resampling pays 8 per output element (4 taps, weighted);
    concatenation is free.  Counts cover forward only.
    """

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def __enter__(self) -> "FlopCounter":
        if getattr(_tls, "flops", None) is not None:
            raise GraphError("a FlopCounter is already active on this thread")
        _tls.flops = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.flops = None
        return False

    def _add(self, op: str, n: int):
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


class Tensor:
    """A rank-4 array, optionally attached to a tape record.

    grad is allocated lazily during backward; it stays None for tensors the
    loss never reaches.  requires_grad=False marks leaves (such as input
    images) whose gradient nobody will read, letting ops skip the work.
    """

    __slots__ = ("data", "grad", "tape", "node", "requires_grad")

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (REAL32, REAL64):
            arr = arr.astype(REAL32)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 (N,C,H,W), got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.node: int | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


class Tape:
    """Execution-ordered record of differentiable ops.

    Use as a context manager around a forward pass; records accumulate in
    execution order, so one reverse sweep propagates every gradient.  A tape
    can run backward exactly once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise GraphError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, backward: Callable[[np.ndarray], None]):
        out.tape = self
        out.node = len(self._records)
        self._records.append((out, backward))

    def backward(self, loss: Tensor):
        """Propagate d(loss)/d(x) into .grad of every tensor reachable from loss."""
        if loss.tape is not self:
            raise GraphError("backward target was not produced on this tape")
        if loss.shape != (1, 1, 1, 1):
            raise ShapeError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
        self._seeded_backward(loss, np.ones_like(loss.data))

    def _seeded_backward(self, out: Tensor, seed: np.ndarray):
        # Used directly by gradcheck to backpropagate an arbitrary cotangent.
        if self._spent:
            raise GraphError("tape already consumed by a backward pass")
        self._spent = True
        out.grad = seed
        for rec_out, backward in reversed(self._records):
            if rec_out.grad is None:
                continue  # not on any path to the seed
            backward(rec_out.grad)


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _emit(
    op: str,
    data: np.ndarray,
    backward: Callable[[np.ndarray], None],
    flops: int | None = None,
) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        tape._record(out, backward)
    counter = getattr(_tls, "flops", None)
    if counter is not None:
        counter._add(op, data.size if flops is None else flops)
    return out


def _same_dtype(op: str, *tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


# ---------------------------------------------------------------------------
# convolution


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D convolution, NCHW, square kernel; groups=C_in gives depthwise.

    weight is (C_out, C_in/groups, k, k); bias, when present, is
    (1, C_out, 1, 1).  Output spatial extent is floor((H+2p-k)/stride)+1.
    """
    n, c_in, h, w = x.shape
    c_out, c_g, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: bad stride/padding ({stride}, {padding})")
    if groups < 1 or c_in % groups != 0 or c_out % groups != 0:
        raise ConfigError(f"conv2d: groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if c_g * groups != c_in:
        raise ShapeError(f"conv2d: weight expects C_in={c_g * groups}, input has {c_in}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input ({h}+2*{padding})")
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        raise ShapeError(f"conv2d: bias must be (1,{c_out},1,1), got {bias.shape}")
    _same_dtype("conv2d", *([x, weight] + ([bias] if bias is not None else [])))

    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    # im2col: windows (N, C_in, Ho, Wo, k, k) -> (N, g, C_g*k*k, Ho*Wo)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, groups, c_g * k * k, h_out * w_out
    )
    wm = weight.data.reshape(groups, c_out // groups, c_g * k * k)
    out = np.matmul(wm, cols).reshape(n, c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data

    def backward(gout: np.ndarray):
        go = gout.reshape(n, groups, c_out // groups, h_out * w_out)
        if bias is not None and bias.requires_grad:
            _accum(bias, gout.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1))
        if weight.requires_grad:
            dw = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            _accum(weight, dw.reshape(weight.shape))
        if x.requires_grad:
            dcols = np.matmul(wm.transpose(0, 2, 1), go)
            dcols = dcols.reshape(n, c_in, k, k, h_out, w_out)
            dxp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=gout.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + h_out * stride : stride, j : j + w_out * stride : stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            _accum(x, dxp)

    flops = 2 * n * h_out * w_out * c_out * (k * k * c_g)
    if bias is not None:
        flops += n * h_out * w_out * c_out
    return _emit("conv2d", out, backward, flops=flops)


# ---------------------------------------------------------------------------
# channel pooling / reduction

# Group sums accumulate sequentially (not np.sum) so results are bit-equal
# to a plain loop over the same dtype, which is what the oracle tests demand.


def _group_view(x: Tensor, c_out: int, op: str):
    n, c, h, w = x.shape
    if c_out < 1 or c % c_out != 0:
        raise ConfigError(f"{op}: c_out={c_out} must divide C={c}")
    g = c // c_out
    return x.data.reshape(n, c_out, g, h, w), g


def channel_avg_pool(x: Tensor, c_out: int) -> Tensor:
    """Mean over contiguous channel groups of size C/c_out."""
    xs, g = _group_view(x, c_out, "channel_avg_pool")
    acc = xs[:, :, 0].copy()
    for j in range(1, g):
        acc += xs[:, :, j]
    out = acc / g

    def backward(gout: np.ndarray):
        if x.requires_grad:
            dx = np.broadcast_to((gout / g)[:, :, None], xs.shape).reshape(x.shape)
            _accum(x, dx.copy())

    return _emit("channel_avg_pool", out, backward)


def channel_max_pool(x: Tensor, c_out: int) -> Tensor:
    """Max over contiguous channel groups; gradient goes to the first argmax."""
    xs, g = _group_view(x, c_out, "channel_max_pool")
    idx = xs.argmax(axis=2)  # first maximal index on ties
    out = np.take_along_axis(xs, idx[:, :, None], axis=2).squeeze(2)

    def backward(gout: np.ndarray):
        if x.requires_grad:
            dx = np.zeros_like(xs)
            np.put_along_axis(dx, idx[:, :, None], gout[:, :, None], axis=2)
            _accum(x, dx.reshape(x.shape))

    return _emit("channel_max_pool", out, backward)


def channel_mean(x: Tensor) -> Tensor:
    """Mean over the channel axis, keeping a singleton channel."""
    n, c, h, w = x.shape
    if c < 1:
        raise ShapeError("channel_mean: empty channel axis")
    acc = x.data[:, 0:1].copy()
    for j in range(1, c):
        acc += x.data[:, j : j + 1]
    out = acc / c

    def backward(gout: np.ndarray):
        if x.requires_grad:
            _accum(x, np.broadcast_to(gout / c, x.shape).copy())

    return _emit("channel_mean", out, backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a (1,1,1,1) scalar."""
    out = x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1)

    def backward(gout: np.ndarray):
        if x.requires_grad:
            _accum(x, np.broadcast_to(gout.reshape(()), x.shape).copy())

    return _emit("sum_all", out, backward, flops=x.data.size)


# ---------------------------------------------------------------------------
# resampling


def resize_weights(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """(out_size, in_size) bilinear interpolation matrix.

    Half-pixel source mapping src = (dst+0.5)*in/out - 0.5, clamped to the
    valid range, linear weight between the two bracketing samples.
    """
    m = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for d in range(out_size):
        src = (d + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        f = src - i0
        m[d, i0] += 1.0 - f
        m[d, i1] += f
    return m


def resize_bilinear_array(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-array bilinear resize over the trailing two axes."""
    h, w = img.shape[-2], img.shape[-1]
    if (h, w) == (out_h, out_w):
        return img.copy()
    my = resize_weights(h, out_h, img.dtype)
    mx = resize_weights(w, out_w, img.dtype)
    tmp = np.tensordot(img, my, axes=([-2], [1]))  # (..., W, out_h)
    out = np.tensordot(tmp, mx, axes=([-2], [1]))  # (..., out_h, out_w)
    return np.ascontiguousarray(out)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear spatial resampling with half-pixel centers and edge clamping.

    Identity (a copy) when the target size equals the input size.
    """
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"bilinear_resize: bad target size ({out_h}, {out_w})")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        out = x.data.copy()

        def backward(gout: np.ndarray):
            _accum(x, gout)

        return _emit("bilinear_resize", out, backward, flops=0)

    my = resize_weights(h, out_h, x.dtype)
    mx = resize_weights(w, out_w, x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", my, x.data, mx, optimize=True)

    def backward(gout: np.ndarray):
        if x.requires_grad:
            _accum(x, np.einsum("oh,ncop,pw->nchw", my, gout, mx, optimize=True))

    return _emit("bilinear_resize", np.ascontiguousarray(out), backward, flops=8 * out.size)


# ---------------------------------------------------------------------------
# pointwise


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient 0 at x == 0

    def backward(gout: np.ndarray):
        if x.requires_grad:
            _accum(x, gout * mask)

    return _emit("relu", out, backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(gout: np.ndarray):
        if x.requires_grad:
            _accum(x, gout * (1 - out * out))

    return _emit("tanh", out, backward)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_array(x.data)

    def backward(gout: np.ndarray):
        if x.requires_grad:
            _accum(x, gout * out * (1 - out))

    return _emit("sigmoid", out, backward)


def _sigmoid_array(z: np.ndarray) -> np.ndarray:
    # Branch on sign to avoid exp overflow.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


ELEMENTWISE = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


def elementwise(x: Tensor, f: str) -> Tensor:
    """Apply a named pointwise activation: one of relu, tanh, sigmoid."""
    try:
        fn = ELEMENTWISE[f]
    except KeyError:
        raise ConfigError(f"elementwise: unknown function {f!r}, expected one of {sorted(ELEMENTWISE)}")
    return fn(x)


# ---------------------------------------------------------------------------
# combination


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    _same_dtype("add", a, b)
    out = a.data + b.data

    def backward(gout: np.ndarray):
        _accum(a, gout)
        _accum(b, gout)

    return _emit("add", out, backward)


def mul_broadcast(gate: Tensor, x: Tensor) -> Tensor:
    """Multiply x by a single-channel gate broadcast across channels."""
    n, c, h, w = x.shape
    if gate.shape != (n, 1, h, w):
        raise ShapeError(f"mul_broadcast: gate must be ({n},1,{h},{w}), got {gate.shape}")
    _same_dtype("mul_broadcast", gate, x)
    out = gate.data * x.data

    def backward(gout: np.ndarray):
        if gate.requires_grad:
            _accum(gate, (gout * x.data).sum(axis=1, keepdims=True))
        if x.requires_grad:
            _accum(x, gout * gate.data)

    return _emit("mul_broadcast", out, backward)


def scale(x: Tensor, k: float) -> Tensor:
    """Multiply by a python constant (used to weight loss terms)."""
    k = float(k)
    out = x.data * k

    def backward(gout: np.ndarray):
        if x.requires_grad:
            _accum(x, gout * k)

    return _emit("scale", out, backward)


def concat_channel(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, operand order preserved."""
    if not xs:
        raise ShapeError("concat_channel: empty operand list")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ShapeError(f"concat_channel: N/H/W mismatch, {xs[0].shape} vs {t.shape}")
    _same_dtype("concat_channel", *xs)
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(gout: np.ndarray):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            _accum(t, gout[:, lo:hi])

    return _emit("concat_channel", out, backward, flops=0)


def softmax_channel(x: Tensor) -> Tensor:
    """Per-pixel softmax over channels, stabilized by max subtraction."""
    if x.shape[1] < 2:
        raise ShapeError(f"softmax_channel: needs C >= 2, got C={x.shape[1]}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(gout: np.ndarray):
        if x.requires_grad:
            inner = (gout * out).sum(axis=1, keepdims=True)
            _accum(x, out * (gout - inner))

    return _emit("softmax_channel", out, backward)
