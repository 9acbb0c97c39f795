"""Minimal dense-tensor engine with reverse-mode differentiation.

Single precision (float32) throughout.  Tensors wrap a numpy array plus an
optional gradient buffer; every differentiable operation records its parents
and a backward closure, so `backward(loss)` can replay the graph in reverse
topological order.  Only the operations the polar network actually needs are
implemented: 2-D convolution with dilation and circular-row padding, max
pooling, global/channel pools, a handful of activations, affine maps and the
elementwise glue.

Broadcasting is deliberately restricted to tensor-scalar; anything else must
be expressed through the explicit shaped ops (`scale_channels`,
`scale_spatial`, ...) so that oracle comparisons in the tests stay
unambiguous.
"""

from __future__ import annotations

import itertools
import json
import threading
from contextlib import contextmanager

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(FloatingPointError):
    """A tensor value became NaN or infinite."""


class GraphError(RuntimeError):
    """Backward was called on an unusable node (non-scalar, detached, reused)."""


_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense float32 array with optional gradient tracking.

    `data` is row-major; image tensors use (N, C, H, W) order.  `grad` is
    lazily allocated with the same shape.  All values must stay finite; a
    NaN/Inf raises ``NumericError`` at construction time.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_id", "_op",
                 "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad=False, name=None,
                 _op="leaf", _parents=()):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or _op!r}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._id = next(_ids)
        self._op = _op
        self._parents = _parents
        self._backward = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = self.name or self._op
        return f"Tensor({tag}, shape={self.data.shape}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None
        self._backward_ran = False

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # Light operator sugar; everything routes through the named ops below.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward):
    """Wrap an op result, recording the graph only when it is needed."""
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _op=op,
                 _parents=tuple(parents) if track else ())
    if track:
        out._backward = backward
    return out


def graph_nodes(root: Tensor):
    """Topologically ordered operation records reachable from ``root``.

    Each record is (op name, parent ids, node id); every parent id appears
    as a node id earlier in the list (leaves included).
    """
    order = toposort(root)
    return [(t._op, tuple(p._id for p in t._parents), t._id) for t in order]


def toposort(root: Tensor):
    """Iterative post-order DFS; parents always precede consumers."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in visited:
            continue
        visited.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p._id not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Reverse-mode pass from a scalar loss.

    Gradients accumulate into ``.grad`` of every reachable tensor (summing
    over fan-out).  Calling backward twice on the same loss without a reset
    is an error; accumulating a second, different loss is allowed.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss._backward_ran:
        raise GraphError("backward already ran for this loss; reset grads first")
    if not loss._parents and not loss.requires_grad:
        raise GraphError("loss is detached from any tracked tensor")
    loss._backward_ran = True
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(toposort(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# padding helpers

def _pad2d(x, pads, row_mode="zeros", fill=0.0):
    """Pad the last two axes.  pads = ((top, bottom), (left, right)).

    Rows (the H axis) may wrap circularly -- in polar-domain maps H is the
    angular axis, which is topologically a circle.  Columns always take the
    constant fill.
    """
    (pt, pb), (pl, pr) = pads
    if pt == pb == pl == pr == 0:
        return x
    nd = x.ndim
    row_pad = [(0, 0)] * (nd - 2) + [(pt, pb), (0, 0)]
    col_pad = [(0, 0)] * (nd - 2) + [(0, 0), (pl, pr)]
    if pt or pb:
        if row_mode == "circular":
            if max(pt, pb) > x.shape[-2]:
                raise ShapeError("circular padding wider than the row extent")
            x = np.pad(x, row_pad, mode="wrap")
        else:
            x = np.pad(x, row_pad, mode="constant", constant_values=fill)
    if pl or pr:
        x = np.pad(x, col_pad, mode="constant", constant_values=fill)
    return x


def _unpad_rows_fold(gpad, pads, H, W, row_mode):
    """Inverse of `_pad2d` for gradients: crop, folding wrapped rows back."""
    (pt, pb), (pl, pr) = pads
    core = gpad[..., pt:pt + H, :]
    if row_mode == "circular":
        if pt:
            core[..., H - pt:, :] += gpad[..., :pt, :]
        if pb:
            core[..., :pb, :] += gpad[..., pt + H:, :]
    return core[..., :, pl:pl + W]


def _resolve_padding(padding, k, dilation, stride, op):
    """Map the public padding vocabulary to explicit per-side amounts."""
    eff = (k - 1) * dilation + 1
    if padding == "valid":
        return (0, 0)
    if padding == "same":
        if stride != 1:
            raise ShapeError(f"{op}: padding='same' requires stride=1")
        total = eff - 1
        before = total // 2
        return (before, total - before)
    if isinstance(padding, int):
        if padding < 0:
            raise ShapeError(f"{op}: negative padding")
        return (padding, padding)
    raise ShapeError(f"{op}: unknown padding {padding!r}")


def _windows(xp, k, dilation, stride):
    """Sliding (k x k) windows with dilation/stride over the padded array.

    Returns a view of shape (..., Ho, Wo, k, k).
    """
    eff = (k - 1) * dilation + 1
    Hp, Wp = xp.shape[-2:]
    if eff > Hp or eff > Wp:
        raise ShapeError(f"window {eff} exceeds padded extent {Hp}x{Wp}")
    v = np.lib.stride_tricks.sliding_window_view(xp, (eff, eff), axis=(-2, -1))
    v = v[..., ::dilation, ::dilation]          # dilated taps inside window
    return v[..., ::stride, ::stride, :, :]     # strided output grid


# ---------------------------------------------------------------------------
# convolution / pooling

def conv2d(x, kernel, bias=None, dilation=1, stride=1, padding="same",
           row_pad="zeros"):
    """2-D cross-correlation with dilation.

    x: (N, Cin, H, W); kernel: (Cout, Cin, K, K) with K odd; bias: (Cout,)
    or None.  padding is 'same' (stride 1, zero fill), 'valid', or an
    explicit int.  row_pad='circular' wraps the H axis instead of zero
    filling it (the angular axis of polar maps).
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    N, Cin, H, W = x.shape
    Cout, Ck, K, K2 = kernel.shape
    if K != K2 or K % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {K}x{K2}")
    if Ck != Cin:
        raise ShapeError(f"channel mismatch: input {Cin}, kernel {Ck}")
    if dilation < 1 or stride < 1:
        raise ShapeError("dilation and stride must be >= 1")
    pad = _resolve_padding(padding, K, dilation, stride, "conv2d")
    pads = (pad, pad)

    def im2col(xp):
        win = _windows(xp, K, dilation, stride)      # (N, Cin, Ho, Wo, K, K)
        Ho, Wo = win.shape[2], win.shape[3]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)
                                    ).reshape(N * Ho * Wo, Cin * K * K)
        return cols, Ho, Wo

    # Only the (small) padded input is kept alive for backward; the im2col
    # matrix is rebuilt there rather than captured, which caps graph memory.
    xp = _pad2d(x.data, pads, row_mode=row_pad)
    cols, Ho, Wo = im2col(xp)
    wmat = kernel.data.reshape(Cout, Cin * K * K)
    out = (cols @ wmat.T).reshape(N, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    del cols
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (Cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({Cout},)")
        out = out + bias.data[None, :, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, Cout)
        if kernel.requires_grad:
            cols2, _, _ = im2col(xp)
            kernel.accumulate_grad((gmat.T @ cols2).reshape(kernel.shape))
            del cols2
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(N, Ho, Wo, Cin, K, K)
            gpad = np.zeros_like(xp)
            for ki in range(K):
                rs = slice(ki * dilation, ki * dilation + stride * (Ho - 1) + 1, stride)
                for kj in range(K):
                    cs = slice(kj * dilation, kj * dilation + stride * (Wo - 1) + 1, stride)
                    gpad[:, :, rs, cs] += gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            x.accumulate_grad(_unpad_rows_fold(gpad, pads, H, W, row_pad))

    return _make(np.ascontiguousarray(out), parents, "conv2d", back)


def maxpool2d(x, k, stride=1, padding="valid", row_pad="zeros"):
    """Windowed maximum.  Same padding fills with -inf (rows may wrap).

    Backward routes the incoming gradient to the argmax element of each
    window; ties go to the first element in row-major order.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("maxpool2d expects a 4-D input")
    if k < 1:
        raise ShapeError("pool kernel must be >= 1")
    N, C, H, W = x.shape
    if padding == "same":
        if stride != 1:
            raise ShapeError("maxpool2d: padding='same' requires stride=1")
        total = k - 1
        pad = (total // 2, total - total // 2)
    elif padding == "valid":
        pad = (0, 0)
    elif isinstance(padding, int):
        pad = (padding, padding)
    else:
        raise ShapeError(f"maxpool2d: unknown padding {padding!r}")
    pads = (pad, pad)

    xp = _pad2d(x.data, pads, row_mode=row_pad, fill=-np.inf)
    Hp, Wp = xp.shape[-2:]
    if k > Hp or k > Wp:
        raise ShapeError(f"pool kernel {k} exceeds padded extent {Hp}x{Wp}")
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    # Incremental max over the k*k taps; strict '>' keeps the first
    # (row-major) element on ties, matching the gradient routing contract.
    out = np.full((N, C, Ho, Wo), -np.inf, dtype=DTYPE)
    idx = np.zeros((N, C, Ho, Wo), dtype=np.int16)
    for ki in range(k):
        rs = slice(ki, ki + stride * (Ho - 1) + 1, stride)
        for kj in range(k):
            cs = slice(kj, kj + stride * (Wo - 1) + 1, stride)
            sub = xp[:, :, rs, cs]
            better = sub > out
            out[better] = sub[better]
            idx[better] = ki * k + kj

    def back(g):
        if not x.requires_grad:
            return
        gpad = np.zeros(xp.shape, dtype=DTYPE)
        for ki in range(k):
            rs = slice(ki, ki + stride * (Ho - 1) + 1, stride)
            for kj in range(k):
                cs = slice(kj, kj + stride * (Wo - 1) + 1, stride)
                gpad[:, :, rs, cs] += g * (idx == ki * k + kj)
        x.accumulate_grad(_unpad_rows_fold(gpad, pads, H, W, row_pad))

    return _make(out, (x,), "maxpool2d", back)


def global_avg_pool(x):
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-D input")
    N, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(
                (g / (H * W))[:, :, None, None], x.shape).astype(DTYPE))

    return _make(out, (x,), "global_avg_pool", back)


def global_max_pool(x):
    """Spatial maximum: (N, C, H, W) -> (N, C); grad goes to the first argmax."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_max_pool expects a 4-D input")
    N, C, H, W = x.shape
    flat = x.data.reshape(N, C, H * W)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        if x.requires_grad:
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
            x.accumulate_grad(gflat.reshape(x.shape))

    return _make(out, (x,), "global_max_pool", back)


def channel_mean(x):
    """Mean over channels: (N, C, H, W) -> (N, 1, H, W)."""
    x = _as_tensor(x)
    C = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g / C, x.shape).astype(DTYPE))

    return _make(out, (x,), "channel_mean", back)


def channel_max(x):
    """Max over channels: (N, C, H, W) -> (N, 1, H, W); first argmax on ties."""
    x = _as_tensor(x)
    idx = np.argmax(x.data, axis=1)[:, None]
    out = np.take_along_axis(x.data, idx, axis=1)

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx, g, axis=1)
            x.accumulate_grad(gx)

    return _make(out, (x,), "channel_max", back)


# ---------------------------------------------------------------------------
# activations

def leaky_relu(x, slope=0.01):
    x = _as_tensor(x)
    if not 0.0 < slope < 1.0:
        raise ShapeError(f"leaky slope must be in (0, 1), got {slope}")
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(pos, g, np.float32(slope) * g))

    return _make(out, (x,), "leaky_relu", back)


def relu(x):
    x = _as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0)

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(pos, g, 0.0))

    return _make(out, (x,), "relu", back)


def sigmoid(x):
    x = _as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g * out * (1.0 - out))

    return _make(out, (x,), "sigmoid", back)


# ---------------------------------------------------------------------------
# affine / elementwise

def linear(x, weight, bias=None):
    """Affine map: (N, F) x (O, F) -> (N, O), plus bias (O,)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: {x.shape} incompatible with {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear bias shape {bias.shape}")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return _make(out, parents, "linear", back)


def add(x, y):
    x = _as_tensor(x)
    if not isinstance(y, Tensor) and np.ndim(y) == 0:
        c = DTYPE(y)
        out = x.data + c

        def back_scalar(g):
            if x.requires_grad:
                x.accumulate_grad(g)

        return _make(out, (x,), "add", back_scalar)
    y = _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if y.requires_grad:
            y.accumulate_grad(g)

    return _make(x.data + y.data, (x, y), "add", back)


def mul(x, y):
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"mul: shape mismatch {x.shape} vs {y.shape}")

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g * y.data)
        if y.requires_grad:
            y.accumulate_grad(g * x.data)

    return _make(x.data * y.data, (x, y), "mul", back)


def scale(x, s):
    x = _as_tensor(x)
    s = DTYPE(s)

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g * s)

    return _make(x.data * s, (x,), "scale", back)


def scale_by(x, s):
    """Multiply a tensor by a learnable scalar stored as a shape-(1,) tensor."""
    x, s = _as_tensor(x), _as_tensor(s)
    if s.shape != (1,):
        raise ShapeError(f"scale_by expects a (1,) scalar tensor, got {s.shape}")

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g * s.data[0])
        if s.requires_grad:
            s.accumulate_grad(np.array([(g * x.data).sum()], dtype=DTYPE))

    return _make(x.data * s.data[0], (x, s), "scale_by", back)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                i != axis and a != b for i, (a, b) in enumerate(zip(t.shape, ref))):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sections = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        for t, gpart in zip(tensors, np.split(g, sections, axis=axis)):
            if t.requires_grad:
                t.accumulate_grad(gpart)

    return _make(out, tuple(tensors), "concat", back)


def scale_channels(x, gate):
    """Per-channel gating: (N, C, H, W) * (N, C) -> (N, C, H, W)."""
    x, gate = _as_tensor(x), _as_tensor(gate)
    if x.ndim != 4 or gate.shape != x.shape[:2]:
        raise ShapeError(f"scale_channels: {x.shape} vs gate {gate.shape}")
    g4 = gate.data[:, :, None, None]

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g * g4)
        if gate.requires_grad:
            gate.accumulate_grad((g * x.data).sum(axis=(2, 3)))

    return _make(x.data * g4, (x, gate), "scale_channels", back)


def scale_spatial(x, gate):
    """Per-position gating: (N, C, H, W) * (N, 1, H, W) -> (N, C, H, W)."""
    x, gate = _as_tensor(x), _as_tensor(gate)
    if x.ndim != 4 or gate.shape != (x.shape[0], 1, x.shape[2], x.shape[3]):
        raise ShapeError(f"scale_spatial: {x.shape} vs gate {gate.shape}")

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(g * gate.data)
        if gate.requires_grad:
            gate.accumulate_grad((g * x.data).sum(axis=1, keepdims=True))

    return _make(x.data * gate.data, (x, gate), "scale_spatial", back)


def sum_all(x):
    """Sum of all elements -> scalar tensor."""
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=DTYPE)

    def back(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.shape).astype(DTYPE))

    return _make(out, (x,), "sum_all", back)


def pick(x, row, col):
    """Select one scalar entry x[row, col] from a 2-D tensor."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("pick expects a 2-D tensor")
    out = np.asarray(x.data[row, col], dtype=DTYPE)

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[row, col] = g
            x.accumulate_grad(gx)

    return _make(out, (x,), "pick", back)


def cross_entropy_logits(logits, labels, class_weights=None):
    """Weighted cross-entropy over raw logits.

    logits: (N, K); labels: int array (N,); class_weights: (K,) or None.
    Returns the weighted mean loss as a scalar tensor.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    N, K = logits.shape
    if labels.shape != (N,) or labels.min() < 0 or labels.max() >= K:
        raise ShapeError("labels must be (N,) ints in [0, K)")
    if class_weights is None:
        w = np.ones(K, dtype=DTYPE)
    else:
        w = np.asarray(class_weights, dtype=DTYPE)
        if w.shape != (K,):
            raise ShapeError(f"class_weights shape {w.shape} != ({K},)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    wn = w[labels]
    wsum = wn.sum()
    loss = -(wn * logp[np.arange(N), labels]).sum() / wsum

    def back(g):
        if logits.requires_grad:
            grad = p.copy()
            grad[np.arange(N), labels] -= 1.0
            grad *= (wn / wsum)[:, None]
            logits.accumulate_grad(DTYPE(g) * grad)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), "cross_entropy", back)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (inference only, no graph)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE)


# ---------------------------------------------------------------------------
# optimizer

def adam_init(params):
    """Fresh Adam state for a parameter list."""
    return {
        "t": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction; mutates params and state."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape}")
        m = state["m"][i]
        v = state["v"][i]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(DTYPE)
    return state


# ---------------------------------------------------------------------------
# container format

def write_tensor_record(fh, name, array):
    """One record: a JSON header line, then raw little-endian f32 row-major."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = json.dumps({"shape": list(arr.shape), "name": name})
    fh.write(header.encode("utf-8") + b"\n")
    fh.write(arr.tobytes())


def read_tensor_record(fh):
    header = json.loads(_read_line(fh))
    shape = tuple(int(s) for s in header["shape"])
    count = int(np.prod(shape)) if shape else 1
    buf = fh.read(4 * count)
    if len(buf) != 4 * count:
        raise IOError(f"truncated tensor record {header['name']!r}")
    data = np.frombuffer(buf, dtype="<f4", count=count).reshape(shape)
    return header["name"], data.astype(DTYPE)


def save_container(path, named_arrays, meta=None):
    """Write a checkpoint: manifest line, then one record per array.

    named_arrays is an ordered list of (name, array); the manifest records
    the names in order plus any extra metadata.
    """
    manifest = {"names": [n for n, _ in named_arrays]}
    if meta:
        manifest.update(meta)
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8") + b"\n")
        for name, arr in named_arrays:
            data = arr.data if isinstance(arr, Tensor) else arr
            write_tensor_record(fh, name, data)


def load_container(path):
    """Read a checkpoint; returns (manifest dict, {name: array})."""
    with open(path, "rb") as fh:
        manifest = json.loads(_read_line(fh))
        arrays = {}
        for expected in manifest["names"]:
            name, data = read_tensor_record(fh)
            if name != expected:
                raise IOError(f"manifest lists {expected!r} but found {name!r}")
            arrays[name] = data
    return manifest, arrays


def _read_line(fh):
    chunks = []
    while True:
        ch = fh.read(1)
        if not ch:
            raise IOError("unexpected end of container file")
        if ch == b"\n":
            break
        chunks.append(ch)
    return b"".join(chunks).decode("utf-8")
