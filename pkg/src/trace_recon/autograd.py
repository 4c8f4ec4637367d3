"""Dense tensors with reverse-mode differentiation and an Adam optimizer.

Only the primitives needed by the untrained prior and the forward operators
are provided. Every primitive records a closure that maps the output
gradient to input gradients; :meth:`Tensor.backward` replays them in reverse
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "AdamState",
    "NonFiniteError",
    "add",
    "sub",
    "mul",
    "scale",
    "conv2d",
    "conv2d_transpose",
    "decimate",
    "upsample_nearest",
    "concat",
    "leaky_relu",
    "sigmoid",
    "clip",
    "sum_of_squares",
    "sparse_matvec",
    "pad_indices",
    "gradients",
    "adam_update",
    "finite_difference_check",
]

PADDING_MODES = ("zero", "reflect", "symmetric")


class NonFiniteError(FloatingPointError):
    """Raised when an operation on finite inputs produces NaN or Inf."""


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """An n-dimensional float array that can take part in a gradient graph.

    ``float32`` is the working precision; ``float64`` tensors are accepted so
    the same graph can be replayed in double precision for verification.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_float_array(data) if dtype is None else np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Backpropagate ``loss`` and return one gradient per parameter.

    Parameters the loss does not depend on get an all-zero gradient.
    """
    for p in params:
        p.grad = None
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        inputs_finite = all(np.all(np.isfinite(p.data)) for p in parents)
        if inputs_finite:
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    slope = a.dtype.type(slope)
    # x == 0 takes the negative-side slope
    positive = a.data > 0
    out = np.where(positive, a.data, a.data * slope)
    return _make(out, (a,), lambda g: (np.where(positive, g, g * slope),), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the range open: saturated values round to 0 or 1 otherwise
    info = np.finfo(out.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def clip(a: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    # gradient passes on [lo, hi] including the endpoints
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return _make(out, (a,), lambda g: (np.where(inside, g, 0),), "clip")


def sum_of_squares(a: Tensor) -> Tensor:
    flat = a.data.reshape(-1)
    out = np.asarray(np.dot(flat, flat), dtype=a.dtype)
    return _make(out, (a,), lambda g: (2 * g * a.data,), "sum_of_squares")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return [np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))]

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), backward, "concat")


# ------------------------------------------------------------------- resample


def decimate(a: Tensor, factor: int) -> Tensor:
    """Keep every ``factor``-th pixel of a [C,H,W] tensor, starting at 0."""
    c, h, w = a.shape
    if h % factor or w % factor:
        raise ValueError(f"extents {h}x{w} not divisible by {factor}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, ::factor, ::factor] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[:, ::factor, ::factor]), (a,), backward, "downsample")


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, factor, axis=1), factor, axis=2)

    def backward(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _make(out, (a,), backward, "upsample")


# ---------------------------------------------------------------- convolution


def pad_indices(n: int, pad: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Source index and validity mask for each position of a padded axis.

    Works for any pad width, including pads larger than ``n``.
    """
    if mode not in PADDING_MODES:
        raise ValueError(f"unknown padding mode {mode!r}")
    pos = np.arange(-pad, n + pad)
    if mode == "zero":
        valid = (pos >= 0) & (pos < n)
        return np.clip(pos, 0, n - 1), valid
    if mode == "symmetric":
        period = 2 * n
        idx = np.mod(pos, period)
        idx = np.where(idx >= n, period - 1 - idx, idx)
    else:
        if n == 1:
            idx = np.zeros_like(pos)
        else:
            period = 2 * n - 2
            idx = np.mod(pos, period)
            idx = np.where(idx >= n, period - idx, idx)
    return idx, np.ones(pos.shape, dtype=bool)


def _pad(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    if mode == "zero":
        return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ridx, _ = pad_indices(x.shape[1], pad, mode)
    cidx, _ = pad_indices(x.shape[2], pad, mode)
    return x[:, ridx][:, :, cidx]


def _unpad(gp: np.ndarray, h: int, w: int, pad: int, mode: str) -> np.ndarray:
    """Adjoint of :func:`_pad`: fold padded gradient back onto source pixels."""
    if pad == 0:
        return gp
    if mode == "zero":
        return gp[:, pad:pad + h, pad:pad + w]
    ridx, _ = pad_indices(h, pad, mode)
    cidx, _ = pad_indices(w, pad, mode)
    rows = np.zeros((gp.shape[0], h, gp.shape[2]), dtype=gp.dtype)
    np.add.at(rows, (slice(None), ridx), gp)
    out = np.zeros((gp.shape[0], h, w), dtype=gp.dtype)
    np.add.at(out, (slice(None), slice(None), cidx), rows)
    return out


def _check_conv_args(x_shape, k_shape, stride, depthwise):
    if len(x_shape) != 3 or len(k_shape) != 4:
        raise ValueError(f"conv2d expects [C,H,W] input and [Co,Ci,k,k] kernel, got {x_shape} and {k_shape}")
    cout, cin, kh, kw = k_shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if depthwise:
        if cin != 1 or cout != x_shape[0]:
            raise ValueError(f"depthwise kernel must be [{x_shape[0]},1,k,k], got {k_shape}")
    elif cin != x_shape[0]:
        raise ValueError(f"kernel expects {cin} input channels, input has {x_shape[0]}")


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _conv_forward(xp, kernel, stride, ho, wo, depthwise):
    k = kernel.shape[-1]
    win = _windows(xp, k, stride, ho, wo)  # [C, ho, wo, k, k]
    if depthwise:
        out = np.zeros((xp.shape[0], ho, wo), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                out += kernel[:, 0, i, j][:, None, None] * win[:, :, :, i, j]
        return out, None
    cin = xp.shape[0]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
    out = kernel.reshape(kernel.shape[0], -1) @ cols
    return out.reshape(kernel.shape[0], ho, wo), cols


def _conv_input_grad(g, kernel, xp_shape, stride, depthwise):
    """Scatter output gradient back onto the padded input grid."""
    k = kernel.shape[-1]
    cout, ho, wo = g.shape
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    if depthwise:
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    kernel[:, 0, i, j][:, None, None] * g
                )
        return gxp
    cin = kernel.shape[1]
    dcols = kernel.reshape(cout, -1).T @ g.reshape(cout, -1)
    dcols = dcols.reshape(cin, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    return gxp


def conv2d(
    x: Tensor,
    kernel: Tensor,
    padding_mode: str = "zero",
    stride: int = 1,
    depthwise: bool = False,
) -> Tensor:
    """Same-padded 2-D cross-correlation of a [Cin,H,W] tensor.

    Output extents are ``ceil(H / stride)``; padding is ``(k - 1) // 2`` per
    side. With ``depthwise`` the kernel is [C,1,k,k] and channels are
    filtered independently.
    """
    _check_conv_args(x.shape, kernel.shape, stride, depthwise)
    _, h, w = x.shape
    k = kernel.shape[-1]
    pad = (k - 1) // 2
    ho, wo = -(-h // stride), -(-w // stride)
    xp = _pad(x.data, pad, padding_mode)
    out, cols = _conv_forward(xp, kernel.data, stride, ho, wo, depthwise)

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gxp = _conv_input_grad(g, kernel.data, xp.shape, stride, depthwise)
            gx = _unpad(gxp, h, w, pad, padding_mode)
        if kernel.requires_grad:
            if depthwise:
                win = _windows(xp, k, stride, ho, wo)
                gk = np.einsum("chw,chwij->cij", g, win)[:, None]
            else:
                gk = (g.reshape(g.shape[0], -1) @ cols.T).reshape(kernel.shape)
        return gx, gk

    return _make(out, (x, kernel), backward, "conv2d")


def conv2d_transpose(
    y: np.ndarray,
    kernel: np.ndarray,
    in_shape: tuple[int, int, int],
    padding_mode: str = "zero",
    stride: int = 1,
    depthwise: bool = False,
) -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its input, for a fixed kernel."""
    _check_conv_args(in_shape, kernel.shape, stride, depthwise)
    _, h, w = in_shape
    pad = (kernel.shape[-1] - 1) // 2
    xp_shape = (in_shape[0], h + 2 * pad, w + 2 * pad)
    gxp = _conv_input_grad(np.asarray(y), np.asarray(kernel), xp_shape, stride, depthwise)
    return _unpad(gxp, h, w, pad, padding_mode)


# --------------------------------------------------------------------- linear


def sparse_matvec(matrix, x: Tensor, out_shape: tuple[int, ...]) -> Tensor:
    """``matrix @ x.flatten()`` reshaped to ``out_shape``; ``matrix`` is any
    object supporting ``@`` and ``.T`` (dense or scipy.sparse)."""
    flat = x.data.reshape(-1)
    if matrix.shape[1] != flat.size:
        raise ValueError(f"matrix has {matrix.shape[1]} columns, input has {flat.size} entries")
    out = np.asarray(matrix @ flat, dtype=x.dtype).reshape(out_shape)

    def backward(g):
        return (np.asarray(matrix.T @ g.reshape(-1), dtype=x.dtype).reshape(x.shape),)

    return _make(out, (x,), backward, "matvec")


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def reset(self) -> None:
        self.step = 0
        self.m = []
        self.v = []


def adam_update(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam step, in place on ``params`` and ``state``.

    A ``None`` gradient is treated as zero.
    """
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to Adam")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, m in zip(params, state.m):
        if p.shape != m.shape:
            raise ValueError(f"Adam moment shape {m.shape} does not match parameter {p.shape}")
    state.step += 1
    dt = params[0].dtype.type if params else np.float32
    b1, b2 = dt(state.b1), dt(state.b2)
    c1 = dt(1.0 - state.b1**state.step)
    c2 = dt(1.0 - state.b2**state.step)
    lr, eps = dt(state.lr), dt(state.eps)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -------------------------------------------------------- finite differences


def finite_difference_check(
    loss_fn: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    seed: int = 0,
    samples: int = 64,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Everything is replayed in float64. ``samples`` coordinates are drawn
    (without replacement, fixed by ``seed``) from the concatenated parameter
    vector. Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor`` is 1e-6 times the largest gradient magnitude seen, so
    coordinates whose true gradient is ~0 are judged on an absolute scale.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params64 = [Tensor(p.data.astype(np.float64), requires_grad=True) for p in params]
    total = sum(p.data.size for p in params64)
    if total == 0:
        return 0.0
    loss = loss_fn(params64)
    loss.backward()
    analytic = np.concatenate(
        [(p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1) for p in params64]
    )
    offsets = np.cumsum([0] + [p.data.size for p in params64])
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=min(samples, total), replace=False))

    def evaluate() -> float:
        frozen = [Tensor(p.data) for p in params64]
        return float(loss_fn(frozen).data)

    numeric = np.empty(len(picks))
    for n, flat_index in enumerate(picks):
        which = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        arr = params64[which].data.reshape(-1)
        local = flat_index - offsets[which]
        orig = arr[local]
        arr[local] = orig + h
        fp = evaluate()
        arr[local] = orig - h
        fm = evaluate()
        arr[local] = orig
        numeric[n] = (fp - fm) / (2 * h)
    a = analytic[picks]
    floor = 1e-6 * max(np.max(np.abs(a)), np.max(np.abs(numeric)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    return float(np.max(np.abs(a - numeric) / denom))
