"""Differentiable primitives and the op registry.

Every op here has a hand-written backward rule; the registry drives the
finite-difference gradient suite, which checks each rule against central
differences in 64-bit.  Broadcasting follows numpy's trailing-dimension
alignment; gradients of broadcast operands are reduced back to the operand
shape.  Anything fancier than that must be an explicit reshape.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, active_tape

OP_REGISTRY: dict = {}


def _register(name: str):
    def deco(fn):
        OP_REGISTRY[name] = fn
        return fn

    return deco


def forward_op(name: str, inputs: list[Tensor], **kwargs) -> Tensor:
    """Dispatch a registered op by name (the generic operation surface)."""
    try:
        fn = OP_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown op {name!r}; registered: {sorted(OP_REGISTRY)}") from None
    return fn(*inputs, **kwargs)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"operands {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ---------------------------------------------


@_register("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _result(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


@_register("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _result(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


@_register("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return _result(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


@_register("div")
def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _result("div", out, (a, b), backward)


# -- matmul and 1-d convolution -----------------------------------------


@_register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # Batched-lhs x plain-matrix: flatten leading dims into one big gemm,
        # which is far faster than numpy's per-batch loop.
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result("matmul", out, (a, b), backward)

    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", out, (a, b), backward)


@_register("conv1d")
def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-d convolution over the time axis (-2), channels last.

    ``x``: [..., T, C_in]; ``w``: [K, C_in, C_out]; zero padding on both
    ends of the time axis.
    """
    if x.ndim < 2 or w.ndim != 3:
        raise ShapeError("conv1d", f"need x[..., T, C_in] and w[K, C_in, C_out], got {x.shape}, {w.shape}")
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError("conv1d", f"channel mismatch: x has {x.shape[-1]}, kernel expects {c_in}")
    t = x.shape[-2]
    t_pad = t + 2 * padding
    if t_pad < k:
        raise ShapeError("conv1d", f"time axis {t} (+2*{padding} pad) shorter than kernel {k}")

    if padding:
        pad = [(0, 0)] * x.ndim
        pad[-2] = (padding, padding)
        xp = np.pad(x.data, pad)
    else:
        xp = x.data
    # windows: [..., T_pad-K+1, C_in, K] -> stride over time, kernel-major cols
    win = sliding_window_view(xp, k, axis=-2)[..., ::stride, :, :]
    t_out = win.shape[-3]
    cols = np.ascontiguousarray(np.swapaxes(win, -1, -2)).reshape(*win.shape[:-2], k * c_in)
    w_flat = w.data.reshape(k * c_in, c_out)
    out = cols @ w_flat

    def backward(g):
        gw = (cols.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)).reshape(k, c_in, c_out)
        gcols = g @ w_flat.T
        gcols = gcols.reshape(*gcols.shape[:-1], k, c_in)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[..., j : j + stride * t_out : stride, :] += gcols[..., j, :]
        gx = gxp[..., padding : padding + t, :] if padding else gxp
        return gx, gw.astype(w.dtype)

    return _result("conv1d", out, (x, w), backward)


# -- shape manipulation ---------------------------------------------------


@_register("transpose")
def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError("transpose", f"axes {axes} is not a permutation for shape {x.shape}")
    inv = np.argsort([a % x.ndim for a in axes])
    return _result(
        "transpose",
        np.transpose(x.data, axes),
        (x,),
        lambda g: (np.transpose(g, inv),),
    )


@_register("reshape")
def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


@_register("concat")
def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat", "empty input list")
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError("concat", f"shapes {[t.shape for t in tensors]} on axis {axis}") from None
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    out_t = Tensor(out, requires_grad=any(t.requires_grad for t in tensors))
    tape = active_tape()
    if tape is not None and out_t.requires_grad:
        tape.record("concat", tuple(tensors), out_t, backward)
    return out_t


@_register("slice")
def slice_(x: Tensor, key) -> Tensor:
    """Basic slicing only (slices / ellipsis); ints would drop axes untracked."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice) and k is not Ellipsis:
            raise ShapeError("slice", f"only slice/... keys supported, got {k!r}")
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _result("slice", out, (x,), backward)


# -- reductions ------------------------------------------------------------


def _reduce_backward(g, x_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, x_shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, x_shape)


@_register("sum")
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _result(
        "sum",
        np.asarray(out),
        (x,),
        lambda g: (_reduce_backward(g, x.shape, axis, keepdims).astype(x.dtype, copy=False),),
    )


@_register("mean")
def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else np.prod(
        [x.shape[a] for a in ((axis,) if isinstance(axis, int) else axis)]
    )

    def backward(g):
        return (_reduce_backward(g, x.shape, axis, keepdims) / count,)

    return _result("mean", np.asarray(out), (x,), backward)


# -- nonlinearities ----------------------------------------------------------


@_register("exp")
def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


@_register("log")
def log(x: Tensor) -> Tensor:
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


@_register("tanh")
def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


@_register("sigmoid")
def sigmoid(x: Tensor) -> Tensor:
    # 0.5*(1 + tanh(x/2)) is the logistic, overflow-safe in both tails.
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


@_register("sin")
def sin(x: Tensor) -> Tensor:
    return _result("sin", np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


@_register("mish")
def mish(x: Tensor) -> Tensor:
    # x * tanh(softplus(x)); softplus clamped at 30 where it equals x to
    # machine precision, so no exp overflow in either tail.
    d = x.data
    sp = np.where(d > 30.0, d, np.log1p(np.exp(np.minimum(d, 30.0))))
    t = np.tanh(sp)

    def backward(g):
        sig = 1.0 - np.exp(-sp)  # sigmoid(x) = 1 - exp(-softplus(x))
        return (g * (t + d * (1.0 - t * t) * sig),)

    return _result("mish", d * t, (x,), backward)


@_register("abs")
def abs_(x: Tensor) -> Tensor:
    # Subgradient 0 at the kink.
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


@_register("power")
def power(x: Tensor, p: float) -> Tensor:
    out = x.data**p
    return _result("power", out, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


@_register("softmax")
def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (numerically shifted)."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _result("softmax", out, (x,), backward)


# -- normalizers --------------------------------------------------------------


def _norm_forward(d: np.ndarray, axes: tuple[int, ...], eps: float):
    mu = d.mean(axis=axes, keepdims=True)
    var = d.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return (d - mu) * inv_std, inv_std


def _norm_backward(g, y, inv_std, axes):
    gm = g.mean(axis=axes, keepdims=True)
    gym = (g * y).mean(axis=axes, keepdims=True)
    return inv_std * (g - gm - y * gym)


@_register("layer_norm")
def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    y, inv_std = _norm_forward(x.data, (-1,), eps)
    return _result("layer_norm", y, (x,), lambda g: (_norm_backward(g, y, inv_std, (-1,)),))


@_register("group_norm")
def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization for [..., T, C]: stats over time and the channels
    of each group (no affine)."""
    if x.ndim < 2:
        raise ShapeError("group_norm", f"need [..., T, C], got {x.shape}")
    c = x.shape[-1]
    if c % groups:
        raise ShapeError("group_norm", f"channels {c} not divisible by {groups} groups")
    gshape = x.shape[:-1] + (groups, c // groups)
    d = x.data.reshape(gshape)
    y, inv_std = _norm_forward(d, (-3, -1), eps)

    def backward(g):
        gg = _norm_backward(g.reshape(gshape), y, inv_std, (-3, -1))
        return (gg.reshape(x.shape),)

    return _result("group_norm", y.reshape(x.shape), (x,), backward)


# -- dropout -------------------------------------------------------------------


@_register("dropout_mask_apply")
def dropout_mask_apply(x: Tensor, mask: Tensor) -> Tensor:
    """Multiply by a pre-drawn keep mask (mask is sampled outside the tape,
    so the backward pass is exact for the sampled mask)."""
    if mask.shape != x.shape:
        raise ShapeError("dropout_mask_apply", f"mask {mask.shape} != input {x.shape}")
    return _result("dropout_mask_apply", x.data * mask.data, (x, mask), lambda g: (g * mask.data, None))


# -- operator sugar on Tensor ------------------------------------------------


def _binary(op):
    def fwd(self, other):
        return op(self, self._coerce(other))

    def rev(self, other):
        return op(self._coerce(other), self)

    return fwd, rev


Tensor.__add__, Tensor.__radd__ = _binary(add)
Tensor.__sub__, Tensor.__rsub__ = _binary(sub)
Tensor.__mul__, Tensor.__rmul__ = _binary(mul)
Tensor.__truediv__, Tensor.__rtruediv__ = _binary(div)
Tensor.__matmul__ = lambda self, other: matmul(self, self._coerce(other))
Tensor.__neg__ = lambda self: mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))
Tensor.__pow__ = lambda self, p: power(self, float(p))
Tensor.__getitem__ = lambda self, key: slice_(self, key)
Tensor.sum = lambda self, axis=None, keepdims=False: sum_(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.reshape = lambda self, *shape: reshape(self, shape if len(shape) > 1 else shape[0])
Tensor.transpose = lambda self, *axes: transpose(self, axes)
