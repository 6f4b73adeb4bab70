"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the separation model, its losses and the
optimizer are provided. Arrays are numpy; every differentiable op records
its operands and a closure mapping the output gradient to operand gradients.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_node_ids = itertools.count()


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default element precision (e.g. float64 for gradcheck)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


_KINK_MARGINS: list[float] | None = None


@contextlib.contextmanager
def track_kinks():
    """Record, per piecewise-linear op (prelu, abs, maximum), the distance to its kink.

    Finite-difference checks use this to skip instances that sit on a kink.
    """
    global _KINK_MARGINS
    previous = _KINK_MARGINS
    _KINK_MARGINS = []
    try:
        yield _KINK_MARGINS
    finally:
        _KINK_MARGINS = previous


def _note_kink(x: np.ndarray) -> None:
    if _KINK_MARGINS is not None and x.size:
        _KINK_MARGINS.append(float(np.abs(x).min()))


class ShapeError(ValueError):
    pass


class Tensor:
    """n-dimensional array node in a computation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked tensor."""
        if grad is None:
            if self.data.size != 1 or self.data.ndim != 0:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {self.node_id: np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            # interior nodes keep their gradient too, so every tensor on the path is populated
            node.grad = g if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"gradient shape {pg.shape} does not match operand shape {parent.shape}"
                    )
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __pow__(self, exponent: float):
        return pow(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    ref = a if isinstance(a, Tensor) else b
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=ref.dtype))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=ref.dtype))
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"elementwise op on mismatched shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)),
    )


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    if _KINK_MARGINS is not None:
        gap = np.abs(a.data - b.data) / np.maximum(np.maximum(np.abs(a.data), np.abs(b.data)), 1e-30)
        _KINK_MARGINS.append(float(np.min(gap)))
    pick = a.data >= b.data
    return _result(
        np.where(pick, a.data, b.data),
        (a, b),
        lambda g: (_reduce_to(np.where(pick, g, 0), a.shape), _reduce_to(np.where(pick, 0, g), b.shape)),
    )


def abs(a: Tensor) -> Tensor:
    # np.sign gives 0 at 0, the chosen subgradient
    _note_kink(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def pow(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power on non-negative inputs; the gradient at 0 is taken as 0."""
    if np.any(a.data < 0):
        raise ValueError("pow() requires a non-negative base")
    out = np.power(a.data, exponent)

    def backward(g):
        positive = a.data > 0
        safe = np.where(positive, a.data, 1)
        return (np.where(positive, g * exponent * np.power(safe, exponent - 1), 0).astype(a.dtype),)

    return _result(out, (a,), backward)


def log10(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log10() requires positive input")
    scale = a.dtype.type(1.0 / np.log(10.0))
    return _result(np.log10(a.data), (a,), lambda g: (g * scale / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def prelu(x: Tensor, slopes: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel.

    The channel axis is 0 for 1-D/2-D inputs and 1 for batched ``[B, C, T]``
    inputs. A single slope is shared across all channels.
    """
    caxis = 1 if x.ndim == 3 else 0
    n = slopes.data.size
    if n != 1 and n != x.shape[caxis]:
        raise ShapeError(f"prelu: {n} slopes for channel extent {x.shape[caxis]}")
    view = [1] * x.ndim
    if n != 1:
        view[caxis] = n
    a = slopes.data.reshape(view)
    _note_kink(x.data)
    factor = np.where(x.data < 0, a, x.dtype.type(1))
    out = x.data * factor

    def backward(g):
        gx = g * factor
        negpart = np.minimum(x.data, 0)
        if n == 1:
            gs = np.asarray((g * negpart).sum()).reshape(slopes.shape)
        else:
            spec = "bct,bct->c" if x.ndim == 3 else ("ct,ct->c" if x.ndim == 2 else "c,c->c")
            gs = np.einsum(spec, g, negpart).reshape(slopes.shape)
        return gx, gs

    return _result(out, (x, slopes), backward)


# -- reductions and shape ops ---------------------------------------------


def sum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scalar_mul(sum(a, axis), 1.0 / count)


def l2_norm_sq(a: Tensor) -> Tensor:
    return _result(np.asarray((a.data * a.data).sum()), (a,), lambda g: (2 * g * a.data,))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"dot on mismatched shapes {a.shape} and {b.shape}")
    return _result(np.asarray((a.data * b.data).sum()), (a, b), lambda g: (g * b.data, g * a.data))


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        if _has_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(np.array(a.data[index]), (a,), backward)


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack: shape {t.shape} differs from {shape}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward)


def pad_or_trim(a: Tensor, length: int) -> Tensor:
    """Zero-pad or truncate the last axis to ``length``."""
    cur = a.shape[-1]
    if cur == length:
        return a
    if cur > length:
        return getitem(a, (Ellipsis, slice(0, length)))
    widths = [(0, 0)] * (a.ndim - 1) + [(0, length - cur)]
    return _result(np.pad(a.data, widths), (a,), lambda g: (np.array(g[..., :cur]),))


# -- convolutions -----------------------------------------------------------


def conv_output_length(T: int, P: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (T + 2 * padding - dilation * (P - 1) - 1) // stride + 1


def conv_transposed_output_length(K: int, P: int, stride: int = 1, dilation: int = 1, padding: int = 0,
                                  output_padding: int = 0) -> int:
    return (K - 1) * stride - 2 * padding + dilation * (P - 1) + 1 + output_padding


def _im2col(xp: np.ndarray, P: int, stride: int, dilation: int, t_out: int) -> np.ndarray:
    """[B, C, Tp] -> [B, C, P, t_out] of strided taps."""
    span = stride * (t_out - 1) + 1
    if P == 1:
        return xp[:, :, None, :span:stride]
    return np.stack(
        [xp[:, :, p * dilation : p * dilation + span : stride] for p in range(P)], axis=2
    )


def _col2im(cols: np.ndarray, length: int, stride: int, dilation: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add [B, C, P, t] taps into [B, C, length]."""
    B, C, P, t = cols.shape
    out = np.zeros((B, C, length), dtype=cols.dtype)
    span = stride * (t - 1) + 1
    for p in range(P):
        out[:, :, p * dilation : p * dilation + span : stride] += cols[:, :, p, :]
    return out


def _grouped_apply(cols: np.ndarray, w: np.ndarray, groups: int) -> np.ndarray:
    """cols [B, Cin, P, t], w [Cout, Cin/g, P] -> [B, Cout, t]."""
    B, cin, P, t = cols.shape
    cout = w.shape[0]
    if groups == 1:
        return np.matmul(w.reshape(cout, cin * P), cols.reshape(B, cin * P, t))
    if groups == cin == cout:
        return np.einsum("bcpt,cp->bct", cols, w[:, 0, :], optimize=True)
    cg, og = cin // groups, cout // groups
    c = cols.reshape(B, groups, cg * P, t)
    out = np.matmul(w.reshape(groups, og, cg * P), c)
    return out.reshape(B, cout, t)


def _grouped_apply_t(g: np.ndarray, w: np.ndarray, groups: int, P: int) -> np.ndarray:
    """Transpose of ``_grouped_apply`` w.r.t. cols: g [B, Cout, t] -> [B, Cin, P, t]."""
    B, cout, t = g.shape
    cg = w.shape[1]
    cin = cg * groups
    if groups == 1:
        out = np.matmul(w.reshape(cout, cin * P).T, g)
        return out.reshape(B, cin, P, t)
    if groups == cin == cout:
        return g[:, :, None, :] * w[:, 0, :][None, :, :, None]
    og = cout // groups
    wg = w.reshape(groups, og, cg * P).transpose(0, 2, 1)
    out = np.matmul(wg, g.reshape(B, groups, og, t))
    return out.reshape(B, cin, P, t)


def _grouped_weight_grad(g: np.ndarray, cols: np.ndarray, groups: int) -> np.ndarray:
    """d<g, apply(cols, w)>/dw -> [Cout, Cin/g, P]."""
    B, cin, P, t = cols.shape
    cout = g.shape[1]
    if groups == 1:
        gw = np.matmul(g, cols.reshape(B, cin * P, t).transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape(cout, cin, P)
    if groups == cin == cout:
        return np.einsum("bct,bcpt->cp", g, cols, optimize=True)[:, None, :]
    cg, og = cin // groups, cout // groups
    c = cols.reshape(B, groups, cg * P, t)
    gg = g.reshape(B, groups, og, t)
    gw = np.einsum("bgot,bgkt->gok", gg, c, optimize=True)
    return gw.reshape(cout, cg, P)


def _check_conv(name, x, w, groups, cin_axis_w, stride, dilation, padding):
    if x.ndim not in (2, 3):
        raise ShapeError(f"{name}: input must be [C, T] or [B, C, T], got {x.shape}")
    if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise ValueError(f"{name}: invalid stride/dilation/padding/groups")
    cin = x.shape[-2]
    if cin % groups:
        raise ShapeError(f"{name}: input channels {cin} not divisible by groups={groups}")
    if w.ndim != 3:
        raise ShapeError(f"{name}: kernels must be 3-D, got {w.shape}")
    return cin


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """1-D cross-correlation. ``x``: [C_in, T] or [B, C_in, T]; ``w``: [C_out, C_in/groups, P]."""
    cin = _check_conv("conv1d", x, w, groups, 1, stride, dilation, padding)
    cout, cg, P = w.shape
    if cg * groups != cin:
        raise ShapeError(f"conv1d: input channels {cin} != kernel in-channels {cg} x groups {groups}")
    if cout % groups:
        raise ShapeError(f"conv1d: output channels {cout} not divisible by groups={groups}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv1d: bias shape {bias.shape}, expected ({cout},)")
    T = x.shape[-1]
    if T + 2 * padding < dilation * (P - 1) + 1:
        raise ShapeError(f"conv1d: time extent {T} too short for kernel {P} at dilation {dilation}")
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    t_out = conv_output_length(T, P, stride, dilation, padding)
    cols = _im2col(xp, P, stride, dilation, t_out)
    out = _grouped_apply(cols, w.data, groups)
    if bias is not None:
        out = out + bias.data[None, :, None]
    if not batched:
        out = out[0]

    def backward(g):
        g3 = g if batched else g[None]
        gw = _grouped_weight_grad(g3, cols, groups).astype(w.dtype) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = _grouped_apply_t(g3, w.data, groups, P)
            gxp = _col2im(gcols, xp.shape[-1], stride, dilation)
            gx = gxp[:, :, padding : padding + T] if padding else gxp
            gx = gx if batched else gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, backward)


def conv1d_transposed(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                      dilation: int = 1, padding: int = 0, groups: int = 1, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv1d`. ``x``: [C_in, K] or [B, C_in, K]; ``w``: [C_in, C_out/groups, P].

    When the forward stride skipped trailing samples, ``output_padding`` extends
    the output (with zeros) so the shape matches the forward input again.
    """
    cin = _check_conv("conv1d_transposed", x, w, groups, 0, stride, dilation, padding)
    if w.shape[0] != cin:
        raise ShapeError(f"conv1d_transposed: input channels {cin} != kernel dim 0 {w.shape[0]}")
    if cin % groups:
        raise ShapeError(f"conv1d_transposed: kernel dim 0 {cin} not divisible by groups={groups}")
    _, og, P = w.shape
    cout = og * groups
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv1d_transposed: bias shape {bias.shape}, expected ({cout},)")
    K = x.shape[-1]
    if not 0 <= output_padding < max(stride, dilation):
        raise ValueError(f"conv1d_transposed: output_padding must be in [0, max(stride, dilation)), "
                         f"got {output_padding}")
    T = conv_transposed_output_length(K, P, stride, dilation, padding, output_padding)
    if T < 1:
        raise ShapeError(f"conv1d_transposed: padding {padding} leaves no output samples")
    batched = x.ndim == 3
    xd = x.data if batched else x.data[None]
    # viewed as a conv1d kernel mapping cout -> cin, w has shape [cin, cout/groups, P]
    cols = _grouped_apply_t(xd, w.data, groups, P)
    full = _col2im(cols, T + 2 * padding, stride, dilation)
    out = full[:, :, padding : padding + T] if padding else full
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None]
    if not batched:
        out = out[0]

    def backward(g):
        g3 = g if batched else g[None]
        gp = np.pad(g3, ((0, 0), (0, 0), (padding, padding))) if padding else g3
        gcols = _im2col(gp, P, stride, dilation, K)
        gx = None
        if x.requires_grad:
            gx = _grouped_apply(gcols, w.data, groups)
            gx = gx if batched else gx[0]
        gw = _grouped_weight_grad(xd, gcols, groups).astype(w.dtype) if w.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, backward)


# -- normalization ---------------------------------------------------------


def global_layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize jointly over channels and time, then apply a per-channel affine map.

    ``x`` is [N, K] or [B, N, K]; statistics are per batch element.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = x.shape[-2]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"global_layer_norm: gain/bias must have shape ({n},)")
    axes = (-2, -1)
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.data[:, None] * xhat + bias.data[:, None]

    def backward(g):
        gxhat = g * gain.data[:, None]
        m1 = gxhat.mean(axis=axes, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        red = tuple(i for i in range(x.ndim) if i != x.ndim - 2)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


# -- gradient checking -------------------------------------------------------


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-4,
                   indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param`` (modified in place)."""
    grad = np.zeros_like(param.data)
    idx_iter = indices if indices is not None else np.ndindex(param.shape)
    with no_grad():
        for idx in idx_iter:
            orig = param.data[idx]
            param.data[idx] = orig + h
            fp = fn().item()
            param.data[idx] = orig - h
            fm = fn().item()
            param.data[idx] = orig
            grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)
    return float(err.max()) if err.size else 0.0


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
              atol: float = 0.0, indices=None) -> float:
    """Return the worst relative error between backprop and central differences.

    Errors on entries where both gradients are below ``atol`` are ignored.
    """
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        idx = None if indices is None else indices(p)
        numeric = numerical_grad(fn, p, h, idx)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if idx is not None:
            idx = list(idx)
            sel = tuple(np.array(i) for i in zip(*idx))
            analytic, numeric = analytic[sel], numeric[sel]
        mask = (np.abs(analytic) > atol) | (np.abs(numeric) > atol)
        worst = max(worst, max_relative_error(analytic[mask], numeric[mask]))
    return worst
