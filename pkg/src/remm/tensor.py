"""Dense tensors with a define-by-run reverse-mode tape.

Only the operations the matching network needs are provided. Every op
records a closure mapping the output gradient to gradients of its inputs;
``backward`` walks the tape in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")  # keeps 0-d scalars 0-d
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic protocol ---------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Iterable[Tensor], fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2 * g * xd,))


def l2norm(x: Tensor, axis: int = -1) -> Tensor:
    """Rescale vectors along ``axis`` to unit length; zero vectors pass through."""
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1).astype(xd.dtype)
    y = xd / safe
    live = n > 0

    def back(g):
        proj = np.sum(g * y, axis=axis, keepdims=True)
        return (np.where(live, (g - y * proj) / safe, g),)

    return _result(y, (x,), back)


ELEMENTWISE = {
    "relu": relu,
    "add": add,
    "mul": mul,
    "l2norm-lastdim": l2norm,
    "exp": exp,
    "log": log,
}


def elementwise(tag: str, *operands) -> Tensor:
    """Dispatch one of the elementwise ops by tag."""
    try:
        fn = ELEMENTWISE[tag]
    except KeyError:
        raise ValueError(f"unknown elementwise op {tag!r}") from None
    return fn(*operands)


# -- reductions and shape ops ------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.ascontiguousarray(x.data[idx]), (x,), back)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along one axis (a permutation when ``indices`` is one)."""
    indices = np.asarray(indices, dtype=np.intp)
    shape, dtype = x.shape, x.dtype
    ax = axis % x.ndim

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if len(np.unique(indices)) == len(indices):
            sl = [slice(None)] * len(shape)
            sl[ax] = indices
            full[tuple(sl)] = g
        else:
            np.add.at(full, (slice(None),) * ax + (indices,), g)
        return (full,)

    return _result(np.take(x.data, indices, axis=ax), (x,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _result(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# -- image ops ---------------------------------------------------------------
def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW kernel, zero padding."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho = (h + 2 * p - kh) // stride + 1
    wo = (w + 2 * p - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape}")
    # im2col in channels-last layout: columns ordered (kh, kw, c)
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.concatenate([xh[:, i:i + span_h:stride, j:j + span_w:stride, :] for i, j in taps], axis=-1)
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    hp, wp = xp.shape[2:]

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (gm.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        dcols = (gm @ wmat).reshape(n, ho, wo, kh * kw, c)
        gh = np.zeros((n, hp, wp, c), dtype=x.dtype)
        for t, (i, j) in enumerate(taps):
            gh[:, i:i + span_h:stride, j:j + span_w:stride, :] += dcols[:, :, :, t, :]
        gxp = gh.transpose(0, 3, 1, 2)
        gx = np.ascontiguousarray(gxp[:, :, p:p + h, p:p + w] if p else gxp)
        grads = [gx, np.ascontiguousarray(gk)]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, back)


def _pad_index(size: int, pad: int, mode: str) -> np.ndarray:
    i = np.arange(-pad, size + pad)
    if mode == "replicate":
        return np.clip(i, 0, size - 1)
    if mode == "reflect":
        if pad >= size:
            raise ValueError(f"reflect padding {pad} needs size > pad, got {size}")
        i = np.abs(i)
        return np.where(i > size - 1, 2 * (size - 1) - i, i)
    raise ValueError(f"unknown padding mode {mode!r}")


def pad2d(x: Tensor, pad: int, mode: str = "replicate") -> Tensor:
    """Pad the two trailing axes by ``pad`` on every side."""
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    if mode == "zero":
        width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        return _result(np.pad(x.data, width), (x,), lambda g: (g[..., pad:pad + h, pad:pad + w],))
    ri, ci = _pad_index(h, pad, mode), _pad_index(w, pad, mode)
    out = x.data[..., ri, :][..., ci]

    def back(g):
        rows = g[..., pad:pad + h, :].copy()
        for k in list(range(pad)) + list(range(pad + h, h + 2 * pad)):
            rows[..., ri[k], :] += g[..., k, :]
        gx = rows[..., pad:pad + w].copy()
        for k in list(range(pad)) + list(range(pad + w, w + 2 * pad)):
            gx[..., ci[k]] += rows[..., k]
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), back)


def max_pool2d(x: Tensor, window: int) -> Tensor:
    """Stride-1 max over ``window``x``window`` neighbourhoods (no padding)."""
    n, c, h, w = x.shape
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))
    ho, wo = win.shape[2:4]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        rows = np.arange(ho)[:, None] + arg // window
        cols = np.arange(wo)[None, :] + arg % window
        flat_idx = (np.arange(n * c).reshape(n, c, 1, 1) * h + rows) * w + cols
        gx = np.bincount(flat_idx.ravel(), weights=g.ravel(), minlength=n * c * h * w)
        return (gx.reshape(x.shape).astype(x.dtype),)

    return _result(np.ascontiguousarray(out), (x,), back)


def box_sum2d(x: Tensor, window: int) -> Tensor:
    """Stride-1 sum over ``window``x``window`` neighbourhoods (no padding)."""
    n, c, h, w = x.shape
    ones = Tensor(np.ones((1, 1, window, window), dtype=x.dtype))
    return reshape(conv2d(reshape(x, (n * c, 1, h, w)), ones), (n, c, h - window + 1, w - window + 1))


def grid_sample(f: Tensor, grid) -> Tensor:
    """Bilinear sampling of NCHW ``f`` at normalized grid points, zeros outside.

    ``grid`` is an array of shape (N, Ho, Wo, 2) or (Ho, Wo, 2) holding
    (x, y) in [-1, 1] with pixel centres at (2i + 1) / size - 1, or any
    object exposing such an array as ``.coords``.
    """
    coords = np.asarray(getattr(grid, "coords", grid), dtype=np.float64)
    if coords.ndim == 3:
        coords = coords[None]
    if f.ndim != 4 or coords.shape[-1] != 2:
        raise ValueError(f"grid_sample expects NCHW input and (..., 2) grid, got {f.shape}, {coords.shape}")
    n, c, h, w = f.shape
    if coords.shape[0] not in (1, n):
        raise ValueError(f"grid batch {coords.shape[0]} does not match input batch {n}")
    ho, wo = coords.shape[1:3]
    mats = [sampling_matrix(coords[min(i, coords.shape[0] - 1)], h, w) for i in range(n)]
    fd = f.data.reshape(n, c, h * w)
    out = np.stack([(m @ fd[i].T).T for i, m in enumerate(mats)]).astype(f.dtype, copy=False)

    def back(g):
        gm = g.reshape(n, c, ho * wo)
        gf = np.stack([(m.T @ gm[i].T).T for i, m in enumerate(mats)])
        return (gf.reshape(f.shape).astype(f.dtype, copy=False),)

    return _result(out.reshape(n, c, ho, wo), (f,), back)


def sampling_matrix(coords: np.ndarray, h: int, w: int) -> sp.csr_matrix:
    """Sparse (Ho*Wo, H*W) bilinear interpolation operator for one grid."""
    px = ((coords[..., 0].ravel() + 1.0) * w - 1.0) / 2.0
    py = ((coords[..., 1].ravel() + 1.0) * h - 1.0) / 2.0
    # snap float noise so grid points on pixel centres read stored values exactly
    for p in (px, py):
        r = np.round(p)
        near = np.abs(p - r) < 1e-9
        p[near] = r[near]
    finite = np.isfinite(px) & np.isfinite(py)
    px = np.where(finite, px, -10.0)
    py = np.where(finite, py, -10.0)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    rows, cols, vals = [], [], []
    out_idx = np.arange(px.size)
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wt != 0)
        rows.append(out_idx[ok])
        cols.append(yi[ok] * w + xi[ok])
        vals.append(wt[ok])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(px.size, h * w))


# -- tape ----------------------------------------------------------------------
def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
