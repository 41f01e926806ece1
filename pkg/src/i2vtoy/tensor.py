"""Minimal reverse-mode autodiff on top of numpy arrays.

Every array-valued quantity in the package (noisy latents, masks, condition
latents, network activations) flows through :class:`Tensor`.  The graph is a
tape built during the forward pass and released after :meth:`Tensor.backward`.

Broadcasting rule
-----------------
Binary elementwise ops require operands of *equal rank*; an axis of extent 1
in either operand is stretched to match the other.  There is no implicit rank
promotion: adding a ``[C]`` vector to a ``[N, C, H, W]`` activation must be
spelled ``v.reshape(1, C, 1, 1)``.  Python scalars are treated as constants.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ConfigError(ValueError):
    """An operation was configured with invalid parameters."""


class UsageError(RuntimeError):
    """An API was called in an unsupported way."""


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
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
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    # -- graph plumbing ------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor requiring grad")
        if self._op != "leaf" and self._backward is None:
            raise UsageError("graph already released by an earlier backward(); rerun the forward pass")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        # release the tape
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- elementwise arithmetic ----------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def parameter(data) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True)


# -- broadcasting -------------------------------------------------------

def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if len(a) != len(b):
        raise ShapeError(f"rank mismatch {a} vs {b}: reshape explicitly before broadcasting")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"cannot broadcast {a} with {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return Tensor._result(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_const")
    a = as_tensor(a, b.dtype)
    shape = _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(np.broadcast_to(a.data, shape) + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))
        return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "mul_const")
    a = as_tensor(a, b.dtype)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def bw(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return Tensor._result(out, (a,), bw, "silu")


# -- reductions -----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


# -- shape manipulation ----------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._result(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose"
    )


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return Tensor._result(np.array(a.data[idx]), (a,), bw, "getitem")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ranks = {t.ndim for t in tensors}
    if len(ranks) != 1:
        raise ShapeError("concat operands must share rank")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        for ax in range(t.ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(f"concat shape mismatch {tensors[0].shape} vs {t.shape} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def repeat(a: Tensor, n: int, axis: int) -> Tensor:
    """Repeat each slice along ``axis`` ``n`` times (``[a0,a0,a1,a1,...]``)."""
    axis = axis % a.ndim
    shape = a.shape

    def bw(g):
        g = g.reshape(shape[:axis] + (shape[axis], n) + shape[axis + 1:])
        return (g.sum(axis=axis + 1),)

    return Tensor._result(np.repeat(a.data, n, axis=axis), (a,), bw, "repeat")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared) or carries
    the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), bw, "matmul")


def _im2col(xd: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """``[N, C, H, W]`` -> ``[N, C*kh*kw, H*W]`` patches with 'same' zero padding."""
    n, c, h, w = xd.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, h, w), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * kh * kw, h * w)


def _conv_same(xd: np.ndarray, kd: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    n, _, h, w = xd.shape
    co, ci, kh, kw = kd.shape
    if cols is None:
        cols = _im2col(xd, kh, kw)
    return np.matmul(kd.reshape(co, ci * kh * kw), cols).reshape(n, co, h, w)


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """'Same' zero-padded 2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; ``k`` is
    ``[C_out, C_in, kh, kw]`` with odd ``kh``, ``kw``.
    """
    if k.ndim != 4:
        raise ShapeError(f"kernel must be 4-D, got {k.shape}")
    co, ci, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel extents must be odd, got {kh}x{kw}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or xd.shape[1] != ci:
        raise ShapeError(f"input {x.shape} does not match kernel {k.shape}")
    n, _, h, w = xd.shape
    cols = _im2col(xd, kh, kw)
    out = _conv_same(xd, k.data, cols)
    if unbatched:
        out = out[0]
    kd = k.data

    def bw(g):
        g4 = g[None] if unbatched else g
        gk = gx = None
        if k.requires_grad:
            gk = np.matmul(g4.reshape(n, co, h * w), cols.transpose(0, 2, 1)).sum(axis=0).reshape(kd.shape)
        if x.requires_grad:
            # input gradient of a 'same' correlation = correlation with the flipped, transposed kernel
            gx = _conv_same(g4, np.ascontiguousarray(kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
            if unbatched:
                gx = gx[0]
        return gx, gk

    return Tensor._result(out, (x, k), bw, "conv2d")


# -- normalisation & attention primitives --------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), bw, "softmax")


def normalize(x: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance standardisation over ``axes`` (no affine)."""
    axes = _norm_axes(axes, x.ndim)
    n = int(np.prod([x.shape[i] for i in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).sum(axis=axes, keepdims=True) / n
        return (inv * (g - gm - y * gy),)

    return Tensor._result(y.astype(x.dtype, copy=False), (x,), bw, "normalize")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation of ``[N, C, H, W]`` with per-channel affine."""
    n, c, h, w = x.shape
    if c % groups:
        raise ConfigError(f"{c} channels not divisible into {groups} groups")
    y = normalize(x.reshape(n, groups, (c // groups) * h * w), axes=-1, eps=eps).reshape(n, c, h, w)
    return y * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with affine parameters of shape ``[C]``."""
    shape1 = (1,) * (x.ndim - 1) + (x.shape[-1],)
    return normalize(x, axes=-1, eps=eps) * gamma.reshape(shape1) + beta.reshape(shape1)


def mse(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def bw(g):
        return (g * (2.0 / n) * diff,)

    return Tensor._result(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,), bw, "mse")


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- random numbers -------------------------------------------------------

class Rng:
    """Seeded random stream.

    Backed by numpy's Philox-4x64 counter-based bit generator (10 rounds, the
    Random123 constants); normals use numpy's ziggurat sampler.  Child streams
    are derived with :meth:`derive` from ``SeedSequence([seed, *keys])`` so a
    stream for (seed, step) or (seed, clip index) is reproducible without
    replaying earlier draws.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def normal(self, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def random(self) -> float:
        return float(self._gen.random())

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)
