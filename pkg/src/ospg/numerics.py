"""Dense numpy tensors with reverse-mode gradients.

Every op returns a new :class:`Tensor` that remembers its parents and a closure
which pushes the upstream gradient back to them.  Data is float32 unless a
float64 array is passed in explicitly (the finite-difference oracle does this
so that central differences at ``h=1e-3`` are meaningful).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True
check_finite = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autograd ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by forward op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    c = math.sqrt(2.0 / math.pi)
    x2 = xd * xd
    inner = c * (xd + 0.044715 * x2 * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out.astype(xd.dtype, copy=False), (x,), back)


# -- shape ops ------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_wrap(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, back)


def pad_axis(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    n = x.shape[axis]

    def back(g):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(before, before + n)
        return (g[tuple(idx)],)

    return _make(np.pad(x.data, widths), (x,), back)


def gather_rows(src: Tensor, index: np.ndarray) -> Tensor:
    """``out[...] = src[index[...]]`` along the first axis of ``src``.

    Used both as embedding lookup and to splice speech rows into a text batch.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= src.shape[0]):
        raise IndexError(f"row index out of range for table with {src.shape[0]} rows")

    def back(g):
        full = np.zeros_like(src.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, *src.shape[1:]))
        return (full,)

    return _make(src.data[index], (src,), back)


embedding = gather_rows


# -- reductions -----------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [d_out, d_in]."""
    y = matmul(x, transpose(weight))
    return y if bias is None else add(y, bias)


# -- normalisation / probabilities -----------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    d = xd.shape[-1]

    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make((xhat * gd + beta.data).astype(np.result_type(xd.dtype, gamma.data.dtype), copy=False), (x, gamma, beta), back)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over masked-in positions."""
    ld = logits.data
    V = ld.shape[-1]
    flat = ld.reshape(-1, V)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise ShapeError(f"{targets.shape[0]} targets for {flat.shape[0]} logit rows")
    m = np.ones(targets.shape, bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    n = int(m.sum())
    if n == 0:
        raise ValueError("cross_entropy over an empty mask")
    sel = np.flatnonzero(m)
    if np.any(targets[sel] < 0) or np.any(targets[sel] >= V):
        raise IndexError("target id outside the vocabulary")
    rows = flat[sel]
    z = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(sel)), targets[sel]]
    loss = np.asarray(nll.sum() / n, dtype=ld.dtype)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(sel)), targets[sel]] -= 1.0
        full = np.zeros_like(flat)
        full[sel] = p * (g / n)
        return (full.reshape(ld.shape),)

    return _make(loss, (logits,), back)


# -- convolution ----------------------------------------------------------

def conv_out_len(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation.

    ``x`` is [c_in, H, W] or [B, c_in, H, W]; ``weight`` is [c_out, c_in, kh, kw].
    """
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    B, C, H, W = xd.shape
    co, ci, kh, kw = weight.shape
    if ci != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {weight.shape}")
    Ho, Wo = conv_out_len(H, kh, sh, ph), conv_out_len(W, kw, sw, pw)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * ph}x{W + 2 * pw}")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # cols: [B, C, kh, kw, Ho, Wo]
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw]
    wd = weight.data
    out = np.einsum("bcijhw,ocij->bohw", cols, wd, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g4 = g[None] if unbatched else g
        gw = np.einsum("bohw,bcijhw->ocij", g4, cols, optimize=True)
        gcols = np.einsum("bohw,ocij->bcijhw", g4, wd, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph:ph + H, pw:pw + W]
        if unbatched:
            gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g4.sum(axis=(0, 2, 3))

    out = out.astype(np.result_type(xd.dtype, wd.dtype), copy=False)
    return _make(out[0] if unbatched else out, parents, back)


# -- attention ------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention on [..., S, d] tensors.

    ``mask`` is additive and broadcast against the [..., S_q, S_k] scores.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, _swap_last(k.ndim))) * scale
    if mask is not None:
        scores = add(scores, Tensor(mask.astype(scores.dtype, copy=False)))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(n: int) -> tuple[int, ...]:
    return tuple(range(n - 2)) + (n - 1, n - 2)


NEG_INF = -1e9


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF, dtype=DTYPE), k=1)


# -- parameters and optimisation -------------------------------------------

@dataclass
class ParamGroup:
    name: str
    tensors: dict[str, Tensor] = field(default_factory=dict)
    trainable: bool = True

    def __iter__(self):
        return iter(self.tensors.items())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


class Adam:
    """Bias-corrected Adam over a list of :class:`ParamGroup`.

    Frozen groups (``trainable=False``) are skipped entirely, so their data is
    never touched.
    """

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self._m: dict[tuple[str, str], np.ndarray] = {}
        self._v: dict[tuple[str, str], np.ndarray] = {}

    def step(self, groups: Iterable[ParamGroup], lr: float | None = None,
             scales: Mapping[str, float] | None = None) -> None:
        """One update; ``scales`` multiplies the step size per group name."""
        lr = self.lr if lr is None else lr
        scales = scales or {}
        groups = [g for g in groups if g.trainable]
        for g in groups:
            for name, t in g.tensors.items():
                if t.grad is None:
                    raise RuntimeError(f"missing gradient for trainable tensor {g.name}.{name}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for g in groups:
            for name, t in g.tensors.items():
                key = (g.name, name)
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(t.data)
                    self._v[key] = np.zeros_like(t.data)
                v = self._v[key]
                grad = t.grad
                m *= b1
                m += (1 - b1) * grad
                v *= b2
                v += (1 - b2) * grad * grad
                update = lr * scales.get(g.name, 1.0) * (m / c1) / (np.sqrt(v / c2) + self.eps)
                t.data = (t.data - update).astype(t.data.dtype, copy=False)


def adam_step(groups, optimizer: Adam, lr: float | None = None) -> None:
    optimizer.step(groups, lr)


# -- finite-difference oracle ----------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_tensor: int
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    n_checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def finite_diff_check(f: Callable[[], Tensor], params: Tensor | Sequence[Tensor],
                      h: float = 1e-3, floor: float = 1e-3,
                      max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``params`` are perturbed in place.  The relative error of one coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients
    from turning rounding noise into huge ratios.
    """
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = f()
    out.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(seed)
    worst = GradCheckReport(0.0, -1, (), 0.0, 0.0, 0)
    n = 0
    with no_grad():
        for ti, p in enumerate(params):
            coords = list(np.ndindex(p.shape))
            if max_coords is not None and len(coords) > max_coords:
                pick = rng.choice(len(coords), size=max_coords, replace=False)
                coords = [coords[i] for i in sorted(pick)]
            for idx in coords:
                orig = p.data[idx].copy()
                p.data[idx] = orig + h
                fp = float(f().data)
                p.data[idx] = orig - h
                fm = float(f().data)
                p.data[idx] = orig
                num = (fp - fm) / (2 * h)
                a = float(analytic[ti][idx])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                n += 1
                if err >= worst.max_rel_err:
                    worst = GradCheckReport(err, ti, idx, a, num, 0)
    worst.n_checked = n
    return worst
