"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the segmentation network needs are provided. Feature maps
use the (N, C, H, W) layout. Computation runs in float32 by default; pass
float64 arrays to get a verification-grade graph (see :func:`grad_check`).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DetachedTensorError, NotReadyError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable lineage recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def sum(self) -> Tensor:
        return tsum(self)

    def mean(self) -> Tensor:
        return scale(tsum(self), 1.0 / self.size)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable tensor carrying its Adam moments."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedTensorError("loss has no autodiff lineage")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise / reductions


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    s = x.dtype.type(slope)
    out = np.where(pos, x.data, x.data * s)
    return _make(out, (x,), lambda g: (np.where(pos, g, g * s),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Channel-wise softmax, stabilized by subtracting the per-pixel max."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), bw)


# ---------------------------------------------------------------------------
# convolution


def _same_pads(size: int, k: int, s: int) -> tuple[int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: tuple[int, int] = (1, 1), padding: str = "same") -> Tensor:
    """2D cross-correlation of an (N, Cin, H, W) input with a (Cout, Cin, kh, kw) kernel."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} incompatible with weight {weight.shape}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    sh, sw = stride
    if padding == "same":
        ph, pw = _same_pads(h, kh, sh), _same_pads(w, kw, sw)
    elif padding == "valid":
        ph, pw = (0, 0), (0, 0)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    ho = (h + ph[0] + ph[1] - kh) // sh + 1
    wo = (w + pw[0] + pw[1] - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than input {x.shape}")

    wmat = weight.data.reshape(cout, cin * kh * kw)
    pointwise = kh == 1 and kw == 1 and sh == 1 and sw == 1
    if pointwise:
        # (N, Cin, H*W) -> (N, Cout, H*W)
        cols = x.data.reshape(n, cin, h * w)
        out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    else:
        xp = x.data
        if any(ph) or any(pw):
            xp = np.pad(xp, ((0, 0), (0, 0), ph, pw))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        # (Cin, kh, kw, N, Ho, Wo) flattened to (K, M)
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(cin * kh * kw, n * ho * wo)
        out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
        out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if pointwise:
            gm = g.reshape(n, cout, ho * wo)
            if weight.requires_grad:
                gw = np.einsum("nom,nim->oi", gm, cols, optimize=True).reshape(weight.shape)
            if x.requires_grad:
                gx = np.matmul(wmat.T, gm).reshape(x.shape)
            return gx, gw, gb
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        if weight.requires_grad:
            gw = (gm @ cols.T).reshape(weight.shape)
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(cin, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
            gxp = np.zeros((n, cin, h + ph[0] + ph[1], w + pw[0] + pw[1]), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, :, i, j]
            gx = gxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# normalization


class BatchNormState:
    """Running statistics of a batchnorm layer (not trained by gradient)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: BatchNormState,
                mode: str = "train", momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    shp = (1, c, 1, 1)
    if mode == "train":
        axes = (0, 2, 3)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(shp)
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(shp)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running.mean = ((1 - momentum) * running.mean + momentum * mu).astype(running.mean.dtype)
        running.var = ((1 - momentum) * running.var + momentum * unbiased).astype(running.var.dtype)
        out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

        def bw(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = None
            if x.requires_grad:
                gxhat = g * gamma.data.reshape(shp)
                gx = (inv.reshape(shp) / m) * (
                    m * gxhat - gxhat.sum(axis=axes).reshape(shp)
                    - xhat * (gxhat * xhat).sum(axis=axes).reshape(shp))
            return gx, gg, gb
    elif mode == "eval":
        inv = (1.0 / np.sqrt(running.var + eps)).astype(x.dtype)
        xhat = (x.data - running.mean.reshape(shp).astype(x.dtype)) * inv.reshape(shp)
        out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

        def bw(g):
            return (g * (gamma.data * inv).reshape(shp), (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# resampling and merging


def resample(x: Tensor, direction: str, factor: int = 2, axis: str = "width") -> Tensor:
    """Width-only max-pool (down) or nearest-neighbour duplication (up)."""
    if axis != "width":
        raise ValueError("only width resampling is supported")
    n, c, h, w = x.shape
    if direction == "down":
        if w % factor:
            raise ShapeError(f"width {w} not divisible by {factor}")
        blocks = x.data.reshape(n, c, h, w // factor, factor)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gx = np.zeros_like(blocks)
            np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
            return (gx.reshape(x.shape),)

        return _make(out, (x,), bw)
    if direction == "up":
        out = np.repeat(x.data, factor, axis=3)
        return _make(out, (x,), lambda g: (g.reshape(n, c, h, w, factor).sum(axis=-1),))
    raise ValueError(f"unknown direction {direction!r}")


def merge(a: Tensor, b: Tensor, mode: str = "concat") -> Tensor:
    if mode == "add":
        if a.shape != b.shape:
            raise ShapeError(f"merge(add): shapes {a.shape} and {b.shape} differ")
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if mode == "concat":
        return concat([a, b])
    raise ValueError(f"unknown merge mode {mode!r}")


def concat(ts: Sequence[Tensor]) -> Tensor:
    """Channel-axis concatenation, in argument order."""
    ts = tuple(ts)
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"merge(concat): shapes {ref} and {t.shape} differ in N/H/W")
    out = np.concatenate([t.data for t in ts], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _make(out, tuple(ts), bw)


# ---------------------------------------------------------------------------
# verification and optimisation


def grad_check(f: Callable[..., Tensor], inputs, eps=1e-3, samples: int | None = None,
               seed: int = 0, atol: float = 0.0) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` is called as ``f(*inputs)`` and must return a scalar tensor. Inputs are
    perturbed in place, so parameters captured by ``f`` can be listed here too.
    The relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.

    ``eps`` may be a sequence of step sizes; each entry then scores its best
    agreement over the steps. A wrong gradient disagrees at every step, while a
    kink inside the step or roundoff at a tiny step only spoils one end.
    With ``samples`` set, that many random entries per input are probed. Entries
    with ``|a - b| <= atol`` count as exact (for structurally zero gradients).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    steps = [float(eps)] if np.isscalar(eps) else [float(e) for e in eps]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    for t in inputs:
        t.grad = None

    worst = 0.0
    rng = np.random.default_rng(seed)
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = a.reshape(-1)
            idx = range(flat.size)
            if samples is not None and samples < flat.size:
                idx = rng.choice(flat.size, size=samples, replace=False)
            for i in idx:
                orig = flat[i]
                best = np.inf
                for h in steps:
                    flat[i] = orig + h
                    fp = f(*inputs).item()
                    flat[i] = orig - h
                    fm = f(*inputs).item()
                    flat[i] = orig
                    num = (fp - fm) / (2 * h)
                    diff = abs(num - aflat[i])
                    err = 0.0 if diff <= atol else diff / max(abs(num), abs(aflat[i]), 1e-8)
                    best = min(best, err)
                    if best < 1e-7:  # further steps could only lower it
                        break
                worst = max(worst, best)
    return worst


def adam_step(params: Sequence[Parameter], lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place, then zero the gradients."""
    for p in params:
        if p.grad is None:
            raise NotReadyError(f"parameter {p.name or p.shape} has no gradient")
    for p in params:
        g = p.grad
        p.step += 1
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * (g * g)
        mhat = p.m / (1 - beta1 ** p.step)
        vhat = p.v / (1 - beta2 ** p.step)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)
        p.grad[...] = 0
