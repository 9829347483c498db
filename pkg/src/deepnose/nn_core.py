"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the network needs are provided: 3x3x3 same-size
convolution, batch normalization, ReLU, 2x2x2 max/avg pooling, dropout,
dense layers, reshape/mean and a masked binary cross-entropy on logits.

Each op builds a node holding a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` walks the graph in reverse topological
order and frees it afterwards.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeMismatch

_GRAD_ENABLED = True

# Bytes of im2col scratch per convolution chunk.
CONV_SCRATCH_BYTES = 1 << 26


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Array plus optional gradient and backward-graph record."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            node.parents, node._backward = (), None


def _node(data, parents, op, backward) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Layers (parameter holders)
# ---------------------------------------------------------------------------

def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv3dLayer:
    """3x3x3 kernel, stride 1, zero padding 1."""

    def __init__(self, in_ch, out_ch, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_fan_in_uniform(rng, (out_ch, in_ch, 3, 3, 3), in_ch * 27, dtype), True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), True)

    @property
    def in_ch(self):
        return self.weight.shape[1]

    @property
    def out_ch(self):
        return self.weight.shape[0]

    def parameters(self):
        return [self.weight, self.bias]


class BatchNorm3dLayer:
    def __init__(self, ch, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.gamma = Tensor(np.ones(ch, dtype=dtype), True)
        self.beta = Tensor(np.zeros(ch, dtype=dtype), True)
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def parameters(self):
        return [self.gamma, self.beta]


class LinearLayer:
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_fan_in_uniform(rng, (out_features, in_features), in_features, dtype), True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), True)

    def parameters(self):
        return [self.weight, self.bias]


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

_OFFSETS = [(a, b, c) for a in range(3) for b in range(3) for c in range(3)]

# Inputs sparser than this use the scatter/gather path.
SPARSE_DENSITY = 0.02


def _im2col(xp: np.ndarray, d: int, h: int, w: int) -> np.ndarray:
    """Padded [m, C, d+2, h+2, w+2] -> columns [C*27, m*d*h*w]."""
    m, c = xp.shape[:2]
    cols = np.empty((c, 27, m, d, h, w), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3, 4)
    for k, (a, b, e) in enumerate(_OFFSETS):
        cols[:, k] = xt[:, :, a:a + d, b:b + h, e:e + w]
    return cols.reshape(c * 27, m * d * h * w)


def _chunk(c: int, d: int, h: int, w: int, itemsize: int) -> int:
    return max(1, CONV_SCRATCH_BYTES // (c * 27 * d * h * w * itemsize))


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded stride-1 cross-correlation via chunked im2col + GEMM."""
    n, c, d, h, wd = x.shape
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.empty((n, o, d, h, wd), dtype=np.result_type(x, w))
    w2 = w.reshape(o, c * 27)
    chunk = _chunk(c, d, h, wd, x.itemsize)
    for s in range(0, n, chunk):
        cols = _im2col(xp[s:s + chunk], d, h, wd)
        m = cols.shape[1] // (d * h * wd)
        out[s:s + m] = (w2 @ cols).reshape(o, m, d, h, wd).transpose(1, 0, 2, 3, 4)
    return out


def _conv_weight_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n, c, d, h, wd = x.shape
    o = g.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    gw = np.zeros((o, c * 27), dtype=np.result_type(x, g))
    chunk = _chunk(c, d, h, wd, x.itemsize)
    for s in range(0, n, chunk):
        cols = _im2col(xp[s:s + chunk], d, h, wd)
        gm = g[s:s + chunk].transpose(1, 0, 2, 3, 4).reshape(o, -1)
        gw += gm @ cols.T
    return gw.reshape(o, c, 3, 3, 3)


def _sparse_taps(x: np.ndarray):
    """Yield (k, offset, channel, n, dst index tuple, src values) for nonzero inputs."""
    n_idx, c_idx, i, j, k = np.nonzero(x)
    vals = x[n_idx, c_idx, i, j, k]
    dims = x.shape[2:]
    for t, (a, b, e) in enumerate(_OFFSETS):
        # output p receives x[p + offset - 1] through tap (a, b, e)
        pi, pj, pk = i - (a - 1), j - (b - 1), k - (e - 1)
        ok = (pi >= 0) & (pi < dims[0]) & (pj >= 0) & (pj < dims[1]) & (pk >= 0) & (pk < dims[2])
        for ch in range(x.shape[1]):
            sel = ok & (c_idx == ch)
            if sel.any():
                yield t, (a, b, e), ch, (n_idx[sel], pi[sel], pj[sel], pk[sel]), vals[sel]


def _conv_same_sparse(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, _, d, h, wd = x.shape
    o = w.shape[0]
    out = np.zeros((n, d, h, wd, o), dtype=np.result_type(x, w))
    for _, (a, b, e), ch, dst, vals in _sparse_taps(x):
        # destinations are unique within one (tap, channel) pair
        out[dst] += vals[:, None] * w[:, ch, a, b, e]
    return out.transpose(0, 4, 1, 2, 3)


def _conv_weight_grad_sparse(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    c = x.shape[1]
    o = g.shape[1]
    gw = np.zeros((o, c, 3, 3, 3), dtype=np.result_type(x, g))
    gl = g.transpose(0, 2, 3, 4, 1)
    for _, (a, b, e), ch, dst, vals in _sparse_taps(x):
        gw[:, ch, a, b, e] += vals @ gl[dst]
    return gw


def conv3d(x: Tensor, layer: Conv3dLayer) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 5 or x.shape[1] != layer.in_ch:
        raise ShapeMismatch(f"conv3d expects [N, {layer.in_ch}, D, H, W], got {x.shape}")
    if min(x.shape[2:]) < 1:
        raise ShapeMismatch(f"empty spatial extent {x.shape}")
    w, b = layer.weight, layer.bias
    xd = x.data
    sparse = np.count_nonzero(xd) < SPARSE_DENSITY * xd.size
    out = (_conv_same_sparse if sparse else _conv_same)(xd, w.data) + b.data[None, :, None, None, None]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _conv_same(g, flipped)
        if w.requires_grad:
            gw = (_conv_weight_grad_sparse if sparse else _conv_weight_grad)(xd, g)
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    return _node(out, (x, w, b), "conv3d", backward)


# ---------------------------------------------------------------------------
# Normalization, nonlinearity, pooling, dropout
# ---------------------------------------------------------------------------

def batchnorm3d(x: Tensor, layer: BatchNorm3dLayer, mode: str = "train") -> Tensor:
    """Per-channel normalization over batch and spatial axes."""
    x = as_tensor(x)
    if x.data.ndim != 5 or x.shape[1] != len(layer.running_mean):
        raise ShapeMismatch(f"batchnorm3d expects [N, {len(layer.running_mean)}, D, H, W], got {x.shape}")
    gamma, beta = layer.gamma, layer.beta
    axes = (0, 2, 3, 4)
    bshape = (1, -1, 1, 1, 1)
    xd = x.data
    if mode == "train":
        count = xd.size // xd.shape[1]
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = layer.momentum
        unbiased = var * (count / max(count - 1, 1))
        layer.running_mean[...] = (1 - m) * layer.running_mean + m * mean
        layer.running_var[...] = (1 - m) * layer.running_var + m * unbiased
    elif mode == "eval":
        mean, var = layer.running_mean, layer.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + layer.eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if mode == "train":
            gx = inv_std.reshape(bshape) * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), "batchnorm3d", backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0).astype(x.dtype), (x,), "relu", lambda g: (g * pos,))


def _windows(a: np.ndarray, k: int):
    n, c, d, h, w = a.shape
    d2, h2, w2 = d // k, h // k, w // k
    cropped = a[:, :, :d2 * k, :h2 * k, :w2 * k]
    win = cropped.reshape(n, c, d2, k, h2, k, w2, k).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return win.reshape(n, c, d2, h2, w2, k ** 3)


def _unwindow(win: np.ndarray, k: int, full_shape) -> np.ndarray:
    n, c, d2, h2, w2, _ = win.shape
    block = win.reshape(n, c, d2, h2, w2, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    out = np.zeros(full_shape, dtype=win.dtype)
    out[:, :, :d2 * k, :h2 * k, :w2 * k] = block.reshape(n, c, d2 * k, h2 * k, w2 * k)
    return out


def _check_pool(x: Tensor, k: int):
    if x.data.ndim != 5 or min(x.shape[2:]) < k:
        raise ShapeMismatch(f"pooling by {k} needs [N, C, D, H, W] with spatial dims >= {k}, got {x.shape}")


def maxpool3d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing odd planes are discarded."""
    x = as_tensor(x)
    _check_pool(x, k)
    win = _windows(x.data, k)
    arg = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, arg, g[..., None], axis=-1)
        return (_unwindow(gwin, k, x.shape),)

    return _node(out, (x,), "maxpool3d", backward)


def avgpool3d(x: Tensor, k: int = 2) -> Tensor:
    x = as_tensor(x)
    _check_pool(x, k)
    win = _windows(x.data, k)
    out = win.mean(axis=-1)

    def backward(g):
        share = np.broadcast_to((g / k ** 3)[..., None], win.shape)
        return (_unwindow(np.ascontiguousarray(share), k, x.shape),)

    return _node(out, (x,), "avgpool3d", backward)


def dropout(x: Tensor, rate: float, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1 - rate) in train mode."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if mode == "eval" or rate == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return _node(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


def linear(x: Tensor, layer: LinearLayer) -> Tensor:
    x = as_tensor(x)
    w, b = layer.weight, layer.bias
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"linear expects [N, {w.shape[1]}], got {x.shape}")
    xd = x.data
    out = xd @ w.data.T + b.data

    def backward(g):
        return g @ w.data, g.T @ xd, g.sum(axis=0)

    return _node(out, (x, w, b), "linear", backward)


# ---------------------------------------------------------------------------
# Shape ops and reductions
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _node(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(src),))


def mean(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]
    src = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, src).copy(),)

    return _node(x.data.mean(axis=axis), (x,), "mean", backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(x * weights); handy for probing gradients of any op."""
    x = as_tensor(x)
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ShapeMismatch(f"weights {weights.shape} vs input {x.shape}")
    return _node(np.asarray((x.data * weights).sum()), (x,), "weighted_sum", lambda g: (g * weights,))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def masked_bce_with_logits(logits: Tensor, labels, mask) -> Tensor:
    """Mean binary cross-entropy over entries where ``mask`` is 1.

    Masked-out entries contribute exactly zero to both loss and gradient,
    independent of their labels. An all-zero mask gives loss 0.
    """
    logits = as_tensor(logits)
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype)
    m = np.asarray(mask).astype(bool)
    if y.shape != z.shape or m.shape != z.shape:
        raise ShapeMismatch(f"logits {z.shape}, labels {y.shape}, mask {m.shape}")
    total = int(m.sum())
    if total == 0:
        zero = np.zeros((), dtype=z.dtype)
        return _node(zero, (logits,), "masked_bce", lambda g: (np.zeros_like(z),))
    term = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = np.where(m, term, 0).sum() / z.dtype.type(total)

    def backward(g):
        return (np.where(m, (sigmoid(z) - y) * (g / total), 0).astype(z.dtype),)

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), "masked_bce", backward)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params vs {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} vs parameter {p.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple | None
    tol: float
    n_kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], tol: float = 1e-4,
               step: float = 1e-5, max_per_tensor: int = 30, floor: float = 1e-6,
               exclude: Callable[[int, int], bool] | None = None,
               rng: np.random.Generator | None = None,
               kink_tol: float | None = None) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``f`` recomputes a scalar from the current values of ``inputs``; use
    64-bit inputs and eval-mode dropout. Large tensors are sampled. Relative
    error is ``|a - n| / max(|a|, |n|, floor)``. ``exclude(i, j)`` skips flat
    coordinate ``j`` of input ``i`` (e.g. ReLU kinks).

    With ``kink_tol`` set, a coordinate whose forward and backward one-sided
    differences disagree by more than ``kink_tol`` (relative) is counted in
    ``n_kinks`` and not scored: some nondifferentiable point lies inside the
    step. A wrong gradient still fails, since both sides then agree with each
    other but not with backprop.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    f().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst, max_err, n, kinks = None, 0.0, 0, 0
    with no_grad():
        f0 = float(f().data) if kink_tol is not None else 0.0
        for i, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            cand = np.arange(flat.size)
            if exclude is not None:
                cand = np.array([j for j in cand if not exclude(i, j)], dtype=np.int64)
            if cand.size > max_per_tensor:
                cand = np.sort(rng.choice(cand, size=max_per_tensor, replace=False))
            for j in cand:
                orig = flat[j]
                flat[j] = orig + step
                fp = float(f().data)
                flat[j] = orig - step
                fm = float(f().data)
                flat[j] = orig
                if kink_tol is not None:
                    right, left = fp - f0, f0 - fm
                    if abs(right - left) > kink_tol * max(abs(right), abs(left), floor * step):
                        kinks += 1
                        continue
                num = (fp - fm) / (2 * step)
                a = float(analytic[i].reshape(-1)[j])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                n += 1
                if worst is None or err > max_err:
                    max_err, worst = err, (i, int(j), a, num)
    for t in inputs:
        t.grad = None
    return GradCheckReport(max_err, n, worst, tol, kinks)
