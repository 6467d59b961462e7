"""Dense float64 tensors, a reverse-mode tape, and the layer kernels used by the U-Net.

Image batches use the N x H x W x C layout throughout.  Every primitive takes an
optional :class:`Tape`; when one is given the op is recorded so that
:meth:`Tape.backward` can later propagate gradients in reverse order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

WS_EPS = 1e-5
GN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when tensor dimensions are incompatible with an operation."""


class NumericError(ArithmeticError):
    """Raised when an operation sees or produces NaN/Inf."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable N-d float64 array.

    The buffer is copied on construction and flagged read-only, so a tensor
    recorded on a tape can never change underneath it.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, name: Optional[str] = None, *, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if copy:
            arr.flags.writeable = False
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: adopt a freshly computed array without copying
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class Gradients:
    """Mapping from tensors to their accumulated gradients.

    Tensors that did not influence the loss map to zeros of their own shape.
    """

    def __init__(self, grads: dict, tensors: dict):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def get(self, t: Tensor, default=None):
        return self._grads.get(id(t), default)


class Tape:
    """Ordered record of primitive ops for reverse-mode differentiation.

    A tape is single-owner.  Nodes are appended in execution order, which is
    a topological order, so walking them backwards visits each node once
    after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple, backward, op: str) -> None:
        self.nodes.append(_Node(out, inputs, backward, op))

    def backward(self, loss: Tensor, loss_grad=None) -> Gradients:
        if not self.nodes:
            raise TapeError("backward called on an empty tape (no forward pass recorded)")
        if loss_grad is None:
            if loss.size != 1:
                raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
            seed = np.ones(loss.shape)
        else:
            seed = np.array(loss_grad.data if isinstance(loss_grad, Tensor) else loss_grad,
                            dtype=np.float64)
            if seed.shape != loss.shape:
                raise ShapeError(f"loss_grad shape {seed.shape} != loss shape {loss.shape}")
        grads = {id(loss): seed}
        tensors = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not isinstance(inp, Tensor):
                    continue
                key = id(inp)
                tensors[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return Gradients(grads, tensors)


def _emit(tape: Optional[Tape], arr: np.ndarray, inputs: tuple, backward, op: str) -> Tensor:
    _check_finite(arr, f"output of {op}")
    out = Tensor._wrap(arr)
    if tape is not None:
        tape.record(out, inputs, backward, op)
    return out


# --------------------------------------------------------------------------
# primitives


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(tape, a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit(tape, ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(tape, a: Tensor, k: float) -> Tensor:
    return _emit(tape, a.data * k, (a,), lambda g: (g * k,), "scale")


def sum_all(tape, a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(tape, np.array(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def relu(tape, x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(tape, np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(tape, x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(tape, s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _check_image(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected N x H x W x C input, got shape {x.shape}")
    _check_finite(x.data, f"input of {op}")


def standardize_weight(tape, w: Tensor, eps: float = WS_EPS) -> Tensor:
    """Standardize a conv kernel to zero mean, unit variance per output channel.

    ``eps`` floors the variance (``sqrt(max(var, eps))``) so that a constant
    kernel does not divide by zero, while any kernel with ``var > eps`` comes
    out with variance exactly 1.
    """
    wd = w.data
    k = wd.shape[-1]
    flat = wd.reshape(-1, k)
    mu = flat.mean(axis=0)
    cen = flat - mu
    var = (cen * cen).mean(axis=0)
    floored = var <= eps
    s = np.sqrt(np.where(floored, eps, var))
    what = cen / s

    def backward(g):
        gf = g.reshape(-1, k)
        gmean = gf.mean(axis=0)
        proj = (gf * what).mean(axis=0)
        proj = np.where(floored, 0.0, proj)
        dw = (gf - gmean - what * proj) / s
        return (dw.reshape(wd.shape),)

    return _emit(tape, what.reshape(wd.shape), (w,), backward, "standardize_weight")


def _conv_out(n: int, k: int, stride: int) -> int:
    pad = (k - 1) // 2
    return (n + 2 * pad - k) // stride + 1


def _conv_shift(x: np.ndarray, w: np.ndarray, pad: int):
    # stride 1: one (NHW x C_in) @ (C_in x C_out) product per kernel tap
    n, h, wd_, cin = x.shape
    k, cout = w.shape[0], w.shape[3]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    taps = [np.ascontiguousarray(xp[:, i:i + h, j:j + wd_, :]).reshape(-1, cin)
            for i in range(k) for j in range(k)]
    out = np.zeros((n * h * wd_, cout))
    for t, (i, j) in zip(taps, ((i, j) for i in range(k) for j in range(k))):
        out += t @ w[i, j]
    out = out.reshape(n, h, wd_, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        dw = np.empty(w.shape)
        dxp = np.zeros(xp.shape)
        idx = 0
        for i in range(k):
            for j in range(k):
                dw[i, j] = taps[idx].T @ g2
                dxp[:, i:i + h, j:j + wd_, :] += (g2 @ w[i, j].T).reshape(n, h, wd_, cin)
                idx += 1
        dx = dxp[:, pad:pad + h, pad:pad + wd_, :] if pad else dxp
        return dx, dw

    return out, backward


def _conv_im2col(x: np.ndarray, w: np.ndarray, pad: int, stride: int, ho: int, wo: int):
    n, h, wd_, cin = x.shape
    k, cout = w.shape[0], w.shape[3]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((n, ho, wo, k, k, cin))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(-1, k * k * cin)
    wm = w.reshape(k * k * cin, cout)
    out = (cols @ wm).reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        dw = (cols.T @ g2).reshape(w.shape)
        dcols = (g2 @ wm.T).reshape(n, ho, wo, k, k, cin)
        dxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pad:pad + h, pad:pad + wd_, :] if pad else dxp
        return dx, dw

    return out, backward


def conv2d(tape, x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Zero-padded 'same' convolution (cross-correlation) in NHWC.

    ``w`` has shape (k, k, C_in, C_out) with odd ``k``.
    """
    _check_image(x, "conv2d")
    if w.data.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d: kernel must be k x k x C_in x C_out, got {w.shape}")
    k, _, cin, cout = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: same-padding needs an odd kernel size, got {k}")
    n, h, wd_, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    pad = (k - 1) // 2
    ho, wo = _conv_out(h, k, stride), _conv_out(wd_, k, stride)
    if stride == 1:
        out, backward = _conv_shift(x.data, w.data, pad)
    else:
        out, backward = _conv_im2col(x.data, w.data, pad, stride, ho, wo)
    if b is not None:
        out += b.data

    def full_backward(g):
        dx, dw = backward(g)
        db = g.sum(axis=(0, 1, 2)) if b is not None else None
        return (dx, dw, db)

    return _emit(tape, out, (x, w, b), full_backward, "conv2d")


def group_norm(tape, x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = GN_EPS) -> Tensor:
    _check_image(x, "group_norm")
    n, h, w, c = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine params must have shape ({c},)")
    cg = c // groups
    xg = x.data.reshape(n, h, w, groups, cg)
    axes = (1, 2, 4)
    m = h * w * cg
    mu = xg.mean(axis=axes, keepdims=True)
    cen = xg - mu
    var = (cen * cen).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = cen * inv
    gd, bd = gamma.data, beta.data
    out = xhat.reshape(n, h, w, c) * gd + bd

    def backward(g):
        dgamma = (g * xhat.reshape(n, h, w, c)).sum(axis=(0, 1, 2))
        dbeta = g.sum(axis=(0, 1, 2))
        dxhat = (g * gd).reshape(n, h, w, groups, cg)
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        dx = inv * (dxhat - s1 / m - xhat * s2 / m)
        return (dx.reshape(x.shape), dgamma, dbeta)

    return _emit(tape, out, (x, gamma, beta), backward, "group_norm")


def maxpool2x2(tape, x: Tensor) -> Tensor:
    _check_image(x, "maxpool2x2")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: H and W must be even, got {h} x {w}")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dblocks = np.zeros(blocks.shape)
        np.put_along_axis(dblocks, arg[..., None], g[..., None], axis=-1)
        dx = dblocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape)
        return (dx,)

    return _emit(tape, out, (x,), backward, "maxpool2x2")


def upsample_nearest2x(tape, x: Tensor) -> Tensor:
    _check_image(x, "upsample_nearest2x")
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _emit(tape, out, (x,), backward, "upsample_nearest2x")


def concat_channels(tape, xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    lead = xs[0].shape[:-1]
    for t in xs:
        _check_image(t, "concat")
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading dims {t.shape[:-1]} != {lead}")
    splits = np.cumsum([t.shape[-1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=-1)
    return _emit(tape, out, xs, lambda g: tuple(np.split(g, splits, axis=-1)), "concat")


# --------------------------------------------------------------------------
# layer kinds


@dataclass(frozen=True)
class Conv2D:
    """Same-padded conv; ``standardize`` applies weight standardization first."""

    k: int
    in_ch: int
    out_ch: int
    stride: int = 1
    standardize: bool = False

    def param_shapes(self):
        return [(self.k, self.k, self.in_ch, self.out_ch), (self.out_ch,)]

    def forward(self, params, x, tape):
        w, b = params
        if self.standardize:
            w = standardize_weight(tape, w)
        return conv2d(tape, x, w, b, self.stride)


@dataclass(frozen=True)
class GroupNormWS:
    """Group normalization (paired with weight-standardized convs upstream)."""

    groups: int
    channels: int

    def param_shapes(self):
        return [(self.channels,), (self.channels,)]

    def forward(self, params, x, tape):
        gamma, beta = params
        return group_norm(tape, x, gamma, beta, self.groups)


@dataclass(frozen=True)
class ReLU:
    def param_shapes(self):
        return []

    def forward(self, params, x, tape):
        return relu(tape, x)


@dataclass(frozen=True)
class Sigmoid:
    def param_shapes(self):
        return []

    def forward(self, params, x, tape):
        return sigmoid(tape, x)


@dataclass(frozen=True)
class MaxPool2x2:
    def param_shapes(self):
        return []

    def forward(self, params, x, tape):
        return maxpool2x2(tape, x)


@dataclass(frozen=True)
class Upsample2x:
    """Nearest-neighbour x2 followed by a 3x3 weight-standardized conv."""

    in_ch: int
    out_ch: int
    standardize: bool = True

    def param_shapes(self):
        return [(3, 3, self.in_ch, self.out_ch), (self.out_ch,)]

    def forward(self, params, x, tape):
        w, b = params
        up = upsample_nearest2x(tape, x)
        if self.standardize:
            w = standardize_weight(tape, w)
        return conv2d(tape, up, w, b)


@dataclass(frozen=True)
class Concat:
    def param_shapes(self):
        return []

    def forward(self, params, x, tape):
        return concat_channels(tape, x)


LayerKind = Union[Conv2D, GroupNormWS, ReLU, Sigmoid, MaxPool2x2, Upsample2x, Concat]


def forward(layer: LayerKind, params: Sequence[Tensor], x, tape: Optional[Tape] = None) -> Tensor:
    """Apply ``layer`` to ``x`` (a tensor, or a sequence of tensors for Concat)."""
    shapes = layer.param_shapes()
    if len(params) != len(shapes):
        raise ShapeError(f"{type(layer).__name__}: expected {len(shapes)} params, got {len(params)}")
    for p, s in zip(params, shapes):
        if tuple(p.shape) != tuple(s):
            raise ShapeError(f"{type(layer).__name__}: param shape {p.shape} != declared {s}")
    return layer.forward(params, x, tape)


def backward(tape: Tape, loss: Tensor, loss_grad=None) -> Gradients:
    return tape.backward(loss, loss_grad)


# --------------------------------------------------------------------------
# gradient checking


def _sample_case(layer: LayerKind, rng: np.random.Generator):
    n, h, w = 2, 4, 4
    if isinstance(layer, Conv2D):
        x = [rng.normal(size=(n, h, w, layer.in_ch))]
    elif isinstance(layer, Upsample2x):
        x = [rng.normal(size=(n, h // 2, w // 2, layer.in_ch))]
    elif isinstance(layer, GroupNormWS):
        x = [rng.normal(size=(n, h, w, layer.channels))]
    elif isinstance(layer, Concat):
        x = [rng.normal(size=(n, h, w, 2)), rng.normal(size=(n, h, w, 3))]
    elif isinstance(layer, ReLU):
        z = rng.uniform(0.1, 1.0, size=(n, h, w, 3))
        x = [z * rng.choice([-1.0, 1.0], size=z.shape)]
    elif isinstance(layer, MaxPool2x2):
        # distinct values per pool window keep the argmax stable under the FD step
        base = rng.permutation(n * h * w * 3).reshape(n, h, w, 3) * 0.05
        x = [base + rng.uniform(0, 0.01, size=base.shape)]
    else:
        x = [rng.normal(size=(n, h, w, 3))]
    params = []
    for s in layer.param_shapes():
        if len(s) == 1:
            params.append(rng.normal(size=s))
        else:
            params.append(rng.normal(size=s) * 0.5)
    return x, params


def grad_check(layer: LayerKind, seed: int = 0, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The scalar probed is ``sum(r * layer(x))`` for a fixed random ``r`` with
    entries bounded away from zero.  Both the inputs and every parameter are
    checked; the result is ``max |g_an - g_fd| / max(|g_an|, |g_fd|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    xs, ps = _sample_case(layer, rng)
    is_multi = isinstance(layer, Concat)

    def run(tape, xs_, ps_):
        x = [Tensor(a) for a in xs_]
        p = [Tensor(a) for a in ps_]
        out = forward(layer, p, x if is_multi else x[0], tape)
        return x, p, out

    _, _, probe = run(None, xs, ps)
    r = rng.uniform(0.5, 1.5, size=probe.shape) * rng.choice([-1.0, 1.0], size=probe.shape)

    def loss_value(xs_, ps_):
        _, _, out = run(None, xs_, ps_)
        return float((r * out.data).sum())

    tape = Tape()
    xt, pt, out = run(tape, xs, ps)
    loss = sum_all(tape, mul(tape, out, Tensor(r)))
    grads = tape.backward(loss)

    worst = 0.0
    arrays = list(xs) + list(ps)
    tensors = list(xt) + list(pt)
    for idx, (arr, t) in enumerate(zip(arrays, tensors)):
        g_an = grads[t]
        g_fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = loss_value(arrays[:len(xs)], arrays[len(xs):])
            flat[j] = orig - step
            fm = loss_value(arrays[:len(xs)], arrays[len(xs):])
            flat[j] = orig
            g_fd.reshape(-1)[j] = (fp - fm) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(g_an), np.abs(g_fd)), 1e-8)
        worst = max(worst, float((np.abs(g_an - g_fd) / denom).max()))
    return worst
