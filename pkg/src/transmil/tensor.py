"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`GradTape` are recorded together
with a vector-Jacobian closure. :func:`backward` replays the tape in reverse
and accumulates gradients into every ``requires_grad`` leaf. Outside a tape
the same operations run as plain numpy code with no bookkeeping, which is
how inference is done.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GradError(RuntimeError):
    """Misuse of the differentiation machinery."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of differentiable operations for one forward pass.

    Use as a context manager. Once the context exits the tape accepts no
    further operations; it can still be replayed by :func:`backward` any
    number of times, each replay accumulating into leaf gradients.
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._open = False
        self._used = False

    def __enter__(self) -> "GradTape":
        if self._used:
            raise GradError("a GradTape records a single forward pass")
        self._open = self._used = True
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()
        self._open = False

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], vjp: Callable) -> None:
        self.records.append((out, inputs, vjp))

    def backward(self, loss: "Tensor") -> None:
        backward(loss, self)

    def __len__(self) -> int:
        return len(self.records)


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise GradError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    else:
        out.requires_grad = False
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Populate gradients of all ``requires_grad`` leaves reachable from ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("loss does not depend on any tensor that requires grad")
    if tape._open:
        raise GradError("close the tape before calling backward")
    for out, _, _ in tape.records:
        out.grad = None
    seed = np.ones_like(loss.data)
    if loss._leaf:
        loss.grad = loss.grad + seed
        return
    loss.grad = seed
    for out, inputs, vjp in reversed(tape.records):
        g = out.grad
        if g is None:
            continue
        for t, gt in zip(inputs, vjp(g)):
            if gt is None or not t.requires_grad:
                continue
            if t._leaf:
                t.grad += gt
            elif t.grad is None:
                t.grad = gt
            else:
                t.grad = t.grad + gt


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _result(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {a.shape} and {b.shape} differ") from None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 axes, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=0)


def index(a: Tensor, idx) -> Tensor:
    """Numpy-style indexing; gradients scatter-add back, so repeated indices accumulate."""
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: [{start}, {stop}) out of range for {a.shape[0]} rows")
    return index(a, slice(start, stop))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# fused neural-network primitives


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction; ``softmax_rows`` is the 2-D last-axis case."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def softmax_rows(a: Tensor) -> Tensor:
    return softmax(a, axis=-1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (biased variance, eps inside the root)."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {x.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), vjp)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a single 1-D logit vector."""
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    p = np.exp(z - lse)

    def vjp(g):
        d = p.copy()
        d[label] -= 1.0
        return (g * d,)

    return _result(np.asarray(lse - z[label]), (logits,), vjp)


def _correlate_depthwise(xp: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    k = kernels.shape[-1]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return np.einsum("chwij,cij->chw", win, kernels, optimize=True)


def grouped_conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Depthwise 2-D cross-correlation with (k-1)/2 zero padding; keeps H and W.

    ``x`` is channels x H x W and ``kernels`` is channels x k x k, one kernel
    per channel.
    """
    if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2]:
        raise ShapeError(f"kernels must be C x k x k, got {kernels.shape}")
    k = kernels.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.ndim != 3 or x.shape[0] != kernels.shape[0]:
        raise ShapeError(f"grouped_conv2d: input {x.shape} vs kernels {kernels.shape}")
    r = (k - 1) // 2
    pad = ((0, 0), (r, r), (r, r))
    xp = np.pad(x.data, pad)
    out = _correlate_depthwise(xp, kernels.data)

    def vjp(g):
        gx = _correlate_depthwise(np.pad(g, pad), kernels.data[:, ::-1, ::-1]) if x.requires_grad else None
        gk = None
        if kernels.requires_grad:
            win = sliding_window_view(xp, (k, k), axis=(1, 2))
            gk = np.einsum("chwij,chw->cij", win, g, optimize=True)
        return gx, gk

    return _result(out, (x, kernels), vjp)


def segment_mean(x: Tensor, count: int) -> Tensor:
    """Means of ``count`` contiguous row segments along axis -2.

    Segments follow ``numpy.array_split``: sizes differ by at most one and the
    longer segments come first, so none is empty when ``count <= rows``.
    """
    s = x.shape[-2]
    if not 1 <= count <= s:
        raise ValueError(f"segment count must be in [1, {s}], got {count}")
    sizes = np.array([len(c) for c in np.array_split(np.arange(s), count)])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    scale = (1.0 / sizes)[:, None]
    out = np.add.reduceat(x.data, starts, axis=-2) * scale
    return _result(out, (x,), lambda g: (np.repeat(g * scale, sizes, axis=-2),))


def norm_product(a: Tensor) -> Tensor:
    """||A||_1 * ||A||_inf over the last two axes, shaped (..., 1, 1)."""
    absa = np.abs(a.data)
    cols = absa.sum(axis=-2)
    rows = absa.sum(axis=-1)
    c_idx = cols.argmax(axis=-1)
    r_idx = rows.argmax(axis=-1)
    n1 = np.take_along_axis(cols, c_idx[..., None], -1)[..., None]
    ninf = np.take_along_axis(rows, r_idx[..., None], -1)[..., None]

    def vjp(g):
        sign = np.sign(a.data)
        col_mask = np.arange(a.shape[-1]) == c_idx[..., None]
        row_mask = np.arange(a.shape[-2]) == r_idx[..., None]
        d = ninf * sign * col_mask[..., None, :] + n1 * sign * row_mask[..., :, None]
        return (g * d,)

    return _result(n1 * ninf, (a,), vjp)


def pinv_newton_schulz(a: Tensor, iters: int = 6) -> Tensor:
    """Moore-Penrose pseudoinverse of square matrices by Newton-Schulz iteration.

    Uses the cubic-update form
        Z <- Z (13I - AZ (15I - AZ (7I - AZ))) / 4
    from Z0 = A^T / (||A||_1 ||A||_inf). Every step is a taped primitive, so
    gradients flow through the unrolled iterations and the initial scale.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"pinv_newton_schulz expects square matrices, got {a.shape}")
    eye = np.eye(a.shape[-1])
    z = transpose(a) / norm_product(a)
    for _ in range(iters):
        az = a @ z
        z = (z @ (13.0 * eye - az @ (15.0 * eye - az @ (7.0 * eye - az)))) * 0.25
    return z


# ---------------------------------------------------------------------------
# verification


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` with respect to ``t.data``."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Sup-norm error relative to the larger gradient; absolute below ``floor``."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    err = np.abs(analytic - numeric).max(initial=0.0)
    return err if scale < floor else err / scale


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Worst relative error between taped and finite-difference gradients.

    Non-scalar outputs are reduced with a fixed random projection so every
    output entry contributes. ``inputs`` must be leaves with requires_grad.
    """
    probe = None

    def scalar() -> Tensor:
        nonlocal probe
        out = fn(*inputs)
        if out.size == 1:
            return tsum(out)
        if probe is None:
            probe = np.random.default_rng(seed).normal(size=out.shape)
        return tsum(out * probe)

    for t in inputs:
        t.zero_grad()
    with GradTape() as tape:
        loss = scalar()
    backward(loss, tape)
    worst = 0.0
    for t in inputs:
        worst = max(worst, relative_error(t.grad, numerical_grad(scalar, t, eps)))
    return worst
