"""Dense float64 tensors with reverse-mode differentiation.

Only the operations needed by the segmentation network and the Jaccard loss
are provided. There is no broadcasting beyond Python scalars.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array with an optional gradient slot and graph edges."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(seed: Tensor) -> list[Tensor]:
    """Nodes reachable from ``seed`` with every node after all of its inputs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(seed, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(seed: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` tensor feeding ``seed``.

    Gradients are added to whatever is already stored, so callers zero
    parameter grads between steps.
    """
    if seed.data.size != 1 or seed.ndim != 0:
        raise ValueError(f"backward needs a scalar seed, got shape {seed.shape}")
    if not seed.requires_grad:
        return
    order = topological_order(seed)
    # interior grads are scratch space; leaves keep accumulating
    for node in order:
        if node._backward is not None:
            node.grad = None
    seed._accumulate(np.ones((), dtype=np.float64))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def bw_const(g):
            if a.requires_grad:
                a._accumulate(g)

        return _make(a.data + c, (a,), bw_const, "add")
    _check_same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), bw, "add")


elementwise_add = add


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), bw, "neg")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _check_same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def bw_const(g):
            a._accumulate(g * c)

        return _make(a.data * c, (a,), bw_const, "scale")
    _check_same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), bw, "mul")


def safe_div(num: Tensor, den: Tensor, empty_value: float = 1.0) -> Tensor:
    """``num / den`` with ``empty_value`` (and zero gradient) where ``den == 0``."""
    _check_same_shape(num, den, "safe_div")
    zero = den.data == 0.0
    d = np.where(zero, 1.0, den.data)
    out = np.where(zero, empty_value, num.data / d)

    def bw(g):
        gz = np.where(zero, 0.0, g)
        if num.requires_grad:
            num._accumulate(gz / d)
        if den.requires_grad:
            den._accumulate(-gz * num.data / (d * d))

    return _make(out, (num, den), bw, "safe_div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def bw(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), bw, "relu")


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)
    shape = x.shape

    def bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), shape))

    return _make(np.asarray(out, dtype=np.float64), (x,), bw, "sum")


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=np.float64)

    def bw(g):
        x._accumulate(np.full(x.shape, float(g) / n))

    return _make(out, (x,), bw, "mean")


def dot_const(x: Tensor, weights) -> Tensor:
    """Scalar ``sum(x * weights)`` for a constant weight array."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ValueError(f"dot_const: shape mismatch {x.shape} vs {w.shape}")

    def bw(g):
        x._accumulate(float(g) * w)

    return _make(np.asarray(np.sum(x.data * w), dtype=np.float64), (x,), bw, "dot")


def take_channels(x: Tensor, index: Sequence[int]) -> Tensor:
    """Select entries along axis 0."""
    idx = np.asarray(index, dtype=np.intp)

    def bw(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _make(x.data[idx], (x,), bw, "take")


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack equally-shaped tensors along a new leading axis."""
    for t in xs[1:]:
        _check_same_shape(xs[0], t, "stack")

    def bw(g):
        for i, t in enumerate(xs):
            if t.requires_grad:
                t._accumulate(g[i])

    return _make(np.stack([t.data for t in xs]), tuple(xs), bw, "stack")


def softmax_channels(x: Tensor) -> Tensor:
    if x.ndim != 3 or x.shape[0] < 1:
        raise ValueError(f"softmax_channels expects [C,H,W] with C >= 1, got {x.shape}")
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=0, keepdims=True)

    def bw(g):
        x._accumulate(s * (g - np.sum(g * s, axis=0, keepdims=True)))

    return _make(s, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# convolution and normalisation


def _im2col(x: np.ndarray, kh: int, kw: int, dilation: int) -> np.ndarray:
    """[Cin,H,W] -> [Cin*kh*kw, H*W] with 'same' zero padding."""
    cin, h, w = x.shape
    ph = (kh - 1) // 2 * dilation
    pw = (kw - 1) // 2 * dilation
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((cin, kh, kw, h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i * dilation:i * dilation + h, j * dilation:j * dilation + w]
    return cols.reshape(cin * kh * kw, h * w)


def _conv_same(x: np.ndarray, kernel: np.ndarray, dilation: int) -> np.ndarray:
    cout, cin, kh, kw = kernel.shape
    _, h, w = x.shape
    cols = x.reshape(cin, h * w) if kh == kw == 1 else _im2col(x, kh, kw, dilation)
    return (kernel.reshape(cout, -1) @ cols).reshape(cout, h, w)


def conv2d(x: Tensor, kernel: Tensor, dilation: int = 1, bias: Tensor | None = None) -> Tensor:
    """Dilated 2D cross-correlation with size-preserving zero padding.

    ``x`` is [Cin,H,W], ``kernel`` is [Cout,Cin,kh,kw] with odd kh and kw.
    """
    if int(dilation) != dilation or dilation < 1:
        raise ValueError(f"conv2d: dilation must be a positive integer, got {dilation}")
    dilation = int(dilation)
    if x.ndim != 3:
        raise ValueError(f"conv2d: input must be [Cin,H,W], got {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must be [Cout,Cin,kh,kw], got {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel sizes must be odd, got {kh}x{kw}")
    if x.shape[0] != cin:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels but kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
    _, h, w = x.shape
    cols = x.data.reshape(cin, h * w) if kh == kw == 1 else _im2col(x.data, kh, kw, dilation)
    out = (kernel.data.reshape(cout, -1) @ cols).reshape(cout, h, w)
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(cout, h * w)
        if kernel.requires_grad:
            kernel._accumulate((g2 @ cols.T).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            # adjoint of a same-padded stride-1 correlation
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            x._accumulate(_conv_same(g, flipped, dilation))

    return _make(out, parents, bw, "conv2d")


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardisation over the spatial axes followed by an affine map."""
    if x.ndim != 3:
        raise ValueError(f"instance_norm expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h * w < 2:
        raise ValueError("instance_norm needs at least two spatial positions")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"instance_norm: scale/shift must have shape ({c},)")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    s = scale.data[:, None, None]
    out = s * xhat + shift.data[:, None, None]

    def bw(g):
        if scale.requires_grad:
            scale._accumulate(np.sum(g * xhat, axis=(1, 2)))
        if shift.requires_grad:
            shift._accumulate(np.sum(g, axis=(1, 2)))
        if x.requires_grad:
            gx = g * s
            m1 = gx.mean(axis=(1, 2), keepdims=True)
            m2 = np.mean(gx * xhat, axis=(1, 2), keepdims=True)
            x._accumulate(inv * (gx - m1 - xhat * m2))

    return _make(out, (x, scale, shift), bw, "instance_norm")


# ---------------------------------------------------------------------------
# finite-difference oracle


class GradCheckReport:
    """Per-element comparison of analytic and central-difference gradients."""

    def __init__(self, errors: dict[str, np.ndarray], non_finite: list[str], tol: float):
        self.errors = errors
        self.non_finite = non_finite
        self.tol = tol
        flat = np.concatenate([e.ravel() for e in errors.values()]) if errors else np.zeros(0)
        self.max_rel_error = float(flat.max()) if flat.size else 0.0
        self.mean_rel_error = float(flat.mean()) if flat.size else 0.0
        self.n_checked = int(flat.size)

    @property
    def passed(self) -> bool:
        return not self.non_finite and self.max_rel_error <= self.tol

    def __repr__(self) -> str:
        return (f"GradCheckReport(max={self.max_rel_error:.3e}, mean={self.mean_rel_error:.3e}, "
                f"n={self.n_checked}, passed={self.passed})")


def relative_error(analytic, numeric, floor: float = 1e-6):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from
    turning rounding noise into large relative errors."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    names: Iterable[str] | None = None,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn(*inputs)`` with central differences.

    With ``max_elements`` set, at most that many randomly chosen entries of each
    input are perturbed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    non_finite: list[str] = []
    if out.data.size != 1 or not np.isfinite(out.data).all():
        non_finite.append("output")
        return GradCheckReport({}, non_finite, tol)
    backward(out)
    errors: dict[str, np.ndarray] = {}
    with no_grad():
        for name, t in zip(names, inputs):
            analytic = t.grad if t.grad is not None else np.zeros(t.shape)
            if not np.isfinite(analytic).all():
                non_finite.append(name)
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            numeric = np.empty(idx.size)
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = fn(*inputs).item()
                flat[i] = orig - step
                fm = fn(*inputs).item()
                flat[i] = orig
                numeric[k] = (fp - fm) / (2.0 * step)
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    non_finite.append(f"{name}[{i}]")
            errors[name] = relative_error(analytic.reshape(-1)[idx], numeric, floor)
    return GradCheckReport(errors, non_finite, tol)
