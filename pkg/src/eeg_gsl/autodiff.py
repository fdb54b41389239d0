"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a numpy float32 array,
and every differentiable operation appends an adjoint closure to the active
``Tape``. ``backward`` replays the tape once, in reverse execution order,
accumulating gradients into every participating tensor.

Storage is float32 throughout; reductions (sum, mean, norms, batch-norm
statistics) accumulate in float64 before casting back, which keeps drift
bounded in long convolutions. Convolution is direct, O(L * K) per output
channel; there is no FFT path.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "grad_check",
    "parameter",
    "constant",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scalar_mul",
    "pow_scalar",
    "exp",
    "log",
    "relu",
    "gelu",
    "row_softmax",
    "l2_norm",
    "l2_normalize",
    "tsum",
    "tmean",
    "concat",
    "narrow",
    "repeat_interleave",
    "conv1d",
    "max_pool1d",
    "batch_norm",
    "dropout",
    "cross_entropy_with_logits",
    "save_tensors",
    "load_tensors",
]

_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_STORAGE_DTYPE = np.float32


class default_dtype:
    """Temporarily override tensor storage dtype.

    The pipeline always runs float32; grad_check evaluates its probe
    function under float64 so central differences are not drowned by
    storage rounding.
    """

    def __init__(self, dtype):
        self.dtype = dtype
        self._saved = None

    def __enter__(self):
        global _STORAGE_DTYPE
        self._saved = _STORAGE_DTYPE
        _STORAGE_DTYPE = self.dtype
        return self

    def __exit__(self, exc_type, exc, tb):
        global _STORAGE_DTYPE
        _STORAGE_DTYPE = self._saved


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; names the op and shapes."""


def _shape_fail(op: str, *shapes) -> None:
    raise ShapeError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """A dense float32 array, optionally participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_STORAGE_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        nm = f", name={self.name!r}" if self.name else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{rg}{nm})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


class Tape:
    """Ordered record of differentiable ops.

    Execution order is a topological order by construction, so a single
    reverse sweep visits each entry exactly once with its output gradient
    fully accumulated.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: Sequence[Tensor], adjoint: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append((out, adjoint))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss over the active tape.

    Populates .grad on every tape participant with requires_grad, then
    resets the tape.
    """
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward: no active Tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, adjoint in reversed(tape.entries):
        if out.grad is not None:
            adjoint(out.grad)
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        _shape_fail("add", a.shape, b.shape)

    def adjoint(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), adjoint)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        _shape_fail("sub", a.shape, b.shape)

    def adjoint(g):
        _accum(a, g)
        _accum(b, -g)

    return _record(out, (a, b), adjoint)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        _shape_fail("mul", a.shape, b.shape)

    def adjoint(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), adjoint)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data / b.data)
    except ValueError:
        _shape_fail("div", a.shape, b.shape)

    def adjoint(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _record(out, (a, b), adjoint)


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)

    def adjoint(g):
        _accum(x, -g)

    return _record(out, (x,), adjoint)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)

    def adjoint(g):
        _accum(x, g * c)

    return _record(out, (x,), adjoint)


def pow_scalar(x: Tensor, p: float) -> Tensor:
    p = float(p)
    out = Tensor(x.data ** p)

    def adjoint(g):
        _accum(x, g * p * (x.data ** (p - 1.0)))

    return _record(out, (x,), adjoint)


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))

    def adjoint(g):
        _accum(x, g * out.data)

    return _record(out, (x,), adjoint)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def adjoint(g):
        _accum(x, g / x.data)

    return _record(out, (x,), adjoint)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def adjoint(g):
        _accum(x, g * (x.data > 0.0))

    return _record(out, (x,), adjoint)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with the erf form (no tanh approximation)."""
    phi = 0.5 * (1.0 + erf(x.data.astype(np.float64) * _SQRT1_2))
    out = Tensor(x.data * phi)

    def adjoint(g):
        xd = x.data.astype(np.float64)
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        _accum(x, g * (phi + xd * pdf))

    return _record(out, (x,), adjoint)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        _shape_fail("matmul", a.shape, b.shape)
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError:
        _shape_fail("matmul", a.shape, b.shape)

    def adjoint(g):
        _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _record(out, (a, b), adjoint)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        out = Tensor(np.swapaxes(x.data, -1, -2))

        def adjoint(g):
            _accum(x, np.swapaxes(g, -1, -2))

    else:
        inv = np.argsort(axes)
        out = Tensor(np.transpose(x.data, axes))

        def adjoint(g):
            _accum(x, np.transpose(g, inv))

    return _record(out, (x,), adjoint)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis; each output row sums to 1."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))

    def adjoint(g):
        y = out.data
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return _record(out, (x,), adjoint)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64))

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _record(out, (x,), adjoint)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64))
    n = x.data.size // max(out.data.size, 1)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape) / n)

    return _record(out, (x,), adjoint)


def l2_norm(x: Tensor) -> Tensor:
    """Frobenius norm over the whole tensor, as a scalar tensor."""
    n = np.sqrt(np.sum(x.data.astype(np.float64) ** 2))
    out = Tensor(n)

    def adjoint(g):
        denom = max(float(out.data), 1e-12)
        _accum(x, g * x.data / denom)

    return _record(out, (x,), adjoint)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along `axis` to unit L2 norm."""
    sq = np.sum(x.data.astype(np.float64) ** 2, axis=axis, keepdims=True)
    inv = (1.0 / np.sqrt(sq + eps)).astype(x.data.dtype)
    out = Tensor(x.data * inv)

    def adjoint(g):
        y = out.data
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, (g - y * dot) * inv)

    return _record(out, (x,), adjoint)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    except ValueError:
        _shape_fail("concat", *[x.shape for x in xs])
    sizes = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def adjoint(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(x, g[tuple(idx)])

    return _record(out, tuple(xs), adjoint)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    out = Tensor(x.data[tuple(idx)])

    def adjoint(g):
        full = np.zeros_like(x.data)
        full[tuple(idx)] = g
        _accum(x, full)

    return _record(out, (x,), adjoint)


def repeat_interleave(x: Tensor, repeats: int, axis: int = -1) -> Tensor:
    """Nearest-neighbour upsampling: each element repeated `repeats` times."""
    out = Tensor(np.repeat(x.data, repeats, axis=axis))
    ax = axis % x.ndim

    def adjoint(g):
        shape = list(x.data.shape)
        shape[ax:ax + 1] = [shape[ax], repeats]
        _accum(x, g.reshape(shape).sum(axis=ax + 1))

    return _record(out, (x,), adjoint)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def adjoint(g):
        _accum(x, g.reshape(x.data.shape))

    return _record(out, (x,), adjoint)


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------

def conv1d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: tuple[int, int] = (0, 0),
    groups: int = 1,
) -> Tensor:
    """Direct 1D convolution (cross-correlation), O(L * K) per channel pair.

    x: (N, C_in, L), w: (C_out, C_in // groups, K), optional bias (C_out,).
    `pad` is (left, right) zero padding; causal layers pass (K-1, 0).
    """
    if x.ndim != 3 or w.ndim != 3:
        _shape_fail("conv1d", x.shape, w.shape)
    N, Cin, L = x.shape
    Cout, Cin_g, K = w.shape
    if Cin % groups or Cout % groups or Cin_g != Cin // groups:
        _shape_fail("conv1d(groups=%d)" % groups, x.shape, w.shape)
    pl, pr = pad
    Lp = L + pl + pr
    if Lp < K:
        _shape_fail("conv1d: kernel longer than padded input", (Lp,), (K,))
    Lout = (Lp - K) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, K, axis=-1)[:, :, ::stride, :]

    if groups == Cin and Cout == Cin:
        # depthwise path: one kernel per channel
        wk = w.data[:, 0, :]
        y = np.einsum("nclk,ck->ncl", windows, wk, optimize=True)
    elif groups == 1:
        y = np.einsum("nilk,oik->nol", windows, w.data, optimize=True)
    else:
        y = np.empty((N, Cout, Lout), dtype=x.data.dtype)
        og, ig = Cout // groups, Cin // groups
        for g_i in range(groups):
            y[:, g_i * og:(g_i + 1) * og] = np.einsum(
                "nilk,oik->nol",
                windows[:, g_i * ig:(g_i + 1) * ig],
                w.data[g_i * og:(g_i + 1) * og],
                optimize=True,
            )
    if b is not None:
        if b.shape != (Cout,):
            _shape_fail("conv1d bias", b.shape, (Cout,))
        y = y + b.data[None, :, None]
    out = Tensor(y)

    def adjoint(g):
        og, ig = Cout // groups, Cin // groups
        if w.requires_grad:
            if groups == Cin and Cout == Cin:
                gw = np.einsum("ncl,nclk->ck", g, windows, optimize=True)[:, None, :]
            elif groups == 1:
                gw = np.einsum("nol,nilk->oik", g, windows, optimize=True)
            else:
                gw = np.empty_like(w.data)
                for g_i in range(groups):
                    gw[g_i * og:(g_i + 1) * og] = np.einsum(
                        "nol,nilk->oik",
                        g[:, g_i * og:(g_i + 1) * og],
                        windows[:, g_i * ig:(g_i + 1) * ig],
                        optimize=True,
                    )
            _accum(w, gw)
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2), dtype=np.float64))
        if x.requires_grad:
            # scatter each kernel tap back onto the padded input
            gxp = np.zeros((N, Cin, Lp), dtype=x.data.dtype)
            if groups == Cin and Cout == Cin:
                u = g[:, :, :, None] * w.data[None, :, 0, None, :]  # (N,C,Lout,K)
            elif groups == 1:
                u = np.einsum("nol,oik->nilk", g, w.data, optimize=True)
            else:
                u = np.empty((N, Cin, Lout, K), dtype=x.data.dtype)
                for g_i in range(groups):
                    u[:, g_i * ig:(g_i + 1) * ig] = np.einsum(
                        "nol,oik->nilk",
                        g[:, g_i * og:(g_i + 1) * og],
                        w.data[g_i * og:(g_i + 1) * og],
                        optimize=True,
                    )
            for k in range(K):
                gxp[:, :, k:k + stride * Lout:stride] += u[:, :, :, k]
            _accum(x, gxp[:, :, pl:pl + L])

    return _record(out, (x, w) + ((b,) if b is not None else ()), adjoint)


def max_pool1d(x: Tensor, width: int) -> Tensor:
    """Non-overlapping max pooling (kernel = stride = width); tail dropped."""
    if x.ndim != 3:
        _shape_fail("max_pool1d", x.shape)
    N, C, L = x.shape
    Lout = L // width
    if Lout == 0:
        _shape_fail("max_pool1d: input shorter than pool width", (L,), (width,))
    xv = x.data[:, :, :Lout * width].reshape(N, C, Lout, width)
    arg = xv.argmax(axis=-1)
    out = Tensor(xv.max(axis=-1))

    def adjoint(g):
        gx = np.zeros((N, C, Lout, width), dtype=x.data.dtype)
        np.put_along_axis(gx, arg[..., None], g[..., None], axis=-1)
        _accum(x, np.pad(gx.reshape(N, C, Lout * width), ((0, 0), (0, 0), (0, L - Lout * width))))

    return _record(out, (x,), adjoint)


class BatchNormState:
    """Running statistics buffer for one batch-norm layer."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.count = 0


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, C, L) or (N, C).

    Train mode normalizes by batch statistics (float64 accumulation) and
    updates `state`; eval mode is a deterministic affine map from `state`.
    """
    if x.ndim == 2:
        axes = (0,)
    elif x.ndim == 3:
        axes = (0, 2)
    else:
        _shape_fail("batch_norm", x.shape)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        _shape_fail("batch_norm params", gamma.shape, (C,))
    expand = (None, slice(None)) + (None,) * (x.ndim - 2)

    dt = x.data.dtype
    if train:
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        state.mean = ((1 - momentum) * state.mean + momentum * mu).astype(np.float32)
        state.var = ((1 - momentum) * state.var + momentum * var).astype(np.float32)
        state.count += 1
        inv = (1.0 / np.sqrt(var + eps)).astype(dt)
        xhat = (x.data - mu.astype(dt)[expand]) * inv[expand]
        out = Tensor(xhat * gamma.data[expand] + beta.data[expand])
        m = x.data.size // C

        def adjoint(g):
            _accum(gamma, (g * xhat).sum(axis=axes, dtype=np.float64))
            _accum(beta, g.sum(axis=axes, dtype=np.float64))
            if x.requires_grad:
                gh = g * gamma.data[expand]
                t1 = gh.sum(axis=axes, keepdims=True, dtype=np.float64)
                t2 = (gh * xhat).sum(axis=axes, keepdims=True, dtype=np.float64)
                _accum(x, inv[expand] * (gh - (t1 + xhat * t2) / m))

    else:
        inv = (1.0 / np.sqrt(state.var.astype(np.float64) + eps)).astype(dt)
        scale = gamma.data * inv
        shift = beta.data - state.mean.astype(dt) * scale
        out = Tensor(x.data * scale[expand] + shift[expand])

        def adjoint(g):
            _accum(gamma, (g * (x.data - state.mean[expand]) * inv[expand]).sum(axis=axes, dtype=np.float64))
            _accum(beta, g.sum(axis=axes, dtype=np.float64))
            if x.requires_grad:
                _accum(x, g * scale[expand])

    return _record(out, (x, gamma, beta), adjoint)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; identity when rate == 0 or in eval mode.

    The mask is drawn from the caller's seeded stream so runs replay
    identically for a given seed.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        out = Tensor(x.data)

        def adjoint(g):
            _accum(x, g)

        return _record(out, (x,), adjoint)

    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    out = Tensor(x.data * keep)

    def adjoint(g):
        _accum(x, g * keep)

    return _record(out, (x,), adjoint)


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross entropy; labels are integer class indices (N,)."""
    if logits.ndim != 2:
        _shape_fail("cross_entropy_with_logits", logits.shape)
    labels = np.asarray(labels)
    N, K = logits.shape
    if labels.shape != (N,):
        _shape_fail("cross_entropy_with_logits labels", labels.shape, (N,))
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(N), labels]
    out = Tensor(np.mean(lse - picked))

    def adjoint(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(N), labels] -= 1.0
        _accum(logits, (float(g) / N) * p)

    return _record(out, (logits,), adjoint)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    f must map x to a scalar Tensor. The probe function is evaluated under
    float64 storage so differences are accumulated in float64: at h=1e-3 a
    float32 forward would drown the difference in rounding. Per coordinate
    the error is |analytic - fd| / (|fd| + eps). Non-finite values raise.
    """
    with default_dtype(np.float64):
        x = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True, name=x.name)
        with Tape():
            y = f(x)
            if y.data.size != 1:
                raise ShapeError(f"grad_check: f must be scalar-valued, got {y.shape}")
            backward(y)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.astype(np.float64)
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError("grad_check: non-finite analytic gradient")

        flat = x.data.reshape(-1)
        worst = 0.0
        eps = 1e-8
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x.data)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x.data)).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"grad_check: non-finite f at coordinate {i}")
            fd = (fp - fm) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - fd) / (abs(fd) + eps)
            worst = max(worst, float(err))
    return worst


# ---------------------------------------------------------------------------
# serialization: JSON header line + little-endian float32 raw buffer
# ---------------------------------------------------------------------------

def save_tensors(path, named: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float32 arrays: optional file meta line, then one
    '{"shape": [...], "name": "..."}' header line + raw buffer per tensor."""
    with open(path, "wb") as fh:
        if meta is not None:
            fh.write((json.dumps({"meta": meta}, sort_keys=True) + "\n").encode())
        for name in named:
            arr = np.ascontiguousarray(named[name], dtype="<f4")
            header = json.dumps({"shape": list(arr.shape), "name": name}) + "\n"
            fh.write(header.encode())
            fh.write(arr.tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of save_tensors; returns (name -> array, file meta)."""
    named: dict[str, np.ndarray] = {}
    meta: dict = {}
    with open(path, "rb") as fh:
        first = True
        while True:
            line = fh.readline()
            if not line:
                break
            header = json.loads(line.decode())
            if first and "meta" in header and "shape" not in header:
                meta = header["meta"]
                first = False
                continue
            first = False
            shape = tuple(header["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise IOError(f"{path}: truncated tensor {header['name']!r}")
            named[header["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return named, meta
