"""Dense tensors with reverse-mode automatic differentiation on a linear tape.

Design notes
------------
* A :class:`Tensor` wraps a numpy float array. Arrays are treated as
  immutable once wrapped; all operations allocate fresh outputs.
* Differentiable operations executed while a :class:`Tape` is active append
  one backward record each. The tape is a linear log in execution order, so
  replaying it in reverse is a valid topological order of the graph.
* Gradients accumulate by summation into ``Tensor.grad``; a tape is
  consumable once per forward pass.
* Precision: training runs in float32, verification in float64. Ops keep
  the dtype of their inputs (numpy promotion rules apply when mixed).
* Randomness comes from :class:`Prng`, a thin wrapper over numpy's PCG64
  generator. PCG64 with a fixed 64-bit seed gives a bit-reproducible draw
  sequence, which is the reproducibility contract used everywhere.
* Image-like data uses N x C x H x W layout.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """A tensor acquired NaN or Inf values."""


_CHECK_FINITE = True


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily toggle NaN/Inf validation of op outputs (timing runs)."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    """A dense float array, optionally participating in the active tape.

    ``requires_grad`` marks trainable leaves. Tensors produced by taped
    operations carry a ``node_id`` (their index in the tape record) and are
    not leaves. A tensor with ``node_id is None`` that does not require
    gradients never receives one.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "is_leaf", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.is_leaf = True
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values, off any tape and never receiving gradients."""
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        return t

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Tape:
    """Ordered record of executed differentiable operations.

    Single-writer: at most one tape is active at a time. Entering the
    context activates recording; :func:`backward` replays the record in
    exact reverse and marks the tape consumed.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self._records: list[Callable[[], None]] = []
        self._leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise RuntimeError("another tape is already active")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None

    def __len__(self) -> int:
        return len(self._records)


def _recording(*tensors: Tensor) -> bool:
    t = Tape._active
    return t is not None and not t.consumed and any(x.requires_grad for x in tensors)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Sum `g` into `t.grad` (gradient accumulation is summation)."""
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def register(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Put `out` on the active tape. `backward_fn` receives d(loss)/d(out).

    Exposed so other modules (the warp sampler) can define taped primitives.
    """
    tape = Tape._active
    assert tape is not None
    out.requires_grad = True
    out.is_leaf = False
    out.node_id = len(tape._records)
    out._tape = tape
    for t in inputs:
        if t.requires_grad and t.is_leaf and id(t) not in tape._leaf_ids:
            tape._leaf_ids.add(id(t))
            tape._leaves.append(t)

    def run():
        if out.grad is not None:
            backward_fn(out.grad)

    tape._records.append(run)
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-replay the active tape from a scalar loss.

    Returns a map from each trainable leaf that participated in the tape to
    its gradient (zeros if the leaf did not influence the loss). The tape is
    consumed and cannot be replayed again.
    """
    tape = Tape._active
    if tape is None:
        raise RuntimeError("backward requires an active tape")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward")
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss._tape is not tape:
        raise ValueError("loss is detached from the active tape")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for record in reversed(tape._records):
        record()
    tape.consumed = True
    tape._records.clear()
    for t in tape._leaves:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return {t: t.grad for t in tape._leaves}


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# pointwise operations
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    # broadcasting is limited to scalar-with-tensor
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _accum_matched(t: Tensor, g: np.ndarray) -> None:
    # reduce the broadcast gradient back to a scalar operand
    if t.shape == () and g.shape != ():
        g = g.sum()
    accumulate_grad(t, g)


def _coerce(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))


def add(a: Tensor, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b)
    out = Tensor(a.data + b.data)
    if _recording(a, b):
        def bwd(g):
            if a.requires_grad:
                _accum_matched(a, g)
            if b.requires_grad:
                _accum_matched(b, g)
        register(out, (a, b), bwd)
    return out


def sub(a: Tensor, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b)
    out = Tensor(a.data - b.data)
    if _recording(a, b):
        def bwd(g):
            if a.requires_grad:
                _accum_matched(a, g)
            if b.requires_grad:
                _accum_matched(b, -g)
        register(out, (a, b), bwd)
    return out


def mul(a: Tensor, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b)
    out = Tensor(a.data * b.data)
    if _recording(a, b):
        def bwd(g):
            if a.requires_grad:
                _accum_matched(a, g * b.data)
            if b.requires_grad:
                _accum_matched(b, g * a.data)
        register(out, (a, b), bwd)
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)
    if _recording(x):
        def bwd(g):
            accumulate_grad(x, g * (2.0 * x.data))
        register(out, (x,), bwd)
    return out


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; the operand must be non-negative."""
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative value")
    y = np.sqrt(x.data)
    out = Tensor(y)
    if _recording(x):
        def bwd(g):
            accumulate_grad(x, g * (0.5 / y))
        register(out, (x,), bwd)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    if _recording(x):
        def bwd(g):
            accumulate_grad(x, g * (1.0 - y * y))
        register(out, (x,), bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if _recording(x):
        mask = x.data > 0
        def bwd(g):
            accumulate_grad(x, g * mask)
        register(out, (x,), bwd)
    return out


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the operand clamped at `floor` (guards saturated softmax)."""
    clamped = np.maximum(x.data, floor)
    out = Tensor(np.log(clamped))
    if _recording(x):
        def bwd(g):
            accumulate_grad(x, np.where(x.data >= floor, g / clamped, 0.0))
        register(out, (x,), bwd)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    if _recording(x):
        def bwd(g):
            accumulate_grad(x, g * c)
        register(out, (x,), bwd)
    return out


_POINTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "square": square,
    "sqrt": sqrt,
    "tanh": tanh,
    "relu": relu,
    "log": log,
    "scale": scale,
}


def pointwise(kind: str, *operands) -> Tensor:
    """Dispatch by name; kinds: add, sub, mul, square, sqrt, tanh, relu, log, scale."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# softmax / reductions / shape ops
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along `axis` (max subtraction)."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)
    if _recording(x):
        def bwd(g):
            dot = np.sum(g * y, axis=axis, keepdims=True)
            accumulate_grad(x, y * (g - dot))
        register(out, (x,), bwd)
    return out


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(sorted(a % ndim for a in axes))
    if any(a < 0 or a >= ndim for a in out):
        raise ValueError(f"axes {axes} invalid for ndim {ndim}")
    return out


def reduce(x: Tensor, kind: str, axes=None) -> Tensor:
    """Reduce over `axes` (all axes when None). kind: 'mean' or 'sum'."""
    if kind not in ("mean", "sum"):
        raise ValueError(f"unknown reduce kind {kind!r}")
    ax = _norm_axes(axes, x.data.ndim)
    n = 1
    for a in ax:
        n *= x.shape[a]
    if n == 0:
        raise ValueError("empty reduction")
    y = x.data.sum(axis=ax) if kind == "sum" else x.data.mean(axis=ax)
    out = Tensor(y)
    if _recording(x):
        keep = tuple(1 if i in ax else s for i, s in enumerate(x.shape))
        inv_n = 1.0 / n
        def bwd(g):
            gb = np.broadcast_to(g.reshape(keep), x.shape)
            accumulate_grad(x, gb if kind == "sum" else gb * inv_n)
        register(out, (x,), bwd)
    return out


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    return reduce(x, "mean", axes)


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    return reduce(x, "sum", axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along `axis`; backward splits the gradient back by segment."""
    if len(tensors) == 0:
        raise ValueError("concat of empty list")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != ndim or s[:axis] != ref[:axis] or s[axis + 1:] != ref[axis + 1:]:
            raise ValueError(f"incompatible shapes for concat: {tensors[0].shape} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _recording(*tensors):
        sizes = [t.shape[axis] for t in tensors]
        def bwd(g):
            offset = 0
            sl = [slice(None)] * ndim
            for t, s in zip(tensors, sizes):
                if t.requires_grad:
                    sl[axis] = slice(offset, offset + s)
                    accumulate_grad(t, g[tuple(sl)])
                offset += s
        register(out, tuple(tensors), bwd)
    return out


def forward_diff(x: Tensor, axis: int) -> Tensor:
    """Forward finite difference along `axis`, zero at the trailing border.

    d[..., i] = x[..., i+1] - x[..., i]; the adjoint is exact.
    """
    ndim = x.data.ndim
    axis = axis % ndim
    d = np.zeros_like(x.data)
    lead = [slice(None)] * ndim
    head, tail = lead.copy(), lead.copy()
    head[axis] = slice(0, -1)
    tail[axis] = slice(1, None)
    head, tail = tuple(head), tuple(tail)
    d[head] = x.data[tail] - x.data[head]
    out = Tensor(d)
    if _recording(x):
        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[tail] += g[head]
            gx[head] -= g[head]
            accumulate_grad(x, gx)
        register(out, (x,), bwd)
    return out


def subsample(x: Tensor, step: int) -> Tensor:
    """Keep every `step`-th pixel along H and W, starting at (0, 0).

    Composed with a stride-1 convolution this reproduces a strided
    convolution on the kept pixels while every op keeps an exact output
    size. The adjoint zero-stuffs the gradient.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    if x.data.ndim != 4:
        raise ValueError("subsample expects NCHW")
    out = Tensor(np.ascontiguousarray(x.data[:, :, ::step, ::step]))
    if _recording(x):
        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[:, :, ::step, ::step] = g
            accumulate_grad(x, gx)
        register(out, (x,), bwd)
    return out


def normalize_sum(x: Tensor, axis: int) -> Tensor:
    """Divide by the sum along `axis` so slices sum to one."""
    s = np.sum(x.data, axis=axis, keepdims=True)
    if np.any(s == 0):
        raise ValueError("normalize_sum over an all-zero slice")
    y = x.data / s
    out = Tensor(y)
    if _recording(x):
        def bwd(g):
            dot = np.sum(g * y, axis=axis, keepdims=True)
            accumulate_grad(x, (g - dot) / s)
        register(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp already padded: (N, C, Hp, Wp) -> (N, C*k*k, Ho*Wo)
    # filled by k*k strided slice copies, which beats gathering a 6-D view
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    he = (ho - 1) * stride + 1
    we = (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + he:stride, j:j + we:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with an OCkk kernel.

    The output size (H + 2*padding - k) / stride + 1 must divide exactly.
    Differentiable with respect to input, kernel and bias; the backward pass
    for the input is a transposed convolution built from the same im2col
    machinery, and the kernel gradient reuses the cached forward columns.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OCkk kernel")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if kh != kw:
        raise ValueError("kernel must be square")
    k = kh
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    if cw != c:
        raise ValueError(f"channel mismatch: input {c}, kernel {cw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} != ({o},)")
    if (h + 2 * padding - k) % stride or (wd + 2 * padding - k) % stride:
        raise ValueError("non-exact output size for conv2d")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("non-positive output size for conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = w.data.reshape(o, -1)
    y = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        y = y + bias.data.reshape(1, o, 1, 1)
    out = Tensor(y)
    operands = (x, w) if bias is None else (x, w, bias)
    if _recording(*operands):
        he = (ho - 1) * stride + 1
        we = (wo - 1) * stride + 1

        def bwd(g):
            if bias is not None and bias.requires_grad:
                accumulate_grad(bias, g.sum(axis=(0, 2, 3)))
            g_r = g.reshape(n, o, ho * wo)
            if w.requires_grad:
                gw = np.zeros((o, c * k * k), dtype=g.dtype)
                for b in range(n):
                    gw += g_r[b] @ cols[b].T
                accumulate_grad(w, gw.reshape(w.shape))
            if x.requires_grad:
                # col2im: scatter the column gradients back with k*k strided adds
                dcols = np.matmul(wmat.T, g_r).reshape(n, c, k, k, ho, wo)
                dxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + he:stride, j:j + we:stride] += dcols[:, :, i, j]
                dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
                accumulate_grad(x, dx)
        register(out, operands, bwd)
    return out


# ---------------------------------------------------------------------------
# bilinear upsampling
# ---------------------------------------------------------------------------

_UPSAMPLE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # align-corners mapping: out position i samples  i * (n_in-1) / (n_out-1)
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, n_in - 2)
    frac = pos - i0
    m[np.arange(n_out), i0] = (1.0 - frac).astype(dtype)
    m[np.arange(n_out), i0 + 1] += frac.astype(dtype)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor, align-corners convention.

    Output pixel (i, j) samples the input at
    (i * (H-1)/(H*factor-1), j * (W-1)/(W*factor-1)); the same convention
    as the warp sampler, where integer coordinates land exactly on pixels.
    Separable: implemented as two small matrix products, so the backward
    pass is the transposed pair and stays deterministic.
    """
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        out = Tensor(x.data)
        if _recording(x):
            def bwd(g):
                accumulate_grad(x, g)
            register(out, (x,), bwd)
        return out
    if x.data.ndim != 4:
        raise ValueError("upsample_bilinear expects NCHW")
    n, c, h, wd = x.shape
    key = (h, wd, factor, x.data.dtype.str)
    if key not in _UPSAMPLE_CACHE:
        _UPSAMPLE_CACHE[key] = (
            _interp_matrix(h, h * factor, x.data.dtype),
            _interp_matrix(wd, wd * factor, x.data.dtype),
        )
    ry, rx = _UPSAMPLE_CACHE[key]
    y = np.einsum("ij,ncjk->ncik", ry, x.data, optimize=True)
    y = y @ rx.T
    out = Tensor(y)
    if _recording(x):
        def bwd(g):
            gx = np.einsum("ji,ncjk->ncik", ry, g, optimize=True) @ rx
            accumulate_grad(x, gx)
        register(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for a fixed parameter list."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @staticmethod
    def for_params(params: Sequence[Tensor], lr: float = 1e-4) -> "AdamState":
        return AdamState(
            lr=lr,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place of the prior values."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValueError("parameter/gradient/state length mismatch")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# random numbers and initialization
# ---------------------------------------------------------------------------


class Prng:
    """Seeded PCG64 stream; identical seed implies a bit-identical sequence."""

    def __init__(self, seed: int, _state: dict | None = None):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        if _state is not None:
            self._gen.bit_generator.state = _state

    def normal(self, shape=(), std: float = 1.0, dtype=np.float32) -> np.ndarray:
        if std < 0:
            raise ValueError("std must be >= 0")
        return (self._gen.standard_normal(size=shape) * std).astype(dtype)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: str) -> "Prng":
        """Derive an independent child stream from (seed, key)."""
        digest = hashlib.sha256(f"{self.seed}:{key}".encode()).digest()
        return Prng(int.from_bytes(digest[:8], "little"))

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def init_normal(shape, std: float, prng: Prng, dtype=np.float32, requires_grad: bool = True) -> Tensor:
    """Seeded normal draw; std=0 gives zeros."""
    if std < 0:
        raise ValueError("std must be >= 0")
    return Tensor(prng.normal(shape, std, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between taped gradients and central differences.

    `fn` maps the input tensors to an output tensor. Non-scalar outputs are
    contracted against a fixed random projection so the full Jacobian action
    is exercised. Inputs should be float64; the relative error is
    |analytic - numeric| / max(1, |analytic|, |numeric|), maximized over all
    elements of all inputs.
    """
    proj_rng = Prng(seed ^ 0x9E3779B9)

    def scalar_fn() -> Tensor:
        out = fn(*inputs)
        if out.data.shape == ():
            return out
        return reduce_sum(mul(out, _projection(out.shape)))

    proj_cache: dict[tuple, Tensor] = {}

    def _projection(shape) -> Tensor:
        if shape not in proj_cache:
            proj_cache[shape] = Tensor(proj_rng.normal(shape, 1.0, dtype=np.float64))
        return proj_cache[shape]

    zero_grads(inputs)
    with Tape():
        loss = scalar_fn()
        backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(scalar_fn().data)
            flat[i] = orig - h
            fm = float(scalar_fn().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            an = float(a.reshape(-1)[i])
            err = abs(an - num) / max(1.0, abs(an), abs(num))
            worst = max(worst, err)
    return worst
