"""Reverse-mode tensor engine.

Dense float64 arrays with forward evaluation and exact analytic gradients.
Primitives executed inside a ``with Tape() as tape:`` block record onto the
tape in creation order (which is a topological order); ``tape.backward(loss)``
walks the record in exact reverse order and accumulates each operand's
gradient over all of its uses. Outside a tape, primitives run forward-only.

All math is 64-bit. There is no graph optimization, no higher-order
differentiation, and no GPU path.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeMismatchError

Array = np.ndarray


class Tensor:
    """A float64 array with an optional gradient buffer of identical shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, root: Tensor) -> None:
        """Seed ``root`` (a scalar) with gradient 1 and replay the tape in reverse."""
        if root.data.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        root.grad = np.ones_like(root.data)
        for out, backward_fn in reversed(self._nodes):
            if out.grad is not None:
                backward_fn()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accumulate(t: Tensor, g: Array) -> None:
    # Copy on first write: several ops hand the same array to multiple parents.
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _make(data: Array, parents: Sequence[Tensor], backward_fn: Callable[[], None] | None) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    tape = _active_tape()
    if tape is not None and out.requires_grad and backward_fn is not None:
        tape._nodes.append((out, backward_fn))
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    out = _make(data, (a, b), lambda: _add_backward(a, b, out))
    return out


def _add_backward(a: Tensor, b: Tensor, out: Tensor) -> None:
    if a.requires_grad:
        _accumulate(a, _unbroadcast(out.grad, a.shape))
    if b.requires_grad:
        _accumulate(b, _unbroadcast(out.grad, b.shape))


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatchError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    out = _make(data, (a, b), lambda: _sub_backward(a, b, out))
    return out


def _sub_backward(a: Tensor, b: Tensor, out: Tensor) -> None:
    if a.requires_grad:
        _accumulate(a, _unbroadcast(out.grad, a.shape))
    if b.requires_grad:
        _accumulate(b, _unbroadcast(-out.grad, b.shape))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    out = _make(data, (a, b), lambda: _mul_backward(a, b, out))
    return out


def _mul_backward(a: Tensor, b: Tensor, out: Tensor) -> None:
    if a.requires_grad:
        _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
    if b.requires_grad:
        _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))


def square(x: Tensor) -> Tensor:
    x = _lift(x)
    out = _make(x.data * x.data, (x,), lambda: _accumulate(x, 2.0 * x.data * out.grad))
    return out


def log(x: Tensor) -> Tensor:
    """Natural logarithm. Values must be positive for a finite result."""
    x = _lift(x)
    out = _make(np.log(x.data), (x,), lambda: _accumulate(x, out.grad / x.data))
    return out


def relu(x: Tensor) -> Tensor:
    """max(x, 0). Subgradient at 0 is 0."""
    x = _lift(x)
    out = _make(np.maximum(x.data, 0.0), (x,), lambda: _accumulate(x, (x.data > 0.0) * out.grad))
    return out


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _lift(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    out = _make(data, (x,), backward)
    return out


def mean(x: Tensor) -> Tensor:
    """Arithmetic mean over all entries (composed from sum and mul)."""
    x = _lift(x)
    return mul(sum(x), Tensor(1.0 / x.size))


def softmax(x: Tensor) -> Tensor:
    """Normalized exponentials along the last axis.

    Computed with max-subtraction so arbitrarily large logits stay finite;
    the result is shift-invariant up to floating rounding.
    """
    x = _lift(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward():
        g = out.grad
        _accumulate(x, (g - (g * s).sum(axis=-1, keepdims=True)) * s)

    out = _make(s, (x,), backward)
    return out


def vector_norm(x: Tensor) -> Tensor:
    """Per-row Euclidean norm of a 2-D tensor: (N, D) -> (N,).

    Subgradient at the origin is 0.
    """
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"vector_norm: expected a 2-D tensor, got shape {x.shape}")
    n = np.sqrt((x.data * x.data).sum(axis=1))

    def backward():
        safe = np.where(n > 0.0, n, 1.0)
        scale = np.where(n > 0.0, out.grad / safe, 0.0)
        _accumulate(x, scale[:, None] * x.data)

    out = _make(n, (x,), backward)
    return out


def take_rows(x: Tensor, index: Array) -> Tensor:
    """Select rows of a 2-D tensor by integer index; gradients scatter-add back."""
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"take_rows: expected a 2-D tensor, got shape {x.shape}")
    index = np.asarray(index, dtype=np.intp)

    def backward():
        g = np.zeros_like(x.data)
        np.add.at(g, index, out.grad)
        _accumulate(x, g)

    out = _make(x.data[index], (x,), backward)
    return out


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product: (N, K) @ (K, M) -> (N, M)."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ out.grad)

    out = _make(a.data @ b.data, (a, b), backward)
    return out


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 1-D cross-correlation (no kernel flip).

    x: (N, C_in, L), w: (C_out, C_in, K); zero padding on both ends;
    output length floor((L + 2*padding - K) / stride) + 1.
    """
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeMismatchError(f"conv1d: expected 3-D input and weight, got {x.shape} and {w.shape}")
    n, cin, length = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ShapeMismatchError(f"conv1d: input shape {x.shape} has {cin} channels but weight shape {w.shape} expects {cin_w}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv1d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    padded_len = length + 2 * padding
    if padded_len < k:
        raise ShapeMismatchError(f"conv1d: kernel {w.shape} longer than padded input {x.shape} (padding {padding})")
    l_out = (padded_len - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    # im2col: one BLAS matmul instead of a python loop over positions
    cols = windows.transpose(0, 2, 1, 3).reshape(n * l_out, cin * k)
    data = (cols @ w.data.reshape(cout, cin * k).T).reshape(n, l_out, cout).transpose(0, 2, 1)

    def backward():
        go = out.grad  # (N, C_out, L_out)
        go_mat = go.transpose(0, 2, 1).reshape(n * l_out, cout)
        if w.requires_grad:
            gw = (go_mat.T @ cols).reshape(cout, cin, k)
            _accumulate(w, gw)
        if x.requires_grad:
            # one full-size gemm back to column space, then overlap-add the
            # k kernel offsets into the padded input
            gcols = (go_mat @ w.data.reshape(cout, cin * k)).reshape(n, l_out, cin, k)
            gxp = np.zeros((n, cin, padded_len))
            for j in range(k):
                gxp[:, :, j:j + stride * l_out:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            _accumulate(x, gxp[:, :, padding:padding + length] if padding else gxp)

    out = _make(data, (x, w), backward)
    return out


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the temporal axis: (N, C, L) -> (N, C)."""
    x = _lift(x)
    if x.data.ndim != 3:
        raise ShapeMismatchError(f"global_average_pool: expected a 3-D tensor, got shape {x.shape}")
    length = x.shape[2]

    def backward():
        _accumulate(x, np.broadcast_to(out.grad[:, :, None] / length, x.shape))

    out = _make(x.data.mean(axis=2), (x,), backward)
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running per-channel statistics, updated in training mode only.

    The running variance is the biased (population) batch statistic, the same
    estimator used to normalize each training batch.
    """

    running_mean: Array
    running_var: Array

    @classmethod
    def initial(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over a (N, C, L) tensor.

    Training mode normalizes with the current batch's mean/variance (so the
    output never depends on the running buffers) and folds those statistics
    into ``state``. Eval mode is a deterministic affine map using ``state``.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if x.data.ndim != 3:
        raise ShapeMismatchError(f"batch_norm: expected a 3-D tensor, got shape {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeMismatchError(
            f"batch_norm: input shape {x.shape} needs ({channels},) scale/shift, got {gamma.shape} and {beta.shape}")

    if training:
        axes = (0, 2)
        m = x.shape[0] * x.shape[2]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mu
        state.running_var = (1.0 - momentum) * state.running_var + momentum * var
    else:
        mu = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * inv_std[None, :, None]
    data = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward():
        go = out.grad
        if gamma.requires_grad:
            _accumulate(gamma, (go * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            _accumulate(beta, go.sum(axis=(0, 2)))
        if x.requires_grad:
            dxhat = go * gamma.data[None, :, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
                gx = (dxhat - s1 / m - xhat * s2 / m) * inv_std[None, :, None]
            else:
                gx = dxhat * inv_std[None, :, None]
            _accumulate(x, gx)

    out = _make(data, (x, gamma, beta), backward)
    return out


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor],
               epsilon: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued ``f`` against central differences.

    Returns max over all coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in [1e-7, 1e-3], got {epsilon}")
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()

    with Tape() as tape:
        out = f(*tensors)
        tape.backward(out)

    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(f(*tensors).data)
            flat[i] = orig - epsilon
            f_minus = float(f(*tensors).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

# Layout (all integers little-endian): magic, uint16 version, uint32 tensor
# count, then per tensor: uint16 name length, utf-8 name, uint8 ndim,
# uint32 dims, float64 little-endian values in row-major order.
TENSOR_FILE_MAGIC = b"OSTN"
TENSOR_FILE_VERSION = 1


def write_tensors(fh: BinaryIO, tensors: dict[str, Array]) -> None:
    fh.write(TENSOR_FILE_MAGIC)
    fh.write(struct.pack("<HI", TENSOR_FILE_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensors(fh: BinaryIO) -> dict[str, Array]:
    magic = fh.read(4)
    if magic != TENSOR_FILE_MAGIC:
        raise ValueError(f"not a tensor checkpoint (magic {magic!r})")
    version, count = struct.unpack("<HI", fh.read(6))
    if version != TENSOR_FILE_VERSION:
        raise ValueError(f"unsupported tensor checkpoint version {version}")
    tensors: dict[str, Array] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        n_values = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(fh.read(8 * n_values), dtype="<f8").astype(np.float64)
        tensors[name] = values.reshape(shape)
    return tensors


def save_tensors(path, tensors: dict[str, Array]) -> None:
    with open(path, "wb") as fh:
        write_tensors(fh, tensors)


def load_tensors(path) -> dict[str, Array]:
    with open(path, "rb") as fh:
        return read_tensors(fh)
