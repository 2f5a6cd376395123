"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Design: define-by-run. Operations executed while a Tape is active record
one node each (output, inputs, backward rule). ``backward`` replays the
nodes in reverse, which is a valid topological order because nodes are
appended in execution order.

Conventions fixed here and relied on elsewhere:
  * everything is float64;
  * ReLU passes gradient only where the input is strictly positive;
  * conv2d is cross-correlation (no kernel flip);
  * ``backward`` overwrites ``.grad`` slots, it does not accumulate
    across calls.

Tensors are immutable during a forward/backward pass; a Tape and the
tensors it references belong to a single thread. Separate tapes on
separate threads are independent.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "ParameterSet",
    "as_tensor",
    "add",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "clip01",
    "reshape",
    "mean_spatial",
    "sum_all",
    "mean_all",
    "scatter_rows",
    "softmax_cross_entropy",
    "stable_softmax",
    "backward",
    "finite_diff_check",
]


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericsError("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.out = out
        self.inputs = inputs
        # backward_fn(upstream_grad) -> iterable of (input_tensor, grad_contrib)
        self.backward_fn = backward_fn


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Recorded forward pass. Use as a context manager around the ops."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._output_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self.nodes.append(_Node(out, inputs, backward_fn))
        self._output_ids.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._output_ids


def _make_op(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create an op output, recording it when a tape is active."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make_op(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _make_op(out, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def bw(g):
        # subgradient at exactly 0 is 0
        return ((x, g * (x.data > 0.0)),)

    return _make_op(out, (x,), bw)


def clip01(x) -> Tensor:
    """Clamp into the valid pixel range [0, 1].

    Gradient passes through wherever the value was not clipped.
    """
    x = as_tensor(x)
    out = np.clip(x.data, 0.0, 1.0)

    def bw(g):
        mask = (x.data >= 0.0) & (x.data <= 1.0)
        return ((x, g * mask),)

    return _make_op(out, (x,), bw)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bw(g):
        return ((x, g.reshape(x.shape)),)

    return _make_op(out, (x,), bw)


def mean_spatial(x) -> Tensor:
    """Global average pool: mean over the two trailing axes of (B, C, H, W)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"mean_spatial expects a 4-d tensor, got {x.shape}")
    out = x.data.mean(axis=(2, 3))
    count = x.shape[2] * x.shape[3]

    def bw(g):
        gx = np.broadcast_to((g / count)[:, :, None, None], x.shape)
        return ((x, gx),)

    return _make_op(out, (x,), bw)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum())

    def bw(g):
        return ((x, np.broadcast_to(g, x.shape)),)

    return _make_op(out, (x,), bw)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean())
    n = x.size

    def bw(g):
        return ((x, np.broadcast_to(g / n, x.shape)),)

    return _make_op(out, (x,), bw)


def scatter_rows(parts: Sequence[Tensor], positions: Sequence[np.ndarray], total: int) -> Tensor:
    """Assemble ``total`` rows from parts placed at the given row positions.

    Every row index in [0, total) must be covered exactly once. The
    backward rule routes each output row's gradient back to the part it
    came from, so this is the differentiable inverse of a row partition.
    """
    parts = [as_tensor(p) for p in parts]
    if len(parts) != len(positions):
        raise ShapeError("scatter_rows: parts and positions length mismatch")
    row_shape = parts[0].shape[1:]
    out = np.empty((total,) + row_shape, dtype=np.float64)
    covered = np.zeros(total, dtype=bool)
    for part, pos in zip(parts, positions):
        if part.shape[1:] != row_shape:
            raise ShapeError("scatter_rows: inconsistent row shapes")
        out[pos] = part.data
        covered[pos] = True
    if not covered.all():
        raise ShapeError("scatter_rows: positions do not cover every row")

    def bw(g):
        return tuple((part, g[pos]) for part, pos in zip(parts, positions))

    return _make_op(out, tuple(parts), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make_op(out, (a, b), bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, xp_shape, kh, kw, stride, ho, wo) -> np.ndarray:
    b, c = xp_shape[:2]
    dcols6 = dcols.reshape(b, c, kh, kw, ho, wo)
    dxp = np.zeros(xp_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols6[:, :, i, j]
    return dxp


def conv2d(x, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``kernels`` is
    (C_out, C_in, kh, kw). Output spatial sizes must divide exactly:
    (H + 2*padding - kh) / stride + 1 has to be an integer, otherwise the
    layer configuration is rejected.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects 3/4-d input and 4-d kernels, got {x.shape} and {kernels.shape}")
    b, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernels.shape
    if cin != kcin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d invalid stride/padding: {stride}, {padding}")
    num_h, num_w = h + 2 * padding - kh, w + 2 * padding - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ConfigError(
            f"conv2d output size not integral for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    ho, wo = num_h // stride + 1, num_w // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernels.data.reshape(cout, cin * kh * kw)
    out = np.matmul(kmat, cols).reshape(b, cout, ho, wo)
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        gmat = gd.reshape(b, cout, ho * wo)
        dk = np.einsum("bol,bkl->ok", gmat, cols).reshape(kernels.shape)
        dcols = np.matmul(kmat.T, gmat)
        dxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return ((x, dx[0] if squeeze else dx), (kernels, dk))

    return _make_op(out, (x, kernels), bw)


# ---------------------------------------------------------------------------
# loss


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a (B, N) array, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, N) logits, got {logits.shape}")
    b, n = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {b}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ValueError(f"label out of range [0, {n})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    rows = np.arange(b)
    out = np.asarray(-logp[rows, labels].mean())

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return ((logits, grad * (g / b)),)

    return _make_op(out, (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable on ``tape``.

    Overwrites previous gradients. The loss must be a scalar produced by
    an operation recorded on this tape.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for tensor, contrib in node.backward_fn(g):
            if not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = np.array(contrib, dtype=np.float64, copy=True)
                tensors[key] = tensor

    for node in tape.nodes:
        for tensor in node.inputs:
            if tensor.requires_grad and id(tensor) not in grads:
                grads[id(tensor)] = np.zeros_like(tensor.data)
                tensors[id(tensor)] = tensor

    for key, tensor in tensors.items():
        if tensor.requires_grad:
            tensor.grad = grads[key]


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Compare analytic gradient of ``f`` at ``x`` against central differences.

    Returns the max elementwise relative error, with denominator
    max(|analytic|, |numeric|, 1e-8). ``f`` must be deterministic.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
        backward(tape, loss)
    analytic = probe.grad
    assert analytic is not None

    flat = x.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        hi = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - h
        lo = f(Tensor(bumped.reshape(x.shape))).item()
        numeric[i] = (hi - lo) / (2.0 * h)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


# ---------------------------------------------------------------------------
# named parameters


class ParameterSet:
    """Named map of trainable tensors; iteration is sorted by identifier."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require grad")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def total_size(self) -> int:
        return sum(t.size for _, t in self.items())

    def to_vector(self) -> np.ndarray:
        """Concatenate all parameters, sorted by name, into one flat vector."""
        if not self._params:
            return np.empty(0, dtype=np.float64)
        return np.concatenate([t.data.reshape(-1) for _, t in self.items()])

    def load_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.total_size():
            raise ValueError(f"parameter vector length {vec.size} != expected {self.total_size()}")
        offset = 0
        for _, t in self.items():
            t.data = vec[offset : offset + t.size].reshape(t.shape).copy()
            offset += t.size
