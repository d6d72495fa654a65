"""Dense tensors with reverse-mode differentiation.

Small by design: row-major NumPy storage, explicit shape checks on every op,
no broadcasting beyond the trailing-dim bias add. Float32 is the working
precision; float64 is used for gradient checking. The hot kernels (softmax,
layernorm, gelu, rope, masked attention) dispatch to the compiled backend
when it is available, NumPy otherwise; dense matmul always goes to BLAS.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

from ..errors import GradCheckError, ShapeError
from .kernels import active as _k

FLOAT32 = np.float32
FLOAT64 = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable recording of backward closures inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A shaped float array plus an optional gradient slot.

    The data array is C-contiguous float32 or float64 and treated as
    immutable once the tensor participates in a graph (grad_check perturbs
    parameter data in place between forward passes, which is the one
    sanctioned exception).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data)
        if arr.dtype not in (FLOAT32, FLOAT64):
            arr = arr.astype(FLOAT32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> int:
        """Reverse-mode sweep from this scalar. Returns the node visit count."""
        if self.data.size != 1:
            raise ShapeError("backward() starts from a scalar loss node")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        visited = 0
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                visited += 1
        return visited

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype.name}{tag})"


def tensor(data, dtype=None, requires_grad: bool = False, name: str | None = None) -> Tensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (FLOAT32, FLOAT64):
        arr = arr.astype(dtype or FLOAT32)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _result(data: np.ndarray, parents: tuple[Tensor, ...],
            backward: Callable[[np.ndarray], None] | None) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtypes {a.dtype} and {b.dtype} differ")


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(gy):
        if a.requires_grad:
            a.accumulate_grad(gy)
        if b.requires_grad:
            b.accumulate_grad(gy)

    return _result(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(gy):
        if a.requires_grad:
            a.accumulate_grad(gy)
        if b.requires_grad:
            b.accumulate_grad(-gy)

    return _result(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(gy):
        if a.requires_grad:
            a.accumulate_grad(gy * b.data)
        if b.requires_grad:
            b.accumulate_grad(gy * a.data)

    return _result(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(gy):
        if a.requires_grad:
            a.accumulate_grad(gy * s)

    return _result(a.data * np.asarray(s, dtype=a.dtype), (a,), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d]; the one permitted broadcast."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing dim of {x.shape}")

    def bwd(gy):
        if x.requires_grad:
            x.accumulate_grad(gy)
        if b.requires_grad:
            b.accumulate_grad(gy.reshape(-1, b.shape[0]).sum(axis=0))

    return _result(x.data + b.data, (x, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape} do not match")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtypes {a.dtype} and {b.dtype} differ")

    def bwd(gy):
        if a.requires_grad:
            a.accumulate_grad(gy @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ gy)

    return _result(a.data @ b.data, (a, b), bwd)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: ids must be 1D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather_rows: id out of range")

    def bwd(gy):
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, idx, gy)
            table.accumulate_grad(g)

    return _result(table.data[idx].copy(), (table,), bwd)


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"take_rows: [{start}:{stop}] outside {x.shape[0]} rows")

    def bwd(gy):
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[start:stop] = gy
            x.accumulate_grad(g)

    return _result(x.data[start:stop].copy(), (x,), bwd)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows: empty input")
    trail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != trail:
            raise ShapeError("concat_rows: trailing dims differ")
    sizes = [p.shape[0] for p in parts]

    def bwd(gy):
        off = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.accumulate_grad(gy[off:off + n])
            off += n

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def concat_tokens(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate (H, T, D) stacks along the token axis."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError("concat_tokens: expected 3D stacks")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"concat_tokens: incompatible shapes {a.shape} and {b.shape}")
    na = a.shape[1]

    def bwd(gy):
        if a.requires_grad:
            a.accumulate_grad(gy[:, :na])
        if b.requires_grad:
            b.accumulate_grad(gy[:, na:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), bwd)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(T, H*D) -> (H, T, D)."""
    t, m = x.shape
    if m % heads:
        raise ShapeError(f"split_heads: dim {m} not divisible by {heads} heads")
    d = m // heads

    def bwd(gy):
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(gy.transpose(1, 0, 2)).reshape(t, m))

    data = np.ascontiguousarray(x.data.reshape(t, heads, d).transpose(1, 0, 2))
    return _result(data, (x,), bwd)


def merge_heads(x: Tensor) -> Tensor:
    """(H, T, D) -> (T, H*D)."""
    h, t, d = x.shape

    def bwd(gy):
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(gy.reshape(t, h, d).transpose(1, 0, 2)))

    data = np.ascontiguousarray(x.data.transpose(1, 0, 2)).reshape(t, h * d)
    return _result(data, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(gy):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, gy.reshape(())))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(gy):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, gy.reshape(()) / n))

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bwd)


# ---------------------------------------------------------------------------
# kernel-backed ops
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    """Row softmax over the last dim; rows sum to 1 within 1e-6."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax_lastdim: empty last dim")
    cols = x.shape[-1]
    y = _k.softmax_fwd(np.ascontiguousarray(x.data.reshape(-1, cols)))

    def bwd(gy):
        if x.requires_grad:
            gx = _k.softmax_bwd(y, np.ascontiguousarray(gy.reshape(-1, cols)))
            x.accumulate_grad(gx.reshape(x.shape))

    return _result(y.reshape(x.shape), (x,), bwd)


LAYERNORM_EPS = 1e-5


def layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization to mean 0, variance 1, then affine gain/bias."""
    if x.data.ndim != 2:
        raise ShapeError(f"layernorm: expected 2D input, got {x.shape}")
    if x.shape[-1] < 2:
        raise ShapeError("layernorm: need at least 2 elements per row")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layernorm: gain/bias must match the trailing dim")
    y, mean, rstd = _k.layernorm_fwd(x.data, gain.data, bias.data, LAYERNORM_EPS)

    def bwd(gy):
        gx, ggain, gbias = _k.layernorm_bwd(x.data, gain.data, mean, rstd,
                                            np.ascontiguousarray(gy))
        if x.requires_grad:
            x.accumulate_grad(gx)
        if gain.requires_grad:
            gain.accumulate_grad(ggain)
        if bias.requires_grad:
            bias.accumulate_grad(gbias)

    return _result(y, (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    flat = np.ascontiguousarray(x.data.reshape(-1))
    y = _k.gelu_fwd(flat).reshape(x.shape)

    def bwd(gy):
        if x.requires_grad:
            gx = _k.gelu_bwd(flat, np.ascontiguousarray(gy.reshape(-1)))
            x.accumulate_grad(gx.reshape(x.shape))

    return _result(y, (x,), bwd)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Apply precomputed pairwise rotations to a (H, T, D) stack."""
    if x.data.ndim != 3:
        raise ShapeError("rope: expected (heads, tokens, dim)")
    if x.shape[2] % 2:
        raise ShapeError("rope: head dim must be even")
    if cos.shape != (x.shape[1], x.shape[2] // 2):
        raise ShapeError(f"rope: angle table {cos.shape} does not match {x.shape}")
    cos = np.ascontiguousarray(cos, dtype=x.dtype)
    sin = np.ascontiguousarray(sin, dtype=x.dtype)
    y = _k.rope_fwd(x.data, cos, sin)

    def bwd(gy):
        if x.requires_grad:
            x.accumulate_grad(_k.rope_bwd(np.ascontiguousarray(gy), cos, sin))

    return _result(y, (x,), bwd)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, att_scale: float) -> Tensor:
    """Masked multi-head attention over (H, T, D) stacks.

    The mask is a (Tq, Tk) uint8 array shared across heads; every query row
    must allow at least one key.
    """
    if q.data.ndim != 3 or k.data.ndim != 3 or v.data.ndim != 3:
        raise ShapeError("attention: q/k/v must be (heads, tokens, dim)")
    if k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    if mask.shape != (q.shape[1], k.shape[1]):
        raise ShapeError(f"attention: mask {mask.shape} does not match q/k token counts")
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    out, probs = _k.attention_fwd(q.data, k.data, v.data, mask, float(att_scale))

    def bwd(gy):
        gq, gk, gv = _k.attention_bwd(q.data, k.data, v.data, probs,
                                      np.ascontiguousarray(gy), float(att_scale))
        if q.requires_grad:
            q.accumulate_grad(gq)
        if k.requires_grad:
            k.accumulate_grad(gk)
        if v.requires_grad:
            v.accumulate_grad(gv)

    return _result(out, (q, k, v), bwd)


# ---------------------------------------------------------------------------
# the recorded-graph surface: parameters, backward driver, gradient check
# ---------------------------------------------------------------------------

class Graph:
    """Named parameters plus the backward driver over the recorded op graph.

    Ops record themselves onto their output tensors as they execute; the
    graph object owns the trainable leaves and walks the recording in
    reverse topological order, visiting each node exactly once.
    """

    def __init__(self, dtype=FLOAT32):
        self.dtype = np.dtype(dtype)
        self.parameters: dict[str, Tensor] = {}

    def parameter(self, name: str, array) -> Tensor:
        if name in self.parameters:
            raise ShapeError(f"parameter {name!r} already registered")
        t = Tensor(np.ascontiguousarray(array, dtype=self.dtype),
                   requires_grad=True, name=name)
        self.parameters[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.grad = None

    def backward(self, loss: Tensor) -> int:
        return loss.backward()

    def num_elements(self) -> int:
        return sum(p.size for p in self.parameters.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.parameters.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.parameters) - set(arrays)
        if missing:
            raise ShapeError(f"checkpoint missing parameters: {sorted(missing)}")
        for name, p in self.parameters.items():
            arr = np.ascontiguousarray(arrays[name], dtype=self.dtype)
            if arr.shape != p.shape:
                raise ShapeError(
                    f"checkpoint shape {arr.shape} != parameter {name!r} shape {p.shape}")
            p.data = arr


def grad_check(graph: Graph, loss_fn: Callable[[], Tensor], eps: float = 1e-5,
               params: Iterable[str] | None = None) -> float:
    """Compare backward gradients against central finite differences.

    loss_fn rebuilds the scalar loss from the graph's current parameter
    values; it is re-invoked twice per parameter element with that element
    nudged by +/- eps. Returns the worst relative error over all elements.
    Requires float64 parameters.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise GradCheckError(f"eps {eps} outside [1e-6, 1e-3]")
    if graph.dtype != FLOAT64:
        raise GradCheckError("gradient check requires a float64 graph")
    names = list(params) if params is not None else None

    graph.zero_grad()
    loss = loss_fn()
    loss.backward()
    if names is None:
        # resolved after the first evaluation: loss_fn may register its
        # parameters lazily on first use
        names = list(graph.parameters)
    grads = {}
    for name in names:
        p = graph.parameters[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise GradCheckError(f"NaN/Inf gradient in parameter {name!r}", parameter=name)
        grads[name] = g.copy()

    worst = 0.0
    with no_grad():
        for name in names:
            p = graph.parameters[name]
            flat = p.data.reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2.0 * eps)
                if not np.isfinite(fd):
                    raise GradCheckError(
                        f"non-finite finite-difference for {name!r}", parameter=name)
                denom = max(abs(gflat[i]), abs(fd), 1e-2)
                worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
