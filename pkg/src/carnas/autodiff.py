"""Minimal dense-tensor reverse-mode autodiff core.

Everything is float64 numpy under the hood. Tensors form an implicit tape:
each op records its parents and a closure that pushes the output gradient
back to them. ``backward`` walks the graph once in reverse topological
order; a graph is single-use (call ``backward`` once per forward pass).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

# Toggleable fail-fast guard: every op output is checked for NaN/Inf.
CHECK_FINITE = True

# scatter/gather run as CSR matvecs; matrices are memoized per index array
_SCATTER_CACHE: dict = {}


def _scatter_matrix(index: np.ndarray, num_rows: int) -> sp.csr_matrix:
    key = (num_rows, index.tobytes())
    mat = _SCATTER_CACHE.get(key)
    if mat is None:
        mat = sp.csr_matrix(
            (np.ones(len(index)), (index, np.arange(len(index)))),
            shape=(num_rows, len(index)))
        if len(_SCATTER_CACHE) > 512:
            _SCATTER_CACHE.clear()
        _SCATTER_CACHE[key] = mat
    return mat


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


def _asarray(x):
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_consumed", "_grad_shared")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _asarray(data)
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NonFiniteError("non-finite values entering the graph")
        self.grad = None
        self._grad_shared = False
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = tuple(p for p in _parents if p.requires_grad) if self.requires_grad else ()
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        # store by reference; copy lazily only if a second path accumulates
        t.grad = g
        t._grad_shared = True
    elif t._grad_shared:
        t.grad = t.grad + g
        t._grad_shared = False
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape):
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Propagate d(loss)/d(node) through the recorded graph.

    ``loss`` must be a scalar. Each graph may be walked once.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise AutodiffError("this tape was already consumed by a backward pass")

    # Iterative topological sort (graphs can be deep).
    order = []
    visited = set()
    stack = [(loss, False)]
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

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        node._consumed = True


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Tensor(a.data + b.data, _parents=(a, b), _backward=bwd)


def sub(a, b):
    a, b = _lift(a), _lift(b)

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return Tensor(a.data - b.data, _parents=(a, b), _backward=bwd)


def mul(a, b):
    a, b = _lift(a), _lift(b)

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return Tensor(a.data * b.data, _parents=(a, b), _backward=bwd)


def neg(a):
    a = _lift(a)

    def bwd(g):
        _accumulate(a, -g)

    return Tensor(-a.data, _parents=(a,), _backward=bwd)


def scale(a, c: float):
    a = _lift(a)
    c = float(c)

    def bwd(g):
        _accumulate(a, g * c)

    return Tensor(a.data * c, _parents=(a,), _backward=bwd)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return Tensor(a.data @ b.data, _parents=(a, b), _backward=bwd)


def transpose(a):
    a = _lift(a)

    def bwd(g):
        _accumulate(a, g.T)

    return Tensor(a.data.T, _parents=(a,), _backward=bwd)


def relu(a):
    a = _lift(a)
    mask = a.data > 0.0

    def bwd(g):
        _accumulate(a, g * mask)

    return Tensor(np.where(mask, a.data, 0.0), _parents=(a,), _backward=bwd)


def leaky_relu(a, slope=0.2):
    a = _lift(a)
    mask = a.data > 0.0

    def bwd(g):
        _accumulate(a, g * np.where(mask, 1.0, slope))

    return Tensor(np.where(mask, a.data, slope * a.data), _parents=(a,), _backward=bwd)


def sigmoid(a):
    a = _lift(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(g):
        _accumulate(a, g * out * (1.0 - out))

    return Tensor(out, _parents=(a,), _backward=bwd)


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out)

    return Tensor(out, _parents=(a,), _backward=bwd)


def log(a):
    a = _lift(a)

    def bwd(g):
        _accumulate(a, g / a.data)

    return Tensor(np.log(a.data), _parents=(a,), _backward=bwd)


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.data)

    def bwd(g):
        _accumulate(a, g * 0.5 / out)

    return Tensor(out, _parents=(a,), _backward=bwd)


def reciprocal(a):
    a = _lift(a)
    out = 1.0 / a.data

    def bwd(g):
        _accumulate(a, -g * out * out)

    return Tensor(out, _parents=(a,), _backward=bwd)


def softplus(a):
    """log(1 + exp(x)), stable; derivative sigmoid(x)."""
    a = _lift(a)
    out = np.logaddexp(0.0, a.data)

    def bwd(g):
        _accumulate(a, g / (1.0 + np.exp(-a.data)))

    return Tensor(out, _parents=(a,), _backward=bwd)


def sum_all(a):
    a = _lift(a)

    def bwd(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return Tensor(a.data.sum(), _parents=(a,), _backward=bwd)


def mean_all(a):
    a = _lift(a)
    n = a.data.size

    def bwd(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return Tensor(a.data.mean(), _parents=(a,), _backward=bwd)


def row_sum(a):
    """Sum over axis 1, keeping the column dimension."""
    a = _lift(a)

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor(a.data.sum(axis=1, keepdims=True), _parents=(a,), _backward=bwd)


def softmax_rows(a):
    """Row-wise softmax, stabilized by row-max subtraction."""
    a = _lift(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        _accumulate(a, out * (g - dot))

    return Tensor(out, _parents=(a,), _backward=bwd)


def gather_rows(a, index):
    """out[i] = a[index[i]]; backward scatters with accumulation."""
    a = _lift(a)
    index = np.asarray(index, dtype=np.int64)

    def bwd(g):
        if a.requires_grad:
            if a.data.ndim == 2 and len(index):
                acc = _scatter_matrix(index, a.data.shape[0]) @ g
            else:
                acc = np.zeros_like(a.data)
                np.add.at(acc, index, g)
            _accumulate(a, acc)

    return Tensor(a.data[index], _parents=(a,), _backward=bwd)


def scatter_sum(a, index, num_rows):
    """out[j] = sum of a rows i with index[i] == j; backward gathers."""
    a = _lift(a)
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim == 2 and len(index):
        out = _scatter_matrix(index, num_rows) @ a.data
    else:
        out = np.zeros((num_rows,) + a.data.shape[1:], dtype=np.float64)
        np.add.at(out, index, a.data)

    def bwd(g):
        _accumulate(a, g[index])

    return Tensor(out, _parents=(a,), _backward=bwd)


def segment_mean(a, index, num_segments):
    """Mean of a's rows per segment id; empty segments yield zero rows."""
    index = np.asarray(index, dtype=np.int64)
    counts = np.bincount(index, minlength=num_segments).astype(np.float64)
    inv = np.zeros_like(counts)
    nz = counts > 0
    inv[nz] = 1.0 / counts[nz]
    total = scatter_sum(a, index, num_segments)
    return mul(total, inv[:, None])


def concat_cols(tensors):
    tensors = [_lift(t) for t in tensors]
    widths = [t.data.shape[1] for t in tensors]
    edges = np.cumsum([0] + widths)

    def bwd(g):
        for t, lo, hi in zip(tensors, edges[:-1], edges[1:]):
            _accumulate(t, g[:, lo:hi])

    return Tensor(np.concatenate([t.data for t in tensors], axis=1),
                  _parents=tuple(tensors), _backward=bwd)


def concat_rows(tensors):
    tensors = [_lift(t) for t in tensors]
    heights = [t.data.shape[0] for t in tensors]
    edges = np.cumsum([0] + heights)

    def bwd(g):
        for t, lo, hi in zip(tensors, edges[:-1], edges[1:]):
            _accumulate(t, g[lo:hi])

    return Tensor(np.concatenate([t.data for t in tensors], axis=0),
                  _parents=tuple(tensors), _backward=bwd)


def slice_cols(a, lo, hi):
    a = _lift(a)

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[:, lo:hi] = g
            _accumulate(a, acc)

    return Tensor(a.data[:, lo:hi], _parents=(a,), _backward=bwd)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named map of trainable tensors plus per-parameter Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._moment1: dict[str, np.ndarray] = {}
        self._moment2: dict[str, np.ndarray] = {}
        self._steps: dict[str, int] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"parameter {name!r} already registered")
        t = Tensor(data, requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        self._moment1[name] = np.zeros_like(t.data)
        self._moment2[name] = np.zeros_like(t.data)
        self._steps[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def count(self, prefix: str = "") -> int:
        """Total number of scalar parameters whose name starts with prefix."""
        total = 0
        matched = False
        for name, t in self._params.items():
            if name.startswith(prefix):
                matched = True
                total += t.size
        if prefix and not matched:
            import warnings
            warnings.warn(f"no parameters under prefix {prefix!r}")
        return total

    def adam_step(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        """Standard Adam with bias correction; zeros gradients afterward."""
        for name, t in self._params.items():
            g = t.grad
            if g is None or g.shape != t.data.shape:
                raise AutodiffError(f"parameter {name!r} has no gradient for adam_step")
            self._steps[name] += 1
            step = self._steps[name]
            m = self._moment1[name]
            v = self._moment2[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            m_hat = m / (1.0 - beta1 ** step)
            v_hat = v / (1.0 - beta2 ** step)
            t.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
            t.grad = np.zeros_like(t.data)

    # -- serialization hooks used by the checkpoint container --------------

    def state_arrays(self):
        """Flat name->array view of params and optimizer state."""
        out = {}
        for name, t in self._params.items():
            out[f"param:{name}"] = t.data
            out[f"adam.m:{name}"] = self._moment1[name]
            out[f"adam.v:{name}"] = self._moment2[name]
            out[f"adam.t:{name}"] = np.asarray([float(self._steps[name])])
        return out

    def load_state_arrays(self, arrays):
        for name, t in self._params.items():
            key = f"param:{name}"
            if key not in arrays:
                raise AutodiffError(f"checkpoint missing parameter {name!r}")
            if arrays[key].shape != t.data.shape:
                raise ShapeMismatch(
                    f"checkpoint shape {arrays[key].shape} != model shape "
                    f"{t.data.shape} for {name!r}")
            t.data[...] = arrays[key]
            self._moment1[name][...] = arrays[f"adam.m:{name}"]
            self._moment2[name][...] = arrays[f"adam.v:{name}"]
            self._steps[name] = int(arrays[f"adam.t:{name}"][0])
            t.grad = np.zeros_like(t.data)


def grad_check(f, store: ParamStore, eps: float = 1e-5, params=None) -> float:
    """Compare tape gradients of scalar f() against central finite differences.

    Returns the max over coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    ``f`` must rebuild its graph on every call (it is re-evaluated 2 times
    per coordinate).
    """
    names = params if params is not None else store.names()
    store.zero_grads()
    loss = f()
    backward(loss)
    grads = {n: store[n].grad.copy() for n in names}

    worst = 0.0
    for name in names:
        t = store[name]
        flat = t.data.reshape(-1)
        g_ad = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().data.item()
            flat[i] = orig - eps
            f_minus = f().data.item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite objective near {name}[{i}]")
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1e-8, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, abs(g_ad[i] - g_fd) / denom)
    return worst
