"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new ``Value`` carrying the result and a closure
that knows how to push an upstream gradient to its inputs. Calling
``backward`` on a scalar root sweeps the graph once in reverse topological
order. The primitive set is exactly what the encoder, the message-passing
layers, and the regression head need; shapes are explicit everywhere (the
only broadcast allowed is a row-wise bias add).

Pooling-style reductions (``sum_pool``, ``mean_pool``, ``scatter_add_rows``
and the batch statistics inside ``batchnorm``) sum each column in ascending
value order, so their forward results are bit-identical under any
permutation of the reduced rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotScalar, ShapeError


def _psum(arr: np.ndarray, axis: int = 0) -> np.ndarray:
    """Permutation-exact sum: sort along the axis, then add."""
    return np.sum(np.sort(arr, axis=axis), axis=axis)


class Value:
    """Node in the autodiff graph: float64 data plus gradient plumbing."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward_fn", "_op", "_kink")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._grad = None
        self._parents = _parents
        self._backward_fn = None
        self._op = _op
        self._kink = False

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def constant(data) -> Value:
    return Value(data)


def _wrap(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def add(a: Value, b: Value) -> Value:
    """Elementwise add; also supports (n, d) + (d,) as a row-wise bias."""
    a, b = _wrap(a), _wrap(b)
    bias = a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]
    if not bias and a.data.shape != b.data.shape:
        raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Value(a.data + b.data, _parents=(a, b), _op="add")

    def _back(g):
        a._accumulate(g)
        b._accumulate(g.sum(axis=0) if bias else g)

    out._backward_fn = _back
    return out


def multiply(a: Value, b: Value) -> Value:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"multiply: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Value(a.data * b.data, _parents=(a, b), _op="mul")

    def _back(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    out._backward_fn = _back
    return out


def scale(a: Value, s: float) -> Value:
    out = Value(a.data * s, _parents=(a,), _op="scale")
    out._backward_fn = lambda g: a._accumulate(g * s)
    return out


def matmul(a: Value, b: Value) -> Value:
    """Matrix product for (n, m) @ (m, p) or (m,) @ (m, p)."""
    a, b = _wrap(a), _wrap(b)
    if b.data.ndim != 2:
        raise ShapeError(f"matmul: right operand must be 2-d, got {b.data.shape}")
    if a.data.ndim == 2:
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
        out = Value(a.data @ b.data, _parents=(a, b), _op="matmul")

        def _back(g):
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)

    elif a.data.ndim == 1:
        if a.data.shape[0] != b.data.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
        out = Value(a.data @ b.data, _parents=(a, b), _op="matmul")

        def _back(g):
            a._accumulate(b.data @ g)
            b._accumulate(np.outer(a.data, g))

    else:
        raise ShapeError(f"matmul: left operand must be 1-d or 2-d, got {a.data.shape}")
    out._backward_fn = _back
    return out


def relu(a: Value) -> Value:
    out = Value(np.maximum(a.data, 0.0), _parents=(a,), _op="relu")
    out._kink = bool(np.any(a.data == 0.0))  # gradient at exactly 0 defined as 0
    mask = a.data > 0.0
    out._backward_fn = lambda g: a._accumulate(g * mask)
    return out


def silu(a: Value) -> Value:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Value(a.data * sig, _parents=(a,), _op="silu")
    local = sig * (1.0 + a.data * (1.0 - sig))
    out._backward_fn = lambda g: a._accumulate(g * local)
    return out


ACTIVATIONS = {"relu": relu, "silu": silu}


def sum_pool(a: Value, axis: int = 0) -> Value:
    """Column-wise sum over one axis, permutation-exact in the reduced rows."""
    out = Value(_psum(a.data, axis=axis), _parents=(a,), _op="sum_pool")

    def _back(g):
        a._accumulate(np.expand_dims(g, axis=axis) * np.ones_like(a.data))

    out._backward_fn = _back
    return out


def mean_pool(a: Value, axis: int = 0) -> Value:
    n = a.data.shape[axis]
    out = Value(_psum(a.data, axis=axis) / n, _parents=(a,), _op="mean_pool")

    def _back(g):
        a._accumulate(np.expand_dims(g, axis=axis) * np.ones_like(a.data) / n)

    out._backward_fn = _back
    return out


def max_pool(a: Value, axis: int = 0) -> Value:
    out = Value(np.max(a.data, axis=axis), _parents=(a,), _op="max_pool")
    argmax = np.argmax(a.data, axis=axis)

    def _back(g):
        buf = np.zeros_like(a.data)
        if a.data.ndim == 2 and axis == 0:
            buf[argmax, np.arange(a.data.shape[1])] = g
        elif a.data.ndim == 2 and axis == 1:
            buf[np.arange(a.data.shape[0]), argmax] = g
        else:
            buf.flat[argmax] = g
        a._accumulate(buf)

    out._backward_fn = _back
    return out


def concat(parts, axis: int = 0) -> Value:
    parts = [_wrap(p) for p in parts]
    out = Value(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts), _op="concat")
    sizes = [p.data.shape[axis] for p in parts]

    def _back(g):
        start = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + size)
            p._accumulate(g[tuple(sl)])
            start += size

    out._backward_fn = _back
    return out


def gather_rows(a: Value, indices) -> Value:
    """Select rows of a 2-d array; duplicate indices are allowed."""
    indices = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows: need 2-d input, got {a.data.shape}")
    out = Value(a.data[indices], _parents=(a,), _op="gather_rows")

    def _back(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, indices, g)
        a._accumulate(buf)

    out._backward_fn = _back
    return out


def scatter_add_rows(a: Value, indices, n_rows: int) -> Value:
    """Accumulate rows of ``a`` into ``n_rows`` destination rows.

    Row i of the output is the sum of all rows j with indices[j] == i
    (zero when there are none). This is the neighbor-sum aggregation for
    message passing; each destination is summed permutation-exactly.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"scatter_add_rows: need 2-d input, got {a.data.shape}")
    if indices.shape != (a.data.shape[0],):
        raise ShapeError(
            f"scatter_add_rows: index shape {indices.shape} does not match rows {a.data.shape}"
        )
    result = np.zeros((n_rows, a.data.shape[1]))
    order = np.argsort(indices, kind="stable")
    sorted_idx = indices[order]
    boundaries = np.flatnonzero(np.diff(sorted_idx)) + 1
    for chunk in np.split(order, boundaries):
        if chunk.size:
            result[indices[chunk[0]]] = _psum(a.data[chunk], axis=0)
    out = Value(result, _parents=(a,), _op="scatter_add_rows")
    out._backward_fn = lambda g: a._accumulate(g[indices])
    return out


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm site (not trainable)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def for_width(cls, width: int, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(width), np.ones(width), momentum, eps)

    def copy(self):
        return BatchNormState(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


def batchnorm(x: Value, gamma: Value, beta: Value, state: BatchNormState,
              training: bool, update_running: bool = True) -> Value:
    """Batch normalization over rows (axis 0) of a 2-d input.

    Training mode normalizes with the batch statistics (population
    variance) and, unless ``update_running`` is disabled, folds them into
    the running estimates. Eval mode is a pure affine map using the stored
    running statistics.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batchnorm: need 2-d input, got {x.data.shape}")
    width = x.data.shape[1]
    if gamma.data.shape != (width,) or beta.data.shape != (width,):
        raise ShapeError(
            f"batchnorm: gamma/beta {gamma.data.shape}/{beta.data.shape} do not match width {width}"
        )
    n = x.data.shape[0]
    if training:
        mu = _psum(x.data, axis=0) / n
        var = _psum((x.data - mu) ** 2, axis=0) / n
        if update_running:
            m = state.momentum
            state.mean = (1 - m) * state.mean + m * mu
            state.var = (1 - m) * state.var + m * var
    else:
        mu, var = state.mean, state.var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out = Value(gamma.data * xhat + beta.data, _parents=(x, gamma, beta), _op="batchnorm")

    if training:

        def _back(g):
            gamma._accumulate((g * xhat).sum(axis=0))
            beta._accumulate(g.sum(axis=0))
            g_sum = g.sum(axis=0)
            gx_sum = (g * xhat).sum(axis=0)
            x._accumulate(gamma.data * inv_std / n * (n * g - g_sum - xhat * gx_sum))

    else:

        def _back(g):
            gamma._accumulate((g * xhat).sum(axis=0))
            beta._accumulate(g.sum(axis=0))
            x._accumulate(g * gamma.data * inv_std)

    out._backward_fn = _back
    return out


def mse(pred: Value, target) -> Value:
    """Mean squared error over all elements; returns a scalar."""
    target = _wrap(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse: incompatible shapes {pred.data.shape} and {target.data.shape}")
    diff = pred.data - target.data
    out = Value(np.mean(diff**2), _parents=(pred, target), _op="mse")
    n = diff.size

    def _back(g):
        pred._accumulate(g * 2.0 * diff / n)
        target._accumulate(g * (-2.0) * diff / n)

    out._backward_fn = _back
    return out


def l1_norm(a: Value) -> Value:
    """Sum of absolute values; subgradient at 0 is 0."""
    out = Value(np.sum(np.abs(a.data)), _parents=(a,), _op="l1_norm")
    out._backward_fn = lambda g: a._accumulate(g * np.sign(a.data))
    return out


def pick(a: Value, index: int) -> Value:
    """Scalar entry of a 1-d value."""
    if a.data.ndim != 1:
        raise ShapeError(f"pick: need 1-d input, got {a.data.shape}")
    out = Value(a.data[index], _parents=(a,), _op="pick")

    def _back(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        a._accumulate(buf)

    out._backward_fn = _back
    return out


def _topo_order(root: Value) -> list[Value]:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            stack.append((parent, False))
    return order


def backward(root: Value) -> None:
    """Populate gradients of everything reachable from a scalar root."""
    if root.data.size != 1:
        raise NotScalar(f"backward needs a scalar root, got shape {root.data.shape}")
    order = _topo_order(root)
    root._grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward_fn is not None and node._grad is not None:
            node._backward_fn(node._grad)


def graph_has_kink(root: Value) -> bool:
    """True when any activation in the graph sat exactly on a kink."""
    return any(node._kink for node in _topo_order(root))


def _activation_pattern(root: Value) -> list[np.ndarray]:
    """Sign pattern of every relu input, in deterministic graph order."""
    return [node._parents[0].data > 0.0 for node in _topo_order(root) if node._op == "relu"]


def _patterns_differ(a, b) -> bool:
    return len(a) != len(b) or any(not np.array_equal(x, y) for x, y in zip(a, b))


class ParameterStore:
    """Named map of trainable parameters; names are unique paths."""

    def __init__(self):
        self._params: dict[str, Value] = {}

    def add(self, name: str, data) -> Value:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        v = Value(data, requires_grad=True)
        self._params[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        """(name, Value) pairs in sorted name order (deterministic)."""
        return [(k, self._params[k]) for k in sorted(self._params)]

    def names(self):
        return sorted(self._params)

    def zero_grad(self):
        for v in self._params.values():
            v._grad = None

    def n_scalars(self) -> int:
        return sum(v.data.size for v in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]):
        for name, value in self.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r} in state dict")
            if arrays[name].shape != value.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: stored shape {arrays[name].shape} "
                    f"!= expected {value.data.shape}"
                )
            value.data = np.asarray(arrays[name], dtype=np.float64).copy()


def gradient_check(f, store: ParameterStore, h: float = 1e-5, n_probe: int = 50,
                   seed: int = 0) -> float:
    """Compare backward gradients against central differences.

    ``f(store)`` must build and return a scalar Value and be a pure
    function of the stored parameters (batchnorm sites must not update
    running statistics inside ``f``). A probe is skipped when the central
    difference is not valid at that point: an activation input sat exactly
    on a kink, or the stencil crossed one (the relu sign pattern differs
    between the three evaluations). Returns the max relative error
    max|a - n| / max(|a|, |n|, 1e-8) over the evaluated probes, 0.0 if
    every probe was skipped.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = store.names()
    sizes = [store[n].data.size for n in names]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_probe, total), replace=False)
    flat.sort()

    store.zero_grad()
    root = f(store)
    backward(root)
    base_kink = graph_has_kink(root)
    base_pattern = _activation_pattern(root)
    analytic = {}
    for idx in flat:
        name, offset = _locate(names, sizes, int(idx))
        g = store[name]._grad
        analytic[int(idx)] = 0.0 if g is None else float(g.flat[offset])

    worst = 0.0
    for idx in flat:
        name, offset = _locate(names, sizes, int(idx))
        data = store[name].data
        orig = data.flat[offset]
        data.flat[offset] = orig + h
        plus = f(store)
        data.flat[offset] = orig - h
        minus = f(store)
        data.flat[offset] = orig
        if base_kink or graph_has_kink(plus) or graph_has_kink(minus):
            continue
        if _patterns_differ(base_pattern, _activation_pattern(plus)) or _patterns_differ(
            base_pattern, _activation_pattern(minus)
        ):
            continue
        numeric = float((plus.data - minus.data) / (2.0 * h))
        a = analytic[int(idx)]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def _locate(names, sizes, flat_index):
    for name, size in zip(names, sizes):
        if flat_index < size:
            return name, flat_index
        flat_index -= size
    raise IndexError("probe index out of range")
