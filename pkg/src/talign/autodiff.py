"""A small reverse-mode differentiation engine on top of numpy.

Only the primitives the regression network and the noise estimator need are
provided: affine maps, relu, concatenation, max pooling, batched matmul, gathers,
elementwise arithmetic with broadcasting, and reductions.  Each op closes over
whatever it needs for its vector-Jacobian product; :meth:`Tensor.backward` walks
the recorded graph in reverse topological order.

Gradients of leaf tensors accumulate into ``.grad`` until :func:`zero_grad`.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, InvalidArgumentError, NumericError, ShapeError


class Tensor:
    # keep numpy from broadcasting ndarray <op> Tensor into object arrays
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad and not parents else None
        self._parents = parents
        self._backward_fn = backward_fn
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("division by a tensor is not supported")
        c = np.asarray(other, dtype=self.dtype)
        return _result(self.data / c, (self,), lambda g: (_unbroadcast(g / c, self.shape),))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return Tensor(arr)


def parameter(data, name=None):
    return Tensor(np.array(data), requires_grad=True, name=name)


def _result(data, parents, backward_fn):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise --------------------------------------------------------------


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), fn)


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn)


def tabs(a):
    # subgradient 0 at the kink
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a):
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: (g * (out > 0),))


# reductions and shape ops ------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), fn)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, index):
    out = a.data[index]

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), fn)


def take(a, indices, axis=-1):
    """Gather along ``axis``; indices may repeat."""
    indices = np.asarray(indices)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def fn(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(out, (a,), fn)


def concat(a, b, axis=-1):
    a, b = as_tensor(a), as_tensor(b)
    ax = axis % a.ndim
    if a.ndim != b.ndim or any(a.shape[i] != b.shape[i] for i in range(a.ndim) if i != ax):
        raise ShapeError(f"cannot concatenate shapes {a.shape} and {b.shape} along axis {axis}")
    out = np.concatenate([a.data, b.data], axis=ax)
    split = a.shape[ax]

    def fn(g):
        ga, gb = np.split(g, [split], axis=ax)
        return ga, gb

    return _result(out, (a, b), fn)


def _keep_first(hot, ties, chunk=64):
    """In place: along axis 0 of ``hot``, keep only the first True wherever ``ties``.

    Scans in chunks so the common case (ties start at index 0) stops early.
    """
    first = np.zeros(ties.shape, dtype=np.intp)
    pending = ties.copy()
    for start in range(0, hot.shape[0], chunk):
        block = hot[start : start + chunk]
        hit = pending & block.any(axis=0)
        if hit.any():
            first[hit] = start + np.argmax(block, axis=0)[hit]
            pending &= ~hit
            if not pending.any():
                break
    hot &= ~ties
    np.put_along_axis(hot, first[None], np.take_along_axis(hot, first[None], 0) | ties[None], axis=0)


def max_over_axis(x, axis):
    """Max along ``axis``; the gradient goes to the first (lowest-index) maximiser."""
    x = as_tensor(x)
    ax = axis % x.ndim
    out = x.data.max(axis=ax, keepdims=True)
    # one-hot of the maximiser; argmax along a strided axis is slow, so only tied
    # positions (typically all-zero channels after relu) go through argmax
    hot = x.data == out
    ties = np.add.reduce(hot, axis=ax, dtype=np.int32) > 1
    if ties.any():
        _keep_first(np.moveaxis(hot, ax, 0), ties)

    def fn(g):
        return (hot * np.expand_dims(g, ax),)

    return _result(out.squeeze(ax), (x,), fn)


# linear algebra -----------------------------------------------------------


def linear(x, w, b):
    """``x[..., in] @ w[in, out] + b[out]`` as a single graph node."""
    x = as_tensor(x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(
            f"linear: input {x.shape} incompatible with weight {w.shape} and bias {b.shape}"
        )
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = (x2 @ w.data + b.data).reshape(lead + (w.shape[1],))

    def fn(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, w, b), fn)


def matmul(a, b):
    """Batched matrix product over identical leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), fn)


# backpropagation ------------------------------------------------------------


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if root.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar output, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


# gradient checking ------------------------------------------------------------


def finite_diff_check(f, params, h=1e-4):
    """Worst relative error between analytic and central-difference gradients.

    ``f`` maps the current parameter values to a scalar :class:`Tensor` and must be
    deterministic.  Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst


# optimisation -----------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_update(params, grads, state, lr):
    """One bias-corrected Adam step, in place on the ``params`` arrays.

    Raises :class:`NumericError` without touching anything if a gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} but gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {i} (shape {p.shape}); step aborted")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.dtype)
    return params, state


# checkpoints ------------------------------------------------------------------

_HEADER_LEN = struct.Struct("<Q")


def save_checkpoint(path, named_params, header):
    """Write ``u64 header length | JSON header | f32 little-endian blobs``.

    ``header`` is extended with the parameter names and shapes, in blob order.
    """
    header = dict(header)
    header["params"] = [{"name": n, "shape": list(p.shape)} for n, p in named_params]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER_LEN.pack(len(raw)))
        fh.write(raw)
        for _, p in named_params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return ``(header, {name: float32 array})``."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < _HEADER_LEN.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    (n,) = _HEADER_LEN.unpack_from(blob, 0)
    start = _HEADER_LEN.size
    try:
        header = json.loads(blob[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed JSON header: {exc}") from exc
    offset = start + n
    params = {}
    for entry in header.get("params", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: blob for {entry['name']!r} truncated at byte {len(blob)}")
        params[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after parameter blobs")
    return header, params
