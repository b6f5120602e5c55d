"""Dense-tensor reverse-mode autodiff on an explicit gradient tape.

Tensors are immutable float64 arrays; a Tape is an append-only node list
(inputs always precede their consumers, so reverse iteration is a valid
backward order).  Primitives are registered by kebab-case id and return
``(value, vjp)`` where ``vjp(grad_out)`` yields one gradient per input
(``None`` for non-differentiable inputs).

Subgradient conventions: |x| at 0 -> 0, max(x, c) at x == c -> 0,
min-over-index-set ties -> lowest index.
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import (
    ConfigurationError,
    ContractViolationError,
    DimensionError,
    NumericError,
)


class Tensor:
    """Immutable value, optionally recorded on a gradient tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        arr = np.asarray(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return apply_primitive("add", [self, other])

    __radd__ = __add__

    def __sub__(self, other):
        return apply_primitive("subtract", [self, other])

    def __rsub__(self, other):
        return apply_primitive("subtract", [other, self])

    def __mul__(self, other):
        return apply_primitive("elementwise-multiply", [self, other])

    __rmul__ = __mul__

    def __neg__(self):
        return apply_primitive("elementwise-multiply", [self, -1.0])

    def __matmul__(self, other):
        return apply_primitive("matrix-multiply", [self, other])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], {"shape": shape})

    def sum(self, axes=None):
        return apply_primitive("sum-over-axes", [self], {"axes": axes})

    def mean(self, axes=None):
        return apply_primitive("mean-over-axes", [self], {"axes": axes})


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """A tensor guaranteed to be off-tape (detached copy of values)."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


stop_gradient = constant


class _Node:
    __slots__ = ("op", "input_ids", "vjp")

    def __init__(self, op, input_ids, vjp):
        self.op = op
        self.input_ids = input_ids
        self.vjp = vjp


class Tape:
    """Single-writer record of primitive applications."""

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def variable(self, data):
        """Put a leaf value on the tape so backward() reports its gradient."""
        t = Tensor(data, tape=self, node_id=len(self._nodes))
        self._nodes.append(_Node("leaf", (), None))
        return t

    def _record(self, op, input_ids, vjp, out_data):
        t = Tensor(out_data, tape=self, node_id=len(self._nodes))
        self._nodes.append(_Node(op, input_ids, vjp))
        return t


def apply_primitive(op, inputs, attrs=None):
    """Evaluate a primitive; record it when any input lives on a tape."""
    fn = _PRIMITIVES.get(op)
    if fn is None:
        raise ConfigurationError(f"unknown primitive id: {op!r}")
    tensors = [as_tensor(x) for x in inputs]
    out_data, vjp = fn([t.data for t in tensors], attrs or {})

    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ContractViolationError(f"{op}: inputs live on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out_data)
    input_ids = tuple(
        t.node_id if t.tape is tape else None for t in tensors
    )
    return tape._record(op, input_ids, vjp, out_data)


def backward(tape, root):
    """Gradients of a scalar root w.r.t. every tape node (node id -> array)."""
    if root.tape is not tape or root.node_id is None:
        raise ContractViolationError("root is not on this tape")
    if root.data.size != 1:
        raise ContractViolationError(
            f"backward root must be scalar, got shape {root.data.shape}"
        )
    grads = {root.node_id: np.ones_like(root.data)}
    for nid in range(root.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape._nodes[nid]
        if node.vjp is None:
            continue
        for iid, contrib in zip(node.input_ids, node.vjp(g)):
            if iid is None or contrib is None:
                continue
            if iid in grads:
                grads[iid] = grads[iid] + contrib
            else:
                grads[iid] = np.asarray(contrib, dtype=np.float64)
    return grads


# ---------------------------------------------------------------------------
# primitive registry


def _shape_err(op, *shapes):
    return DimensionError(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_err(op, a.shape, b.shape) from None


def _p_add(arrays, attrs):
    a, b = arrays
    _check_broadcast("add", a, b)
    out = a + b

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, vjp


def _p_subtract(arrays, attrs):
    a, b = arrays
    _check_broadcast("subtract", a, b)
    out = a - b

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return out, vjp


def _p_multiply(arrays, attrs):
    a, b = arrays
    _check_broadcast("elementwise-multiply", a, b)
    out = a * b

    def vjp(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, vjp


def _swapT(x):
    return x.swapaxes(-1, -2)


def _p_matmul(arrays, attrs):
    a, b = arrays
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_err("matrix-multiply", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise _shape_err("matrix-multiply", a.shape, b.shape) from None
    out = np.matmul(a, b)

    def vjp(g):
        return (
            _unbroadcast(np.matmul(g, _swapT(b)), a.shape),
            _unbroadcast(np.matmul(_swapT(a), g), b.shape),
        )

    return out, vjp


def _p_softmax(arrays, attrs):
    (x,) = arrays
    axis = attrs.get("axis", -1)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return s, vjp


def _p_relu(arrays, attrs):
    (x,) = arrays
    out = np.maximum(x, 0.0)

    def vjp(g):
        return (g * (x > 0.0),)

    return out, vjp


def _p_abs(arrays, attrs):
    (x,) = arrays

    def vjp(g):
        return (g * np.sign(x),)

    return np.abs(x), vjp


def _p_max_const(arrays, attrs):
    (x,) = arrays
    c = float(attrs["constant"])
    out = np.maximum(x, c)

    def vjp(g):
        return (g * (x > c),)

    return out, vjp


def _p_min_index_set(arrays, attrs):
    (x,) = arrays
    axis = attrs.get("axis", 0)
    idx = np.asarray(sorted(attrs["indices"]), dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= x.shape[axis]:
        raise _shape_err("min-over-index-set", x.shape, (idx.size,))
    xm = np.moveaxis(x, axis, 0)
    rest = xm.shape[1:]
    sub = xm[idx].reshape(idx.size, -1)
    am = np.argmin(sub, axis=0)  # first occurrence -> lowest index (sorted)
    cols = np.arange(sub.shape[1])
    out = sub[am, cols].reshape(rest)

    def vjp(g):
        z = np.zeros_like(xm).reshape(x.shape[axis], -1)
        np.add.at(z, (idx[am], cols), g.reshape(-1))
        return (np.moveaxis(z.reshape(xm.shape), 0, axis),)

    return out, vjp


def _axes_tuple(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def _p_sum(arrays, attrs):
    (x,) = arrays
    axes = _axes_tuple(attrs.get("axes"), x.ndim)
    out = x.sum(axis=axes)

    def vjp(g):
        shape = list(x.shape)
        for a in axes:
            shape[a] = 1
        return (np.broadcast_to(g.reshape(shape), x.shape).copy(),)

    return out, vjp


def _p_mean(arrays, attrs):
    (x,) = arrays
    axes = _axes_tuple(attrs.get("axes"), x.ndim)
    count = float(np.prod([x.shape[a] for a in axes]))
    out = x.sum(axis=axes) / count

    def vjp(g):
        shape = list(x.shape)
        for a in axes:
            shape[a] = 1
        return (np.broadcast_to(g.reshape(shape) / count, x.shape).copy(),)

    return out, vjp


def _p_gather(arrays, attrs):
    (x,) = arrays
    axis = attrs.get("axis", 0)
    idx = np.asarray(attrs["indices"], dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis])):
        raise _shape_err("gather-rows", x.shape, idx.shape)
    out = np.take(x, idx, axis=axis)

    def vjp(g):
        z = np.zeros_like(x)
        np.add.at(z, (slice(None),) * axis + (idx,), g)
        return (z,)

    return out, vjp


def _p_gather_batched(arrays, attrs):
    (x,) = arrays
    idx = np.asarray(attrs["indices"], dtype=np.int64)
    if x.ndim < 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise _shape_err("gather-rows-batched", x.shape, idx.shape)
    brows = np.arange(x.shape[0])[:, None]
    out = x[brows, idx]

    def vjp(g):
        z = np.zeros_like(x)
        np.add.at(z, (brows, idx), g)
        return (z,)

    return out, vjp


def _p_concat(arrays, attrs):
    axis = attrs.get("axis", 0)
    ref = list(arrays[0].shape)
    for a in arrays[1:]:
        s = list(a.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise _shape_err("concatenate", *[a.shape for a in arrays])
    out = np.concatenate(arrays, axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return out, vjp


def _p_dropout(arrays, attrs):
    (x,) = arrays
    mask = np.asarray(attrs["mask"], dtype=np.float64)
    if mask.shape != x.shape:
        raise _shape_err("dropout-with-explicit-mask", x.shape, mask.shape)
    out = x * mask

    def vjp(g):
        return (g * mask,)

    return out, vjp


def _p_compose_tree(arrays, attrs):
    (local,) = arrays
    parents = np.asarray(attrs["parents"], dtype=np.int64)
    if local.ndim not in (3, 4) or local.shape[-1] != local.shape[-2]:
        raise _shape_err("batched-4x4-transform-compose", local.shape)
    if local.shape[-3] != parents.size:
        raise _shape_err("batched-4x4-transform-compose", local.shape, parents.shape)
    world = backend.compose_tree(local, parents)

    def vjp(g):
        return (backend.compose_tree_vjp(local, world, parents, g),)

    return world, vjp


def _p_quat_normalize(arrays, attrs):
    (q,) = arrays
    if q.shape[-1] != 4:
        raise _shape_err("quaternion-normalize", q.shape)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if n.min() <= 1e-8:
        raise NumericError("degenerate rotation: quaternion norm <= 1e-8")
    out = q / n

    def vjp(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / n,)

    return out, vjp


def _p_unit_quat_rotmat(arrays, attrs):
    (q,) = arrays
    if q.shape[-1] != 4:
        raise _shape_err("unit-quaternion-to-rotation", q.shape)
    out = backend.quat_to_rotmat(q)

    def vjp(g):
        return (backend.quat_to_rotmat_vjp(q, g),)

    return out, vjp


def _p_transform_points(arrays, attrs):
    t, p = arrays
    if t.shape[-2:] != (4, 4) or p.shape[-1] != 3 or t.shape[:-2] != p.shape[:-1]:
        raise _shape_err("transform-points", t.shape, p.shape)
    out = backend.transform_points(t, p)

    def vjp(g):
        return backend.transform_points_vjp(t, p, g)

    return out, vjp


def _p_reshape(arrays, attrs):
    (x,) = arrays
    shape = tuple(attrs["shape"])
    if np.prod(shape, dtype=np.int64) != x.size:
        raise _shape_err("reshape", x.shape, shape)
    out = x.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return out, vjp


_PRIMITIVES = {
    "add": _p_add,
    "subtract": _p_subtract,
    "elementwise-multiply": _p_multiply,
    "matrix-multiply": _p_matmul,
    "softmax-over-axis": _p_softmax,
    "relu": _p_relu,
    "absolute-value": _p_abs,
    "max-with-constant": _p_max_const,
    "min-over-index-set": _p_min_index_set,
    "sum-over-axes": _p_sum,
    "mean-over-axes": _p_mean,
    "gather-rows": _p_gather,
    "gather-rows-batched": _p_gather_batched,
    "concatenate": _p_concat,
    "dropout-with-explicit-mask": _p_dropout,
    "batched-4x4-transform-compose": _p_compose_tree,
    "quaternion-normalize": _p_quat_normalize,
    "unit-quaternion-to-rotation": _p_unit_quat_rotmat,
    "transform-points": _p_transform_points,
    "reshape": _p_reshape,
}


# functional aliases -------------------------------------------------------


def softmax(x, axis=-1):
    return apply_primitive("softmax-over-axis", [x], {"axis": axis})


def relu(x):
    return apply_primitive("relu", [x])


def absolute(x):
    return apply_primitive("absolute-value", [x])


def max_with_constant(x, c):
    return apply_primitive("max-with-constant", [x], {"constant": c})


def min_over_index_set(x, indices, axis=0):
    return apply_primitive(
        "min-over-index-set", [x], {"indices": indices, "axis": axis}
    )


def gather_rows(x, indices, axis=0):
    return apply_primitive("gather-rows", [x], {"indices": indices, "axis": axis})


def gather_rows_batched(x, indices):
    return apply_primitive("gather-rows-batched", [x], {"indices": indices})


def concatenate(tensors, axis=0):
    return apply_primitive("concatenate", list(tensors), {"axis": axis})


def dropout(x, mask):
    return apply_primitive("dropout-with-explicit-mask", [x], {"mask": mask})


def compose_transform_tree(local, parents):
    return apply_primitive(
        "batched-4x4-transform-compose", [local], {"parents": parents}
    )


def quaternion_normalize(q):
    return apply_primitive("quaternion-normalize", [q])


def unit_quat_to_rotmat(q):
    return apply_primitive("unit-quaternion-to-rotation", [q])


def transform_points(transforms, points):
    return apply_primitive("transform-points", [transforms, points])


def reshape(x, shape):
    return as_tensor(x).reshape(shape)


# gradient verification -----------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    skipped: bool = False
    note: str = ""

    def __str__(self):
        if self.skipped:
            return f"skipped: {self.note}"
        status = "pass" if self.passed else "FAIL"
        return f"{status} (max rel err {self.max_rel_err:.3e})"


def grad_check(f, x, step=1e-5, tol=1e-4, skip_if=None):
    """Compare backward() gradients of scalar f against central differences.

    Relative error uses max(|analytic|, |numeric|, 1) as denominator so
    near-zero gradients are judged on absolute error.  `skip_if(x)` may
    return a reason string to mark x as a non-differentiable point.
    """
    x = np.asarray(x, dtype=np.float64)
    if skip_if is not None:
        reason = skip_if(x)
        if reason:
            return GradCheckReport(True, 0.0, skipped=True, note=reason)

    tape = Tape()
    xt = tape.variable(x)
    y = f(xt)
    if y.data.size != 1:
        raise ContractViolationError("grad_check: f must return a scalar")
    if not np.isfinite(y.data).all():
        raise NumericError("grad_check: f(x) is not finite")
    analytic = backward(tape, y).get(xt.node_id)
    if analytic is None:
        analytic = np.zeros_like(x)
    analytic = analytic.reshape(x.shape)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(f(Tensor(xp.reshape(x.shape))).data)
        fm = float(f(Tensor(xm.reshape(x.shape))).data)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("grad_check: perturbed f(x) is not finite")
        nflat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
    return GradCheckReport(passed=rel <= tol, max_rel_err=rel)
