"""numpy-backed dense tensors with tape-based reverse-mode autodiff.

Everything downstream (conv kernels, sequence blocks, the U-Net, the loss)
is built from the ops in this module plus the fused kernels in nnops.py, so
the contract here is deliberately strict:

- dtypes: float32 (training), float64 (gradient checking), int32 / uint8
  (labels, masks).  Gradients only exist for float tensors.
- binary elementwise ops require equal shapes, or one side to be a scalar
  (python number or 0-d tensor).  Any other broadcast must be spelled out
  with ``broadcast_to`` so the backward of every op mirrors its forward
  exactly; implicit numpy broadcasting is rejected on purpose.
- ops record onto the innermost active ``Graph`` only when some input
  requires grad.  With no active graph they are plain numpy (inference).

Finiteness policy: ops do not sweep their outputs with ``isfinite`` (the
attention-style sequence kernel legitimately feeds ``-inf`` log-weights into
``exp`` to encode causal masking, and exact zeros come out).  Instead, every
place where a NaN could otherwise appear *silently* — gate activations, the
loss value, optimizer gradients — performs a named check; see vil.py,
losses.py and optim.py.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ContractError",
    "GraphError",
    "NumericsError",
    "Tensor",
    "Graph",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "silu",
    "leaky_relu",
    "absolute",
    "max_with_scalar",
    "matmul",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "cumsum",
    "reshape",
    "permute",
    "reshape_permute",
    "broadcast_to",
    "flip",
    "concat",
    "narrow",
    "split",
    "pad",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_SUPPORTED_DTYPES = _FLOAT_DTYPES + (np.dtype(np.int32), np.dtype(np.uint8))


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class GraphError(RuntimeError):
    """The autodiff tape was misused (double backward, stale loss, ...)."""


class NumericsError(ArithmeticError):
    """A value that must stay finite became NaN/Inf (named check sites only)."""


class Tensor:
    """A dense ndarray plus autodiff metadata.

    ``data`` is the raw ndarray (shared, never copied defensively), ``grad``
    is ``None`` until a backward pass deposits an ndarray of the same shape.
    Python floats/ints passed as ``data`` default to float32/int32.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("Tensor(data): wrap raw arrays, not another Tensor")
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not isinstance(data, (np.ndarray, np.generic)):
            # python scalars / lists arrive as float64 / int64; keep the
            # package's working precision instead.  numpy arrays *and*
            # numpy scalars carry an explicit dtype and keep it.
            if arr.dtype == np.float64:
                arr = arr.astype(np.float32)
            elif arr.dtype == np.int64:
                arr = arr.astype(np.int32)
        if arr.dtype not in _SUPPORTED_DTYPES:
            raise ContractError(
                f"unsupported dtype {arr.dtype}; supported: float32, float64, int32, uint8"
            )
        if requires_grad and arr.dtype not in _FLOAT_DTYPES:
            raise ContractError(f"requires_grad needs a float tensor, got {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return self.data.reshape(()).item()

    def detach(self) -> "Tensor":
        """Same storage, severed from any graph."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        flags = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flags})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# tape


class Graph:
    """Records differentiable ops, in execution order, for one reverse sweep.

    Use as a context manager around a forward pass::

        with Graph() as g:
            loss = model(x)
        backward(loss, g)

    A graph is single-use: ``backward`` consumes it.  Ops executed while no
    graph is active are not recorded at all.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Graph":
        if _GRAPH_STACK:
            raise GraphError(
                "graphs do not nest: finish the active recording before opening another"
            )
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAPH_STACK.remove(self)
        return False

    def _add_node(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._produced.add(id(out))
        self._nodes.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf.

        Leaves are the requires-grad tensors that entered the graph without
        being produced by it (parameters, checked inputs).  Leaves the loss
        does not depend on receive zero gradients, not ``None``.
        """
        if self._consumed:
            raise GraphError("this graph was already consumed by backward(); record a fresh forward pass")
        if not isinstance(loss, Tensor):
            raise ContractError("backward: loss must be a Tensor")
        if loss.size != 1:
            raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise GraphError(
                "stale graph: the loss was not computed while this graph was recording"
            )
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._nodes):
            gout = grads.pop(id(out), None)
            if gout is None:
                continue
            gins = vjp(gout)
            for t, gin in zip(inputs, gins):
                if gin is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gin if acc is None else acc + gin
        for tid, leaf in self._leaves.items():
            g = grads.get(tid)
            if g is None:
                g = np.zeros_like(leaf.data)
            else:
                g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


_GRAPH_STACK: list[Graph] = []


def _active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Run the reverse sweep for ``loss`` on ``graph`` (default: active graph)."""
    g = graph if graph is not None else _active_graph()
    if g is None:
        raise GraphError("backward: no graph given and none is active")
    g.backward(loss)


def record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Attach ``out = op(inputs)`` to the active graph, if grads are wanted.

    ``vjp(gout)`` must return one cotangent per input (``None`` for inputs
    that are not differentiable arguments).
    """
    g = _active_graph()
    if g is None:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    g._add_node(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# helpers


def _require_float(t: Tensor, op: str) -> None:
    if t.data.dtype not in _FLOAT_DTYPES:
        raise ContractError(f"{op}: requires a float tensor, got {t.data.dtype}")


def _as_tensor(x, dtype, op: str) -> Tensor:
    """Coerce a python number (or 0-d array) into a constant Tensor."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.ndim != 0:
        raise ContractError(f"{op}: expected a Tensor or scalar, got array of shape {arr.shape}")
    return Tensor(arr.astype(dtype))


def _coerce_pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    """Promote python scalars, enforce the equal-or-scalar shape rule."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError(f"{op}: at least one operand must be a Tensor")
    if isinstance(a, Tensor):
        b = _as_tensor(b, a.data.dtype, op)
    else:
        a = _as_tensor(a, b.data.dtype, op)
    _require_float(a, op)
    _require_float(b, op)
    if a.data.dtype != b.data.dtype:
        raise ContractError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ContractError(
            f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar;"
            " use broadcast_to for explicit broadcasting"
        )
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axes(axis, ndim: int, op: str) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim if -ndim <= a < ndim else a for a in axis)
    for a in axes:
        if not 0 <= a < ndim:
            raise ContractError(f"{op}: axis {a} out of range for ndim {ndim}")
    if len(set(axes)) != len(axes):
        raise ContractError(f"{op}: repeated axis in {axis}")
    return axes


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "add")
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "sub")
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "mul")
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return record(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "div")
    out = Tensor(a.data / b.data)

    def vjp(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return record(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise unary


def neg(x: Tensor) -> Tensor:
    _require_float(x, "neg")
    out = Tensor(-x.data)
    return record(out, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    _require_float(x, "exp")
    y = np.exp(x.data)
    out = Tensor(y)
    return record(out, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    _require_float(x, "log")
    if np.any(x.data <= 0):
        raise NumericsError("log: inputs must be strictly positive")
    out = Tensor(np.log(x.data))
    return record(out, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    _require_float(x, "sqrt")
    if np.any(x.data <= 0):
        raise NumericsError("sqrt: inputs must be strictly positive (derivative at 0 diverges)")
    y = np.sqrt(x.data)
    out = Tensor(y)
    return record(out, (x,), lambda g: (g / (2.0 * y),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    _require_float(x, "sigmoid")
    y = _stable_sigmoid(x.data)
    out = Tensor(y)
    return record(out, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    _require_float(x, "silu")
    s = _stable_sigmoid(x.data)
    out = Tensor(x.data * s)
    return record(out, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def leaky_relu(x: Tensor, negative_slope: float = 0.01) -> Tensor:
    _require_float(x, "leaky_relu")
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, negative_slope * x.data))

    def vjp(g):
        return (g * np.where(pos, np.asarray(1.0, x.data.dtype), np.asarray(negative_slope, x.data.dtype)),)

    return record(out, (x,), vjp)


def absolute(x: Tensor) -> Tensor:
    """|x|; subgradient 0 at x == 0."""
    _require_float(x, "absolute")
    out = Tensor(np.abs(x.data))
    return record(out, (x,), lambda g: (g * np.sign(x.data),))


def max_with_scalar(x: Tensor, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient passes where x >= floor."""
    _require_float(x, "max_with_scalar")
    floor = float(floor)
    keep = x.data >= floor
    out = Tensor(np.where(keep, x.data, np.asarray(floor, x.data.dtype)))
    return record(out, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product, numpy semantics for leading batch dims.

    Both operands must have ndim >= 2; trailing two axes contract as
    ``(..., m, k) @ (..., k, n)``.  Leading axes broadcast (the usual case is
    a stack of row vectors times an unbatched weight matrix); the backward
    sums the cotangent back down to each operand's shape.
    """
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ContractError("matmul: both operands must be Tensors")
    _require_float(a, "matmul")
    _require_float(b, "matmul")
    if a.data.dtype != b.data.dtype:
        raise ContractError(f"matmul: mixed dtypes {a.data.dtype} vs {b.data.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul: operands need ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ContractError(f"matmul: batch dims incompatible: {a.shape} @ {b.shape}") from e
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        ga = _reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        if _BACKWARD_FAULT[0] != 0.0:
            gb = gb * (1.0 + _BACKWARD_FAULT[0])
        return ga, gb

    return record(out, (a, b), vjp)


# Deliberate-fault hook for the gradient checker's negative control: when set
# nonzero (see gradcheck.corrupted_backward) matmul's weight cotangent is
# scaled wrong and any check involving a matmul must fail.
_BACKWARD_FAULT = [0.0]


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _require_float(x, "reduce_sum")
    axes = _norm_axes(axis, x.ndim, "reduce_sum")
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return record(out, (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _require_float(x, "reduce_mean")
    axes = _norm_axes(axis, x.ndim, "reduce_mean")
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape) / count,)

    return record(out, (x,), vjp)


def reduce_max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient routes to the first maximal element."""
    _require_float(x, "reduce_max")
    (ax,) = _norm_axes(axis, x.ndim, "reduce_max")
    m = x.data.max(axis=ax, keepdims=True)
    hit = x.data == m
    first = np.cumsum(hit, axis=ax) == 1
    mask = (hit & first).astype(x.data.dtype)
    out = Tensor(m if keepdims else np.squeeze(m, axis=ax))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (mask * g,)

    return record(out, (x,), vjp)


def cumsum(x: Tensor, axis: int) -> Tensor:
    _require_float(x, "cumsum")
    (ax,) = _norm_axes(axis, x.ndim, "cumsum")
    out = Tensor(np.cumsum(x.data, axis=ax))

    def vjp(g):
        rev = np.flip(g, axis=ax)
        return (np.flip(np.cumsum(rev, axis=ax), axis=ax),)

    return record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise ContractError(f"reshape: cannot view shape {x.shape} as {shape}") from e
    out = Tensor(y)
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ContractError(f"permute: {axes} is not a permutation of axes for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    return record(out, (x,), lambda g: (g.transpose(inv),))


def reshape_permute(x: Tensor, new_shape, axis_order) -> Tensor:
    """Permute axes by ``axis_order`` then reshape to ``new_shape`` (one node)."""
    axis_order = tuple(axis_order)
    new_shape = tuple(new_shape)
    if sorted(axis_order) != list(range(x.ndim)):
        raise ContractError(
            f"reshape_permute: {axis_order} is not a permutation of axes for shape {x.shape}"
        )
    permuted = x.data.transpose(axis_order)
    try:
        y = permuted.reshape(new_shape)
    except ValueError as e:
        raise ContractError(
            f"reshape_permute: cannot view permuted shape {permuted.shape} as {new_shape}"
        ) from e
    inv = tuple(np.argsort(axis_order))
    mid_shape = permuted.shape
    out = Tensor(y)
    return record(out, (x,), lambda g: (g.reshape(mid_shape).transpose(inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-rules broadcast; backward sums over the expanded axes."""
    _require_float(x, "broadcast_to")
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ContractError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from e
    out = Tensor(y)
    return record(out, (x,), lambda g: (_reduce_to(g, x.shape),))


def flip(x: Tensor, axes) -> Tensor:
    # contiguous copies, not negative-stride views: downstream BLAS calls
    # must see the same memory layout whether the caller flipped the data
    # itself or went through this op, so that both routes are bit-identical
    axes = _norm_axes(axes, x.ndim, "flip")
    out = Tensor(np.ascontiguousarray(np.flip(x.data, axis=axes)))
    return record(out, (x,), lambda g: (np.ascontiguousarray(np.flip(g, axis=axes)),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    for t in tensors:
        if not isinstance(t, Tensor):
            raise ContractError("concat: all inputs must be Tensors")
        _require_float(t, "concat")
    (ax,) = _norm_axes(axis, tensors[0].ndim, "concat")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != ax and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ContractError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {ax}")
        if t.data.dtype != tensors[0].data.dtype:
            raise ContractError("concat: mixed dtypes")
    sizes = [t.shape[ax] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record(out, tuple(tensors), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``x[..., start:start+length, ...]`` along ``axis``."""
    _require_float(x, "narrow")
    (ax,) = _norm_axes(axis, x.ndim, "narrow")
    if not (0 <= start and length >= 1 and start + length <= x.shape[ax]):
        raise ContractError(
            f"narrow: [{start}, {start + length}) out of bounds for axis {ax} of shape {x.shape}"
        )
    sl = tuple(slice(None) if i != ax else slice(start, start + length) for i in range(x.ndim))
    out = Tensor(x.data[sl].copy())

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return record(out, (x,), vjp)


def split(x: Tensor, sections, axis: int) -> list[Tensor]:
    """Split into equal ``sections`` (int) or given sizes (sequence)."""
    (ax,) = _norm_axes(axis, x.ndim, "split")
    n = x.shape[ax]
    if isinstance(sections, int):
        if sections <= 0 or n % sections != 0:
            raise ContractError(f"split: {n} does not divide into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise ContractError(f"split: sizes {sizes} do not sum to axis length {n}")
    outs = []
    start = 0
    for s in sizes:
        outs.append(narrow(x, ax, start, s))
        start += s
    return outs


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` is one (before, after) pair per axis."""
    _require_float(x, "pad")
    pw = [(int(b), int(a)) for b, a in pad_width]
    if len(pw) != x.ndim or any(b < 0 or a < 0 for b, a in pw):
        raise ContractError(f"pad: need {x.ndim} non-negative (before, after) pairs, got {pad_width}")
    out = Tensor(np.pad(x.data, pw))
    core = tuple(slice(b, b + n) for (b, _), n in zip(pw, x.shape))
    return record(out, (x,), lambda g: (g[core],))
