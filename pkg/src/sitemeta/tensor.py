"""Dense float64 tensors with reverse-mode autodiff, usable to second order.

Every backward rule below is written in terms of the same primitives, so the
tensors returned by :func:`grad` are ordinary graph values that can be
differentiated again. ``create_graph`` only decides whether the caller keeps
those graph links or receives detached constants; the rules themselves are
always built the same way.

Tensors are immutable by convention: no operation writes into an existing
``data`` buffer, updates always produce new tensors.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared in a value or gradient."""


class NotScalarError(ValueError):
    """grad() was asked to differentiate a non-scalar output."""


class CongruenceError(ValueError):
    """Two ParamSets disagree in names, order, or shapes."""


class Tensor:
    """A dense float64 array, optionally linked into a differentiation graph.

    A tensor with ``tracked=False`` is a constant: gradients do not flow
    through it. Tracked leaves (parameters) have no parents; tracked non-leaf
    nodes record their parents and a backward rule.
    """

    __slots__ = ("data", "tracked", "parents", "_vjp")

    def __init__(self, data, *, tracked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.tracked = tracked
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Tensor], tuple[Tensor, ...]] | None = None

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
    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalarError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Constant copy of this value, cut loose from any graph."""
        return Tensor(self.data)

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        tag = "tracked" if self.tracked else "const"
        return f"Tensor({self.data!r}, {tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    """A tracked leaf: gradients accumulate at this node."""
    return Tensor(data, tracked=True)


def _node(data, parents: Sequence[Tensor], vjp) -> Tensor:
    """Op output: tracked iff any parent is, untracked results drop the graph."""
    if not any(p.tracked for p in parents):
        return Tensor(data)
    out = Tensor(data, tracked=True)
    out.parents = tuple(parents)
    out._vjp = vjp
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------------------
# primitives (each backward rule is built from these same primitives)

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (neg(g),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (scalar_mul(g, c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    inverse = tuple(np.argsort(axes))
    return _node(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (transpose(g, inverse),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(x) for x in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),))


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape
    kept = tuple(1 if i in axes else d for i, d in enumerate(in_shape))

    def vjp(g: Tensor) -> tuple[Tensor, ...]:
        gg = g if keepdims else reshape(g, kept)
        return (broadcast_to(gg, in_shape),)

    return _node(out, (a,), vjp)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(x) for x in shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    in_shape = a.shape

    def vjp(g: Tensor) -> tuple[Tensor, ...]:
        extra = len(shape) - len(in_shape)
        gg = g
        if extra:
            gg = reduce_sum(gg, axis=tuple(range(extra)))
        squeezed = tuple(
            i for i, d in enumerate(in_shape) if d == 1 and gg.shape[i] != 1
        )
        if squeezed:
            gg = reduce_sum(gg, axis=squeezed, keepdims=True)
        if gg.shape != in_shape:
            gg = reshape(gg, in_shape)
        return (gg,)

    return _node(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(np.float64))
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _node(s, (a,), None)
    # d sigma = sigma * (1 - sigma), written via the output node so the rule
    # itself stays differentiable
    out._vjp = lambda g: (mul(g, sub(out, mul(out, out))),)
    return out


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (mul(g, sigmoid(a)),))


def pad(a: Tensor, pad_width: Sequence[tuple[int, int]]) -> Tensor:
    pw = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    if len(pw) != a.ndim:
        raise ShapeError(f"pad: {len(pw)} pad pairs for rank-{a.ndim} tensor")
    return _node(np.pad(a.data, pw), (a,), lambda g: (crop(g, pw),))


def crop(a: Tensor, pad_width: Sequence[tuple[int, int]]) -> Tensor:
    pw = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    if len(pw) != a.ndim:
        raise ShapeError(f"crop: {len(pw)} pad pairs for rank-{a.ndim} tensor")
    slices = tuple(slice(lo, d - hi) for (lo, hi), d in zip(pw, a.shape))
    return _node(np.ascontiguousarray(a.data[slices]), (a,), lambda g: (pad(g, pw),))


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; output takes the index array's shape."""
    idx = np.asarray(indices, dtype=np.int64)
    in_shape = a.shape
    return _node(a.data.reshape(-1)[idx], (a,), lambda g: (scatter(g, idx, in_shape),))


def scatter(a: Tensor, indices: np.ndarray, shape: Sequence[int]) -> Tensor:
    """Adjoint of :func:`take`: sum values into a zero tensor of ``shape``."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = tuple(int(x) for x in shape)
    if idx.shape != a.shape:
        raise ShapeError(f"scatter: index shape {idx.shape} vs value shape {a.shape}")
    buf = np.zeros(int(np.prod(shape, dtype=np.int64)), dtype=np.float64)
    np.add.at(buf, idx.reshape(-1), a.data.reshape(-1))
    return _node(buf.reshape(shape), (a,), lambda g: (take(g, idx),))


# ---------------------------------------------------------------------------
# composites

def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def mean(a: Tensor) -> Tensor:
    return scalar_mul(reduce_sum(a), 1.0 / a.size)


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply by a rank-0 tensor, differentiable in both operands."""
    if s.ndim != 0:
        raise ShapeError(f"scale: scale factor must be rank 0, got {s.shape}")
    if a.ndim == 0:
        return mul(a, s)
    return mul(a, broadcast_to(reshape(s, (1,) * a.ndim), a.shape))


def bias_add(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    if b.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not fit {x.shape} at axis {axis}")
    view = tuple(b.shape[0] if i == axis else 1 for i in range(x.ndim))
    return add(x, broadcast_to(reshape(b, view), x.shape))


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy from logits; labels are constants in {0, 1}."""
    y = _as_tensor(labels).detach()
    _check_same_shape("bce_with_logits", logits, y)
    per_example = sub(softplus(logits), mul(logits, y))
    return mean(per_example)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expects (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2d: spatial extents too small in {x.shape}")
    xe = x
    if h % 2 or w % 2:
        xe = crop(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)))
    he, we = 2 * h2, 2 * w2
    windows = xe.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    arg = windows.reshape(n, c, h2, w2, 4).argmax(axis=-1)
    oh = np.arange(h2).reshape(1, 1, h2, 1)
    ow = np.arange(w2).reshape(1, 1, 1, w2)
    ni = np.arange(n).reshape(n, 1, 1, 1)
    ci = np.arange(c).reshape(1, c, 1, 1)
    rows = 2 * oh + arg // 2
    cols = 2 * ow + arg % 2
    flat = ((ni * c + ci) * he + rows) * we + cols
    return take(xe, flat)


_IM2COL_CACHE: dict[tuple, np.ndarray] = {}


def _im2col_indices(shape: tuple[int, int, int, int], kh: int, kw: int) -> np.ndarray:
    key = (shape, kh, kw)
    cached = _IM2COL_CACHE.get(key)
    if cached is not None:
        return cached
    n, c, h, w = shape
    oh, ow = h - kh + 1, w - kw + 1
    ni = np.arange(n).reshape(n, 1, 1, 1, 1, 1)
    oi = np.arange(oh).reshape(1, oh, 1, 1, 1, 1)
    oj = np.arange(ow).reshape(1, 1, ow, 1, 1, 1)
    ci = np.arange(c).reshape(1, 1, 1, c, 1, 1)
    ki = np.arange(kh).reshape(1, 1, 1, 1, kh, 1)
    kj = np.arange(kw).reshape(1, 1, 1, 1, 1, kw)
    flat = ((ni * c + ci) * h + oi + ki) * w + oj + kj
    idx = flat.reshape(n * oh * ow, c * kh * kw)
    _IM2COL_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 2-D convolution with zero padding, via im2col + matmul."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects rank-4 input and kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channels {c} vs kernel channels {cw}")
    p = int(padding)
    xp = pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    hp, wp = h + 2 * p, wd + 2 * p
    oh, ow = hp - kh + 1, wp - kw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} too large for padded input {(hp, wp)}")
    idx = _im2col_indices((n, c, hp, wp), kh, kw)
    cols = take(xp, idx)
    wmat = transpose(reshape(w, (f, c * kh * kw)))
    out = matmul(cols, wmat)
    out = transpose(reshape(out, (n, oh, ow, f)), (0, 3, 1, 2))
    if b is not None:
        out = bias_add(out, b, axis=1)
    return out


# ---------------------------------------------------------------------------
# parameter collections

class ParamSet:
    """Ordered, uniquely named collection of tensors."""

    __slots__ = ("_names", "_tensors", "_index")

    def __init__(self, pairs: Iterable[tuple[str, Tensor]]):
        names: list[str] = []
        tensors: list[Tensor] = []
        index: dict[str, int] = {}
        for name, t in pairs:
            if name in index:
                raise ValueError(f"duplicate parameter name {name!r}")
            index[name] = len(names)
            names.append(name)
            tensors.append(t)
        self._names = tuple(names)
        self._tensors = tuple(tensors)
        self._index = index

    @classmethod
    def from_arrays(cls, pairs: Iterable[tuple[str, np.ndarray]], tracked: bool = True) -> "ParamSet":
        return cls((name, Tensor(arr, tracked=tracked)) for name, arr in pairs)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(zip(self._names, self._tensors))

    def tensors(self) -> tuple[Tensor, ...]:
        return self._tensors

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[self._index[name]]

    def congruent(self, other: "ParamSet") -> bool:
        return self._names == other._names and all(
            a.shape == b.shape for a, b in zip(self._tensors, other._tensors)
        )

    def require_congruent(self, other: "ParamSet", context: str = "") -> None:
        if not self.congruent(other):
            where = f" in {context}" if context else ""
            raise CongruenceError(
                f"parameter sets are not congruent{where}: "
                f"{[(n, t.shape) for n, t in self.items()]} vs "
                f"{[(n, t.shape) for n, t in other.items()]}"
            )

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "ParamSet":
        return ParamSet((name, fn(name, t)) for name, t in self.items())

    def zip_map(self, other: "ParamSet", fn: Callable[[str, Tensor, Tensor], Tensor]) -> "ParamSet":
        self.require_congruent(other)
        return ParamSet(
            (name, fn(name, a, b))
            for (name, a), b in zip(self.items(), other.tensors())
        )

    def detach(self) -> "ParamSet":
        return self.map(lambda _, t: t.detach())

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items()}

    def total_size(self) -> int:
        return sum(t.size for t in self._tensors)


# ---------------------------------------------------------------------------
# differentiation

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.tracked and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: ParamSet, create_graph: bool = False) -> ParamSet:
    """Reverse-mode gradient of a scalar output for every tensor in ``wrt``.

    Tensors unreachable from ``output`` get a zero gradient of matching
    shape. With ``create_graph`` the returned gradients keep their graph
    links, so a further :func:`grad` through them yields second-order
    derivatives; without it they are detached constants.
    """
    if output.shape != ():
        raise NotScalarError(f"grad: output has shape {output.shape}, expected a scalar")
    adjoint: dict[int, Tensor] = {}
    if output.tracked:
        adjoint[id(output)] = Tensor(1.0)
        for node in reversed(_topo_order(output)):
            g = adjoint.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node.parents, node._vjp(g)):
                if not parent.tracked:
                    continue
                held = adjoint.get(id(parent))
                adjoint[id(parent)] = pg if held is None else add(held, pg)

    pairs: list[tuple[str, Tensor]] = []
    for name, p in wrt.items():
        g = adjoint.get(id(p))
        if g is None:
            g = Tensor(np.zeros(p.shape))
        elif not create_graph:
            g = g.detach()
        if not np.all(np.isfinite(g.data)):
            raise NonFiniteError(f"gradient of parameter {name!r} is not finite")
        pairs.append((name, g))
    return ParamSet(pairs)


def finite_diff_grad(
    loss_fn: Callable[[ParamSet], Tensor | float],
    params: ParamSet,
    eps: float = 1e-5,
) -> ParamSet:
    """Central-difference gradient oracle, (f(x+eps) - f(x-eps)) / 2eps per entry."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    def evaluate(ps: ParamSet) -> float:
        out = loss_fn(ps)
        val = float(out) if isinstance(out, Tensor) else float(out)
        if not np.isfinite(val):
            raise NonFiniteError("loss is not finite at a perturbed point")
        return val

    base = {name: t.data.copy() for name, t in params.items()}

    def perturbed(target: str, flat_index: int, delta: float) -> ParamSet:
        pairs = []
        for name, arr in base.items():
            if name == target:
                bumped = arr.copy()
                bumped.reshape(-1)[flat_index] += delta
                pairs.append((name, Tensor(bumped, tracked=True)))
            else:
                pairs.append((name, Tensor(arr, tracked=True)))
        return ParamSet(pairs)

    grads = []
    for name, arr in base.items():
        g = np.zeros_like(arr)
        gf = g.reshape(-1)
        for i in range(arr.size):
            hi = evaluate(perturbed(name, i, eps))
            lo = evaluate(perturbed(name, i, -eps))
            gf[i] = (hi - lo) / (2.0 * eps)
        grads.append((name, Tensor(g)))
    return ParamSet(grads)


# ---------------------------------------------------------------------------
# serialization: length-prefixed name, rank and extents as little-endian
# u64, data as little-endian f64 in row-major order

def write_named_array(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    blob = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)
    a = np.asarray(arr, dtype="<f8")  # tobytes() already emits row-major
    fh.write(struct.pack("<Q", a.ndim))
    for extent in a.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(a.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise EOFError(f"truncated tensor record: wanted {n} bytes, got {len(blob)}")
    return blob


def _read_u64(fh: BinaryIO) -> int:
    return struct.unpack("<Q", _read_exact(fh, 8))[0]


def read_named_array(fh: BinaryIO) -> tuple[str, np.ndarray]:
    name = _read_exact(fh, _read_u64(fh)).decode("utf-8")
    rank = _read_u64(fh)
    shape = tuple(_read_u64(fh) for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(shape)


def write_paramset(fh: BinaryIO, params: ParamSet) -> None:
    fh.write(struct.pack("<Q", len(params)))
    for name, t in params.items():
        write_named_array(fh, name, t.data)


def read_paramset(fh: BinaryIO, tracked: bool = True) -> ParamSet:
    count = _read_u64(fh)
    return ParamSet.from_arrays(
        (read_named_array(fh) for _ in range(count)), tracked=tracked
    )
