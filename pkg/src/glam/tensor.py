"""Minimal deterministic tensor kernel with reverse-mode gradients.

Values are double-precision numpy arrays, row-major. Differentiable
operations record a backward closure so a scalar quantity can be pulled
back to any leaf created with ``requires_grad=True``. All contractions
(matmul, convolutions) go through ``np.einsum`` with a fixed summation
order, which keeps results bit-identical no matter how many BLAS threads
the host process allows.
"""

from __future__ import annotations

import numpy as np

L2_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DegenerateDescriptorWarning(UserWarning):
    """A vector expected to be normalizable was (almost) zero."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Dense float64 array plus an optional gradient slot.

    Leaves are built directly (``Tensor(data, requires_grad=True)`` for
    trainable parameters); operation results carry the closures needed by
    :meth:`backward`. ``data`` must never be mutated while a graph built
    from it is still alive, except for leaves between forward passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor values must be finite")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar used throughout the attention code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        ``seed`` is the upstream gradient with the same shape as ``data``;
        it defaults to ones, which for a scalar output yields plain
        derivatives. Gradients accumulate across calls until cleared.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = _as_f64(seed)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} != value shape {self.data.shape}")
        order = _toposort(self)
        _accumulate(self, seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise / structural operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting (extent 1 stretches)."""
    _check_broadcast(a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


# the spec-facing name for broadcasting elementwise multiplication
ewmul_broadcast = mul


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accumulate(x, g * s)

    return _result(x.data * s, (x,), backward)


def power(x: Tensor, p) -> Tensor:
    """``x ** p`` with ``p`` a float or a broadcastable Tensor.

    Differentiable in the exponent only for strictly positive base.
    """
    if isinstance(p, Tensor):
        _check_broadcast(x, p)
        data = x.data ** p.data

        def backward(g):
            _accumulate(x, _unbroadcast(g * p.data * x.data ** (p.data - 1.0),
                                        x.shape))
            _accumulate(p, _unbroadcast(g * data * np.log(x.data), p.shape))

        return _result(data, (x, p), backward)

    pf = float(p)
    data = x.data ** pf

    def backward(g):
        _accumulate(x, g * pf * x.data ** (pf - 1.0))

    return _result(data, (x,), backward)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    mask = x.data > floor

    def backward(g):
        _accumulate(x, g * mask)

    return _result(np.maximum(x.data, floor), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def backward(g):
        _accumulate(x, g * mask)

    return _result(np.maximum(x.data, 0.0), (x,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(g):
        _accumulate(x, g * y * (1.0 - y))

    return _result(y, (x,), backward)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Softmax along one axis, computed with max subtraction for stability.

    Output is nonnegative and sums to 1 along ``axis`` for any finite input.
    """
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - dot))

    return _result(y, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    data = np.ascontiguousarray(x.data).reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(data, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.size,))


def transpose2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {x.shape}")

    def backward(g):
        _accumulate(x, np.ascontiguousarray(g.T))

    return _result(np.ascontiguousarray(x.data.T), (x,), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        other[axis] = base[axis]
        if other != base:
            raise ShapeError("concat parts differ off the join axis")
    data = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        for piece, p in zip(np.split(g, splits, axis=axis), parts):
            _accumulate(p, piece)

    return _result(data, tuple(parts), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def backward(g):
        _accumulate(x, np.full(x.shape, float(g)))

    return _result(np.asarray(x.data.sum()), (x,), backward)


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape} incompatible")
    data = np.einsum("ij,jk->ik", a.data, b.data)

    def backward(g):
        _accumulate(a, np.einsum("ik,jk->ij", g, b.data))
        _accumulate(b, np.einsum("ij,ik->jk", a.data, g))

    return _result(data, (a, b), backward)


def matvec(m: Tensor, v: Tensor) -> Tensor:
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec shapes {m.shape} x {v.shape} incompatible")
    data = np.einsum("ij,j->i", m.data, v.data)

    def backward(g):
        _accumulate(m, np.einsum("i,j->ij", g, v.data))
        _accumulate(v, np.einsum("ij,i->j", m.data, g))

    return _result(data, (m, v), backward)


def gap(x: Tensor) -> Tensor:
    """Global average pooling: per-channel spatial mean of a [c,h,w] tensor."""
    if x.ndim != 3:
        raise ShapeError(f"gap expects [c,h,w], got shape {x.shape}")
    c, h, w = x.shape
    inv = 1.0 / (h * w)
    data = np.einsum("chw->c", x.data) * inv

    def backward(g):
        _accumulate(x, np.broadcast_to((g * inv)[:, None, None], x.shape).copy())

    return _result(data, (x,), backward)


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Zero-padded same-length 1D cross-correlation along a vector.

    Kernel length must be odd so the output aligns with the input.
    """
    if x.ndim != 1 or kernel.ndim != 1:
        raise ShapeError("conv1d_same expects vectors")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"kernel length must be odd, got {k}")
    c = x.shape[0]
    r = k // 2
    xp = np.zeros(c + 2 * r)
    xp[r:r + c] = x.data
    out = np.zeros(c)
    for t in range(k):
        out += kernel.data[t] * xp[t:t + c]
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        if bias.size != 1:
            raise ShapeError("conv1d_same bias must be a scalar")
        out = out + bias.data.reshape(())
        parents = (x, kernel, bias)

    def backward(g):
        gxp = np.zeros(c + 2 * r)
        gk = np.zeros(k)
        for t in range(k):
            gk[t] = np.einsum("i,i->", g, xp[t:t + c])
            gxp[t:t + c] += kernel.data[t] * g
        _accumulate(x, gxp[r:r + c])
        _accumulate(kernel, gk)
        if bias is not None:
            _accumulate(bias, np.asarray(g.sum()).reshape(bias.shape))

    return _result(out, parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding and dilation, no kernel flip.

    ``x`` is [cin,h,w], ``weight`` [cout,cin,kh,kw]; the effective receptive
    field along each axis is (k-1)*dilation + 1. No stride: callers that
    need one subsample the output (see :func:`subsample2`).
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError("conv2d expects input [cin,h,w] and weight [cout,cin,kh,kw]")
    cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"input has {cin} channels, weight expects {wcin}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    ho = h + 2 * padding - (kh - 1) * dilation
    wo = w + 2 * padding - (kw - 1) * dilation
    if ho < 1 or wo < 1:
        raise ShapeError("kernel does not fit the padded input")
    xp = np.zeros((cin, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x.data
    out = np.zeros((cout, ho, wo))
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, dy * dilation:dy * dilation + ho,
                       dx * dilation:dx * dilation + wo]
            out += np.einsum("oi,iyx->oyx", weight.data[:, :, dy, dx], patch)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
        out += bias.data[:, None, None]
        parents = (x, weight, bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for dy in range(kh):
            for dx in range(kw):
                ys = slice(dy * dilation, dy * dilation + ho)
                xs = slice(dx * dilation, dx * dilation + wo)
                gw[:, :, dy, dx] = np.einsum("oyx,iyx->oi", g, xp[:, ys, xs])
                gxp[:, ys, xs] += np.einsum("oi,oyx->iyx",
                                            weight.data[:, :, dy, dx], g)
        _accumulate(x, gxp[:, padding:padding + h, padding:padding + w])
        _accumulate(weight, gw)
        if bias is not None:
            _accumulate(bias, np.einsum("oyx->o", g))

    return _result(out, parents, backward)


def subsample2(x: Tensor) -> Tensor:
    """Keep every second spatial row and column of a [c,h,w] tensor."""
    if x.ndim != 3:
        raise ShapeError(f"subsample2 expects [c,h,w], got shape {x.shape}")
    data = np.ascontiguousarray(x.data[:, ::2, ::2])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, ::2, ::2] = g
        _accumulate(x, gx)

    return _result(data, (x,), backward)


def l2_normalize(v: Tensor, warn: bool = True) -> Tensor:
    """Scale a vector to unit length, preserving direction.

    A vector with norm below 1e-12 cannot be normalized; the result is the
    zero vector (with zero gradient) and a ``DegenerateDescriptorWarning``
    is emitted unless ``warn`` is False.
    """
    if v.ndim != 1:
        raise ShapeError(f"l2_normalize expects a vector, got shape {v.shape}")
    norm = float(np.sqrt(np.einsum("i,i->", v.data, v.data)))
    if norm <= L2_EPS:
        if warn:
            import warnings
            warnings.warn("cannot normalize a near-zero vector",
                          DegenerateDescriptorWarning, stacklevel=2)

        def backward_zero(g):
            _accumulate(v, np.zeros_like(v.data))

        return _result(np.zeros_like(v.data), (v,), backward_zero)
    y = v.data / norm

    def backward(g):
        proj = float(np.einsum("i,i->", y, g))
        _accumulate(v, (g - proj * y) / norm)

    return _result(y, (v,), backward)


# ---------------------------------------------------------------------------
# gradient contract


class GradPair:
    """A value plus the evaluator that maps upstream gradients to leaf gradients."""

    def __init__(self, value: Tensor, leaves: tuple[Tensor, ...]):
        self.value = value
        self.leaves = leaves

    def pull_back(self, upstream: np.ndarray | None = None) -> list[np.ndarray]:
        """Return d(value)/d(leaf) contracted against ``upstream``.

        Each returned array has the shape of the leaf it differentiates
        with respect to (zeros for leaves the value does not depend on).
        """
        for leaf in self.leaves:
            leaf.zero_grad()
        self.value.backward(upstream)
        return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
                for leaf in self.leaves]


def trace(f, *leaves: Tensor) -> GradPair:
    """Run ``f(*leaves)`` and package the result with its gradient evaluator."""
    for leaf in leaves:
        leaf.requires_grad = True
    return GradPair(f(*leaves), leaves)


# ---------------------------------------------------------------------------
# GLTN binary format: magic, u32 LE rank, rank u32 extents, f32 LE payload


GLTN_MAGIC = b"GLTN"


def write_gltn(fh, arr: np.ndarray) -> None:
    """Append one GLTN block (f32 payload, row-major) to a binary stream."""
    arr = np.asarray(arr)
    fh.write(GLTN_MAGIC)
    fh.write(np.uint32(arr.ndim).tobytes())
    fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_gltn(fh) -> np.ndarray:
    """Read one GLTN block, returning a float64 array.

    Raises ValueError naming the absolute byte offset and the field that
    failed to parse.
    """
    start = fh.tell()
    magic = fh.read(4)
    if magic != GLTN_MAGIC:
        raise ValueError(f"bad GLTN magic at byte {start} (field: magic)")
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError(f"truncated GLTN rank at byte {start + 4} (field: rank)")
    rank = int(np.frombuffer(raw, dtype="<u4")[0])
    if rank > 8:
        raise ValueError(f"implausible GLTN rank {rank} at byte {start + 4} (field: rank)")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise ValueError(f"truncated GLTN extents at byte {start + 8} (field: extents)")
    shape = tuple(int(n) for n in np.frombuffer(raw, dtype="<u4"))
    count = 1
    for n in shape:
        if n < 1:
            raise ValueError(f"non-positive GLTN extent at byte {start + 8} (field: extents)")
        count *= n
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError(
            f"truncated GLTN payload at byte {start + 8 + 4 * rank} (field: payload)")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
