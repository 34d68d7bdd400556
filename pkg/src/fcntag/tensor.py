"""Dense n-d arrays with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure computing the vector-Jacobian product.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order (the "tape") and accumulates gradients by summation.

The operator set is deliberately closed: add, mul, matmul, conv2d,
maxpool2d, batchnorm, relu, sigmoid, dropout, mean, sum, reshape, concat,
plus the fused binary cross-entropy loss used for training.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "forward_op",
    "build_tape",
    "grad_check",
    "add",
    "mul",
    "matmul",
    "conv2d",
    "maxpool2d",
    "batchnorm",
    "relu",
    "sigmoid",
    "dropout",
    "mean",
    "sum",
    "reshape",
    "concat",
    "binary_cross_entropy",
    "im2col",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # operator sugar; every one of these lowers onto the closed op set
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        tape = build_tape(self)
        if not tape:
            raise ValueError("backward() called on a tensor with no recorded operations")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _accumulate(node, g)
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # leaves are not on the tape when they have no parents; flush them
        for node in _leaves(tape):
            g = grads.pop(id(node), None)
            if g is not None:
                _accumulate(node, g)
        # drop closures so saved activations can be reclaimed
        for node in tape:
            node._backward = None
            node._parents = ()


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=node.data.dtype)
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _leaves(tape: list[Tensor]) -> list[Tensor]:
    seen: set[int] = {id(t) for t in tape}
    out = []
    for node in tape:
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                out.append(p)
    return out


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of op outputs that lead to ``root``.

    Producers always precede consumers.  Leaf tensors are not included.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or node._backward is None:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._backward is not None:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(op: str, data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make("add", a.data + b.data.astype(a.dtype, copy=False), (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data.astype(a.dtype, copy=False)

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), backward)


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", f"expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make("relu", np.maximum(x.data, 0, dtype=x.dtype), (x,), backward)


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _stable_sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make("sigmoid", s, (x,), backward)


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false or ``rate`` is 0."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale

    def backward(g):
        return (g * mask,)

    return _make("dropout", x.data * mask, (x,), backward)


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape),)

    return _make("sum", np.asarray(x.data.sum(axis=axes), dtype=x.dtype), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes])) if axes else 1

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / count,)

    return _make("mean", np.asarray(x.data.mean(axis=axes), dtype=x.dtype), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {tuple(shape)}") from None
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _make("reshape", out, (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", "needs at least one tensor")
    ref = ts[0].shape
    axis = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError("concat", f"shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", np.concatenate([t.data for t in ts], axis=axis), ts, backward)


# ---------------------------------------------------------------- convolution

def im2col(xp: np.ndarray, kh: int, kw: int, out_h: int, out_w: int) -> np.ndarray:
    """Gather stride-1 patches of a padded N×C×H×W array.

    Returns an array of shape (N, C, kh, kw, out_h, out_w); reshaped to
    (N, C·kh·kw, out_h·out_w) it holds one patch matrix per sample.
    """
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + out_h, j:j + out_w]
    return cols


def conv2d(x, weight, bias=None) -> Tensor:
    """Same-padded, stride-1 2-d cross-correlation of N×C×H×W input.

    ``weight`` is D×C×kH×kW with odd kernel sides; ``bias`` has length D.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight, x.dtype)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    d, c_k, kh, kw = weight.shape
    if c != c_k:
        raise ShapeError("conv2d", f"input has {c} channels but kernel expects {c_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", f"same padding needs odd kernel sides, got {kh}x{kw}")
    if bias is not None:
        bias = _as_tensor(bias, x.dtype)
        if bias.shape != (d,):
            raise ShapeError("conv2d", f"bias shape {bias.shape} does not match {d} output channels")
    ph, pw = kh // 2, kw // 2
    xd = x.data
    ckk, hw = c * kh * kw, h * w
    if ph or pw:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        cols = im2col(xp, kh, kw, h, w).reshape(n, ckk, hw)
    else:
        cols = np.ascontiguousarray(xd).reshape(n, c, hw)
    wmat = weight.data.reshape(d, ckk)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, d, h, w)

    def backward(g):
        gmat = np.ascontiguousarray(g).reshape(n, d, hw)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat)
            if ph or pw:
                dcols = dcols.reshape(n, c, kh, kw, h, w)
                gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + h, j:j + w] += dcols[:, :, i, j]
                gx = gxp[:, :, ph:ph + h, pw:pw + w]
            else:
                gx = dcols.reshape(n, c, h, w)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make("conv2d", out, parents, backward)


def maxpool2d(x, pool: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling with floor semantics (remainders dropped).

    Gradient goes to the first maximal element of each block in row-major
    block order.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("maxpool2d", f"expected N×C×H×W input, got {x.shape}")
    ph, pw = pool
    n, c, h, w = x.shape
    ho, wo = h // ph, w // pw
    if ph < 1 or pw < 1 or ho < 1 or wo < 1:
        raise ShapeError("maxpool2d", f"pool {pool} larger than input plane {h}x{w}")
    blocks = x.data[:, :, : ho * ph, : wo * pw].reshape(n, c, ho, ph, wo, pw)
    rows = blocks[:, :, :, 0]
    if ph > 1:
        rows = np.maximum(blocks[:, :, :, 0], blocks[:, :, :, 1])
        for a in range(2, ph):
            np.maximum(rows, blocks[:, :, :, a], out=rows)
    out = rows[..., 0].copy()
    for b in range(1, pw):
        np.maximum(out, rows[..., b], out=out)

    def backward(g):
        hit = blocks == out[:, :, :, None, :, None]
        if np.count_nonzero(hit) != out.size:
            # keep only the first maximal element of each block
            taken = hit[:, :, :, 0, :, 0].copy()
            for a in range(ph):
                for b in range(pw):
                    if a == 0 and b == 0:
                        continue
                    sel = hit[:, :, :, a, :, b]
                    sel &= ~taken
                    taken |= sel
        routed = np.where(hit, g[:, :, :, None, :, None], np.zeros((), g.dtype))
        if ho * ph == h and wo * pw == w:
            return (routed.reshape(x.shape),)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : ho * ph, : wo * pw] = routed.reshape(n, c, ho * ph, wo * pw)
        return (gx,)

    return _make("maxpool2d", out, (x,), backward)


# ---------------------------------------------------------------- normalization

def _bn_view(x: Tensor, p: np.ndarray) -> np.ndarray:
    return p.reshape((1, -1) + (1,) * (x.ndim - 2))


def batchnorm(x, gamma, beta, running_mean=None, running_var=None, eps: float = 1e-5):
    """Per-channel batch normalization over every axis except axis 1.

    Without running statistics the batch statistics are used and the return
    value is ``(out, batch_mean, batch_var)`` (biased variance).  With them,
    the op is the fixed affine inference map and only ``out`` is returned.
    """
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x.dtype)
    beta = _as_tensor(beta, x.dtype)
    if x.ndim < 2:
        raise ShapeError("batchnorm", f"expected at least 2-d input, got {x.shape}")
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError("batchnorm", f"gamma/beta must have shape ({ch},)")
    axes = (0,) + tuple(range(2, x.ndim))
    xd = x.data
    gv = _bn_view(x, gamma.data)

    if running_mean is not None:
        mu = _bn_view(x, np.asarray(running_mean, dtype=x.dtype))
        inv = _bn_view(x, 1.0 / np.sqrt(np.asarray(running_var, dtype=x.dtype) + eps))
        xhat = (xd - mu) * inv
        out = gv * xhat + _bn_view(x, beta.data)

        def backward_infer(g):
            gx = g * gv * inv if x.requires_grad else None
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _make("batchnorm", out, (x, gamma, beta), backward_infer)

    count = xd.size // ch
    if count < 2:
        raise ShapeError("batchnorm", "train mode needs at least 2 values per channel")
    sub = "nc" + "hwxyz"[: x.ndim - 2]
    mu = np.einsum(f"{sub}->c", xd) / count
    xhat = xd - _bn_view(x, mu.astype(x.dtype))
    var = np.einsum(f"{sub},{sub}->c", xhat, xhat) / count
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat *= _bn_view(x, inv)
    out = xhat * gv
    out += _bn_view(x, beta.data)

    def backward(g):
        gg = np.einsum(f"{sub},{sub}->c", g, xhat)
        gbeta = np.einsum(f"{sub}->c", g)
        gx = None
        if x.requires_grad:
            gx = xhat * _bn_view(x, (-gg / count).astype(g.dtype))
            gx += g
            gx -= _bn_view(x, (gbeta / count).astype(g.dtype))
            gx *= _bn_view(x, (gamma.data * inv).astype(g.dtype))
        return gx, gg.astype(gamma.dtype), gbeta.astype(beta.dtype)

    result = _make("batchnorm", out, (x, gamma, beta), backward)
    return result, mu.astype(x.dtype), var.astype(x.dtype)


# ---------------------------------------------------------------- loss

def binary_cross_entropy(pred, target, clamp: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy of probabilities against {0, 1} targets.

    Predictions are clamped to [clamp, 1 - clamp]; the clamp has zero
    gradient outside that interval.
    """
    pred = _as_tensor(pred)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ShapeError("binary_cross_entropy", f"prediction {pred.shape} vs target {y.shape}")
    p = np.clip(pred.data, clamp, 1.0 - clamp)
    inside = (pred.data >= clamp) & (pred.data <= 1.0 - clamp)
    count = p.size
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / count

    def backward(g):
        return (g * inside * (p - y) / (p * (1.0 - p)) / count,)

    return _make("bce", np.asarray(loss, dtype=pred.dtype), (pred,), backward)


# ---------------------------------------------------------------- dispatch

_OPS: dict[str, Callable] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "batchnorm": batchnorm,
    "relu": relu,
    "sigmoid": sigmoid,
    "dropout": dropout,
    "mean": mean,
    "sum": sum,
    "reshape": reshape,
    "concat": concat,
}


def forward_op(op_kind: str, inputs: Sequence, **attrs):
    """Run one op by name; ``inputs`` are positional tensor operands."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(_OPS)}") from None
    if op_kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, step: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The error for each coordinate is |a - n| / max(1, |a| + |n|).
    ``f`` must be deterministic and scalar-valued.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(Tensor(base.copy())).data)
            flat[i] = orig - step
            lo = float(f(Tensor(base.copy())).data)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
