"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Outside any tape nothing is recorded,
which is how inference runs.

    with Tape() as tape:
        loss = ad.sum(ad.mul(x, x))
        backward(loss)
    x.grad  # == 2 * x.data
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "grad_check",
    "no_tape",
]


class ShapeError(ValueError):
    pass


_TAPES: list[Tape] = []


class Tensor:
    """A float64 array node. Leaves with ``requires_grad`` collect ``.grad``."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward_fn", "tape")

    def __init__(self, op, inputs, out, backward_fn, tape):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of executed operations; order is a topological sort."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()


class no_tape:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._saved = _TAPES[:]
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES[:] = self._saved


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op}: non-finite value in output of shape {out.shape}")
    t = Tensor(out)
    if _TAPES and any(i.requires_grad for i in inputs):
        tape = _TAPES[-1]
        t.requires_grad = True
        node = _Node(op, tuple(inputs), t, backward_fn, tape)
        t._node = node
        tape.nodes.append(node)
    return t


def backward(loss: Tensor) -> list[Tensor]:
    """Propagate d(loss) back through the current tape.

    Gradients accumulate into ``.grad`` of every leaf that requires one; the
    touched leaves are returned in first-seen order.
    """
    if loss.data.shape != () and loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or not _TAPES or node.tape is not _TAPES[-1]:
        raise RuntimeError("loss was not produced on the current tape")
    tape = node.tape
    stop = tape.nodes.index(node)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                leaves.setdefault(id(inp), inp)
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    return list(leaves.values())


# ----------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = a.shape[-1]
        return _finish(
            "add", a.data + b.data, (a, b),
            lambda g: (g, g.reshape(-1, lead).sum(axis=0)),
        )
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _finish("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., m, k] @ [k, n]`` or batched ``[..., m, k] @ [..., k, n]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if bd.ndim == 2:
        k, n = bd.shape

        def bwd(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n) if b.requires_grad else None
            return ga, gb

        return _finish("matmul", ad @ bd, (a, b), bwd)
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} and {b.shape}")

    def bwd_batched(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _finish("matmul", ad @ bd, (a, b), bwd_batched)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _finish("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _finish("transpose", out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bwd(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _finish("concat", out, tensors, bwd)


def index(a: Tensor, key) -> Tensor:
    """Numpy-style indexing (slices or integer arrays); repeated indices accumulate."""
    out = np.ascontiguousarray(a.data[key])
    shape = a.shape

    def bwd(g):
        ga = np.zeros(shape)
        np.add.at(ga, key, g)
        return (ga,)

    return _finish("index", out, (a,), bwd)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError(f"embedding: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of shape {weight.shape}")
    out = weight.data[ids]
    rows, dim = weight.shape

    def bwd(g):
        gw = np.zeros((rows, dim))
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, dim))
        return (gw,)

    return _finish("embedding", out, (weight,), bwd)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))
    if axis is None:
        return _finish("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % len(shape)
    return _finish(
        "sum", out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis))
    ax = axis % a.ndim
    ad = a.data

    def bwd(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(
                np.expand_dims(norm, ax) > 0, ad / np.expand_dims(norm, ax), 0.0
            )
        return (ratio * np.expand_dims(g, ax),)

    return _finish("l2_norm", norm, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _finish("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    return _finish("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    return _finish("gelu", kernels.gelu_forward(x), (a,), lambda g: (kernels.gelu_backward(x, g),))


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax over the last axis.

    ``mask`` is boolean and broadcastable to ``a``; False entries act as -inf
    logits and receive probability exactly 0.
    """
    shape = a.shape
    width = shape[-1]
    x2 = a.data.reshape(-1, width)
    m2 = None
    if mask is not None:
        m2 = np.ascontiguousarray(np.broadcast_to(mask, shape).reshape(-1, width), dtype=np.uint8)
        if not m2.any(axis=1).all():
            raise ValueError("softmax: a row is fully masked")
    y = kernels.softmax_forward(x2, m2)

    def bwd(g):
        return (kernels.softmax_backward(y, np.ascontiguousarray(g.reshape(-1, width))).reshape(shape),)

    return _finish("softmax", y.reshape(shape), (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    shape = x.shape
    width = shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {shape}")
    out, xhat, inv_std = kernels.layer_norm_forward(x.data.reshape(-1, width), gain.data, bias.data, eps)

    def bwd(g):
        gx, gg, gb = kernels.layer_norm_backward(
            np.ascontiguousarray(g.reshape(-1, width)), xhat, inv_std, gain.data
        )
        return gx.reshape(shape), gg, gb

    return _finish("layer_norm", out.reshape(shape), (x, gain, bias), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _finish("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of ``[N, C]`` logits against class ids."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n = logits.shape[0]
    if n == 0:
        raise ShapeError("cross_entropy: empty batch")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - shifted[rows, targets]).mean())

    def bwd(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _finish("cross_entropy", loss, (logits,), bwd)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over all elements, computed from logits."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {y.shape}")
    z = logits.data
    loss = np.asarray((np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean())
    n = z.size

    def bwd(g):
        return ((_stable_sigmoid(z) - y) * (g / n),)

    return _finish("bce_with_logits", loss, (logits,), bwd)


# ----------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor | Iterable[Tensor],
    h: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max elementwise relative error between analytic and central-difference grads.

    ``f`` takes no arguments and must read the tensors in ``x``; they are
    perturbed in place. ``max_elements`` samples that many entries per tensor
    instead of checking all of them.
    """
    params = [x] if isinstance(x, Tensor) else list(x)
    with no_tape():
        base = f().data.copy()
        again = f().data.copy()
    if base.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {base.shape}")
    if not np.array_equal(base, again):
        raise RuntimeError("grad_check: f is not deterministic (two forward passes differ)")

    for p in params:
        p.grad = None
    with Tape():
        loss = f()
        backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        positions = range(flat.size)
        if max_elements is not None and flat.size > max_elements:
            positions = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
        gaf = ga.reshape(-1)
        for i in positions:
            orig = flat[i]
            flat[i] = orig + h
            with no_tape():
                fp = f().item()
            flat[i] = orig - h
            with no_tape():
                fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(gaf[i] - num) / max(1e-8, abs(gaf[i]) + abs(num))
            worst = max(worst, err)
    return worst

