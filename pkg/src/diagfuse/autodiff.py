"""Tape-based reverse-mode automatic differentiation on float64 arrays.

Every primitive computes its forward value eagerly with numpy, checks the
result for NaN/inf, and appends a node to the owning :class:`Tape`.  Nodes
are topologically ordered by construction (an op's inputs always carry a
smaller node id), so :func:`backprop` is a single reversed sweep.

The primitive set is deliberately small: elementwise add/sub/mul (with
scalar broadcast only), matmul, conv2d (stride 1 "same" zero padding or
stride 2 with floor-division output), relu/tanh/sigmoid, softmax over an
axis, channel concat, average pooling, per-channel global mean, binary
cross-entropy, bilinear resampling, bias add over the last axis, and
reshape.  No other broadcasting, no GPU, no higher-order derivatives.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

Array = np.ndarray


def _as_f64(values) -> Array:
    return np.asarray(values, dtype=np.float64, order="C")


def _check_finite(op_kind: str, out: Array) -> Array:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op_kind}: produced non-finite values")
    return out


class Node:
    __slots__ = ("op_kind", "input_ids", "value", "backward", "needs_grad")

    def __init__(self, op_kind, input_ids, value, backward, needs_grad):
        self.op_kind = op_kind
        self.input_ids = input_ids
        self.value = value
        # backward: grad_out -> tuple of grads aligned with input_ids
        # (None entries for inputs that do not need gradients)
        self.backward = backward
        self.needs_grad = needs_grad


class Tensor:
    """Handle to a node's forward value on a tape."""

    __slots__ = ("tape", "node_id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.node_id = node_id

    @property
    def data(self) -> Array:
        return self.tape.nodes[self.node_id].value

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(node={self.node_id}, dims={self.dims})"


class Tape:
    """Ordered record of primitive applications.

    Single-writer: build and backprop a tape from one thread; run
    independent samples on independent tapes.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def _append(self, node: Node) -> Tensor:
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, values, requires_grad: bool = True) -> Tensor:
        arr = _check_finite("leaf", _as_f64(values))
        return self._append(Node("leaf", (), arr, None, requires_grad))

    def const(self, values) -> Tensor:
        return self.leaf(values, requires_grad=False)


def _record(
    op_kind: str,
    inputs: Sequence[Tensor],
    value: Array,
    backward: Callable[[Array], tuple],
) -> Tensor:
    tape = inputs[0].tape
    for t in inputs[1:]:
        if t.tape is not tape:
            raise ShapeMismatchError(op_kind, "tensors on different tapes")
    needs = any(tape.nodes[t.node_id].needs_grad for t in inputs)
    value = _check_finite(op_kind, value)
    ids = tuple(t.node_id for t in inputs)
    return tape._append(Node(op_kind, ids, value, backward if needs else None, needs))


# ---------------------------------------------------------------------------
# elementwise arithmetic (same shape, or scalar vs tensor)


def _reduce_to(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape)


def _binary_shapes(op_kind: str, a: Tensor, b: Tensor):
    if a.dims != b.dims and a.data.size != 1 and b.data.size != 1:
        raise ShapeMismatchError(op_kind, a.dims, b.dims)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    av, bv = a.data, b.data

    def backward(g):
        return _reduce_to(g, av.shape), _reduce_to(g, bv.shape)

    return _record("add", (a, b), av + bv, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("sub", a, b)
    av, bv = a.data, b.data

    def backward(g):
        return _reduce_to(g, av.shape), _reduce_to(-g, bv.shape)

    return _record("sub", (a, b), av - bv, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    av, bv = a.data, b.data

    def backward(g):
        return _reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)

    return _record("mul", (a, b), av * bv, backward)


def smul(a: Tensor, s: float) -> Tensor:
    """Multiply by a Python scalar (recorded as a constant)."""
    return mul(a, a.tape.const(float(s)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.data, b.data
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatchError("matmul", a.dims, b.dims)

    def backward(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", (a, b), av @ bv, backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector over the last axis of x."""
    xv, bv = x.data, b.data
    if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
        raise ShapeMismatchError("bias_add", x.dims, b.dims)

    def backward(g):
        return g, g.reshape(-1, bv.shape[0]).sum(axis=0)

    return _record("bias_add", (x, b), xv + bv, backward)


def reshape(x: Tensor, dims: tuple[int, ...]) -> Tensor:
    xv = x.data
    if int(np.prod(dims)) != xv.size:
        raise ShapeMismatchError("reshape", x.dims, dims)

    def backward(g):
        return (g.reshape(xv.shape),)

    return _record("reshape", (x,), xv.reshape(dims), backward)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: Array, kh: int, kw: int, stride: int, oh: int, ow: int) -> Array:
    cin = xp.shape[2]
    cols = np.empty((oh, ow, kh, kw, cin), dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj, :] = xp[
                di : di + stride * oh : stride, dj : dj + stride * ow : stride, :
            ]
    return cols.reshape(oh * ow, kh * kw * cin)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """2-D convolution of an (h, w, c_in) map with an (kh, kw, c_in, c_out) kernel.

    Stride 1 keeps the spatial size (zero "same" padding); stride 2 pads the
    same way and floor-divides the output grid.  Kernel sides must be odd.
    """
    xv, kv = x.data, kernel.data
    if xv.ndim != 3 or kv.ndim != 4 or xv.shape[2] != kv.shape[2]:
        raise ShapeMismatchError("conv2d", x.dims, kernel.dims)
    kh, kw = kv.shape[0], kv.shape[1]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatchError("conv2d", "kernel sides must be odd", kernel.dims)
    if stride not in (1, 2):
        raise ShapeMismatchError("conv2d", f"stride {stride} not in (1, 2)")
    h, w, cin = xv.shape
    cout = kv.shape[3]
    ph, pw = kh // 2, kw // 2
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    xp = np.zeros((h + 2 * ph, w + 2 * pw, cin), dtype=np.float64)
    xp[ph : ph + h, pw : pw + w, :] = xv
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    kmat = kv.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(oh, ow, cout)

    def backward(g):
        gmat = g.reshape(oh * ow, cout)
        gk = (cols.T @ gmat).reshape(kv.shape)
        gcols = (gmat @ kmat.T).reshape(oh, ow, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[di : di + stride * oh : stride, dj : dj + stride * ow : stride, :] += gcols[
                    :, :, di, dj, :
                ]
        return gxp[ph : ph + h, pw : pw + w, :], gk

    return _record("conv2d", (x, kernel), out, backward)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    xv = x.data
    out = np.maximum(xv, 0.0)

    def backward(g):
        return (g * (xv > 0.0),)

    return _record("relu", (x,), out, backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    xv = x.data
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, backward)


def softmax(x: Tensor, axis: int) -> Tensor:
    xv = x.data
    if not -xv.ndim <= axis < xv.ndim:
        raise ShapeMismatchError("softmax", x.dims, f"axis {axis}")
    shifted = xv - xv.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (x,), out, backward)


# ---------------------------------------------------------------------------
# structure and reductions


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.data, b.data
    if av.ndim != bv.ndim or av.shape[:-1] != bv.shape[:-1]:
        raise ShapeMismatchError("concat_channels", a.dims, b.dims)
    ca = av.shape[-1]

    def backward(g):
        return g[..., :ca], g[..., ca:]

    return _record("concat_channels", (a, b), np.concatenate([av, bv], axis=-1), backward)


def avg_pool(x: Tensor, size: int) -> Tensor:
    xv = x.data
    if xv.ndim != 3 or xv.shape[0] % size or xv.shape[1] % size:
        raise ShapeMismatchError("avg_pool", x.dims, f"size {size}")
    h, w, c = xv.shape
    oh, ow = h // size, w // size
    out = xv.reshape(oh, size, ow, size, c).mean(axis=(1, 3))

    def backward(g):
        gx = np.repeat(np.repeat(g, size, axis=0), size, axis=1)
        return (gx / (size * size),)

    return _record("avg_pool", (x,), out, backward)


def global_mean(x: Tensor) -> Tensor:
    """Spatial mean of an (h, w, c) map, one value per channel."""
    xv = x.data
    if xv.ndim != 3:
        raise ShapeMismatchError("global_mean", x.dims)
    h, w, _ = xv.shape
    out = xv.mean(axis=(0, 1))

    def backward(g):
        return (np.broadcast_to(g / (h * w), xv.shape).copy(),)

    return _record("global_mean", (x,), out, backward)


_BCE_EPS = 1e-12


def bce(p: Tensor, y: Tensor) -> Tensor:
    """Mean binary cross-entropy of probabilities p against targets y (scalar)."""
    pv, yv = p.data, y.data
    if pv.shape != yv.shape:
        raise ShapeMismatchError("bce", p.dims, y.dims)
    pc = np.clip(pv, _BCE_EPS, 1.0 - _BCE_EPS)
    n = pv.size
    out = np.float64(-(yv * np.log(pc) + (1.0 - yv) * np.log(1.0 - pc)).mean())

    def backward(g):
        inside = (pv > _BCE_EPS) & (pv < 1.0 - _BCE_EPS)
        gp = g * inside * (pc - yv) / (pc * (1.0 - pc)) / n
        gy = g * (np.log(1.0 - pc) - np.log(pc)) / n
        return gp, gy

    return _record("bce", (p, y), np.asarray(out), backward)


def bilinear_resample(x: Tensor, coords: Array) -> Tensor:
    """Sample an (h, w, c) map at float (row, col) positions.

    coords has shape (H, W, 2) and is a constant: gradients flow to x only.
    Out-of-range positions clamp to the nearest edge pixel.
    """
    xv = x.data
    if xv.ndim != 3 or coords.ndim != 3 or coords.shape[2] != 2:
        raise ShapeMismatchError("bilinear_resample", x.dims, coords.shape)
    h, w, c = xv.shape
    rows = np.clip(coords[..., 0], 0.0, h - 1.0)
    cols = np.clip(coords[..., 1], 0.0, w - 1.0)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    out = w00 * xv[r0, c0] + w01 * xv[r0, c1] + w10 * xv[r1, c0] + w11 * xv[r1, c1]

    def backward(g):
        gx = np.zeros_like(xv)
        for rr, cc, ww in ((r0, c0, w00), (r0, c1, w01), (r1, c0, w10), (r1, c1, w11)):
            np.add.at(gx, (rr.ravel(), cc.ravel()), (g * ww).reshape(-1, c))
        return (gx,)

    return _record("bilinear_resample", (x,), out, backward)


# ---------------------------------------------------------------------------
# reverse sweep


def backprop(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, Array]:
    """Accumulate d(loss)/d(node) for every grad-requiring node on the tape.

    loss must be a scalar node.  Returns node_id -> gradient array; when wrt
    is given, every requested leaf is present (zeros if the loss does not
    depend on it).
    """
    if loss.tape is not tape:
        raise ShapeMismatchError("backprop", "loss not on this tape")
    if loss.data.size != 1:
        raise ShapeMismatchError("backprop", f"loss must be scalar, dims {loss.dims}")
    grads: dict[int, Array] = {loss.node_id: np.ones_like(loss.data)}
    # entries not in `owned` may alias upstream grads or forward buffers and
    # must not be mutated in place
    owned: set[int] = {loss.node_id}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward is None:
            continue
        for in_id, gin in zip(node.input_ids, node.backward(g)):
            if gin is None or not tape.nodes[in_id].needs_grad:
                continue
            if in_id not in grads:
                grads[in_id] = gin
            elif in_id in owned:
                grads[in_id] += gin
            else:
                grads[in_id] = grads[in_id] + gin
                owned.add(in_id)
    if wrt is not None:
        for t in wrt:
            grads.setdefault(t.node_id, np.zeros_like(t.data))
    return grads


def grad_check(
    build: Callable[[Tape, Tensor], Tensor],
    leaf_values: Array,
    eps: float = 1e-4,
) -> float:
    """Max relative error between backprop and central finite differences.

    build(tape, leaf) must construct a scalar loss from the leaf tensor.
    Error per element: |analytic - numeric| / max(|analytic|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = _as_f64(leaf_values)

    tape = Tape()
    leaf = tape.leaf(base.copy())
    loss = build(tape, leaf)
    analytic = backprop(tape, loss, wrt=[leaf])[leaf.node_id]

    def loss_at(values: Array) -> float:
        t = Tape()
        return float(build(t, t.leaf(values)).data)

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        up = loss_at(bumped.reshape(base.shape))
        bumped[i] -= 2 * eps
        down = loss_at(bumped.reshape(base.shape))
        numeric = (up - down) / (2 * eps)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), 1e-8))
    return worst
