"""Small dense reverse-mode autodiff core on top of numpy.

Values are float64 arrays. A :class:`Tape` records every primitive applied
during a forward pass; :meth:`Tape.backward` replays the records in reverse
and accumulates gradients into the :class:`Param` leaves.

Reductions over sets (``mean_rows``, ``mean_others``, ``slot_mean`` and the
attention sum) add their operands in sorted order, so permuting the operands
never changes the result, not even in the last bit.
"""

from __future__ import annotations

import json
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "TapeError",
    "NonDeterministicError",
    "Param",
    "Node",
    "Tape",
    "linear",
    "relu",
    "concat_cols",
    "mean_rows",
    "mean_others",
    "slot_mean",
    "attention",
    "add",
    "reshape",
    "permute",
    "take_rows",
    "weighted_sum",
    "softmax",
    "softmax_cross_entropy",
    "backward",
    "zero_grad",
    "sgd_step",
    "check_gradients",
    "uniform_init",
    "save_checkpoint",
    "load_checkpoint",
]

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


class Param:
    """A learnable matrix with its gradient and momentum buffer."""

    def __init__(self, name: str, value):
        value = np.array(value, dtype=DTYPE)
        if value.ndim == 1:
            value = value.reshape(1, -1)
        if value.ndim != 2:
            raise DimensionError(f"param {name!r} must be 2-D, got shape {value.shape}")
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.momentum_buf = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Node:
    __slots__ = ("value", "tape", "index", "parents", "backward_fn", "param", "requires_grad", "cache")

    def __init__(self, value, tape, index, parents=(), backward_fn=None, param=None, requires_grad=False):
        self.value = value
        self.tape = tape
        self.index = index
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param
        self.requires_grad = requires_grad
        self.cache = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._watched: dict[int, Node] = {}
        self._consumed = False

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, parents=(), backward_fn=None, param=None, requires_grad=None):
        if self._consumed:
            raise TapeError("tape already consumed by backward(); record a new forward pass")
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(value, self, len(self.nodes), tuple(parents), backward_fn, param, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._push(np.asarray(value, dtype=DTYPE), requires_grad=False)

    def watch(self, param: Param) -> Node:
        node = self._watched.get(id(param))
        if node is None:
            node = self._push(param.value, param=param, requires_grad=True)
            self._watched[id(param)] = node
        return node

    def backward(self, loss: Node) -> None:
        if loss.tape is not self:
            raise TapeError("loss node was recorded on a different tape")
        if self._consumed:
            raise TapeError("backward() already ran on this tape; record a new forward pass")
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or not node.requires_grad:
                continue
            if node.param is not None:
                node.param.grad += g
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
        if isinstance(x, (list, tuple)):
            for y in x:
                if isinstance(y, Node):
                    return y.tape
    raise TapeError("at least one operand must be a recorded Node (use Tape.constant / Tape.watch)")


def _node(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise TapeError("operands recorded on different tapes")
        return x
    if isinstance(x, Param):
        return tape.watch(x)
    return tape.constant(x)


def _ordered_sum(a: np.ndarray, axis: int) -> np.ndarray:
    return np.sort(a, axis=axis).sum(axis=axis)


# -- primitives --------------------------------------------------------------


def linear(x, p, bias=None) -> Node:
    """``x @ W + bias`` with the bias row broadcast over the batch."""
    tape = _tape_of(x, p, bias)
    xn, wn = _node(tape, x), _node(tape, p)
    if xn.value.ndim != 2 or wn.value.ndim != 2 or xn.value.shape[1] != wn.value.shape[0]:
        raise DimensionError(f"linear: input {xn.value.shape} incompatible with weight {wn.value.shape}")
    out = xn.value @ wn.value
    parents = [xn, wn]
    if bias is not None:
        bn = _node(tape, bias)
        if bn.value.shape != (1, wn.value.shape[1]):
            raise DimensionError(f"linear: bias {bn.value.shape} incompatible with weight {wn.value.shape}")
        out = out + bn.value
        parents.append(bn)
    xv, wv = xn.value, wn.value

    def back(g):
        grads = [g @ wv.T, xv.T @ g]
        if len(parents) == 3:
            grads.append(g.sum(axis=0, keepdims=True))
        return grads

    return tape._push(out, parents, back)


def relu(x) -> Node:
    tape = _tape_of(x)
    xn = _node(tape, x)
    mask = xn.value > 0
    return tape._push(np.where(mask, xn.value, 0.0), [xn], lambda g: [g * mask])


def concat_cols(xs: Sequence) -> Node:
    """Concatenate along the last axis, in argument order."""
    if not xs:
        raise DimensionError("concat_cols: empty list")
    tape = _tape_of(xs)
    nodes = [_node(tape, x) for x in xs]
    lead = nodes[0].value.shape[:-1]
    for n in nodes[1:]:
        if n.value.shape[:-1] != lead:
            raise DimensionError(
                f"concat_cols: row mismatch {nodes[0].value.shape} vs {n.value.shape}"
            )
    widths = [n.value.shape[-1] for n in nodes]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([n.value for n in nodes], axis=-1)

    def back(g):
        return [g[..., bounds[k] : bounds[k + 1]] for k in range(len(nodes))]

    return tape._push(out, nodes, back)


def mean_rows(xs: Sequence) -> Node:
    """Elementwise mean of equally shaped operands."""
    if not xs:
        raise DimensionError("mean_rows: empty list")
    tape = _tape_of(xs)
    nodes = [_node(tape, x) for x in xs]
    shape = nodes[0].value.shape
    for n in nodes[1:]:
        if n.value.shape != shape:
            raise DimensionError(f"mean_rows: shape mismatch {shape} vs {n.value.shape}")
    k = len(nodes)
    out = _ordered_sum(np.stack([n.value for n in nodes]), 0) / k
    return tape._push(out, nodes, lambda g: [g / k] * k)


def mean_others(x) -> Node:
    """For a ``(G, N, d)`` input, slot ``i`` gets the mean of the other ``N-1`` slots."""
    tape = _tape_of(x)
    xn = _node(tape, x)
    if xn.value.ndim != 3:
        raise DimensionError(f"mean_others: expected (G, N, d), got {xn.value.shape}")
    n = xn.value.shape[1]
    if n < 2:
        raise DimensionError(f"mean_others: need at least 2 slots, got {n}")
    out = np.empty_like(xn.value)
    for i in range(n):
        out[:, i] = _ordered_sum(np.delete(xn.value, i, axis=1), 1) / (n - 1)

    def back(g):
        total = g.sum(axis=1, keepdims=True)
        return [(total - g) / (n - 1)]

    return tape._push(out, [xn], back)


def slot_mean(x) -> Node:
    """Mean over axis 1 of a ``(G, N, d)`` input."""
    tape = _tape_of(x)
    xn = _node(tape, x)
    if xn.value.ndim != 3:
        raise DimensionError(f"slot_mean: expected (G, N, d), got {xn.value.shape}")
    n = xn.value.shape[1]
    out = _ordered_sum(xn.value, 1) / n
    return tape._push(out, [xn], lambda g: [np.repeat(g[:, None, :] / n, n, axis=1)])


def attention(q, k, v) -> Node:
    """Scaled dot-product attention within each group of a ``(G, N, d)`` set."""
    tape = _tape_of(q, k, v)
    qn, kn, vn = _node(tape, q), _node(tape, k), _node(tape, v)
    if not (qn.value.shape == kn.value.shape and qn.value.shape[:2] == vn.value.shape[:2]) or qn.value.ndim != 3:
        raise DimensionError(
            f"attention: incompatible q {qn.value.shape}, k {kn.value.shape}, v {vn.value.shape}"
        )
    scale = 1.0 / math.sqrt(qn.value.shape[-1])
    qv, kv, vv = qn.value, kn.value, vn.value
    scores = np.einsum("gid,gjd->gij", qv, kv) * scale
    e = np.exp(scores - scores.max(axis=2, keepdims=True))
    w = e / _ordered_sum(e, 2)[:, :, None]
    out = _ordered_sum(w[:, :, :, None] * vv[:, None, :, :], 2)

    def back(g):
        dw = np.einsum("gid,gjd->gij", g, vv)
        dv = np.einsum("gij,gid->gjd", w, g)
        ds = w * (dw - (w * dw).sum(axis=2, keepdims=True)) * scale
        dq = np.einsum("gij,gjd->gid", ds, kv)
        dk = np.einsum("gij,gid->gjd", ds, qv)
        return [dq, dk, dv]

    node = tape._push(out, [qn, kn, vn], back)
    node.cache = w
    return node


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    an, bn = _node(tape, a), _node(tape, b)
    if an.value.shape != bn.value.shape:
        raise DimensionError(f"add: shape mismatch {an.value.shape} vs {bn.value.shape}")
    return tape._push(an.value + bn.value, [an, bn], lambda g: [g, g])


def reshape(x, shape) -> Node:
    tape = _tape_of(x)
    xn = _node(tape, x)
    src = xn.value.shape
    return tape._push(xn.value.reshape(shape), [xn], lambda g: [g.reshape(src)])


def permute(x, axes) -> Node:
    tape = _tape_of(x)
    xn = _node(tape, x)
    inverse = np.argsort(axes)
    return tape._push(np.ascontiguousarray(xn.value.transpose(axes)), [xn], lambda g: [g.transpose(inverse)])


def take_rows(table, index) -> Node:
    """Row lookup ``table[index]``; gradients scatter-add back into the table."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise DimensionError(f"take_rows: index must be 1-D, got shape {index.shape}")
    tape = _tape_of(table) if isinstance(table, Node) else None
    if tape is None:
        raise TapeError("take_rows: table must be a recorded Node; call Tape.watch(param) first")
    tn = _node(tape, table)
    rows = tn.value.shape[0]
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise DimensionError(f"take_rows: index out of range for table with {rows} rows")

    def back(g):
        out = np.zeros_like(tn.value)
        np.add.at(out, index, g)
        return [out]

    return tape._push(tn.value[index], [tn], back)


def weighted_sum(x, weights) -> Node:
    """Scalar ``sum(x * weights)`` with constant ``weights``."""
    tape = _tape_of(x)
    xn = _node(tape, x)
    weights = np.asarray(weights, dtype=DTYPE)
    if weights.shape != xn.value.shape:
        raise DimensionError(f"weighted_sum: {xn.value.shape} vs weights {weights.shape}")
    out = np.array(float((xn.value * weights).sum()))
    return tape._push(out, [xn], lambda g: [g * weights])


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets) -> Node:
    """Mean negative log-likelihood; the returned node caches row probabilities."""
    tape = _tape_of(logits)
    ln = _node(tape, logits)
    if ln.value.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be (B, C), got {ln.value.shape}")
    b, c = ln.value.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != b:
        raise DimensionError(f"softmax_cross_entropy: {b} logit rows but {targets.shape[0]} targets")
    if b and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"softmax_cross_entropy: target out of range [0, {c})")
    z = ln.value - ln.value.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    probs = np.exp(logp)
    loss = np.array(-logp[np.arange(b), targets].mean())

    def back(g):
        d = probs.copy()
        d[np.arange(b), targets] -= 1.0
        return [d * (g / b)]

    node = tape._push(loss, [ln], back)
    node.cache = probs
    return node


def backward(tape: Tape, loss: Node) -> None:
    tape.backward(loss)


# -- optimisation -------------------------------------------------------------


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.grad[...] = 0.0


def sgd_step(params: Iterable[Param], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """Momentum SGD: ``buf = mu*buf + (grad + wd*value); value -= lr*buf``."""
    for p in params:
        g = p.grad + weight_decay * p.value if weight_decay else p.grad
        if momentum:
            p.momentum_buf *= momentum
            p.momentum_buf += g
            p.value -= lr * p.momentum_buf
        else:
            p.momentum_buf[...] = g
            p.value -= lr * g


def check_gradients(
    forward: Callable[[], tuple[Tape, Node]],
    params: Sequence[Param],
    epsilon: float = 1e-6,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``forward`` must build a fresh tape and return ``(tape, loss)``.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-4], got {epsilon}")

    def loss_value():
        return float(forward()[1].value)

    first, second = loss_value(), loss_value()
    if first != second:
        raise NonDeterministicError(f"forward is not deterministic: {first!r} != {second!r}")

    zero_grad(params)
    tape, loss = forward()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up = loss_value()
            flat[idx] = orig - epsilon
            down = loss_value()
            flat[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            a = gflat[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    zero_grad(params)
    return worst


def uniform_init(rng: np.random.Generator, fan_in: int, shape, scale: float = math.sqrt(6.0)) -> np.ndarray:
    """Uniform in ``+-scale/sqrt(fan_in)``; the default keeps ReLU activations at unit variance."""
    bound = scale / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# -- checkpoint container -------------------------------------------------------

_MAGIC = b"NUMKITCK"
_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``name -> 2-D float64 array`` plus a JSON metadata block.

    Layout: magic, u32 version, u64 header length, UTF-8 JSON header, then the
    little-endian row-major payload of each tensor in header order.
    """
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        if arr.ndim != 2:
            raise DimensionError(f"checkpoint tensor {name!r} must be 2-D, got {arr.shape}")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        data = arr.tobytes(order="C")
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(header)))
        fh.write(header)
        for data in chunks:
            fh.write(data)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a numkit checkpoint")
    version, hlen = struct.unpack_from("<IQ", blob, len(_MAGIC))
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = len(_MAGIC) + struct.calcsize("<IQ")
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        rows, cols = entry["shape"]
        lo = base + entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=lo)
        tensors[entry["name"]] = arr.reshape(rows, cols).astype(DTYPE)
    return tensors, header["meta"]
