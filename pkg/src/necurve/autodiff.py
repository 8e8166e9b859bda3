"""Reverse-mode differentiation on numpy arrays.

A ``Node`` wraps a float64 array plus a backward closure; ``backward`` on a
scalar root walks the tape once in reverse topological order.  Tapes are
single-shot: running backward over nodes that already took part in a
backward pass raises ``TapeReuseError``.  Build a fresh graph per step.

The operator set is the minimum needed by the window-transform layer and
the rankers: broadcast arithmetic, matmul, activations, softmax, reductions,
dilated causal convolution, batch norm, dropout, and table lookup (expressed
as indicator-matrix multiplication so no op needs a scatter backward).
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np


class TapeReuseError(RuntimeError):
    """Backward ran twice over the same graph without a rebuild."""


class DomainError(ValueError):
    """Op input outside its mathematical domain (log of nonpositive, zero divisor)."""


class GradCheckError(RuntimeError):
    """Gradient check hit a non-finite evaluation."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Node:
    """One tape entry: a float64 array, its gradient, and a backward rule."""

    __slots__ = ("value", "grad", "_backward", "_parents", "_spent")

    # make numpy defer ndarray-on-the-left arithmetic to our reflected ops
    __array_ufunc__ = None

    def __init__(self, value, parents: tuple["Node", ...] = ()):
        self.value = _as_array(value)
        self.grad = np.zeros_like(self.value)
        self._backward = lambda: None
        self._parents = parents
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, spent={self._spent})"

    # -- graph walk ----------------------------------------------------

    def backward(self) -> None:
        if self.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {self.shape}")
        topo: list[Node] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        for node in topo:
            if node._spent:
                raise TapeReuseError(
                    "graph already consumed by a backward pass; rebuild it"
                )
        for node in topo:
            node._spent = True
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            node._backward()

    # -- broadcast arithmetic -------------------------------------------

    def __add__(self, other) -> "Node":
        other = other if isinstance(other, Node) else Node(other)
        out = Node(self.value + other.value, (self, other))

        def _backward():
            self.grad += _unbroadcast(out.grad, self.shape)
            other.grad += _unbroadcast(out.grad, other.shape)

        out._backward = _backward
        return out

    def __mul__(self, other) -> "Node":
        other = other if isinstance(other, Node) else Node(other)
        out = Node(self.value * other.value, (self, other))

        def _backward():
            self.grad += _unbroadcast(other.value * out.grad, self.shape)
            other.grad += _unbroadcast(self.value * out.grad, other.shape)

        out._backward = _backward
        return out

    def __truediv__(self, other) -> "Node":
        other = other if isinstance(other, Node) else Node(other)
        if np.any(other.value == 0.0):
            raise DomainError("division by zero")
        out = Node(self.value / other.value, (self, other))

        def _backward():
            self.grad += _unbroadcast(out.grad / other.value, self.shape)
            other.grad += _unbroadcast(
                -self.value / (other.value**2) * out.grad, other.shape
            )

        out._backward = _backward
        return out

    def __pow__(self, exponent) -> "Node":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = Node(self.value**exponent, (self,))

        def _backward():
            self.grad += exponent * self.value ** (exponent - 1) * out.grad

        out._backward = _backward
        return out

    def __neg__(self) -> "Node":
        return self * -1.0

    def __sub__(self, other) -> "Node":
        return self + (-other if isinstance(other, Node) else Node(-_as_array(other)))

    def __radd__(self, other) -> "Node":
        return self + other

    def __rsub__(self, other) -> "Node":
        return Node(other) + (-self)

    def __rmul__(self, other) -> "Node":
        return self * other

    def __rtruediv__(self, other) -> "Node":
        return Node(other) / self

    # -- linear algebra --------------------------------------------------

    def matmul(self, other: "Node") -> "Node":
        other = other if isinstance(other, Node) else Node(other)
        if self.value.ndim != 2 or other.value.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        out = Node(self.value @ other.value, (self, other))

        def _backward():
            self.grad += out.grad @ other.value.T
            other.grad += self.value.T @ out.grad

        out._backward = _backward
        return out

    def __matmul__(self, other) -> "Node":
        return self.matmul(other)

    def transpose(self) -> "Node":
        if self.value.ndim != 2:
            raise ValueError("transpose expects a 2-D operand")
        out = Node(self.value.T, (self,))

        def _backward():
            self.grad += out.grad.T

        out._backward = _backward
        return out

    @property
    def T(self) -> "Node":
        return self.transpose()

    def reshape(self, *shape) -> "Node":
        out = Node(self.value.reshape(*shape), (self,))

        def _backward():
            self.grad += out.grad.reshape(self.shape)

        out._backward = _backward
        return out

    # -- activations -------------------------------------------------------

    def exp(self) -> "Node":
        out = Node(np.exp(self.value), (self,))

        def _backward():
            self.grad += out.value * out.grad

        out._backward = _backward
        return out

    def log(self) -> "Node":
        if np.any(self.value <= 0.0):
            raise DomainError("log of a nonpositive value")
        out = Node(np.log(self.value), (self,))

        def _backward():
            self.grad += out.grad / self.value

        out._backward = _backward
        return out

    def sigmoid(self) -> "Node":
        # stable for both signs of the argument
        v = self.value
        s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
        out = Node(s, (self,))

        def _backward():
            self.grad += s * (1.0 - s) * out.grad

        out._backward = _backward
        return out

    def tanh(self) -> "Node":
        t = np.tanh(self.value)
        out = Node(t, (self,))

        def _backward():
            self.grad += (1.0 - t * t) * out.grad

        out._backward = _backward
        return out

    def relu(self) -> "Node":
        out = Node(np.maximum(self.value, 0.0), (self,))

        def _backward():
            self.grad += (self.value > 0.0) * out.grad

        out._backward = _backward
        return out

    def softplus(self) -> "Node":
        # log(1 + e^x) without overflow for large |x|
        out = Node(np.logaddexp(0.0, self.value), (self,))

        def _backward():
            self.grad += _sigmoid_value(self.value) * out.grad

        out._backward = _backward
        return out

    def softmax(self, axis: int = 0) -> "Node":
        shifted = self.value - self.value.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=axis, keepdims=True)
        out = Node(p, (self,))

        def _backward():
            inner = (out.grad * p).sum(axis=axis, keepdims=True)
            self.grad += p * (out.grad - inner)

        out._backward = _backward
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis: int | tuple[int, ...] | None = None) -> "Node":
        out = Node(self.value.sum(axis=axis), (self,))

        def _backward():
            grad = out.grad
            if axis is not None:
                grad = np.expand_dims(grad, axis)
            self.grad += np.broadcast_to(grad, self.shape)

        out._backward = _backward
        return out

    def mean(self, axis: int | tuple[int, ...] | None = None) -> "Node":
        count = self.value.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis) * (1.0 / float(count))


def _sigmoid_value(v: np.ndarray) -> np.ndarray:
    return np.where(
        v >= 0,
        1.0 / (1.0 + np.exp(-np.abs(v))),
        np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))),
    )


# -- structural ops ------------------------------------------------------


def concat(nodes: list[Node], axis: int = 0) -> Node:
    if not nodes:
        raise ValueError("concat needs at least one node")
    out = Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes))
    sizes = [n.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def _backward():
        for node, start, stop in zip(nodes, offsets[:-1], offsets[1:]):
            index = [slice(None)] * out.value.ndim
            index[axis] = slice(start, stop)
            node.grad += out.grad[tuple(index)]

    out._backward = _backward
    return out


def narrow(node: Node, axis: int, start: int, length: int) -> Node:
    """Contiguous slice along one axis."""
    if not 0 <= start <= start + length <= node.shape[axis]:
        raise ValueError(
            f"slice [{start}, {start + length}) outside axis of size {node.shape[axis]}"
        )
    index = [slice(None)] * node.value.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Node(node.value[index].copy(), (node,))

    def _backward():
        node.grad[index] += out.grad

    out._backward = _backward
    return out


def indicator_matrix(indices, width: int) -> np.ndarray:
    """Rows of the identity: result[r, indices[r]] = 1."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ValueError("indices must be one-dimensional")
    if np.any(indices < 0) or np.any(indices >= width):
        raise ValueError(f"index outside [0, {width})")
    out = np.zeros((len(indices), width), dtype=np.float64)
    out[np.arange(len(indices)), indices] = 1.0
    return out


def gather_rows(node: Node, indices) -> Node:
    """Row lookup as indicator-matrix multiplication.

    Keeps the backward rule inside matmul, so weighted soft lookups and hard
    lookups share one code path.  Also serves as embedding-table lookup.
    """
    return Node(indicator_matrix(indices, node.shape[0])) @ node


def dropout(node: Node, rate: float, rng: np.random.Generator) -> Node:
    """Train-mode inverted dropout; scaling keeps the expectation unchanged."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return node
    mask = (rng.uniform(size=node.shape) >= rate) / (1.0 - rate)
    out = Node(node.value * mask, (node,))

    def _backward():
        node.grad += mask * out.grad

    out._backward = _backward
    return out


def batch_norm(
    x: Node, gain: Node, shift: Node, axes: tuple[int, ...] = (0,), eps: float = 1e-5
) -> Node:
    """Per-feature standardization over ``axes`` with learnable gain/shift.

    Backward differentiates through the batch statistics (train mode).  The
    caller owns running statistics for eval mode.
    """
    count = float(np.prod([x.shape[a] for a in axes]))
    if count < 2:
        raise ValueError("batch norm needs at least 2 elements per feature")
    mu = x.value.mean(axis=axes, keepdims=True)
    var = x.value.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    g = gain.value.reshape(mu.shape)
    out = Node(xhat * g + shift.value.reshape(mu.shape), (x, gain, shift))

    def _backward():
        gy = out.grad
        gain.grad += (gy * xhat).sum(axis=axes).reshape(gain.shape)
        shift.grad += gy.sum(axis=axes).reshape(shift.shape)
        gx_hat = gy * g
        # through mean and variance of the batch
        x.grad += (
            inv
            / count
            * (
                count * gx_hat
                - gx_hat.sum(axis=axes, keepdims=True)
                - xhat * (gx_hat * xhat).sum(axis=axes, keepdims=True)
            )
        )

    out._backward = _backward
    return out


def conv1d_causal(x: Node, weights: Node, dilation: int = 1) -> Node:
    """Dilated causal 1-D convolution.

    ``x`` is (batch, in_channels, time), ``weights`` is (out_channels,
    in_channels, taps).  Output at time t sums tap i against the input at
    time ``t - dilation*i``; positions before the start read as zero, so the
    output never looks ahead.
    """
    if x.value.ndim != 3 or weights.value.ndim != 3:
        raise ValueError("conv1d_causal expects (B, C, T) input and (O, C, K) weights")
    if x.shape[1] != weights.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]}, weights expect {weights.shape[1]}"
        )
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    batch, _, length = x.shape
    out_channels, _, taps = weights.shape
    value = np.zeros((batch, out_channels, length), dtype=np.float64)
    for i in range(taps):
        offset = dilation * i
        if offset >= length:
            break
        # out[:, :, offset:] += w[:, :, i] . x[:, :, : length-offset]
        value[:, :, offset:] += np.einsum(
            "oc,bct->bot", weights.value[:, :, i], x.value[:, :, : length - offset]
        )
    out = Node(value, (x, weights))

    def _backward():
        for i in range(taps):
            offset = dilation * i
            if offset >= length:
                break
            gy = out.grad[:, :, offset:]
            xs = x.value[:, :, : length - offset]
            weights.grad[:, :, i] += np.einsum("bot,bct->oc", gy, xs)
            x.grad[:, :, : length - offset] += np.einsum(
                "oc,bot->bct", weights.value[:, :, i], gy
            )

    out._backward = _backward
    return out


def avg_pool_time(x: Node) -> Node:
    """Average over the trailing time axis: (B, C, T) -> (B, C)."""
    if x.value.ndim != 3:
        raise ValueError("avg_pool_time expects a (B, C, T) input")
    return x.mean(axis=2)


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m += (1.0 - state.beta1) * (grad - m)
        v += (1.0 - state.beta2) * (grad * grad - v)
        param -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)


class Adam:
    """Adam over a named set of leaf nodes."""

    def __init__(self, params: dict[str, Node], lr: float = 0.001):
        self.params = params
        self.state = AdamState(lr=lr)

    def step(self) -> None:
        adam_step(
            {k: p.value for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.value)
            p._spent = False


# -- verification -----------------------------------------------------------


def grad_check(fn, point: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative disagreement between tape and central-difference gradients.

    ``fn`` maps a Node to a scalar Node and must be deterministic (seed any
    randomness inside).  Relative error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    point = _as_array(point)
    leaf = Node(point.copy())
    out = fn(leaf)
    if out.value.size != 1:
        raise ValueError("grad_check target must be scalar-valued")
    if not np.isfinite(out.value).all():
        raise GradCheckError("non-finite value at the evaluation point")
    out.backward()
    analytic = leaf.grad.copy()

    worst = 0.0
    flat = point.reshape(-1)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] += eps
        hi = float(fn(Node(shifted.reshape(point.shape))).value)
        shifted[i] -= 2 * eps
        lo = float(fn(Node(shifted.reshape(point.shape))).value)
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise GradCheckError(f"non-finite evaluation at coordinate {i}")
        numeric = (hi - lo) / (2.0 * eps)
        error = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, error)
    return worst


def grad_check_params(
    build_loss,
    params: dict[str, Node],
    eps: float = 1e-5,
    coords_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Central-difference check of a loss built over persistent parameters.

    ``build_loss`` must rebuild the graph from the current parameter values
    on every call and be otherwise deterministic.  Large tensors can be spot
    checked by capping ``coords_per_param`` (coordinates sampled by seed).
    Returns the max relative error |analytic - numeric| / max(1, |numeric|).
    """
    for p in params.values():
        p.grad = np.zeros_like(p.value)
        p._spent = False
    loss = build_loss()
    if loss.value.size != 1:
        raise ValueError("loss must be scalar-valued")
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            coords = rng.choice(flat.size, size=coords_per_param, replace=False)
        for i in coords:
            original = flat[i]
            flat[i] = original + eps
            hi = float(build_loss().value)
            flat[i] = original - eps
            lo = float(build_loss().value)
            flat[i] = original
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise GradCheckError(f"non-finite evaluation at {name}[{i}]")
            numeric = (hi - lo) / (2.0 * eps)
            error = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, error)
    return worst


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params: dict[str, Node], path: str) -> None:
    """Flat JSON map: name -> shape + base64 of row-major float64 bytes."""
    payload = {
        name: {
            "shape": list(node.value.shape),
            "data": base64.b64encode(np.ascontiguousarray(node.value).tobytes()).decode(
                "ascii"
            ),
        }
        for name, node in params.items()
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, encoding="ascii") as fh:
        payload = json.load(fh)
    out = {}
    for name, entry in payload.items():
        data = np.frombuffer(base64.b64decode(entry["data"]), dtype=np.float64)
        out[name] = data.reshape(entry["shape"]).copy()
    return out


def restore_checkpoint(params: dict[str, Node], path: str) -> None:
    """Load a checkpoint into an existing parameter set, shapes must match."""
    loaded = load_checkpoint(path)
    missing = set(params) ^ set(loaded)
    if missing:
        raise ValueError(f"checkpoint parameter names disagree: {sorted(missing)}")
    for name, node in params.items():
        if loaded[name].shape != node.value.shape:
            raise ValueError(f"checkpoint shape mismatch for {name!r}")
        node.value = loaded[name]
        node.grad = np.zeros_like(node.value)
