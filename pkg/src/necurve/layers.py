"""Trainable building blocks: dense, LSTM, batch norm, and the causal
convolution encoder.  Each block owns named parameter Nodes and registers
them into a shared dict so optimizers and checkpoints see a flat map.
"""

from __future__ import annotations

import numpy as np

from necurve.autodiff import Node, avg_pool_time, batch_norm, concat, conv1d_causal, narrow


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """Affine map (B, in) -> (B, out), optional elementwise activation."""

    def __init__(self, params: dict[str, Node], name: str, n_in: int, n_out: int,
                 rng: np.random.Generator):
        self.w = params.setdefault(f"{name}.w", Node(glorot(rng, (n_in, n_out))))
        self.b = params.setdefault(f"{name}.b", Node(np.zeros(n_out)))

    def __call__(self, x: Node) -> Node:
        return x @ self.w + self.b


class LstmCell:
    """Single recurrence step; gate order i, f, g, o; forget bias starts at 1."""

    def __init__(self, params: dict[str, Node], name: str, n_in: int, hidden: int,
                 rng: np.random.Generator):
        self.hidden = hidden
        self.wx = params.setdefault(f"{name}.wx", Node(glorot(rng, (n_in, 4 * hidden))))
        self.wh = params.setdefault(f"{name}.wh", Node(glorot(rng, (hidden, 4 * hidden))))
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0
        self.b = params.setdefault(f"{name}.b", Node(bias))

    def step(self, x: Node, h: Node, c: Node) -> tuple[Node, Node]:
        gates = x @ self.wx + h @ self.wh + self.b
        n = self.hidden
        i = narrow(gates, 1, 0, n).sigmoid()
        f = narrow(gates, 1, n, n).sigmoid()
        g = narrow(gates, 1, 2 * n, n).tanh()
        o = narrow(gates, 1, 3 * n, n).sigmoid()
        c_next = f * c + i * g
        h_next = o * c_next.tanh()
        return h_next, c_next


class Lstm:
    """Stacked unidirectional recurrence over a list of per-step inputs."""

    def __init__(self, params: dict[str, Node], name: str, n_in: int, hidden: int,
                 layers: int, rng: np.random.Generator):
        self.cells = [
            LstmCell(params, f"{name}.l{k}", n_in if k == 0 else hidden, hidden, rng)
            for k in range(layers)
        ]
        self.hidden = hidden

    def run(
        self, steps: list[Node], init: list[tuple[Node, Node]] | None = None
    ) -> tuple[list[Node], list[tuple[Node, Node]]]:
        """Returns top-layer outputs per step and final (h, c) per layer."""
        if not steps:
            raise ValueError("recurrence needs at least one step")
        batch = steps[0].shape[0]
        state = init or [
            (Node(np.zeros((batch, cell.hidden))), Node(np.zeros((batch, cell.hidden))))
            for cell in self.cells
        ]
        outputs = []
        for x in steps:
            for k, cell in enumerate(self.cells):
                h, c = cell.step(x, *state[k])
                state[k] = (h, c)
                x = h
            outputs.append(x)
        return outputs, state


class BatchNorm:
    """Per-feature standardization with running statistics for eval mode."""

    def __init__(self, params: dict[str, Node], name: str, features: int,
                 axes: tuple[int, ...] = (0,), momentum: float = 0.1, eps: float = 1e-5):
        self.gain = params.setdefault(f"{name}.gain", Node(np.ones(features)))
        self.shift = params.setdefault(f"{name}.shift", Node(np.zeros(features)))
        self.axes = axes
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    def __call__(self, x: Node, train: bool) -> Node:
        if train:
            mu = x.value.mean(axis=self.axes)
            var = x.value.var(axis=self.axes)
            self.running_mean += self.momentum * (mu - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
            return batch_norm(x, self.gain, self.shift, axes=self.axes, eps=self.eps)
        stat_shape = [1] * x.value.ndim
        feature_axis = next(a for a in range(x.value.ndim) if a not in self.axes)
        stat_shape[feature_axis] = len(self.running_mean)
        mu = self.running_mean.reshape(stat_shape)
        inv = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(stat_shape)
        g = self.gain.reshape(*stat_shape)
        s = self.shift.reshape(*stat_shape)
        return (x - mu) * inv * g + s

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"mean": self.running_mean, "var": self.running_var}


class TcnEncoder:
    """Stack of dilated causal convolutions ending in time-average pooling.

    Layer k uses dilation 2^k; each layer is conv, per-channel norm, ReLU.
    Receptive field with kernel 3 and 4 layers: 1 + 2*(1+2+4+8) = 31 steps.
    """

    def __init__(self, params: dict[str, Node], name: str, in_channels: int,
                 filters: int, kernel: int, layers: int, rng: np.random.Generator):
        self.filters = filters
        self.convs = []
        self.norms = []
        self.dilations = [2**k for k in range(layers)]
        for k in range(layers):
            c_in = in_channels if k == 0 else filters
            w = params.setdefault(
                f"{name}.conv{k}.w",
                Node(glorot(rng, (filters, c_in, kernel)) / np.sqrt(kernel)),
            )
            b = params.setdefault(f"{name}.conv{k}.b", Node(np.zeros(filters)))
            self.convs.append((w, b))
            self.norms.append(BatchNorm(params, f"{name}.norm{k}", filters, axes=(0, 2)))

    @property
    def receptive_field(self) -> int:
        kernel = self.convs[0][0].shape[2]
        return 1 + (kernel - 1) * sum(self.dilations)

    def features_over_time(self, x: Node, train: bool) -> Node:
        """(B, C, T) -> (B, filters, T), pre-pooling activations."""
        for (w, b), norm, dilation in zip(self.convs, self.norms, self.dilations):
            x = conv1d_causal(x, w, dilation) + b.reshape(1, -1, 1)
            x = norm(x, train)
            x = x.relu()
        return x

    def __call__(self, x: Node, train: bool) -> Node:
        """(B, C, T) -> (B, filters)."""
        return avg_pool_time(self.features_over_time(x, train))
