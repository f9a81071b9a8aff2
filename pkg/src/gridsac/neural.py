"""Dense networks with exact backpropagation and an Adam optimizer.

Just enough machinery for the policy and critic networks: fully connected
layers, ReLU hidden activations, a linear output, reverse-mode gradients
through a forward tape, and in-place Adam updates. No general autodiff.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "DenseNetwork",
    "ForwardTape",
    "GradientSet",
    "AdamState",
    "init_network",
    "forward",
    "backward",
    "adam_step",
    "polyak_update",
    "copy_network",
    "network_to_flat",
    "network_from_flat",
]


@dataclass
class DenseNetwork:
    """ReLU MLP parameters. ``weights[l]`` has shape (fan_in, fan_out)."""

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)


@dataclass
class ForwardTape:
    """Cached activations from one forward pass, consumed by backward()."""

    inputs: list[np.ndarray]       # input to each layer, shape (B, fan_in)
    pre_activations: list[np.ndarray]


@dataclass
class GradientSet:
    """Parameter gradients plus the gradient w.r.t. the network input."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_input: np.ndarray

    def finite(self) -> bool:
        return (all(np.all(np.isfinite(w)) for w in self.d_weights)
                and all(np.all(np.isfinite(b)) for b in self.d_biases))


def init_network(layer_dims: tuple[int, ...] | list[int],
                 rng: np.random.Generator,
                 final_scale: float | None = None) -> DenseNetwork:
    """Uniform fan-in initialization: limits 1/sqrt(fan_in) per layer.

    ``final_scale`` overrides the last layer's limit (small output layers
    keep a fresh squashed policy near the action midpoint).
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"bad layer dims {dims}")
    weights = []
    biases = []
    for l, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = 1.0 / np.sqrt(n_in)
        if final_scale is not None and l == len(dims) - 2:
            limit = final_scale
        weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return DenseNetwork(layer_dims=dims, weights=weights, biases=biases)


def forward(net: DenseNetwork, x: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    """Run the network; accepts a single vector or a (B, d) batch.

    Pure function: identical inputs give bit-identical outputs. The returned
    tape belongs to this input and is required for an exact backward pass.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.layer_dims[0]:
        raise ValueError(f"input width {h.shape[1]} != {net.layer_dims[0]}")
    inputs = []
    pre_acts = []
    last = net.n_layers - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        pre_acts.append(z)
        h = z if l == last else np.maximum(z, 0.0)
    out = h[0] if single else h
    return out, ForwardTape(inputs=inputs, pre_activations=pre_acts)


def backward(net: DenseNetwork, tape: ForwardTape, output_grad: np.ndarray) -> GradientSet:
    """Exact gradients of the scalar whose output-gradient is ``output_grad``.

    For batched tapes the parameter gradients accumulate over rows, so the
    caller owns any 1/B averaging. Also returns d_input for chaining through
    the network's input (used by the policy update through the critics).
    """
    if len(tape.inputs) != net.n_layers:
        raise ValueError("tape does not match network depth")
    g = np.asarray(output_grad, dtype=float)
    single = g.ndim == 1
    g = g[None, :] if single else g
    if g.shape != tape.pre_activations[-1].shape:
        raise ValueError(
            f"output_grad shape {g.shape} != forward output {tape.pre_activations[-1].shape}")
    d_weights: list[np.ndarray] = [None] * net.n_layers
    d_biases: list[np.ndarray] = [None] * net.n_layers
    for l in range(net.n_layers - 1, -1, -1):
        if l != net.n_layers - 1:
            g = g * (tape.pre_activations[l] > 0.0)
        d_weights[l] = tape.inputs[l].T @ g
        d_biases[l] = g.sum(axis=0)
        g = g @ net.weights[l].T
    d_input = g[0] if single else g
    return GradientSet(d_weights=d_weights, d_biases=d_biases, d_input=d_input)


@dataclass
class AdamState:
    """First/second moment accumulators and step counter for one network."""

    learning_rate: float
    m_weights: list[np.ndarray]
    v_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_biases: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: DenseNetwork, learning_rate: float) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            m_weights=[np.zeros_like(w) for w in net.weights],
            v_weights=[np.zeros_like(w) for w in net.weights],
            m_biases=[np.zeros_like(b) for b in net.biases],
            v_biases=[np.zeros_like(b) for b in net.biases],
        )


def adam_step(net: DenseNetwork, grads: GradientSet, state: AdamState) -> tuple[DenseNetwork, AdamState]:
    """One bias-corrected Adam update, in place on ``net`` and ``state``.

    Non-finite gradients are rejected: the update is skipped (moments and
    step counter untouched) and the event logged.
    """
    if not grads.finite():
        logger.warning("non-finite gradients; Adam update skipped")
        return net, state
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for params, g_list, m_list, v_list in (
        (net.weights, grads.d_weights, state.m_weights, state.v_weights),
        (net.biases, grads.d_biases, state.m_biases, state.v_biases),
    ):
        for p, g, m, v in zip(params, g_list, m_list, v_list):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * np.square(g)
            p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


def polyak_update(target: DenseNetwork, source: DenseNetwork, polyak: float) -> DenseNetwork:
    """Exponential averaging toward the source network, in place on target.

    ``polyak`` is the retention coefficient on the target's own parameters:
    target <- polyak * target + (1 - polyak) * source. 1.0 leaves the target
    untouched, 0.0 hard-copies the source.
    """
    if not (0.0 <= polyak <= 1.0):
        raise ValueError("polyak must be in [0, 1]")
    if target.layer_dims != source.layer_dims:
        raise ValueError("network shapes differ")
    for tw, sw in zip(target.weights, source.weights):
        tw *= polyak
        tw += (1.0 - polyak) * sw
    for tb, sb in zip(target.biases, source.biases):
        tb *= polyak
        tb += (1.0 - polyak) * sb
    return target


def copy_network(net: DenseNetwork) -> DenseNetwork:
    return DenseNetwork(layer_dims=net.layer_dims,
                        weights=[w.copy() for w in net.weights],
                        biases=[b.copy() for b in net.biases])


def network_to_flat(net: DenseNetwork) -> np.ndarray:
    """All parameters as one row-major flat vector (weights then bias, per layer)."""
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.reshape(-1))
        parts.append(b)
    return np.concatenate(parts)


def network_from_flat(layer_dims: tuple[int, ...] | list[int], flat: np.ndarray) -> DenseNetwork:
    dims = tuple(int(d) for d in layer_dims)
    flat = np.asarray(flat, dtype=float)
    weights = []
    biases = []
    k = 0
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        weights.append(flat[k:k + n_in * n_out].reshape(n_in, n_out).copy())
        k += n_in * n_out
        biases.append(flat[k:k + n_out].copy())
        k += n_out
    if k != flat.size:
        raise ValueError(f"flat parameter vector has {flat.size} values, expected {k}")
    return DenseNetwork(layer_dims=dims, weights=weights, biases=biases)
