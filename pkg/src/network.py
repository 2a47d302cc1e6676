import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Raised when arrays do not match the layer widths of a network."""


@dataclass(frozen=True)
class NetSpec:
    """
    Layer widths of a dense feed-forward network.

    Hidden layers use tanh, the last layer is linear so the network can
    regress unbounded normalized values.
    """

    layer_widths: Tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ShapeError(f"A network needs at least 2 layer widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ShapeError(f"All layer widths must be positive, got {widths}")
        object.__setattr__(self, "layer_widths", widths)

    @classmethod
    def with_hidden(cls, input_width: int, output_width: int, hidden: Optional[Sequence[int]] = None) -> "NetSpec":
        """Build a spec; two hidden layers of max(16, 4*input) units unless `hidden` is given."""
        if hidden is None:
            width = max(16, 4 * int(input_width))
            hidden = (width, width)
        return cls((int(input_width), *[int(h) for h in hidden], int(output_width)))

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths)}

    @classmethod
    def from_dict(cls, data: dict) -> "NetSpec":
        return cls(tuple(data["layer_widths"]))


@dataclass(frozen=True, eq=False)
class Weights:
    """Per-layer (out x in) matrices and bias vectors, in layer order."""

    matrices: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    @classmethod
    def initialize(cls, spec: NetSpec, rng: np.random.Generator) -> "Weights":
        """Uniform init in +-1/sqrt(fan_in) for every matrix and bias."""
        matrices, biases = [], []
        for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            matrices.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(tuple(matrices), tuple(biases))

    @classmethod
    def zeros(cls, spec: NetSpec) -> "Weights":
        matrices = tuple(np.zeros((o, i)) for i, o in zip(spec.layer_widths[:-1], spec.layer_widths[1:]))
        biases = tuple(np.zeros(o) for o in spec.layer_widths[1:])
        return cls(matrices, biases)

    def check(self, spec: NetSpec) -> None:
        if len(self.matrices) != spec.n_layers or len(self.biases) != spec.n_layers:
            raise ShapeError(f"Weights have {len(self.matrices)} layers, spec expects {spec.n_layers}")
        for layer, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
            if self.matrices[layer].shape != (fan_out, fan_in) or self.biases[layer].shape != (fan_out,):
                raise ShapeError(
                    f"Layer {layer} has matrix {self.matrices[layer].shape} and bias {self.biases[layer].shape}, "
                    f"expected ({fan_out}, {fan_in}) and ({fan_out},)"
                )

    def flat(self) -> np.ndarray:
        parts = []
        for matrix, bias in zip(self.matrices, self.biases):
            parts.append(matrix.ravel())
            parts.append(bias)
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def from_flat(cls, spec: NetSpec, flat: np.ndarray) -> "Weights":
        flat = np.asarray(flat, dtype=float)
        expected = sum(o * i + o for i, o in zip(spec.layer_widths[:-1], spec.layer_widths[1:]))
        if flat.shape != (expected,):
            raise ShapeError(f"Flat weight vector has shape {flat.shape}, spec expects ({expected},)")
        matrices, biases, offset = [], [], 0
        for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
            matrices.append(flat[offset:offset + fan_out * fan_in].reshape(fan_out, fan_in).copy())
            offset += fan_out * fan_in
            biases.append(flat[offset:offset + fan_out].copy())
            offset += fan_out
        return cls(tuple(matrices), tuple(biases))

    def step(self, grad: "Weights", learning_rate: float) -> "Weights":
        """Return w - learning_rate * grad as a new instance."""
        return Weights(
            tuple(m - learning_rate * g for m, g in zip(self.matrices, grad.matrices)),
            tuple(b - learning_rate * g for b, g in zip(self.biases, grad.biases)),
        )

    def scaled(self, factor: float) -> "Weights":
        return Weights(tuple(m * factor for m in self.matrices), tuple(b * factor for b in self.biases))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(m)) for m in self.matrices) and all(np.all(np.isfinite(b)) for b in self.biases)


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Activations kept for backprop; activations[0] is the input batch."""

    activations: Tuple[np.ndarray, ...]
    single: bool

    @property
    def input(self) -> np.ndarray:
        return self.activations[0][0] if self.single else self.activations[0]


def _as_batch(values: np.ndarray, width: int, what: str) -> Tuple[np.ndarray, bool]:
    values = np.asarray(values, dtype=float)
    single = values.ndim == 1
    batch = values.reshape(1, -1) if single else values
    if batch.ndim != 2 or batch.shape[1] != width:
        raise ShapeError(f"{what} has shape {values.shape}, expected width {width}")
    return batch, single


def forward(spec: NetSpec, w: Weights, inputs: np.ndarray) -> Tuple[np.ndarray, ForwardTrace]:
    """
    Propagate a vector (or a batch of row vectors) through the network.

    Returns:
        Output with the same leading shape as `inputs` and the trace needed by `backward`.

    Raises:
        ShapeError: If the input width does not match the first layer.
    """
    batch, single = _as_batch(inputs, spec.input_width, "Network input")
    activations = [batch]
    current = batch
    last = spec.n_layers - 1
    for layer in range(spec.n_layers):
        current = current @ w.matrices[layer].T + w.biases[layer]
        if layer != last:
            current = np.tanh(current)
        activations.append(current)
    trace = ForwardTrace(tuple(activations), single)
    output = current[0] if single else current
    return output, trace


def backward(
    spec: NetSpec,
    w: Weights,
    trace: ForwardTrace,
    d_output: np.ndarray,
    need_weights: bool = True,
) -> Tuple[Optional[Weights], np.ndarray]:
    """
    Backpropagate dLoss/dOutput to the weights and to the input.

    Weight gradients are summed over the batch. With `need_weights=False`
    only the input gradient is computed.

    Raises:
        ShapeError: If the trace was produced by another network shape.
    """
    if len(trace.activations) != spec.n_layers + 1:
        raise ShapeError(f"Trace has {len(trace.activations) - 1} layers, spec expects {spec.n_layers}")
    for layer, width in enumerate(spec.layer_widths):
        if trace.activations[layer].shape[1] != width:
            raise ShapeError(f"Stale trace: layer {layer} width {trace.activations[layer].shape[1]} != {width}")

    delta, _ = _as_batch(d_output, spec.output_width, "Output gradient")
    if delta.shape[0] != trace.activations[0].shape[0]:
        raise ShapeError(f"Output gradient batch {delta.shape[0]} != trace batch {trace.activations[0].shape[0]}")

    grad_matrices = [None] * spec.n_layers
    grad_biases = [None] * spec.n_layers
    last = spec.n_layers - 1
    for layer in range(last, -1, -1):
        if layer != last:
            delta = delta * (1.0 - trace.activations[layer + 1] ** 2)
        if need_weights:
            grad_matrices[layer] = delta.T @ trace.activations[layer]
            grad_biases[layer] = delta.sum(axis=0)
        delta = delta @ w.matrices[layer]

    grad_w = Weights(tuple(grad_matrices), tuple(grad_biases)) if need_weights else None
    grad_input = delta[0] if trace.single else delta
    return grad_w, grad_input


def jacobian(
    spec: NetSpec,
    w: Weights,
    inputs: np.ndarray,
    out_channels: Sequence[int],
    in_channels: Sequence[int],
) -> np.ndarray:
    """Matrix of d output[i] / d input[j] for i in out_channels, j in in_channels."""
    out_channels = np.asarray(list(out_channels), dtype=int)
    in_channels = np.asarray(list(in_channels), dtype=int)
    if out_channels.size == 0 or in_channels.size == 0:
        raise ShapeError("Jacobian needs non-empty output and input channel sets")
    if out_channels.min() < 0 or out_channels.max() >= spec.output_width:
        raise ShapeError(f"Output channels {out_channels.tolist()} out of range for width {spec.output_width}")
    if in_channels.min() < 0 or in_channels.max() >= spec.input_width:
        raise ShapeError(f"Input channels {in_channels.tolist()} out of range for width {spec.input_width}")

    point, _ = _as_batch(inputs, spec.input_width, "Jacobian input")
    if point.shape[0] != 1:
        raise ShapeError("Jacobian is evaluated at a single input vector")
    # one backward pass per requested output row, batched
    batch = np.repeat(point, out_channels.size, axis=0)
    _, trace = forward(spec, w, batch)
    seeds = np.zeros((out_channels.size, spec.output_width))
    seeds[np.arange(out_channels.size), out_channels] = 1.0
    _, grad_input = backward(spec, w, trace, seeds, need_weights=False)
    return grad_input[:, in_channels]
