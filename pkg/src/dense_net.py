"""
Dense Net
Small feedforward networks with hand-written forward/backward passes,
JSON checkpoints and an Adam optimizer
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DomainError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'anl-dense-net'
CHECKPOINT_VERSION = 1


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return np.where(z > 0.0, 1.0, 0.0)


def _tanh_grad(z):
    t = np.tanh(z)
    return 1.0 - t * t


ACTIVATIONS = {
    'relu': (_relu, _relu_grad),
    'tanh': (np.tanh, _tanh_grad),
    'identity': (lambda z: z, lambda z: np.ones_like(z)),
}


@dataclass
class Layer:
    """One affine map followed by an elementwise activation; out = act(x @ weight + bias)"""
    weight: np.ndarray
    bias: np.ndarray
    activation: str = 'identity'

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation '{self.activation}'")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DomainError(
                f"layer shapes do not match: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class GradTape:
    """Parameter gradients per layer plus the gradient w.r.t. the input batch"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: np.ndarray

    def params(self) -> List[np.ndarray]:
        """Gradients in the same order as DenseNet.params()"""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def __add__(self, other: 'GradTape') -> 'GradTape':
        return GradTape(
            weights=[a + b for a, b in zip(self.weights, other.weights)],
            biases=[a + b for a, b in zip(self.biases, other.biases)],
            inputs=self.inputs,
        )


class DenseNet:
    """Feedforward network acting on row batches"""

    def __init__(self, layers: Sequence[Layer]):
        """
        Initialize a network from its layers

        Args:
            layers: Ordered layers; each layer's input dim must equal the
                    previous layer's output dim
        """
        if not layers:
            raise DomainError("a network needs at least one layer")
        for prev, nxt in zip(layers[:-1], layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DomainError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        self.layers = list(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> List[np.ndarray]:
        """Live parameter arrays [W0, b0, W1, b1, ...]; optimizers update them in place"""
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def forward(self, batch: np.ndarray) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray]]]:
        """
        Run the network on a batch

        Args:
            batch: (n, input_dim) rows

        Returns:
            (output of shape (n, output_dim), cache of (layer input, pre-activation))
        """
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DomainError(f"batch shape {x.shape} does not match input dim {self.input_dim}")

        cache = []
        for layer in self.layers:
            z = x @ layer.weight + layer.bias
            cache.append((x, z))
            x = ACTIVATIONS[layer.activation][0](z)
        return x, cache

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch)[0]

    def backward(self, cache, d_output: np.ndarray) -> GradTape:
        """
        Backpropagate the gradient of a scalar loss

        Args:
            cache: Cache returned by the matching forward call
            d_output: dLoss/dOutput, same shape as the forward output

        Returns:
            GradTape with per-layer parameter gradients and dLoss/dInput
        """
        if len(cache) != len(self.layers):
            raise DomainError("cache does not belong to this network")
        grad = np.asarray(d_output, dtype=np.float64)
        last_z = cache[-1][1]
        if grad.shape != last_z.shape:
            raise DomainError(f"output gradient shape {grad.shape} != output shape {last_z.shape}")

        weights = [None] * len(self.layers)
        biases = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            x, z = cache[i]
            dz = grad * ACTIVATIONS[layer.activation][1](z)
            weights[i] = x.T @ dz
            biases[i] = dz.sum(axis=0)
            grad = dz @ layer.weight.T
        return GradTape(weights=weights, biases=biases, inputs=grad)

    def copy(self) -> 'DenseNet':
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def to_dict(self) -> Dict:
        """Checkpoint payload: layer dims, activation, row-major weights"""
        return {
            'format': CHECKPOINT_FORMAT,
            'version': CHECKPOINT_VERSION,
            'layers': [
                {
                    'in_dim': l.in_dim,
                    'out_dim': l.out_dim,
                    'activation': l.activation,
                    'weight': l.weight.reshape(-1).tolist(),
                    'bias': l.bias.tolist(),
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> 'DenseNet':
        if payload.get('format') != CHECKPOINT_FORMAT:
            raise DomainError(f"not a network checkpoint (format={payload.get('format')!r})")
        layers = []
        for spec in payload['layers']:
            weight = np.asarray(spec['weight'], dtype=np.float64).reshape(spec['in_dim'], spec['out_dim'])
            layers.append(Layer(weight, np.asarray(spec['bias'], dtype=np.float64), spec['activation']))
        return cls(layers)

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f)
        logger.debug(f"Saved network checkpoint to {path}")

    @classmethod
    def load(cls, path: str) -> 'DenseNet':
        if not os.path.exists(path):
            raise FileNotFoundError(f"network checkpoint not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


def build_net(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> DenseNet:
    """
    Build a network with seeded Glorot-uniform weights and zero biases

    Args:
        dims: Layer widths including input and output, e.g. [32, 64, 32]
        activations: One activation per layer (len(dims) - 1 entries)
        rng: Random stream for the weights

    Returns:
        DenseNet
    """
    if len(activations) != len(dims) - 1:
        raise DomainError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(Layer(weight, np.zeros(fan_out), act))
    return DenseNet(layers)


def build_encoder(in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator) -> DenseNet:
    """Shared feature encoder: in -> hidden (relu) -> out (identity)"""
    return build_net([in_dim, hidden_dim, out_dim], ['relu', 'identity'], rng)


def build_discriminator(in_dim: int, hidden_dim: int, n_layers: int, rng: np.random.Generator) -> DenseNet:
    """Domain discriminator with a raw scalar output (least-squares losses, no sigmoid)"""
    dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [1]
    acts = ['relu'] * (n_layers - 1) + ['identity']
    return build_net(dims, acts, rng)


def build_classifier(in_dim: int, n_classes: int, rng: np.random.Generator) -> DenseNet:
    """Single linear layer producing class logits"""
    return build_net([in_dim, n_classes], ['identity'], rng)


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one parameter list"""
    lr: float = 0.00035
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 0.00035, **kwargs) -> 'AdamState':
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kwargs
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """
    One bias-corrected Adam update, applied to ``params`` in place

    Args:
        params: Parameter arrays (e.g. DenseNet.params())
        grads: Matching gradients (e.g. GradTape.params())
        state: Moments and step counter, updated in place

    Returns:
        The same state
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DomainError("parameter, gradient and moment lists differ in length")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    step_size = state.lr / bc1

    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DomainError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= step_size * m / (np.sqrt(v / bc2) + state.eps)
    return state


def concat_params(*nets: DenseNet) -> List[np.ndarray]:
    """Parameters of several networks trained by one optimizer"""
    out = []
    for net in nets:
        out.extend(net.params())
    return out
