"""Small feedforward network engine with manual backpropagation.

Everything runs in float64 on numpy arrays. A network is an ordered list of
layers; each layer caches what it needs during ``forward`` so that ``backward``
can return the gradient with respect to its input and stash parameter
gradients on the side.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TRAIN = "train"
INFER = "infer"


class NetworkError(Exception):
    """Base class for network engine errors."""


class ShapeError(NetworkError, ValueError):
    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(prefix + message)


class NonFiniteError(NetworkError, FloatingPointError):
    def __init__(self, layer: int, name: str):
        self.layer = layer
        super().__init__(f"layer {layer} ({name}) produced non-finite activations")


class NoForwardCacheError(NetworkError, RuntimeError):
    pass


class Dense:
    """Affine layer ``y = x W^T + b``."""

    kind = "dense"

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        weights = np.array(weights, dtype=np.float64)
        bias = np.array(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise ShapeError(f"weights {weights.shape} and bias {bias.shape} disagree")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise ValueError("dense parameters must be finite")
        self.weights = weights
        self.bias = bias
        self._x = None
        self.grads: dict[str, np.ndarray] = {}

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "Dense":
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        return cls(rng.uniform(-limit, limit, size=(out_dim, in_dim)), np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def param_names(self) -> tuple[str, ...]:
        return ("weights", "bias")

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        self._x = x
        return x @ self.weights.T + self.bias

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self.grads = {"weights": grad.T @ self._x, "bias": grad.sum(axis=0)}
        return grad @ self.weights


class BatchNorm:
    """Per-feature batch normalization.

    Train mode normalizes with the batch statistics (biased variance) and
    updates the running estimates; infer mode is an affine map built from the
    running estimates and touches nothing.
    """

    kind = "batchnorm"

    def __init__(self, dim: int, epsilon: float = 1e-5, momentum: float = 0.1):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.epsilon = epsilon
        self.momentum = momentum
        self._cache = None
        self.grads: dict[str, np.ndarray] = {}

    @property
    def in_dim(self) -> int:
        return self.gamma.shape[0]

    out_dim = in_dim

    def param_names(self) -> tuple[str, ...]:
        return ("gamma", "beta")

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        if mode == TRAIN:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            x_hat = (x - mean) * inv_std
            n = x.shape[0]
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean
            # running variance tracks the unbiased estimate
            self.running_var = (1 - m) * self.running_var + m * var * n / (n - 1)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.epsilon)
            x_hat = (x - self.running_mean) * inv_std
        self._cache = (mode, x_hat, inv_std)
        return self.gamma * x_hat + self.beta

    def backward(self, grad: np.ndarray) -> np.ndarray:
        mode, x_hat, inv_std = self._cache
        self.grads = {
            "gamma": (grad * x_hat).sum(axis=0),
            "beta": grad.sum(axis=0),
        }
        g_hat = grad * self.gamma
        if mode != TRAIN:
            return g_hat * inv_std
        # batch statistics depend on every row
        return inv_std * (g_hat - g_hat.mean(axis=0) - x_hat * (g_hat * x_hat).mean(axis=0))


class Sigmoid:
    kind = "sigmoid"

    def __init__(self, dim: int):
        self.dim = dim
        self._y = None
        self.grads: dict[str, np.ndarray] = {}

    @property
    def in_dim(self) -> int:
        return self.dim

    out_dim = in_dim

    def param_names(self) -> tuple[str, ...]:
        return ()

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        # split by sign so exp never overflows
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._y = y
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self._y * (1.0 - self._y)


class Network:
    """Ordered stack of layers.

    Use :meth:`build` for the standard topology: ``dense -> batchnorm ->
    sigmoid`` for every hidden layer and a bare dense layer on top.
    """

    def __init__(self, layers: list):
        if not layers:
            raise ValueError("a network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ShapeError(
                    f"expects width {layers[i].in_dim} but previous layer emits "
                    f"{layers[i - 1].out_dim}",
                    layer=i,
                )
        self.layers = layers
        self._cached_mode: str | None = None

    @classmethod
    def build(
        cls,
        in_dim: int,
        hidden_sizes,
        out_dim: int,
        seed: int | np.random.Generator = 0,
        epsilon: float = 1e-5,
        momentum: float = 0.1,
    ) -> "Network":
        rng = np.random.default_rng(seed)
        layers: list = []
        width = in_dim
        for h in hidden_sizes:
            layers += [Dense.init(width, h, rng), BatchNorm(h, epsilon, momentum), Sigmoid(h)]
            width = h
        layers.append(Dense.init(width, out_dim, rng))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dense_layers(self) -> list[Dense]:
        return [layer for layer in self.layers if isinstance(layer, Dense)]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(layer.out_dim for layer in self.dense_layers[:-1])

    def parameters(self) -> list[np.ndarray]:
        """Live references to every trainable array, in layer order."""
        return [getattr(layer, name) for layer in self.layers for name in layer.param_names()]

    def forward(self, batch: np.ndarray, mode: str = INFER) -> np.ndarray:
        if mode not in (TRAIN, INFER):
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"input width {x.shape[-1]} != {self.in_dim}", layer=0)
        if mode == TRAIN and x.shape[0] < 2:
            raise ShapeError("train mode needs a batch of at least 2 rows", layer=0)
        self._cached_mode = None
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, mode)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(i, layer.kind)
        self._cached_mode = mode
        self._cached_rows = x.shape[0]
        return x

    def _backward(self, output_grad: np.ndarray) -> np.ndarray:
        if self._cached_mode is None:
            raise NoForwardCacheError("backward called without a cached forward pass")
        g = np.asarray(output_grad, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        expected = self._cached_rows, self.out_dim
        if g.shape != expected:
            raise ShapeError(f"output gradient shape {g.shape} != {expected}", len(self.layers) - 1)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def backward_input(self, output_grad: np.ndarray) -> np.ndarray:
        """Gradient of the loss with respect to the cached input batch."""
        return self._backward(output_grad)

    def backward_params(self, output_grad: np.ndarray) -> list[np.ndarray]:
        """Gradients aligned with :meth:`parameters`; parameters are not modified."""
        if self._cached_mode != TRAIN:
            if self._cached_mode is None:
                raise NoForwardCacheError("backward called without a cached forward pass")
            raise NoForwardCacheError("parameter gradients need a train-mode forward pass")
        self._backward(output_grad)
        return [layer.grads[name] for layer in self.layers for name in layer.param_names()]

    def copy(self) -> "Network":
        import copy

        clone = copy.deepcopy(self)
        clone._cached_mode = None
        for layer in clone.layers:
            layer.grads = {}
        return clone


def check_architecture(net: Network, n_layers: int = 5) -> None:
    """Raise ``ShapeError`` unless ``net`` has ``n_layers`` layers of units in the standard topology.

    Layers of units are the input plus the output of every dense layer, so
    ``n_layers`` units layers means ``n_layers - 1`` weight matrices. Every
    dense layer but the last is followed by batchnorm and sigmoid.
    """
    layers = net.layers
    n_dense = n_layers - 1
    if len(layers) != 3 * (n_dense - 1) + 1:
        raise ShapeError(f"expected {3 * (n_dense - 1) + 1} layers, found {len(layers)}")
    for block in range(n_dense - 1):
        kinds = tuple(layer.kind for layer in layers[3 * block : 3 * block + 3])
        if kinds != ("dense", "batchnorm", "sigmoid"):
            raise ShapeError(f"hidden block {block} is {kinds}", layer=3 * block)
    if layers[-1].kind != "dense":
        raise ShapeError("last layer must be dense", layer=len(layers) - 1)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"parameter {i} has shape {np.shape(p)}, gradient {np.shape(g)}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state
