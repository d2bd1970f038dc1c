"""Plain numpy multilayer perceptron with exact reverse-mode gradients.

Parameters live in one flat float64 vector; per-layer weight matrices and bias
vectors are reshaped views into it. That keeps the optimizer a handful of
vector operations and makes "copy the network" a single array copy.

Batch layout is row = sample throughout. Hidden activations: relu, leaky_relu
(negative slope 0.01 unless overridden), or linear. Output activation: linear
or softmax (row-stable, shifted by the row max before exponentiating).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError

HIDDEN_ACTIVATIONS = ("relu", "leaky_relu", "linear")
OUTPUT_ACTIVATIONS = ("linear", "softmax")

DEFAULT_LEAKY_SLOPE = 0.01


def _layout(layer_dims):
    """Offsets of each weight matrix and bias vector inside the flat vector.

    Layout per connection l: W_l (p_l x p_{l+1}) row-major, then b_l (p_{l+1},).
    """
    offsets = []
    pos = 0
    for p_in, p_out in zip(layer_dims[:-1], layer_dims[1:]):
        w0 = pos
        pos += p_in * p_out
        b0 = pos
        pos += p_out
        offsets.append((w0, b0, p_in, p_out))
    return offsets, pos


def _views(flat, offsets):
    weights = []
    biases = []
    for w0, b0, p_in, p_out in offsets:
        weights.append(flat[w0:b0].reshape(p_in, p_out))
        biases.append(flat[b0 : b0 + p_out])
    return weights, biases


@dataclass
class MlpNetwork:
    """Fully-connected network; treat as immutable outside the optimizer."""

    layer_dims: tuple
    hidden_activation: str
    output_activation: str
    theta: np.ndarray
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    _weights: list = field(init=False, default=None, repr=False, compare=False)
    _biases: list = field(init=False, default=None, repr=False, compare=False)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        offsets, size = _layout(self.layer_dims)
        if self.theta.shape != (size,):
            raise ShapeError(
                f"theta has {self.theta.shape[0]} entries, layout needs {size}"
            )
        self._weights, self._biases = _views(self.theta, offsets)

    @property
    def weights(self):
        return self._weights

    @property
    def biases(self):
        return self._biases

    @property
    def n_hidden_layers(self) -> int:
        return len(self.layer_dims) - 2

    @property
    def n_params(self) -> int:
        return self.theta.shape[0]

    def with_theta(self, theta: np.ndarray) -> "MlpNetwork":
        """Same architecture around a new flat parameter vector."""
        return MlpNetwork(
            self.layer_dims,
            self.hidden_activation,
            self.output_activation,
            theta,
            self.leaky_slope,
        )

    def copy(self) -> "MlpNetwork":
        return self.with_theta(self.theta.copy())

    def weight_mask(self) -> np.ndarray:
        """Boolean mask over the flat vector selecting weight (non-bias) entries."""
        cached = _MASK_CACHE.get(self.layer_dims)
        if cached is not None:
            return cached
        mask = np.zeros(self.n_params, dtype=bool)
        offsets, _ = _layout(self.layer_dims)
        for w0, b0, _, _ in offsets:
            mask[w0:b0] = True
        mask.setflags(write=False)
        _MASK_CACHE[self.layer_dims] = mask
        return mask


_MASK_CACHE: dict = {}


@dataclass
class Gradient:
    """Flat gradient with the same layout as the owning network's theta."""

    layer_dims: tuple
    flat: np.ndarray

    def __post_init__(self):
        offsets, size = _layout(self.layer_dims)
        if self.flat.shape != (size,):
            raise ShapeError("gradient size does not match layer_dims layout")
        self._weights, self._biases = _views(self.flat, offsets)

    @property
    def weights(self):
        return self._weights

    @property
    def biases(self):
        return self._biases


@dataclass
class ForwardTrace:
    """Per-layer activations from one forward pass, input first.

    activations[0] is the input batch, activations[1..L] the post-activation
    hidden layers, activations[L+1] the pre-output-activation values.
    """

    activations: list


def init_network(
    layer_dims,
    hidden_activation: str = "relu",
    output_activation: str = "linear",
    seed: int = 0,
    leaky_slope: float = DEFAULT_LEAKY_SLOPE,
) -> MlpNetwork:
    """Glorot-uniform weights, zero biases, deterministic for a given seed.

    Each W_l is drawn U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ConfigurationError("layer_dims needs at least input and output sizes")
    if any(d < 1 for d in dims):
        raise ConfigurationError(f"layer widths must be >= 1, got {dims}")
    if hidden_activation not in HIDDEN_ACTIVATIONS:
        raise ConfigurationError(f"unknown hidden activation {hidden_activation!r}")
    if output_activation not in OUTPUT_ACTIVATIONS:
        raise ConfigurationError(f"unknown output activation {output_activation!r}")

    rng = np.random.default_rng(seed)
    offsets, size = _layout(dims)
    theta = np.zeros(size, dtype=np.float64)
    for w0, b0, p_in, p_out in offsets:
        limit = np.sqrt(6.0 / (p_in + p_out))
        theta[w0:b0] = rng.uniform(-limit, limit, size=p_in * p_out)
        # biases stay zero
    return MlpNetwork(dims, hidden_activation, output_activation, theta, leaky_slope)


def _apply_hidden(kind, slope, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "leaky_relu":
        return np.where(z > 0.0, z, slope * z)
    return z


def softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(net: MlpNetwork, x: np.ndarray):
    """Run the batch through the network.

    Returns (outputs, trace). outputs is post-output-activation; the trace
    keeps the input, every hidden activation, and the pre-output values, so
    backward() can rebuild all local derivatives without recomputation.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"input must be 2-D (batch, features), got ndim={x.ndim}")
    if x.shape[1] != net.layer_dims[0]:
        raise ShapeError(
            f"input width {x.shape[1]} does not match network input {net.layer_dims[0]}"
        )

    acts = [x]
    a = x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        if l < last:
            a = _apply_hidden(net.hidden_activation, net.leaky_slope, z)
            acts.append(a)
        else:
            acts.append(z)  # pre-output
    if net.output_activation == "softmax":
        out = softmax_rows(acts[-1])
    else:
        out = acts[-1]
    return out, ForwardTrace(acts)


def _check_trace(net, x, trace):
    dims = net.layer_dims
    acts = trace.activations
    if len(acts) != len(dims):
        raise ShapeError(
            f"trace has {len(acts)} layers, network expects {len(dims)}"
        )
    n = x.shape[0]
    for l, (a, p) in enumerate(zip(acts, dims)):
        if a.shape != (n, p):
            raise ShapeError(
                f"trace layer {l} has shape {a.shape}, expected {(n, p)}"
            )


def _hidden_deriv(kind, slope, a):
    # derivative from the post-activation value; valid because relu and
    # leaky_relu (slope > 0) preserve the sign of the pre-activation
    if kind == "relu":
        return (a > 0.0).astype(np.float64)
    if kind == "leaky_relu":
        return np.where(a > 0.0, 1.0, slope)
    return None  # linear: derivative 1, skip the multiply


def backward(net: MlpNetwork, x: np.ndarray, upstream: np.ndarray, trace: ForwardTrace) -> Gradient:
    """Exact gradient of sum(outputs * upstream) w.r.t. all weights and biases.

    upstream is d(loss)/d(outputs) evaluated at the forward outputs; for a
    softmax output the softmax Jacobian is applied here, so upstream is taken
    w.r.t. the post-softmax values.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _check_trace(net, x, trace)
    if upstream.shape != (x.shape[0], net.layer_dims[-1]):
        raise ShapeError(
            f"upstream has shape {upstream.shape}, expected {(x.shape[0], net.layer_dims[-1])}"
        )

    acts = trace.activations
    if net.output_activation == "softmax":
        p = softmax_rows(acts[-1])
        g = p * (upstream - (upstream * p).sum(axis=1, keepdims=True))
    else:
        g = upstream

    flat = np.empty(net.n_params, dtype=np.float64)
    grad = Gradient(net.layer_dims, flat)
    for l in range(len(net.weights) - 1, -1, -1):
        a_prev = acts[l]
        np.matmul(a_prev.T, g, out=grad.weights[l])
        np.sum(g, axis=0, out=grad.biases[l])
        if l > 0:
            g = g @ net.weights[l].T
            d = _hidden_deriv(net.hidden_activation, net.leaky_slope, acts[l])
            if d is not None:
                g *= d
    return grad


def network_to_dict(net: MlpNetwork) -> dict:
    return {
        "layer_dims": list(net.layer_dims),
        "activations": {
            "hidden": net.hidden_activation,
            "output": net.output_activation,
            "leaky_slope": net.leaky_slope,
        },
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def network_from_dict(blob: dict) -> MlpNetwork:
    dims = tuple(int(d) for d in blob["layer_dims"])
    acts = blob["activations"]
    offsets, size = _layout(dims)
    theta = np.zeros(size, dtype=np.float64)
    net = MlpNetwork(
        dims, acts["hidden"], acts["output"], theta, float(acts.get("leaky_slope", DEFAULT_LEAKY_SLOPE))
    )
    for l, (w, b) in enumerate(zip(blob["weights"], blob["biases"])):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.shape != net.weights[l].shape or b.shape != net.biases[l].shape:
            raise ShapeError(f"serialized layer {l} does not match layer_dims")
        net.weights[l][...] = w
        net.biases[l][...] = b
    return net


@dataclass
class NetworkSpec:
    """Architecture description; turns into a concrete network via build()."""

    layer_dims: tuple
    hidden_activation: str = "relu"
    output_activation: str = "linear"
    leaky_slope: float = DEFAULT_LEAKY_SLOPE

    def build(self, seed: int) -> MlpNetwork:
        return init_network(
            self.layer_dims,
            self.hidden_activation,
            self.output_activation,
            seed=seed,
            leaky_slope=self.leaky_slope,
        )
