"""
A small dense and recurrent network engine with analytic gradients

Parameters of a network live in one flat float64 vector; named layer tensors are numpy views into it, so an
optimizer step updates every layer in place. Each update bumps the weights' version, and a forward cache is only
accepted by backward while the version it was computed with is still current.
"""

import json
import logging
import os
import struct
from typing import Optional

import numpy
import scipy.special

import KDFollowConstants
from KDFollowConstants import ACT_RELU, ACT_SIGMOID, ACT_IDENTITY
from KDFollowLanguage import get_text
from KDFollowMessages import ConfigError, DataError, DivergenceError, ShapeError, StaleCacheError

LOG = logging.getLogger(__name__)

KIND_MLP = "mlp"
KIND_LSTM = "lstm"


# ---------- network descriptions ----------
class MlpSpec:
    """
    dense network on the flattened window (steps x channels inputs)
    """
    kind = KIND_MLP

    def __init__(self, input_dim: int = 30, hidden=(60, 60), hidden_activation: str = ACT_RELU, output_dim: int = 1,
                 output_activation: str = ACT_SIGMOID):
        self.input_dim = int(input_dim)
        self.hidden = [int(h) for h in hidden]
        self.hidden_activation = hidden_activation
        self.output_dim = int(output_dim)
        self.output_activation = output_activation
        if min([self.input_dim, self.output_dim] + self.hidden) < 1:
            raise ConfigError("network dimensions must be at least 1")
        for activation in (hidden_activation, output_activation):
            if activation not in KDFollowConstants.ACTIVATIONS:
                raise ConfigError("unknown activation {}".format(activation))

    def widths(self) -> list:
        return [self.input_dim] + self.hidden + [self.output_dim]

    def layout(self) -> list:
        shapes = []
        widths = self.widths()
        for k in range(len(widths) - 1):
            shapes.append(("W{}".format(k+1), (widths[k], widths[k+1])))
            shapes.append(("b{}".format(k+1), (widths[k+1],)))
        return shapes

    def descriptor(self) -> dict:
        return {"kind": self.kind, "input_dim": self.input_dim, "hidden": self.hidden,
                "hidden_activation": self.hidden_activation, "output_dim": self.output_dim,
                "output_activation": self.output_activation}


class LstmSpec:
    """
    stacked LSTM over the window sequence, an optional ReLU projection of the last hidden state, and a dense
    sigmoid head
    """
    kind = KIND_LSTM

    def __init__(self, input_channels: int = KDFollowConstants.N_CHANNELS, layers=(475, 61), dropout: float = 0.3,
                 projection: int = 0, steps: int = 10):
        self.input_channels = int(input_channels)
        self.layers = [int(u) for u in layers]
        self.dropout = float(dropout)
        self.projection = int(projection)
        self.steps = int(steps)
        self.output_dim = 1
        if len(self.layers) < 1 or min([self.input_channels, self.steps] + self.layers) < 1:
            raise ConfigError("network dimensions must be at least 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.projection < 0:
            raise ConfigError("projection width cannot be negative")

    def layout(self) -> list:
        shapes = []
        n_in = self.input_channels
        for k, units in enumerate(self.layers):
            shapes.append(("lstm{}.W".format(k+1), (n_in, 4*units)))
            shapes.append(("lstm{}.U".format(k+1), (units, 4*units)))
            shapes.append(("lstm{}.b".format(k+1), (4*units,)))
            n_in = units
        if self.projection > 0:
            shapes.append(("proj.W", (n_in, self.projection)))
            shapes.append(("proj.b", (self.projection,)))
            n_in = self.projection
        shapes.append(("head.W", (n_in, 1)))
        shapes.append(("head.b", (1,)))
        return shapes

    def descriptor(self) -> dict:
        return {"kind": self.kind, "input_channels": self.input_channels, "layers": self.layers,
                "dropout": self.dropout, "projection": self.projection, "steps": self.steps}


def spec_from_descriptor(descriptor: dict):
    descriptor = dict(descriptor)
    kind = descriptor.pop("kind")
    if kind == KIND_MLP:
        return MlpSpec(**descriptor)
    elif kind == KIND_LSTM:
        return LstmSpec(**descriptor)
    raise DataError("unknown network kind {}".format(kind))


class OptimizerSpec:
    def __init__(self, kind: str = KDFollowConstants.OPT_ADAM, learning_rate: float = 0.01, batch_size: int = 100,
                 epochs: int = 5, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if kind not in (KDFollowConstants.OPT_ADAM, KDFollowConstants.OPT_SGD):
            raise ConfigError("unknown optimizer {}".format(kind))
        if not learning_rate > 0:
            raise ConfigError("learning rate must be positive")
        if batch_size < 1 or epochs < 1:
            raise ConfigError("batch size and epochs must be at least 1")
        self.kind = kind
        self.learning_rate = float(learning_rate)
        self.batch_size = int(batch_size)
        self.epochs = int(epochs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon


# ---------- parameter storage ----------
class Weights:
    """
    flat float64 parameter vector with a (name, shape, offset) layout table
    """
    def __init__(self, spec, vector: Optional[numpy.ndarray] = None):
        self.spec = spec
        self.layout = []
        offset = 0
        for name, shape in spec.layout():
            self.layout.append((name, shape, offset))
            offset += int(numpy.prod(shape))
        if vector is None:
            self.vector = numpy.zeros(offset)
        else:
            vector = numpy.array(vector, dtype=float)
            if vector.shape != (offset,):
                raise ShapeError("weight vector has {} values, layout needs {}".format(vector.size, offset))
            self.vector = vector
        self.version = 0

    def n_params(self) -> int:
        return len(self.vector)

    def view(self, name: str, vector: Optional[numpy.ndarray] = None) -> numpy.ndarray:
        """
        the named tensor as a view into the parameter vector (or into a gradient vector of the same layout)
        """
        if vector is None:
            vector = self.vector
        for layer_name, shape, offset in self.layout:
            if layer_name == name:
                return vector[offset:offset + int(numpy.prod(shape))].reshape(shape)
        raise KeyError(name)

    def copy(self) -> "Weights":
        return Weights(self.spec, self.vector.copy())


def glorot_uniform(rng, fan_in: int, fan_out: int) -> numpy.ndarray:
    limit = numpy.sqrt(6 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_weights(spec, seed: int) -> Weights:
    """
    Glorot-uniform dense and input kernels, uniform(-1/sqrt(u), 1/sqrt(u)) recurrent kernels, zero biases
    except a forget-gate bias of 1
    """
    rng = numpy.random.default_rng(seed)
    weights = Weights(spec)
    for name, shape, _ in weights.layout:
        if len(shape) == 1:
            continue
        if name.endswith(".U"):
            limit = 1 / numpy.sqrt(shape[0])
            weights.view(name)[:] = rng.uniform(-limit, limit, size=shape)
        else:
            weights.view(name)[:] = glorot_uniform(rng, shape[0], shape[1])
    if spec.kind == KIND_LSTM:
        for k, units in enumerate(spec.layers):
            weights.view("lstm{}.b".format(k+1))[units:2*units] = 1
    return weights


# ---------- activations ----------
def activate(x: numpy.ndarray, activation: str) -> numpy.ndarray:
    if activation == ACT_RELU:
        return numpy.maximum(x, 0)
    elif activation == ACT_SIGMOID:
        return scipy.special.expit(x)
    return x


def activation_slope(z: numpy.ndarray, y: numpy.ndarray, activation: str) -> numpy.ndarray:
    """
    derivative of the activation, from its input z and output y
    """
    if activation == ACT_RELU:
        return (z > 0).astype(float)
    elif activation == ACT_SIGMOID:
        return y * (1 - y)
    return numpy.ones_like(z)


class ForwardCache:
    def __init__(self, weights: Weights, training: bool):
        self.weights = weights
        self.version = weights.version
        self.training = training
        self.values = {}


def check_cache(weights: Weights, cache: ForwardCache) -> None:
    if (cache.weights is not weights) or (cache.version != weights.version):
        raise StaleCacheError("forward cache does not match the current weights")


# ---------- MLP ----------
def mlp_forward(weights: Weights, batch: numpy.ndarray) -> tuple:
    """
    forward pass of an MLP on a (N, input_dim) batch; returns predictions (N, output_dim) and the cache
    """
    spec = weights.spec
    batch = numpy.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[1] != spec.input_dim:
        raise ShapeError("MLP expects input of shape (N, {}), got {}".format(spec.input_dim, batch.shape))
    cache = ForwardCache(weights, False)
    layers = []
    a = batch
    n_layers = len(spec.hidden) + 1
    for k in range(n_layers):
        activation = spec.output_activation if k == n_layers - 1 else spec.hidden_activation
        z = a @ weights.view("W{}".format(k+1)) + weights.view("b{}".format(k+1))
        y = activate(z, activation)
        layers.append((a, z, y, activation))
        a = y
    cache.values["layers"] = layers
    return a, cache


def mlp_backward(weights: Weights, cache: ForwardCache, loss_grad: numpy.ndarray) -> numpy.ndarray:
    layers = cache.values["layers"]
    grad = numpy.zeros_like(weights.vector)
    delta = numpy.asarray(loss_grad, dtype=float).reshape(layers[-1][2].shape)
    for k in range(len(layers) - 1, -1, -1):
        a, z, y, activation = layers[k]
        delta = delta * activation_slope(z, y, activation)
        weights.view("W{}".format(k+1), grad)[:] = a.T @ delta
        weights.view("b{}".format(k+1), grad)[:] = delta.sum(axis=0)
        delta = delta @ weights.view("W{}".format(k+1)).T
    return grad


# ---------- LSTM ----------
def dropout_masks(spec: LstmSpec, n: int, rng) -> list:
    """
    inverted-scaling dropout masks for the outputs of every layer below the top one
    """
    keep = 1 - spec.dropout
    return [(rng.random((n, spec.steps, units)) < keep) / keep for units in spec.layers[:-1]]


def lstm_forward(weights: Weights, batch: numpy.ndarray, training: bool = False, rng=None,
                 masks: Optional[list] = None) -> tuple:
    """
    forward pass of the stacked LSTM on a (N, steps, channels) batch with zero initial states

    Dropout acts between recurrent layers when training; explicit masks override the random ones so a pass can
    be repeated exactly. Returns predictions (N, 1) and the cache
    """
    spec = weights.spec
    batch = numpy.asarray(batch, dtype=float)
    if batch.ndim != 3 or batch.shape[1:] != (spec.steps, spec.input_channels):
        raise ShapeError("LSTM expects input of shape (N, {}, {}), got {}".format(spec.steps, spec.input_channels,
                                                                                  batch.shape))
    n = batch.shape[0]
    if training and spec.dropout > 0 and masks is None:
        if rng is None:
            raise ConfigError("LSTM training with dropout needs a seeded generator or explicit masks")
        masks = dropout_masks(spec, n, rng)
    if not training:
        masks = None
    cache = ForwardCache(weights, training)
    layers = []
    x_seq = batch
    for k, units in enumerate(spec.layers):
        w = weights.view("lstm{}.W".format(k+1))
        u = weights.view("lstm{}.U".format(k+1))
        b = weights.view("lstm{}.b".format(k+1))
        gates = numpy.zeros((n, spec.steps, 4*units))
        c_seq = numpy.zeros((n, spec.steps, units))
        h_seq = numpy.zeros((n, spec.steps, units))
        h = numpy.zeros((n, units))
        c = numpy.zeros((n, units))
        for t in range(spec.steps):
            z = x_seq[:, t, :] @ w + h @ u + b
            i = scipy.special.expit(z[:, :units])
            f = scipy.special.expit(z[:, units:2*units])
            g = numpy.tanh(z[:, 2*units:3*units])
            o = scipy.special.expit(z[:, 3*units:])
            c = f * c + i * g
            h = o * numpy.tanh(c)
            gates[:, t, :] = numpy.concatenate((i, f, g, o), axis=1)
            c_seq[:, t, :] = c
            h_seq[:, t, :] = h
        layers.append({"x": x_seq, "gates": gates, "c": c_seq, "h": h_seq})
        x_seq = h_seq
        if masks is not None and k < len(spec.layers) - 1:
            x_seq = h_seq * masks[k]
    top = layers[-1]["h"][:, -1, :]
    cache.values["layers"] = layers
    cache.values["masks"] = masks
    cache.values["top"] = top
    if spec.projection > 0:
        zp = top @ weights.view("proj.W") + weights.view("proj.b")
        top_out = numpy.maximum(zp, 0)
        cache.values["proj"] = (zp, top_out)
    else:
        top_out = top
    zh = top_out @ weights.view("head.W") + weights.view("head.b")
    y = scipy.special.expit(zh)
    cache.values["head"] = (top_out, y)
    return y, cache


def lstm_backward(weights: Weights, cache: ForwardCache, loss_grad: numpy.ndarray) -> numpy.ndarray:
    """
    backpropagation through time
    """
    spec = weights.spec
    grad = numpy.zeros_like(weights.vector)
    top_out, y = cache.values["head"]
    delta = numpy.asarray(loss_grad, dtype=float).reshape(y.shape) * y * (1 - y)
    weights.view("head.W", grad)[:] = top_out.T @ delta
    weights.view("head.b", grad)[:] = delta.sum(axis=0)
    d_top = delta @ weights.view("head.W").T
    if spec.projection > 0:
        zp, _ = cache.values["proj"]
        d_proj = d_top * (zp > 0)
        weights.view("proj.W", grad)[:] = cache.values["top"].T @ d_proj
        weights.view("proj.b", grad)[:] = d_proj.sum(axis=0)
        d_top = d_proj @ weights.view("proj.W").T

    layers = cache.values["layers"]
    masks = cache.values["masks"]
    d_h_seq = numpy.zeros_like(layers[-1]["h"])
    d_h_seq[:, -1, :] = d_top
    for k in range(len(spec.layers) - 1, -1, -1):
        units = spec.layers[k]
        w = weights.view("lstm{}.W".format(k+1))
        u = weights.view("lstm{}.U".format(k+1))
        g_w = weights.view("lstm{}.W".format(k+1), grad)
        g_u = weights.view("lstm{}.U".format(k+1), grad)
        g_b = weights.view("lstm{}.b".format(k+1), grad)
        layer = layers[k]
        n = layer["h"].shape[0]
        d_x_seq = numpy.zeros_like(layer["x"])
        d_h_next = numpy.zeros((n, units))
        d_c_next = numpy.zeros((n, units))
        for t in range(spec.steps - 1, -1, -1):
            gates = layer["gates"][:, t, :]
            i = gates[:, :units]
            f = gates[:, units:2*units]
            g = gates[:, 2*units:3*units]
            o = gates[:, 3*units:]
            c = layer["c"][:, t, :]
            c_prev = layer["c"][:, t-1, :] if t > 0 else numpy.zeros((n, units))
            h_prev = layer["h"][:, t-1, :] if t > 0 else numpy.zeros((n, units))
            tanh_c = numpy.tanh(c)
            d_h = d_h_seq[:, t, :] + d_h_next
            d_o = d_h * tanh_c
            d_c = d_h * o * (1 - tanh_c**2) + d_c_next
            d_z = numpy.concatenate((d_c * g * i * (1 - i),
                                     d_c * c_prev * f * (1 - f),
                                     d_c * i * (1 - g**2),
                                     d_o * o * (1 - o)), axis=1)
            d_c_next = d_c * f
            g_w += layer["x"][:, t, :].T @ d_z
            g_u += h_prev.T @ d_z
            g_b += d_z.sum(axis=0)
            d_x_seq[:, t, :] = d_z @ w.T
            d_h_next = d_z @ u.T
        if k > 0:
            d_h_seq = d_x_seq if masks is None else d_x_seq * masks[k-1]
    return grad


# ---------- dispatch ----------
def encode_inputs(spec, features: numpy.ndarray) -> numpy.ndarray:
    """
    arrange (N, steps, channels) windows as the network expects them: flattened for an MLP, as a sequence for
    an LSTM
    """
    features = numpy.asarray(features, dtype=float)
    if features.ndim != 3:
        raise ShapeError("windows must have shape (N, steps, channels), got {}".format(features.shape))
    if spec.kind == KIND_MLP:
        return features.reshape(features.shape[0], -1)
    return features


def forward(weights: Weights, batch: numpy.ndarray, training: bool = False, rng=None,
            masks: Optional[list] = None) -> tuple:
    if weights.spec.kind == KIND_MLP:
        return mlp_forward(weights, batch)
    return lstm_forward(weights, batch, training, rng, masks)


def backward(weights: Weights, cache: ForwardCache, loss_grad: numpy.ndarray) -> numpy.ndarray:
    """
    analytic gradient of a scalar loss with respect to every parameter, given dLoss/dPrediction
    """
    check_cache(weights, cache)
    if weights.spec.kind == KIND_MLP:
        return mlp_backward(weights, cache, loss_grad)
    return lstm_backward(weights, cache, loss_grad)


# ---------- loss and optimizers ----------
def mse_loss(prediction, target) -> tuple:
    """
    mean squared error over the batch and its gradient with respect to the predictions
    """
    prediction = numpy.asarray(prediction, dtype=float)
    target = numpy.asarray(target, dtype=float).reshape(prediction.shape)
    diff = prediction - target
    n = diff.shape[0]
    return float(numpy.mean(diff**2)), (2.0 / n) * diff


class OptimizerState:
    def __init__(self, spec: OptimizerSpec, n_params: int):
        self.spec = spec
        self.step = 0
        self.m = numpy.zeros(n_params)
        self.v = numpy.zeros(n_params)


def optimizer_step(state: OptimizerState, weights: Weights, grads: numpy.ndarray, epoch: Optional[int] = None,
                   batch: Optional[int] = None) -> None:
    """
    update the weights in place (SGD or bias-corrected Adam) and invalidate outstanding forward caches
    """
    if not numpy.all(numpy.isfinite(grads)):
        raise DivergenceError(get_text("divergence detected").format(epoch, batch), epoch, batch)
    spec = state.spec
    if spec.kind == KDFollowConstants.OPT_SGD:
        weights.vector -= spec.learning_rate * grads
    else:
        state.step += 1
        state.m = spec.beta1 * state.m + (1 - spec.beta1) * grads
        state.v = spec.beta2 * state.v + (1 - spec.beta2) * grads**2
        m_hat = state.m / (1 - spec.beta1**state.step)
        v_hat = state.v / (1 - spec.beta2**state.step)
        weights.vector -= spec.learning_rate * m_hat / (numpy.sqrt(v_hat) + spec.epsilon)
    weights.version += 1


# ---------- serialization ----------
LENGTH_FIELD = struct.Struct("<I")


def save_weights(weights: Weights, path: str) -> None:
    """
    DCFN1 layout: magic, descriptor length, JSON descriptor (spec and layout), little-endian float64 parameters
    """
    descriptor = {"spec": weights.spec.descriptor(),
                  "layout": [[name, list(shape), offset] for name, shape, offset in weights.layout]}
    encoded = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as outfile:
        outfile.write(KDFollowConstants.WEIGHTS_MAGIC)
        outfile.write(LENGTH_FIELD.pack(len(encoded)))
        outfile.write(encoded)
        outfile.write(weights.vector.astype("<f8").tobytes())


def load_weights(path: str, spec=None) -> Weights:
    """
    read a DCFN1 weight file; when a spec is given the file must describe the same network
    """
    if not os.path.isfile(path):
        raise DataError(get_text("artifact_missing").format(path))
    with open(path, "rb") as infile:
        data = infile.read()
    magic = KDFollowConstants.WEIGHTS_MAGIC
    if data[:len(magic)] != magic:
        raise DataError("{} is not a weight file".format(path))
    (length,) = LENGTH_FIELD.unpack_from(data, len(magic))
    start = len(magic) + LENGTH_FIELD.size
    descriptor = json.loads(data[start:start + length].decode("utf-8"))
    stored_spec = spec_from_descriptor(descriptor["spec"])
    if spec is not None and spec.descriptor() != stored_spec.descriptor():
        raise ShapeError("{} holds a network incompatible with the requested one".format(path))
    vector = numpy.frombuffer(data, dtype="<f8", offset=start + length).astype(float)
    weights = Weights(stored_spec, vector)
    stored_layout = [(name, tuple(shape), offset) for name, shape, offset in descriptor["layout"]]
    if stored_layout != weights.layout:
        raise ShapeError("{} has a layout table inconsistent with its network".format(path))
    return weights


# ---------- compute ----------
def count_multiply_adds(spec) -> int:
    """
    multiply-adds for one inference: in x out per dense layer, 4u(in + u) per LSTM cell per step
    """
    total = 0
    if spec.kind == KIND_MLP:
        widths = spec.widths()
        for a, b in zip(widths, widths[1:]):
            total += a * b
        return total
    n_in = spec.input_channels
    for units in spec.layers:
        total += spec.steps * 4 * units * (n_in + units)
        n_in = units
    if spec.projection > 0:
        total += n_in * spec.projection
        n_in = spec.projection
    return total + n_in
