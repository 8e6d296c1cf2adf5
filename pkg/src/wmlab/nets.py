"""Fully-connected networks, watermark feature extraction, weight files.

Three roles share one MLP body: the target classifier (relu hiddens, logit
output), the message extractor (sigmoid output, values strictly inside
(0,1)), and the detector/critic (sigmoid in log-loss mode, linear in critic
mode). Feature keys select the cover data: either one layer's flattened
weight matrix, or the activations of a layer on a fixed trigger batch.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _init_layers(dims, rng):
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return layers


class Mlp:
    """Plain fully-connected stack; subclasses fix the output nonlinearity."""

    def __init__(self, dims, layers):
        dims = [int(d) for d in dims]
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if len(layers) != len(dims) - 1:
            raise ValueError(f"{len(layers)} layers for dims {dims}")
        for (w, b), fi, fo in zip(layers, dims[:-1], dims[1:]):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ValueError(f"layer shape {w.shape} does not match dims {dims}")
        self.dims = dims
        self.weights = [Tensor(w, requires_grad=True) for w, _ in layers]
        self.biases = [Tensor(b, requires_grad=True) for _, b in layers]

    @classmethod
    def init(cls, dims, rng):
        return cls(dims, _init_layers(dims, rng))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def layer_arrays(self):
        return [(w.data, b.data) for w, b in zip(self.weights, self.biases)]

    def clone(self):
        return type(self)(self.dims, [(w.copy(), b.copy()) for w, b in self.layer_arrays()])

    def _forward_linear(self, x: Tensor, train_params: bool) -> Tensor:
        """Relu hidden layers, linear last layer."""
        h = x
        for i in range(self.n_layers):
            w, b = self.weights[i], self.biases[i]
            if not train_params:
                w, b = Tensor(w.data), Tensor(b.data)
            h = T.add_bias(T.matmul(h, w), b)
            if i < self.n_layers - 1:
                h = T.relu(h)
        return h

    def _forward_linear_np(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.n_layers):
            h = h @ self.weights[i].data + self.biases[i].data
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h

    def hidden_activations_np(self, x: np.ndarray, layer_index: int) -> np.ndarray:
        """Output of the indexed layer (post-relu for hiddens, logits for last)."""
        if not 0 <= layer_index < self.n_layers:
            raise IndexError(f"layer index {layer_index} out of range "
                             f"for {self.n_layers} layers")
        h = np.asarray(x, dtype=np.float64)
        for i in range(layer_index + 1):
            h = h @ self.weights[i].data + self.biases[i].data
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h


class MlpClassifier(Mlp):
    """Target model; carries the cover weights the watermark lives in."""

    def classify(self, batch: Tensor, train_params: bool = True) -> Tensor:
        return self._forward_linear(batch, train_params)

    def logits_np(self, x: np.ndarray) -> np.ndarray:
        return self._forward_linear_np(x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits_np(x).argmax(axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float((self.predict(x) == y).mean())


class ExtractorNet(Mlp):
    """Message extractor; sigmoid output keeps soft messages in (0,1)."""

    def forward(self, q: Tensor, train_params: bool = True) -> Tensor:
        return T.sigmoid(self._forward_linear(q, train_params))

    def extract_np(self, q: np.ndarray) -> np.ndarray:
        from . import kernels
        from .tensor import EPS_PROB
        soft = kernels.sigmoid(self._forward_linear_np(q.reshape(1, -1)))[0]
        # saturated logits would otherwise hit exactly 0 or 1 in float64
        return np.clip(soft, EPS_PROB, 1.0 - EPS_PROB)


class DetectorNet(Mlp):
    """Watermark detector; classifier head by default, linear in critic mode."""

    def forward(self, x: Tensor, critic: bool = False, train_params: bool = True) -> Tensor:
        out = self._forward_linear(x, train_params)
        return out if critic else T.sigmoid(out)

    def score_np(self, x: np.ndarray, critic: bool = False) -> np.ndarray:
        out = self._forward_linear_np(x)
        if critic:
            return out
        from . import kernels
        return kernels.sigmoid(out)


# ---------------------------------------------------------------------------
# feature extraction keys
# ---------------------------------------------------------------------------

@dataclass
class WeightLayerKey:
    """Select the flattened weight matrix of one layer (biases excluded)."""

    layer_index: int

    def feature_length(self, dims) -> int:
        return dims[self.layer_index] * dims[self.layer_index + 1]


@dataclass
class ActivationKey:
    """Select the activations of one layer on a fixed trigger batch."""

    layer_index: int
    trigger_inputs: np.ndarray

    def __post_init__(self):
        self.trigger_inputs = np.array(self.trigger_inputs, dtype=np.float64)
        self.trigger_inputs.setflags(write=False)

    def feature_length(self, dims) -> int:
        return self.trigger_inputs.shape[0] * dims[self.layer_index + 1]


FeatureKey = WeightLayerKey | ActivationKey


def _check_layer(model: Mlp, layer_index: int) -> None:
    if not 0 <= layer_index < model.n_layers:
        raise IndexError(f"layer index {layer_index} out of range "
                         f"for {model.n_layers} layers")


def extract_features(model: Mlp, key: FeatureKey) -> np.ndarray:
    """The cover feature vector q, as a detached 1-D array."""
    _check_layer(model, key.layer_index)
    if isinstance(key, WeightLayerKey):
        return model.weights[key.layer_index].data.reshape(-1).copy()
    acts = model.hidden_activations_np(key.trigger_inputs, key.layer_index)
    return acts.reshape(-1)


def extract_features_t(model: Mlp, key: FeatureKey) -> Tensor:
    """q as a (1, len) tensor wired into the model's weights for training."""
    _check_layer(model, key.layer_index)
    if isinstance(key, WeightLayerKey):
        w = model.weights[key.layer_index]
        return T.reshape(w, (1, w.data.size))
    h = Tensor(key.trigger_inputs)
    for i in range(key.layer_index + 1):
        h = T.add_bias(T.matmul(h, model.weights[i]), model.biases[i])
        if i < model.n_layers - 1:
            h = T.relu(h)
    return T.reshape(h, (1, h.data.size))


def sorted_features(q: np.ndarray) -> np.ndarray:
    """Values of q in descending order; invariant to hidden-neuron permutation."""
    q = np.asarray(q)
    if q.size == 0:
        raise ValueError("empty feature vector")
    return np.sort(q.reshape(-1))[::-1].copy()


def arch_hash(dims) -> str:
    return hashlib.sha256("-".join(str(d) for d in dims).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# weight file format (shared with the zoo builder and key files)
# ---------------------------------------------------------------------------
# header: u32 layer count, u32 dims (count+1 of them), u64 seed,
# then per layer the weight matrix row-major and the bias, little-endian f64.

def pack_weights(dims, layers, seed: int) -> bytes:
    parts = [struct.pack("<I", len(layers))]
    parts.append(struct.pack(f"<{len(dims)}I", *dims))
    parts.append(struct.pack("<Q", seed))
    for w, b in layers:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def unpack_weights(blob: bytes):
    off = 0
    (n_layers,) = struct.unpack_from("<I", blob, off)
    off += 4
    dims = list(struct.unpack_from(f"<{n_layers + 1}I", blob, off))
    off += 4 * (n_layers + 1)
    (seed,) = struct.unpack_from("<Q", blob, off)
    off += 8
    layers = []
    for fi, fo in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=fi * fo, offset=off).reshape(fi, fo)
        off += 8 * fi * fo
        b = np.frombuffer(blob, dtype="<f8", count=fo, offset=off)
        off += 8 * fo
        layers.append((w.copy(), b.copy()))
    if off != len(blob):
        raise ValueError(f"weight blob has {len(blob) - off} trailing bytes")
    return dims, seed, layers


def save_weights(path, net: Mlp, seed: int = 0) -> None:
    with open(path, "wb") as f:
        f.write(pack_weights(net.dims, net.layer_arrays(), seed))


def load_weights(path, cls=Mlp):
    with open(path, "rb") as f:
        dims, seed, layers = unpack_weights(f.read())
    return cls(dims, layers), seed
