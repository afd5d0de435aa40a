"""Networks built from :mod:`ktpt.layers`: MLP, stacked LSTM and RBM.

Every trainable model exposes the same small surface used by the training
loop: ``forward_logits``, ``backward``, ``parameters``, ``gradients``,
``zero_grad`` and an ``output_layer``.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, ShapeError, UnsupportedVersionError
from .layers import (
    AffineLayer,
    LstmCellParams,
    LstmLayer,
    init_weights,
    sigmoid,
    sigmoid_backward,
)
from .numerics import Pcg32

MAGIC = b"KTPT"
FORMAT_VERSION = 1
KIND_MLP, KIND_LSTM, KIND_RBM = 1, 2, 3


class Mlp:
    """Sigmoid hidden layers followed by an affine output layer."""

    sequential = False
    kind = "mlp"

    def __init__(self, hidden_layers, output_layer):
        self.hidden_layers = list(hidden_layers)
        self.output_layer = output_layer
        dims = [layer.in_dim for layer in self.hidden_layers] + [output_layer.in_dim]
        for layer, nxt in zip(self.hidden_layers, dims[1:]):
            if layer.out_dim != nxt:
                raise ShapeError(f"layer output {layer.out_dim} does not feed next input {nxt}")
        self._acts = None

    @classmethod
    def init(cls, input_dim, hidden_sizes, num_classes, rng: Pcg32):
        """Draw layers bottom-up from ``rng``; the output layer is drawn last."""
        hidden = []
        prev = input_dim
        for size in hidden_sizes:
            hidden.append(AffineLayer.init(prev, size, rng))
            prev = size
        return cls(hidden, AffineLayer.init(prev, num_classes, rng))

    @property
    def input_dim(self):
        return (self.hidden_layers[0] if self.hidden_layers else self.output_layer).in_dim

    @property
    def hidden_sizes(self):
        return [layer.out_dim for layer in self.hidden_layers]

    @property
    def num_classes(self):
        return self.output_layer.out_dim

    @property
    def sizes(self):
        return [self.input_dim, *self.hidden_sizes, self.num_classes]

    def hidden_forward(self, x, cache=False):
        acts = []
        h = np.asarray(x, dtype=np.float64)
        for layer in self.hidden_layers:
            h = sigmoid(layer.forward(h, cache=cache))
            acts.append(h)
        return h, acts

    def forward_logits(self, batch, cache=True):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"batch shape {x.shape} does not match input_dim={self.input_dim}")
        h, acts = self.hidden_forward(x, cache=cache)
        if cache:
            self._acts = acts
        return self.output_layer.forward(h, cache=cache)

    def backward(self, dlogits):
        grad = self.output_layer.backward(dlogits)
        for layer, act in zip(reversed(self.hidden_layers), reversed(self._acts)):
            grad = layer.backward(sigmoid_backward(grad, act))
        return grad

    def layers(self):
        return [*self.hidden_layers, self.output_layer]

    def parameters(self):
        return [p for layer in self.layers() for p in layer.parameters()]

    def gradients(self):
        return [g for layer in self.layers() for g in layer.gradients()]

    def zero_grad(self):
        for layer in self.layers():
            layer.zero_grad()


def pad_sequences(seqs):
    """Stack sequences time-major into ``(L, B, D)`` with trailing zero padding.

    Also returns the flat indices (into ``L*B`` rows) of the valid frames,
    ordered sequence by sequence.
    """
    lengths = [len(s) for s in seqs]
    steps = max(lengths)
    batch = len(seqs)
    dim = np.asarray(seqs[0]).shape[1]
    x = np.zeros((steps, batch, dim))
    for b, s in enumerate(seqs):
        x[: lengths[b], b] = s
    sel = np.concatenate([np.arange(n) * batch + b for b, n in enumerate(lengths)])
    return x, sel


class StackedLstm:
    """One or more LSTM layers with a per-frame affine output layer."""

    sequential = True
    kind = "lstm"

    def __init__(self, lstm_layers, output_layer):
        self.lstm_layers = [
            layer if isinstance(layer, LstmLayer) else LstmLayer.from_params(layer)
            for layer in lstm_layers
        ]
        self.output_layer = output_layer
        for lower, upper in zip(self.lstm_layers, self.lstm_layers[1:]):
            if upper.input_dim != lower.hidden:
                raise ShapeError("stacked LSTM layer dims do not chain")
        if output_layer.in_dim != self.lstm_layers[-1].hidden:
            raise ShapeError("output layer does not match top LSTM hidden size")
        self._cache = None

    @classmethod
    def init(cls, input_dim, hidden, num_layers, num_classes, rng: Pcg32):
        layers = []
        prev = input_dim
        for _ in range(num_layers):
            layers.append(LstmLayer.from_params(LstmCellParams.init(prev, hidden, rng)))
            prev = hidden
        return cls(layers, AffineLayer.init(hidden, num_classes, rng))

    @property
    def input_dim(self):
        return self.lstm_layers[0].input_dim

    @property
    def hidden(self):
        return self.lstm_layers[0].hidden

    @property
    def num_layers(self):
        return len(self.lstm_layers)

    @property
    def num_classes(self):
        return self.output_layer.out_dim

    def forward_logits(self, batch, cache=True):
        """Logits for one sequence (a 2-D array) or a list of sequences.

        Rows come back in frame order, sequence after sequence.
        """
        seqs = [batch] if isinstance(batch, np.ndarray) and batch.ndim == 2 else list(batch)
        for s in seqs:
            if np.ndim(s) != 2 or np.shape(s)[1] != self.input_dim or len(s) == 0:
                raise ShapeError(f"sequence shape {np.shape(s)} does not match input_dim={self.input_dim}")
        x, sel = pad_sequences(seqs)
        h = x
        for layer in self.lstm_layers:
            h = layer.forward(h, cache=cache)
        steps, nb, hd = h.shape
        flat = h.reshape(steps * nb, hd)[sel]
        if cache:
            self._cache = (x.shape, sel)
        return self.output_layer.forward(flat, cache=cache)

    def backward(self, dlogits):
        shape, sel = self._cache
        steps, nb, _ = shape
        dflat = self.output_layer.backward(dlogits)
        dh = np.zeros((steps * nb, self.hidden))
        dh[sel] = dflat
        grad = dh.reshape(steps, nb, self.hidden)
        for layer in reversed(self.lstm_layers):
            grad = layer.backward(grad)
        return grad

    def layers(self):
        return [*self.lstm_layers, self.output_layer]

    def parameters(self):
        return [p for layer in self.layers() for p in layer.parameters()]

    def gradients(self):
        return [g for layer in self.layers() for g in layer.gradients()]

    def zero_grad(self):
        for layer in self.layers():
            layer.zero_grad()


class Rbm:
    """Restricted Boltzmann machine with Bernoulli hidden units.

    ``visible_type`` is ``"gaussian"`` (unit variance, for standardized real
    features) or ``"bernoulli"``.
    """

    kind = "rbm"

    def __init__(self, weights, visible_bias=None, hidden_bias=None, visible_type="bernoulli"):
        if visible_type not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown visible type {visible_type!r}")
        self.weights = np.array(weights, dtype=np.float64, ndmin=2)
        n_hidden, n_visible = self.weights.shape
        self.visible_bias = (np.zeros((1, n_visible)) if visible_bias is None
                             else np.array(visible_bias, dtype=np.float64).reshape(1, -1))
        self.hidden_bias = (np.zeros((1, n_hidden)) if hidden_bias is None
                            else np.array(hidden_bias, dtype=np.float64).reshape(1, -1))
        if self.visible_bias.shape[1] != n_visible or self.hidden_bias.shape[1] != n_hidden:
            raise ShapeError("RBM bias sizes do not match weights")
        self.visible_type = visible_type
        self.history = []

    @classmethod
    def init(cls, n_visible, n_hidden, rng: Pcg32, visible_type="bernoulli"):
        return cls(init_weights(rng, n_hidden, n_visible), visible_type=visible_type)

    @property
    def n_visible(self):
        return self.weights.shape[1]

    @property
    def n_hidden(self):
        return self.weights.shape[0]

    def _check(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.n_visible:
            raise ShapeError(f"batch {v.shape} does not match {self.n_visible} visible units")
        return v

    def hidden_probs(self, v):
        v = self._check(v)
        return sigmoid(v @ self.weights.T + self.hidden_bias)

    def visible_means(self, h):
        pre = h @ self.weights + self.visible_bias
        return pre if self.visible_type == "gaussian" else sigmoid(pre)

    def parameters(self):
        return [self.weights, self.visible_bias, self.hidden_bias]


def rbm_cd1_step(rbm: Rbm, batch, learning_rate: float, rng: Pcg32) -> float:
    """One CD-1 update; returns the batch's mean squared reconstruction error.

    Sampled hidden states drive the reconstruction; the update statistics
    use probabilities on both legs.
    """
    v0 = rbm._check(batch)
    n = v0.shape[0]
    h0 = rbm.hidden_probs(v0)
    h_sample = (rng.uniform(size=h0.shape) < h0).astype(np.float64)
    v1 = rbm.visible_means(h_sample)
    h1 = rbm.hidden_probs(v1)
    err = float(np.mean((v0 - v1) ** 2))
    if learning_rate:
        rbm.weights += learning_rate * (h0.T @ v0 - h1.T @ v1) / n
        rbm.visible_bias += learning_rate * (v0 - v1).sum(axis=0, keepdims=True) / n
        rbm.hidden_bias += learning_rate * (h0 - h1).sum(axis=0, keepdims=True) / n
    return err


def stack_rbms_into_mlp(rbms, num_classes, rng: Pcg32) -> Mlp:
    """Copy trained RBMs into sigmoid hidden layers and add a random output layer."""
    if not rbms:
        raise ValueError("need at least one RBM")
    for lower, upper in zip(rbms, rbms[1:]):
        if lower.n_hidden != upper.n_visible:
            raise ShapeError(f"RBM hidden size {lower.n_hidden} does not match next visible "
                             f"size {upper.n_visible}")
    hidden = [AffineLayer(r.weights.copy(), r.hidden_bias.copy()) for r in rbms]
    return Mlp(hidden, AffineLayer.init(rbms[-1].n_hidden, num_classes, rng))


def forward_logits(model, batch):
    return model.forward_logits(batch, cache=False)


def predict(model, batch):
    """Arg-max class per frame; ties go to the lowest index."""
    return np.argmax(forward_logits(model, batch), axis=1)


def reinit_output_layer(model, rng: Pcg32):
    """Redraw the output weights with the standard init and zero the bias."""
    layer = model.output_layer
    layer.weights[...] = init_weights(rng, layer.out_dim, layer.in_dim)
    layer.bias[...] = 0.0


def snapshot(model):
    return [p.copy() for p in model.parameters()]


def restore(model, snap):
    for p, s in zip(model.parameters(), snap):
        p[...] = s


def clone(model):
    """Independent deep copy of parameters (caches are not copied)."""
    return _from_bytes(_to_bytes(model), "<clone>")


def _pack_header(model):
    if isinstance(model, Mlp):
        sizes = model.sizes
        meta = struct.pack("<I", len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes)
        return KIND_MLP, meta
    if isinstance(model, StackedLstm):
        meta = struct.pack("<4I", model.input_dim, model.num_layers, model.hidden, model.num_classes)
        return KIND_LSTM, meta
    if isinstance(model, Rbm):
        vt = 0 if model.visible_type == "gaussian" else 1
        return KIND_RBM, struct.pack("<3I", model.n_visible, model.n_hidden, vt)
    raise TypeError(f"cannot serialize {type(model).__name__}")


def _to_bytes(model) -> bytes:
    kind, meta = _pack_header(model)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, kind), meta]
    for p in model.parameters():
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated while reading {what}", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def floats(self, shape, what):
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64).reshape(shape)


def _from_bytes(data: bytes, source: str):
    r = _Reader(data, source)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{source}: bad magic, not a model file", offset=0)
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{source}: unsupported model format version {version} (expected {FORMAT_VERSION})",
            offset=4)
    kind_pos = r.pos
    kind = r.u32("model kind")
    if kind == KIND_MLP:
        n = r.u32("layer count")
        if n < 2:
            raise FormatError(f"{source}: MLP needs at least 2 sizes, got {n}", offset=r.pos - 4)
        sizes = [r.u32("layer size") for _ in range(n)]
        if min(sizes) == 0:
            raise FormatError(f"{source}: zero layer size in MLP metadata", offset=r.pos)
        layers = []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            w = r.floats((fan_out, fan_in), "weights")
            b = r.floats((1, fan_out), "bias")
            layers.append(AffineLayer(w, b))
        model = Mlp(layers[:-1], layers[-1])
    elif kind == KIND_LSTM:
        d, nl, hd, k = (r.u32(w) for w in ("input dim", "layer count", "hidden size", "classes"))
        if 0 in (d, nl, hd, k):
            raise FormatError(f"{source}: zero dimension in LSTM metadata", offset=r.pos)
        layers = []
        prev = d
        for _ in range(nl):
            w = r.floats((4 * hd, prev), "input weights")
            u = r.floats((4 * hd, hd), "recurrent weights")
            b = r.floats((1, 4 * hd), "bias")
            layers.append(LstmLayer(w, u, b))
            prev = hd
        out = AffineLayer(r.floats((k, hd), "output weights"), r.floats((1, k), "output bias"))
        model = StackedLstm(layers, out)
    elif kind == KIND_RBM:
        v, hd, vt = r.u32("visible"), r.u32("hidden"), r.u32("visible type")
        if vt not in (0, 1):
            raise FormatError(f"{source}: bad RBM visible type {vt}", offset=r.pos - 4)
        w = r.floats((hd, v), "weights")
        vb = r.floats((1, v), "visible bias")
        hb = r.floats((1, hd), "hidden bias")
        model = Rbm(w, vb, hb, "gaussian" if vt == 0 else "bernoulli")
    else:
        raise FormatError(f"{source}: unknown model kind {kind}", offset=kind_pos)
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes", offset=r.pos)
    return model


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(_to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return _from_bytes(data, str(path))
