"""Differentiable pieces with hand-derived gradients.

Losses take logits shaped (N, K) (or a single row of length K) and return the
mean loss over rows together with the gradient of that mean with respect to
the logits.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError, StateError
from .numerics import Pcg32


def check_temperature(t) -> float:
    t = float(t)
    if not t > 0 or not np.isfinite(t):
        raise ValueError(f"temperature must be a positive finite number, got {t}")
    return t


def _rows(z):
    z = np.asarray(z, dtype=np.float64)
    return (z.reshape(1, -1), True) if z.ndim == 1 else (z, False)


def log_softmax_t(z, t=1.0):
    z, _ = _rows(z)
    t = check_temperature(t)
    if not np.all(np.isfinite(z)):
        raise NumericError("logits contain non-finite values")
    s = z / t
    s = s - s.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_t(z, t=1.0):
    """Temperature softmax ``exp(z_i/T) / sum_j exp(z_j/T)`` per row."""
    zz, single = _rows(z)
    t = check_temperature(t)
    if not np.all(np.isfinite(zz)):
        raise NumericError("logits contain non-finite values")
    s = zz / t
    e = np.exp(s - s.max(axis=1, keepdims=True))
    q = e / e.sum(axis=1, keepdims=True)
    return q[0] if single else q


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def check_distribution(p, atol=1e-9):
    p, _ = _rows(p)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("target distribution has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > atol):
        raise ValueError("target rows must sum to 1")
    return p


def ce_soft(target, z, t=1.0, *, validate=True):
    """Cross-entropy of ``softmax_t(z, t)`` against soft targets.

    Returns ``(mean loss, grad)`` with per-row gradient ``(q - p) / T``
    scaled by ``1/N`` for the mean.
    """
    zz, single = _rows(z)
    p = check_distribution(target) if validate else _rows(target)[0]
    if p.shape != zz.shape:
        raise ShapeError(f"target shape {p.shape} does not match logits {zz.shape}")
    t = check_temperature(t)
    logq = log_softmax_t(zz, t)
    n = zz.shape[0]
    # 0 * log(q) is taken as 0 even if q underflows
    loss = -np.sum(np.where(p > 0, p * logq, 0.0)) / n
    grad = (np.exp(logq) - p) / (t * n)
    return float(loss), (grad[0] if single else grad)


def ce_hard(labels, z):
    """Cross-entropy against integer class labels at T=1."""
    zz, single = _rows(z)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = zz.shape
    if labels.size != n:
        raise ShapeError(f"{labels.size} labels for {n} logit rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logq = log_softmax_t(zz, 1.0)
    idx = np.arange(n)
    loss = -logq[idx, labels].sum() / n
    grad = np.exp(logq)
    grad[idx, labels] -= 1.0
    grad /= n
    return float(loss), (grad[0] if single else grad)


def logit_match(teacher_z, student_z):
    """Half squared error between student and teacher logits, mean over rows."""
    tz, _ = _rows(teacher_z)
    sz, single = _rows(student_z)
    if tz.shape != sz.shape:
        raise ShapeError(f"teacher logits {tz.shape} vs student logits {sz.shape}")
    diff = sz - tz
    n = sz.shape[0]
    loss = 0.5 * float(np.sum(diff * diff)) / n
    grad = diff / n
    return loss, (grad[0] if single else grad)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sigmoid_backward(upstream, y):
    """Gradient through a sigmoid given its output ``y``."""
    return upstream * y * (1.0 - y)


def tanh(x):
    return np.tanh(x)


def tanh_backward(upstream, y):
    return upstream * (1.0 - y * y)


def init_weights(rng: Pcg32, fan_out: int, fan_in: int) -> np.ndarray:
    """Gaussian weights with stddev 1/sqrt(fan_in), drawn row-major."""
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))


class AffineLayer:
    """``y = x W^T + b`` with ``W`` shaped (out, in)."""

    def __init__(self, weights, bias=None):
        self.weights = np.array(weights, dtype=np.float64, ndmin=2)
        out_dim = self.weights.shape[0]
        if bias is None:
            bias = np.zeros((1, out_dim))
        self.bias = np.array(bias, dtype=np.float64).reshape(1, -1)
        if self.bias.shape[1] != out_dim:
            raise ShapeError(f"bias {self.bias.shape} does not match weights {self.weights.shape}")
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: Pcg32) -> "AffineLayer":
        return cls(init_weights(rng, out_dim, in_dim))

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def forward(self, x, cache=True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"input {x.shape} does not fit layer with in_dim={self.in_dim}")
        if cache:
            self._x = x
        return x @ self.weights.T + self.bias

    def backward(self, upstream):
        if self._x is None:
            raise StateError("backward called before forward")
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (self._x.shape[0], self.out_dim):
            raise ShapeError(f"upstream gradient {upstream.shape} does not match output "
                             f"({self._x.shape[0]}, {self.out_dim})")
        self.grad_weights += upstream.T @ self._x
        self.grad_bias += upstream.sum(axis=0, keepdims=True)
        return upstream @ self.weights

    def parameters(self):
        return [self.weights, self.bias]

    def gradients(self):
        return [self.grad_weights, self.grad_bias]

    def zero_grad(self):
        self.grad_weights[...] = 0.0
        self.grad_bias[...] = 0.0


def affine_forward(layer: AffineLayer, x):
    return layer.forward(x)


def affine_backward(layer: AffineLayer, upstream):
    return layer.backward(upstream)


class LstmCellParams:
    """Weights of one LSTM layer; gate blocks ordered input, forget, candidate, output."""

    def __init__(self, input_weights, recurrent_weights, bias):
        self.input_weights = np.array(input_weights, dtype=np.float64)
        self.recurrent_weights = np.array(recurrent_weights, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64).reshape(1, -1)
        h4, _ = self.input_weights.shape
        if h4 % 4 or self.recurrent_weights.shape != (h4, h4 // 4) or self.bias.shape != (1, h4):
            raise ShapeError(
                f"inconsistent LSTM shapes: W {self.input_weights.shape}, "
                f"U {self.recurrent_weights.shape}, b {self.bias.shape}")

    @classmethod
    def zeros(cls, input_dim: int, hidden: int):
        return cls(np.zeros((4 * hidden, input_dim)), np.zeros((4 * hidden, hidden)),
                   np.zeros((1, 4 * hidden)))

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: Pcg32):
        w = init_weights(rng, 4 * hidden, input_dim)
        u = init_weights(rng, 4 * hidden, hidden)
        b = np.zeros((1, 4 * hidden))
        b[0, hidden:2 * hidden] = 1.0
        return cls(w, u, b)

    @property
    def input_dim(self):
        return self.input_weights.shape[1]

    @property
    def hidden(self):
        return self.recurrent_weights.shape[1]


def _gate_activations(pre, hidden):
    """Activated gates as one (B, 4H) array laid out like ``pre``."""
    act = sigmoid(pre)
    act[:, 2 * hidden:3 * hidden] = np.tanh(pre[:, 2 * hidden:3 * hidden])
    return act


def lstm_cell_step(params: LstmCellParams, x_t, h_prev, c_prev):
    """One step of the standard LSTM cell; returns ``(h_t, c_t)``.

    Rows of ``x_t``/``h_prev``/``c_prev`` are independent sequences.
    """
    x_t, _ = _rows(x_t)
    h_prev, _ = _rows(h_prev)
    c_prev, _ = _rows(c_prev)
    pre = x_t @ params.input_weights.T + h_prev @ params.recurrent_weights.T + params.bias
    hd = params.hidden
    act = _gate_activations(pre, hd)
    i, f, g, o = act[:, :hd], act[:, hd:2 * hd], act[:, 2 * hd:3 * hd], act[:, 3 * hd:]
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


class LstmLayer(LstmCellParams):
    """An LSTM layer run over padded, time-major batches ``(L, B, D)``.

    Hidden and cell state start at zero for every sequence. Padding must sit
    at the end of each sequence; since padded positions never receive an
    upstream gradient they contribute nothing to the parameter gradients.
    """

    def __init__(self, input_weights, recurrent_weights, bias):
        super().__init__(input_weights, recurrent_weights, bias)
        self.grad_input_weights = np.zeros_like(self.input_weights)
        self.grad_recurrent_weights = np.zeros_like(self.recurrent_weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    @classmethod
    def from_params(cls, p: LstmCellParams):
        return cls(p.input_weights, p.recurrent_weights, p.bias)

    def forward(self, x, cache=True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise ShapeError(f"LSTM input {x.shape} does not match input_dim={self.input_dim}")
        steps, batch, _ = x.shape
        hd = self.hidden
        xw = (x.reshape(steps * batch, -1) @ self.input_weights.T + self.bias).reshape(steps, batch, 4 * hd)
        u_t = self.recurrent_weights.T
        hs = np.zeros((steps + 1, batch, hd))
        cs = np.zeros((steps + 1, batch, hd))
        if cache:
            gates = np.empty((steps, batch, 4 * hd))
            tanh_c = np.empty((steps, batch, hd))
        for t in range(steps):
            pre = xw[t] + hs[t] @ u_t
            act = _gate_activations(pre, hd)
            c = act[:, hd:2 * hd] * cs[t] + act[:, :hd] * act[:, 2 * hd:3 * hd]
            tc = np.tanh(c)
            cs[t + 1] = c
            hs[t + 1] = act[:, 3 * hd:] * tc
            if cache:
                gates[t] = act
                tanh_c[t] = tc
        if cache:
            self._cache = (x, hs, cs, gates, tanh_c)
        return hs[1:]

    def backward(self, upstream):
        """Backpropagation through time; returns the gradient w.r.t. the inputs."""
        if self._cache is None:
            raise StateError("LSTM backward called without a cached forward pass")
        x, hs, cs, gates, tanh_c = self._cache
        steps, batch, _ = x.shape
        hd = self.hidden
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (steps, batch, hd):
            raise ShapeError(f"upstream {upstream.shape} does not match ({steps}, {batch}, {hd})")
        dpre = np.empty((steps, batch, 4 * hd))
        dh_next = np.zeros((batch, hd))
        dc_next = np.zeros((batch, hd))
        u = self.recurrent_weights
        for t in range(steps - 1, -1, -1):
            i = gates[t, :, :hd]
            f = gates[t, :, hd:2 * hd]
            g = gates[t, :, 2 * hd:3 * hd]
            o = gates[t, :, 3 * hd:]
            tc = tanh_c[t]
            dh = upstream[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dpre[t, :, :hd] = dc * g * i * (1.0 - i)
            dpre[t, :, hd:2 * hd] = dc * cs[t] * f * (1.0 - f)
            dpre[t, :, 2 * hd:3 * hd] = dc * i * (1.0 - g * g)
            dpre[t, :, 3 * hd:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dpre[t] @ u
        flat = dpre.reshape(steps * batch, 4 * hd)
        self.grad_input_weights += flat.T @ x.reshape(steps * batch, -1)
        self.grad_recurrent_weights += flat.T @ hs[:-1].reshape(steps * batch, hd)
        self.grad_bias += flat.sum(axis=0, keepdims=True)
        return (flat @ self.input_weights).reshape(steps, batch, -1)

    def parameters(self):
        return [self.input_weights, self.recurrent_weights, self.bias]

    def gradients(self):
        return [self.grad_input_weights, self.grad_recurrent_weights, self.grad_bias]

    def zero_grad(self):
        for g in self.gradients():
            g[...] = 0.0
