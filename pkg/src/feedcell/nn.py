"""Small numpy MLP with hand-written backprop, SGD/Adam and checkpoints."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def relu(x):
    return np.maximum(x, 0.0)


class Mlp:
    """Fully connected net, ReLU on hidden layers, identity output.

    Inputs are batch-major: x has shape (n, widths[0]).
    """

    def __init__(self, widths, rng: np.random.Generator | None = None):
        if len(widths) < 2:
            raise ValueError("need at least input and output width")
        self.widths = tuple(int(w) for w in widths)
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_layers(self):
        return len(self.params) // 2

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self.widths[0]}")
        return x

    def forward(self, x):
        h = self._check(x)
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.n_layers - 1:
                h = relu(h)
        return h

    __call__ = forward

    def forward_cache(self, x):
        h = self._check(x)
        acts = [h]
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < self.n_layers - 1:
                h = relu(h)
            acts.append(h)
        return h, acts

    def backward(self, cache, dy):
        """Parameter gradients (summed over the batch) for upstream gradient dy."""
        acts = cache
        dy = np.asarray(dy, dtype=float).reshape(acts[-1].shape)
        grads = [None] * len(self.params)
        g = dy
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (acts[i + 1] > 0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.params[2 * i].T
        return grads

    def input_gradient(self, cache, dy):
        acts = cache
        g = np.asarray(dy, dtype=float).reshape(acts[-1].shape)
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * (acts[i + 1] > 0)
            g = g @ self.params[2 * i].T
        return g

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError("flat parameter vector has wrong size")
        k = 0
        for p in self.params:
            p[...] = flat[k:k + p.size].reshape(p.shape)
            k += p.size

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.widths = self.widths
        other.params = [p.copy() for p in self.params]
        return other

    def load_from(self, other: "Mlp"):
        for p, q in zip(self.params, other.params):
            p[...] = q

    def is_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params)


def _check_grads(params, grads):
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameters")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")


def sgd_step(net: Mlp, grads, lr: float):
    _check_grads(net.params, grads)
    for p, g in zip(net.params, grads):
        p -= lr * g
    return net


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr=None):
        _check_grads(self.params, grads)
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(net: Mlp, grads, lr: float, state: Adam | None = None) -> Adam:
    """One Adam update; pass the returned state back in to keep the moments."""
    if state is None or state.params is not net.params:
        state = Adam(net.params, lr=lr)
    state.step(grads, lr=lr)
    return state


def softmax(v, temperature=1.0):
    v = np.asarray(v, dtype=float) / temperature
    e = np.exp(v - np.max(v, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(v, mask, temperature=1.0):
    """Softmax over entries where mask is True; masked entries get exactly 0."""
    v = np.asarray(v, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("masked_softmax needs at least one unmasked entry")
    z = np.where(mask, v / temperature, -np.inf)
    e = np.where(mask, np.exp(z - z[mask].max()), 0.0)
    return e / e.sum()


# checkpoint: one JSON header line, then the flat float64 (little-endian) parameters

def save_checkpoint(path, net: Mlp, meta: dict | None = None):
    header = {"widths": list(net.widths), "shapes": [list(p.shape) for p in net.params],
              "dtype": "<f8", "meta": meta or {}}
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(net.get_flat().astype("<f8").tobytes())
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        flat = np.frombuffer(fh.read(), dtype=header["dtype"])
    net = Mlp(header["widths"])
    if [list(p.shape) for p in net.params] != header["shapes"]:
        raise ValueError("checkpoint shapes do not match its widths")
    net.set_flat(flat.astype(float))
    return net, header["meta"]
