"""Multilayer perceptrons, parameter serialization, and an Adam optimizer."""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad

_ACTIVATIONS = ("relu", "tanh", "identity")

_NP_ACT = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "identity": lambda z: z,
}

_AD_ACT = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "identity": lambda z: z,
}


class Mlp:
    """A fully connected network with per-layer activation tags.

    Parameters live as a flat list [W0, b0, W1, b1, ...] of float64 arrays.
    A "relu" output activation guarantees componentwise nonnegative outputs
    (used for the Lyapunov-style value network).
    """

    def __init__(self, weights, biases, hidden_activation="relu",
                 output_activation="identity", input_scale=None):
        if hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {hidden_activation!r}")
        if output_activation not in ("relu", "identity"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for k in range(len(self.weights) - 1):
            if self.weights[k].shape[1] != self.weights[k + 1].shape[0]:
                raise ValueError(
                    f"layer {k} output width {self.weights[k].shape[1]} does not "
                    f"feed layer {k + 1} input width {self.weights[k + 1].shape[0]}"
                )
        for w, b in zip(self.weights, self.biases):
            if w.shape[1] != b.shape[0]:
                raise ValueError("bias width does not match layer width")
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        if input_scale is None:
            self.input_scale = None
        else:
            scale = np.asarray(input_scale, dtype=np.float64)
            if scale.shape != (self.weights[0].shape[0],):
                raise ValueError("input_scale length does not match in_dim")
            if not np.all(np.isfinite(scale)) or np.any(scale <= 0.0):
                raise ValueError("input_scale entries must be positive finite")
            self.input_scale = scale

    @classmethod
    def create(cls, in_dim, hidden, out_dim, rng, hidden_activation="relu",
               output_activation="identity", input_scale=None):
        sizes = [in_dim, *hidden, out_dim]
        weights, biases = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / a)
            weights.append(rng.normal(0.0, scale, size=(a, b)))
            biases.append(np.zeros(b))
        return cls(weights, biases, hidden_activation, output_activation,
                   input_scale=input_scale)

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_params(self, params):
        if len(params) != 2 * len(self.weights):
            raise ValueError("parameter count mismatch")
        for k in range(len(self.weights)):
            w, b = params[2 * k], params[2 * k + 1]
            if w.shape != self.weights[k].shape or b.shape != self.biases[k].shape:
                raise ValueError("parameter shape mismatch")
            self.weights[k] = np.asarray(w, dtype=np.float64)
            self.biases[k] = np.asarray(b, dtype=np.float64)

    def __call__(self, x):
        """Plain numpy forward pass; batched if x is 2-D."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]} != {self.in_dim}")
        h = x if self.input_scale is None else x / self.input_scale
        n = len(self.weights)
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            act = self.output_activation if k == n - 1 else self.hidden_activation
            h = _NP_ACT[act](h)
        return h[0] if single else h

    def apply(self, x, params=None):
        """Autodiff forward pass; ``params`` may be graph nodes for training."""
        params = self.params if params is None else params
        h = ad.as_node(x)
        if h.value.ndim != 2 or h.value.shape[1] != self.in_dim:
            raise ValueError("apply expects a (batch, in_dim) array")
        if self.input_scale is not None:
            h = h * (1.0 / self.input_scale)[None, :]
        n = len(self.weights)
        for k in range(n):
            h = ad.matmul(h, params[2 * k]) + params[2 * k + 1]
            act = self.output_activation if k == n - 1 else self.hidden_activation
            h = _AD_ACT[act](h)
        return h

    def copy(self):
        return Mlp([w.copy() for w in self.weights],
                   [b.copy() for b in self.biases],
                   self.hidden_activation, self.output_activation,
                   input_scale=None if self.input_scale is None
                   else self.input_scale.copy())


def flatten_params(params):
    """Concatenate parameter arrays into one flat vector plus a shape header."""
    shapes = [list(p.shape) for p in params]
    flat = (np.concatenate([np.ravel(p) for p in params])
            if params else np.zeros(0))
    return shapes, flat


def unflatten_params(shapes, flat):
    out, ofs = [], 0
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        out.append(np.asarray(flat[ofs:ofs + n]).reshape(shape))
        ofs += n
    if ofs != len(flat):
        raise ValueError("flat vector length does not match shape header")
    return out


def save_mlp(path, net: Mlp):
    shapes, flat = flatten_params(net.params)
    header = json.dumps({
        "shapes": shapes,
        "hidden_activation": net.hidden_activation,
        "output_activation": net.output_activation,
        "input_scale": None if net.input_scale is None
        else list(net.input_scale),
    })
    np.savez(path, header=np.frombuffer(header.encode(), dtype=np.uint8),
             flat=flat)


def load_mlp(path) -> Mlp:
    data = np.load(path)
    header = json.loads(bytes(data["header"]).decode())
    params = unflatten_params(header["shapes"], data["flat"])
    weights = params[0::2]
    biases = params[1::2]
    return Mlp(weights, biases, header["hidden_activation"],
               header["output_activation"],
               input_scale=header.get("input_scale"))


class Adam:
    """Standard Adam on a list of parameter arrays."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def polyak_update(online, target, tau):
    """targ <- (1 - tau) * targ + tau * online, elementwise."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    if len(online) != len(target):
        raise ValueError("parameter list length mismatch")
    out = []
    for o, t in zip(online, target):
        if o.shape != t.shape:
            raise ValueError("parameter shape mismatch")
        out.append((1.0 - tau) * t + tau * o)
    return out
