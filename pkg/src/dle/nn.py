"""Small dense-network engine: forward/backward passes, Adam, checkpoints.

Everything is float64. Inputs may be a single vector ``(n_in,)`` or a batch
``(batch, n_in)``; outputs keep the same rank.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

_ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a, g):
    # g is dL/da; returns dL/dz
    if name == "relu":
        return g * (z > 0.0)
    if name == "tanh":
        return g * (1.0 - a * a)
    return g


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class DenseNet:
    """Fully connected network ``y = act_k(... act_1(x W_1 + b_1) ... W_k + b_k)``.

    Args:
        layer_sizes: widths including input and output, e.g. ``[4, 8, 2]``.
        activations: one name per weight layer. Defaults to relu on hidden
            layers and identity on the output.
        rng: generator used for initialisation. Zero parameters if ``None``.
    """

    def __init__(self, layer_sizes, activations=None, rng: np.random.Generator | None = None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"layer_sizes must hold >= 2 positive ints, got {layer_sizes!r}")
        n_layers = len(sizes) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["identity"]
        activations = list(activations)
        if len(activations) != n_layers:
            raise ValueError(f"expected {n_layers} activations, got {len(activations)}")
        for name in activations:
            if name not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        self.layer_sizes = sizes
        self.activations = activations
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if rng is None:
                self.weights.append(np.zeros((fan_in, fan_out)))
            else:
                self.weights.append(glorot_uniform(rng, fan_in, fan_out))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in ``[W0, b0, W1, b1, ...]`` order (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    def copy(self) -> "DenseNet":
        net = DenseNet(self.layer_sizes, self.activations)
        net.load_params(self.params())
        return net

    def load_params(self, params) -> None:
        """Copy values from ``params`` into this net's arrays in place."""
        mine = self.params()
        if len(params) != len(mine):
            raise ValueError(f"expected {len(mine)} parameter arrays, got {len(params)}")
        for dst, src in zip(mine, params):
            src = np.asarray(src, dtype=np.float64)
            if dst.shape != src.shape:
                raise ValueError(f"parameter shape {src.shape} does not match {dst.shape}")
            dst[...] = src

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.n_in:
            raise ValueError(
                f"layer 0 expects input width {self.n_in}, got array of shape {x.shape}"
            )
        return x

    def __call__(self, x) -> np.ndarray:
        """Plain forward pass, no context kept."""
        a = self._check_input(x)
        for w, b, name in zip(self.weights, self.biases, self.activations):
            a = _act(name, a @ w + b)
        return a

    def forward(self, x):
        """Forward pass that also returns the context needed by :meth:`backward`."""
        a = self._check_input(x)
        ctx = [a]
        for w, b, name in zip(self.weights, self.biases, self.activations):
            z = a @ w + b
            a = _act(name, z)
            ctx.append((z, a))
        return a, ctx

    def backward(self, ctx, output_grad):
        """Reverse pass.

        Args:
            ctx: context returned by :meth:`forward` for the same input.
            output_grad: dL/dy with the shape of the forward output.

        Returns:
            ``(grads, input_grad)`` where ``grads`` is aligned with
            :meth:`params`. For batched inputs the parameter gradients are
            summed over the batch.
        """
        if ctx is None:
            raise RuntimeError("backward called without a forward context")
        x = ctx[0]
        g = np.asarray(output_grad, dtype=np.float64)
        out_shape = ctx[-1][1].shape
        if g.shape != out_shape:
            raise ValueError(
                f"layer {len(self.weights) - 1} output grad shape {g.shape} != {out_shape}"
            )
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            z, a = ctx[i + 1]
            gz = _act_grad(self.activations[i], z, a, g)
            a_prev = x if i == 0 else ctx[i][1]
            if gz.ndim == 1:
                grads[2 * i] = np.outer(a_prev, gz)
                grads[2 * i + 1] = gz.copy()
            else:
                grads[2 * i] = a_prev.T @ gz
                grads[2 * i + 1] = gz.sum(axis=0)
            g = gz @ self.weights[i].T
        return grads, g

    def to_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "activations": list(self.activations),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenseNet":
        version = data.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {version!r}")
        net = cls(data["layer_sizes"], data["activations"])
        params = []
        for w, b in zip(data["weights"], data["biases"]):
            params.extend((np.array(w, dtype=np.float64).reshape(-1, len(b)), np.array(b)))
        net.load_params(params)
        return net


def save_net(net: DenseNet, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict()))


def load_net(path) -> DenseNet:
    return DenseNet.from_dict(json.loads(Path(path).read_text()))


def arrays_to_json(arrays: dict) -> dict:
    """Serialise named arrays; float repr in json round-trips exactly."""
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arrays": {
            k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in arrays.items()
        },
    }


def arrays_from_json(data: dict) -> dict:
    if data.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {data.get('format_version')!r}")
    return {
        k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
        for k, v in data["arrays"].items()
    }


class Adam:
    """Adam over a fixed list of arrays, updated in place.

    A step whose gradients contain NaN/inf is skipped (``step`` returns False)
    and logged; the step counter only advances on applied updates.
    """

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0
        self.skipped = 0

    def step(self, grads) -> bool:
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.shape:
                raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            logger.warning("non-finite gradient, optimizer step %d skipped", self.t + 1)
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def state_arrays(self, prefix="opt") -> dict:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m{i}"] = m
            out[f"{prefix}.v{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict, prefix="opt") -> None:
        self.t = int(arrays[f"{prefix}.t"][0])
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"{prefix}.m{i}"]
            self.v[i][...] = arrays[f"{prefix}.v{i}"]
