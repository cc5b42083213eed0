"""Small dense networks with hand-rolled reverse-mode gradients.

Parameters are plain lists of numpy (weights, bias) pairs, forward passes
record a tape of layer inputs and pre-activations, and ``backward`` walks the
tape to produce exact gradients summed over the batch. This is deliberately
not a general autodiff: it covers exactly the few-thousand-parameter heads
this project trains, deterministically and in float64.

A single learner owns and mutates one parameter record; evaluators work on
snapshots made with :func:`clone`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

__all__ = [
    "Mlp",
    "Tape",
    "Adam",
    "target_sync",
    "clone",
    "flatten",
    "set_flat",
    "n_params",
    "save_arrays",
    "load_arrays",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

_ACTIVATIONS = ("tanh", "relu", "identity")


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Tape:
    """Cached activations from one forward pass, consumed by ``backward``."""

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    squeezed: bool


@dataclass
class Mlp:
    """Feed-forward net: linear layers with an elementwise nonlinearity after
    each hidden layer and a linear output layer.

    ``weights[k]`` has shape (n_in_k, n_out_k); consecutive layers compose.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activations: tuple[str, ...]

    @classmethod
    def create(
        cls,
        layer_sizes: tuple[int, ...],
        hidden_activation: str,
        rng: np.random.Generator,
    ) -> "Mlp":
        """Fan-in scaled random weights, zero biases."""
        if len(layer_sizes) < 2:
            raise ValueError("need at least an input and an output size")
        if hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {hidden_activation!r}")
        weights = []
        biases = []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)))
            biases.append(np.zeros(n_out, dtype=np.float64))
        n_hidden = len(layer_sizes) - 2
        return cls(weights, biases, (hidden_activation,) * n_hidden)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        """Evaluate the net on a single vector or a (B, in_dim) batch.

        Returns the output and a tape sufficient for ``backward``.
        """
        x = np.asarray(x, dtype=np.float64)
        squeezed = x.ndim == 1
        if squeezed:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input width {x.shape[1]} != expected {self.in_dim}")
        inputs = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if k == last else _act(self.hidden_activations[k], z)
            if k != last:
                inputs.append(h)
        out = h[0] if squeezed else h
        return out, Tape(inputs, pre, squeezed)

    def backward(
        self, tape: Tape, output_grad: np.ndarray
    ) -> list[tuple[np.ndarray, np.ndarray]]:
        """Exact gradients of ``sum_over_batch(loss)`` given d loss / d output.

        ``output_grad`` has the same shape as the forward output; gradients
        are summed over the batch dimension.
        """
        g = np.asarray(output_grad, dtype=np.float64)
        if tape.squeezed:
            g = g[None, :]
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.weights)  # type: ignore[list-item]
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k != last:
                a = _act(self.hidden_activations[k], tape.pre[k])
                g = g * _act_grad(self.hidden_activations[k], tape.pre[k], a)
            gw = tape.inputs[k].T @ g
            gb = g.sum(axis=0)
            grads[k] = (gw, gb)
            if k > 0:
                g = g @ self.weights[k].T
        return grads


@dataclass
class Adam:
    """Bias-corrected adaptive moment optimizer acting in place on an Mlp."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    v: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def step(self, net: Mlp, grads: list[tuple[np.ndarray, np.ndarray]]) -> None:
        if not self.m:
            self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
            self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, (gw, gb) in enumerate(grads):
            for which, grad in ((0, gw), (1, gb)):
                m = self.m[k][which]
                v = self.v[k][which]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                target = net.weights[k] if which == 0 else net.biases[k]
                target -= update


def add_grads(
    a: list[tuple[np.ndarray, np.ndarray]], b: list[tuple[np.ndarray, np.ndarray]]
) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(aw + bw, ab + bb) for (aw, ab), (bw, bb) in zip(a, b)]


def scale_grads(
    grads: list[tuple[np.ndarray, np.ndarray]], c: float
) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(c * gw, c * gb) for gw, gb in grads]


def target_sync(online: Mlp, target: Mlp, tau: float) -> None:
    """Soft update: target <- tau * online + (1 - tau) * target, in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    for wo, wt in zip(online.weights, target.weights):
        wt *= 1.0 - tau
        wt += tau * wo
    for bo, bt in zip(online.biases, target.biases):
        bt *= 1.0 - tau
        bt += tau * bo


def clone(net: Mlp) -> Mlp:
    return Mlp(
        [w.copy() for w in net.weights],
        [b.copy() for b in net.biases],
        net.hidden_activations,
    )


def n_params(net: Mlp) -> int:
    return sum(w.size + b.size for w, b in zip(net.weights, net.biases))


def flatten(net: Mlp) -> np.ndarray:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def set_flat(net: Mlp, vec: np.ndarray) -> None:
    i = 0
    for w, b in zip(net.weights, net.biases):
        w[...] = vec[i : i + w.size].reshape(w.shape)
        i += w.size
        b[...] = vec[i : i + b.size].reshape(b.shape)
        i += b.size
    if i != vec.size:
        raise ValueError("flat vector length does not match parameter count")


# --- checkpoint serialization -------------------------------------------------
#
# Flat versioned binary record: magic string, version, shape table, then the
# raw float64 little-endian payloads in table order.

CHECKPOINT_MAGIC = b"CDMPOCK1"
CHECKPOINT_VERSION = 1


def save_arrays(path: str, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)

    def take(fmt: str) -> int:
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        (value,) = struct.unpack_from(fmt, data, off)
        off += size
        return value

    version = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    count = take("<I")
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        name_len = take("<H")
        if off + name_len > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        ndim = take("<B")
        shape = tuple(take("<I") for _ in range(ndim))
        shapes.append((name, shape))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        if off + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(data[off : off + nbytes], dtype="<f8").reshape(shape)
        arrays[name] = arr.astype(np.float64)
        off += nbytes
    return arrays
