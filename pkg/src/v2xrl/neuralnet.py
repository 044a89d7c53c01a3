"""Dense feed-forward networks with hand-written backprop and optimizers.

Everything is plain numpy on 64-bit floats. A ParamSet owns the weights and
biases of one network plus its head activation, and supports the parameter
algebra (clone / axpy / flatten) needed by target blending and meta-learning.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

DESK_HIDDEN = (64, 32, 16)
PAPER_HIDDEN = (500, 250, 120)

_MAGIC = b"V2XP"
_FORMAT_VERSION = 1


class Head(enum.Enum):
    """Output-layer activation of a network."""

    LINEAR = 0
    SIGMOID_SCALED = 1


@dataclass(frozen=True)
class ActivationSpec:
    """Hidden layers are always ReLU; the head varies by network role."""

    head: Head
    scale: float = 1.0  # output range (0, scale) for SIGMOID_SCALED


class ParamSet:
    """Weights and biases of a dense network, ordered input to output.

    Layer l maps activations via ``x @ W_l + b_l`` with ``W_l`` of shape
    (fan_in, fan_out).
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray],
                 act: ActivationSpec):
        if len(weights) != len(biases):
            raise ValueError("weights/biases length mismatch")
        for l in range(len(weights) - 1):
            if weights[l].shape[1] != weights[l + 1].shape[0]:
                raise ValueError("inconsistent layer shapes")
        for w, b in zip(weights, biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape mismatch")
        self.weights = weights
        self.biases = biases
        self.act = act

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def clone(self) -> "ParamSet":
        return ParamSet([w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.act)

    def zeros_like(self) -> "ParamSet":
        return ParamSet([np.zeros_like(w) for w in self.weights],
                        [np.zeros_like(b) for b in self.biases], self.act)

    def axpy(self, a: float, other: "ParamSet") -> None:
        """In-place ``self += a * other``."""
        for w, b, ow, ob in zip(self.weights, self.biases,
                                other.weights, other.biases):
            w += a * ow
            b += a * ob

    def to_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def from_flat(self, flat: np.ndarray) -> None:
        if flat.size != self.num_params:
            raise ValueError("flat vector size mismatch")
        i = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = flat[i:i + w.size].reshape(w.shape)
            i += w.size
            b[...] = flat[i:i + b.size]
            i += b.size

    # -- serialization: little-endian f64 payload behind a shape header --

    def to_bytes(self) -> bytes:
        sizes = self.layer_sizes
        header = struct.pack("<4sHBdH", _MAGIC, _FORMAT_VERSION,
                             self.act.head.value, self.act.scale, len(sizes))
        header += struct.pack(f"<{len(sizes)}I", *sizes)
        return header + self.to_flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        magic, version, head, scale, n = struct.unpack_from("<4sHBdH", blob)
        if magic != _MAGIC:
            raise ValueError("not a ParamSet blob")
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported ParamSet format version {version}")
        off = struct.calcsize("<4sHBdH")
        sizes = struct.unpack_from(f"<{n}I", blob, off)
        off += struct.calcsize(f"<{n}I")
        act = ActivationSpec(Head(head), scale)
        p = init_params(sizes, act, seed=0)
        flat = np.frombuffer(blob, dtype="<f8", offset=off).copy()
        p.from_flat(flat)
        return p

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamSet":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def init_params(layer_sizes, act: ActivationSpec, seed) -> ParamSet:
    """Glorot-uniform weights, zero biases, deterministic per seed.

    ``seed`` is anything numpy's default_rng accepts (int or SeedSequence).
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ParamSet(weights, biases, act)


def forward(p: ParamSet, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Evaluate the network; returns (output, cache for backward).

    ``x`` is a single vector (d,) or a batch (B, d); the output matches.
    """
    squeeze = x.ndim == 1
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if a.shape[1] != p.weights[0].shape[0]:
        raise ValueError(
            f"input dim {a.shape[1]} != network input {p.weights[0].shape[0]}")
    cache = []
    n = len(p.weights)
    for l, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = a @ w + b
        cache.append((a, z))
        if l < n - 1:
            a = np.maximum(z, 0.0)
        elif p.act.head is Head.SIGMOID_SCALED:
            a = p.act.scale / (1.0 + np.exp(-z))
        else:
            a = z
    out = a[0] if squeeze else a
    return out, cache


def backward(p: ParamSet, cache: list, output_grad: np.ndarray
             ) -> tuple[ParamSet, np.ndarray]:
    """Reverse-mode gradients for the forward pass that produced ``cache``.

    ``output_grad`` holds dL/d(output); per-sample contributions are summed
    over the batch. Returns (parameter gradients, dL/d(input)).
    """
    dy = np.atleast_2d(np.asarray(output_grad, dtype=float))
    squeeze = np.asarray(output_grad).ndim == 1
    n = len(p.weights)
    grads_w = [None] * n
    grads_b = [None] * n
    _, z_last = cache[-1]
    if p.act.head is Head.SIGMOID_SCALED:
        s = 1.0 / (1.0 + np.exp(-z_last))
        dz = dy * p.act.scale * s * (1.0 - s)
    else:
        dz = dy
    for l in range(n - 1, -1, -1):
        a_in, _ = cache[l]
        grads_w[l] = a_in.T @ dz
        grads_b[l] = dz.sum(axis=0)
        da = dz @ p.weights[l].T
        if l > 0:
            _, z_prev = cache[l - 1]
            dz = da * (z_prev > 0.0)
    input_grad = da[0] if squeeze else da
    return ParamSet(grads_w, grads_b, p.act), input_grad


class AdamState:
    """Adaptive-moment accumulators shaped like one ParamSet."""

    def __init__(self, p: ParamSet, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.m = p.zeros_like()
        self.v = p.zeros_like()
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(p: ParamSet, grad: ParamSet, st: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied in place."""
    st.t += 1
    c1 = 1.0 - st.beta1 ** st.t
    c2 = 1.0 - st.beta2 ** st.t
    for w, g, m, v in zip(p.weights + p.biases, grad.weights + grad.biases,
                          st.m.weights + st.m.biases, st.v.weights + st.v.biases):
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


def sgd_step(p: ParamSet, grad: ParamSet, lr: float, sign: float = 1.0) -> None:
    """Plain gradient step ``p <- p - sign*lr*grad`` (inner-loop updates)."""
    p.axpy(-sign * lr, grad)


def blend(target: ParamSet, main: ParamSet, tau: float) -> None:
    """Soft target update ``target <- tau*main + (1-tau)*target``."""
    for tw, mw in zip(target.weights + target.biases,
                      main.weights + main.biases):
        tw *= 1.0 - tau
        tw += tau * mw
