"""Small dense networks with hand-written gradients, plus the Adam optimizer
and z-score standardizers that the causal mechanisms train with.

Everything here is plain float64 numpy so that training runs, serialized
parameters and gradient checks are bit-reproducible across platforms.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

__all__ = ["DenseNet", "AdamOptimizer", "Standardizer", "encode_floats", "decode_floats"]


def encode_floats(arr: np.ndarray) -> str:
    """Little-endian float64 bytes as base64 text (model-file encoding)."""
    return base64.b64encode(np.asarray(arr, dtype="<f8").tobytes()).decode("ascii")


def decode_floats(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text.encode("ascii")), dtype="<f8").copy()


class DenseNet:
    """Fully-connected network: tanh on hidden layers, identity on the output,
    plus an optional input-to-output linear skip path.

    ``layer_sizes`` includes input and output widths, e.g. ``[3, 32, 32, 2]``.
    A two-entry list (no hidden layers) degenerates to an exact affine map,
    which is how closed-form linear-Gaussian mechanisms are represented. The
    skip path (zero-initialized) lets near-affine conditionals be represented
    exactly instead of through the tanh trunk's curvature.
    """

    def __init__(self, layer_sizes, seed=0, init_scale=None, skip=False):
        if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
            raise ValueError(f"invalid layer sizes {layer_sizes!r}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            scale = init_scale if init_scale is not None else 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.skip = None
        if skip and len(self.layer_sizes) > 2:
            self.skip = np.zeros((self.layer_sizes[0], self.layer_sizes[-1]))

    @property
    def n_layers(self):
        return len(self.weights)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batched forward pass; ``x`` is (n, in_dim), result (n, out_dim)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = x
        for i in range(self.n_layers):
            h = h @ self.weights[i] + self.biases[i]
            if i < self.n_layers - 1:
                h = np.tanh(h)
        return h if self.skip is None else h + x @ self.skip

    def forward_cached(self, x: np.ndarray):
        """Forward pass retaining per-layer activations for backprop."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = x
        activations = [h]
        for i in range(self.n_layers):
            z = h @ self.weights[i] + self.biases[i]
            h = np.tanh(z) if i < self.n_layers - 1 else z
            activations.append(h)
        if self.skip is not None:
            h = h + x @ self.skip
            activations[-1] = h
        return h, activations

    def backward(self, activations, grad_out: np.ndarray):
        """Gradients of sum(loss) w.r.t. parameters given d(loss)/d(output).

        ``activations`` comes from :meth:`forward_cached`; ``grad_out`` is
        (n, out_dim). Returns (weight_grads, bias_grads, grad_input), with
        the skip-path gradient appended to ``w_grads`` when present.
        """
        w_grads = [None] * self.n_layers
        b_grads = [None] * self.n_layers
        delta = np.asarray(grad_out, dtype=float)  # dL/dz of the current layer
        grad_input = None
        for i in range(self.n_layers - 1, -1, -1):
            w_grads[i] = activations[i].T @ delta
            b_grads[i] = delta.sum(axis=0)
            back = delta @ self.weights[i].T  # dL/d(activations[i])
            if i > 0:
                # activations[i] is tanh(z_{i-1}) for hidden layers
                delta = back * (1.0 - activations[i] ** 2)
            else:
                grad_input = back
        if self.skip is not None:
            grad_out = np.asarray(grad_out, dtype=float)
            w_grads.append(activations[0].T @ grad_out)
            grad_input = grad_input + grad_out @ self.skip.T
        return w_grads, b_grads, grad_input

    # -- flat parameter vector helpers (optimizers, serialization, FD checks) --

    def _param_arrays(self):
        arrays = self.weights + self.biases
        return arrays + [self.skip] if self.skip is not None else arrays

    def get_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._param_arrays()])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        pos = 0
        for i, a in enumerate(self.weights):
            self.weights[i] = flat[pos : pos + a.size].reshape(a.shape).copy()
            pos += a.size
        for i, a in enumerate(self.biases):
            self.biases[i] = flat[pos : pos + a.size].reshape(a.shape).copy()
            pos += a.size
        if self.skip is not None:
            self.skip = flat[pos : pos + self.skip.size].reshape(self.skip.shape).copy()
            pos += self.skip.size
        if pos != flat.size:
            raise ValueError(f"parameter vector size {flat.size}, expected {pos}")

    def flatten_grads(self, w_grads, b_grads) -> np.ndarray:
        grads = list(w_grads)
        skip_grad = [grads.pop()] if self.skip is not None else []
        return np.concatenate([g.ravel() for g in grads + list(b_grads) + skip_grad])

    def assert_finite(self) -> None:
        for a in self._param_arrays():
            if not np.all(np.isfinite(a)):
                raise FloatingPointError("non-finite network parameters")

    def to_dict(self) -> dict:
        return {
            "layer_sizes": self.layer_sizes,
            "skip": self.skip is not None,
            "params": encode_floats(self.get_params()),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        net = cls(d["layer_sizes"], seed=0, skip=d.get("skip", False))
        net.set_params(decode_floats(d["params"]))
        return net


class AdamOptimizer:
    """Adam on a flat parameter vector (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class Standardizer:
    """Column-wise z-scoring with stats frozen at fit time.

    Columns with zero spread (e.g. a constant, or the 0/1 sex covariate in a
    single-sex slice) keep scale 1 so the transform stays invertible.
    """

    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale: np.ndarray = field(default_factory=lambda: np.ones(0))

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean=mean, scale=scale)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(mean=np.zeros(dim), scale=np.ones(dim))

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": encode_floats(self.mean), "scale": encode_floats(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(mean=decode_floats(d["mean"]), scale=decode_floats(d["scale"]))
