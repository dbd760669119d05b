"""Dense MLP with hand-written reverse-mode gradients and exact Hessian-vector products.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Model parameters
travel as one flat vector (a "ParamVector") whose layout is, for each layer in
order from input to output::

    W_l  (fan_in x fan_out, row-major)   then   b_l  (fan_out,)

so ``params[:fan_in * fan_out]`` is the first weight matrix, followed by its
bias, and so on. :func:`unflatten` and :func:`flatten` convert between the two
views and are exact inverses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError

__all__ = [
    "MlpConfig",
    "HvpOperator",
    "MatrixOperator",
    "init_params",
    "flatten",
    "unflatten",
    "forward",
    "hidden_features",
    "loss",
    "loss_and_grad",
    "hvp",
    "head_slice",
]


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    num_classes: int = 10
    activation: str = "relu"
    init_seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValidationError("all layer dimensions must be >= 1")
        if self.activation != "relu":
            raise ValidationError(f"unsupported activation {self.activation!r}")
        if not self.init_scale > 0:
            raise ValidationError("init_scale must be positive")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]

    @property
    def num_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "activation": self.activation,
            "init_seed": self.init_seed,
            "init_scale": self.init_scale,
        }


def init_params(config: MlpConfig) -> np.ndarray:
    """Uniform(-s, s) weights and biases with s = init_scale / sqrt(fan_in)."""
    rng = np.random.default_rng(config.init_seed)
    chunks = []
    sizes = config.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = config.init_scale / np.sqrt(fan_in)
        chunks.append(rng.uniform(-s, s, size=fan_in * fan_out))
        chunks.append(rng.uniform(-s, s, size=fan_out))
    return np.concatenate(chunks)


def _check_params(config: MlpConfig, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != config.num_params:
        raise DimensionError(
            f"expected flat parameter vector of length {config.num_params}, got shape {params.shape}"
        )
    return params


def unflatten(config: MlpConfig, params) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(W, b)`` views (no copy)."""
    params = _check_params(config, params)
    layers = []
    offset = 0
    sizes = config.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers])


def head_slice(config: MlpConfig) -> slice:
    """Slice of the flat vector holding the final linear layer."""
    fan_in = config.layer_sizes[-2]
    n = fan_in * config.num_classes + config.num_classes
    return slice(config.num_params - n, config.num_params)


def _check_inputs(config: MlpConfig, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise DimensionError(f"inputs must have shape (batch, {config.input_dim}), got {x.shape}")
    return x


def _check_labels(config: MlpConfig, labels, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValidationError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= config.num_classes):
        raise ValidationError(f"labels must lie in [0, {config.num_classes})")
    return y


def _forward_cache(layers, x):
    # acts[l] is the input to layer l; pres[l] its pre-activation output.
    acts = [x]
    pres = []
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        pres.append(z)
        if i < len(layers) - 1:
            acts.append(np.maximum(z, 0.0))
    return acts, pres


def forward(config: MlpConfig, params, inputs) -> np.ndarray:
    """Logits of shape ``(batch, num_classes)``."""
    x = _check_inputs(config, inputs)
    _, pres = _forward_cache(unflatten(config, params), x)
    return pres[-1]


def hidden_features(config: MlpConfig, params, inputs) -> np.ndarray:
    """Activations feeding the final linear layer (the inputs when there are no hidden layers)."""
    x = _check_inputs(config, inputs)
    acts, _ = _forward_cache(unflatten(config, params), x)
    return acts[-1]


def _softmax_xent(logits, y):
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(len(y)), y]
    probs = np.exp(shifted - lse[:, None])
    return nll, probs


def loss(config: MlpConfig, params, inputs, labels) -> float:
    """Mean softmax cross-entropy over the batch."""
    logits = forward(config, params, inputs)
    y = _check_labels(config, labels, logits.shape[0])
    nll, _ = _softmax_xent(logits, y)
    return float(nll.mean())


def _backward(layers, acts, pres, delta):
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append((delta.sum(axis=0), acts[i].T @ delta))
        if i > 0:
            delta = (delta @ w.T) * (pres[i - 1] > 0)
    out = []
    for gb, gw in reversed(grads):
        out.append(gw.ravel())
        out.append(gb)
    return np.concatenate(out)


def loss_and_grad(config: MlpConfig, params, inputs, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the flat parameters."""
    x = _check_inputs(config, inputs)
    layers = unflatten(config, params)
    y = _check_labels(config, labels, x.shape[0])
    acts, pres = _forward_cache(layers, x)
    nll, probs = _softmax_xent(pres[-1], y)
    n = x.shape[0]
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return float(nll.mean()), _backward(layers, acts, pres, delta)


class HvpOperator:
    """Hessian of the mean training loss at a fixed parameter point and batch.

    The forward pass is cached at construction, so each product costs one
    tangent forward sweep plus one reverse sweep.
    """

    def __init__(self, config: MlpConfig, params, inputs, labels):
        self.config = config
        self.params = _check_params(config, params).copy()
        self.inputs = _check_inputs(config, inputs)
        self.labels = _check_labels(config, labels, self.inputs.shape[0])
        self._layers = unflatten(config, self.params)
        self._acts, self._pres = _forward_cache(self._layers, self.inputs)
        _, self._probs = _softmax_xent(self._pres[-1], self.labels)

    @property
    def dim(self) -> int:
        return self.config.num_params

    def hvp(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionError(f"vector must have length {self.dim}, got shape {v.shape}")
        layers, acts, pres = self._layers, self._acts, self._pres
        tangents = unflatten(self.config, v)
        n = self.inputs.shape[0]
        last = len(layers) - 1

        # Tangent (R-operator) forward sweep; relu'' vanishes almost everywhere.
        r_acts = [np.zeros_like(acts[0])]
        r_pres = []
        for i, ((w, _), (vw, vb)) in enumerate(zip(layers, tangents)):
            rz = r_acts[i] @ w + acts[i] @ vw + vb
            r_pres.append(rz)
            if i < last:
                r_acts.append(rz * (pres[i] > 0))

        p = self._probs
        rz_out = r_pres[-1]
        r_delta = p * (rz_out - (p * rz_out).sum(axis=1, keepdims=True)) / n
        delta = p.copy()
        delta[np.arange(n), self.labels] -= 1.0
        delta /= n

        out = []
        for i in range(last, -1, -1):
            w, _ = layers[i]
            vw, _ = tangents[i]
            r_gw = r_acts[i].T @ delta + acts[i].T @ r_delta
            out.append((r_gw.ravel(), r_delta.sum(axis=0)))
            if i > 0:
                mask = pres[i - 1] > 0
                r_delta, delta = (r_delta @ w.T + delta @ vw.T) * mask, (delta @ w.T) * mask
        return np.concatenate([np.concatenate(pair) for pair in reversed(out)])

    __call__ = hvp

    def gradient(self) -> np.ndarray:
        return loss_and_grad(self.config, self.params, self.inputs, self.labels)[1]


class MatrixOperator:
    """A dense symmetric matrix exposed through the same ``hvp`` interface.

    Equivalent to the Hessian of the quadratic objective ``0.5 * w @ A @ w``.
    """

    def __init__(self, matrix):
        a = np.asarray(matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"matrix must be square, got shape {a.shape}")
        self.matrix = a

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def hvp(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise DimensionError(f"vector must have length {self.dim}, got shape {v.shape}")
        return self.matrix @ v

    __call__ = hvp

    def loss_and_grad(self, w):
        w = np.asarray(w, dtype=np.float64)
        g = self.matrix @ w
        return 0.5 * float(w @ g), g


def hvp(op, v) -> np.ndarray:
    """Hessian-vector product ``H @ v`` for any operator exposing ``.hvp``."""
    return op.hvp(v)
