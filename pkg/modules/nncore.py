"""
Minimal differentiable layers in double precision
Dense / layer-norm / embedding layers with analytic backward passes, the
losses used by the pipeline, Adam, a finite-difference gradient checker and
a named-tensor checkpoint format.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from modules.artifacts import atomic_write_bytes, read_json, write_json
from modules.errors import NonFiniteGradientError, ShapeError

logger = logging.getLogger(__name__)

EPS = 1e-12
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_K = 0.044715


# ---------------------------------------------------------------- activations

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. logits given the softmax output and dL/dp"""
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + _GELU_K * z**3)))


def _gelu_prime(z: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (z + _GELU_K * z**3))
    du = _GELU_C * (1.0 + 3.0 * _GELU_K * z**2)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * du


def _gelu_second(z: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (z + _GELU_K * z**3))
    du = _GELU_C * (1.0 + 3.0 * _GELU_K * z**2)
    d2u = _GELU_C * 6.0 * _GELU_K * z
    sech2 = 1.0 - t**2
    return sech2 * du + 0.5 * z * sech2 * (d2u - 2.0 * t * du**2)


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda z: z,
    "tanh": np.tanh,
    "relu": lambda z: np.maximum(z, 0.0),
    "sigmoid": _sigmoid,
    "gelu": _gelu,
    "softmax": softmax,
}


def activate(name: str, z: np.ndarray) -> np.ndarray:
    try:
        return ACTIVATIONS[name](z)
    except KeyError:
        raise ValueError(f"unknown activation '{name}'; choose from {sorted(ACTIVATIONS)}") from None


def activation_derivative(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Elementwise f'(z); not defined for softmax (use softmax_backward)"""
    if name == "identity":
        return np.ones_like(z)
    if name == "tanh":
        return 1.0 - a**2
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "gelu":
        return _gelu_prime(z)
    raise ValueError(f"no elementwise derivative for activation '{name}'")


def activation_second_derivative(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name in ("identity", "relu"):
        return np.zeros_like(z)
    if name == "tanh":
        return -2.0 * a * (1.0 - a**2)
    if name == "sigmoid":
        return a * (1.0 - a) * (1.0 - 2.0 * a)
    if name == "gelu":
        return _gelu_second(z)
    raise ValueError(f"no second derivative for activation '{name}'")


def activation_backward(name: str, z: np.ndarray, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    if name == "softmax":
        return softmax_backward(a, da)
    return da * activation_derivative(name, z, a)


# ---------------------------------------------------------------- dense params

@dataclass
class DenseParams:
    """Weights W (out x in) and bias b (out)"""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"bias shape {self.b.shape} does not match W shape {self.W.shape}")
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise ValueError("DenseParams must be finite")

    @property
    def in_dim(self) -> int:
        return int(self.W.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.W.shape[0])


def dense_forward(params: DenseParams, x: np.ndarray, activation: str = "identity") -> np.ndarray:
    """activation(W x + b) applied row-wise"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} does not match layer input dim {params.in_dim}")
    return activate(activation, x @ params.W.T + params.b)


# ---------------------------------------------------------------- modules

class Module:
    """Container of named parameters, their gradients and child modules"""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_child(self, name: str, module: Module) -> Module:
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}{k}": v for k, v in self.params.items()}
        for name, child in self.children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_gradients(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}{k}": v for k, v in self.grads.items()}
        for name, child in self.children.items():
            out.update(child.named_gradients(f"{prefix}{name}."))
        return out

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)
        for child in self.children.values():
            child.zero_grad()

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        own = self.named_parameters()
        missing = set(own) - set(values)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, target in own.items():
            source = np.asarray(values[name], dtype=np.float64)
            if source.shape != target.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {source.shape} != {target.shape}")
            target[...] = source

    def n_parameters(self) -> int:
        return sum(int(p.size) for p in self.named_parameters().values())


def init_weight(rng: np.random.Generator, out_dim: int, in_dim: int, activation: str) -> np.ndarray:
    scale = np.sqrt(2.0 / in_dim) if activation == "relu" else np.sqrt(2.0 / (in_dim + out_dim))
    return rng.normal(0.0, scale, size=(out_dim, in_dim))


class Dense(Module):
    """Fully connected layer over the last axis"""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity",
                 rng: np.random.Generator | None = None):
        super().__init__()
        if in_dim <= 0 or out_dim <= 0:
            raise ShapeError(f"layer dims must be positive, got {in_dim} -> {out_dim}")
        activate(activation, np.zeros(1))
        rng = rng or np.random.default_rng(0)
        self.activation = activation
        self.add_param("W", init_weight(rng, out_dim, in_dim, activation))
        self.add_param("b", np.zeros(out_dim))
        self._cache: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    @property
    def dense_params(self) -> DenseParams:
        return DenseParams(self.params["W"], self.params["b"])

    def forward(self, x: np.ndarray) -> np.ndarray:
        W = self.params["W"]
        if x.shape[-1] != W.shape[1]:
            raise ShapeError(f"input width {x.shape[-1]} does not match layer input dim {W.shape[1]}")
        z = x @ W.T + self.params["b"]
        a = activate(self.activation, z)
        self._cache = (x, z, a)
        return a

    def backward(self, da: np.ndarray) -> np.ndarray:
        assert self._cache is not None, "backward called before forward"
        x, z, a = self._cache
        dz = activation_backward(self.activation, z, a, da)
        flat_dz = dz.reshape(-1, dz.shape[-1])
        flat_x = x.reshape(-1, x.shape[-1])
        self.grads["W"] += flat_dz.T @ flat_x
        self.grads["b"] += flat_dz.sum(axis=0)
        return dz @ self.params["W"]


class LayerNorm(Module):
    """Layer normalisation over the last axis with learned gain and shift"""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.add_param("gamma", np.ones(dim))
        self.add_param("beta", np.zeros(dim))
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        assert self._cache is not None, "backward called before forward"
        xhat, inv = self._cache
        d = xhat.shape[-1]
        self.grads["gamma"] += (dy * xhat).reshape(-1, d).sum(axis=0)
        self.grads["beta"] += dy.reshape(-1, d).sum(axis=0)
        dxhat = dy * self.params["gamma"]
        return inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )


class Embedding(Module):
    """Lookup table of learned vectors"""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.add_param("table", rng.normal(0.0, 0.1, size=(vocab_size, dim)))
        self._ids: np.ndarray | None = None

    def forward(self, ids: np.ndarray) -> np.ndarray:
        self._ids = np.asarray(ids, dtype=np.int64)
        return self.params["table"][self._ids]

    def backward(self, dy: np.ndarray) -> None:
        assert self._ids is not None, "backward called before forward"
        np.add.at(self.grads["table"], self._ids.reshape(-1), dy.reshape(-1, dy.shape[-1]))


class Sequential(Module):
    """Chain of layers applied in order"""

    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.add_child(str(i), layer)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)  # type: ignore[attr-defined]
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)  # type: ignore[attr-defined]
        return dy


def mlp(dims: list[int], hidden_activation: str, output_activation: str,
        rng: np.random.Generator) -> Sequential:
    layers = [
        Dense(d_in, d_out, hidden_activation if i < len(dims) - 2 else output_activation, rng)
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:]))
    ]
    return Sequential(*layers)


# ---------------------------------------------------------------- losses

def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def loss_reconstruction(X: np.ndarray, X_hat: np.ndarray, mode: str = "mse") -> float:
    """Mean squared (mse) or mean absolute (mae) reconstruction error"""
    X, X_hat = np.asarray(X, dtype=np.float64), np.asarray(X_hat, dtype=np.float64)
    _check_same_shape(X, X_hat, "reconstruction loss")
    diff = X - X_hat
    if mode == "mse":
        return float(np.mean(diff**2))
    if mode == "mae":
        return float(np.mean(np.abs(diff)))
    raise ValueError(f"unknown reconstruction mode '{mode}'; use 'mse' or 'mae'")


def reconstruction_grad(X: np.ndarray, X_hat: np.ndarray, mode: str = "mse") -> np.ndarray:
    """dLoss/dX_hat"""
    _check_same_shape(X, X_hat, "reconstruction loss")
    diff = X_hat - X
    if mode == "mse":
        return 2.0 * diff / diff.size
    if mode == "mae":
        return np.sign(diff) / diff.size
    raise ValueError(f"unknown reconstruction mode '{mode}'; use 'mse' or 'mae'")


def _mask_count(mask: np.ndarray | None, shape: tuple[int, ...]) -> tuple[np.ndarray, float]:
    m = np.ones(shape) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != shape:
        raise ShapeError(f"mask shape {m.shape} does not match {shape}")
    return m, float(m.sum())


def loss_cross_entropy(
    p: np.ndarray,
    y_onehot: np.ndarray,
    mask: np.ndarray | None = None,
    normalizer: float | None = None,
) -> float:
    """Cross-entropy averaged over masked positions; unmasked rows add nothing.

    `normalizer` overrides the masked-position count, so several fields with
    different vocabularies can share one average.
    """
    _check_same_shape(p, y_onehot, "cross-entropy")
    m, count = _mask_count(mask, p.shape[:-1])
    denom = count if normalizer is None else normalizer
    if denom == 0:
        logger.warning("Cross-entropy called with an empty mask; returning 0")
        return 0.0
    nll = -(y_onehot * np.log(np.maximum(p, EPS))).sum(axis=-1)
    return float((nll * m).sum() / denom)


def cross_entropy_logit_grad(
    p: np.ndarray,
    y_onehot: np.ndarray,
    mask: np.ndarray | None = None,
    normalizer: float | None = None,
) -> np.ndarray:
    """dLoss/dlogits for softmax followed by loss_cross_entropy"""
    m, count = _mask_count(mask, p.shape[:-1])
    denom = count if normalizer is None else normalizer
    if denom == 0:
        return np.zeros_like(p)
    return (p - y_onehot) * m[..., None] / denom


def loss_kl(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats, averaged over rows when given matrices"""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    q = np.broadcast_to(q, p.shape)
    per_row = (p * (np.log(np.maximum(p, EPS)) - np.log(np.maximum(q, EPS)))).sum(axis=-1)
    return float(np.mean(per_row))


def kl_grad_p(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """dKL(p||q)/dp for the row-averaged KL"""
    q = np.broadcast_to(q, p.shape)
    rows = 1 if p.ndim == 1 else int(np.prod(p.shape[:-1]))
    return (np.log(np.maximum(p, EPS)) - np.log(np.maximum(q, EPS)) + 1.0) / rows


def loss_bce_logits(logits: np.ndarray, y: np.ndarray) -> float:
    """Binary cross-entropy on raw logits, averaged"""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    t = np.asarray(y, dtype=np.float64).reshape(-1)
    _check_same_shape(z, t, "binary cross-entropy")
    return float(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))


def bce_logits_grad(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(y, dtype=np.float64).reshape(z.shape)
    return (_sigmoid(z) - t) / z.size


sigmoid = _sigmoid


# ---------------------------------------------------------------- optimisation

@dataclass
class TrainConfig:
    """Epochs, batch size n, learning rate and seed of a training loop"""

    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs <= 0:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name"""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update, applied to the arrays in place"""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name}: shape {g.shape} != parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name)

    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    """Adam bound to a module's parameters"""

    def __init__(self, module: Module, lr: float = 1e-3):
        self.module = module
        self.state = OptimizerState(lr=lr)
        self._params = module.named_parameters()
        self._grads = module.named_gradients()

    def step(self) -> None:
        adam_step(self._params, self._grads, self.state)

    def zero_grad(self) -> None:
        self.module.zero_grad()


# ---------------------------------------------------------------- gradient check

def grad_check(
    model: Module,
    loss_fn: Callable[[Module, Any], float],
    inputs: Any,
    epsilon: float = 1e-5,
    max_checks: int = 300,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    `loss_fn(model, inputs)` must run the forward pass, call backward so the
    model's gradients hold dLoss/dparam, and return the loss.
    """
    params = model.named_parameters()
    model.zero_grad()
    loss_fn(model, inputs)
    analytic = {k: v.copy() for k, v in model.named_gradients().items()}

    entries = [(name, idx) for name, p in params.items() for idx in np.ndindex(p.shape)]
    if len(entries) > max_checks:
        pick = np.random.default_rng(seed).choice(len(entries), size=max_checks, replace=False)
        entries = [entries[i] for i in sorted(pick)]

    worst = 0.0
    for name, idx in entries:
        p = params[name]
        original = p[idx]
        p[idx] = original + epsilon
        plus = loss_fn(model, inputs)
        p[idx] = original - epsilon
        minus = loss_fn(model, inputs)
        p[idx] = original
        numeric = (plus - minus) / (2.0 * epsilon)
        a = analytic[name][idx]
        err = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6)
        worst = max(worst, err)
    model.zero_grad()
    return worst


# ---------------------------------------------------------------- checkpoints

def config_digest(config: Any) -> str:
    payload = asdict(config) if hasattr(config, "__dataclass_fields__") else config
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def _checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    """<name>.npz and <name>.json beside each other; only a trailing .npz or .json is stripped"""
    path = Path(path)
    name = path.name
    for suffix in (".npz", ".json"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return path.parent / f"{name}.npz", path.parent / f"{name}.json"


def save_checkpoint(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    seed: int,
    config: Any,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Write tensors to <path>.npz and a JSON manifest to <path>.json"""
    npz_path, json_path = _checkpoint_paths(path)
    buffer = io.BytesIO()
    np.savez(buffer, **{name: np.asarray(t) for name, t in tensors.items()})
    atomic_write_bytes(npz_path, buffer.getvalue())
    manifest = {
        "tensors": [{"name": n, "shape": list(np.shape(t))} for n, t in sorted(tensors.items())],
        "seed": seed,
        "config": asdict(config) if hasattr(config, "__dataclass_fields__") else config,
        "config_hash": config_digest(config),
        **(extra or {}),
    }
    write_json(json_path, manifest)
    return npz_path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    npz_path, json_path = _checkpoint_paths(path)
    manifest = read_json(json_path)
    with np.load(npz_path) as archive:
        tensors = {name: archive[name].astype(np.float64) for name in archive.files}
    for entry in manifest["tensors"]:
        if list(tensors[entry["name"]].shape) != entry["shape"]:
            raise ShapeError(f"checkpoint tensor {entry['name']} does not match its manifest shape")
    return tensors, manifest
