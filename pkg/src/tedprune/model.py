"""Small differentiable models over flat parameter vectors.

Every model here is a stack of dense layers whose weights live in one flat
float64 vector. Layer ``l`` stores ``W_l`` (shape ``in x out``, row-major)
followed by ``b_l`` when the model has biases. Gradients are always of the
MEAN loss over a batch, so ``grad_batch`` is the average of the rows that
``per_sample_grads`` returns.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

ARCHITECTURES = ("linear-regression", "logistic-regression", "mlp")
LOSSES = ("squared-error", "cross-entropy")
ACTIVATIONS = ("tanh", "relu")


class ModelError(ValueError):
    """Invalid model specification or mismatched shapes."""


class DivergenceError(FloatingPointError):
    """A loss, output or gradient became non-finite."""

    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    widths: tuple[int, ...]
    loss: str = ""
    activation: str = "tanh"
    bias: bool = True
    # L2 penalty folded into every sample's loss: 0.5 * l2 * ||theta||^2.
    l2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.loss:
            default = "squared-error" if self.architecture == "linear-regression" else "cross-entropy"
            object.__setattr__(self, "loss", default)
        self.validate()

    @classmethod
    def linear(cls, input_dim: int, output_dim: int = 1, **kw) -> "ModelSpec":
        return cls("linear-regression", (input_dim, output_dim), **kw)

    @classmethod
    def logistic(cls, input_dim: int, num_classes: int = 2, **kw) -> "ModelSpec":
        return cls("logistic-regression", (input_dim, num_classes), **kw)

    @classmethod
    def mlp(cls, widths, activation: str = "tanh", **kw) -> "ModelSpec":
        return cls("mlp", tuple(widths), activation=activation, **kw)

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.widths[:-1], self.widths[1:]))

    @property
    def dim(self) -> int:
        return sum(i * o + (o if self.bias else 0) for i, o in self.layer_shapes)

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.architecture!r}")
        if self.loss not in LOSSES:
            raise ModelError(f"unknown loss {self.loss!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ModelError(f"layer widths must be positive, got {self.widths}")
        if self.architecture != "mlp" and len(self.widths) != 2:
            raise ModelError(f"{self.architecture} takes exactly (input_dim, output_dim)")
        if self.loss == "cross-entropy" and self.output_dim < 2:
            raise ModelError("cross-entropy needs output_dim >= 2")
        if self.l2 < 0:
            raise ModelError("l2 must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class OptState:
    """SGD with heavy-ball momentum: ``v <- mu*v + g``, ``theta <- theta - lr*v``."""

    lr: float
    momentum: float = 0.0
    velocity: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ModelError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ModelError("momentum must lie in [0, 1)")


def init_model(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, biases included."""
    spec.validate()
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layer_shapes:
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        if spec.bias:
            chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks).astype(np.float64)


def unpack(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray | None]]:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != spec.dim:
        raise ModelError(f"parameter vector has size {params.size}, spec needs {spec.dim}")
    layers = []
    pos = 0
    for fan_in, fan_out in spec.layer_shapes:
        W = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = None
        if spec.bias:
            b = params[pos:pos + fan_out]
            pos += fan_out
        layers.append((W, b))
    return layers


def _check_inputs(spec: ModelSpec, X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ModelError("empty batch")
    if X.shape[1] != spec.input_dim:
        raise ModelError(f"features have dim {X.shape[1]}, model expects {spec.input_dim}")
    y = np.asarray(y)
    if y.ndim == 0:
        y = y[None]
    if y.shape[0] != X.shape[0]:
        raise ModelError("features and labels disagree on batch size")
    return X, y


def _targets(spec: ModelSpec, y: np.ndarray) -> np.ndarray:
    """Integer labels become one-hot rows; real targets become a column."""
    if spec.loss == "cross-entropy" or (spec.output_dim > 1 and y.ndim == 1):
        labels = y.astype(np.int64)
        if labels.min() < 0 or labels.max() >= spec.output_dim:
            raise ModelError("label outside [0, output_dim)")
        out = np.zeros((labels.size, spec.output_dim))
        out[np.arange(labels.size), labels] = 1.0
        return out
    return y.astype(np.float64).reshape(y.shape[0], -1)


def _act(spec: ModelSpec, z):
    return np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)


def _act_grad(spec: ModelSpec, z, a):
    return 1.0 - a * a if spec.activation == "tanh" else (z > 0).astype(np.float64)


def _forward(spec: ModelSpec, layers, X):
    """Returns (pre-activations, activations); activations[0] is X, the last is the raw output."""
    pres, acts = [], [X]
    a = X
    for i, (W, b) in enumerate(layers):
        z = a @ W
        if b is not None:
            z = z + b
        pres.append(z)
        a = z if i == len(layers) - 1 else _act(spec, z)
        acts.append(a)
    return pres, acts


def _loss_terms(spec: ModelSpec, out: np.ndarray, T: np.ndarray):
    """Per-sample data losses and d(loss_i)/d(out_i)."""
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite model output")
    if spec.loss == "cross-entropy":
        shifted = out - out.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_norm
        losses = -(T * log_p).sum(axis=1)
        dout = np.exp(log_p) - T
    else:
        diff = out - T
        losses = (diff * diff).sum(axis=1)
        dout = 2.0 * diff
    return losses, dout


def _penalty(spec: ModelSpec, params) -> float:
    return 0.5 * spec.l2 * float(params @ params) if spec.l2 else 0.0


def predict(spec: ModelSpec, params, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    _, acts = _forward(spec, unpack(spec, params), X)
    return acts[-1]


def per_sample_losses(spec: ModelSpec, params, X, y) -> np.ndarray:
    X, y = _check_inputs(spec, X, y)
    _, acts = _forward(spec, unpack(spec, params), X)
    losses, _ = _loss_terms(spec, acts[-1], _targets(spec, y))
    return losses + _penalty(spec, params)


def mean_loss(spec: ModelSpec, params, X, y) -> float:
    return float(per_sample_losses(spec, params, X, y).mean())


def accuracy(spec: ModelSpec, params, X, y) -> float:
    out = predict(spec, params, X)
    if spec.output_dim == 1:
        pred = (out[:, 0] > 0.5).astype(np.int64)
    else:
        pred = out.argmax(axis=1)
    return float((pred == np.asarray(y).astype(np.int64)).mean())


def loss_and_grad(spec: ModelSpec, params, X, y, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and the gradient of ``scale`` times their mean, in one pass.

    ``scale`` is backpropagated from the output, so it yields the gradient of
    a rescaled loss without touching the returned (unscaled) losses.
    """
    X, y = _check_inputs(spec, X, y)
    params = np.asarray(params, dtype=np.float64)
    layers = unpack(spec, params)
    pres, acts = _forward(spec, layers, X)
    losses, dz = _loss_terms(spec, acts[-1], _targets(spec, y))
    dz = dz / X.shape[0]
    if scale != 1.0:
        dz = dz * scale
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, b = layers[i]
        gW = acts[i].T @ dz
        grads.append(dz.sum(axis=0) if b is not None else None)
        grads.append(gW.ravel())
        if i > 0:
            dz = (dz @ W.T) * _act_grad(spec, pres[i - 1], acts[i])
    grad = np.concatenate([g for g in reversed(grads) if g is not None])
    if spec.l2:
        grad = grad + (spec.l2 * scale) * params if scale != 1.0 else grad + spec.l2 * params
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient")
    return losses + _penalty(spec, params), grad


def grad_batch(spec: ModelSpec, params, X, y) -> np.ndarray:
    return loss_and_grad(spec, params, X, y)[1]


def per_sample_grads(spec: ModelSpec, params, X, y) -> np.ndarray:
    """One gradient row per sample, shape (batch, P)."""
    X, y = _check_inputs(spec, X, y)
    params = np.asarray(params, dtype=np.float64)
    layers = unpack(spec, params)
    pres, acts = _forward(spec, layers, X)
    _, dz = _loss_terms(spec, acts[-1], _targets(spec, y))
    B = X.shape[0]
    blocks = []
    for i in range(len(layers) - 1, -1, -1):
        W, b = layers[i]
        if b is not None:
            blocks.append(dz)
        blocks.append(np.einsum("bi,bo->bio", acts[i], dz).reshape(B, -1))
        if i > 0:
            dz = (dz @ W.T) * _act_grad(spec, pres[i - 1], acts[i])
    G = np.concatenate(list(reversed(blocks)), axis=1)
    if spec.l2:
        G = G + spec.l2 * params
    if not np.all(np.isfinite(G)):
        raise DivergenceError("non-finite per-sample gradient")
    return G


def grad_per_sample(spec: ModelSpec, params, x, y) -> np.ndarray:
    return per_sample_grads(spec, params, np.atleast_2d(x), np.asarray(y)[None])[0]


def sgd_step(params: np.ndarray, grad: np.ndarray, opt: OptState) -> np.ndarray:
    """Returns the updated parameters; ``opt.velocity`` is advanced in place."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ModelError("parameter and gradient shapes differ")
    if opt.momentum == 0.0:
        return params - opt.lr * grad
    if opt.velocity is None:
        opt.velocity = np.zeros_like(params)
    elif opt.velocity.shape != params.shape:
        raise ModelError("velocity and parameter shapes differ")
    opt.velocity = opt.momentum * opt.velocity + grad
    return params - opt.lr * opt.velocity


def fd_check(spec: ModelSpec, params, X, y, step: float = 1e-5, grad_fn=None) -> float:
    """Max relative error of an analytic batch gradient against central differences.

    ``grad_fn`` defaults to :func:`grad_batch`; passing another function lets a
    caller audit a gradient routine of its own.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.asarray(params, dtype=np.float64)
    grad_fn = grad_fn or grad_batch
    analytic = np.asarray(grad_fn(spec, params, X, y), dtype=np.float64)
    numeric = np.empty_like(params)
    for j in range(params.size):
        plus = params.copy()
        minus = params.copy()
        plus[j] += step
        minus[j] -= step
        numeric[j] = (mean_loss(spec, plus, X, y) - mean_loss(spec, minus, X, y)) / (2 * step)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)))


def save_params(path, params: np.ndarray, spec: ModelSpec) -> None:
    """Text vector file: a header line then one value per line (exact round-trip)."""
    params = np.asarray(params, dtype=np.float64)
    header = f"tedprune-params dim={params.size} spec={spec.fingerprint()}"
    np.savetxt(path, params, fmt="%.17g", header=header)


def load_params(path, spec: ModelSpec | None = None) -> np.ndarray:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline()
    if not header.startswith("# tedprune-params"):
        raise ModelError(f"{path}: not a parameter file")
    fields = dict(tok.split("=", 1) for tok in header[2:].split()[1:])
    values = np.atleast_1d(np.loadtxt(path, dtype=np.float64))
    if values.size != int(fields["dim"]):
        raise ModelError(f"{path}: header says dim={fields['dim']}, found {values.size} values")
    if spec is not None and fields["spec"] != spec.fingerprint():
        raise ModelError(f"{path}: saved for a different model spec")
    return values
