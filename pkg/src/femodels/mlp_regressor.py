"""Feed-forward multi-output regressor with manual backpropagation and Adam.

Hidden layers compute ``a(BN(x W + b))`` followed by dropout; the output
layer is affine. Inputs are standardised with statistics stored on the
network.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "tanh":
        return np.tanh(z)
    raise ConfigError(f"unknown activation {name!r}")


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "sigmoid":
        return a * (1.0 - a)
    return 1.0 - a * a


@dataclass
class DnnParams:
    layer_sizes: list = field(default_factory=lambda: [64])
    activation: str = "relu"
    batch_norm: bool = False
    dropout: float = 0.0
    batch_size: int = 256
    learning_rate: float = 1e-3
    lambda_l1: float = 0.0
    lambda_l2: float = 0.0
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    LAYER_CHOICES = ([32], [64], [128], [32, 32], [64, 64], [128, 128], [64, 128], [128, 64], [64, 128, 64])

    def validate(self) -> "DnnParams":
        if self.activation not in ("relu", "sigmoid", "tanh"):
            raise ConfigError(f"dnn.activation={self.activation!r} not in relu/sigmoid/tanh")
        if not self.layer_sizes or any(int(s) < 1 for s in self.layer_sizes):
            raise ConfigError("dnn.layer_sizes must be a non-empty list of positive widths")
        if not 0.0 <= self.dropout <= 0.9:
            raise ConfigError(f"dnn.dropout={self.dropout!r} outside [0, 0.9]")
        if self.batch_size < 1:
            raise ConfigError("dnn.batch_size must be positive")
        if not 0.0 <= self.learning_rate <= 1.0:
            raise ConfigError(f"dnn.learning_rate={self.learning_rate!r} outside [0, 1]")
        for name in ("lambda_l1", "lambda_l2"):
            v = getattr(self, name)
            if v != 0 and not 1e-8 <= v <= 1.0:
                raise ConfigError(f"dnn.{name}={v!r} outside [1e-8, 1]")
        if not 1 <= self.max_epochs <= 200:
            raise ConfigError(f"dnn.max_epochs={self.max_epochs!r} outside [1, 200]")
        if self.patience < 0:
            raise ConfigError("dnn.patience must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "DnnParams":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"dnn: unknown keys {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


class MlpRegressor:
    """Multi-layer perceptron ``R^Q -> R^n_outputs``.

    Weights use uniform fan-in initialisation ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
    """

    def __init__(self, n_inputs, layer_sizes, n_outputs, activation="relu",
                 batch_norm=False, dropout=0.0, seed=0):
        self.n_inputs = int(n_inputs)
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.n_outputs = int(n_outputs)
        self.activation = activation
        self.batch_norm = bool(batch_norm)
        self.dropout = float(dropout)
        self.input_mean = np.zeros(self.n_inputs)
        self.input_scale = np.ones(self.n_inputs)
        rng = np.random.default_rng(seed)
        self.layers = []
        sizes = [self.n_inputs, *self.layer_sizes, self.n_outputs]
        for k in range(len(sizes) - 1):
            bound = 1.0 / np.sqrt(max(sizes[k], 1))
            layer = {
                "W": rng.uniform(-bound, bound, size=(sizes[k], sizes[k + 1])),
                "b": rng.uniform(-bound, bound, size=sizes[k + 1]),
            }
            if self.batch_norm and k < len(sizes) - 2:
                layer["gamma"] = np.ones(sizes[k + 1])
                layer["beta"] = np.zeros(sizes[k + 1])
                layer["running_mean"] = np.zeros(sizes[k + 1])
                layer["running_var"] = np.ones(sizes[k + 1])
            self.layers.append(layer)
        self._cache = None

    TRAINABLE = ("W", "b", "gamma", "beta")

    def fit_scaler(self, X) -> None:
        X = np.asarray(X, dtype=np.float64)
        self.input_mean = X.mean(axis=0) if X.shape[0] else np.zeros(self.n_inputs)
        sd = X.std(axis=0) if X.shape[0] else np.ones(self.n_inputs)
        self.input_scale = np.where(sd > 0, sd, 1.0)

    def parameters(self):
        """``(layer, name, array)`` for every trainable array, in a fixed order."""
        return [(k, n, layer[n]) for k, layer in enumerate(self.layers)
                for n in self.TRAINABLE if n in layer]

    def forward(self, X, train=False, rng=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise ShapeError(f"expected input of width {self.n_inputs}, got shape {X.shape}")
        h = (X - self.input_mean) / self.input_scale
        cache = []
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            z = h @ layer["W"] + layer["b"]
            entry = {"x": h}
            if k == last:
                cache.append(entry)
                h = z
                break
            if "gamma" in layer:
                if train and z.shape[0] > 1:
                    mu = z.mean(axis=0)
                    var = z.var(axis=0)
                    layer["running_mean"] = (1 - BN_MOMENTUM) * layer["running_mean"] + BN_MOMENTUM * mu
                    n = z.shape[0]
                    layer["running_var"] = (1 - BN_MOMENTUM) * layer["running_var"] + BN_MOMENTUM * var * n / (n - 1)
                else:
                    mu, var = layer["running_mean"], layer["running_var"]
                inv = 1.0 / np.sqrt(var + BN_EPS)
                zhat = (z - mu) * inv
                entry.update(zhat=zhat, inv=inv, batch_stats=train and z.shape[0] > 1)
                z = layer["gamma"] * zhat + layer["beta"]
            a = _act(self.activation, z)
            entry.update(z=z, a=a)
            if train and self.dropout > 0:
                if rng is None:
                    raise ConfigError("dropout in training mode needs an rng")
                keep = (rng.random(a.shape) >= self.dropout) / (1.0 - self.dropout)
                entry["mask"] = keep
                a = a * keep
            cache.append(entry)
            h = a
        self._cache = cache
        return h

    def backward(self, d_out):
        """Gradients of ``sum(d_out * forward(X))`` for the last forward call.

        Returns a list aligned with :meth:`parameters`.
        """
        if self._cache is None:
            raise ShapeError("backward called before forward")
        d = np.asarray(d_out, dtype=np.float64)
        grads = {}
        for k in range(len(self.layers) - 1, -1, -1):
            layer, entry = self.layers[k], self._cache[k]
            if k < len(self.layers) - 1:
                if "mask" in entry:
                    d = d * entry["mask"]
                d = d * _act_grad(self.activation, entry["z"], entry["a"])
                if "gamma" in layer:
                    zhat = entry["zhat"]
                    grads[(k, "gamma")] = (d * zhat).sum(axis=0)
                    grads[(k, "beta")] = d.sum(axis=0)
                    dzhat = d * layer["gamma"]
                    if entry["batch_stats"]:
                        n = d.shape[0]
                        d = entry["inv"] / n * (
                            n * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0)
                        )
                    else:
                        d = dzhat * entry["inv"]
            grads[(k, "W")] = entry["x"].T @ d
            grads[(k, "b")] = d.sum(axis=0)
            if k > 0:
                d = d @ layer["W"].T
        return [grads[(k, n)] for k, n, _ in self.parameters()]

    def penalty(self, l1, l2) -> float:
        ws = [layer["W"] for layer in self.layers]
        return float(l1 * sum(np.abs(w).sum() for w in ws) + l2 * sum((w * w).sum() for w in ws))

    def get_state(self):
        return copy.deepcopy((self.layers, self.input_mean, self.input_scale))

    def set_state(self, state):
        self.layers, self.input_mean, self.input_scale = copy.deepcopy(state)

    def to_dict(self) -> dict:
        return {
            "n_inputs": self.n_inputs,
            "layer_sizes": self.layer_sizes,
            "n_outputs": self.n_outputs,
            "activation": self.activation,
            "batch_norm": self.batch_norm,
            "dropout": self.dropout,
            "input_mean": self.input_mean.tolist(),
            "input_scale": self.input_scale.tolist(),
            "layers": [{k: v.tolist() for k, v in layer.items()} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpRegressor":
        net = cls(d["n_inputs"], d["layer_sizes"], d["n_outputs"], d["activation"],
                  d["batch_norm"], d["dropout"])
        net.input_mean = np.asarray(d["input_mean"], dtype=np.float64)
        net.input_scale = np.asarray(d["input_scale"], dtype=np.float64)
        net.layers = [{k: np.asarray(v, dtype=np.float64) for k, v in layer.items()}
                      for layer in d["layers"]]
        return net


class OptimState:
    """Adam moments for every trainable array of a network."""

    def __init__(self, net: MlpRegressor, learning_rate=1e-3, lambda_l1=0.0, lambda_l2=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = float(learning_rate)
        self.lambda_l1 = float(lambda_l1)
        self.lambda_l2 = float(lambda_l2)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m = [np.zeros_like(p) for _, _, p in net.parameters()]
        self.v = [np.zeros_like(p) for _, _, p in net.parameters()]


def backward_and_step(net: MlpRegressor, state: OptimState, d_out, batch_index=None) -> None:
    """Backpropagate ``d_out`` (dLoss/dOutput) and apply one Adam update in place."""
    d_out = np.asarray(d_out, dtype=np.float64)
    if net._cache is None or d_out.shape != (net._cache[0]["x"].shape[0], net.n_outputs):
        raise ShapeError(f"gradient shape {d_out.shape} does not match the last forward output")
    grads = net.backward(d_out)
    params = net.parameters()
    for (k, name, _), gr in zip(params, grads):
        if not np.all(np.isfinite(gr)):
            raise NumericError(f"non-finite gradient in layer {k} ({name}) at batch {batch_index}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * np.sqrt(1 - b2 ** state.step) / (1 - b1 ** state.step)
    for i, ((k, name, p), gr) in enumerate(zip(params, grads)):
        if name == "W":
            if state.lambda_l1:
                gr = gr + state.lambda_l1 * np.sign(p)
            if state.lambda_l2:
                gr = gr + 2.0 * state.lambda_l2 * p
        state.m[i] = b1 * state.m[i] + (1 - b1) * gr
        state.v[i] = b2 * state.v[i] + (1 - b2) * gr * gr
        p -= lr_t * state.m[i] / (np.sqrt(state.v[i]) + state.eps)


@dataclass
class EpochReport:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0


def train_epochs(net: MlpRegressor, inputs, batch_loss, hp: DnnParams, *, state=None,
                 train_loss=None, valid_loss=None, on_epoch_end=None, extra_state=None):
    """Minibatch training with early stopping on validation loss.

    Parameters
    ----------
    inputs : ndarray, shape (n_rows, Q)
    batch_loss : callable
        ``batch_loss(rows, outputs) -> (loss, d_outputs)`` where ``d_outputs``
        is the gradient of the batch loss w.r.t. the network outputs.
    train_loss, valid_loss : callable, optional
        Evaluation-mode losses recorded after each epoch. Without
        ``valid_loss`` no early stopping happens.
    on_epoch_end : callable, optional
        ``on_epoch_end(epoch)``, run before the epoch's losses are recorded.
    extra_state : (get, set) pair, optional
        Snapshot/restore of caller-owned state alongside the best weights.

    Epochs are 1-based in the report. The network (and ``extra_state``) is
    restored to the best validation epoch. The l1/l2 penalties are charged
    against the batch-summed loss, i.e. divided by ``batch_size`` next to
    the batch-mean loss that ``batch_loss`` returns.
    """
    if hp.max_epochs < 1:
        raise ConfigError("max_epochs must be >= 1")
    inputs = np.asarray(inputs, dtype=np.float64)
    n = inputs.shape[0]
    rng = np.random.default_rng(hp.seed)
    if state is None:
        state = OptimState(net, hp.learning_rate, hp.lambda_l1 / hp.batch_size,
                           hp.lambda_l2 / hp.batch_size)
    report = EpochReport()
    best = np.inf
    best_state = None
    since_best = 0
    for epoch in range(1, hp.max_epochs + 1):
        order = rng.permutation(n)
        batch_losses = []
        for b, start in enumerate(range(0, n, hp.batch_size)):
            rows = order[start:start + hp.batch_size]
            out = net.forward(inputs[rows], train=True, rng=rng)
            loss, d_out = batch_loss(rows, out)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            backward_and_step(net, state, d_out, batch_index=b)
            batch_losses.append(loss)
        if on_epoch_end is not None:
            on_epoch_end(epoch)
        report.train_loss.append(float(train_loss()) if train_loss else float(np.mean(batch_losses)))
        report.epochs_run = epoch
        if valid_loss is None:
            report.best_epoch = epoch
            continue
        v = float(valid_loss())
        report.valid_loss.append(v)
        if not np.isfinite(v):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        if v < best:
            best, since_best = v, 0
            report.best_epoch = epoch
            best_state = (net.get_state(), extra_state[0]() if extra_state else None)
        else:
            since_best += 1
            if since_best > hp.patience:
                break
    if best_state is not None:
        net.set_state(best_state[0])
        if extra_state:
            extra_state[1](best_state[1])
    return report
