"""Functional-effects utility models and their training loops.

A utility is ``V_i = intercept_i + sum_m slope_im``, where the intercept is
absent, a scalar ``alpha_i`` or a function ``g_i0(s)`` of the individual's
socio-demographic features, and each slope term is ``beta_im * x_m``,
``f_im(x_m)`` (boosted trees on the variable itself) or ``g_im(s) * x_m``.
Functional effects are learnt either by one boosted ensemble each
(``regressor="gbdt"``) or by a single multi-output network
(``regressor="dnn"``).

Naming used throughout (model kinds)::

    MNL          linear intercept,     linear slopes
    RUMBoost     linear intercept,     boosted slopes
    FI-DNN       functional intercept, linear slopes      (dnn)
    FI-RUMBoost  functional intercept, boosted slopes     (gbdt)
    FS-GBDT/DNN  linear intercept,     functional slopes
    FIS-GBDT/DNN functional intercept, functional slopes
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import choice_loss as cl
from . import ordinal_coral as oc
from .boosted_trees import Ensemble, GbdtParams
from .errors import ConfigError, NumericError, SchemaError
from .mlp_regressor import DnnParams, MlpRegressor, train_epochs
from .panel_data import PanelDataset, SplitPlan, aggregate_per_individual

INTERCEPT_KINDS = ("none", "linear", "functional")
SLOPE_KINDS = ("linear", "boosted", "functional")
NEWTON_DAMPING = 0.5
CURVE_POINTS = 256

MODEL_KINDS = {
    "MNL": ("linear", "linear", "gbdt"),
    "RUMBoost": ("linear", "boosted", "gbdt"),
    "FI-DNN": ("functional", "linear", "dnn"),
    "FI-RUMBoost": ("functional", "boosted", "gbdt"),
    "FS-GBDT": ("linear", "functional", "gbdt"),
    "FS-DNN": ("linear", "functional", "dnn"),
    "FIS-GBDT": ("functional", "functional", "gbdt"),
    "FIS-DNN": ("functional", "functional", "dnn"),
}


def monotone_clamp(v, c):
    """Sign constraint ``c * max(0, c * v)``; ``c = 0`` leaves ``v`` unchanged."""
    if c == 0:
        return v
    return c * np.maximum(0.0, c * np.asarray(v, dtype=np.float64))


def _clamp_grad(v, c):
    if c == 0:
        return np.ones_like(v)
    return (c * v >= 0).astype(np.float64)


# ---------------------------------------------------------------------------
# specification


@dataclass(frozen=True)
class Slope:
    variable: str
    kind: str = "linear"
    monotone: int = 0

    def __post_init__(self):
        if self.kind not in SLOPE_KINDS:
            raise ConfigError(f"slope kind {self.kind!r} not in {SLOPE_KINDS}")
        if self.monotone not in (-1, 0, 1):
            raise ConfigError(f"monotone constraint must be -1, 0 or 1, got {self.monotone!r}")


@dataclass(frozen=True)
class Utility:
    intercept: str = "linear"
    slopes: tuple = ()

    def __post_init__(self):
        if self.intercept not in INTERCEPT_KINDS:
            raise ConfigError(f"intercept kind {self.intercept!r} not in {INTERCEPT_KINDS}")
        object.__setattr__(self, "slopes", tuple(
            s if isinstance(s, Slope) else Slope(**s) for s in self.slopes))


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model description.

    ``utilities`` has one entry per alternative (multinomial) or exactly one
    (ordinal). The reference alternative's intercept is pinned to zero. For
    the ordinal head a linear intercept is not estimated: the thresholds
    absorb it.
    """

    utilities: tuple
    head: str = "multinomial"
    n_classes: int | None = None
    regressor: str = "gbdt"
    reference: int | None = 2
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "utilities", tuple(
            u if isinstance(u, Utility) else Utility(**u) for u in self.utilities))
        if self.head not in ("multinomial", "ordinal"):
            raise ConfigError(f"head must be 'multinomial' or 'ordinal', got {self.head!r}")
        if self.regressor not in ("gbdt", "dnn"):
            raise ConfigError(f"regressor must be 'gbdt' or 'dnn', got {self.regressor!r}")
        K = len(self.utilities)
        if self.head == "ordinal":
            if K != 1:
                raise ConfigError("ordinal models have exactly one utility")
            if self.n_classes is None or self.n_classes < 2:
                raise ConfigError("ordinal models need n_classes >= 2")
            object.__setattr__(self, "reference", None)
        else:
            if K < 2:
                raise ConfigError("multinomial models need at least two utilities")
            if self.n_classes not in (None, K):
                raise ConfigError("multinomial n_classes must equal the number of utilities")
            object.__setattr__(self, "n_classes", K)
            if self.reference is not None and not 0 <= self.reference < K:
                raise ConfigError(f"reference alternative {self.reference} out of range")
        kinds = [s.kind for u in self.utilities for s in u.slopes]
        has_fi = any(self._intercept_kind(i) == "functional" for i in range(K))
        if self.regressor == "dnn" and "boosted" in kinds:
            raise ConfigError("boosted (non-linear) slopes cannot be learnt with the dnn regressor")
        if (self.regressor == "gbdt" and has_fi and "functional" not in kinds
                and "linear" in kinds and "boosted" not in kinds):
            raise ConfigError("functional intercept with only linear slopes is not available with gbdt; use dnn")

    def _intercept_kind(self, i: int) -> str:
        kind = self.utilities[i].intercept
        if i == self.reference:
            return "none"
        if self.head == "ordinal" and kind == "linear":
            return "none"
        return kind

    @property
    def n_utilities(self) -> int:
        return len(self.utilities)

    def effects(self):
        """``(key, i, m, kind, variable, monotone)`` for every estimated parameter.

        Intercepts come first (by alternative), then slopes by (alternative, position).
        """
        out = []
        for i in range(self.n_utilities):
            kind = self._intercept_kind(i)
            if kind != "none":
                out.append((f"intercept[{i}]", i, None, kind, None, 0))
        for i, u in enumerate(self.utilities):
            for m, s in enumerate(u.slopes):
                out.append((f"slope[{i}][{s.variable}]", i, m, s.kind, s.variable, s.monotone))
        return out

    def functional_effects(self):
        return [e for e in self.effects() if e[3] == "functional"]

    @classmethod
    def from_kind(cls, kind: str, variables, *, head="multinomial", n_classes=None,
                  monotone=None, reference=2, name=None) -> "ModelSpec":
        """Build one of the named model kinds.

        ``variables`` lists variable names per utility; ``monotone`` maps a
        variable name to its sign constraint.
        """
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}")
        icpt, slope, regressor = MODEL_KINDS[kind]
        monotone = monotone or {}
        utilities = tuple(
            Utility(icpt, tuple(Slope(v, slope, int(monotone.get(v, 0))) for v in vs))
            for vs in variables
        )
        return cls(utilities, head=head, n_classes=n_classes, regressor=regressor,
                   reference=reference, name=name or kind)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "head": self.head,
            "n_classes": self.n_classes,
            "regressor": self.regressor,
            "reference": self.reference,
            "utilities": [
                {"intercept": u.intercept,
                 "slopes": [{"variable": s.variable, "kind": s.kind, "monotone": s.monotone}
                            for s in u.slopes]}
                for u in self.utilities
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        allowed = {"name", "head", "n_classes", "regressor", "reference", "utilities"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"model: unknown keys {sorted(unknown)}")
        if "utilities" not in d:
            raise ConfigError("model: missing key 'utilities'")
        return cls(
            tuple(Utility(u.get("intercept", "linear"), tuple(Slope(**s) for s in u.get("slopes", ())))
                  for u in d["utilities"]),
            head=d.get("head", "multinomial"),
            n_classes=d.get("n_classes"),
            regressor=d.get("regressor", "gbdt"),
            reference=d.get("reference", 2),
            name=d.get("name", ""),
        )


def default_learning_rate(spec: ModelSpec) -> float:
    """``min(0.1, 1 / min_i M_i)`` with ``M_i`` the number of variables of utility ``i``."""
    sizes = [len(u.slopes) for u in spec.utilities]
    if not sizes or min(sizes) == 0:
        raise ConfigError("default learning rate needs every utility to have at least one variable")
    return min(0.1, 1.0 / min(sizes))


# ---------------------------------------------------------------------------
# heads


class _MultinomialHead:
    def __init__(self, n_classes):
        self.n_classes = n_classes

    def loss(self, V, y):
        return cl.cel(cl.softmax_probabilities(V), y)

    def grads(self, V, y):
        P = cl.softmax_probabilities(V)
        return cl.cel_grad_hess_wrt_utility(P, y)

    def probabilities(self, V):
        return cl.softmax_probabilities(V)


class _OrdinalHead:
    def __init__(self, coral: oc.CoralHead):
        self.coral = coral

    @property
    def n_classes(self):
        return self.coral.n_classes

    def loss(self, V, y):
        return oc.mcel(oc.coral_probabilities(V[:, 0], self.coral), y)

    def grads(self, V, y):
        pred = oc.coral_probabilities(V[:, 0], self.coral)
        dV, d2V = oc.mcel_grad_hess_wrt_utility(pred, y)
        return cl.LossGrads(dV[:, None], d2V[:, None])

    def probabilities(self, V):
        return oc.coral_probabilities(V[:, 0], self.coral).class_probs

    def update_thresholds(self, V, y, damping=NEWTON_DAMPING):
        pred = oc.coral_probabilities(V[:, 0], self.coral)
        _, hess = oc.mcel_grad_hess_wrt_thresholds(pred, y)
        self.coral = oc.update_thresholds(self.coral, pred, y, damping / np.maximum(hess, 1e-12))


# ---------------------------------------------------------------------------
# fitted model


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    best_iteration: int = 0
    iterations_run: int = 0
    wall_time: float = 0.0
    learning_rate: float | None = None
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "valid_loss": self.valid_loss,
            "best_iteration": self.best_iteration,
            "iterations_run": self.iterations_run,
            "wall_time": self.wall_time,
            "learning_rate": self.learning_rate,
            "metrics": self.metrics,
        }


class FittedModel:
    """Every declared parameter has exactly one realisation.

    Attributes
    ----------
    linear : dict
        Scalars for linear intercepts/slopes, keyed like ``spec.effects()``.
        Linear slopes are stored post-clamp.
    ensembles : dict
        Boosted ensemble per gbdt-learnt functional effect or boosted slope.
    net : MlpRegressor or None
        Network producing all functional effects of a dnn model; column
        ``k`` is ``net_outputs[k]``.
    coral : CoralHead or None
    curve_ranges : dict
        Training range of the variable of each boosted slope.
    """

    def __init__(self, spec: ModelSpec, socio_names=()):
        self.spec = spec
        self.socio_names = tuple(socio_names)
        self.linear: dict[str, float] = {}
        self.ensembles: dict[str, Ensemble] = {}
        self.net: MlpRegressor | None = None
        self.net_outputs: list[str] = []
        self.coral: oc.CoralHead | None = None
        self.curve_ranges: dict[str, tuple] = {}
        self.meta: dict = {}

    # -- evaluation -----------------------------------------------------

    def _check(self, ds: PanelDataset):
        if tuple(ds.schema.socio) != self.socio_names:
            raise SchemaError(
                f"socio columns {list(ds.schema.socio)} do not match the model's {list(self.socio_names)}")
        if ds.n_utilities != self.spec.n_utilities:
            raise SchemaError(
                f"dataset has {ds.n_utilities} utilities, model expects {self.spec.n_utilities}")
        for key, i, m, kind, var, c in self.spec.effects():
            if var is not None:
                ds.variable(i, var)

    def functional_values(self, socio) -> dict:
        """Raw (pre-clamp) functional effect values per row of ``socio``."""
        socio = np.asarray(socio, dtype=np.float64)
        out = {}
        if self.net is not None and socio.shape[0]:
            E = self.net.forward(socio, train=False)
            for k, key in enumerate(self.net_outputs):
                out[key] = E[:, k]
        for key, i, m, kind, var, c in self.spec.functional_effects():
            if key not in out:
                out[key] = (self.ensembles[key].predict(socio) if socio.shape[0]
                            else np.zeros(0))
        return out

    def effect_values(self, ds: PanelDataset) -> dict:
        """Post-clamp functional effect per individual of ``ds``."""
        raw = self.functional_values(ds.socio)
        return {key: monotone_clamp(raw[key], c)
                for key, i, m, kind, var, c in self.spec.functional_effects()}

    def utilities(self, ds: PanelDataset) -> np.ndarray:
        self._check(ds)
        V = np.zeros((ds.n_observations, self.spec.n_utilities))
        func = self.effect_values(ds)
        for key, i, m, kind, var, c in self.spec.effects():
            x = 1.0 if var is None else ds.variable(i, var)
            if kind == "linear":
                V[:, i] += self.linear[key] * x
            elif kind == "boosted":
                V[:, i] += self.ensembles[key].predict(x[:, None])
            else:
                V[:, i] += func[key][ds.individual] * x
        return V

    def _head(self):
        if self.spec.head == "ordinal":
            return _OrdinalHead(self.coral)
        return _MultinomialHead(self.spec.n_classes)

    def predict_proba(self, ds: PanelDataset) -> np.ndarray:
        V = self.utilities(ds)
        if ds.n_observations == 0:
            return np.zeros((0, self.spec.n_classes))
        return self._head().probabilities(V)

    def predict(self, ds: PanelDataset) -> np.ndarray:
        """Point prediction: most likely class (multinomial) or threshold count (ordinal)."""
        if self.spec.head == "ordinal":
            V = self.utilities(ds)
            return oc.coral_probabilities(V[:, 0], self.coral).point_class
        return np.argmax(self.predict_proba(ds), axis=1)

    def loss(self, ds: PanelDataset) -> float:
        return self._head().loss(self.utilities(ds), ds.target)

    def metrics(self, ds: PanelDataset) -> dict:
        if ds.n_observations == 0:
            return {}
        V = self.utilities(ds)
        if self.spec.head == "ordinal":
            pred = oc.coral_probabilities(V[:, 0], self.coral)
            return {
                "mcel": oc.mcel(pred, ds.target),
                "mae": oc.mae(pred.point_class, ds.target),
                "emae": oc.emae(pred.class_probs, ds.target),
            }
        return {"cel": cl.cel(cl.softmax_probabilities(V), ds.target)}

    # -- serialisation --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "socio_names": list(self.socio_names),
            "linear": dict(self.linear),
            "ensembles": {k: e.to_dict() for k, e in self.ensembles.items()},
            "net": None if self.net is None else self.net.to_dict(),
            "net_outputs": list(self.net_outputs),
            "thresholds": None if self.coral is None else self.coral.thresholds.tolist(),
            "curve_ranges": {k: list(v) for k, v in self.curve_ranges.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        model = cls(ModelSpec.from_dict(d["spec"]), d["socio_names"])
        model.linear = {k: float(v) for k, v in d["linear"].items()}
        model.ensembles = {k: Ensemble.from_dict(e) for k, e in d["ensembles"].items()}
        model.net = None if d["net"] is None else MlpRegressor.from_dict(d["net"])
        model.net_outputs = list(d["net_outputs"])
        model.coral = None if d["thresholds"] is None else oc.CoralHead(d["thresholds"])
        model.curve_ranges = {k: tuple(v) for k, v in d["curve_ranges"].items()}
        model.meta = dict(d.get("meta", {}))
        return model


def assemble_utilities(model: FittedModel, ds: PanelDataset) -> np.ndarray:
    return model.utilities(ds)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainOptions:
    """Orchestration settings shared by both regressors."""

    refresh_within_round: bool = False
    anchor: float = 0.0
    normalize_boosted: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "TrainOptions":
        unknown = set(d) - {"refresh_within_round", "anchor", "normalize_boosted"}
        if unknown:
            raise ConfigError(f"train: unknown keys {sorted(unknown)}")
        return cls(**d)


def _check_dataset(spec: ModelSpec, ds: PanelDataset):
    if ds.n_utilities != spec.n_utilities:
        raise SchemaError(f"dataset has {ds.n_utilities} utilities, spec declares {spec.n_utilities}")
    if ds.n_classes != spec.n_classes:
        raise SchemaError(f"dataset has {ds.n_classes} classes, spec declares {spec.n_classes}")
    for key, i, m, kind, var, c in spec.effects():
        if var is not None:
            ds.variable(i, var)
    if spec.functional_effects() and ds.socio.shape[1] == 0:
        raise SchemaError("functional effects need socio-demographic columns")


class _Terms:
    """Current per-term values on one dataset, summed into utilities on demand."""

    def __init__(self, spec: ModelSpec, ds: PanelDataset):
        self.spec = spec
        self.ds = ds
        self.x = {}
        for key, i, m, kind, var, c in spec.effects():
            self.x[key] = None if var is None else np.asarray(ds.variable(i, var))
        self.raw = {}  # functional: per individual; boosted: per observation
        for key, i, m, kind, var, c in spec.effects():
            if kind == "functional":
                self.raw[key] = np.zeros(ds.n_individuals)
            elif kind == "boosted":
                self.raw[key] = np.zeros(ds.n_observations)

    def utilities(self, linear) -> np.ndarray:
        V = np.zeros((self.ds.n_observations, self.spec.n_utilities))
        for key, i, m, kind, var, c in self.spec.effects():
            x = self.x[key]
            if kind == "linear":
                V[:, i] += linear[key] * (1.0 if x is None else x)
            elif kind == "boosted":
                V[:, i] += self.raw[key]
            else:
                v = monotone_clamp(self.raw[key], c)[self.ds.individual]
                V[:, i] += v if x is None else v * x
        return V


def _linear_newton(spec, linear, terms: _Terms, grads):
    dV, d2V = grads
    for key, i, m, kind, var, c in spec.effects():
        if kind != "linear":
            continue
        x = terms.x[key]
        if x is None:
            G, H = dV[:, i].sum(), d2V[:, i].sum()
        else:
            G, H = (dV[:, i] * x).sum(), (d2V[:, i] * x * x).sum()
        linear[key] = float(monotone_clamp(linear[key] - NEWTON_DAMPING * G / max(H, 1e-12), c))


def _make_head(spec, train: PanelDataset):
    if spec.head == "ordinal":
        return _OrdinalHead(oc.CoralHead.from_frequencies(train.target, spec.n_classes))
    return _MultinomialHead(spec.n_classes)


def _finite_or_raise(loss, where):
    if not math.isfinite(loss):
        raise NumericError(f"training diverged: non-finite loss at {where}")


def _fit_gbdt(spec, train, valid, params: GbdtParams, options: TrainOptions, log=None):
    eta = params.learning_rate if params.learning_rate is not None else default_learning_rate(spec)
    model = FittedModel(spec, train.schema.socio)
    head = _make_head(spec, train)
    linear = {key: 0.0 for key, i, m, kind, var, c in spec.effects() if kind == "linear"}
    obs_per_ind = np.bincount(train.individual, minlength=train.n_individuals).astype(np.float64)

    effects = spec.effects()
    ensembles = {}
    rngs = {}
    for idx, (key, i, m, kind, var, c) in enumerate(effects):
        if kind == "functional":
            ensembles[key] = Ensemble.start(train.socio, params, eta, counts=obs_per_ind)
        elif kind == "boosted":
            x = train.variable(i, var)
            ensembles[key] = Ensemble.start(x[:, None], params, eta, monotone=[c])
            model.curve_ranges[key] = (float(x.min()), float(x.max()))
        if kind != "linear":
            rngs[key] = np.random.default_rng([params.seed, idx])

    tr = _Terms(spec, train)
    va = _Terms(spec, valid) if valid is not None and valid.n_observations else None
    report = TrainReport(learning_rate=eta)

    def grads_for(key, i, kind, c, grads):
        dV, d2V = grads[0][:, i], grads[1][:, i]
        x = tr.x[key]
        if kind == "boosted":
            return dV, d2V
        d = _clamp_grad(tr.raw[key], c)[train.individual]
        g, h = (dV, d2V) if x is None else cl.chain_to_parameter_space((dV, d2V), x)
        return aggregate_per_individual(g * d, h * d, train)

    def apply_tree(key, kind, tree):
        ens = ensembles[key]
        tr.raw[key] = ens.cache.copy()
        if va is not None and eta != 0.0:
            X = valid.socio if kind == "functional" else va.x[key][:, None]
            va.raw[key] = va.raw[key] + eta * tree.value[tree.apply(X)]

    V = tr.utilities(linear)
    best = (np.inf, 0, dict(linear), head.coral if spec.head == "ordinal" else None)
    since_best = 0
    for r in range(params.max_rounds):
        grads = head.grads(V, train.target)
        for key, i, m, kind, var, c in effects:
            if kind == "linear":
                continue
            g, h = grads_for(key, i, kind, c, grads)
            tree = ensembles[key].boost_round(g, h, rngs[key], round_index=r)
            apply_tree(key, kind, tree)
            if options.refresh_within_round:
                grads = head.grads(tr.utilities(linear), train.target)
        _linear_newton(spec, linear, tr, grads)
        V = tr.utilities(linear)
        if spec.head == "ordinal":
            head.update_thresholds(V, train.target)
        train_loss = head.loss(V, train.target)
        _finite_or_raise(train_loss, f"round {r}")
        report.train_loss.append(train_loss)
        report.iterations_run = r + 1
        if va is None:
            best = (train_loss, r + 1, dict(linear), getattr(head, "coral", None))
            continue
        valid_loss = head.loss(va.utilities(linear), valid.target)
        _finite_or_raise(valid_loss, f"round {r} (validation)")
        report.valid_loss.append(valid_loss)
        if log is not None and (r % 50 == 0):
            log(f"round {r}: train {train_loss:.5f} valid {valid_loss:.5f}")
        if valid_loss < best[0]:
            best = (valid_loss, r + 1, dict(linear), getattr(head, "coral", None))
            since_best = 0
        else:
            since_best += 1
            if since_best >= params.early_stopping_rounds > 0:
                break

    _, n_rounds, best_linear, best_coral = best
    report.best_iteration = n_rounds
    model.linear = best_linear
    for key, ens in ensembles.items():
        ens.truncate(n_rounds)
        ens.release_training_data()
    model.ensembles = ensembles
    model.coral = best_coral
    return model, report


def _fit_dnn(spec, train, valid, hp: DnnParams, options: TrainOptions, log=None):
    model = FittedModel(spec, train.schema.socio)
    head = _make_head(spec, train)
    linear = {key: 0.0 for key, i, m, kind, var, c in spec.effects() if kind == "linear"}
    feff = spec.functional_effects()
    net = MlpRegressor(train.socio.shape[1], hp.layer_sizes, len(feff), hp.activation,
                       hp.batch_norm, hp.dropout, seed=hp.seed)
    net.fit_scaler(train.socio)
    model.net = net
    model.net_outputs = [e[0] for e in feff]

    tr = _Terms(spec, train)
    va = _Terms(spec, valid) if valid is not None and valid.n_observations else None
    base = {"V": tr.utilities(linear)}  # linear part only (functional raw values are zero)
    obs_socio = train.obs_socio()

    def linear_only(terms):
        V = np.zeros((terms.ds.n_observations, spec.n_utilities))
        for key, i, m, kind, var, c in spec.effects():
            if kind == "linear":
                x = terms.x[key]
                V[:, i] += linear[key] * (1.0 if x is None else x)
        return V

    def full_utilities(terms):
        if terms.ds.n_individuals:
            E = net.forward(terms.ds.socio, train=False)
            for k, (key, *_rest) in enumerate(feff):
                terms.raw[key] = E[:, k]
        return terms.utilities(linear)

    def batch_loss(rows, out):
        V = base["V"][rows].copy()
        d_clamp = np.empty_like(out)
        xs = []
        for k, (key, i, m, kind, var, c) in enumerate(feff):
            x = tr.x[key]
            xr = None if x is None else x[rows]
            v = monotone_clamp(out[:, k], c)
            V[:, i] += v if xr is None else v * xr
            d_clamp[:, k] = _clamp_grad(out[:, k], c)
            xs.append(xr)
        y = train.target[rows]
        loss = head.loss(V, y)
        dV, _ = head.grads(V, y)
        d_out = np.empty_like(out)
        for k, (key, i, m, kind, var, c) in enumerate(feff):
            g = dV[:, i] * d_clamp[:, k]
            d_out[:, k] = g if xs[k] is None else g * xs[k]
        d_out /= rows.shape[0]
        return loss, d_out

    def on_epoch_end(epoch):
        V = full_utilities(tr)
        grads = head.grads(V, train.target)
        _linear_newton(spec, linear, tr, grads)
        V = tr.utilities(linear)
        if spec.head == "ordinal":
            head.update_thresholds(V, train.target)
        base["V"] = linear_only(tr)
        if log is not None:
            log(f"epoch {epoch}: train {head.loss(V, train.target):.5f}")

    def train_loss():
        return head.loss(tr.utilities(linear), train.target)

    def valid_loss():
        return head.loss(full_utilities(va), valid.target)

    def get_extra():
        return dict(linear), getattr(head, "coral", None)

    def set_extra(state):
        lin, coral = state
        linear.clear()
        linear.update(lin)
        if coral is not None:
            head.coral = coral

    epochs = train_epochs(
        net, obs_socio, batch_loss, hp,
        train_loss=train_loss,
        valid_loss=valid_loss if va is not None else None,
        on_epoch_end=on_epoch_end,
        extra_state=(get_extra, set_extra),
    )
    model.linear = dict(linear)
    model.coral = getattr(head, "coral", None)
    report = TrainReport(
        train_loss=epochs.train_loss, valid_loss=epochs.valid_loss,
        best_iteration=epochs.best_epoch, iterations_run=epochs.epochs_run,
        learning_rate=hp.learning_rate,
    )
    return model, report


def normalize_boosted_slopes(model: FittedModel, anchor: float = 0.0) -> None:
    """Move the constant of every boosted slope into an intercept.

    Each ``f_im`` is shifted so that ``f_im(anchor) = 0`` (as ``beta * 0 = 0``
    for a linear slope). The removed constants go to the alternative's
    intercept relative to the reference alternative, or into the thresholds
    for ordinal models; predicted probabilities are unchanged. Alternatives
    without an intercept keep their constants.
    """
    spec = model.spec
    shifts = np.zeros(spec.n_utilities)
    boosted = [(key, i) for key, i, m, kind, var, c in spec.effects() if kind == "boosted"]
    if not boosted:
        return
    holders = {i: (key, kind) for key, i, m, kind, var, c in spec.effects() if m is None}
    if spec.head == "multinomial":
        ref = spec.reference
        movable = all(i in holders or i == ref for i in range(spec.n_utilities))
        if not movable:
            return
    for key, i in boosted:
        ens = model.ensembles[key]
        c0 = float(ens.predict(np.array([[anchor]]))[0])
        ens.bias -= c0
        shifts[i] += c0
    if spec.head == "ordinal":
        if 0 in holders and holders[0][1] == "functional" and model.net is None:
            model.ensembles[holders[0][0]].bias += shifts[0]
        else:
            model.coral = oc.CoralHead(model.coral.thresholds - shifts[0])
        return
    ref_shift = shifts[ref] if ref is not None else 0.0
    for i in range(spec.n_utilities):
        if i == ref:
            continue
        key, kind = holders[i]
        delta = shifts[i] - ref_shift
        if kind == "linear":
            model.linear[key] += delta
        elif model.net is None:
            model.ensembles[key].bias += delta
        else:  # pragma: no cover - dnn models have no boosted slopes
            raise ConfigError("cannot normalise a dnn intercept")


def fit(spec: ModelSpec, train: PanelDataset, valid: PanelDataset | None = None, *,
        gbdt: GbdtParams | None = None, dnn: DnnParams | None = None,
        options: TrainOptions | None = None, log=None):
    """Train ``spec`` on ``train``, early-stopping on ``valid``.

    Returns ``(FittedModel, TrainReport)``.
    """
    options = options or TrainOptions()
    _check_dataset(spec, train)
    if valid is not None:
        _check_dataset(spec, valid)
    t0 = time.perf_counter()
    if spec.regressor == "dnn" and spec.functional_effects():
        model, report = _fit_dnn(spec, train, valid, (dnn or DnnParams()).validate(), options, log)
    else:
        model, report = _fit_gbdt(spec, train, valid, (gbdt or GbdtParams()).validate(), options, log)
    if options.normalize_boosted:
        normalize_boosted_slopes(model, options.anchor)
    report.wall_time = time.perf_counter() - t0
    model.meta.update(best_iteration=report.best_iteration, learning_rate=report.learning_rate)
    return model, report


def train(spec: ModelSpec, ds: PanelDataset, split: SplitPlan, **kwargs):
    """Fit on the split's train individuals with early stopping on its validation individuals."""
    covered = np.concatenate([split.train, split.valid, split.test])
    if covered.size != ds.n_individuals or np.unique(covered).size != ds.n_individuals:
        raise ConfigError("split does not partition the dataset's individuals")
    valid = ds.subset(split.valid) if split.valid.size else None
    return fit(spec, ds.subset(split.train), valid, **kwargs)


# ---------------------------------------------------------------------------
# exports


def export_effects(model: FittedModel, ds: PanelDataset) -> dict:
    """Tables for plotting: per-individual functional effects, boosted curves,
    linear parameters and thresholds. Returns ``{name: DataFrame}``."""
    tables = {}
    feff = model.spec.functional_effects()
    if feff:
        vals = model.effect_values(ds)
        df = pd.DataFrame({"individual": list(ds.individual_ids)})
        for key, *_ in feff:
            df[key] = vals[key]
        tables["individual_effects"] = df
    curves = []
    for key, i, m, kind, var, c in model.spec.effects():
        if kind != "boosted":
            continue
        lo, hi = model.curve_ranges[key]
        grid = np.linspace(lo, hi, CURVE_POINTS)
        curves.append(pd.DataFrame({
            "effect": key, "alternative": i, "variable": var, "x": grid,
            "value": model.ensembles[key].predict(grid[:, None]),
        }))
    if curves:
        tables["coefficient_curves"] = pd.concat(curves, ignore_index=True)
    if model.linear:
        tables["linear_parameters"] = pd.DataFrame(
            {"parameter": list(model.linear), "value": list(model.linear.values())})
    if model.coral is not None:
        tau = model.coral.thresholds
        tables["thresholds"] = pd.DataFrame({"threshold": np.arange(1, tau.size + 1), "value": tau})
    return tables
