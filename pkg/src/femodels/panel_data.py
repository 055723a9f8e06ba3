"""Panel choice data: container, CSV ingestion, individual-level splits.

Observations are indexed by (individual, scenario). Socio-demographic
features live on the individual, alternative-specific variables on the
observation. Individuals are re-indexed densely ``0..n_individuals-1`` on
construction; the original identifiers are kept in ``individual_ids``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError, SchemaError, ShapeError


@dataclass(frozen=True)
class CsvSchema:
    """Column roles of a panel CSV file.

    ``alternatives`` holds one tuple of variable columns per utility
    function: one per alternative for multinomial data, a single one for
    ordinal data. ``n_classes`` defaults to the number of utilities.
    """

    individual: str
    target: str
    socio: tuple[str, ...]
    alternatives: tuple[tuple[str, ...], ...]
    n_classes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "socio", tuple(self.socio))
        object.__setattr__(
            self, "alternatives", tuple(tuple(a) for a in self.alternatives)
        )
        if not self.alternatives:
            raise ConfigError("schema.alternatives: at least one utility is required")
        if self.n_classes is not None and self.n_classes < 2:
            raise ConfigError("schema.n_classes: must be >= 2")

    @property
    def classes(self) -> int:
        return self.n_classes if self.n_classes is not None else len(self.alternatives)

    def columns(self) -> list[str]:
        cols = [self.individual, self.target, *self.socio]
        for alt in self.alternatives:
            for c in alt:
                if c not in cols:
                    cols.append(c)
        return cols

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        allowed = {"individual", "target", "socio", "alternatives", "n_classes"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"schema: unknown keys {sorted(unknown)}")
        try:
            return cls(
                individual=d["individual"],
                target=d["target"],
                socio=tuple(d.get("socio", ())),
                alternatives=tuple(tuple(a) for a in d["alternatives"]),
                n_classes=d.get("n_classes"),
            )
        except KeyError as exc:
            raise ConfigError(f"schema: missing key {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "individual": self.individual,
            "target": self.target,
            "socio": list(self.socio),
            "alternatives": [list(a) for a in self.alternatives],
            "n_classes": self.n_classes,
        }


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Immutable panel dataset.

    Attributes
    ----------
    individual : ndarray of int, shape (n_obs,)
        Dense individual index of each observation.
    individual_ids : tuple of str
        Original identifier of each dense individual index.
    socio : ndarray, shape (n_individuals, Q)
    alt_vars : ndarray, shape (n_obs, K, V)
        Variable ``v`` of utility ``k``; utilities with fewer than ``V``
        variables are zero padded.
    target : ndarray of int, shape (n_obs,)
    schema : CsvSchema
    """

    individual: np.ndarray
    individual_ids: tuple
    socio: np.ndarray
    alt_vars: np.ndarray
    target: np.ndarray
    schema: CsvSchema
    _var_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ind = np.asarray(self.individual, dtype=np.int64)
        socio = np.asarray(self.socio, dtype=np.float64)
        alt = np.asarray(self.alt_vars, dtype=np.float64)
        y = np.asarray(self.target, dtype=np.int64)
        n_obs = ind.shape[0]
        k = len(self.schema.alternatives)
        v = max(len(a) for a in self.schema.alternatives)
        if socio.ndim != 2 or socio.shape[1] != len(self.schema.socio):
            raise ShapeError(f"socio must have shape (n_individuals, {len(self.schema.socio)})")
        if alt.shape != (n_obs, k, v):
            raise ShapeError(f"alt_vars must have shape {(n_obs, k, v)}, got {alt.shape}")
        if y.shape != (n_obs,):
            raise ShapeError("target must have one entry per observation")
        if len(self.individual_ids) != socio.shape[0]:
            raise ShapeError("individual_ids and socio disagree on n_individuals")
        if n_obs and (ind.min() < 0 or ind.max() >= socio.shape[0]):
            raise DataError("individual index out of range")
        if n_obs and np.bincount(ind, minlength=socio.shape[0]).min() == 0:
            raise DataError("individual indices must be dense: some individual has no observation")
        if n_obs and (y.min() < 0 or y.max() >= self.schema.classes):
            raise DataError(f"target outside 0..{self.schema.classes - 1}")
        object.__setattr__(self, "individual", _readonly(ind))
        object.__setattr__(self, "socio", _readonly(socio))
        object.__setattr__(self, "alt_vars", _readonly(alt))
        object.__setattr__(self, "target", _readonly(y))
        object.__setattr__(self, "individual_ids", tuple(str(i) for i in self.individual_ids))
        index = {}
        for i, names in enumerate(self.schema.alternatives):
            for j, name in enumerate(names):
                index[(i, name)] = j
        object.__setattr__(self, "_var_index", index)

    @property
    def n_individuals(self) -> int:
        return self.socio.shape[0]

    @property
    def n_observations(self) -> int:
        return self.individual.shape[0]

    @property
    def n_utilities(self) -> int:
        return self.alt_vars.shape[1]

    @property
    def n_classes(self) -> int:
        return self.schema.classes

    def variable(self, alternative: int, name: str) -> np.ndarray:
        """Per-observation values of variable ``name`` in utility ``alternative``."""
        try:
            j = self._var_index[(alternative, name)]
        except KeyError:
            raise SchemaError(
                f"variable {name!r} not declared for alternative {alternative}"
            ) from None
        return self.alt_vars[:, alternative, j]

    def obs_socio(self) -> np.ndarray:
        return self.socio[self.individual]

    def subset(self, individuals: Sequence[int]) -> "PanelDataset":
        """Dataset restricted to ``individuals`` (dense indices), re-indexed in the given order."""
        individuals = np.asarray(individuals, dtype=np.int64)
        remap = np.full(self.n_individuals, -1, dtype=np.int64)
        remap[individuals] = np.arange(individuals.shape[0])
        new_ind = remap[self.individual]
        rows = np.flatnonzero(new_ind >= 0)
        return PanelDataset(
            individual=new_ind[rows],
            individual_ids=tuple(self.individual_ids[i] for i in individuals),
            socio=self.socio[individuals],
            alt_vars=self.alt_vars[rows],
            target=self.target[rows],
            schema=self.schema,
        )

    def equals(self, other: "PanelDataset") -> bool:
        """Exact (bitwise on floats) equality."""
        return (
            self.schema == other.schema
            and self.individual_ids == other.individual_ids
            and np.array_equal(self.individual, other.individual)
            and np.array_equal(self.target, other.target)
            and self.socio.tobytes() == other.socio.tobytes()
            and self.alt_vars.tobytes() == other.alt_vars.tobytes()
        )

    @classmethod
    def from_columns(
        cls,
        schema: CsvSchema,
        individual_ids: Sequence,
        target: Sequence[int],
        socio: np.ndarray,
        columns: dict[str, np.ndarray],
    ) -> "PanelDataset":
        """Build from observation-level columns.

        ``socio`` has one row per observation; rows of one individual must
        agree exactly. Individuals are indexed in order of first appearance.
        """
        ids = [str(i) for i in individual_ids]
        socio = np.asarray(socio, dtype=np.float64).reshape(len(ids), len(schema.socio))
        dense: dict[str, int] = {}
        ind = np.empty(len(ids), dtype=np.int64)
        for r, key in enumerate(ids):
            ind[r] = dense.setdefault(key, len(dense))
        first = np.full(len(dense), -1, dtype=np.int64)
        for r in range(len(ids) - 1, -1, -1):
            first[ind[r]] = r
        ind_socio = socio[first] if len(ids) else np.zeros((0, len(schema.socio)))
        if len(ids):
            bad = np.any(socio != ind_socio[ind], axis=1)
            if bad.any():
                r = int(np.flatnonzero(bad)[0])
                raise DataError(
                    f"individual {ids[r]!r} has inconsistent socio-demographic values across observations"
                )
        k = len(schema.alternatives)
        v = max(len(a) for a in schema.alternatives)
        alt = np.zeros((len(ids), k, v))
        for i, names in enumerate(schema.alternatives):
            for j, name in enumerate(names):
                alt[:, i, j] = columns[name]
        return cls(
            individual=ind,
            individual_ids=tuple(dense),
            socio=ind_socio,
            alt_vars=alt,
            target=np.asarray(target, dtype=np.int64),
            schema=schema,
        )


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(
            f"row {row}, column {column!r}: cannot parse {text!r} as a number",
            row=row,
            column=column,
        ) from None
    if not math.isfinite(value):
        raise ParseError(f"row {row}, column {column!r}: non-finite value {text!r}", row=row, column=column)
    return value


def load_csv(path, schema: CsvSchema) -> PanelDataset:
    """Read a panel CSV.

    Raises
    ------
    SchemaError
        A declared column is missing from the header.
    ParseError
        A declared cell is empty or not numeric (``row`` counts data rows from 1).
    DataError
        Socio-demographic values differ between observations of one individual.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row expected") from None
        missing = [c for c in schema.columns() if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        pos = {c: header.index(c) for c in schema.columns()}
        value_cols = [c for c in schema.columns() if c not in (schema.individual, schema.target)]
        ids, targets = [], []
        values = {c: [] for c in value_cols}
        for r, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"row {r}: expected {len(header)} fields, got {len(rec)}", row=r)
            ids.append(rec[pos[schema.individual]])
            t = rec[pos[schema.target]]
            try:
                targets.append(int(t))
            except ValueError:
                raise ParseError(
                    f"row {r}, column {schema.target!r}: cannot parse {t!r} as an integer label",
                    row=r,
                    column=schema.target,
                ) from None
            for c in value_cols:
                values[c].append(_parse_float(rec[pos[c]], r, c))
    columns = {c: np.asarray(v, dtype=np.float64) for c, v in values.items()}
    socio = (
        np.column_stack([columns[c] for c in schema.socio])
        if schema.socio
        else np.zeros((len(ids), 0))
    )
    return PanelDataset.from_columns(schema, ids, targets, socio, columns)


def save_csv(ds: PanelDataset, path) -> None:
    """Write ``ds`` so that ``load_csv(path, ds.schema)`` reproduces it exactly."""
    schema = ds.schema
    cols = schema.columns()[2:]
    obs_socio = ds.obs_socio()
    data = {}
    for q, name in enumerate(schema.socio):
        data[name] = obs_socio[:, q]
    for i, names in enumerate(schema.alternatives):
        for name in names:
            data.setdefault(name, ds.variable(i, name))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.columns())
        ids = ds.individual_ids
        arrays = [data[c].tolist() for c in cols]
        for r in range(ds.n_observations):
            writer.writerow(
                [ids[ds.individual[r]], int(ds.target[r])] + [repr(a[r]) for a in arrays]
            )


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint individual-level partition (dense individual indices, sorted)."""

    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int


def split_by_individual(ds: PanelDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitPlan:
    """Shuffle individuals with a seeded PRNG and partition them.

    Validation and test sizes are ``floor(fraction * n)``; the remainder
    goes to train.
    """
    if len(fractions) != 3:
        raise ConfigError("split.fractions: expected (train, valid, test)")
    f_train, f_valid, f_test = (float(f) for f in fractions)
    if f_train <= 0 or f_valid < 0 or f_test < 0:
        raise ConfigError("split.fractions: train must be positive, valid/test non-negative")
    if abs(f_train + f_valid + f_test - 1.0) > 1e-9:
        raise ConfigError(f"split.fractions: must sum to 1, got {f_train + f_valid + f_test!r}")
    n = ds.n_individuals
    n_valid = int(math.floor(f_valid * n + 1e-9))
    n_test = int(math.floor(f_test * n + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    n_train = n - n_valid - n_test
    return SplitPlan(
        train=np.sort(perm[:n_train]),
        valid=np.sort(perm[n_train:n_train + n_valid]),
        test=np.sort(perm[n_train + n_valid:]),
        seed=seed,
    )


def aggregate_per_individual(grad, hess, ds_or_index, n_individuals=None):
    """Sum per-observation gradients and hessians within each individual.

    ``ds_or_index`` is a :class:`PanelDataset` or an observation-to-individual
    index array (then ``n_individuals`` is required).
    """
    if isinstance(ds_or_index, PanelDataset):
        index, n = ds_or_index.individual, ds_or_index.n_individuals
    else:
        index, n = np.asarray(ds_or_index), n_individuals
    grad = np.asarray(grad, dtype=np.float64)
    hess = np.asarray(hess, dtype=np.float64)
    if grad.shape != index.shape or hess.shape != index.shape:
        raise ShapeError(
            f"grad/hess must have one entry per observation ({index.shape[0]}), "
            f"got {grad.shape} and {hess.shape}"
        )
    return (
        np.bincount(index, weights=grad, minlength=n),
        np.bincount(index, weights=hess, minlength=n),
    )
