"""Tabular data handling for process-parameter inference.

Covers CSV ingestion against a JSON schema, reversible preprocessing
(standardization, compact binary encoding of categoricals, optional
embedding expansion), per-run ranking against a nominal value, and a
synthetic generator that records full ground truth for calibration
studies.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .util import child_rng, dump_json, json_ready

KINDS = ("continuous", "integer", "binary", "categorical")
ROLES = ("feature", "target", "run_id", "position_id")
ENCODINGS = ("none", "standardize", "binary_encode", "embedding_ref")


class DatasetError(Exception):
    """Base class for dataset failures."""


class MissingColumn(DatasetError):
    pass


class TypeMismatch(DatasetError):
    pass


class EmptyFile(DatasetError):
    pass


class ZeroVariance(DatasetError):
    pass


class InvalidConfig(DatasetError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    """Declared name, kind, role and encoding of one source column."""

    name: str
    kind: str
    role: str = "feature"
    encoding: str = "none"

    def __post_init__(self):
        if not self.name:
            raise InvalidConfig("column name must be non-empty")
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown kind {self.kind!r} for column {self.name!r}")
        if self.role not in ROLES:
            raise InvalidConfig(f"unknown role {self.role!r} for column {self.name!r}")
        if self.encoding not in ENCODINGS:
            raise InvalidConfig(
                f"unknown encoding {self.encoding!r} for column {self.name!r}"
            )
        if self.kind == "categorical" and self.encoding == "standardize":
            raise InvalidConfig(
                f"categorical column {self.name!r} cannot be standardized"
            )
        if self.kind != "categorical" and self.encoding in ("binary_encode", "embedding_ref"):
            raise InvalidConfig(
                f"{self.encoding} applies to categorical columns only ({self.name!r})"
            )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "role": self.role,
            "encoding": self.encoding,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ColumnSpec":
        return cls(
            name=d["name"],
            kind=d["kind"],
            role=d.get("role", "feature"),
            encoding=d.get("encoding", "none"),
        )


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass
class Dataset:
    """Immutable measurement table.

    ``columns`` lists the feature-role columns in order.  Numeric feature
    columns live in ``rows`` (float64, one column each, in ``columns``
    order with categoricals skipped); raw categorical values live in
    ``labels`` keyed by column name and survive encoding so strata can be
    formed later.  ``scaling`` maps standardized column names to the
    (mean, population sd) pair used.
    """

    columns: tuple[ColumnSpec, ...]
    rows: np.ndarray
    targets: np.ndarray
    run_ids: np.ndarray | None = None
    positions: np.ndarray | None = None
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    scaling: dict[str, tuple[float, float]] | None = None

    def __post_init__(self):
        self.columns = tuple(self.columns)
        self.rows = _readonly(np.asarray(self.rows, dtype=np.float64))
        self.targets = _readonly(np.asarray(self.targets, dtype=np.float64))
        if self.rows.ndim != 2:
            raise InvalidConfig("rows must be a 2-d matrix")
        n = self.rows.shape[0]
        if self.targets.shape != (n,):
            raise InvalidConfig("targets length must match row count")
        numeric = [c for c in self.columns if c.kind != "categorical"]
        if self.rows.shape[1] != len(numeric):
            raise InvalidConfig(
                f"rows width {self.rows.shape[1]} != numeric feature count {len(numeric)}"
            )
        for c in self.columns:
            if c.role != "feature":
                raise InvalidConfig("Dataset.columns must hold feature-role specs")
        for j, c in enumerate(numeric):
            col = self.rows[:, j]
            if not np.all(np.isfinite(col)):
                raise TypeMismatch(f"non-finite value in column {c.name!r}")
            if c.kind == "integer" and c.name not in (self.scaling or {}):
                if not np.all(col == np.floor(col)):
                    raise TypeMismatch(f"integer column {c.name!r} holds non-integers")
            if c.kind == "binary":
                if not np.all((col == 0.0) | (col == 1.0)):
                    raise TypeMismatch(f"binary column {c.name!r} holds values outside {{0,1}}")
        if self.run_ids is not None:
            self.run_ids = _readonly(np.asarray(self.run_ids, dtype=object))
            if self.run_ids.shape != (n,):
                raise InvalidConfig("run_ids length must match row count")
        if self.positions is not None:
            self.positions = _readonly(np.asarray(self.positions, dtype=np.int64))
            if self.positions.shape != (n,):
                raise InvalidConfig("positions length must match row count")
        self.labels = {k: _readonly(np.asarray(v, dtype=object)) for k, v in self.labels.items()}
        for k, v in self.labels.items():
            if v.shape != (n,):
                raise InvalidConfig(f"label column {k!r} length must match row count")
        if self.scaling is not None:
            for name, (mu, sd) in self.scaling.items():
                if not sd > 0:
                    raise ZeroVariance(f"stored sd for {name!r} must be positive")

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def numeric_columns(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.kind != "categorical"]

    @property
    def numeric_names(self) -> list[str]:
        return [c.name for c in self.numeric_columns]

    def column_values(self, name: str) -> np.ndarray:
        for j, c in enumerate(self.numeric_columns):
            if c.name == name:
                return self.rows[:, j]
        if name in self.labels:
            return self.labels[name]
        raise MissingColumn(f"no feature column named {name!r}")

    def is_encoded(self) -> bool:
        return all(c.kind != "categorical" for c in self.columns)

    def take(self, idx: np.ndarray) -> "Dataset":
        """Row subset preserving order; shares column specs and scaling."""
        idx = np.asarray(idx)
        return Dataset(
            columns=self.columns,
            rows=self.rows[idx].copy(),
            targets=self.targets[idx].copy(),
            run_ids=None if self.run_ids is None else self.run_ids[idx].copy(),
            positions=None if self.positions is None else self.positions[idx].copy(),
            labels={k: v[idx].copy() for k, v in self.labels.items()},
            scaling=None if self.scaling is None else dict(self.scaling),
        )


# ---------------------------------------------------------------------------
# ingestion


def _parse_cell(cell: str, spec: ColumnSpec, line_no: int):
    name = spec.name
    if spec.kind == "categorical" or spec.role == "run_id":
        if cell == "":
            raise TypeMismatch(f"line {line_no}, column {name!r}: empty value")
        return cell
    if cell == "":
        raise TypeMismatch(f"line {line_no}, column {name!r}: empty value")
    if spec.kind == "binary":
        if cell not in ("0", "1"):
            raise TypeMismatch(f"line {line_no}, column {name!r}: {cell!r} is not 0/1")
        return float(cell)
    if spec.kind == "integer" or spec.role == "position_id":
        try:
            return float(int(cell))
        except ValueError:
            raise TypeMismatch(
                f"line {line_no}, column {name!r}: {cell!r} is not an integer"
            ) from None
    try:
        v = float(cell)
    except ValueError:
        raise TypeMismatch(
            f"line {line_no}, column {name!r}: {cell!r} is not numeric"
        ) from None
    if not math.isfinite(v):
        raise TypeMismatch(f"line {line_no}, column {name!r}: non-finite value")
    return v


def load_schema(path) -> list[ColumnSpec]:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    cols = raw["columns"] if isinstance(raw, dict) else raw
    return [ColumnSpec.from_dict(c) for c in cols]


def load_dataset(csv_path, schema: Sequence[ColumnSpec] | str) -> Dataset:
    """Read a CSV against its schema.

    The header must match the schema names in order.  Every cell must
    parse under its declared kind; the first offending location is
    reported.  Exactly one target column is required.
    """
    if isinstance(schema, (str,)) or hasattr(schema, "__fspath__"):
        schema = load_schema(schema)
    schema = list(schema)
    targets_specs = [c for c in schema if c.role == "target"]
    if len(targets_specs) != 1:
        raise InvalidConfig(f"schema must declare exactly one target, got {len(targets_specs)}")

    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{csv_path}: no header row") from None
        names = [c.name for c in schema]
        if len(header) != len(names):
            raise MissingColumn(
                f"header has {len(header)} columns, schema declares {len(names)}"
            )
        for pos, (got, want) in enumerate(zip(header, names)):
            if got != want:
                raise MissingColumn(
                    f"header column {pos + 1}: expected {want!r}, found {got!r}"
                )
        parsed: list[list] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(schema):
                raise TypeMismatch(
                    f"line {line_no}: expected {len(schema)} cells, found {len(row)}"
                )
            parsed.append([_parse_cell(cell, spec, line_no) for cell, spec in zip(row, schema)])
    if not parsed:
        raise EmptyFile(f"{csv_path}: no data rows")

    feature_specs = [c for c in schema if c.role == "feature"]
    cols = list(zip(*parsed))
    col_by_name = {spec.name: cols[j] for j, spec in enumerate(schema)}

    numeric_cols = []
    labels = {}
    for spec in feature_specs:
        if spec.kind == "categorical":
            labels[spec.name] = np.array(col_by_name[spec.name], dtype=object)
        else:
            numeric_cols.append(np.array(col_by_name[spec.name], dtype=np.float64))
    rows = (
        np.column_stack(numeric_cols)
        if numeric_cols
        else np.empty((len(parsed), 0), dtype=np.float64)
    )
    targets = np.array(col_by_name[targets_specs[0].name], dtype=np.float64)
    run_spec = [c for c in schema if c.role == "run_id"]
    pos_spec = [c for c in schema if c.role == "position_id"]
    run_ids = np.array(col_by_name[run_spec[0].name], dtype=object) if run_spec else None
    positions = (
        np.array(col_by_name[pos_spec[0].name], dtype=np.int64) if pos_spec else None
    )
    return Dataset(
        columns=tuple(feature_specs),
        rows=rows,
        targets=targets,
        run_ids=run_ids,
        positions=positions,
        labels=labels,
    )


# ---------------------------------------------------------------------------
# preprocessing


def binary_code_map(categories: Sequence[str]) -> dict[str, int]:
    """Lexicographic category order -> integer code, stable across runs."""
    return {cat: i for i, cat in enumerate(sorted(set(categories)))}


def bits_for(n_categories: int) -> int:
    if n_categories < 1:
        raise InvalidConfig("need at least one category")
    return max(1, math.ceil(math.log2(n_categories))) if n_categories > 1 else 0


def preprocess(
    ds: Dataset,
    embeddings: Mapping[str, np.ndarray] | Any | None = None,
    on_zero_variance: str = "error",
) -> Dataset:
    """Encode a raw dataset for model fitting.

    Continuous and integer feature columns marked ``standardize`` are
    centered and scaled by the population sd (the transform is recorded
    in ``scaling`` and is reversible).  ``binary_encode`` categoricals
    expand to ceil(log2 k) bit columns, least significant bit first,
    with a lexicographic category -> code map.  ``embedding_ref``
    categoricals expand to their embedding coordinates; pass the table
    as a mapping or an object with a ``vectors`` attribute.  Targets are
    left untouched.  Constant columns raise ZeroVariance, or are dropped
    when ``on_zero_variance='drop'``.
    """
    if on_zero_variance not in ("error", "drop"):
        raise InvalidConfig("on_zero_variance must be 'error' or 'drop'")
    if hasattr(embeddings, "names") and hasattr(embeddings, "vectors"):
        table = {n: v for n, v in zip(embeddings.names, embeddings.vectors)}
    else:
        table = embeddings

    out_specs: list[ColumnSpec] = []
    out_cols: list[np.ndarray] = []
    scaling: dict[str, tuple[float, float]] = {}
    numeric_index = {c.name: j for j, c in enumerate(ds.numeric_columns)}

    for spec in ds.columns:
        if spec.kind != "categorical":
            col = ds.rows[:, numeric_index[spec.name]]
            if spec.encoding == "standardize":
                mu = float(np.mean(col))
                sd = float(np.std(col))
                if sd == 0.0:
                    if on_zero_variance == "drop":
                        continue
                    raise ZeroVariance(f"column {spec.name!r} is constant")
                out_specs.append(ColumnSpec(spec.name, spec.kind, "feature", "none"))
                out_cols.append((col - mu) / sd)
                scaling[spec.name] = (mu, sd)
            else:
                out_specs.append(spec)
                out_cols.append(col.copy())
            continue

        cats = sorted(set(ds.labels[spec.name].tolist()))
        if len(cats) < 2:
            if on_zero_variance == "drop":
                continue
            raise ZeroVariance(f"categorical column {spec.name!r} has a single level")
        if spec.encoding == "binary_encode":
            code = binary_code_map(cats)
            codes = np.array([code[v] for v in ds.labels[spec.name]], dtype=np.int64)
            width = bits_for(len(cats))
            for b in range(width):
                out_specs.append(
                    ColumnSpec(f"{spec.name}_b{b}", "binary", "feature", "none")
                )
                out_cols.append(((codes >> b) & 1).astype(np.float64))
        elif spec.encoding == "embedding_ref":
            if table is None:
                raise InvalidConfig(
                    f"column {spec.name!r} needs an embedding table"
                )
            missing = [c for c in cats if c not in table]
            if missing:
                raise InvalidConfig(
                    f"no embedding for category {missing[0]!r} in column {spec.name!r}"
                )
            dim = len(np.asarray(table[cats[0]]))
            mat = np.empty((ds.n_rows, dim), dtype=np.float64)
            vecs = {c: np.asarray(table[c], dtype=np.float64) for c in cats}
            for i, lab in enumerate(ds.labels[spec.name]):
                mat[i] = vecs[lab]
            for d in range(dim):
                out_specs.append(
                    ColumnSpec(f"{spec.name}_e{d}", "continuous", "feature", "none")
                )
                out_cols.append(mat[:, d])
        else:
            raise InvalidConfig(
                f"categorical column {spec.name!r} has no usable encoding"
            )

    rows = (
        np.column_stack(out_cols)
        if out_cols
        else np.empty((ds.n_rows, 0), dtype=np.float64)
    )
    return Dataset(
        columns=tuple(out_specs),
        rows=rows,
        targets=ds.targets.copy(),
        run_ids=None if ds.run_ids is None else ds.run_ids.copy(),
        positions=None if ds.positions is None else ds.positions.copy(),
        labels={k: v.copy() for k, v in ds.labels.items()},
        scaling=scaling or None,
    )


def inverse_transform(ds: Dataset) -> dict[str, np.ndarray]:
    """Recover raw values of standardized columns from stored scaling."""
    if not ds.scaling:
        return {}
    out = {}
    for name, (mu, sd) in ds.scaling.items():
        out[name] = ds.column_values(name) * sd + mu
    return out


# ---------------------------------------------------------------------------
# run ranking


@dataclass(frozen=True)
class RunSummary:
    run_id: str
    n: int
    mean: float
    sd: float
    deviation: float
    in_band: bool
    rank: int

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "n": self.n,
            "mean": self.mean,
            "sd": self.sd,
            "deviation": self.deviation,
            "in_band": self.in_band,
            "rank": self.rank,
        }


def rank_runs(ds: Dataset, nominal: float, tolerance: float) -> list[RunSummary]:
    """Order runs by closeness to the nominal target.

    Runs whose mean lies inside the tolerance band come first, most
    stable (lowest sample sd) leading; out-of-band runs follow, nearest
    mean first.  Ties fall back to run id.  Single-measurement runs get
    sd 0.
    """
    if not tolerance > 0:
        raise InvalidConfig("tolerance must be positive")
    if ds.run_ids is None:
        raise InvalidConfig("dataset has no run identifiers")
    groups: dict[str, list[float]] = {}
    for rid, y in zip(ds.run_ids, ds.targets):
        groups.setdefault(str(rid), []).append(float(y))
    entries = []
    for rid, ys in groups.items():
        arr = np.asarray(ys)
        mean = float(arr.mean())
        sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        dev = abs(mean - nominal)
        entries.append((rid, len(arr), mean, sd, dev, dev <= tolerance))
    in_band = sorted(
        (e for e in entries if e[5]), key=lambda e: (e[3], e[4], e[0])
    )
    out_band = sorted(
        (e for e in entries if not e[5]), key=lambda e: (e[4], e[3], e[0])
    )
    ranked = in_band + out_band
    return [
        RunSummary(run_id=e[0], n=e[1], mean=e[2], sd=e[3], deviation=e[4], in_band=e[5], rank=i + 1)
        for i, e in enumerate(ranked)
    ]


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class FeatureSpec:
    """Sampling law for one synthetic feature column."""

    name: str
    family: str
    params: tuple[tuple[str, float], ...]

    @classmethod
    def make(cls, name: str, family: str, **params: float) -> "FeatureSpec":
        return cls(name=name, family=family, params=tuple(sorted(params.items())))

    @property
    def p(self) -> dict[str, float]:
        return dict(self.params)


_FAMILY_KINDS = {
    "normal": "continuous",
    "logistic": "continuous",
    "cauchy": "continuous",
    "negative_binomial": "integer",
    "binomial": "binary",
    "discrete_uniform": "integer",
}


def _feature_center_scale(fs: FeatureSpec) -> tuple[float, float | None]:
    """(center, sd) of the configured law; sd None when undefined.

    The center is the mean where it exists and the location parameter
    for the heavy-tailed family, which has no mean.
    """
    p = fs.p
    if fs.family == "normal":
        return p["mu"], p["sigma"]
    if fs.family == "logistic":
        return p["mu"], p["s"] * math.pi / math.sqrt(3.0)
    if fs.family == "cauchy":
        return p["x0"], None
    if fs.family == "negative_binomial":
        r, q = p["r"], p["p"]
        return r * (1 - q) / q, math.sqrt(r * (1 - q)) / q
    if fs.family == "binomial":
        return p["p"], math.sqrt(p["p"] * (1 - p["p"]))
    if fs.family == "discrete_uniform":
        a, b = p["a"], p["b"]
        m = b - a + 1
        return (a + b) / 2.0, math.sqrt((m * m - 1) / 12.0)
    raise InvalidConfig(f"unknown feature family {fs.family!r}")


def _sample_feature(fs: FeatureSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    p = fs.p
    if fs.family == "normal":
        return p["mu"] + p["sigma"] * rng.standard_normal(n)
    if fs.family == "logistic":
        u = rng.random(n)
        return p["mu"] + p["s"] * (np.log(u) - np.log1p(-u))
    if fs.family == "cauchy":
        u = rng.random(n)
        return p["x0"] + p["gamma"] * np.tan(np.pi * (u - 0.5))
    if fs.family == "negative_binomial":
        r, q = p["r"], p["p"]
        lam = rng.gamma(shape=r, scale=(1 - q) / q, size=n)
        return rng.poisson(lam).astype(np.float64)
    if fs.family == "binomial":
        return (rng.random(n) < p["p"]).astype(np.float64)
    if fs.family == "discrete_uniform":
        a, b = int(p["a"]), int(p["b"])
        return rng.integers(a, b + 1, size=n).astype(np.float64)
    raise InvalidConfig(f"unknown feature family {fs.family!r}")


DEFAULT_FEATURES = (
    FeatureSpec.make("pieces", "negative_binomial", r=2.322, p=0.009),
    FeatureSpec.make("position", "discrete_uniform", a=7, b=42),
    FeatureSpec.make("area", "logistic", mu=1763.0, s=214.22),
    FeatureSpec.make("total_area", "logistic", mu=80034.27, s=3687.89),
    FeatureSpec.make("area_sd", "cauchy", x0=578.56, gamma=30.15),
    FeatureSpec.make("area_diff", "normal", mu=4865.79, sigma=3016.8),
)

DEFAULT_PROPORTIONS = (26.77, 57.36, 8.06, 22.75)
DEFAULT_CLUSTER_NAMES = ("triangular", "rhomboid", "circular", "rectangular")
DEFAULT_CLUSTER_OFFSETS = (0.12, -0.10, 0.37, 0.01)

_SHAPE_CATEGORIES = {
    "triangular": ("tri_a", "tri_b", "tri_c"),
    "rhomboid": ("rho_a", "rho_b", "rho_c", "rho_d"),
    "circular": ("cir_a", "cir_b"),
    "rectangular": ("rec_a", "rec_b", "rec_c"),
}

# Logistic noise scale giving a noise sd near 10% of the signal sd under
# the default feature laws and coefficients (signal sd 0.750 on 2e5 draws).
DEFAULT_NOISE_SCALE = 0.0414


@dataclass(frozen=True)
class GeneratorConfig:
    n_rows: int = 4000
    proportions: tuple[float, ...] = DEFAULT_PROPORTIONS
    cluster_names: tuple[str, ...] = DEFAULT_CLUSTER_NAMES
    cluster_offsets: tuple[float, ...] = DEFAULT_CLUSTER_OFFSETS
    features: tuple[FeatureSpec, ...] = DEFAULT_FEATURES
    include_geometry: bool = True
    geometry_encoding: str = "embedding_ref"
    embedding_dim: int = 3
    embedding_jitter: float = 0.08
    signal: tuple[tuple[str, float], ...] = (("area", 1.0), ("pieces", 0.7))
    interaction: float = 0.4
    base_level: float = 6.2
    noise_scale: float = DEFAULT_NOISE_SCALE
    measurements_per_run: int = 15

    def validate(self) -> None:
        if self.n_rows < 1:
            raise InvalidConfig("n_rows must be >= 1")
        if len(self.proportions) != len(self.cluster_names):
            raise InvalidConfig("one proportion per cluster name required")
        if len(self.cluster_offsets) != len(self.cluster_names):
            raise InvalidConfig("one offset per cluster name required")
        if any(p <= 0 for p in self.proportions):
            raise InvalidConfig("proportions must be positive")
        if self.noise_scale < 0:
            raise InvalidConfig("noise_scale must be >= 0")
        if self.measurements_per_run < 1:
            raise InvalidConfig("measurements_per_run must be >= 1")
        if self.geometry_encoding not in ("embedding_ref", "binary_encode"):
            raise InvalidConfig("geometry_encoding must be embedding_ref or binary_encode")
        if self.embedding_dim < 2:
            raise InvalidConfig("embedding_dim must be >= 2")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise InvalidConfig("duplicate feature names")
        for fname, _ in self.signal:
            if fname not in names:
                raise InvalidConfig(f"signal feature {fname!r} is not a configured feature")
        if self.include_geometry and len(self.cluster_names) != 4:
            raise InvalidConfig("the bundled shape catalogue covers exactly 4 clusters")
        for f in self.features:
            _feature_center_scale(f)


@dataclass
class GroundTruth:
    """Everything the generator knows, recorded for later scoring."""

    seed: int
    features: dict[str, dict]
    signal: dict[str, float]
    interaction: float
    base_level: float
    noise: dict
    target_function: str
    proportions_raw: list[float]
    proportions: list[float]
    proportions_renormalized: bool
    cluster_names: list[str]
    cluster_counts: list[int]
    cluster_offsets: list[float]
    cluster_labels: list[int]
    category_cluster: dict[str, str]
    embeddings: dict[str, list[float]]

    def to_dict(self) -> dict:
        return json_ready(
            {
                "seed": self.seed,
                "features": self.features,
                "signal": self.signal,
                "interaction": self.interaction,
                "base_level": self.base_level,
                "noise": self.noise,
                "target_function": self.target_function,
                "proportions_raw": self.proportions_raw,
                "proportions": self.proportions,
                "proportions_renormalized": self.proportions_renormalized,
                "cluster_names": self.cluster_names,
                "cluster_counts": self.cluster_counts,
                "cluster_offsets": self.cluster_offsets,
                "cluster_labels": self.cluster_labels,
                "category_cluster": self.category_cluster,
                "embeddings": self.embeddings,
            }
        )


def largest_remainder_counts(proportions: Sequence[float], n: int) -> list[int]:
    """Integer counts summing to n, each within 1 of n*p."""
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    exact = p * n
    base = np.floor(exact).astype(np.int64)
    short = n - int(base.sum())
    order = np.argsort(-(exact - base), kind="stable")
    for k in range(short):
        base[order[k]] += 1
    return [int(c) for c in base]


def _tetrahedral_directions(k: int, dim: int) -> np.ndarray:
    """k well-spread unit directions; exact simplex for k <= dim + 1."""
    if k <= dim + 1:
        # vertices of a regular simplex centred at the origin
        basis = np.eye(k)
        centred = basis - basis.mean(axis=0)
        u, s, _ = np.linalg.svd(centred, full_matrices=False)
        pts = u[:, : dim if dim <= k - 1 else k - 1]
        out = np.zeros((k, dim))
        out[:, : pts.shape[1]] = pts
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return out / np.where(norms == 0, 1.0, norms)
    rng = np.random.default_rng(12345)
    v = rng.standard_normal((k, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(cfg: GeneratorConfig, seed: int) -> tuple[Dataset, GroundTruth]:
    """Draw a dataset with known structure.

    Column j is sampled from stream (seed, j) so per-column generation
    is order-independent.  Cluster counts follow the renormalized
    proportions by largest-remainder rounding, so they sit within one
    row of the exact expectations.  The target is a smooth sparse
    function of the signal features plus one interaction, a per-cluster
    offset when the shape column is enabled, and logistic noise.
    """
    cfg.validate()
    n = cfg.n_rows
    k = len(cfg.cluster_names)

    raw = list(cfg.proportions)
    total = sum(raw)
    props = [p / total for p in raw]
    renorm = abs(total - 100.0) > 1e-9 and abs(total - 1.0) > 1e-9
    counts = largest_remainder_counts(props, n)
    labels_idx = np.repeat(np.arange(k), counts)
    labels_idx = labels_idx[child_rng(seed, "cluster_assign").permutation(n)]

    feature_cols = {}
    for j, fs in enumerate(cfg.features):
        feature_cols[fs.name] = _sample_feature(fs, n, child_rng(seed, j))

    centers = {fs.name: _feature_center_scale(fs) for fs in cfg.features}
    signal = dict(cfg.signal)

    def _z(name: str) -> np.ndarray:
        c, s = centers[name]
        if s is None:
            raise InvalidConfig(f"signal feature {name!r} has no finite scale")
        return (feature_cols[name] - c) / s

    sig_names = list(signal)
    comp = {name: np.tanh(_z(name)) for name in sig_names}
    y = np.full(n, cfg.base_level, dtype=np.float64)
    for name in sig_names:
        y += signal[name] * comp[name]
    if cfg.interaction != 0.0 and len(sig_names) >= 2:
        y += cfg.interaction * comp[sig_names[0]] * comp[sig_names[1]]

    category_cluster: dict[str, str] = {}
    embeddings: dict[str, list[float]] = {}
    geo_labels = None
    if cfg.include_geometry:
        y += np.asarray(cfg.cluster_offsets)[labels_idx]
        cat_rng = child_rng(seed, "categories")
        cats_per_cluster = [_SHAPE_CATEGORIES[nm] for nm in cfg.cluster_names]
        geo_labels = np.empty(n, dtype=object)
        for ci in range(k):
            mask = labels_idx == ci
            cats = cats_per_cluster[ci]
            pick = cat_rng.integers(0, len(cats), size=int(mask.sum()))
            geo_labels[mask] = np.asarray(cats, dtype=object)[pick]
            for c in cats:
                category_cluster[c] = cfg.cluster_names[ci]
        dirs = _tetrahedral_directions(k, cfg.embedding_dim)
        emb_rng = child_rng(seed, "embeddings")
        for ci in range(k):
            for c in cats_per_cluster[ci]:
                v = dirs[ci] + cfg.embedding_jitter * emb_rng.standard_normal(cfg.embedding_dim)
                v = v / np.linalg.norm(v)
                embeddings[c] = [float(t) for t in v]

    if cfg.noise_scale > 0:
        u = child_rng(seed, "noise").random(n)
        y += cfg.noise_scale * (np.log(u) - np.log1p(-u))

    run_len = cfg.measurements_per_run
    n_runs = math.ceil(n / run_len)
    width = max(4, len(str(n_runs)))
    run_ids = np.array(
        [f"R{(i // run_len) + 1:0{width}d}" for i in range(n)], dtype=object
    )

    specs = [
        ColumnSpec(fs.name, _FAMILY_KINDS[fs.family], "feature", "standardize")
        for fs in cfg.features
    ]
    labels = {}
    if cfg.include_geometry:
        specs.append(ColumnSpec("shape", "categorical", "feature", cfg.geometry_encoding))
        labels["shape"] = geo_labels

    rows = np.column_stack([feature_cols[fs.name] for fs in cfg.features])
    ds = Dataset(
        columns=tuple(specs),
        rows=rows,
        targets=y,
        run_ids=run_ids,
        labels=labels,
    )

    feat_truth = {}
    for fs in cfg.features:
        c, s = centers[fs.name]
        feat_truth[fs.name] = {
            "family": fs.family,
            "params": fs.p,
            "center": c,
            "sd": s,
        }
    terms = [f"{cfg.base_level}"]
    for name in sig_names:
        terms.append(f"{signal[name]}*tanh(z_{name})")
    if cfg.interaction != 0.0 and len(sig_names) >= 2:
        terms.append(f"{cfg.interaction}*tanh(z_{sig_names[0]})*tanh(z_{sig_names[1]})")
    if cfg.include_geometry:
        terms.append("cluster_offset")
    terms.append(f"Logistic(0, {cfg.noise_scale})")
    truth = GroundTruth(
        seed=seed,
        features=feat_truth,
        signal=signal,
        interaction=cfg.interaction if len(sig_names) >= 2 else 0.0,
        base_level=cfg.base_level,
        noise={"family": "logistic", "mu": 0.0, "s": cfg.noise_scale},
        target_function=" + ".join(terms),
        proportions_raw=raw,
        proportions=props,
        proportions_renormalized=renorm,
        cluster_names=list(cfg.cluster_names),
        cluster_counts=counts,
        cluster_offsets=list(cfg.cluster_offsets),
        cluster_labels=[int(v) for v in labels_idx],
        category_cluster=category_cluster,
        embeddings=embeddings,
    )
    return ds, truth


# ---------------------------------------------------------------------------
# writers


def _format_cell(v, spec: ColumnSpec) -> str:
    if spec.kind == "categorical" or spec.role == "run_id":
        return str(v)
    if spec.kind in ("integer", "binary") or spec.role == "position_id":
        return str(int(v))
    return repr(float(v))


def write_dataset(
    ds: Dataset,
    csv_path,
    schema_path,
    target_name: str = "thickness",
) -> list[ColumnSpec]:
    """Emit CSV plus schema JSON; returns the full column order written."""
    specs: list[ColumnSpec] = list(ds.columns)
    cols: list[np.ndarray] = []
    for spec in ds.columns:
        cols.append(ds.column_values(spec.name))
    if ds.run_ids is not None:
        specs.append(ColumnSpec("run_id", "categorical", "run_id", "none"))
        cols.append(ds.run_ids)
    if ds.positions is not None:
        specs.append(ColumnSpec("position_id", "integer", "position_id", "none"))
        cols.append(ds.positions)
    specs.append(ColumnSpec(target_name, "continuous", "target", "none"))
    cols.append(ds.targets)

    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([s.name for s in specs])
        for i in range(ds.n_rows):
            w.writerow([_format_cell(col[i], spec) for col, spec in zip(cols, specs)])
    dump_json({"columns": [s.to_dict() for s in specs]}, schema_path)
    return specs


def write_embeddings_tsv(embeddings: Mapping[str, Sequence[float]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for label in sorted(embeddings):
            vec = "\t".join(repr(float(v)) for v in embeddings[label])
            fh.write(f"{label}\t{vec}\n")


def write_ground_truth(truth: GroundTruth, path) -> None:
    dump_json(truth.to_dict(), path)
