"""Core tabular types, scenario configuration and file I/O.

A :class:`Dataset` holds the five analysis columns ``c1, c2, c3, a, y`` as
float arrays together with an explicit per-cell missingness mask.  Counts
include zero, so no numeric sentinel can mark a missing value; masked cells
additionally hold ``nan`` so accidental use is loud.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

COLUMNS = ("c1", "c2", "c3", "a", "y")
MASKABLE = ("c2", "c3", "a", "y")


class DataError(ValueError):
    """Raised for malformed or invariant-violating data."""


class ConfigError(ValueError):
    """Raised for invalid scenario configuration files."""


class MethodId(str, enum.Enum):
    UNADJUSTED = "unadjusted"
    ADJUSTED = "adjusted"
    MULTINOMIAL = "multinomial"
    CBPS = "cbps"
    NPCBPS = "npcbps"
    GBM = "gbm"
    ENERGY = "energy"

    @property
    def is_weighting(self) -> bool:
        return self not in (MethodId.UNADJUSTED, MethodId.ADJUSTED)

    def __str__(self) -> str:
        return self.value


WEIGHTING_METHODS = tuple(m for m in MethodId if m.is_weighting)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Columnar simulated or observed data with an explicit missingness mask.

    ``missing`` maps each of ``c2, c3, a, y`` to a boolean array; ``c1`` is
    never missing.  ``true_lambda`` and ``true_pi`` are the generating
    intermediates when the data were simulated.
    """

    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray
    a: np.ndarray
    y: np.ndarray
    missing: Mapping[str, np.ndarray] = field(default_factory=dict)
    true_lambda: np.ndarray | None = None
    true_pi: np.ndarray | None = None
    a_max: int = 10

    def __post_init__(self) -> None:
        n = len(self.c1)
        for name in COLUMNS:
            col = np.asarray(getattr(self, name), dtype=float)
            if col.shape != (n,):
                raise DataError(f"column {name} has shape {col.shape}, expected ({n},)")
            object.__setattr__(self, name, col)
        mask = {}
        for name in MASKABLE:
            m = self.missing.get(name) if self.missing else None
            m = np.zeros(n, dtype=bool) if m is None else np.asarray(m, dtype=bool)
            if m.shape != (n,):
                raise DataError(f"mask for {name} has wrong shape")
            mask[name] = _frozen(m)
        if self.missing and "c1" in self.missing and np.any(self.missing["c1"]):
            raise DataError("c1 must never be missing")
        object.__setattr__(self, "missing", mask)
        for name in COLUMNS:
            col = getattr(self, name).copy()
            if name in mask:
                col[mask[name]] = np.nan
            object.__setattr__(self, name, _frozen(col))
        for name in ("true_lambda", "true_pi"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _frozen(np.asarray(v, dtype=float)))
        validate_dataset(self)

    @property
    def n(self) -> int:
        return len(self.c1)

    def observed(self, name: str) -> np.ndarray:
        if name == "c1":
            return np.ones(self.n, dtype=bool)
        return ~self.missing[name]

    @property
    def incomplete_rows(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=bool)
        for m in self.missing.values():
            out |= m
        return out

    @property
    def is_complete(self) -> bool:
        return not bool(self.incomplete_rows.any())

    @property
    def covariates(self) -> np.ndarray:
        """``(n, 3)`` matrix of ``c1, c2, c3``."""
        return np.column_stack([self.c1, self.c2, self.c3])

    def column(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def with_columns(self, **changes: Any) -> "Dataset":
        return replace(self, **changes)

    def equals(self, other: "Dataset") -> bool:
        if self.n != other.n:
            return False
        for name in COLUMNS:
            if not np.array_equal(getattr(self, name), getattr(other, name), equal_nan=True):
                return False
        return all(np.array_equal(self.missing[k], other.missing[k]) for k in MASKABLE)


def validate_dataset(ds: Dataset) -> None:
    """Check the shared invariants every Dataset must satisfy."""
    for name in ("c1", "y"):
        col = getattr(ds, name)
        obs = ds.observed(name)
        bad = obs & ~np.isin(col, (0.0, 1.0))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataError(f"{name} must be 0 or 1 (row {row + 1}: {col[row]!r})")
    obs = ds.observed("a")
    a = ds.a[obs]
    if np.any(~np.isfinite(a)) or np.any(a < 0) or np.any(a != np.round(a)):
        raise DataError("a must be a non-negative integer where observed")
    if a.size and a.max() > ds.a_max:
        raise DataError(f"a exceeds a_max={ds.a_max}")
    for name in ("c2", "c3"):
        col = getattr(ds, name)
        if np.any(~np.isfinite(col[ds.observed(name)])):
            raise DataError(f"{name} has non-finite observed values")
    if ds.true_pi is not None:
        if ds.true_pi.shape != (ds.n,) or np.any((ds.true_pi <= 0) | (ds.true_pi >= 1)):
            raise DataError("true_pi must lie in (0, 1)")
    if ds.true_lambda is not None and np.any(ds.true_lambda <= 0):
        raise DataError("true_lambda must be positive")


def read_dataset_csv(path: str | Path, a_max: int = 10) -> Dataset:
    """Read a Dataset from CSV; empty cells are missing.

    The header may name any subset of ``c1,c2,c3,a,y`` that includes ``c1``;
    absent columns are treated as entirely missing.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        unknown = set(header) - set(COLUMNS)
        if unknown:
            raise DataError(f"{path}: unknown column(s) {sorted(unknown)}")
        if "c1" not in header:
            raise DataError(f"{path}: column c1 is required and may not be missing")
        values: dict[str, list[float]] = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    if name == "c1":
                        raise DataError(f"{path}:{lineno}: c1 is missing")
                    values[name].append(math.nan)
                    continue
                try:
                    values[name].append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: cannot parse {cell!r} in column {name}"
                    ) from None
    n = len(values["c1"])
    cols = {}
    missing = {}
    for name in COLUMNS:
        if name in values:
            arr = np.asarray(values[name], dtype=float).reshape(n)
        else:
            arr = np.full(n, np.nan)
        cols[name] = arr
        if name in MASKABLE:
            missing[name] = np.isnan(arr)
    return Dataset(**cols, missing=missing, a_max=a_max)


def _fmt(x: float, integer: bool) -> str:
    if integer:
        return str(int(x))
    return repr(float(x))


def write_dataset_csv(ds: Dataset, path: str | Path) -> None:
    """Write ``c1,c2,c3,a,y`` with empty cells for missing entries."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            fh.write(",".join(COLUMNS) + "\n")
            integer_cols = {"c1", "a", "y"}
            cols = [getattr(ds, c) for c in COLUMNS]
            masks = [ds.missing.get(c) for c in COLUMNS]
            for i in range(ds.n):
                cells = []
                for name, col, m in zip(COLUMNS, cols, masks):
                    if m is not None and m[i]:
                        cells.append("")
                    else:
                        cells.append(_fmt(col[i], name in integer_cols))
                fh.write(",".join(cells) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


# --------------------------------------------------------------------------
# Scenario configuration
# --------------------------------------------------------------------------

EXPOSURE_DGMS = ("negbin", "poisson")
MISSINGNESS = ("none", "mcar", "mar", "mar_no_exposure")


@dataclass(frozen=True)
class GbmSettings:
    shrinkage: float = 0.05
    max_depth: int = 3
    min_node: int = 10
    max_trees: int = 2000
    eval_every: int = 1
    numerator: str = "normal"  # or "kde"
    max_splits: int = 3  # splits per tree, grown best-first; 0 = full depth-limited tree

    def __post_init__(self) -> None:
        if self.numerator not in ("normal", "kde"):
            raise ConfigError("gbm.numerator must be 'normal' or 'kde'")


@dataclass(frozen=True)
class EnergySettings:
    tol: float = 1e-8
    max_iter: int = 10000
    algorithm: str = "lbfgsb"  # or "spg"

    def __post_init__(self) -> None:
        if self.algorithm not in ("lbfgsb", "spg"):
            raise ConfigError("energy.algorithm must be 'lbfgsb' or 'spg'")


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to replay one simulation scenario.

    ``diagnostics`` is ``"full"`` (ESS, correlations and energy metrics),
    ``"basic"`` (ESS and correlations only) or ``"none"``.  ``mi_quantile``
    selects Student-t (``"t"``) or normal quantiles for pooled intervals.
    """

    exposure_dgm: str
    true_rr: float
    methods: tuple[MethodId, ...]
    n_obs: int = 5000
    n_reps: int = 2000
    missingness: str = "none"
    phi_target: float = 0.0
    winsorize_percentile: float = 0.99
    seed: int = 20240101
    m_cap: int = 100
    mice_cycles: int = 10
    reference_n: int = 1_000_000
    a_max: int = 10
    scenario_id: str = ""
    diagnostics: str = "full"
    mi_quantile: str = "t"
    gbm: GbmSettings = GbmSettings()
    energy: EnergySettings = EnergySettings()

    def __post_init__(self) -> None:
        methods = tuple(MethodId(m) for m in self.methods)
        object.__setattr__(self, "methods", methods)
        if not self.scenario_id:
            tag = self.missingness if self.missingness == "none" else f"{self.missingness}{self.phi_target:g}"
            object.__setattr__(self, "scenario_id", f"{self.exposure_dgm}_rr{self.true_rr:g}_{tag}")
        _check_config(self)

    @property
    def theta_true(self) -> float:
        return math.log(self.true_rr)


def _check_config(cfg: ScenarioConfig) -> None:
    if cfg.exposure_dgm not in EXPOSURE_DGMS:
        raise ConfigError(f"exposure_dgm must be one of {EXPOSURE_DGMS}")
    if cfg.missingness not in MISSINGNESS:
        raise ConfigError(f"missingness must be one of {MISSINGNESS}")
    if not cfg.methods:
        raise ConfigError("methods must be non-empty")
    if not (cfg.true_rr > 0):
        raise ConfigError("true_rr must be positive")
    if not (0.0 <= cfg.phi_target < 1.0):
        raise ConfigError("phi_target must lie in [0, 1)")
    if (cfg.phi_target == 0.0) != (cfg.missingness == "none"):
        raise ConfigError("phi_target must be 0 exactly when missingness = none")
    if not (0.0 < cfg.winsorize_percentile <= 1.0):
        raise ConfigError("winsorize_percentile must lie in (0, 1]")
    for name in ("n_obs", "n_reps", "m_cap", "mice_cycles", "reference_n", "a_max"):
        if int(getattr(cfg, name)) < 1:
            raise ConfigError(f"{name} must be a positive integer")
    if not (0 <= cfg.seed < 2**64):
        raise ConfigError("seed must be a 64-bit unsigned integer")
    if cfg.diagnostics not in ("full", "basic", "none"):
        raise ConfigError("diagnostics must be full, basic or none")
    if cfg.mi_quantile not in ("t", "normal"):
        raise ConfigError("mi_quantile must be t or normal")


_SCALAR_KEYS = {f.name for f in fields(ScenarioConfig)} - {"gbm", "energy"}
_INT_KEYS = {"n_obs", "n_reps", "seed", "m_cap", "mice_cycles", "reference_n", "a_max"}


def config_from_mapping(raw: Mapping[str, Any]) -> ScenarioConfig:
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key == "gbm":
            kwargs["gbm"] = _sub_settings(GbmSettings, value, "gbm")
        elif key == "energy":
            kwargs["energy"] = _sub_settings(EnergySettings, value, "energy")
        elif key in _SCALAR_KEYS:
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key: {key}")
    for key in ("exposure_dgm", "true_rr", "methods"):
        if key not in kwargs:
            raise ConfigError(f"missing required config key: {key}")
    methods = kwargs["methods"]
    if isinstance(methods, Mapping):  # [methods] list = [...]
        methods = methods.get("list", [])
    if isinstance(methods, str):
        methods = [m.value for m in MethodId] if methods == "all" else [methods]
    try:
        kwargs["methods"] = tuple(MethodId(m) for m in methods)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for key in _INT_KEYS & kwargs.keys():
        if isinstance(kwargs[key], bool) or int(kwargs[key]) != kwargs[key]:
            raise ConfigError(f"{key} must be an integer")
        kwargs[key] = int(kwargs[key])
    for key in ("true_rr", "phi_target", "winsorize_percentile"):
        if key in kwargs:
            kwargs[key] = float(kwargs[key])
    return ScenarioConfig(**kwargs)


def _sub_settings(cls, value: Any, section: str):
    if not isinstance(value, Mapping):
        raise ConfigError(f"[{section}] must be a table")
    allowed = {f.name for f in fields(cls)}
    for key in value:
        if key not in allowed:
            raise ConfigError(f"unknown config key: {section}.{key}")
    return cls(**value)


def load_scenario_config(path: str | Path) -> ScenarioConfig:
    """Parse a TOML scenario file and apply defaults."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_mapping(raw)


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, Sequence):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {v!r}")


def dump_scenario_config(cfg: ScenarioConfig) -> str:
    lines = []
    for f in fields(cfg):
        if f.name in ("gbm", "energy"):
            continue
        value = getattr(cfg, f.name)
        if f.name == "methods":
            value = [m.value for m in value]
        lines.append(f"{f.name} = {_toml_value(value)}")
    for section in ("gbm", "energy"):
        sub = getattr(cfg, section)
        lines.append("")
        lines.append(f"[{section}]")
        for f in fields(sub):
            lines.append(f"{f.name} = {_toml_value(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def save_scenario_config(cfg: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(dump_scenario_config(cfg), encoding="utf-8")


# --------------------------------------------------------------------------
# Per-replication results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightDiagnostics:
    """Weight-quality summary for one weight vector (see ``diagnostics``)."""

    ess: float
    rho_w: tuple[float, ...]
    mean_abs_rho: float
    d_w: float = math.nan
    eps_a: float = math.nan
    eps_c: float = math.nan
    dcov_w: float = math.nan
    eps_c_joint: float = math.nan


@dataclass(frozen=True)
class ReplicationResult:
    rep_index: int
    method: MethodId
    winsorised: bool
    theta_hat: float
    var_hat: float
    ci_lo: float
    ci_hi: float
    diagnostics: WeightDiagnostics | None = None
    m_used: int = 1
    failed: bool = False
    error: str = ""

    def __post_init__(self) -> None:
        if not self.failed and self.var_hat > 0 and not (self.ci_lo <= self.theta_hat <= self.ci_hi):
            raise ValueError("confidence interval must bracket the estimate")

    @classmethod
    def failure(cls, rep_index: int, method: MethodId, winsorised: bool, error: str) -> "ReplicationResult":
        nan = math.nan
        return cls(rep_index, method, winsorised, nan, nan, nan, nan, None, 0, True, error)
