"""Domain records and the stacked-panel design builder.

Every record here is a frozen dataclass.  ``build_stacked_panel`` turns a list
of :class:`CountyPanelRow` plus a :class:`RegressionSpec` into the dense
arrays consumed by :mod:`gravshift.estimate`.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

CONST = "const"


class PanelError(ValueError):
    """Raised when a panel cannot be assembled into a design."""


@dataclass(frozen=True)
class TradeFlowRecord:
    exporter: str
    importer: str
    product: str
    year: int
    value: float

    def __post_init__(self) -> None:
        if not self.value >= 0:
            raise ValueError(f"trade value must be >= 0, got {self.value}")
        if self.exporter == self.importer:
            raise ValueError(f"exporter equals importer ({self.exporter})")


@dataclass(frozen=True)
class TariffRecord:
    """Ad-valorem gross tariff factor imposed by ``imposer`` on goods from ``partner``."""

    imposer: str
    partner: str
    product: str
    year: int
    gross_rate: float

    def __post_init__(self) -> None:
        if not self.gross_rate >= 1:
            raise ValueError(f"gross tariff rate must be >= 1, got {self.gross_rate}")


@dataclass(frozen=True)
class IndustryNetExportSeries:
    """Net exports of one industry-year scaled by base-year production."""

    industry: str
    year: int
    net_export_ratio: float
    base_production: float

    def __post_init__(self) -> None:
        if not self.base_production > 0:
            raise ValueError(f"base production must be > 0 for industry {self.industry}")


@dataclass(frozen=True)
class RegionExposure:
    region: str
    industry: str
    share: float
    base_year: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.share <= 1.0:
            raise ValueError(f"employment share must lie in [0, 1], got {self.share}")


def check_exposure_totals(exposures: Iterable[RegionExposure], tol: float = 1e-9) -> None:
    """Raise if the shares of any (region, base_year) add up to more than one."""
    totals: dict[tuple[str, int], float] = {}
    for e in exposures:
        key = (e.region, e.base_year)
        totals[key] = totals.get(key, 0.0) + e.share
    bad = {k: v for k, v in totals.items() if v > 1.0 + tol}
    if bad:
        raise ValueError(f"employment shares exceed 1 for {sorted(bad)}")


@dataclass(frozen=True)
class CountyPanelRow:
    """One county observation in one period.

    ``values`` holds every numeric column (outcomes, endogenous regressors,
    instruments, controls) by name; a :class:`RegressionSpec` picks which
    column plays which role.
    """

    unit: str
    cluster: str
    period: str
    values: Mapping[str, float]
    weight: float = 1.0
    flags: Mapping[str, bool] = field(default_factory=dict)

    def column(self, name: str) -> float:
        if name in self.values:
            return float(self.values[name])
        if name in self.flags:
            return float(bool(self.flags[name]))
        raise KeyError(name)


@dataclass(frozen=True)
class WinsorRule:
    lower: float = 0.005
    upper: float = 0.995
    per_period: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.lower < self.upper <= 1.0:
            raise ValueError(f"winsor quantiles must satisfy 0 <= lo < hi <= 1, got ({self.lower}, {self.upper})")


@dataclass(frozen=True)
class RegressionSpec:
    """Declarative description of a (possibly stacked) IV regression.

    ``flag_interaction`` names a boolean flag; when set, each endogenous
    regressor and each instrument gets an extra ``name*flag`` column, and the
    flag itself enters as a control.
    """

    outcome: str
    endogenous: tuple[str, ...]
    instruments: tuple[str, ...]
    controls: tuple[str, ...] = ()
    periods: tuple[str, ...] = ("all",)
    weight: str | None = None
    cluster: str = "cluster"
    winsor: WinsorRule | None = None
    interact_regressors: bool = True
    interact_controls: bool = True
    flag_interaction: str | None = None

    def __post_init__(self) -> None:
        for name in ("endogenous", "instruments", "controls", "periods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.periods:
            raise ValueError("a spec needs at least one period")
        if len(set(self.periods)) != len(self.periods):
            raise ValueError(f"duplicate periods in {self.periods}")

    @property
    def endogenous_columns(self) -> tuple[str, ...]:
        if self.flag_interaction is None:
            return self.endogenous
        return self.endogenous + tuple(f"{e}*{self.flag_interaction}" for e in self.endogenous)

    @property
    def instrument_columns(self) -> tuple[str, ...]:
        if self.flag_interaction is None:
            return self.instruments
        return self.instruments + tuple(f"{z}*{self.flag_interaction}" for z in self.instruments)

    @property
    def control_columns(self) -> tuple[str, ...]:
        if self.flag_interaction is None or self.flag_interaction in self.controls:
            return self.controls
        return self.controls + (self.flag_interaction,)


class Label(NamedTuple):
    """Structured coefficient label; ``period`` is None for pooled columns."""

    name: str
    period: str | None

    def __str__(self) -> str:
        return self.name if self.period is None else f"{self.name}[{self.period}]"


@dataclass(frozen=True)
class Design:
    """Dense design matrices for one regression.

    ``X`` holds every second-stage regressor (period intercepts, endogenous,
    controls) in display order; ``endog_idx`` marks the endogenous columns.
    ``Z`` holds only the excluded instruments.
    """

    y: np.ndarray
    X: np.ndarray
    labels: tuple[Label, ...]
    endog_idx: tuple[int, ...]
    Z: np.ndarray
    z_labels: tuple[Label, ...]
    weights: np.ndarray
    clusters: np.ndarray
    units: np.ndarray
    periods: np.ndarray
    outcome: str = "y"

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def exog_idx(self) -> tuple[int, ...]:
        endog = set(self.endog_idx)
        return tuple(i for i in range(self.X.shape[1]) if i not in endog)

    @property
    def exog(self) -> np.ndarray:
        return self.X[:, list(self.exog_idx)]

    @property
    def exog_labels(self) -> tuple[Label, ...]:
        return tuple(self.labels[i] for i in self.exog_idx)

    @property
    def endog(self) -> np.ndarray:
        return self.X[:, list(self.endog_idx)]

    @property
    def endog_labels(self) -> tuple[Label, ...]:
        return tuple(self.labels[i] for i in self.endog_idx)

    def with_outcome(self, y: np.ndarray, name: str) -> Design:
        return Design(y=np.asarray(y, dtype=float), X=self.X, labels=self.labels, endog_idx=self.endog_idx,
                      Z=self.Z, z_labels=self.z_labels, weights=self.weights, clusters=self.clusters,
                      units=self.units, periods=self.periods, outcome=name)


def _row_value(row: CountyPanelRow, name: str, flag: str | None) -> float:
    # Interaction columns are derived on the fly as base * flag.
    if flag is not None and name.endswith(f"*{flag}") and name not in row.values:
        base = name[: -len(flag) - 1]
        return row.column(base) * row.column(flag)
    return row.column(name)


def _expand(names: Sequence[str], raw: np.ndarray, dummies: np.ndarray, periods: Sequence[str],
            interact: bool) -> tuple[list[np.ndarray], list[Label]]:
    cols: list[np.ndarray] = []
    labels: list[Label] = []
    for j, name in enumerate(names):
        if interact:
            for p, period in enumerate(periods):
                cols.append(raw[:, j] * dummies[:, p])
                labels.append(Label(name, period))
        else:
            cols.append(raw[:, j].copy())
            labels.append(Label(name, None))
    return cols, labels


def build_stacked_panel(rows: Sequence[CountyPanelRow], spec: RegressionSpec) -> Design:
    """Assemble the stacked design for ``spec``.

    Period intercept dummies replace a global constant.  Rows whose period is
    not listed in the spec are ignored.  Row weights are used only when the
    spec names a weight; otherwise the fit is unweighted.
    """
    periods = list(spec.periods)
    selected = [r for r in rows if r.period in spec.periods]
    counts = {p: 0 for p in periods}
    seen: set[tuple[str, str]] = set()
    for r in selected:
        key = (r.unit, r.period)
        if key in seen:
            raise PanelError(f"duplicate (unit, period) pair {key}")
        seen.add(key)
        counts[r.period] += 1
    empty = [p for p, c in counts.items() if c == 0]
    if empty:
        raise PanelError(f"no rows for period(s) {empty}")

    flag = spec.flag_interaction
    endog_names = spec.endogenous_columns
    instr_names = spec.instrument_columns
    control_names = spec.control_columns
    if len(instr_names) < len(endog_names):
        raise PanelError(
            f"order condition fails: {len(instr_names)} instruments for {len(endog_names)} endogenous regressors")

    def matrix(names: Sequence[str]) -> np.ndarray:
        out = np.empty((len(selected), len(names)))
        for i, r in enumerate(selected):
            for j, name in enumerate(names):
                try:
                    out[i, j] = _row_value(r, name, flag)
                except KeyError:
                    raise PanelError(f"unknown column {name!r} (row {i}, unit {r.unit})") from None
        return out

    y = matrix([spec.outcome])[:, 0]
    endog_raw = matrix(endog_names)
    instr_raw = matrix(instr_names)
    ctrl_raw = matrix(control_names)
    for name, arr in (("outcome", y), ("endogenous", endog_raw), ("instruments", instr_raw),
                      ("controls", ctrl_raw)):
        if not np.all(np.isfinite(arr)):
            raise PanelError(f"missing or non-finite values among {name}")

    period_arr = np.array([r.period for r in selected], dtype=object)
    dummies = np.column_stack([(period_arr == p).astype(float) for p in periods])

    const_cols = [dummies[:, p] for p in range(len(periods))]
    const_labels = [Label(CONST, p) for p in periods]
    endog_cols, endog_labels = _expand(endog_names, endog_raw, dummies, periods, spec.interact_regressors)
    ctrl_cols, ctrl_labels = _expand(control_names, ctrl_raw, dummies, periods, spec.interact_controls)
    instr_cols, instr_labels = _expand(instr_names, instr_raw, dummies, periods, spec.interact_regressors)

    X = np.column_stack(const_cols + endog_cols + ctrl_cols)
    labels = tuple(const_labels + endog_labels + ctrl_labels)
    endog_idx = tuple(range(len(const_cols), len(const_cols) + len(endog_cols)))
    Z = np.column_stack(instr_cols) if instr_cols else np.empty((len(selected), 0))

    if spec.weight is None:
        weights = np.ones(len(selected))
    else:
        weights = np.array([r.weight for r in selected], dtype=float)
    if np.any(~(weights > 0)):
        raise PanelError("analytic weights must be strictly positive")
    return Design(
        y=y, X=X, labels=labels, endog_idx=endog_idx, Z=Z, z_labels=tuple(instr_labels),
        weights=weights,
        clusters=np.array([r.cluster for r in selected], dtype=object),
        units=np.array([r.unit for r in selected], dtype=object),
        periods=period_arr, outcome=spec.outcome,
    )


@dataclass(frozen=True)
class Violation:
    index: int
    unit: str
    period: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]
    clean: tuple[int, ...]
    dirty: tuple[int, ...]
    excludable: tuple[int, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_panel(rows: Sequence[CountyPanelRow], exclusion: Iterable[str] | None = None) -> ValidationReport:
    """Report rows that break the panel invariants; never modifies ``rows``.

    If ``exclusion`` (a collection of unit codes) is given, rows whose unit is
    listed are reported as excludable.  They are not counted as violations.
    """
    excluded = set(exclusion) if exclusion is not None else set()
    violations: list[Violation] = []
    seen: dict[tuple[str, str], int] = {}
    excludable: list[int] = []
    for i, r in enumerate(rows):
        msgs = []
        if not (isinstance(r.weight, (int, float)) and r.weight > 0):
            msgs.append("non-positive weight")
        for name, v in r.values.items():
            if v is None or (isinstance(v, float) and math.isnan(v)):
                msgs.append(f"missing value in {name}")
            elif isinstance(v, float) and not math.isfinite(v):
                msgs.append(f"non-finite value in {name}")
        key = (r.unit, r.period)
        if key in seen:
            msgs.append(f"duplicate (unit, period); first seen at row {seen[key]}")
        else:
            seen[key] = i
        violations.extend(Violation(i, r.unit, r.period, m) for m in msgs)
        if r.unit in excluded:
            excludable.append(i)
    dirty = sorted({v.index for v in violations})
    dirty_set = set(dirty)
    clean = tuple(i for i in range(len(rows)) if i not in dirty_set)
    return ValidationReport(tuple(violations), clean, tuple(dirty), tuple(excludable))
