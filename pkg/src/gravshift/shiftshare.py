"""Industry net exports, their regional shift-share aggregates, and quantile
cohort time series."""

from __future__ import annotations

import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .datamodel import IndustryNetExportSeries, RegionExposure

OBSERVED = "observed"
GIV = "giv"


class ShiftShareError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftShareChange:
    region: str
    period: tuple[int, int]
    value: float
    kind: str = OBSERVED

    def __post_init__(self) -> None:
        t1, t2 = self.period
        if not t1 < t2:
            raise ShiftShareError(f"period must satisfy t1 < t2, got {self.period}")
        if not math.isfinite(self.value):
            raise ShiftShareError(f"non-finite shift-share value for region {self.region}")


@dataclass(frozen=True)
class CohortSeries:
    group: int
    values: Mapping[int, float]
    units: tuple[str, ...]
    base_year: int | None = None


def build_net_export(exports: Mapping[tuple[str, int], float], imports: Mapping[tuple[str, int], float],
                     base_production: Mapping[str, float]) -> list[IndustryNetExportSeries]:
    """(export - import) / base-year production for every industry-year.

    Keys are (industry, year).  An industry-year present on only one side
    has zero trade on the other.
    """
    out = []
    for ind, year in sorted(set(exports) | set(imports)):
        y0 = base_production.get(ind)
        if y0 is None or not y0 > 0:
            raise ShiftShareError(f"missing or non-positive base production for industry {ind}")
        ratio = (exports.get((ind, year), 0.0) - imports.get((ind, year), 0.0)) / y0
        out.append(IndustryNetExportSeries(ind, year, ratio, y0))
    return out


def aggregate_region(series: Iterable[IndustryNetExportSeries], exposures: Iterable[RegionExposure], t1: int, t2: int,
                     lag: int = 1, kind: str = OBSERVED) -> dict[str, ShiftShareChange]:
    """Employment-share weighted change in industry net exports, per region.

    Shares must come from year ``t1 - lag``.  Industries with zero share are
    ignored even if their series is missing.
    """
    if lag < 0:
        raise ShiftShareError(f"lag must be non-negative, got {lag}")
    level = {(s.industry, s.year): s.net_export_ratio for s in series}
    base = t1 - lag
    by_region: dict[str, list[RegionExposure]] = defaultdict(list)
    for e in exposures:
        if e.base_year != base:
            raise ShiftShareError(
                f"exposure for region {e.region} uses base year {e.base_year}, expected {base} (t1={t1}, lag={lag})")
        by_region[e.region].append(e)

    out = {}
    for region in sorted(by_region):
        missing = sorted({e.industry for e in by_region[region] if e.share > 0
                          and ((e.industry, t1) not in level or (e.industry, t2) not in level)})
        if missing:
            raise ShiftShareError(f"region {region}: no net-export value in {t1} or {t2} for industries {missing}")
        value = 0.0
        for e in by_region[region]:  # plain accumulation in input order
            if e.share > 0:
                value += e.share * (level[(e.industry, t2)] - level[(e.industry, t1)])
        out[region] = ShiftShareChange(region, (t1, t2), value, kind)
    return out


def annualize(value: float | ShiftShareChange, years: int | None = None) -> float:
    """Linear annualization: the multi-year change divided by its length.

    With a :class:`ShiftShareChange` the length defaults to ``t2 - t1``.
    """
    if isinstance(value, ShiftShareChange):
        if years is None:
            years = value.period[1] - value.period[0]
        value = value.value
    if years is None or years < 1:
        raise ShiftShareError(f"annualization needs years >= 1, got {years}")
    return value / years


def quantile_groups(sort_key: Mapping[str, float], groups: int) -> list[tuple[str, ...]]:
    """Split units into ``groups`` near-equal groups, lowest key first.

    Ties are broken by unit id.  Group sizes differ by at most one.
    """
    if groups < 1:
        raise ShiftShareError("need at least one group")
    units = sorted(sort_key, key=lambda u: (sort_key[u], u))
    if len(units) < groups:
        raise ShiftShareError(f"{len(units)} units cannot fill {groups} groups")
    return [tuple(chunk) for chunk in np.array_split(np.array(units, dtype=object), groups)]


def cohort_series(values: Mapping[tuple[str, int], float], sort_key: Mapping[str, float],
                  weights: Mapping[tuple[str, int], float], groups: int = 5,
                  base_year: int | None = None) -> list[CohortSeries]:
    """Weighted mean of ``values`` per quantile group and year.

    ``values`` and ``weights`` are keyed by (unit, year).  With
    ``base_year`` every series is divided by its own base-year value.
    """
    bad = [k for k, w in weights.items() if not w > 0]
    if bad:
        raise ShiftShareError(f"weights must be positive; bad keys {bad[:5]}")
    years = sorted({y for _, y in values})
    out = []
    for g, members in enumerate(quantile_groups(sort_key, groups), start=1):
        series = {}
        for year in years:
            num = den = 0.0
            for u in members:
                if (u, year) in values:
                    w = weights[(u, year)]
                    num += w * values[(u, year)]
                    den += w
            if den > 0:
                series[year] = num / den
        if base_year is not None:
            ref = series.get(base_year)
            if ref is None or ref == 0:
                raise ShiftShareError(f"group {g} has no usable value in base year {base_year}")
            series = {y: v / ref for y, v in series.items()}
        out.append(CohortSeries(g, series, tuple(members), base_year))
    return out


def changes_to_rows(changes: Sequence[ShiftShareChange]) -> list[tuple[str, str, float, str]]:
    """Tidy (region, period, value, kind) rows; period rendered as ``t1-t2``."""
    return [(c.region, f"{c.period[0]}-{c.period[1]}", c.value, c.kind) for c in changes]
