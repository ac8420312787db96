"""CSV ingestion and data hygiene: deflation, code crosswalks, mortgage
classification and sample exclusion."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .datamodel import CountyPanelRow, RegionExposure, TariffRecord, TradeFlowRecord

log = logging.getLogger(__name__)


class IngestError(ValueError):
    pass


class MissingIndexError(IngestError, KeyError):
    pass


# --------------------------------------------------------------------------
# price deflation


@dataclass(frozen=True)
class PriceIndexSeries:
    index: Mapping[int, float]
    base_year: int = 2007

    def __post_init__(self) -> None:
        object.__setattr__(self, "index", {int(k): float(v) for k, v in self.index.items()})
        if self.base_year not in self.index:
            raise IngestError(f"base year {self.base_year} missing from price index")
        bad = [y for y, v in self.index.items() if not v > 0]
        if bad:
            raise IngestError(f"price index must be positive; bad years {sorted(bad)}")

    def __getitem__(self, year: int) -> float:
        try:
            return self.index[int(year)]
        except KeyError:
            raise MissingIndexError(f"no price index value for year {year}") from None


def deflate(value: float, year: int, index: PriceIndexSeries) -> float:
    """Convert a nominal amount in ``year`` to base-year currency."""
    return value * index[index.base_year] / index[year]


# --------------------------------------------------------------------------
# crosswalks


@dataclass(frozen=True)
class CrosswalkTable:
    """Mapping from source codes to weighted target codes.

    In proportional mode the weights of each source must add to one.  In
    single-best mode each source maps to exactly one target with weight one.
    """

    entries: Mapping[str, tuple[tuple[str, float], ...]]
    direction: str = ""
    single_best: bool = False
    tol: float = 1e-9

    def __post_init__(self) -> None:
        entries = {str(s): tuple((str(t), float(w)) for t, w in ts) for s, ts in self.entries.items()}
        object.__setattr__(self, "entries", entries)
        for src, targets in entries.items():
            if not targets:
                raise IngestError(f"crosswalk source {src} has no targets")
            if any(not 0.0 <= w <= 1.0 for _, w in targets):
                raise IngestError(f"crosswalk weights for {src} must lie in [0, 1]")
            if self.single_best:
                if len(targets) != 1 or targets[0][1] != 1.0:
                    raise IngestError(f"single-best crosswalk needs exactly one weight-1 target for {src}")
            else:
                total = math.fsum(w for _, w in targets)
                if abs(total - 1.0) > self.tol:
                    raise IngestError(f"crosswalk weights for {src} sum {total:.12g}, expected 1")

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[str, str, float]], direction: str = "",
                     single_best: bool = False) -> CrosswalkTable:
        entries: dict[str, list[tuple[str, float]]] = {}
        for src, tgt, w in triples:
            entries.setdefault(str(src), []).append((str(tgt), float(w)))
        if single_best:
            return cls.best_of(entries, direction)
        return cls({k: tuple(v) for k, v in entries.items()}, direction=direction)

    @classmethod
    def best_of(cls, shares: Mapping[str, Sequence[tuple[str, float]]], direction: str = "") -> CrosswalkTable:
        """Keep only the highest value-share target per source (ties: lowest code)."""
        best = {}
        for src, targets in shares.items():
            tgt, _ = min(targets, key=lambda tw: (-tw[1], tw[0]))
            best[src] = ((tgt, 1.0),)
        return cls(best, direction=direction, single_best=True)

    def sources(self) -> set[str]:
        return set(self.entries)


def apply_crosswalk(series: Mapping[str, float], xw: CrosswalkTable, on_missing: str = "error") -> dict[str, float]:
    """Re-express ``series`` in target codes.

    ``on_missing`` is ``"error"`` or ``"drop"``; dropped sources are logged
    as a warning with their total value.
    """
    if on_missing not in ("error", "drop"):
        raise ValueError(f"on_missing must be 'error' or 'drop', got {on_missing!r}")
    out: dict[str, float] = {}
    missing = [s for s in series if s not in xw.entries]
    if missing:
        if on_missing == "error":
            raise IngestError(f"{len(missing)} source code(s) absent from crosswalk {xw.direction}: "
                              f"{sorted(missing)[:10]}")
        lost = math.fsum(series[s] for s in missing)
        log.warning("dropping %d unmapped source codes (value %.6g) in crosswalk %s",
                    len(missing), lost, xw.direction)
    for src, value in series.items():
        for tgt, w in xw.entries.get(src, ()):
            out[tgt] = out.get(tgt, 0.0) + value * w
    return out


# --------------------------------------------------------------------------
# mortgages


@dataclass(frozen=True)
class ConformingLimitTable:
    """One-unit conforming loan limits.

    ``national`` limits are used for years up to ``national_through`` when
    a county has no row of its own.
    """

    county: Mapping[tuple[int, str], float] = field(default_factory=dict)
    national: Mapping[int, float] = field(default_factory=dict)
    national_through: int = 2007

    def __post_init__(self) -> None:
        for v in list(self.county.values()) + list(self.national.values()):
            if not v > 0:
                raise IngestError("conforming loan limits must be positive")

    def limit(self, year: int, county: str) -> float:
        key = (int(year), str(county))
        if key in self.county:
            return self.county[key]
        if year <= self.national_through and int(year) in self.national:
            return self.national[int(year)]
        raise IngestError(f"no conforming loan limit for county {county} in {year}")


NON_JUMBO = "non-jumbo"
JUMBO = "jumbo"


def classify_mortgage(amount: float, year: int, county: str, limits: ConformingLimitTable) -> str:
    """Loans at or below the limit are non-jumbo."""
    return NON_JUMBO if amount <= limits.limit(year, county) else JUMBO


# --------------------------------------------------------------------------
# exclusions


@dataclass(frozen=True)
class ExclusionList:
    codes: frozenset[str]
    label: str = ""

    def __post_init__(self) -> None:
        codes = frozenset(str(c) for c in self.codes)
        bad = sorted(c for c in codes if len(c) != 5 or not c.isdigit())
        if bad:
            raise IngestError(f"exclusion codes must be 5-digit FIPS strings: {bad}")
        object.__setattr__(self, "codes", codes)

    def __contains__(self, code: object) -> bool:
        return code in self.codes

    def __len__(self) -> int:
        return len(self.codes)


HURRICANES_2005 = ExclusionList(
    frozenset({
        "12087",  # Monroe, FL
        "22023", "22051", "22071", "22075", "22087", "22103", "22113",  # LA parishes
        "28045", "28047", "28059", "28131",  # Hancock, Harrison, Jackson, Stone MS
    }),
    label="counties deeply affected by the 2005 hurricanes",
)


@dataclass(frozen=True)
class RemovalReport:
    n_input: int
    n_retained: int
    removed: tuple[str, ...]

    @property
    def n_removed(self) -> int:
        return len(self.removed)


def filter_excluded(units: Sequence[Any], exclusions: ExclusionList,
                    key: Callable[[Any], str] | None = None) -> tuple[list[Any], RemovalReport]:
    """Drop every unit whose code is listed, preserving order."""
    key = key or str
    kept, removed = [], []
    for u in units:
        (removed if key(u) in exclusions else kept).append(u)
    report = RemovalReport(len(units), len(kept), tuple(key(u) for u in removed))
    return kept, report


# --------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class Column:
    name: str
    type: type = str
    required: bool = True


Schema = Sequence[Column]


def _convert(raw: str, col: Column, rownum: int) -> Any:
    if col.type is str:
        return raw
    text = raw.strip()
    if text == "":
        if col.required:
            raise IngestError(f"row {rownum}: empty value in required column {col.name!r}")
        return None
    try:
        if col.type is bool:
            low = text.lower()
            if low in ("1", "true", "yes"):
                return True
            if low in ("0", "false", "no"):
                return False
            raise ValueError(text)
        if col.type is int:
            return int(text)
        return col.type(text)
    except ValueError:
        raise IngestError(f"row {rownum}: cannot parse {raw!r} as {col.type.__name__} "
                          f"in column {col.name!r}") from None


def read_csv_table(path: str | Path, schema: Schema, record: Callable[..., Any] | None = None) -> list[Any]:
    """Read a UTF-8 CSV with a header row.

    Rows are numbered from 2 (the header is row 1) in error messages.
    Extra columns are ignored.  With ``record``, each row dict is passed as
    keyword arguments; failures there are re-raised with the row number.
    """
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c.name for c in schema if c.required and c.name not in header]
        if missing:
            raise IngestError(f"{path}: missing required column(s) {missing}")
        for rownum, raw in enumerate(reader, start=2):
            row = {c.name: _convert(raw.get(c.name) or "", c, rownum) for c in schema if c.name in header}
            if record is None:
                out.append(row)
                continue
            try:
                out.append(record(**row))
            except (TypeError, ValueError) as exc:
                raise IngestError(f"{path}: row {rownum}: {exc}") from None
    return out


def write_csv_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v: Any) -> Any:
    if isinstance(v, float):
        return repr(v)
    return v


TRADE_SCHEMA = (Column("exporter"), Column("importer"), Column("product"), Column("year", int),
                Column("value", float))
TARIFF_SCHEMA = (Column("imposer"), Column("partner"), Column("product"), Column("year", int),
                 Column("gross_rate", float))
PRICE_SCHEMA = (Column("year", int), Column("index", float))
CROSSWALK_SCHEMA = (Column("source"), Column("target"), Column("weight", float))
EXCLUSION_SCHEMA = (Column("fips"), Column("label", str, required=False))
LIMIT_SCHEMA = (Column("year", int), Column("county"), Column("limit", float))


def load_trade_flows(path: str | Path) -> list[TradeFlowRecord]:
    return read_csv_table(path, TRADE_SCHEMA, TradeFlowRecord)


def load_tariffs(path: str | Path) -> list[TariffRecord]:
    return read_csv_table(path, TARIFF_SCHEMA, TariffRecord)


def load_price_index(path: str | Path, base_year: int = 2007) -> PriceIndexSeries:
    rows = read_csv_table(path, PRICE_SCHEMA)
    return PriceIndexSeries({r["year"]: r["index"] for r in rows}, base_year=base_year)


def load_crosswalk(path: str | Path, direction: str = "", single_best: bool = False) -> CrosswalkTable:
    rows = read_csv_table(path, CROSSWALK_SCHEMA)
    return CrosswalkTable.from_triples(((r["source"], r["target"], r["weight"]) for r in rows),
                                       direction=direction, single_best=single_best)


def load_exclusions(path: str | Path) -> ExclusionList:
    rows = read_csv_table(path, EXCLUSION_SCHEMA)
    labels = {r.get("label") for r in rows if r.get("label")}
    return ExclusionList(frozenset(r["fips"] for r in rows), label="; ".join(sorted(labels)))


def load_limits(path: str | Path, national_key: str = "US") -> ConformingLimitTable:
    """Rows whose county equals ``national_key`` hold the national limit."""
    county, national = {}, {}
    for r in read_csv_table(path, LIMIT_SCHEMA):
        if r["county"] == national_key:
            national[r["year"]] = r["limit"]
        else:
            county[(r["year"], r["county"])] = r["limit"]
    return ConformingLimitTable(county, national)


PRODUCTION_SCHEMA = (Column("industry"), Column("base_production", float))
EXPOSURE_SCHEMA = (Column("region"), Column("industry"), Column("share", float), Column("base_year", int))
INDUSTRY_VALUE_SCHEMA = (Column("industry"), Column("year", int), Column("value", float))


def load_production(path: str | Path) -> dict[str, float]:
    return {r["industry"]: r["base_production"] for r in read_csv_table(path, PRODUCTION_SCHEMA)}


def load_exposures(path: str | Path) -> list[RegionExposure]:
    return read_csv_table(path, EXPOSURE_SCHEMA, RegionExposure)


def load_industry_values(path: str | Path) -> dict[tuple[str, int], float]:
    out: dict[tuple[str, int], float] = {}
    for r in read_csv_table(path, INDUSTRY_VALUE_SCHEMA):
        key = (r["industry"], r["year"])
        out[key] = out.get(key, 0.0) + r["value"]
    return out


def read_panel(path: str | Path, unit: str = "unit", cluster: str = "cluster", period: str = "period",
               weight: str | None = "weight", flags: Sequence[str] = ()) -> list[CountyPanelRow]:
    """Read a wide panel CSV; every column not named here is numeric.

    Empty numeric cells become NaN so that :func:`validate_panel` can report
    them.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        ids = [unit, cluster, period] + ([weight] if weight else [])
        missing = [c for c in ids + list(flags) if c not in header]
        if missing:
            raise IngestError(f"{path}: missing required column(s) {missing}")
        numeric = [c for c in header if c not in ids and c not in flags]
        for rownum, raw in enumerate(reader, start=2):
            values = {}
            for c in numeric:
                text = (raw.get(c) or "").strip()
                try:
                    values[c] = float(text) if text else math.nan
                except ValueError:
                    raise IngestError(f"{path}: row {rownum}: cannot parse {text!r} in column {c!r}") from None
            fl = {f: _convert(raw.get(f) or "", Column(f, bool), rownum) for f in flags}
            try:
                w = float(raw[weight]) if weight else 1.0
            except ValueError:
                raise IngestError(f"{path}: row {rownum}: cannot parse weight {raw[weight]!r}") from None
            rows.append(CountyPanelRow(unit=raw[unit], cluster=raw[cluster], period=raw[period], values=values,
                                       weight=w, flags=fl))
    return rows


def write_panel(path: str | Path, rows: Sequence[CountyPanelRow], unit: str = "unit", cluster: str = "cluster",
                period: str = "period", weight: str = "weight") -> None:
    value_cols = list(dict.fromkeys(c for r in rows for c in r.values))
    flag_cols = list(dict.fromkeys(c for r in rows for c in r.flags))
    header = [unit, cluster, period, weight] + value_cols + flag_cols
    write_csv_table(path, header, (
        [r.unit, r.cluster, r.period, float(r.weight)] + [float(r.values.get(c, math.nan)) for c in value_cols]
        + [int(bool(r.flags.get(c, False))) for c in flag_cols]
        for r in rows))
