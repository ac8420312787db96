"""Gravity regressions for US exports and imports and shock-purged predicted flows.

The focal flow (US exports to ``j``, or ``j``'s exports to the US on the
import side) is regressed, net of the log of the competitor aggregate, on
the log own tariff and the log competitor tariff index, absorbing
industry-year and partner-country fixed effects.  Predictions keep the
competitor aggregate and the two tariff terms and drop both fixed effects.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import TariffRecord, TradeFlowRecord
from .fe import absorb_fixed_effects, fe_degrees
from .ingest import CrosswalkTable, apply_crosswalk

log = logging.getLogger(__name__)

EXPORT = "export"
IMPORT = "import"
SIDES = (EXPORT, IMPORT)

# The eight high-income comparison countries commonly used for the US.
DEFAULT_COMPETITORS = ("AUS", "DNK", "FIN", "DEU", "JPN", "NZL", "ESP", "CHE")


class GravityError(ValueError):
    pass


class NoVariationError(GravityError):
    pass


@dataclass(frozen=True)
class SigmaConfig:
    sigma: float = 3.0
    grid: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not self.sigma > 1:
            raise GravityError(f"sigma must exceed 1, got {self.sigma}")
        if any(not s > 1 for s in self.grid):
            raise GravityError("every sigma in the grid must exceed 1")


@dataclass(frozen=True)
class GravityDesignRow:
    focal_flow: float
    offset: float
    own_tariff: float
    competitor_tariff_index: float
    fe_industry_year: str
    fe_partner_country: str
    partner: str = ""
    product: str = ""
    year: int = 0


def competitor_tariff_index(flows: Mapping[str, float], tariffs: Mapping[str, float], sigma: float) -> float:
    """Log of the flow-share weighted power mean of competitor gross tariffs.

    ``flows`` maps competitor -> flow value; ``tariffs`` maps competitor ->
    gross tariff factor (missing competitors are charged 1).
    """
    if not sigma > 1:
        raise GravityError(f"sigma must exceed 1, got {sigma}")
    total = math.fsum(v for v in flows.values() if v > 0)
    if not total > 0:
        raise GravityError("competitor flows sum to zero")
    e = sigma - 1.0
    logs = {math.log(tariffs.get(k, 1.0)) for k, v in flows.items() if v > 0}
    if len(logs) == 1:
        return logs.pop()  # a power mean of equal values is that value
    # log-sum-exp keeps large sigma from overflowing
    terms = [math.log(v / total) + e * math.log(tariffs.get(k, 1.0)) for k, v in flows.items() if v > 0]
    m = max(terms)
    lt = (m + math.log(math.fsum(math.exp(t - m) for t in terms))) / e
    return min(max(lt, min(logs)), max(logs))  # guard rounding at the bounds


def build_design_rows(flows: Iterable[TradeFlowRecord], tariffs: Iterable[TariffRecord],
                      competitors: Sequence[str], side: str = EXPORT, sigma: float = 3.0,
                      focal: str = "US") -> list[GravityDesignRow]:
    """Assemble one design row per (partner, product, year) cell.

    Export side: focal flow is ``focal -> j``; competitor flows are
    ``i -> j``; tariffs are those imposed by ``j``.  Import side: focal flow
    is ``j -> focal``; competitor flows are ``j -> i``; the own tariff is
    imposed by ``focal`` on ``j`` and competitor tariffs by each ``i`` on ``j``.

    Cells without positive competitor flow are skipped.  Cells whose focal
    flow is zero or absent get ``focal_flow = nan`` so they can still be
    predicted but never enter the fit.
    """
    if side not in SIDES:
        raise GravityError(f"side must be one of {SIDES}, got {side!r}")
    comp = set(competitors)
    if focal in comp:
        raise GravityError("focal country cannot be its own competitor")
    bilateral: dict[tuple[str, str, str, int], float] = {}
    for f in flows:
        key = (f.exporter, f.importer, f.product, f.year)
        bilateral[key] = bilateral.get(key, 0.0) + f.value
    tau = {(t.imposer, t.partner, t.product, t.year): t.gross_rate for t in tariffs}

    cells: dict[tuple[str, str, int], dict[str, float]] = defaultdict(dict)
    focal_val: dict[tuple[str, str, int], float] = {}
    for (exp_, imp_, prod, year), v in bilateral.items():
        if side == EXPORT:
            if exp_ == focal:
                focal_val[(imp_, prod, year)] = v
            elif exp_ in comp and imp_ != focal:
                cells[(imp_, prod, year)][exp_] = v
        else:
            if imp_ == focal:
                focal_val[(exp_, prod, year)] = v
            elif imp_ in comp and exp_ != focal:
                cells[(exp_, prod, year)][imp_] = v

    rows = []
    for (j, prod, year) in sorted(cells):
        comp_flows = {i: v for i, v in cells[(j, prod, year)].items() if i != j and v > 0}
        if not comp_flows:
            continue
        if side == EXPORT:
            own = tau.get((j, focal, prod, year), 1.0)
            comp_tau = {i: tau.get((j, i, prod, year), 1.0) for i in comp_flows}
        else:
            own = tau.get((focal, j, prod, year), 1.0)
            comp_tau = {i: tau.get((i, j, prod, year), 1.0) for i in comp_flows}
        fv = focal_val.get((j, prod, year), 0.0)
        rows.append(GravityDesignRow(
            focal_flow=math.log(fv) if fv > 0 else math.nan,
            offset=math.log(math.fsum(comp_flows.values())),
            own_tariff=math.log(own),
            competitor_tariff_index=competitor_tariff_index(comp_flows, comp_tau, sigma),
            fe_industry_year=f"{prod}|{year}",
            fe_partner_country=j,
            partner=j, product=prod, year=year,
        ))
    return rows


@dataclass
class GravityFit:
    beta1: float
    beta2: float
    se1: float
    se2: float
    fe_industry_year: dict[str, float]
    fe_partner_country: dict[str, float]
    resid_var: float
    n_obs: int
    dof: int
    iterations: int
    max_change: float
    converged: bool = True
    side: str = EXPORT
    sigma: float = 3.0
    dropped_singletons: int = 0
    trace: list[float] = field(default_factory=list)
    inputs: dict = field(default_factory=dict)  # provenance; filled by callers

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> GravityFit:
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> GravityFit:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _drop_singletons(rows: list[GravityDesignRow]) -> tuple[list[GravityDesignRow], int]:
    dropped = 0
    while True:
        c1 = defaultdict(int)
        c2 = defaultdict(int)
        for r in rows:
            c1[r.fe_industry_year] += 1
            c2[r.fe_partner_country] += 1
        keep = [r for r in rows if c1[r.fe_industry_year] > 1 and c2[r.fe_partner_country] > 1]
        if len(keep) == len(rows):
            return rows, dropped
        dropped += len(rows) - len(keep)
        rows = keep


def fit_gravity(rows: Sequence[GravityDesignRow], side: str = EXPORT, sigma: float = 3.0,
                tol: float = 1e-10, max_iter: int = 10_000) -> GravityFit:
    """Least squares of (focal - offset) on the two tariff terms with both
    fixed-effect families absorbed.

    Rows with a non-finite focal flow are skipped.  Singleton fixed-effect
    groups carry no information about the slopes and are dropped
    iteratively.  Standard errors are the classical homoskedastic ones with
    the absorbed fixed effects counted in the degrees of freedom.
    """
    if side not in SIDES:
        raise GravityError(f"side must be one of {SIDES}, got {side!r}")
    usable = [r for r in rows if math.isfinite(r.focal_flow) and math.isfinite(r.offset)]
    usable, dropped = _drop_singletons(usable)
    if dropped:
        log.warning("dropped %d observations in singleton fixed-effect groups", dropped)
    if len(usable) < 3:
        raise GravityError(f"only {len(usable)} usable gravity observations")

    resp = np.array([r.focal_flow - r.offset for r in usable])
    X = np.array([[r.own_tariff, r.competitor_tariff_index] for r in usable])
    fam = [[r.fe_industry_year for r in usable], [r.fe_partner_country for r in usable]]
    ab = absorb_fixed_effects(np.column_stack([resp, X]), fam, tol=tol, max_iter=max_iter)
    yt, Xt = ab.demeaned[:, 0], ab.demeaned[:, 1:]

    names = ("own tariff", "competitor tariff index")
    for j in range(2):
        ss_raw = float(np.sum((X[:, j] - X[:, j].mean()) ** 2))
        ss = float(Xt[:, j] @ Xt[:, j])
        if ss <= 1e-24 or ss <= 1e-20 * max(ss_raw, 1.0):
            raise NoVariationError(f"{names[j]} has no variation within the fixed effects")
    XtX = Xt.T @ Xt
    if np.linalg.cond(XtX) > 1e12:
        raise NoVariationError("own tariff and competitor tariff index are collinear after absorption")
    beta = np.linalg.solve(XtX, Xt.T @ yt)
    resid = yt - Xt @ beta
    dof = len(usable) - 2 - fe_degrees(fam)
    rss = float(resid @ resid)
    s2 = rss / dof if dof > 0 else math.nan
    se = np.sqrt(np.diag(s2 * np.linalg.inv(XtX))) if dof > 0 else np.full(2, math.nan)

    # Split the fitted fixed-effect part of the response into its two families.
    fe_part = absorb_fixed_effects(resp - X @ beta, fam, tol=tol, max_iter=max_iter)
    fe_iy = {str(k): float(v) for k, v in zip(fe_part.levels[0], fe_part.effects[0][:, 0])}
    fe_pc = {str(k): float(v) for k, v in zip(fe_part.levels[1], fe_part.effects[1][:, 0])}
    return GravityFit(
        beta1=float(beta[0]), beta2=float(beta[1]), se1=float(se[0]), se2=float(se[1]),
        fe_industry_year=fe_iy, fe_partner_country=fe_pc, resid_var=s2, n_obs=len(usable), dof=dof,
        iterations=ab.iterations, max_change=ab.max_change, side=side, sigma=sigma,
        dropped_singletons=dropped, trace=[float(t) for t in ab.trace],
    )


def predict_flow(fit: GravityFit, row: GravityDesignRow) -> float:
    """Log predicted focal flow; both fixed-effect families are left out."""
    if not fit.converged:
        raise GravityError("cannot predict from a fit that did not converge")
    return row.offset + fit.beta1 * row.own_tariff + fit.beta2 * row.competitor_tariff_index


def predict_all(fit: GravityFit, rows: Iterable[GravityDesignRow]) -> dict[tuple[str, str, int], float]:
    """(product, partner, year) -> log predicted flow."""
    return {(r.product, r.partner, r.year): predict_flow(fit, r) for r in rows}


def aggregate_predicted(predicted: Mapping[tuple[str, str, int], float], crosswalk: CrosswalkTable | None = None,
                        partners: Iterable[str] | None = None,
                        on_missing: str = "error") -> dict[tuple[str, int], float]:
    """Sum predicted levels over partners, then map products to industries.

    ``predicted`` maps (product, partner, year) to a *log* flow.  Returns
    (industry, year) -> level.  Without a crosswalk products are their own
    industries.
    """
    keep = set(partners) if partners is not None else None
    by_year: dict[int, dict[str, float]] = defaultdict(dict)
    for (prod, partner, year), lnx in sorted(predicted.items()):
        if keep is not None and partner not in keep:
            continue
        by_year[year][prod] = by_year[year].get(prod, 0.0) + math.exp(lnx)
    out: dict[tuple[str, int], float] = {}
    for year, series in sorted(by_year.items()):
        mapped = apply_crosswalk(series, crosswalk, on_missing=on_missing) if crosswalk is not None else series
        for ind, v in mapped.items():
            out[(ind, year)] = v
    return out


def profile_sigma(flows: Sequence[TradeFlowRecord], tariffs: Sequence[TariffRecord], competitors: Sequence[str],
                  grid: Sequence[float], side: str = EXPORT, focal: str = "US") -> tuple[float, dict[float, float]]:
    """Pick the sigma on ``grid`` minimizing the residual sum of squares."""
    rss = {}
    for s in grid:
        rows = build_design_rows(flows, tariffs, competitors, side=side, sigma=s, focal=focal)
        fit = fit_gravity(rows, side=side, sigma=s)
        rss[float(s)] = fit.resid_var * fit.dof
    best = min(rss, key=lambda s: (rss[s], s))
    return best, rss
