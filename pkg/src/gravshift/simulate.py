"""Synthetic boom data with known causal parameters.

Trade flows follow a CES structure in which every exporter-importer flow
is supply term x (cost x distance x tariff)^(1-sigma) x importer demand.
Competitor-partner distances are multiplicatively separable, so the part
of the gravity error the regression cannot see collapses into its two
fixed-effect families and noiseless data are fit exactly.

Regional exposures turn industry net exports into shift-share values; the
county panel then follows

    credit  = a + b * std(observed shift-share) + v + u + r_region
    outcome = c + d * credit + g * control + kappa * v + e + q_region

so the confounder ``v`` biases OLS whenever ``kappa != 0`` while the GIV
shift-share stays a valid instrument.
"""

from __future__ import annotations

import concurrent.futures as cf
import json
import math
import zlib
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .datamodel import CountyPanelRow, Label, RegionExposure, RegressionSpec, TariffRecord, TradeFlowRecord
from .diagnostics import diagnose
from .estimate import run_spec
from .gravity import EXPORT, IMPORT, aggregate_predicted, build_design_rows, fit_gravity, predict_all
from .ingest import CrosswalkTable, apply_crosswalk, write_csv_table, write_panel
from .shiftshare import GIV, OBSERVED, aggregate_region, build_net_export

FOCAL = "US"
OUTCOME = "emp_growth"
ENDOG = "credit_growth"
INSTR = "giv_netexp"
OBSERVED_COL = "netexp"
CONTROL = "control"
UNIT_COL = "fips"
CLUSTER_COL = "region"
WEIGHT_COL = "ln_house_units"


@dataclass(frozen=True)
class ScenarioConfig:
    n_partners: int = 12
    n_competitors: int = 8
    n_products: int = 40
    n_industries: int = 20
    n_regions: int = 60
    counties_per_region: int = 5
    years: tuple[int, ...] = (1999, 2005)
    sigma_true: float = 3.0
    tariff_volatility: float = 0.08
    partner_shock_sd: float = 0.4
    supply_shock_sd: float = 0.1
    demand_shock_sd: float = 0.1
    level_dispersion: float = 0.1
    partner_fe_sd: float = 0.5
    distance_sd: float = 0.3
    flow_noise: float = 0.0
    first_stage_slope: float = 1.0
    structural_slope: float = 0.5
    control_slope: float = 0.3
    confounder_loading: float = 0.8
    confounder_sd: float = 1.0
    credit_noise: float = 1.0
    outcome_noise: float = 1.0
    region_shock_sd: float = 0.3
    f_band: tuple[float, float] = (6.0, 30.0)
    seed: int = 20240601

    def __post_init__(self) -> None:
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "f_band", tuple(float(x) for x in self.f_band))
        if not self.sigma_true > 1:
            raise ValueError("sigma_true must exceed 1")
        if len(self.years) < 2 or list(self.years) != sorted(set(self.years)):
            raise ValueError("years must be at least two increasing calendar years")
        for name in ("tariff_volatility", "partner_shock_sd", "supply_shock_sd", "demand_shock_sd", "partner_fe_sd",
                     "distance_sd", "level_dispersion", "flow_noise", "confounder_sd", "credit_noise", "outcome_noise", "region_shock_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("n_partners", "n_competitors", "n_products", "n_industries", "n_regions",
                     "counties_per_region"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_regions < 2:
            raise ValueError("need at least two regions to cluster")
        if not 0 <= self.f_band[0] < self.f_band[1]:
            raise ValueError(f"f_band must be an increasing non-negative pair, got {self.f_band}")

    @property
    def t1(self) -> int:
        return self.years[0]

    @property
    def t2(self) -> int:
        return self.years[-1]

    @classmethod
    def confounded(cls, **kw) -> ScenarioConfig:
        """Preset with a strong confounder and a strong instrument."""
        return cls(**({"confounder_loading": 2.0, "confounder_sd": 1.5} | kw))

    @classmethod
    def noiseless(cls, **kw) -> ScenarioConfig:
        return cls(**({"flow_noise": 0.0, "confounder_loading": 0.0, "confounder_sd": 0.0, "credit_noise": 0.0,
                       "outcome_noise": 0.0, "region_shock_sd": 0.0} | kw))


def stream(seed: int, *keys: object) -> np.random.Generator:
    """Independent generator for (seed, keys); insensitive to call order."""
    spawn = tuple(zlib.crc32(str(k).encode()) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=spawn))


@dataclass
class TradeWorld:
    flows: list[TradeFlowRecord]
    tariffs: list[TariffRecord]
    competitors: tuple[str, ...]
    partners: tuple[str, ...]
    products: tuple[str, ...]
    sigma: float


def _codes(prefix: str, n: int, width: int = 2) -> tuple[str, ...]:
    return tuple(f"{prefix}{i:0{width}d}" for i in range(n))


def generate_trade(config: ScenarioConfig, rep: int = 0) -> TradeWorld:
    """Bilateral flows and tariffs for the focal country, competitors and partners."""
    c = config
    seed = c.seed
    comp = _codes("C", c.n_competitors)
    part = _codes("P", c.n_partners)
    prods = _codes("H", c.n_products, 4)
    T = len(c.years)
    S = c.n_products
    one_m_s = 1.0 - c.sigma_true

    # product levels are shared across countries up to level_dispersion, so
    # the product mix of focal trade resembles that of competitor trade
    g = stream(seed, rep, "levels")
    product_supply = g.normal(0.0, 0.5, size=S)
    product_demand = g.normal(0.0, 0.5, size=S)
    n_c = 1 + len(comp) + len(part)

    # supply ln(N w^(1-sigma)) and demand ln(P^(sigma-1) E) by country and
    # product.  Partner shocks reach every destination or origin alike and
    # drive the predicted flows; focal and competitor shocks are absorbed by
    # the product-year effects and act as noise.
    countries = (FOCAL,) + comp + part
    shock_sd = np.array([c.supply_shock_sd] * (1 + len(comp)) + [c.partner_shock_sd] * len(part))
    demand_sd = np.array([c.demand_shock_sd] * (1 + len(comp)) + [c.partner_shock_sd] * len(part))
    g = stream(seed, rep, "supply")
    base = product_supply + c.level_dispersion * g.normal(size=(n_c, S))
    drift = g.normal(size=(n_c, S, T)).cumsum(axis=2)
    supply = base[:, :, None] + shock_sd[:, None, None] * drift
    sup = {k: supply[i] for i, k in enumerate(countries)}

    g = stream(seed, rep, "demand")
    dem_base = product_demand + c.level_dispersion * g.normal(size=(n_c, S))
    dem_drift = g.normal(size=(n_c, S, T)).cumsum(axis=2)
    dem = dem_base[:, :, None] + demand_sd[:, None, None] * dem_drift
    demand = {k: dem[i] for i, k in enumerate(countries)}

    # distances: competitor-partner pairs separable; focal-partner free (partner FE)
    g = stream(seed, rep, "distance")
    a_comp = dict(zip(comp, g.normal(0.0, c.distance_sd, len(comp))))
    b_part = dict(zip(part, g.normal(0.0, c.distance_sd, len(part))))
    d_focal = dict(zip(part, g.normal(0.0, c.partner_fe_sd, len(part))))

    def ln_dist(x: str, y: str) -> float:
        if FOCAL in (x, y):
            return d_focal[y if x == FOCAL else x]
        i, j = (x, y) if x in a_comp else (y, x)
        return a_comp[i] + b_part[j]

    # tariffs: ln tau = volatility * |level + change|, zero volatility -> all ones
    g = stream(seed, rep, "tariff")
    pairs = [(j, k) for j in part for k in (FOCAL,) + comp] + [(k, j) for j in part for k in (FOCAL,) + comp]
    lvl = g.normal(1.0, 0.6, size=(len(pairs), S))
    chg = g.normal(0.0, 0.8, size=(len(pairs), S, T))
    ln_tau = {p: c.tariff_volatility * np.abs(lvl[i][:, None] + chg[i]) for i, p in enumerate(pairs)}

    g = stream(seed, rep, "noise")
    noise_x = c.flow_noise * g.normal(size=(len(part), S, T))
    noise_m = c.flow_noise * g.normal(size=(len(part), S, T))

    flows: list[TradeFlowRecord] = []
    tariffs: list[TariffRecord] = []

    def add(exp_: str, imp_: str, extra: np.ndarray | None = None) -> None:
        lt = ln_tau[(imp_, exp_)]
        lx = sup[exp_] + one_m_s * (ln_dist(exp_, imp_) + lt) + demand[imp_]
        if extra is not None:
            lx = lx + extra
        vals = np.exp(lx)
        for s, prod in enumerate(prods):
            for t, year in enumerate(c.years):
                flows.append(TradeFlowRecord(exp_, imp_, prod, year, float(vals[s, t])))
                if lt[s, t] > 0:
                    tariffs.append(TariffRecord(imp_, exp_, prod, year, float(math.exp(lt[s, t]))))

    for jj, j in enumerate(part):
        add(FOCAL, j, noise_x[jj])
        add(j, FOCAL, noise_m[jj])
        for i in comp:
            add(i, j)
            add(j, i)
    return TradeWorld(flows, tariffs, comp, part, prods, c.sigma_true)


def product_crosswalk(config: ScenarioConfig, rep: int = 0) -> CrosswalkTable:
    """Each product maps to one industry; every fifth product is split 70/30."""
    prods = _codes("H", config.n_products, 4)
    inds = _codes("G", config.n_industries, 3)
    g = stream(config.seed, rep, "crosswalk")
    owner = g.permutation(np.arange(config.n_products) % config.n_industries)
    entries = {}
    for i, p in enumerate(prods):
        main = inds[owner[i]]
        if i % 5 == 4 and config.n_industries > 1:
            other = inds[(owner[i] + 1) % config.n_industries]
            entries[p] = ((main, 0.7), (other, 0.3))
        else:
            entries[p] = ((main, 1.0),)
    return CrosswalkTable(entries, direction="product->industry")


def observed_industry_trade(world: TradeWorld, xw: CrosswalkTable, side: str) -> dict[tuple[str, int], float]:
    by_year: dict[int, dict[str, float]] = {}
    partners = set(world.partners)
    for f in world.flows:
        hit = (f.exporter == FOCAL and f.importer in partners) if side == EXPORT else \
            (f.importer == FOCAL and f.exporter in partners)
        if hit:
            d = by_year.setdefault(f.year, {})
            d[f.product] = d.get(f.product, 0.0) + f.value
    out = {}
    for year, series in by_year.items():
        for ind, v in apply_crosswalk(series, xw).items():
            out[(ind, year)] = v
    return out


def base_production(config: ScenarioConfig, exports: Mapping[tuple[str, int], float],
                    imports: Mapping[tuple[str, int], float], rep: int = 0) -> dict[str, float]:
    """Base-year production, a random multiple of first-year gross trade."""
    g = stream(config.seed, rep, "production")
    inds = sorted({k[0] for k in exports} | {k[0] for k in imports})
    mult = np.exp(g.normal(np.log(4.0), 0.3, size=len(inds)))
    return {ind: float(m * (exports.get((ind, config.t1), 0.0) + imports.get((ind, config.t1), 0.0)))
            for ind, m in zip(inds, mult)}


def generate_exposures(config: ScenarioConfig, lag: int, rep: int = 0) -> list[RegionExposure]:
    """Employment shares per region; lagged variants share a common base draw."""
    g = stream(config.seed, rep, "exposure")
    R, G = config.n_regions, config.n_industries
    manuf = g.uniform(0.1, 0.4, size=R)
    raw = g.dirichlet(np.full(G, 0.5), size=R)
    g_lag = stream(config.seed, rep, "exposure", lag)
    perturbed = raw * np.exp(g_lag.normal(0.0, 0.05, size=(R, G)))
    perturbed /= perturbed.sum(axis=1, keepdims=True)
    shares = perturbed * manuf[:, None]
    inds = _codes("G", G, 3)
    regions = _codes("M", R, 3)
    base_year = config.t1 - lag
    return [RegionExposure(regions[r], inds[k], float(shares[r, k]), base_year)
            for r in range(R) for k in range(G)]


@dataclass
class ShiftShareInputs:
    observed: dict[str, float]
    giv: dict[str, float]
    beta_export: tuple[float, float]
    beta_import: tuple[float, float]
    artifacts: dict = field(default_factory=dict, repr=False)


def build_shift_shares(config: ScenarioConfig, rep: int = 0, observed_lag: int = 1, giv_lag: int = 3,
                       keep_artifacts: bool = False) -> ShiftShareInputs:
    """Run gravity -> industry net exports -> regional shift-shares on generated trade."""
    world = generate_trade(config, rep)
    xw = product_crosswalk(config, rep)
    fits, predicted = {}, {}
    for side in (EXPORT, IMPORT):
        rows = build_design_rows(world.flows, world.tariffs, world.competitors, side=side,
                                 sigma=config.sigma_true, focal=FOCAL)
        fits[side] = fit_gravity(rows, side=side, sigma=config.sigma_true)
        predicted[side] = aggregate_predicted(predict_all(fits[side], rows), xw)
    obs_x = observed_industry_trade(world, xw, EXPORT)
    obs_m = observed_industry_trade(world, xw, IMPORT)
    y0 = base_production(config, obs_x, obs_m, rep)
    netexp = build_net_export(obs_x, obs_m, y0)
    givexp = build_net_export(predicted[EXPORT], predicted[IMPORT], y0)
    exp_obs = generate_exposures(config, observed_lag, rep)
    exp_giv = generate_exposures(config, giv_lag, rep)
    ss_obs = aggregate_region(netexp, exp_obs, config.t1, config.t2, lag=observed_lag, kind=OBSERVED)
    ss_giv = aggregate_region(givexp, exp_giv, config.t1, config.t2, lag=giv_lag, kind=GIV)
    arts = {}
    if keep_artifacts:
        arts = dict(world=world, crosswalk=xw, fits=fits, production=y0, exposures_observed=exp_obs,
                    exposures_giv=exp_giv, exports=obs_x, imports=obs_m, predicted=predicted,
                    netexp=netexp, givexp=givexp)
    return ShiftShareInputs({k: v.value for k, v in ss_obs.items()}, {k: v.value for k, v in ss_giv.items()},
                            (fits[EXPORT].beta1, fits[EXPORT].beta2), (fits[IMPORT].beta1, fits[IMPORT].beta2),
                            arts)


@dataclass(frozen=True)
class GroundTruth:
    first_stage_slope: float
    structural_slope: float
    control_slope: float
    confounder_loading: float


def _standardize(values: np.ndarray) -> np.ndarray:
    sd = values.std()
    return (values - values.mean()) / sd if sd > 0 else values - values.mean()


def generate_panel(config: ScenarioConfig, observed: Mapping[str, float], giv: Mapping[str, float],
                   rep: int = 0, period: str = "boom") -> tuple[list[CountyPanelRow], GroundTruth]:
    """County rows whose credit growth responds to the observed shift-share.

    The observed regional values are standardized before entering the credit
    equation, so ``first_stage_slope`` is per cross-regional SD.
    """
    c = config
    regions = sorted(observed)
    if set(regions) != set(giv):
        raise ValueError("observed and GIV shift-shares cover different regions")
    s_obs = _standardize(np.array([observed[r] for r in regions]))
    z = np.array([giv[r] for r in regions])
    g = stream(c.seed, rep, "panel", period)
    R, K = len(regions), c.counties_per_region
    r_credit = c.region_shock_sd * g.normal(size=R)
    r_out = c.region_shock_sd * g.normal(size=R)
    n = R * K
    v = c.confounder_sd * g.normal(size=n)
    u = c.credit_noise * g.normal(size=n)
    e = c.outcome_noise * g.normal(size=n)
    ctrl = g.normal(size=n)
    units_ln = g.uniform(8.0, 13.0, size=n)  # ln(house units), log-uniform units
    rows = []
    for r, region in enumerate(regions):
        for k in range(K):
            i = r * K + k
            credit = 1.0 + c.first_stage_slope * s_obs[r] + v[i] + u[i] + r_credit[r]
            outcome = (0.5 + c.structural_slope * credit + c.control_slope * ctrl[i]
                       + c.confounder_loading * v[i] + e[i] + r_out[r])
            rows.append(CountyPanelRow(
                unit=f"{r + 1:02d}{k + 1:03d}", cluster=region, period=period,
                values={OUTCOME: float(outcome), ENDOG: float(credit), INSTR: float(z[r]),
                        OBSERVED_COL: float(observed[region]), CONTROL: float(ctrl[i])},
                weight=float(units_ln[i]),
            ))
    truth = GroundTruth(c.first_stage_slope, c.structural_slope, c.control_slope, c.confounder_loading)
    return rows, truth


def default_spec(period: str = "boom") -> RegressionSpec:
    return RegressionSpec(outcome=OUTCOME, endogenous=(ENDOG,), instruments=(INSTR,), controls=(CONTROL,),
                          periods=(period,), weight=WEIGHT_COL, cluster=CLUSTER_COL)


@dataclass
class RepResult:
    rep: int
    tsls: float
    tsls_se: float
    ols: float
    first_stage_f: float
    covered: bool


class ReplicationError(RuntimeError):
    def __init__(self, rep: int, cause: Exception):
        super().__init__(f"replication {rep} failed: {type(cause).__name__}: {cause}")
        self.rep = rep


def run_rep(config: ScenarioConfig, rep: int) -> RepResult:
    """One pass of gravity, shift-share, 2SLS and diagnostics."""
    lab = Label(ENDOG, "boom")
    try:
        ss = build_shift_shares(config, rep)
        rows, truth = generate_panel(config, ss.observed, ss.giv, rep)
        res = run_spec(rows, default_spec())
        f = diagnose(res).blocks[0].robust_f[str(lab)]
        b, se = res.tsls.coef(lab), res.tsls.stderr(lab)
    except Exception as exc:
        raise ReplicationError(rep, exc) from exc
    return RepResult(rep, b, se, res.ols.coef(lab), f, abs(b - truth.structural_slope) <= 1.959963984540054 * se)


@dataclass
class MonteCarloReport:
    reps: int
    true_slope: float
    coverage: float
    median_bias_ols: float
    median_bias_tsls: float
    median_abs_bias_ols: float
    median_abs_bias_tsls: float
    f_median: float
    f_quantiles: dict[str, float]
    share_f_below_10: float
    f_band: tuple[float, float]
    f_in_band: bool
    results: list[RepResult] = field(repr=False, default_factory=list)

    def to_dict(self, with_reps: bool = False) -> dict:
        d = asdict(self)
        if not with_reps:
            d.pop("results")
        return d


def monte_carlo(config: ScenarioConfig, reps: int, threads: int = 1, min_reps: int = 50) -> MonteCarloReport:
    """Repeat the whole pipeline and summarize coverage, bias and instrument strength.

    ``min_reps`` guards against summaries too noisy to read; lower it only
    for determinism checks.
    """
    if reps < min_reps:
        raise ValueError(f"need at least {min_reps} replications, got {reps}")
    if threads > 1:
        with cf.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda r: run_rep(config, r), range(reps)))
    else:
        results = [run_rep(config, r) for r in range(reps)]
    results.sort(key=lambda r: r.rep)
    d = config.structural_slope
    tsls = np.array([r.tsls for r in results])
    ols = np.array([r.ols for r in results])
    fs = np.array([r.first_stage_f for r in results])
    fmed = float(np.median(fs))
    return MonteCarloReport(
        reps=reps, true_slope=d,
        coverage=float(np.mean([r.covered for r in results])),
        median_bias_ols=float(np.median(ols - d)), median_bias_tsls=float(np.median(tsls - d)),
        median_abs_bias_ols=float(np.median(np.abs(ols - d))),
        median_abs_bias_tsls=float(np.median(np.abs(tsls - d))),
        f_median=fmed,
        f_quantiles={q: float(np.quantile(fs, float(q))) for q in ("0.05", "0.25", "0.5", "0.75", "0.95")},
        share_f_below_10=float(np.mean(fs < 10)),
        f_band=config.f_band, f_in_band=bool(config.f_band[0] <= fmed <= config.f_band[1]),
        results=results,
    )


def write_scenario(config: ScenarioConfig, out_dir: str | Path, rep: int = 0) -> dict[str, Path]:
    """Write one replication's inputs as the CSV tables the pipeline reads."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ss = build_shift_shares(config, rep, keep_artifacts=True)
    a = ss.artifacts
    world: TradeWorld = a["world"]
    paths = {k: out / f"{k}.csv" for k in ("trade_flows", "tariffs", "crosswalk", "production", "exposure_lag1",
                                          "exposure_lag3", "price_index", "exports", "imports", "panel")}
    write_csv_table(paths["trade_flows"], ("exporter", "importer", "product", "year", "value"),
                    ((f.exporter, f.importer, f.product, f.year, f.value) for f in world.flows))
    write_csv_table(paths["tariffs"], ("imposer", "partner", "product", "year", "gross_rate"),
                    ((t.imposer, t.partner, t.product, t.year, t.gross_rate) for t in world.tariffs))
    write_csv_table(paths["crosswalk"], ("source", "target", "weight"),
                    ((s, t, w) for s, ts in sorted(a["crosswalk"].entries.items()) for t, w in ts))
    write_csv_table(paths["production"], ("industry", "base_production"), sorted(a["production"].items()))
    for key, exps in (("exposure_lag1", a["exposures_observed"]), ("exposure_lag3", a["exposures_giv"])):
        write_csv_table(paths[key], ("region", "industry", "share", "base_year"),
                        ((e.region, e.industry, e.share, e.base_year) for e in exps))
    years = sorted(set(config.years) | {2007})
    write_csv_table(paths["price_index"], ("year", "index"), ((y, 100.0) for y in years))
    for key in ("exports", "imports"):
        write_csv_table(paths[key], ("industry", "year", "value"),
                        ((i, y, v) for (i, y), v in sorted(a[key].items())))
    rows, truth = generate_panel(config, ss.observed, ss.giv, rep)
    write_panel(paths["panel"], rows, unit=UNIT_COL, cluster=CLUSTER_COL, weight=WEIGHT_COL)
    truth_path = out / "truth.json"
    truth_path.write_text(json.dumps({
        "scenario": asdict(config), "rep": rep, "truth": asdict(truth),
        "gravity": {"export": list(ss.beta_export), "import": list(ss.beta_import)},
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["truth"] = truth_path
    return paths


def scenario_from_mapping(values: Mapping[str, object]) -> ScenarioConfig:
    """Build a config from string values, rejecting unknown keys."""
    fields = ScenarioConfig.__dataclass_fields__
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ValueError(f"unknown scenario key(s): {unknown}")
    kw: dict[str, object] = {}
    defaults = ScenarioConfig()
    for k, v in values.items():
        current = getattr(defaults, k)
        if isinstance(current, tuple):
            kw[k] = tuple(type(current[0])(x) for x in str(v).replace(",", " ").split())
        elif isinstance(current, bool):
            kw[k] = str(v).lower() in ("1", "true", "yes")
        else:
            kw[k] = type(current)(v)
    return replace(defaults, **kw)
