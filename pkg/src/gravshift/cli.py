"""Command-line front end.

Exit codes: 0 success, 1 validation or data error, 2 usage error.  Data go
to files (or stdout for ``magnitude``); messages go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .config import ConfigError, PipelineConfig, load_config, load_scenario, output_dir
from .datamodel import CountyPanelRow, IndustryNetExportSeries
from .diagnostics import diagnose
from .estimate import EstimationResult, SpecResults, run_spec
from .gravity import EXPORT, SIDES, GravityFit, aggregate_predicted, build_design_rows, fit_gravity, predict_all
from .ingest import (
    INDUSTRY_VALUE_SCHEMA,
    Column,
    IngestError,
    apply_crosswalk,
    deflate,
    load_crosswalk,
    load_exposures,
    load_industry_values,
    load_price_index,
    load_production,
    load_tariffs,
    load_trade_flows,
    read_csv_table,
    read_panel,
    write_csv_table,
)
from .magnitude import MagnitudeInput, audit, explained_share
from .shiftshare import GIV, OBSERVED, aggregate_region, annualize, build_net_export, changes_to_rows, cohort_series
from .simulate import ScenarioConfig, monte_carlo, run_rep, write_scenario

SUBCOMMANDS = ("deflate", "crosswalk", "gravity", "netexport", "shiftshare", "cohort", "estimate", "diagnose",
               "magnitude", "simulate")


class UsageError(Exception):
    pass


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _target(out: str | Path) -> Path:
    """Output path; with the output-directory override only the file name is kept."""
    p = Path(out)
    root = output_dir(None)
    if root != Path("."):
        p = root / p.name
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


# deflate / crosswalk -------------------------------------------------------

def cmd_deflate(a: argparse.Namespace) -> int:
    index = load_price_index(a.index, base_year=a.base_year)
    with open(a.input, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = list(reader.fieldnames or [])
        missing = [c for c in [a.year_column, *a.columns] if c not in header]
        if missing:
            raise IngestError(f"{a.input}: missing column(s) {missing}")
        rows = []
        for rownum, raw in enumerate(reader, start=2):
            try:
                year = int(raw[a.year_column])
                for c in a.columns:
                    raw[c] = deflate(float(raw[c]), year, index)
            except ValueError as exc:
                raise IngestError(f"{a.input}: row {rownum}: {exc}") from None
            rows.append([raw[c] for c in header])
    write_csv_table(_target(a.out), header, rows)
    return 0


def cmd_crosswalk(a: argparse.Namespace) -> int:
    xw = load_crosswalk(a.table, direction=a.direction, single_best=a.single_best)
    series = load_industry_values(a.input)
    by_year: dict[int, dict[str, float]] = defaultdict(dict)
    for (code, year), v in series.items():
        by_year[year][code] = v
    out = []
    for year in sorted(by_year):
        mapped = apply_crosswalk(by_year[year], xw, on_missing=a.on_missing)
        out += [(code, year, v) for code, v in sorted(mapped.items())]
    write_csv_table(_target(a.out), [c.name for c in INDUSTRY_VALUE_SCHEMA], out)
    return 0


# gravity -------------------------------------------------------------------

def cmd_gravity_fit(a: argparse.Namespace) -> int:
    competitors = tuple(x for x in a.competitors.replace(",", " ").split() if x)
    flows = load_trade_flows(a.flows)
    tariffs = load_tariffs(a.tariffs)
    rows = build_design_rows(flows, tariffs, competitors, side=a.side, sigma=a.sigma, focal=a.focal)
    fit = fit_gravity(rows, side=a.side, sigma=a.sigma)
    fit.inputs = {"flows": str(Path(a.flows).resolve()), "tariffs": str(Path(a.tariffs).resolve()),
                  "competitors": list(competitors), "focal": a.focal}
    fit.save(_target(a.out))
    _say(f"{a.side}: beta1={fit.beta1:.6g} (se {fit.se1:.3g}), beta2={fit.beta2:.6g} (se {fit.se2:.3g}), "
         f"n={fit.n_obs}, FE iterations={fit.iterations}")
    return 0


def cmd_gravity_predict(a: argparse.Namespace) -> int:
    fit = GravityFit.load(a.fit)
    inp = fit.inputs
    if not inp:
        raise ConfigError(f"{a.fit}: fit has no recorded inputs; refit with `gravity fit`")
    flows = load_trade_flows(a.flows or inp["flows"])
    tariffs = load_tariffs(a.tariffs or inp["tariffs"])
    rows = build_design_rows(flows, tariffs, inp["competitors"], side=fit.side, sigma=fit.sigma, focal=inp["focal"])
    predicted = predict_all(fit, rows)
    if a.crosswalk:
        xw = load_crosswalk(a.crosswalk)
        levels = aggregate_predicted(predicted, xw, on_missing=a.on_missing)
        write_csv_table(_target(a.out), ("industry", "year", "value"),
                        ((i, y, v) for (i, y), v in sorted(levels.items())))
    else:
        write_csv_table(_target(a.out), ("product", "partner", "year", "ln_value"),
                        ((p, j, y, v) for (p, j, y), v in sorted(predicted.items())))
    return 0


# shift-share ----------------------------------------------------------------

def cmd_netexport(a: argparse.Namespace) -> int:
    series = build_net_export(load_industry_values(a.exports), load_industry_values(a.imports),
                              load_production(a.production))
    write_csv_table(_target(a.out), ("industry", "year", "net_export_ratio", "base_production"),
                    ((s.industry, s.year, s.net_export_ratio, s.base_production) for s in series))
    return 0


NETEXP_SCHEMA = (Column("industry"), Column("year", int), Column("net_export_ratio", float),
                 Column("base_production", float))


def _load_netexport(path: str | Path) -> list[IndustryNetExportSeries]:
    return read_csv_table(path, NETEXP_SCHEMA, IndustryNetExportSeries)


def cmd_shiftshare(a: argparse.Namespace) -> int:
    if a.t1 >= a.t2:
        raise UsageError("--from must precede --to")
    changes = aggregate_region(_load_netexport(a.netexport), load_exposures(a.exposure), a.t1, a.t2,
                               lag=a.lag, kind=a.kind)
    out = sorted(changes.values(), key=lambda c: c.region)
    if a.annualize:
        out = [replace(c, value=annualize(c)) for c in out]
    write_csv_table(_target(a.out), ("region", "period", "value", "kind"), changes_to_rows(out))
    return 0


COHORT_SCHEMA = (Column("unit"), Column("year", int), Column("value", float), Column("weight", float, False))
KEY_SCHEMA = (Column("unit"), Column("key", float))


def cmd_cohort(a: argparse.Namespace) -> int:
    values, weights = {}, {}
    for r in read_csv_table(a.values, COHORT_SCHEMA):
        values[(r["unit"], r["year"])] = r["value"]
        weights[(r["unit"], r["year"])] = 1.0 if r.get("weight") is None else r["weight"]
    keys = {r["unit"]: r["key"] for r in read_csv_table(a.keys, KEY_SCHEMA)}
    series = cohort_series(values, keys, weights, groups=a.groups, base_year=a.base_year)
    write_csv_table(_target(a.out), ("group", "year", "value"),
                    ((s.group, y, v) for s in series for y, v in sorted(s.values.items())))
    return 0


# estimation -----------------------------------------------------------------

def _merge_columns(rows: list[CountyPanelRow], merge: dict[str, Path]) -> list[CountyPanelRow]:
    """Attach region-level values (region, period, value, kind) as panel columns."""
    if not merge:
        return rows
    schema = (Column("region"), Column("period"), Column("value", float), Column("kind", str, False))
    tables = {}
    for col, path in merge.items():
        recs = read_csv_table(path, schema)
        periods = {r["period"] for r in recs}
        single = len(periods) == 1
        tables[col] = (single, {(r["region"], None if single else r["period"]): r["value"] for r in recs})
    out = []
    for r in rows:
        vals = dict(r.values)
        for col, (single, table) in tables.items():
            key = (r.cluster, None if single else r.period)
            if key not in table:
                raise IngestError(f"merge column {col!r}: no value for region {r.cluster!r}"
                                  + ("" if single else f" in period {r.period!r}"))
            vals[col] = table[key]
        out.append(replace(r, values=vals))
    return out


def _result_json(r: EstimationResult) -> dict:
    return {"method": r.method, "outcome": r.outcome, "coefficients": r.table(), "vcov": r.vcov.tolist(),
            "n": r.n, "G": r.G, "k": r.k, "r2": r.r2, "weight": r.weight, "winsor": r.winsor}


def results_document(res: SpecResults, inputs: dict | None = None) -> dict:
    spec = res.spec
    return {
        "spec": {"outcome": spec.outcome, "endogenous": list(spec.endogenous), "instruments": list(spec.instruments),
                 "controls": list(spec.controls), "periods": list(spec.periods), "weight": spec.weight,
                 "cluster": spec.cluster, "winsor": asdict(spec.winsor) if spec.winsor else None,
                 "flag_interaction": spec.flag_interaction},
        "panels": {name: [_result_json(r) for r in rs] for name, rs in res.panels().items()},
        "winsor_bounds": {k: list(v) for k, v in res.winsor_bounds.items()},
        "diagnostics": diagnose(res).to_dict(),
        "inputs": inputs or {},
    }


def _run_estimate(cfg: PipelineConfig, panel: Path) -> SpecResults:
    rows = read_panel(panel, unit=cfg.unit, cluster=cfg.cluster, period=cfg.period, weight=cfg.weight,
                      flags=cfg.flags)
    rows = _merge_columns(rows, cfg.merge)
    return run_spec(rows, cfg.spec)


def cmd_estimate(a: argparse.Namespace) -> int:
    cfg = load_config(a.spec)
    panel = Path(a.panel) if a.panel else cfg.require("panel")[0]
    if not panel.exists():
        raise ConfigError(f"panel file not found: {panel}")
    res = _run_estimate(cfg, panel)
    out = _target(a.out) if a.out else _target(cfg.output_dir / "results.json")
    doc = results_document(res, {"spec": str(Path(a.spec).resolve()), "panel": str(panel.resolve())})
    _write_json(out, doc)
    for block in doc["diagnostics"]["blocks"]:
        _say(f"period {block['period']}: robust F {block['robust_f']}")
    return 0


def cmd_diagnose(a: argparse.Namespace) -> int:
    doc = json.loads(Path(a.results).read_text(encoding="utf-8"))
    inputs = doc.get("inputs") or {}
    if "spec" not in inputs or "panel" not in inputs:
        raise ConfigError(f"{a.results}: no recorded inputs to recompute from")
    res = _run_estimate(load_config(inputs["spec"]), Path(inputs["panel"]))
    fresh = results_document(res, inputs)
    if fresh["panels"] != doc.get("panels"):
        _say("warning: recomputed coefficients differ from the stored results")
    diag = fresh["diagnostics"]
    if a.out:
        _write_json(_target(a.out), diag)
    else:
        print(json.dumps(diag, indent=2, sort_keys=True))
    return 0


# magnitude ------------------------------------------------------------------

def _printed(items: Sequence[str]) -> dict[str, float]:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--printed expects key=value, got {item!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise UsageError(f"--printed value for {key!r} is not a number") from None
    return out


def cmd_magnitude(a: argparse.Namespace) -> int:
    inp = MagnitudeInput(a.coef, a.sd_x, a.sd_y, a.years_x, a.years_y, 0.01 if a.scale100 else 1.0)
    res = explained_share(inp)
    flags = audit(res, _printed(a.printed)) if a.printed else []
    sentence = res.sentence(inp.years_y)
    doc = {"input": asdict(inp), "result": asdict(res), "sentence": sentence,
           "flags": [asdict(f) for f in flags]}
    print(json.dumps(doc, indent=2, sort_keys=True))
    _say(sentence)
    for f in flags:
        _say(f"flag: printed {f.quantity} = {f.printed} disagrees with recomputed {f.recomputed:.6g}")
    return 0


# simulate -------------------------------------------------------------------

SIM_PIPELINE = """[paths]
panel = panel.csv

[panel]
unit = fips
cluster = region
period = period
weight = ln_house_units

[spec]
outcome = emp_growth
endogenous = credit_growth
instruments = giv_netexp
controls = control
periods = boom
"""


def cmd_simulate(a: argparse.Namespace) -> int:
    cfg = load_scenario(a.config) if a.config else ScenarioConfig()
    if a.seed is not None:
        cfg = replace(cfg, seed=a.seed)
    out = output_dir(a.out)
    paths = write_scenario(cfg, out)
    (out / "pipeline.cfg").write_text(SIM_PIPELINE, encoding="utf-8")
    if a.reps == 1:
        _write_json(out / "report.json", asdict(run_rep(cfg, 0)))
    elif a.reps > 1:
        report = monte_carlo(cfg, a.reps, threads=a.threads)
        _write_json(out / "report.json", report.to_dict())
        _say(f"coverage {report.coverage:.3f}, median bias OLS {report.median_bias_ols:.4f} "
             f"2SLS {report.median_bias_tsls:.4f}, F median {report.f_median:.2f}")
    _say(f"wrote {len(paths)} files to {out}")
    return 0


# parser ---------------------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=1, help="worker threads (default 1)")

    p = argparse.ArgumentParser(prog="gravshift", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    s = sub.add_parser("deflate", parents=[common], help="deflate CSV columns to base-year dollars")
    s.add_argument("--index", required=True, help="price index CSV (year,index)")
    s.add_argument("--input", required=True)
    s.add_argument("--columns", nargs="+", default=["value"])
    s.add_argument("--year-column", default="year")
    s.add_argument("--base-year", type=int, default=2007)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_deflate)

    s = sub.add_parser("crosswalk", parents=[common], help="map (code,year,value) series through a crosswalk")
    s.add_argument("--table", required=True, help="crosswalk CSV (source,target,weight)")
    s.add_argument("--input", required=True, help="CSV with industry,year,value (industry = source code)")
    s.add_argument("--direction", default="")
    s.add_argument("--single-best", action="store_true")
    s.add_argument("--on-missing", choices=("error", "drop"), default="error")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_crosswalk)

    g = sub.add_parser("gravity", help="fit gravity regressions or predict purged flows")
    gs = g.add_subparsers(dest="action", metavar="{fit,predict}")
    s = gs.add_parser("fit", parents=[common])
    s.add_argument("--side", choices=SIDES, default=EXPORT)
    s.add_argument("--sigma", type=float, default=3.0)
    s.add_argument("--flows", required=True)
    s.add_argument("--tariffs", required=True)
    s.add_argument("--competitors", required=True, help="comma-separated country codes")
    s.add_argument("--focal", default="US")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gravity_fit)
    s = gs.add_parser("predict", parents=[common])
    s.add_argument("--fit", required=True)
    s.add_argument("--flows", help="override the flows file recorded in the fit")
    s.add_argument("--tariffs", help="override the tariffs file recorded in the fit")
    s.add_argument("--crosswalk", help="aggregate to industry-year levels through this crosswalk")
    s.add_argument("--on-missing", choices=("error", "drop"), default="error")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gravity_predict)

    n = sub.add_parser("netexport", help="build industry net-export ratios")
    ns = n.add_subparsers(dest="action", metavar="{build}")
    s = ns.add_parser("build", parents=[common])
    s.add_argument("--exports", required=True)
    s.add_argument("--imports", required=True)
    s.add_argument("--production", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_netexport)

    h = sub.add_parser("shiftshare", help="aggregate net-export changes to regions")
    hs = h.add_subparsers(dest="action", metavar="{aggregate}")
    s = hs.add_parser("aggregate", parents=[common])
    s.add_argument("--netexport", required=True)
    s.add_argument("--exposure", required=True)
    s.add_argument("--lag", type=_positive_int, default=1)
    s.add_argument("--from", dest="t1", type=int, required=True)
    s.add_argument("--to", dest="t2", type=int, required=True)
    s.add_argument("--kind", choices=(OBSERVED, GIV), default=OBSERVED)
    s.add_argument("--annualize", action="store_true", help="divide by the period length")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_shiftshare)

    s = sub.add_parser("cohort", parents=[common], help="quantile-group time series")
    s.add_argument("--values", required=True, help="CSV unit,year,value[,weight]")
    s.add_argument("--keys", required=True, help="CSV unit,key")
    s.add_argument("--groups", type=_positive_int, default=5)
    s.add_argument("--base-year", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cohort)

    s = sub.add_parser("estimate", parents=[common], help="run OLS, reduced form, first stage and 2SLS")
    s.add_argument("--spec", required=True)
    s.add_argument("--panel")
    s.add_argument("--out")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("diagnose", parents=[common], help="recompute diagnostics for a results file")
    s.add_argument("--results", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("magnitude", parents=[common], help="explained share of one outcome SD")
    s.add_argument("--coef", type=float, required=True)
    s.add_argument("--sd-x", type=float, required=True)
    s.add_argument("--sd-y", type=float, required=True)
    s.add_argument("--years-x", type=_positive_int, default=6)
    s.add_argument("--years-y", type=_positive_int, default=6)
    s.add_argument("--scale100", action="store_true", help="coefficient is per 100 units of the regressor")
    s.add_argument("--printed", nargs="*", default=[], metavar="KEY=VALUE",
                   help="printed chain values to audit (effect_per_year, cumulative_effect, ...)")
    s.set_defaults(func=cmd_magnitude)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic scenario and Monte Carlo report")
    s.add_argument("--config")
    s.add_argument("--reps", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        _say(f"usage error: {exc}")
        return 2
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        _say(f"error: {msg}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
