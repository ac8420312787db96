"""Weighted least squares and two-stage least squares with cluster-robust
covariance, plus the four-panel runner (OLS, reduced form, first stages, 2SLS).
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .datamodel import (
    CountyPanelRow,
    Design,
    Label,
    RegressionSpec,
    WinsorRule,
    build_stacked_panel,
)

__all__ = [
    "EstimationError", "EstimationResult", "SpecResults", "WinsorRule",
    "winsorize", "winsor_bounds", "cluster_vcov", "fit_wls", "fit_2sls", "run_spec", "make_design",
]


class EstimationError(ValueError):
    pass


class RankError(EstimationError):
    pass


def winsor_bounds(values: np.ndarray, rule: WinsorRule) -> tuple[float, float]:
    # numpy's default "linear" method is the (n-1)*p fractional-rank convention
    lo, hi = np.quantile(np.asarray(values, dtype=float), [rule.lower, rule.upper])
    return float(lo), float(hi)


def winsorize(values: Sequence[float], rule: WinsorRule, periods: Sequence | None = None) -> np.ndarray:
    """Clip values to their lower/upper quantiles.

    When ``rule.per_period`` is set, ``periods`` must be given and the
    quantiles are computed within each period separately.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise EstimationError("cannot winsorize an empty vector")
    if not rule.per_period:
        lo, hi = winsor_bounds(v, rule)
        return np.clip(v, lo, hi)
    if periods is None:
        raise EstimationError("per-period winsorization needs period ids")
    p = np.asarray(periods, dtype=object)
    out = v.copy()
    for period in dict.fromkeys(p.tolist()):
        mask = p == period
        lo, hi = winsor_bounds(v[mask], rule)
        out[mask] = np.clip(v[mask], lo, hi)
    return out


def cluster_vcov(X: np.ndarray, resid: np.ndarray, clusters: Sequence, weights: np.ndarray | None = None,
                 bread: np.ndarray | None = None) -> np.ndarray:
    """CR1 cluster-robust sandwich.

    ``X`` is the (projected, for 2SLS) regressor matrix and ``resid`` the
    structural residuals, both unweighted; analytic ``weights`` are folded
    in here.  The result is scaled by G/(G-1) * (N-1)/(N-k).
    """
    X = np.asarray(X, dtype=float)
    e = np.asarray(resid, dtype=float)
    n, k = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    codes, G = _cluster_codes(clusters)
    if G < 2:
        raise EstimationError("cluster-robust covariance needs at least two clusters")
    if bread is None:
        bread = np.linalg.inv(X.T @ (X * w[:, None]))
    scores = X * (w * e)[:, None]
    S = np.zeros((G, k))
    np.add.at(S, codes, scores)
    meat = S.T @ S
    V = bread @ meat @ bread
    V = (V + V.T) / 2
    return V * (G / (G - 1)) * ((n - 1) / (n - k))


def hc0_vcov(X: np.ndarray, resid: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Heteroskedasticity-robust sandwich without small-sample scaling."""
    X = np.asarray(X, dtype=float)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    bread = np.linalg.inv(X.T @ (X * w[:, None]))
    s = X * (w * np.asarray(resid, dtype=float))[:, None]
    return bread @ (s.T @ s) @ bread


def _cluster_codes(clusters: Sequence) -> tuple[np.ndarray, int]:
    _, codes = np.unique(np.asarray([str(c) for c in clusters], dtype=object), return_inverse=True)
    return codes, int(codes.max()) + 1 if len(codes) else 0


def _check_rank(A: np.ndarray, labels: Sequence[Label], what: str) -> None:
    if A.shape[1] == 0:
        return
    if A.shape[0] < A.shape[1]:
        raise RankError(f"{what}: {A.shape[1]} columns but only {A.shape[0]} rows")
    _, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(A.shape) * np.finfo(float).eps * 1e3 if diag.size and diag[0] > 0 else 0.0
    rank = int(np.sum(diag > tol)) if diag.size and diag[0] > 0 else 0
    if rank < A.shape[1]:
        bad = labels[piv[rank]] if rank < len(piv) else labels[-1]
        raise RankError(f"{what} is rank deficient; column {bad} is linearly dependent on the others")


@dataclass
class EstimationResult:
    params: np.ndarray
    labels: tuple[Label, ...]
    vcov: np.ndarray
    resid: np.ndarray
    n: int
    G: int
    k: int
    method: str
    outcome: str = "y"
    weight: str | None = None
    winsor: tuple[float, float] | dict | None = None
    r2: float = math.nan
    first_stages: list[EstimationResult] = field(default_factory=list)
    reduced_form: EstimationResult | None = None
    design: Design | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if len(self.labels) != len(self.params):
            raise EstimationError("label count does not match coefficient count")

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def index(self, label: Label | tuple[str, str | None] | str) -> int:
        if isinstance(label, str):
            hits = [i for i, l in enumerate(self.labels) if l.name == label]
            if len(hits) != 1:
                raise KeyError(f"label {label!r} matches {len(hits)} coefficients; use (name, period)")
            return hits[0]
        lab = Label(*label)
        try:
            return self.labels.index(lab)
        except ValueError:
            raise KeyError(f"no coefficient labelled {lab}") from None

    def coef(self, label) -> float:
        return float(self.params[self.index(label)])

    def stderr(self, label) -> float:
        return float(self.se[self.index(label)])

    def table(self) -> list[dict]:
        return [{"label": l.name, "period": l.period, "coef": float(b), "se": float(s)}
                for l, b, s in zip(self.labels, self.params, self.se)]


def _weighted_r2(y: np.ndarray, resid: np.ndarray, w: np.ndarray) -> float:
    ybar = np.sum(w * y) / np.sum(w)
    tss = float(np.sum(w * (y - ybar) ** 2))
    rss = float(np.sum(w * resid ** 2))
    if tss == 0:
        return 1.0 if rss == 0 else math.nan
    return 1.0 - rss / tss


def make_design(y, X, weights=None, clusters=None, labels=None, endog_idx=(), Z=None, z_labels=None,
                outcome: str = "y") -> Design:
    """Wrap plain arrays as a :class:`Design` (one period, labels x0, x1, ...)."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(y)
    Z = np.empty((n, 0)) if Z is None else np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    labels = tuple(Label(str(l), None) if isinstance(l, str) else Label(*l) for l in labels) if labels \
        else tuple(Label(f"x{j}", None) for j in range(X.shape[1]))
    z_labels = tuple(Label(str(l), None) if isinstance(l, str) else Label(*l) for l in z_labels) if z_labels \
        else tuple(Label(f"z{j}", None) for j in range(Z.shape[1]))
    return Design(
        y=y, X=X, labels=labels, endog_idx=tuple(endog_idx), Z=Z, z_labels=z_labels,
        weights=np.ones(n) if weights is None else np.asarray(weights, dtype=float),
        clusters=np.arange(n).astype(str).astype(object) if clusters is None else np.asarray(clusters, dtype=object),
        units=np.arange(n).astype(str).astype(object), periods=np.full(n, "all", dtype=object), outcome=outcome,
    )


def fit_wls(design: Design, method: str = "ols") -> EstimationResult:
    """Weighted least squares of ``design.y`` on every column of ``design.X``.

    Minimizes sum_i w_i (y_i - x_i b)^2 by solving the row-scaled problem
    with sqrt(w_i).
    """
    y, X, w = design.y, design.X, design.weights
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    _check_rank(Xw, design.labels, "regressor matrix")
    beta, *_ = np.linalg.lstsq(Xw, y * sw, rcond=None)
    resid = y - X @ beta
    _, G = _cluster_codes(design.clusters)
    bread = np.linalg.inv(Xw.T @ Xw)
    V = cluster_vcov(X, resid, design.clusters, w, bread=bread)
    return EstimationResult(
        params=beta, labels=design.labels, vcov=V, resid=resid, n=len(y), G=G, k=X.shape[1],
        method=method, outcome=design.outcome, r2=_weighted_r2(y, resid, w), design=design,
    )


def _first_stage_design(design: Design, target: np.ndarray, name: str) -> Design:
    W = np.column_stack([design.exog, design.Z])
    labels = design.exog_labels + design.z_labels
    return Design(y=target, X=W, labels=labels, endog_idx=(), Z=np.empty((design.n, 0)), z_labels=(),
                  weights=design.weights, clusters=design.clusters, units=design.units,
                  periods=design.periods, outcome=name)


def reduced_form_design(design: Design) -> Design:
    return _first_stage_design(design, design.y, design.outcome)


def first_stage_designs(design: Design) -> list[Design]:
    return [_first_stage_design(design, design.X[:, i], str(design.labels[i])) for i in design.endog_idx]


def fit_2sls(design: Design, with_stages: bool = True) -> EstimationResult:
    """Two-stage least squares with analytic weights.

    Endogenous columns of ``X`` are projected on [exogenous columns,
    excluded instruments]; the covariance uses the structural residuals
    y - X b, not the second-stage ones.
    """
    n_endog, n_instr = len(design.endog_idx), design.Z.shape[1]
    if n_instr < n_endog:
        raise RankError(f"under-identified: {n_instr} excluded instruments for {n_endog} endogenous regressors")
    y, X, w = design.y, design.X, design.weights
    sw = np.sqrt(w)
    W = np.column_stack([design.exog, design.Z])
    Ww = W * sw[:, None]
    _check_rank(Ww, design.exog_labels + design.z_labels, "instrument matrix")
    coef, *_ = np.linalg.lstsq(Ww, X * sw[:, None], rcond=None)
    Xhat = W @ coef
    # exogenous columns project onto themselves; keep them exact
    exog = list(design.exog_idx)
    Xhat[:, exog] = X[:, exog]
    Xhw = Xhat * sw[:, None]
    try:
        _check_rank(Xhw, design.labels, "projected regressor matrix")
    except RankError as exc:
        raise RankError(f"under-identified: {exc}") from None
    A = Xhw.T @ Xhw
    beta = np.linalg.solve(A, Xhw.T @ (y * sw))
    resid = y - X @ beta
    _, G = _cluster_codes(design.clusters)
    V = cluster_vcov(Xhat, resid, design.clusters, w, bread=np.linalg.inv(A))
    res = EstimationResult(
        params=beta, labels=design.labels, vcov=V, resid=resid, n=len(y), G=G, k=X.shape[1],
        method="2sls", outcome=design.outcome, r2=_weighted_r2(y, resid, w), design=design,
    )
    if with_stages:
        res.first_stages = [fit_wls(d, method="first_stage") for d in first_stage_designs(design)]
        res.reduced_form = fit_wls(reduced_form_design(design), method="reduced_form")
    return res


@dataclass
class SpecResults:
    """The four panels of one specification."""

    spec: RegressionSpec
    design: Design
    ols: EstimationResult
    reduced_form: EstimationResult
    first_stages: list[EstimationResult]
    tsls: EstimationResult
    winsor_bounds: dict[str, tuple[float, float]] = field(default_factory=dict)

    def panels(self) -> dict[str, list[EstimationResult]]:
        return {"ols": [self.ols], "reduced_form": [self.reduced_form],
                "first_stage": list(self.first_stages), "2sls": [self.tsls]}


def _winsorize_rows(rows: Sequence[CountyPanelRow], spec: RegressionSpec
                    ) -> tuple[list[CountyPanelRow], dict[str, tuple[float, float]]]:
    rows = [r for r in rows if r.period in spec.periods]
    if spec.winsor is None or not rows:
        return list(rows), {}
    rule = spec.winsor
    try:
        y = np.array([r.values[spec.outcome] for r in rows], dtype=float)
    except KeyError:
        raise EstimationError(f"unknown outcome column {spec.outcome!r}") from None
    periods = [r.period for r in rows]
    clipped = winsorize(y, rule, periods)
    bounds: dict[str, tuple[float, float]] = {}
    if rule.per_period:
        for p in spec.periods:
            mask = np.array([q == p for q in periods])
            if mask.any():
                bounds[p] = winsor_bounds(y[mask], rule)
    else:
        bounds["all"] = winsor_bounds(y, rule)
    out = []
    for r, v in zip(rows, clipped):
        values = dict(r.values)
        values[spec.outcome] = float(v)
        out.append(dataclasses.replace(r, values=values))
    return out, bounds


def run_spec(rows: Sequence[CountyPanelRow], spec: RegressionSpec) -> SpecResults:
    """Winsorize the outcome, stack, and estimate all four panels."""
    try:
        rows_w, bounds = _winsorize_rows(rows, spec)
        design = build_stacked_panel(rows_w, spec)
        ols = fit_wls(design, method="ols")
        tsls = fit_2sls(design)
    except ValueError as exc:
        raise EstimationError(f"spec with outcome {spec.outcome!r}: {exc}") from exc
    meta = {"weight": spec.weight, "winsor": {k: list(v) for k, v in bounds.items()} or None}
    for r in [ols, tsls, tsls.reduced_form, *tsls.first_stages]:
        r.weight = meta["weight"]
        r.winsor = meta["winsor"]
    return SpecResults(spec, design, ols, tsls.reduced_form, tsls.first_stages, tsls, bounds)
