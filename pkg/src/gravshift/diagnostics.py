"""Weak-instrument and coefficient-equality diagnostics.

Only the just-identified configurations (one or two endogenous regressors,
as many excluded instruments) are covered.  In those the clustered
Kleibergen-Paap and Montiel Olea-Pflueger statistics reduce to cluster-robust
Wald F forms, which is what is computed here; overidentified inputs to the
efficient F and the joint-strength test are refused.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaincc

from .datamodel import Design, Label
from .estimate import (
    EstimationError,
    EstimationResult,
    RankError,
    SpecResults,
    _check_rank,
    _cluster_codes,
    fit_2sls,
    fit_wls,
)


class UnsupportedConfiguration(EstimationError):
    pass


def chi2_sf(stat: float, dof: int) -> float:
    """Upper-tail chi-square probability."""
    if stat <= 0:
        return 1.0
    return float(gammaincc(dof / 2.0, stat / 2.0))


@dataclass(frozen=True)
class WaldTest:
    stat: float
    dof: int
    pvalue: float


def _wald(params: np.ndarray, vcov: np.ndarray) -> float:
    b = np.asarray(params, dtype=float)
    if np.allclose(b, 0.0, atol=0.0, rtol=0.0):
        return 0.0
    return float(b @ np.linalg.solve(vcov, b))


def _resolve(result: EstimationResult, labels: Sequence) -> list[int]:
    try:
        return [result.index(l) for l in labels]
    except KeyError as exc:
        raise EstimationError(f"instrument not in first stage: {exc}") from None


def robust_first_stage_f(first_stage: EstimationResult, instruments: Sequence) -> float:
    """Cluster-robust Wald statistic on the excluded instruments divided by their count."""
    idx = _resolve(first_stage, instruments)
    if not idx:
        raise EstimationError("no excluded instruments given")
    b = first_stage.params[idx]
    V = first_stage.vcov[np.ix_(idx, idx)]
    return _wald(b, V) / len(idx)


def robust_f_pvalue(first_stage: EstimationResult, instruments: Sequence) -> float:
    q = len(instruments)
    return chi2_sf(q * robust_first_stage_f(first_stage, instruments), q)


def efficient_f(first_stage: EstimationResult, instruments: Sequence, n_endogenous: int = 1) -> float:
    """Effective F in the one-instrument, one-endogenous case, where it equals the robust F."""
    if n_endogenous != 1 or len(instruments) != 1:
        raise UnsupportedConfiguration(
            f"efficient F is implemented only for one instrument and one endogenous regressor "
            f"(got {len(instruments)} and {n_endogenous})")
    return robust_first_stage_f(first_stage, instruments)


def _subdesign(design: Design, endog: Sequence[Label], instruments: Sequence[Label]) -> Design:
    endog = [Label(*l) for l in endog]
    instruments = [Label(*l) for l in instruments]
    try:
        keep_endog = [design.labels.index(l) for l in endog]
        keep_z = [design.z_labels.index(l) for l in instruments]
    except ValueError as exc:
        raise EstimationError(f"label not in design: {exc}") from None
    # instruments outside the block stay in as controls so the conditional
    # first stage has the same regressors as the real one
    extra = [i for i in range(len(design.z_labels)) if i not in keep_z]
    exog = list(design.exog_idx)
    X = np.column_stack([design.X[:, exog], design.Z[:, extra], design.X[:, keep_endog]])
    labels = tuple(design.labels[i] for i in exog) + tuple(design.z_labels[i] for i in extra) \
        + tuple(design.labels[i] for i in keep_endog)
    n_exog = len(exog) + len(extra)
    return Design(y=design.y, X=X, labels=labels, endog_idx=tuple(range(n_exog, n_exog + len(keep_endog))),
                  Z=design.Z[:, keep_z], z_labels=tuple(design.z_labels[i] for i in keep_z),
                  weights=design.weights, clusters=design.clusters, units=design.units,
                  periods=design.periods, outcome=design.outcome)


def sw_f(design: Design, target: Label | tuple, endogenous: Sequence | None = None,
         instruments: Sequence | None = None) -> float:
    """Sanderson-Windmeijer conditional first-stage F for one endogenous regressor.

    The target is regressed by 2SLS on the other endogenous regressors (and
    the exogenous columns); its structural residual is then regressed on
    the excluded instruments, and the clustered Wald statistic is divided
    by L - E + 1.
    """
    target = Label(*target)
    endogenous = list(design.endog_labels) if endogenous is None else [Label(*l) for l in endogenous]
    instruments = list(design.z_labels) if instruments is None else [Label(*l) for l in instruments]
    if target not in endogenous:
        raise EstimationError(f"{target} is not among the endogenous regressors")
    E, L = len(endogenous), len(instruments)
    if L < E:
        raise RankError(f"under-identified: {L} instruments for {E} endogenous regressors")
    sub = _subdesign(design, endogenous, instruments)
    _check_rank(sub.endog * np.sqrt(sub.weights)[:, None], sub.endog_labels, "endogenous block")

    t_col = sub.labels.index(target)
    x_t = sub.X[:, t_col]
    others = [i for i in sub.endog_idx if i != t_col]
    if others:
        exog = list(sub.exog_idx)
        cols = exog + others
        inner = Design(y=x_t, X=sub.X[:, cols], labels=tuple(sub.labels[i] for i in cols),
                       endog_idx=tuple(range(len(exog), len(cols))), Z=sub.Z, z_labels=sub.z_labels,
                       weights=sub.weights, clusters=sub.clusters, units=sub.units, periods=sub.periods)
        resid = fit_2sls(inner, with_stages=False).resid
    else:
        resid = x_t
    fs = Design(y=resid, X=np.column_stack([sub.exog, sub.Z]), labels=sub.exog_labels + sub.z_labels,
                endog_idx=(), Z=np.empty((sub.n, 0)), z_labels=(), weights=sub.weights,
                clusters=sub.clusters, units=sub.units, periods=sub.periods)
    res = fit_wls(fs, method="sw_first_stage")
    idx = _resolve(res, sub.z_labels)
    return _wald(res.params[idx], res.vcov[np.ix_(idx, idx)]) / (L - E + 1)


def wald_equality(result: EstimationResult, a, b) -> WaldTest:
    """Chi-square(1) test that two coefficients are equal."""
    i, j = result.index(a), result.index(b)
    diff = result.params[i] - result.params[j]
    var = result.vcov[i, i] + result.vcov[j, j] - 2 * result.vcov[i, j]
    if not var > 0:
        raise EstimationError(f"contrast {a} - {b} has zero variance")
    stat = float(diff ** 2 / var)
    return WaldTest(stat, 1, chi2_sf(stat, 1))


def joint_strength_pvalue(first_stages: Sequence[EstimationResult], instruments: Sequence) -> float:
    """Joint Wald test that every excluded-instrument coefficient in every
    first stage is zero, with a clustered cross-equation covariance.

    All first stages must share one regressor matrix (as produced by
    :func:`gravshift.estimate.fit_2sls`).  Requires as many instruments as
    first stages.  Returns the chi-square(E*L) upper-tail probability.
    """
    E, L = len(first_stages), len(instruments)
    if E != L:
        raise UnsupportedConfiguration(f"joint strength test needs E = L (got E={E}, L={L})")
    if E == 0:
        raise EstimationError("no first stages")
    return _joint_wald(first_stages, instruments).pvalue


def _joint_wald(first_stages: Sequence[EstimationResult], instruments: Sequence) -> WaldTest:
    fs0 = first_stages[0]
    design = fs0.design
    if design is None:
        raise EstimationError("joint strength test needs first stages fitted by fit_wls")
    W = design.X
    w = design.weights
    n, k = W.shape
    codes, G = _cluster_codes(design.clusters)
    bread = np.linalg.inv(W.T @ (W * w[:, None]))
    scores = []
    for fs in first_stages:
        if fs.labels != fs0.labels or fs.design is None or fs.design.X.shape != W.shape \
                or not np.array_equal(fs.design.X, W):
            raise EstimationError("first stages do not share a regressor matrix")
        S = np.zeros((G, k))
        np.add.at(S, codes, W * (w * fs.resid)[:, None])
        scores.append(S @ bread)  # G x k, rows are bread-weighted cluster scores
    idx = _resolve(fs0, instruments)
    B = np.hstack([s[:, idx] for s in scores])
    V = B.T @ B * (G / (G - 1)) * ((n - 1) / (n - k))
    b = np.concatenate([fs.params[idx] for fs in first_stages])
    stat = _wald(b, V)
    dof = len(b)
    return WaldTest(stat, dof, chi2_sf(stat, dof))


@dataclass
class BlockDiagnostics:
    """Diagnostics for one period block of a (stacked) specification."""

    period: str | None
    endogenous: list[str]
    instruments: list[str]
    robust_f: dict[str, float]
    efficient_f: float | None
    sw_f: dict[str, float]
    joint_strength_p: float | None


@dataclass
class DiagnosticsReport:
    blocks: list[BlockDiagnostics] = field(default_factory=list)
    equality_tests: dict[str, dict] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _blocks(design: Design) -> list[tuple[str | None, list[Label], list[Label]]]:
    # With period-interacted columns each period's first stage only involves
    # that period's instruments; pooled columns belong to every block.
    periods = sorted({l.period for l in design.endog_labels if l.period is not None})
    if not periods:
        return [(None, list(design.endog_labels), list(design.z_labels))]
    out = []
    for p in periods:
        en = [l for l in design.endog_labels if l.period in (p, None)]
        zz = [l for l in design.z_labels if l.period in (p, None)]
        out.append((p, en, zz))
    return out


def diagnose(results: SpecResults) -> DiagnosticsReport:
    """Every weak-IV statistic and boom/bust equality test the design supports."""
    design = results.design
    report = DiagnosticsReport()
    fs_by_label = dict(zip(design.endog_labels, results.first_stages))
    for period, endog, instr in _blocks(design):
        robust = {str(e): robust_first_stage_f(fs_by_label[e], instr) for e in endog}
        eff = None
        if len(endog) == 1 and len(instr) == 1:
            eff = efficient_f(fs_by_label[endog[0]], instr)
        sw = {}
        for e in endog:
            try:
                sw[str(e)] = sw_f(design, e, endog, instr)
            except RankError as exc:
                report.notes.append(f"SW F for {e} unavailable: {exc}")
        joint = None
        if len(endog) == len(instr):
            joint = joint_strength_pvalue([fs_by_label[e] for e in endog], instr)
        report.blocks.append(BlockDiagnostics(period, [str(e) for e in endog], [str(z) for z in instr],
                                              robust, eff, sw, joint))
    names = dict.fromkeys(l.name for l in design.endog_labels if l.period is not None)
    periods = list(results.spec.periods)
    for name in names:
        for p, q in zip(periods, periods[1:]):
            try:
                t = wald_equality(results.tsls, (name, p), (name, q))
            except (KeyError, EstimationError):
                continue
            report.equality_tests[f"{name}[{p}]={name}[{q}]"] = asdict(t)
    return report
