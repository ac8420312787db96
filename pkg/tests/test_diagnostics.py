import numpy as np
import pytest
from scipy import stats

from conftest import naive_cluster_vcov
from gravshift.datamodel import Label
from gravshift.diagnostics import (
    UnsupportedConfiguration,
    chi2_sf,
    diagnose,
    efficient_f,
    joint_strength_pvalue,
    robust_f_pvalue,
    robust_first_stage_f,
    sw_f,
    wald_equality,
)
from gravshift.estimate import EstimationError, EstimationResult, RankError, fit_2sls, make_design, run_spec
from test_estimate import iv_design, panel_rows, TestRunSpec

Z0 = ("z0", None)


def fake_result(params, vcov, labels=("a", "b")):
    return EstimationResult(params=np.asarray(params, float), vcov=np.asarray(vcov, float),
                            labels=tuple(Label(l, None) for l in labels), resid=np.zeros(1), n=10, G=5,
                            k=len(labels), r2=0.0, method="fake", weight=None, winsor=None)


def test_chi2_sf_matches_scipy():
    for dof in (1, 2, 4, 7):
        for x in (0.1, 1.0, 3.84, 12.0):
            assert chi2_sf(x, dof) == pytest.approx(stats.chi2.sf(x, dof), rel=1e-12)
    assert chi2_sf(0.0, 3) == 1.0


def test_robust_f_is_squared_t(rng):
    for _ in range(20):
        d = iv_design(rng)
        fs = fit_2sls(d).first_stages[0]
        t = fs.coef(Z0) / fs.stderr(Z0)
        F = robust_first_stage_f(fs, [Z0])
        assert F == pytest.approx(t * t, abs=1e-10, rel=1e-12)
        assert efficient_f(fs, [Z0]) == F
        assert sw_f(d, ("e0", None)) == pytest.approx(F, abs=1e-10, rel=1e-12)


def test_sw_one_endogenous_from_design(rng):
    d = iv_design(rng)
    fs = fit_2sls(d).first_stages[0]
    assert sw_f(d, ("e0", None)) == pytest.approx(robust_first_stage_f(fs, [Z0]), abs=1e-10, rel=1e-12)


def test_hand_quadratic_form():
    # 12 rows, 2 clusters: the F equals b^2 / V computed by the looped sandwich
    x = np.array([0.3, -1.2, 0.8, 1.5, -0.4, 0.9, -0.7, 2.1, 0.2, -1.6, 1.1, 0.5])
    z = np.array([1.0, -0.5, 0.2, 1.3, -1.1, 0.4, -0.9, 1.8, 0.1, -1.2, 0.7, 0.6])
    y = 0.5 * x + np.sin(np.arange(12.0))
    cl = ["A"] * 6 + ["B"] * 6
    d = make_design(y, np.column_stack([np.ones(12), x]), clusters=cl, endog_idx=[1], Z=z,
                    labels=["const", "x"])
    fs = fit_2sls(d).first_stages[0]
    W = np.column_stack([np.ones(12), z])
    b = np.linalg.lstsq(W, x, rcond=None)[0]
    V = naive_cluster_vcov(W, x - W @ b, cl, np.ones(12))
    assert robust_first_stage_f(fs, [Z0]) == pytest.approx(b[1] ** 2 / V[1, 1], rel=1e-10)


def test_wald_equality_closed_form():
    t = wald_equality(fake_result([1.0, 0.0], np.eye(2)), "a", "b")
    assert t.stat == 0.5 and t.dof == 1
    assert t.pvalue == pytest.approx(stats.chi2.sf(0.5, 1), rel=1e-12)


def test_wald_equality_symmetric(rng):
    A = rng.normal(size=(2, 2))
    r = fake_result(rng.normal(size=2), A @ A.T + np.eye(2))
    assert wald_equality(r, "a", "b") == wald_equality(r, "b", "a")


def test_wald_equality_degenerate():
    with pytest.raises(EstimationError):
        wald_equality(fake_result([1.0, 0.0], np.ones((2, 2))), "a", "b")


def test_efficient_f_refuses_overidentified(rng):
    fs = fit_2sls(iv_design(rng, instr=2)).first_stages[0]
    with pytest.raises(UnsupportedConfiguration):
        efficient_f(fs, [Z0, ("z1", None)])
    with pytest.raises(UnsupportedConfiguration):
        efficient_f(fs, [Z0], n_endogenous=2)


def test_joint_equals_robust_p_in_one_by_one(rng):
    fs = fit_2sls(iv_design(rng)).first_stages
    assert joint_strength_pvalue(fs, [Z0]) == pytest.approx(robust_f_pvalue(fs[0], [Z0]), rel=1e-10)


def test_joint_refuses_e_not_l(rng):
    fs = fit_2sls(iv_design(rng, instr=2)).first_stages
    with pytest.raises(UnsupportedConfiguration):
        joint_strength_pvalue(fs, [Z0, ("z1", None)])


def test_two_endogenous(rng):
    d = iv_design(rng, n=200, G=30, endog=2, instr=2)
    r = fit_2sls(d)
    p = joint_strength_pvalue(r.first_stages, [Z0, ("z1", None)])
    assert 0.0 <= p <= 1.0
    for e in ("e0", "e1"):
        assert sw_f(d, (e, None)) > 0


def test_duplicated_endogenous(rng):
    d = iv_design(rng, endog=1, instr=2)
    X = np.column_stack([d.X, d.X[:, -1]])
    d2 = make_design(d.y, X, labels=list(d.labels) + ["dup"], endog_idx=[X.shape[1] - 2, X.shape[1] - 1],
                     Z=d.Z, clusters=d.clusters)
    with pytest.raises(RankError):
        sw_f(d2, ("e0", None))


def test_rescaling_invariance(rng):
    d = iv_design(rng)
    F = sw_f(d, ("e0", None))
    d2 = make_design(d.y * 3.0, d.X * np.r_[np.ones(d.X.shape[1] - 1), 7.0], weights=d.weights,
                     clusters=d.clusters, labels=d.labels, endog_idx=d.endog_idx, Z=d.Z * -0.2)
    assert sw_f(d2, ("e0", None)) == pytest.approx(F, rel=1e-9)
    fs1, fs2 = fit_2sls(d).first_stages[0], fit_2sls(d2).first_stages[0]
    assert robust_first_stage_f(fs2, [Z0]) == pytest.approx(robust_first_stage_f(fs1, [Z0]), rel=1e-9)


def test_diagnose_stacked(rng):
    res = run_spec(panel_rows(rng, n=80, G=20), TestRunSpec().spec())
    rep = diagnose(res)
    assert [b.period for b in rep.blocks] == ["boom", "bust"]
    for b in rep.blocks:
        (name, F), = b.robust_f.items()
        assert b.efficient_f == F
        assert b.sw_f[name] == pytest.approx(F, rel=1e-8)
        assert b.joint_strength_p == pytest.approx(chi2_sf(F, 1), rel=1e-8)
    assert list(rep.equality_tests) == ["x[boom]=x[bust]"]
    assert set(rep.to_dict()) == {"blocks", "equality_tests", "notes"}
