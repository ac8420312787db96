"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import math

import numpy as np
import pytest


def dummies(ids, drop_first: bool = False) -> np.ndarray:
    levels = sorted(set(ids), key=str)
    if drop_first:
        levels = levels[1:]
    return np.array([[1.0 if i == l else 0.0 for l in levels] for i in ids]).reshape(len(ids), len(levels))


def dense_fe_regression(y, X, families) -> np.ndarray:
    """Slope coefficients from least squares with one dummy per FE level.

    Redundant dummies are harmless: lstsq returns the minimum-norm solution
    and the slopes are identified whenever the FE-absorbed design is.
    """
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    D = np.hstack([dummies(f) for f in families])
    full = np.hstack([X, D])
    beta, *_ = np.linalg.lstsq(full, np.asarray(y, dtype=float), rcond=None)
    return beta[: X.shape[1]]


def normal_equations(y, X, w=None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    return np.linalg.solve(X.T @ np.diag(w) @ X, X.T @ np.diag(w) @ np.asarray(y, dtype=float))


def naive_cluster_vcov(X, e, clusters, w=None) -> np.ndarray:
    """Loop-over-clusters CR1 sandwich."""
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    bread = np.linalg.inv(X.T @ np.diag(w) @ X)
    meat = np.zeros((k, k))
    labels = sorted(set(clusters), key=str)
    for g in labels:
        idx = [i for i, c in enumerate(clusters) if c == g]
        s = sum(w[i] * e[i] * X[i] for i in idx)
        meat += np.outer(s, s)
    G = len(labels)
    return bread @ meat @ bread * G / (G - 1) * (n - 1) / (n - k)


def sort_interp_quantile(values, p: float) -> float:
    """Quantile at fractional rank (n - 1) * p of the sorted sample."""
    v = sorted(values)
    h = (len(v) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (h - lo) * (v[hi] - v[lo])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = mod.summary_lines() if mod is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
