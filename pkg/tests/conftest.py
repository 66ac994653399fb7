"""Shared fixtures and independent dense-matrix oracles.

The oracles deliberately avoid the package's iterative solver and
sparse-variance code paths: fixed effects are fit by dense
dummy-variable least squares (numpy lstsq), the clustered variance is
an explicit per-cluster loop over dense matrices, and the one-step
regression weights come from dense residualization. Tests compare the
production implementations against these.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

import twostage_did as tsd
from twostage_did.estimator import second_stage_design
from twostage_did.fe import sparse_design


# --- randomized panels ------------------------------------------------------


def random_panel(
    seed: int,
    n_covariates: int | None = None,
    weighted: bool | None = None,
    balanced: bool | None = None,
    noise_sd: float = 1.0,
    max_units: int = 12,
):
    """Random identified staggered panel plus covariates.

    Construction guarantees identification of the two-stage pipeline:
    unit 0 is never treated and keeps all its rows (every period has an
    untreated observation), every other unit keeps its first-period row
    (every unit appears untreated), and treatment never starts before
    the third period (the untreated sample is connected through the
    first two periods).
    """
    rng = np.random.default_rng(seed)
    n_units = int(rng.integers(4, max_units + 1))
    n_periods = int(rng.integers(4, 9))
    start = int(rng.integers(1990, 2005))
    if balanced is None:
        balanced = bool(rng.integers(0, 2))
    if weighted is None:
        weighted = bool(rng.integers(0, 2))
    if n_covariates is None:
        n_covariates = int(rng.integers(0, 3))

    units = np.repeat(np.arange(n_units), n_periods)
    times = np.tile(np.arange(start, start + n_periods), n_units)
    g0 = np.array(
        [
            math.inf
            if rng.random() < 0.3
            else float(rng.integers(start + 2, start + n_periods))
            for _ in range(n_units)
        ]
    )
    g0[0] = math.inf
    g0[1] = float(start + 2)  # at least one treated unit, whatever the draws
    group = g0[units]

    if balanced:
        keep = np.ones(units.shape[0], dtype=bool)
    else:
        keep = rng.random(units.shape[0]) > 0.15
        keep[units == 0] = True
        keep[times == start] = True
        keep[(units == 1) & (times == start + n_periods - 1)] = True
    units, times, group = units[keep], times[keep], group[keep]
    n = units.shape[0]

    cov = rng.normal(size=(n, n_covariates)) if n_covariates else None
    beta = rng.normal(size=n_covariates) if n_covariates else None

    mu = rng.normal(0.0, 2.0, size=n_units)
    eta = rng.normal(0.0, 1.0, size=n_periods)
    base = rng.normal(1.5, 1.0, size=n_units)
    treated = times >= group
    rel = np.where(treated, times - group, 0.0)
    tau = np.where(treated, base[units] + 0.3 * rel, 0.0)
    y = mu[units] + eta[times - start] + tau + noise_sd * rng.normal(size=n)
    if cov is not None:
        y = y + cov @ beta

    weights = rng.uniform(0.5, 2.0, size=n) if weighted else None
    data = tsd.build_dataset(
        unit=units, time=times, outcome=y, group=group, weights=weights
    )
    return data, cov


# --- dense oracles ----------------------------------------------------------


def dense_first_stage(data, cov=None, weights=None, effects=("unit", "time")):
    """Dense dummy-variable WLS of the first stage; predictions for all rows.

    Builds the same columns as the production sparse design but solves
    by numpy lstsq on the untreated rows.
    """
    mask = ~data.treated
    spec = tsd.panel_fe_spec(data, effects=effects, covariates=cov, sample_mask=mask)
    X = sparse_design(spec, weights).matrix.toarray()
    w = np.ones(data.n_obs) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w[mask])
    beta, *_ = np.linalg.lstsq(X[mask] * sw[:, None], data.outcome[mask] * sw, rcond=None)
    return X @ beta


def dense_two_stage(data, cov=None, second=None, effects=("unit", "time")):
    """Full two-stage pipeline on dense matrices; returns (terms, coefs).

    The coefficient vector includes the intercept first, matching the
    production second-stage design.
    """
    second = second or tsd.SecondStageSpec()
    w = data.weights
    ytil = data.outcome - dense_first_stage(data, cov, w, effects)
    X2, terms, _ = second_stage_design(data.rel_time, data.treated, second)
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(X2 * sw[:, None], ytil * sw, rcond=None)
    return terms, beta


def dense_gmm_vcov(data, cov, X2, ytilde, e2, clusters=None, weights=None):
    """Explicit dense evaluation of the corrected clustered sandwich."""
    mask = ~data.treated
    spec = tsd.panel_fe_spec(data, covariates=cov, sample_mask=mask)
    X1 = sparse_design(spec, weights).matrix.toarray()
    n = X1.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    X1 = X1 * sw[:, None]
    X2 = X2 * sw[:, None]
    e1 = np.where(data.treated, 0.0, ytilde) * sw
    e2 = e2 * sw
    X10 = X1.copy()
    X10[data.treated] = 0.0
    gram10_inv = np.linalg.inv(X10.T @ X10)
    bread = np.linalg.inv(X2.T @ X2)
    propagate = (X2.T @ X1) @ gram10_inv
    clusters = data.cluster if clusters is None else clusters
    k2 = X2.shape[1]
    meat = np.zeros((k2, k2))
    for c in np.unique(clusters):
        m = clusters == c
        w_g = X2[m].T @ e2[m] - propagate @ (X10[m].T @ e1[m])
        meat += np.outer(w_g, w_g)
    return bread @ meat @ bread


def dense_fwl_weights(data):
    """Cell weights from dense residualization of the treatment indicator."""
    mask_all = np.ones(data.n_obs, dtype=bool)
    spec = tsd.panel_fe_spec(data, sample_mask=mask_all)
    X = sparse_design(spec, data.weights).matrix.toarray()
    w = data.weights
    sw = np.sqrt(w)
    D = data.treated.astype(float)
    beta, *_ = np.linalg.lstsq(X * sw[:, None], D * sw, rcond=None)
    dtil = D - X @ beta
    denom = np.sum(w * dtil * D)
    out = {}
    for i in np.flatnonzero(data.treated):
        key = (int(data.group[i]), int(data.time[i]))
        out[key] = out.get(key, 0.0) + w[i] * dtil[i] / denom
    return out


# --- hand-built fixtures ----------------------------------------------------


@pytest.fixture
def hand_panel():
    """2 units x 3 periods; unit 2 treated at t=3 with effect 5."""
    return tsd.build_dataset(
        unit=[1, 1, 1, 2, 2, 2],
        time=[1, 2, 3, 1, 2, 3],
        outcome=[10.0, 11.0, 12.0, 20.0, 21.0, 27.0],
        group=[math.inf] * 3 + [3.0] * 3,
    )


@pytest.fixture
def staggered_pair():
    """Balanced 2-unit staggered panel (g=2 and g=3), no never-treated.

    Effects tau(E,2)=1, tau(E,3)=3, tau(L,3)=1 on zero fixed effects.
    """
    return tsd.build_dataset(
        unit=["E"] * 3 + ["L"] * 3,
        time=[1, 2, 3, 1, 2, 3],
        outcome=[0.0, 1.0, 3.0, 0.0, 0.0, 1.0],
        group=[2.0] * 3 + [3.0] * 3,
    )


def exact_fe_panel(seed=0, n_units=6, n_periods=5, effect=None, never_share=0.4):
    """Noise-free panel whose outcome is exactly additive in unit/time.

    ``effect`` maps (group, time) to the treatment effect added on
    treated rows; None means no effect anywhere.
    """
    rng = np.random.default_rng(seed)
    start = 2000
    units = np.repeat(np.arange(n_units), n_periods)
    times = np.tile(np.arange(start, start + n_periods), n_units)
    g0 = np.array(
        [
            math.inf
            if rng.random() < never_share
            else float(rng.integers(start + 2, start + n_periods))
            for _ in range(n_units)
        ]
    )
    g0[0] = math.inf
    group = g0[units]
    mu = rng.normal(0.0, 3.0, size=n_units)
    eta = rng.normal(0.0, 1.0, size=n_periods)
    y = mu[units] + eta[times - start]
    if effect is not None:
        treated = times >= group
        for i in np.flatnonzero(treated):
            y[i] += effect(int(group[i]), int(times[i]))
    return tsd.build_dataset(unit=units, time=times, outcome=y, group=group)
