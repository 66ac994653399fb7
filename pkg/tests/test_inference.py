"""Corrected clustered variance and cluster bootstrap."""

import math

import numpy as np
import pytest

import twostage_did as tsd
from twostage_did import errors
from twostage_did.estimator import second_stage_design
from twostage_did.fe import dense_ols, fit_fixed_effects, predict, sparse_design
from twostage_did.inference import InferenceSpec, gmm_vcov

from conftest import dense_gmm_vcov, exact_fe_panel, random_panel


def _pipeline(data, cov, kind="static"):
    """Adjusted outcomes and second-stage pieces for vcov tests."""
    spec = tsd.panel_fe_spec(data, covariates=cov, sample_mask=~data.treated)
    fit = fit_fixed_effects(data.outcome, spec, data.weights, tol=1e-12)
    ytil = data.outcome - predict(fit, spec)
    X2, terms, _ = second_stage_design(
        data.rel_time, data.treated, tsd.SecondStageSpec(kind)
    )
    ols = dense_ols(ytil, X2, weights=data.weights)
    design = sparse_design(spec, data.weights)
    e1 = np.where(data.treated, 0.0, ytil)
    return design, X2, e1, ols, ytil


@pytest.mark.parametrize("seed", range(10))
def test_gmm_matches_dense_oracle(seed):
    data, cov = random_panel(seed)
    kind = "event_study" if seed % 2 else "static"
    design, X2, e1, ols, ytil = _pipeline(data, cov, kind)
    vcov = gmm_vcov(design, X2, e1, ols.residuals, data.cluster,
                    weights=data.weights)
    oracle = dense_gmm_vcov(data, cov, X2, ytil, ols.residuals,
                            weights=data.weights)
    scale = max(1.0, np.max(np.abs(oracle)))
    np.testing.assert_allclose(vcov, oracle, rtol=0, atol=1e-10 * scale)


def test_six_row_two_cluster_instance_matches_dense():
    # smallest interesting instance: 2 units x 3 periods, 2 clusters
    data = tsd.build_dataset(
        unit=[1, 1, 1, 2, 2, 2], time=[1, 2, 3, 1, 2, 3],
        outcome=[10.0, 11.0, 12.3, 20.0, 21.4, 27.0],
        group=[math.inf] * 3 + [3.0] * 3,
    )
    assert len(np.unique(data.cluster)) == 2
    design, X2, e1, ols, ytil = _pipeline(data, None)
    vcov = gmm_vcov(design, X2, e1, ols.residuals, data.cluster)
    oracle = dense_gmm_vcov(data, None, X2, ytil, ols.residuals)
    np.testing.assert_allclose(vcov, oracle, atol=1e-10)


def test_zero_residuals_give_zero_matrix():
    data = exact_fe_panel(seed=2, n_units=8, n_periods=5,
                          effect=lambda g, t: 1.5)
    design, X2, e1, ols, _ = _pipeline(data, None)
    vcov = gmm_vcov(design, X2, e1, ols.residuals, data.cluster)
    np.testing.assert_allclose(vcov, 0.0, atol=1e-16)


@pytest.mark.parametrize("seed", [1, 5, 9])
def test_gmm_symmetric_psd(seed):
    data, cov = random_panel(seed)
    design, X2, e1, ols, _ = _pipeline(data, cov, "event_study")
    vcov = gmm_vcov(design, X2, e1, ols.residuals, data.cluster,
                    weights=data.weights)
    np.testing.assert_array_equal(vcov, vcov.T)
    eigs = np.linalg.eigvalsh(vcov)
    assert eigs.min() >= -1e-10 * max(np.trace(vcov), 1e-300)


def test_cluster_relabeling_invariance():
    data, _ = random_panel(6)
    design, X2, e1, ols, _ = _pipeline(data, None)
    base = gmm_vcov(design, X2, e1, ols.residuals, data.cluster,
                    weights=data.weights)
    relabeled = np.array([f"c{hash(str(c)) % 1000:03d}_{c}" for c in data.cluster])
    permuted = gmm_vcov(design, X2, e1, ols.residuals, relabeled,
                        weights=data.weights)
    np.testing.assert_allclose(base, permuted, rtol=1e-12, atol=1e-15)


def test_gmm_differs_from_uncorrected_sandwich():
    data, _ = simulated_noise_panel()
    design, X2, e1, ols, _ = _pipeline(data, None)
    vcov = gmm_vcov(design, X2, e1, ols.residuals, data.cluster)
    # uncorrected second-stage-only CR0
    bread = np.linalg.inv(X2.T @ X2)
    meat = np.zeros((2, 2))
    for c in np.unique(data.cluster):
        m = data.cluster == c
        s = X2[m].T @ ols.residuals[m]
        meat += np.outer(s, s)
    naive = bread @ meat @ bread
    rel = abs(vcov[1, 1] - naive[1, 1]) / naive[1, 1]
    assert rel > 0.01


def simulated_noise_panel():
    return tsd.simulate(tsd.DgpConfig(n_units=120, periods=(1995, 2015), seed=4))


def test_small_sample_flag_scales():
    data, _ = random_panel(4)
    design, X2, e1, ols, _ = _pipeline(data, None)
    plain = gmm_vcov(design, X2, e1, ols.residuals, data.cluster,
                     weights=data.weights)
    corrected = gmm_vcov(design, X2, e1, ols.residuals, data.cluster,
                         weights=data.weights, small_sample=True)
    g = len(np.unique(data.cluster))
    np.testing.assert_allclose(corrected, plain * g / (g - 1), rtol=1e-12)


def test_weighted_vcov_matches_row_duplication():
    # integer weights are equivalent to repeating rows; the sandwich
    # must agree exactly between the two representations
    data, _ = random_panel(10, weighted=False, balanced=True, max_units=6)
    w = np.ones(data.n_obs)
    w[::3] = 2.0

    spec = tsd.panel_fe_spec(data, sample_mask=~data.treated)
    fit = fit_fixed_effects(data.outcome, spec, w, tol=1e-13)
    ytil = data.outcome - predict(fit, spec)
    X2, _, _ = second_stage_design(data.rel_time, data.treated,
                                   tsd.SecondStageSpec())
    ols = dense_ols(ytil, X2, weights=w)
    e1 = np.where(data.treated, 0.0, ytil)
    v_weighted = gmm_vcov(sparse_design(spec, w), X2, e1, ols.residuals,
                          data.cluster, weights=w)

    reps = w.astype(int)
    spec_dup = tsd.FeSpec(
        dimensions=[np.repeat(data.unit, reps), np.repeat(data.time, reps)],
        sample_mask=np.repeat(~data.treated, reps),
        names=("unit", "time"),
    )
    v_dup = gmm_vcov(
        sparse_design(spec_dup),
        np.repeat(X2, reps, axis=0),
        np.repeat(e1, reps),
        np.repeat(ols.residuals, reps),
        np.repeat(data.cluster, reps),
    )
    np.testing.assert_allclose(v_weighted, v_dup, rtol=1e-10, atol=1e-14)


# --- bootstrap ---------------------------------------------------------------


def test_bootstrap_defaults_to_250():
    assert InferenceSpec("bootstrap").n_bootstraps == 250


def test_bootstrap_rejects_tiny_replicate_count():
    with pytest.raises(ValueError):
        InferenceSpec("bootstrap", n_bootstraps=1)


def test_bootstrap_zero_variance_on_deterministic_estimator():
    data = exact_fe_panel(seed=3, n_units=10, n_periods=6,
                          effect=lambda g, t: 2.0)
    res = tsd.estimate_two_stage(
        data,
        inference=InferenceSpec("bootstrap", n_bootstraps=40, seed=7),
        fe_tol=1e-12,
    )
    assert res.vcov is not None
    np.testing.assert_allclose(res.vcov, 0.0, atol=1e-12)
    np.testing.assert_allclose(res.point, [2.0], atol=1e-9)


def test_bootstrap_seed_determinism_and_thread_invariance():
    data, truth = tsd.simulate(
        tsd.DgpConfig(n_units=60, periods=(1995, 2012), seed=8)
    )
    kwargs = dict(n_bootstraps=60, seed=123)
    a = tsd.estimate_two_stage(
        data, inference=InferenceSpec("bootstrap", threads=1, **kwargs)
    )
    b = tsd.estimate_two_stage(
        data, inference=InferenceSpec("bootstrap", threads=4, **kwargs)
    )
    c = tsd.estimate_two_stage(
        data, inference=InferenceSpec("bootstrap", threads=1, **kwargs)
    )
    np.testing.assert_array_equal(a.vcov, b.vcov)
    np.testing.assert_array_equal(a.vcov, c.vcov)
    different = tsd.estimate_two_stage(
        data, inference=InferenceSpec("bootstrap", n_bootstraps=60, seed=124)
    )
    assert not np.array_equal(a.vcov, different.vcov)


def test_bootstrap_counts_failed_replicates():
    # two treated units among eight clusters: some resamples draw no
    # treated cluster and must be recorded and skipped
    units = np.repeat(np.arange(8), 4)
    times = np.tile(np.arange(4), 8)
    g0 = np.where(units >= 6, 2.0, math.inf)
    rng = np.random.default_rng(0)
    y = rng.normal(size=32) + 1.0 * (times >= g0)
    data = tsd.build_dataset(unit=units, time=times, outcome=y, group=g0)

    failed = None
    for seed in range(40):
        try:
            res = tsd.estimate_two_stage(
                data,
                inference=InferenceSpec("bootstrap", n_bootstraps=50, seed=seed),
            )
        except errors.TooManyFailedReplicatesError:
            continue
        if res.failed_replicates and res.failed_replicates > 0:
            failed = res.failed_replicates
            assert res.n_bootstraps == 50
            assert np.isfinite(res.vcov).all()
            break
    assert failed is not None, "no seed produced a partially-failing bootstrap"


def test_bootstrap_too_many_failures():
    # one treated cluster among six: most resamples lose all treated rows
    units = np.repeat(np.arange(6), 3)
    times = np.tile(np.arange(3), 6)
    g0 = np.where(units == 5, 1.0, math.inf)
    y = np.arange(18.0)
    data = tsd.build_dataset(unit=units, time=times, outcome=y, group=g0)
    with pytest.raises(errors.TooManyFailedReplicatesError):
        tsd.estimate_two_stage(
            data, inference=InferenceSpec("bootstrap", n_bootstraps=50, seed=1)
        )


def test_bootstrap_agrees_with_gmm_on_moderate_dgp():
    data, _ = tsd.simulate(tsd.DgpConfig(n_units=250, periods=(1995, 2015), seed=21))
    gmm_res = tsd.estimate_two_stage(data)
    boot_res = tsd.estimate_two_stage(
        data, inference=InferenceSpec("bootstrap", n_bootstraps=120, seed=5, threads=2)
    )
    ratio = boot_res.se[0] / gmm_res.se[0]
    assert 0.8 < ratio < 1.25
    np.testing.assert_allclose(boot_res.point, gmm_res.point, atol=1e-10)


def test_cluster_override_changes_grouping():
    data, _ = tsd.simulate(tsd.DgpConfig(n_units=80, periods=(1995, 2010), seed=14))
    unit_level = tsd.estimate_two_stage(data)
    coarse = np.asarray(data.unit) % 10  # 10 coarse clusters
    coarse_level = tsd.estimate_two_stage(
        data, inference=InferenceSpec("gmm", cluster=coarse)
    )
    np.testing.assert_allclose(unit_level.point, coarse_level.point)
    assert unit_level.n_clusters == 80
    assert coarse_level.n_clusters == 10
    assert not np.allclose(unit_level.se, coarse_level.se)


def test_vcov_components_exposed():
    data, _ = random_panel(1)
    design, X2, e1, ols, _ = _pipeline(data, None)
    parts = tsd.gmm_vcov_components(design, X2, e1, ols.residuals, data.cluster,
                                    weights=data.weights)
    assert parts.meat.shape == (2, 2)
    assert parts.bread.shape == (2, 2)
    eigs = np.linalg.eigvalsh(parts.meat)
    assert eigs.min() >= -1e-10 * max(np.trace(parts.meat), 1e-300)
    assert parts.n_clusters == len(np.unique(data.cluster))
