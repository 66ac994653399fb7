"""Variance estimation for the two-stage estimator.

The second-stage dependent variable is constructed from first-stage
estimates, so a plain second-stage sandwich misstates the sampling
variation. Because both stages are linear, the estimation error
decomposes exactly into independent per-cluster contributions,

    theta_hat - theta = (X2'X2)^-1 sum_g W_g,
    W_g = X2g' e2g - (X2'X1) (X10'X10)^-1 (X10g' e1g),

where X1 is the first-stage dummy design, X10 zeroes the rows of
treated observations (only untreated rows enter the first stage), e1 is
the first-stage residual (zero on treated rows), e2 the second-stage
residual, and g indexes clusters. Hence the corrected clustered
variance

    V = (X2'X2)^-1 [ sum_g W_g W_g' ] (X2'X2)^-1.

Both the cross-moment X2'X1 and the Gram X10'X10 are global (full
-sample) matrices: the first-stage error enters every cluster's moment
through the same map. Reading the summand's cluster subscript as also
indexing those matrices leaves the correction numerically negligible
under unit clustering and fails validation against both the cluster
bootstrap and the Monte Carlo sampling variance. The Gram inverse is
applied through a sparse LU factorization against one right-hand side
per second-stage column; the dummy design is never densified.

The nonparametric alternative resamples whole clusters with replacement
and re-runs the full two-stage pipeline per replicate.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import (
    EstimationError,
    SingularFirstStageGramError,
    SingularSecondStageGramError,
    TooManyFailedReplicatesError,
)
from .fe import FeSpec, SparseDesign, sparse_design


@dataclass
class InferenceSpec:
    """How to attach a variance matrix to a two-stage estimate.

    ``method`` is "gmm" (moment-condition sandwich), "bootstrap"
    (cluster resampling) or "none". ``cluster`` optionally overrides the
    dataset's per-row cluster labels. ``small_sample`` applies the
    optional G/(G-1) cluster correction (off by default).
    """

    method: str = "gmm"
    cluster: np.ndarray | None = None
    n_bootstraps: int = 250
    seed: int = 0
    small_sample: bool = False
    threads: int | None = None

    def __post_init__(self):
        if self.method not in ("gmm", "bootstrap", "none"):
            raise ValueError(f"unknown inference method {self.method!r}")
        if self.method == "bootstrap" and self.n_bootstraps < 2:
            raise ValueError("n_bootstraps must be at least 2")


@dataclass
class VcovComponents:
    """Pieces of the sandwich, kept for inspection and testing."""

    bread: np.ndarray
    meat: np.ndarray
    first_stage_gram: scipy.sparse.csc_matrix
    n_clusters: int


@dataclass
class BootstrapResult:
    """Cluster-bootstrap covariance plus replicate bookkeeping."""

    vcov: np.ndarray
    n_replicates: int
    n_failed: int
    seed: int


def cluster_codes(clusters: Sequence) -> tuple[np.ndarray, int]:
    """Contiguous cluster codes (first-occurrence order) and count."""
    codes, uniques = pd.factorize(np.asarray(clusters), use_na_sentinel=False)
    return codes.astype(np.int64), len(uniques)


def bincount_columns(codes: np.ndarray, matrix: np.ndarray, size: int) -> np.ndarray:
    out = np.empty((size, matrix.shape[1]))
    for j in range(matrix.shape[1]):
        out[:, j] = np.bincount(codes, weights=matrix[:, j], minlength=size)
    return out


def _cluster_spread(
    values: np.ndarray, gcodes: np.ndarray, n_clusters: int
) -> scipy.sparse.csr_matrix:
    """(clusters x rows) operator whose product aggregates ``values``."""
    n = values.shape[0]
    nz = np.flatnonzero(values)
    return scipy.sparse.csr_matrix(
        (values[nz], (gcodes[nz], nz)), shape=(n_clusters, n)
    )


def gmm_vcov_components(
    first_stage_design: SparseDesign | FeSpec,
    second_stage_design: np.ndarray,
    first_residuals: np.ndarray,
    second_residuals: np.ndarray,
    clusters: Sequence,
    weights: np.ndarray | None = None,
) -> VcovComponents:
    """Assemble bread and meat of the corrected clustered sandwich.

    ``first_stage_design`` is the per-row description of the first stage
    (an :class:`FeSpec`, expanded here) or an already-built
    :class:`SparseDesign`. ``first_residuals`` must be zero on treated
    rows (they are excluded from the first stage);
    ``second_stage_design`` must include its intercept column. Weighted
    fits pass the estimation weights, which scale both designs and
    residuals by sqrt(w).
    """
    if isinstance(first_stage_design, FeSpec):
        first_stage_design = sparse_design(first_stage_design, weights)
    X2 = np.atleast_2d(np.asarray(second_stage_design, dtype=float))
    n, k2 = X2.shape
    e1 = np.asarray(first_residuals, dtype=float)
    e2 = np.asarray(second_residuals, dtype=float)
    X1 = first_stage_design.matrix

    if weights is not None:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        X2 = X2 * sw[:, None]
        e1 = e1 * sw
        e2 = e2 * sw
        X1 = X1.multiply(sw[:, None]).tocsr()

    gcodes, n_clusters = cluster_codes(clusters)

    xtx = X2.T @ X2
    try:
        cho = scipy.linalg.cho_factor(xtx)
        bread = scipy.linalg.cho_solve(cho, np.eye(k2))
    except scipy.linalg.LinAlgError:
        raise SingularSecondStageGramError("second-stage Gram matrix is singular")

    mask = first_stage_design.fitted_mask
    X1m = X1[mask]
    gram = (X1m.T @ X1m).tocsc()
    try:
        lu = scipy.sparse.linalg.splu(gram)
    except RuntimeError as exc:
        raise SingularFirstStageGramError(
            "first-stage Gram matrix is singular after level screening; "
            f"this indicates a disconnected untreated sample ({exc})"
        )

    # propagation map of first-stage errors into the second-stage moment:
    # H = (X10'X10)^-1 (X1'X2), one sparse solve per second-stage column
    cross = X1.T @ X2
    H = lu.solve(np.asarray(cross))

    # per-cluster first-stage scores X10g'e1g, then W_g rows
    first_scores = (_cluster_spread(e1, gcodes, n_clusters) @ X1).tocsr()
    correction = np.asarray((first_scores @ H))

    score2 = bincount_columns(gcodes, X2 * e2[:, None], n_clusters)
    w_cluster = score2 - correction
    meat = w_cluster.T @ w_cluster
    meat = (meat + meat.T) / 2.0

    return VcovComponents(
        bread=bread, meat=meat, first_stage_gram=gram, n_clusters=n_clusters
    )


def gmm_vcov(
    first_stage_design: SparseDesign | FeSpec,
    second_stage_design: np.ndarray,
    first_residuals: np.ndarray,
    second_residuals: np.ndarray,
    clusters: Sequence,
    weights: np.ndarray | None = None,
    small_sample: bool = False,
) -> np.ndarray:
    """Corrected clustered variance of the second-stage coefficients."""
    parts = gmm_vcov_components(
        first_stage_design,
        second_stage_design,
        first_residuals,
        second_residuals,
        clusters,
        weights=weights,
    )
    vcov = parts.bread @ parts.meat @ parts.bread
    vcov = (vcov + vcov.T) / 2.0
    if small_sample and parts.n_clusters > 1:
        vcov = vcov * (parts.n_clusters / (parts.n_clusters - 1))
    return vcov


def bootstrap_vcov(
    data,
    estimation_closure: Callable[[np.ndarray], np.ndarray],
    spec: InferenceSpec,
) -> BootstrapResult:
    """Cluster-bootstrap covariance of the estimated coefficient vector.

    ``data`` is the panel whose clusters are resampled (its per-row
    cluster labels, or ``spec.cluster`` when set; a bare label array is
    also accepted). Each replicate resamples clusters with replacement
    (keeping the cluster count) and passes the stacked row indices to
    ``estimation_closure``; the result is the empirical covariance of
    the returned coefficient vectors. Replicates where the closure
    raises an estimation error (for example, a resample with no treated
    rows) are skipped and counted; more than 20% failures aborts.
    Replicate r draws from its own RNG stream seeded by (seed, r), so
    results are identical for any thread count.
    """
    clusters = getattr(data, "cluster", data)
    if spec.cluster is not None:
        clusters = spec.cluster
    gcodes, n_clusters = cluster_codes(clusters)
    cluster_rows = [np.flatnonzero(gcodes == g) for g in range(n_clusters)]
    n_reps = spec.n_bootstraps

    results: list[np.ndarray | None] = [None] * n_reps

    def run(rep: int) -> None:
        rng = np.random.default_rng([spec.seed, rep])
        draw = rng.integers(0, n_clusters, size=n_clusters)
        rows = np.concatenate([cluster_rows[g] for g in draw])
        try:
            results[rep] = np.asarray(estimation_closure(rows), dtype=float)
        except EstimationError:
            results[rep] = None

    threads = spec.threads or 1
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, range(n_reps)))
    else:
        for rep in range(n_reps):
            run(rep)

    kept = [r for r in results if r is not None]
    n_failed = n_reps - len(kept)
    if n_failed > 0.2 * n_reps:
        raise TooManyFailedReplicatesError(
            f"{n_failed} of {n_reps} bootstrap replicates failed (> 20%)"
        )
    stacked = np.vstack(kept)
    vcov = np.atleast_2d(np.cov(stacked.T, ddof=1))
    vcov = (vcov + vcov.T) / 2.0
    return BootstrapResult(
        vcov=vcov, n_replicates=n_reps, n_failed=n_failed, seed=spec.seed
    )
