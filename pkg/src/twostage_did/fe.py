"""Weighted least squares with high-dimensional fixed effects.

The workhorse is alternating weighted demeaning (block Gauss-Seidel over
the fixed-effect dimensions), which scales to panels with tens of
thousands of levels. A dense rank-revealing OLS is provided both as the
second-stage engine and as a small-scale oracle for the iterative solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse

from .errors import (
    AllColumnsCollinearError,
    NoRowsSelectedError,
    SingularCovariatesError,
    UnseenLevelError,
)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000


@dataclass
class FeSpec:
    """Design for a fixed-effects fit.

    Parameters
    ----------
    dimensions
        One array of level labels per fixed-effect dimension (e.g. unit
        ids and periods), each of length n.
    covariates
        Optional (n, k) matrix of numeric regressors partialled out
        alongside the fixed effects.
    sample_mask
        Boolean mask selecting the rows used for fitting; prediction is
        still available for all n rows. None fits on every row.
    names
        Dimension names used in error messages.
    """

    dimensions: list[np.ndarray]
    covariates: np.ndarray | None = None
    sample_mask: np.ndarray | None = None
    names: tuple[str, ...] = ()

    codes: list[np.ndarray] = field(init=False, repr=False)
    labels: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.dimensions:
            raise ValueError("at least one fixed-effect dimension is required")
        self.codes = []
        self.labels = []
        for dim in self.dimensions:
            codes, uniques = pd.factorize(np.asarray(dim), use_na_sentinel=False)
            self.codes.append(codes.astype(np.int64))
            self.labels.append(np.asarray(uniques))
        n = self.codes[0].shape[0]
        if self.covariates is not None:
            self.covariates = np.atleast_2d(np.asarray(self.covariates, dtype=float))
            if self.covariates.shape[0] != n:
                self.covariates = self.covariates.T
            if self.covariates.shape[0] != n:
                raise ValueError("covariates row count does not match dimensions")
        if self.sample_mask is None:
            self.sample_mask = np.ones(n, dtype=bool)
        else:
            self.sample_mask = np.asarray(self.sample_mask, dtype=bool)
        if not self.names:
            self.names = tuple(f"dim{d}" for d in range(len(self.dimensions)))

    @property
    def n_rows(self) -> int:
        return self.codes[0].shape[0]


@dataclass
class FirstStageFit:
    """Level effects and diagnostics from :func:`fit_fixed_effects`.

    ``effects[d][l]`` is the estimated effect of level l of dimension d
    (0 for levels absent from the fitting sample, flagged in ``seen``).
    The intercept is absorbed into the first dimension; in every later
    dimension the first-observed level's effect is normalized to 0.
    """

    effects: list[np.ndarray]
    seen: list[np.ndarray]
    labels: list[np.ndarray]
    covariate_coefs: np.ndarray | None
    iterations: int
    converged: bool
    max_abs_update: float
    rss_trace: np.ndarray

    @property
    def level_effects(self) -> list[dict]:
        """Per-dimension map from level label to estimated effect."""
        return [
            {label: float(eff[i]) for i, label in enumerate(labs) if seen[i]}
            for eff, labs, seen in zip(self.effects, self.labels, self.seen)
        ]


@dataclass
class DenseOlsFit:
    """Weighted least squares solved by rank-revealing QR.

    Exactly collinear columns are dropped (coefficient 0, zeroed rows and
    columns of ``gram_inverse``) and reported in
    ``rank_deficient_columns``.
    """

    coefficients: np.ndarray
    residuals: np.ndarray
    gram_inverse: np.ndarray
    rank_deficient_columns: set[int]

    @property
    def kept_columns(self) -> list[int]:
        k = self.coefficients.shape[0]
        return [j for j in range(k) if j not in self.rank_deficient_columns]


def _weight_aggregators(
    codes: list[np.ndarray], weights: np.ndarray, n_levels: list[int]
) -> tuple[list[scipy.sparse.csr_matrix], list[np.ndarray]]:
    """Per-dimension sparse sum-by-level operators and weight totals."""
    n = weights.shape[0]
    rows = np.arange(n)
    mats, denoms = [], []
    for c, size in zip(codes, n_levels):
        mat = scipy.sparse.csr_matrix(
            (weights, (c, rows)), shape=(size, n)
        )
        mats.append(mat)
        denoms.append(np.bincount(c, weights=weights, minlength=size))
    return mats, denoms


def _backfit(
    matrix: np.ndarray,
    codes: list[np.ndarray],
    n_levels: list[int],
    weights: np.ndarray,
    tol: float,
    max_iter: int,
) -> tuple[list[np.ndarray], np.ndarray, int, bool, float, np.ndarray]:
    """Gauss-Seidel sweeps of weighted demeaning over all dimensions.

    Operates column-wise on ``matrix`` (n, m); returns per-dimension
    effect tables (levels, m), the fitted values, the sweep count, the
    convergence flag, the last max absolute effect update, and the
    weighted residual sum of squares after each sweep.
    """
    n, m = matrix.shape
    aggs, denoms = _weight_aggregators(codes, weights, n_levels)
    safe = [np.where(d > 0, d, 1.0) for d in denoms]
    effects = [np.zeros((size, m)) for size in n_levels]
    pred = np.zeros((n, m))
    rss_trace = []
    iterations = 0
    converged = False
    max_update = np.inf
    for _ in range(max_iter):
        iterations += 1
        max_update = 0.0
        for d in range(len(codes)):
            partial = matrix - pred + effects[d][codes[d]]
            new = (aggs[d] @ partial) / safe[d][:, None]
            new[denoms[d] == 0] = 0.0
            delta = new - effects[d]
            max_update = max(max_update, float(np.abs(delta).max()))
            pred += delta[codes[d]]
            effects[d] = new
        resid = matrix - pred
        rss_trace.append(float(np.sum(weights[:, None] * resid * resid)))
        if max_update <= tol:
            converged = True
            break
    return effects, pred, iterations, converged, max_update, np.array(rss_trace)


def _normalize(effects: list[np.ndarray], pinned: list[int]) -> list[np.ndarray]:
    """Pin later dimensions' reference level to 0, shifting dimension 0."""
    out = [e.copy() for e in effects]
    for d in range(1, len(out)):
        shift = out[d][pinned[d]].copy()
        out[d] -= shift
        out[0] += shift
    return out


def fit_fixed_effects(
    y: np.ndarray,
    spec: FeSpec,
    weights: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> FirstStageFit:
    """Fit y on additive fixed effects (plus optional covariates) by WLS.

    Runs alternating weighted demeaning until the largest absolute level
    -effect update falls to ``tol`` or ``max_iter`` sweeps elapse; the
    ``converged`` flag records which. Covariates are partialled out: the
    outcome and each covariate column are residualized on the fixed
    effects jointly, the coefficient comes from a dense WLS on the
    residualized columns, and the level effects are recombined so that
    predictions equal the sum of level effects plus ``covariates @
    coefs``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    y = np.asarray(y, dtype=float)
    mask = spec.sample_mask
    if not mask.any():
        raise NoRowsSelectedError("sample mask selects no rows")
    if weights is None:
        weights = np.ones(spec.n_rows)
    w = np.asarray(weights, dtype=float)[mask]
    codes = [c[mask] for c in spec.codes]
    n_levels = [lab.shape[0] for lab in spec.labels]

    has_cov = spec.covariates is not None and spec.covariates.shape[1] > 0
    if has_cov:
        matrix = np.column_stack([y[mask], spec.covariates[mask]])
    else:
        matrix = y[mask][:, None]

    effects, pred, iterations, converged, max_update, rss = _backfit(
        matrix, codes, n_levels, w, tol, max_iter
    )
    resid = matrix - pred

    coefs = None
    if has_cov:
        # a covariate whose demeaned norm collapses lies in the FE span;
        # the threshold must sit above the demeaning tolerance
        raw = np.sqrt(np.sum(w[:, None] * matrix[:, 1:] ** 2, axis=0))
        til = np.sqrt(np.sum(w[:, None] * resid[:, 1:] ** 2, axis=0))
        absorbed = til <= 1e-7 * np.maximum(raw, 1e-300)
        if absorbed.any():
            raise SingularCovariatesError(
                "covariate columns are collinear with the fixed effects: "
                f"{np.flatnonzero(absorbed).tolist()}"
            )
        try:
            ols = dense_ols(resid[:, 0], resid[:, 1:], weights=w)
        except AllColumnsCollinearError:
            raise SingularCovariatesError(
                "covariates are collinear with the fixed effects"
            )
        if ols.rank_deficient_columns:
            raise SingularCovariatesError(
                "covariates are collinear with each other or the fixed effects "
                f"(columns {sorted(ols.rank_deficient_columns)})"
            )
        coefs = ols.coefficients
        effects = [e[:, :1] - e[:, 1:] @ coefs[:, None] for e in effects]

    effects = [e[:, 0] for e in effects]
    denoms = [np.bincount(c, weights=w, minlength=size)
              for c, size in zip(codes, n_levels)]
    seen = [d > 0 for d in denoms]
    first = int(np.flatnonzero(w > 0)[0])
    pinned = [int(c[first]) for c in codes]
    effects = _normalize(effects, pinned)

    return FirstStageFit(
        effects=effects,
        seen=seen,
        labels=spec.labels,
        covariate_coefs=coefs,
        iterations=iterations,
        converged=converged,
        max_abs_update=max_update,
        rss_trace=rss,
    )


def predict(fit: FirstStageFit, spec: FeSpec) -> np.ndarray:
    """Evaluate the fitted additive model on every row of ``spec``.

    Raises :class:`UnseenLevelError` when a row's level in some dimension
    never appears (with positive weight) in the fitting sample: that
    fixed effect is unidentified and the unit should be dropped or the
    sample rethought.
    """
    pred = np.zeros(spec.n_rows)
    for d, codes in enumerate(spec.codes):
        unseen = ~fit.seen[d][codes]
        if unseen.any():
            label = spec.labels[d][codes[np.flatnonzero(unseen)[0]]]
            raise UnseenLevelError(
                f"level {label!r} of dimension {spec.names[d]!r} never appears "
                "in the fitting sample, so its fixed effect is unidentified; "
                "drop the unit or widen the untreated sample"
            )
        pred += fit.effects[d][codes]
    if fit.covariate_coefs is not None:
        pred += spec.covariates @ fit.covariate_coefs
    return pred


def demean_columns(
    matrix: np.ndarray,
    spec: FeSpec,
    weights: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> tuple[np.ndarray, int, bool]:
    """Residualize columns of ``matrix`` on the spec's fixed effects.

    Uses the rows selected by the spec's sample mask (all rows by
    default) and returns (residuals, sweeps, converged).
    """
    mask = spec.sample_mask
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape[0] != spec.n_rows:
        matrix = matrix.T
    if weights is None:
        weights = np.ones(spec.n_rows)
    w = np.asarray(weights, dtype=float)[mask]
    codes = [c[mask] for c in spec.codes]
    n_levels = [lab.shape[0] for lab in spec.labels]
    _, pred, iterations, converged, _, _ = _backfit(
        matrix[mask], codes, n_levels, w, tol, max_iter
    )
    return matrix[mask] - pred, iterations, converged


def dense_ols(
    y: np.ndarray,
    X: np.ndarray,
    weights: np.ndarray | None = None,
) -> DenseOlsFit:
    """Weighted least squares via QR with column pivoting.

    Columns whose pivot falls below 1e-10 of the leading pivot are
    treated as exactly collinear: dropped from the fit, reported in
    ``rank_deficient_columns``, and given coefficient 0. Residuals are
    unweighted (y minus fitted values).
    """
    y = np.asarray(y, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != y.shape[0]:
        X = X.T
    n, k = X.shape
    if n == 0:
        raise NoRowsSelectedError("design has no rows")
    if weights is None:
        Xw, yw = X, y
    else:
        w = np.asarray(weights, dtype=float)
        if not np.any(w > 0):
            raise NoRowsSelectedError("all weights are zero")
        sw = np.sqrt(w)
        Xw, yw = X * sw[:, None], y * sw

    Q, R, piv = scipy.linalg.qr(Xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        raise AllColumnsCollinearError("design matrix has rank 0")
    rank = int(np.sum(diag > 1e-10 * diag[0]))
    kept = piv[:rank]
    dropped = set(int(j) for j in piv[rank:])

    rhs = Q.T @ yw
    beta_kept = scipy.linalg.solve_triangular(R[:rank, :rank], rhs[:rank])
    coefficients = np.zeros(k)
    coefficients[kept] = beta_kept

    r_inv = scipy.linalg.solve_triangular(R[:rank, :rank], np.eye(rank))
    gram_kept = r_inv @ r_inv.T
    gram_inverse = np.zeros((k, k))
    gram_inverse[np.ix_(kept, kept)] = gram_kept

    residuals = y - X @ coefficients
    return DenseOlsFit(
        coefficients=coefficients,
        residuals=residuals,
        gram_inverse=gram_inverse,
        rank_deficient_columns=dropped,
    )


@dataclass
class SparseDesign:
    """Explicit sparse first-stage design aligned with a fitted model.

    Columns are the seen levels of dimension 0, the seen levels of each
    later dimension minus its pinned reference level, then covariates;
    the parameterization matches :func:`fit_fixed_effects`, so the
    column space equals the span the solver projects onto.
    ``dim_blocks`` and ``covariate_block`` give the half-open column
    ranges of each piece.
    """

    matrix: scipy.sparse.csr_matrix
    fitted_mask: np.ndarray
    n_columns: int
    dim_blocks: list[tuple[int, int]]
    covariate_block: tuple[int, int]


def sparse_design(spec: FeSpec, weights: np.ndarray | None = None) -> SparseDesign:
    """Build the dummy-variable design for all rows of ``spec``.

    Raises :class:`UnseenLevelError` if any row's level is absent from
    the (positive-weight) fitting sample, mirroring :func:`predict`.
    """
    mask = spec.sample_mask
    if weights is None:
        weights = np.ones(spec.n_rows)
    w = np.asarray(weights, dtype=float)
    wm = w[mask]
    first = int(np.flatnonzero(wm > 0)[0])

    col_of_level: list[np.ndarray] = []
    dim_blocks: list[tuple[int, int]] = []
    offset = 0
    for d, labels in enumerate(spec.labels):
        c = spec.codes[d][mask]
        denom = np.bincount(c, weights=wm, minlength=labels.shape[0])
        seen = denom > 0
        unseen_rows = ~seen[spec.codes[d]]
        if unseen_rows.any():
            label = spec.labels[d][spec.codes[d][np.flatnonzero(unseen_rows)[0]]]
            raise UnseenLevelError(
                f"level {label!r} of dimension {spec.names[d]!r} never appears "
                "in the fitting sample, so its fixed effect is unidentified; "
                "drop the unit or widen the untreated sample"
            )
        cols = np.full(labels.shape[0], -1, dtype=np.int64)
        use = seen.copy()
        if d > 0:
            use[c[first]] = False
        cols[use] = offset + np.arange(int(use.sum()))
        dim_blocks.append((offset, offset + int(use.sum())))
        offset += int(use.sum())
        col_of_level.append(cols)

    n = spec.n_rows
    rows_list, cols_list, data_list = [], [], []
    for d in range(len(spec.codes)):
        cols = col_of_level[d][spec.codes[d]]
        keep = cols >= 0
        rows_list.append(np.flatnonzero(keep))
        cols_list.append(cols[keep])
        data_list.append(np.ones(int(keep.sum())))
    cov_start = offset
    if spec.covariates is not None and spec.covariates.shape[1] > 0:
        for j in range(spec.covariates.shape[1]):
            col = spec.covariates[:, j]
            nz = np.flatnonzero(col != 0)
            rows_list.append(nz)
            cols_list.append(np.full(nz.shape[0], offset, dtype=np.int64))
            data_list.append(col[nz])
            offset += 1

    matrix = scipy.sparse.csr_matrix(
        (
            np.concatenate(data_list),
            (np.concatenate(rows_list), np.concatenate(cols_list)),
        ),
        shape=(n, offset),
    )
    return SparseDesign(
        matrix=matrix,
        fitted_mask=mask,
        n_columns=offset,
        dim_blocks=dim_blocks,
        covariate_block=(cov_start, offset),
    )
