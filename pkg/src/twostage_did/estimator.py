"""Treatment-effect estimators for staggered-adoption panels.

Estimators share one pipeline shape: adjust outcomes for unit (or
group) and period effects, then read treatment effects off a regression
of the adjusted outcome on treatment indicators.

The two-stage estimator fits the fixed effects only on untreated /
not-yet-treated observations, so heterogeneous treatment effects cannot
contaminate them; the second stage then recovers the observation
-weighted average effect on the treated. The naive one-step regression
fits everything jointly, which reweights group-time cells by their
residualized treatment indicator, with possibly negative weights; that
decomposition is exposed directly by :func:`compute_twfe_weights`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import inference as inf
from .errors import (
    DegenerateDesignError,
    DidNotConvergeError,
    NoTreatedObservationsError,
    NoUntreatedObservationsError,
)
from .fe import (
    FeSpec,
    FirstStageFit,
    demean_columns,
    dense_ols,
    fit_fixed_effects,
    predict,
    sparse_design,
)
from .panel import NEVER_TREATED, PanelDataset, untreated_mask

# two-sided 95% normal quantile
Z95 = 1.959963984540054


@dataclass
class SecondStageSpec:
    """What the second-stage regression estimates.

    ``kind`` is "static" (one pooled treatment coefficient) or
    "event_study" (one coefficient per relative-time value). Reference
    levels are relative-time values pooled into the omitted category;
    the default {-1, inf} omits the period before treatment and the
    never-treated rows. ``horizon`` optionally restricts which finite
    relative times are reported (estimation always uses all of them).
    """

    kind: str = "static"
    references: tuple[float, ...] = (-1.0, NEVER_TREATED)
    horizon: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("static", "event_study"):
            raise ValueError(f"unknown second-stage kind {self.kind!r}")
        if self.kind == "event_study" and len(self.references) == 0:
            raise ValueError("event-study estimation needs at least one reference level")


@dataclass
class EstimateResult:
    """Point estimates with optional clustered variance.

    ``terms`` are human-readable labels ("treat" for static fits,
    otherwise relative-time values with "inf" for never-treated);
    ``rel_times`` carries the numeric relative times for event studies.
    Reference levels never appear. ``vcov``/``se`` are None when the
    estimator does not produce a variance (imputation, or inference
    "none").
    """

    estimator: str
    kind: str
    terms: list[str]
    point: np.ndarray
    rel_times: list[float] | None = None
    vcov: np.ndarray | None = None
    se: np.ndarray | None = None
    n_obs: int = 0
    n_clusters: int = 0
    method: str = "none"
    n_bootstraps: int | None = None
    seed: int | None = None
    failed_replicates: int | None = None
    first_stage: FirstStageFit | None = None

    @property
    def t_values(self) -> np.ndarray | None:
        if self.se is None:
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.point / self.se

    @property
    def ci_low(self) -> np.ndarray | None:
        return None if self.se is None else self.point - Z95 * self.se

    @property
    def ci_high(self) -> np.ndarray | None:
        return None if self.se is None else self.point + Z95 * self.se

    def to_dict(self) -> dict:
        """JSON-ready representation; floats round-trip exactly."""
        out = {
            "estimator": self.estimator,
            "kind": self.kind,
            "terms": list(self.terms),
            "rel_times": None if self.rel_times is None else list(self.rel_times),
            "point": self.point.tolist(),
            "se": None if self.se is None else self.se.tolist(),
            "vcov": None if self.vcov is None else self.vcov.tolist(),
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "method": self.method,
            "n_bootstraps": self.n_bootstraps,
            "seed": self.seed,
            "failed_replicates": self.failed_replicates,
            "first_stage": None
            if self.first_stage is None
            else {
                "iterations": self.first_stage.iterations,
                "converged": self.first_stage.converged,
                "max_abs_update": self.first_stage.max_abs_update,
            },
        }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EstimateResult":
        return cls(
            estimator=data["estimator"],
            kind=data["kind"],
            terms=list(data["terms"]),
            point=np.asarray(data["point"], dtype=float),
            rel_times=None if data["rel_times"] is None else list(data["rel_times"]),
            vcov=None if data["vcov"] is None else np.asarray(data["vcov"], dtype=float),
            se=None if data["se"] is None else np.asarray(data["se"], dtype=float),
            n_obs=data["n_obs"],
            n_clusters=data["n_clusters"],
            method=data["method"],
            n_bootstraps=data["n_bootstraps"],
            seed=data["seed"],
            failed_replicates=data["failed_replicates"],
        )


@dataclass
class WeightCell:
    """One treated group-time cell of the naive-regression decomposition."""

    group: int
    time: int
    n_rows: int
    weight: float


@dataclass
class WeightDecomposition:
    """Implicit weights the naive one-step regression puts on cells.

    Summing ``weight * (cell mean adjusted effect)`` over cells
    reproduces the naive static estimate; the weights sum to one but can
    be negative under staggered timing. Defined at the observation level
    (each treated row contributes its residualized treatment value) and
    summed within cells, which extends cleanly to unbalanced panels.
    """

    cells: list[WeightCell]
    sum_w: float

    @property
    def negative_cells(self) -> list[WeightCell]:
        return [c for c in self.cells if c.weight < 0]


def term_label(value: float) -> str:
    if math.isinf(value):
        return "inf"
    return str(int(value))


def panel_fe_spec(
    data: PanelDataset,
    effects: Sequence[str] = ("unit", "time"),
    covariates: np.ndarray | None = None,
    sample_mask: np.ndarray | None = None,
) -> FeSpec:
    """Build an :class:`FeSpec` from named panel dimensions.

    Recognized names are "unit", "time" and "group" (first-treatment
    cohort). The first stage defaults to ("unit", "time");
    ("group", "time") gives the cohort-effect variant.
    """
    arrays = []
    for name in effects:
        if name == "unit":
            arrays.append(data.unit)
        elif name == "time":
            arrays.append(data.time)
        elif name == "group":
            arrays.append(data.group)
        else:
            raise ValueError(f"unknown fixed-effect dimension {name!r}")
    return FeSpec(
        dimensions=arrays,
        covariates=covariates,
        sample_mask=sample_mask,
        names=tuple(effects),
    )


def second_stage_design(
    rel_time: np.ndarray,
    treated: np.ndarray,
    spec: SecondStageSpec,
) -> tuple[np.ndarray, list[str], list[float] | None]:
    """Design matrix (with intercept), term labels and term positions.

    Static: an intercept and the treatment indicator. Event study: an
    intercept plus one indicator per observed relative-time value not in
    the reference set, finite values ascending and "inf" last. Values
    observed only in the reference set simply produce no column.
    """
    n = rel_time.shape[0]
    if spec.kind == "static":
        X2 = np.column_stack([np.ones(n), treated.astype(float)])
        return X2, ["treat"], None
    refs = set(spec.references)
    values = [v for v in np.unique(rel_time) if v not in refs]
    finite = sorted(v for v in values if math.isfinite(v))
    if any(math.isinf(v) for v in values):
        finite.append(NEVER_TREATED)
    columns = [np.ones(n)]
    for v in finite:
        columns.append((rel_time == v).astype(float))
    X2 = np.column_stack(columns)
    return X2, [term_label(v) for v in finite], list(finite)


def _apply_horizon(
    result: EstimateResult, horizon: tuple[int, int] | None
) -> EstimateResult:
    """Drop reported terms outside the finite horizon window."""
    if horizon is None or result.rel_times is None:
        return result
    lo, hi = horizon
    keep = [
        i
        for i, v in enumerate(result.rel_times)
        if math.isfinite(v) and lo <= v <= hi
    ]
    idx = np.asarray(keep, dtype=int)
    result.terms = [result.terms[i] for i in keep]
    result.rel_times = [result.rel_times[i] for i in keep]
    result.point = result.point[idx]
    if result.vcov is not None:
        result.vcov = result.vcov[np.ix_(idx, idx)]
        result.se = result.se[idx]
    return result


def _first_stage_or_default(
    data: PanelDataset, first_stage: FeSpec | None, mask: np.ndarray
) -> FeSpec:
    """Clone the requested first stage with the fitting sample pinned."""
    if first_stage is None:
        return panel_fe_spec(data, sample_mask=mask)
    return FeSpec(
        dimensions=first_stage.dimensions,
        covariates=first_stage.covariates,
        sample_mask=mask,
        names=first_stage.names,
    )


def _adjusted_outcome(
    data: PanelDataset,
    spec: FeSpec,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, FirstStageFit]:
    fit = fit_fixed_effects(data.outcome, spec, data.weights, tol=tol, max_iter=max_iter)
    if not fit.converged:
        raise DidNotConvergeError(
            "first-stage alternating projections did not converge "
            f"(iterations={fit.iterations}, max_abs_update={fit.max_abs_update:.3e})",
            iterations=fit.iterations,
            max_abs_update=fit.max_abs_update,
        )
    return data.outcome - predict(fit, spec), fit


def _require_treated(data: PanelDataset) -> None:
    if not data.treated.any():
        raise NoTreatedObservationsError("no treated observations in the panel")


def estimate_two_stage(
    data: PanelDataset,
    first_stage: FeSpec | None = None,
    second_stage: SecondStageSpec | None = None,
    inference: inf.InferenceSpec | None = None,
    fe_tol: float = 1e-8,
    fe_max_iter: int = 10_000,
) -> EstimateResult:
    """Two-stage estimate of treatment effects under staggered adoption.

    Stage one fits fixed effects (unit and period by default, plus any
    covariates in ``first_stage``; its sample mask, if any, is replaced
    by the untreated mask) by weighted least squares on the
    untreated / not-yet-treated rows only. Stage two regresses the
    adjusted outcome (observed minus predicted) on an intercept and the
    treatment indicators of ``second_stage`` over the full sample. The
    static coefficient is therefore the weighted mean adjusted outcome
    of treated rows minus that of untreated rows, i.e. the observation
    -weighted average effect on the treated (with unbalanced panels this
    differs from the equal-cell-weight average; the second stage
    identifies the former). Variance comes from the corrected clustered
    sandwich or the cluster bootstrap per ``inference``.
    """
    second_stage = second_stage or SecondStageSpec()
    inference = inference or inf.InferenceSpec()
    mask = untreated_mask(data)
    _require_treated(data)

    spec = _first_stage_or_default(data, first_stage, mask)
    ytilde, fit = _adjusted_outcome(data, spec, fe_tol, fe_max_iter)

    rel = data.rel_time
    X2, terms, rels = second_stage_design(rel, data.treated, second_stage)
    ols = dense_ols(ytilde, X2, weights=data.weights)

    clusters = inference.cluster if inference.cluster is not None else data.cluster
    n_clusters = int(np.unique(clusters).shape[0])

    vcov_full = None
    n_boot = seed = failed = None
    if inference.method == "gmm":
        design = sparse_design(spec, data.weights)
        e1 = np.where(data.treated, 0.0, ytilde)
        vcov_full = inf.gmm_vcov(
            design,
            X2,
            e1,
            ols.residuals,
            clusters,
            weights=data.weights,
            small_sample=inference.small_sample,
        )
    elif inference.method == "bootstrap":
        closure = _two_stage_closure(data, spec, second_stage, terms, fe_tol, fe_max_iter)
        boot = inf.bootstrap_vcov(clusters, closure, inference)
        vcov_full = boot.vcov
        n_boot, seed, failed = boot.n_replicates, boot.seed, boot.n_failed

    keep = [j for j in range(1, X2.shape[1]) if j not in ols.rank_deficient_columns]
    idx = np.asarray(keep, dtype=int)
    point = ols.coefficients[idx]
    vcov = se = None
    if vcov_full is not None:
        vcov = vcov_full[np.ix_(idx, idx)]
        se = np.sqrt(np.clip(np.diag(vcov), 0.0, None))

    result = EstimateResult(
        estimator="two_stage",
        kind=second_stage.kind,
        terms=[terms[j - 1] for j in keep],
        rel_times=None if rels is None else [rels[j - 1] for j in keep],
        point=point,
        vcov=vcov,
        se=se,
        n_obs=data.n_obs,
        n_clusters=n_clusters,
        method=inference.method,
        n_bootstraps=n_boot,
        seed=seed,
        failed_replicates=failed,
        first_stage=fit,
    )
    return _apply_horizon(result, second_stage.horizon)


def _two_stage_closure(
    data: PanelDataset,
    spec: FeSpec,
    second_stage: SecondStageSpec,
    expected_terms: list[str],
    fe_tol: float,
    fe_max_iter: int,
):
    """Re-estimation on row subsets, for the cluster bootstrap.

    Returns the full second-stage coefficient vector (intercept first).
    Raises an estimation error - counted as a failed replicate - when a
    resample loses all treated or all untreated rows, drops an original
    term, or turns rank deficient.
    """
    y = data.outcome
    w = data.weights
    treated = data.treated
    rel = data.rel_time
    dims = [np.asarray(d) for d in spec.dimensions]
    cov = spec.covariates

    def refit(rows: np.ndarray) -> np.ndarray:
        t = treated[rows]
        if t.all():
            raise NoUntreatedObservationsError("resample has no untreated rows")
        if not t.any():
            raise NoTreatedObservationsError("resample has no treated rows")
        sub = FeSpec(
            dimensions=[d[rows] for d in dims],
            covariates=None if cov is None else cov[rows],
            sample_mask=~t,
            names=spec.names,
        )
        fit = fit_fixed_effects(y[rows], sub, w[rows], tol=fe_tol, max_iter=fe_max_iter)
        if not fit.converged:
            raise DidNotConvergeError(
                "bootstrap replicate did not converge",
                iterations=fit.iterations,
                max_abs_update=fit.max_abs_update,
            )
        ytil = y[rows] - predict(fit, sub)
        X2, terms, _ = second_stage_design(rel[rows], t, second_stage)
        if terms != expected_terms:
            raise DegenerateDesignError("resample lost a treatment term")
        ols = dense_ols(ytil, X2, weights=w[rows])
        if ols.rank_deficient_columns:
            raise DegenerateDesignError("resample design is rank deficient")
        return ols.coefficients

    return refit


def estimate_imputation(
    data: PanelDataset,
    first_stage: FeSpec | None = None,
    second_stage: SecondStageSpec | None = None,
    fe_tol: float = 1e-8,
    fe_max_iter: int = 10_000,
) -> EstimateResult:
    """Impute untreated outcomes and average observed-minus-imputed.

    Uses the same untreated-sample first stage as the two-stage
    estimator, predicts the untreated outcome for every row, and
    averages the difference within treated rows (static) or within each
    relative-time value (event study). Point estimates coincide with the
    two-stage estimator's: exactly, for the static case; for event
    studies, whenever the reference rows' mean adjusted outcome is zero.
    No variance is attached.
    """
    second_stage = second_stage or SecondStageSpec()
    mask = untreated_mask(data)
    _require_treated(data)

    spec = _first_stage_or_default(data, first_stage, mask)
    ytilde, fit = _adjusted_outcome(data, spec, fe_tol, fe_max_iter)

    w = data.weights
    if second_stage.kind == "static":
        t = data.treated
        point = np.array([np.sum(w[t] * ytilde[t]) / np.sum(w[t])])
        terms, rels = ["treat"], None
    else:
        _, terms, rels = second_stage_design(data.rel_time, data.treated, second_stage)
        rel = data.rel_time
        point = np.empty(len(rels))
        for i, v in enumerate(rels):
            rows = rel == v
            point[i] = np.sum(w[rows] * ytilde[rows]) / np.sum(w[rows])

    result = EstimateResult(
        estimator="imputation",
        kind=second_stage.kind,
        terms=terms,
        rel_times=rels,
        point=point,
        n_obs=data.n_obs,
        n_clusters=int(np.unique(data.cluster).shape[0]),
        method="none",
        first_stage=fit,
    )
    return _apply_horizon(result, second_stage.horizon)


def estimate_twfe(
    data: PanelDataset,
    second_stage: SecondStageSpec | None = None,
    fe_tol: float = 1e-10,
    fe_max_iter: int = 100_000,
) -> EstimateResult:
    """One-step regression with unit and period effects fit jointly.

    This is the conventional (biased under staggered heterogeneous
    effects) comparator: outcome and treatment indicators are demeaned
    over unit and period levels, then regressed. Standard errors are the
    conventional CR0 clustered sandwich without any first-stage
    correction.
    """
    second_stage = second_stage or SecondStageSpec()
    _require_treated(data)

    X2, terms, rels = second_stage_design(data.rel_time, data.treated, second_stage)
    D = X2[:, 1:]  # intercept is absorbed by the fixed effects
    spec = panel_fe_spec(data)
    w = data.weights
    stacked, _, converged = demean_columns(
        np.column_stack([data.outcome, D]), spec, w, tol=fe_tol, max_iter=fe_max_iter
    )
    if not converged:
        raise DidNotConvergeError(
            "two-way demeaning did not converge", iterations=fe_max_iter,
            max_abs_update=math.nan,
        )
    ytil, Dtil = stacked[:, 0], stacked[:, 1:]

    # columns absorbed by the fixed effects cannot be estimated
    scale_raw = np.sum(w[:, None] * D * D, axis=0)
    scale_til = np.sum(w[:, None] * Dtil * Dtil, axis=0)
    alive = scale_til > 1e-12 * np.maximum(scale_raw, 1e-300)
    if not alive.any():
        raise DegenerateDesignError(
            "every treatment indicator is collinear with the fixed effects"
        )
    Dtil = Dtil[:, alive]
    keep_terms = [t for t, a in zip(terms, alive) if a]
    keep_rels = None if rels is None else [r for r, a in zip(rels, alive) if a]

    ols = dense_ols(ytil, Dtil, weights=w)
    kept = [j for j in range(Dtil.shape[1]) if j not in ols.rank_deficient_columns]
    idx = np.asarray(kept, dtype=int)

    # CR0 cluster sandwich on the demeaned regression
    gcodes, n_clusters = inf.cluster_codes(data.cluster)
    scores = inf.bincount_columns(
        gcodes, Dtil * (w * ols.residuals)[:, None], n_clusters
    )
    meat = scores.T @ scores
    bread = ols.gram_inverse
    vcov_full = bread @ meat @ bread
    vcov = vcov_full[np.ix_(idx, idx)]
    vcov = (vcov + vcov.T) / 2.0

    result = EstimateResult(
        estimator="twfe",
        kind=second_stage.kind,
        terms=[keep_terms[j] for j in kept],
        rel_times=None if keep_rels is None else [keep_rels[j] for j in kept],
        point=ols.coefficients[idx],
        vcov=vcov,
        se=np.sqrt(np.clip(np.diag(vcov), 0.0, None)),
        n_obs=data.n_obs,
        n_clusters=n_clusters,
        method="cluster",
    )
    return _apply_horizon(result, second_stage.horizon)


def compute_twfe_weights(data: PanelDataset) -> WeightDecomposition:
    """Implicit cell weights of the naive static regression.

    Residualizes the treatment indicator on unit and period effects and
    aggregates the residuals of treated rows within (group, period)
    cells, normalized by the total over treated rows; the weights sum to
    one exactly. A single adoption date (with a comparison group) gives
    uniform weights; staggered timing typically makes some negative.
    """
    _require_treated(data)
    spec = panel_fe_spec(data)
    D = data.treated.astype(float)
    w = data.weights
    til, _, converged = demean_columns(D, spec, w, tol=1e-13, max_iter=200_000)
    if not converged:
        raise DidNotConvergeError(
            "two-way demeaning of the treatment indicator did not converge",
            iterations=200_000, max_abs_update=math.nan,
        )
    dtil = til[:, 0]

    denom = float(np.sum(w * dtil * D))
    scale = float(np.sum(w * D * D))
    if abs(denom) <= 1e-12 * max(scale, 1e-300):
        raise DegenerateDesignError(
            "treatment indicator is collinear with the fixed effects"
        )

    t_rows = np.flatnonzero(data.treated)
    keys = np.column_stack(
        [data.group[t_rows].astype(np.int64), data.time[t_rows]]
    )
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    counts = np.bincount(inverse)
    sums = np.bincount(inverse, weights=w[t_rows] * dtil[t_rows])
    cells = [
        WeightCell(
            group=int(uniq[c, 0]),
            time=int(uniq[c, 1]),
            n_rows=int(counts[c]),
            weight=float(sums[c] / denom),
        )
        for c in range(uniq.shape[0])
    ]
    return WeightDecomposition(cells=cells, sum_w=float(sum(c.weight for c in cells)))
