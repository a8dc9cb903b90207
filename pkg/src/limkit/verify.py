"""Forecast verification: deterministic and probabilistic skill scores,
reference forecasts, bootstrap significance, seasonal and optimal-growth
stratification, and warm/cold composites.

All metrics are pure functions of arrays. The empirical CRPS follows the
plain 1/M^2 pair estimator; the batched implementation uses the sorted-sum
identity, which is algebraically identical to the double sum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DataError

__all__ = [
    "SkillReport",
    "CompositePair",
    "crps_empirical",
    "crps_batch",
    "acc",
    "rmse",
    "rmsess",
    "crpss",
    "climatology_ensemble",
    "persistence_forecast",
    "bootstrap_significance",
    "seasonal_skill_table",
    "stratify_by_optimal_growth",
    "asymmetry_composites",
]


@dataclass
class SkillReport:
    """Metric values with their indexing metadata.

    ``values`` is indexed by ``dims`` (e.g. ("lead",) or
    ("lead", "verification_month")). ``bootstrap`` optionally carries the
    resampled means and p-value produced by :func:`bootstrap_significance`.
    """

    metric: str
    values: np.ndarray
    dims: tuple
    reference: str = "climatology"
    n_samples: int = 0
    bootstrap: dict | None = None
    coords: dict = field(default_factory=dict)

    def __post_init__(self):
        allowed = {"ACC", "RMSESS", "CRPSS", "CRPS", "RMSE"}
        if self.metric not in allowed:
            raise DataError(f"metric must be one of {sorted(allowed)}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.metric in ("RMSESS", "CRPSS") and np.nanmax(self.values) > 1.0 + 1e-12:
            raise DataError(f"{self.metric} cannot exceed 1")
        if self.metric == "ACC" and np.nanmax(np.abs(self.values)) > 1.0 + 1e-9:
            raise DataError("ACC must lie in [-1, 1]")

    def to_rows(self):
        """Flatten to (coord..., value) rows for CSV export."""
        idx = np.indices(self.values.shape).reshape(len(self.values.shape), -1).T
        rows = []
        for ix in idx:
            coord = [self.coords.get(d, range(self.values.shape[k]))[i]
                     for k, (d, i) in enumerate(zip(self.dims, ix))]
            rows.append((*coord, float(self.values[tuple(ix)])))
        return rows

    def to_json(self):
        out = {
            "metric": self.metric,
            "dims": list(self.dims),
            "reference": self.reference,
            "n_samples": self.n_samples,
            "values": np.where(np.isfinite(self.values), self.values, None).tolist(),
        }
        if self.bootstrap is not None:
            out["bootstrap"] = {k: v for k, v in self.bootstrap.items() if k != "means"}
        return json.dumps(out, indent=1)


@dataclass
class CompositePair:
    """Warm-minus-cold and warm-plus-cold composite fields with 95%
    two-sided t-test masks."""

    wc_minus: np.ndarray
    wc_plus: np.ndarray
    minus_mask: np.ndarray
    plus_mask: np.ndarray
    n_warm: int = 0
    n_cold: int = 0


def crps_empirical(members, target):
    """Plain-estimator CRPS of one ensemble against one scalar target.

    ``mean |x_i - y| - 0.5 * mean_{ij} |x_i - x_j|`` with the full 1/M^2
    double sum.
    """
    members = np.asarray(members, dtype=np.float64)
    if members.ndim != 1 or members.size < 1:
        raise DataError("members must be a 1-d ensemble with M >= 1")
    term1 = np.abs(members - target).mean()
    term2 = np.abs(members[:, None] - members[None, :]).mean()
    return float(term1 - 0.5 * term2)


def crps_batch(members, targets):
    """Vectorized plain-estimator CRPS along the last (member) axis.

    Uses the sorted-sum identity
    ``sum_{ij} |x_i - x_j| = 2 * sum_k (2k - M + 1) x_(k)`` (0-based k over
    the sorted sample), identical to the double sum.
    """
    members = np.asarray(members, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    M = members.shape[-1]
    term1 = np.abs(members - targets[..., None]).mean(axis=-1)
    srt = np.sort(members, axis=-1)
    k = np.arange(M)
    pair_sum = 2.0 * np.sum((2.0 * k - M + 1.0) * srt, axis=-1)
    return term1 - 0.5 * pair_sum / (M * M)


def acc(forecast, target):
    """Pearson correlation of two verification series."""
    forecast = np.asarray(forecast, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if forecast.shape != target.shape or forecast.shape[0] < 3:
        raise DataError("ACC needs equal-length series with >= 3 samples")
    fa = forecast - forecast.mean()
    ta = target - target.mean()
    denom = np.sqrt((fa * fa).sum() * (ta * ta).sum())
    if denom == 0.0:
        raise DataError("ACC undefined for zero-variance series")
    return float((fa * ta).sum() / denom)


def rmse(forecast, target):
    forecast = np.asarray(forecast, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean((forecast - target) ** 2)))


def rmsess(forecast, target):
    """1 - RMSE_model / RMSE_ref with the zero-anomaly (climatology)
    reference, so RMSE_ref is the RMS amplitude of the target and the zero
    forecast scores exactly 0."""
    target = np.asarray(target, dtype=np.float64)
    sigma = np.sqrt(np.mean(target**2))
    if sigma == 0.0:
        raise DataError("RMSESS undefined: reference variance is zero")
    return 1.0 - rmse(forecast, target) / sigma


def crpss(forecast_members, target, reference_members):
    """1 - CRPS_model / CRPS_ref, each averaged over verification times."""
    num = crps_batch(forecast_members, target).mean()
    den = crps_batch(reference_members, target).mean()
    if den == 0.0:
        raise DataError("CRPSS undefined: reference CRPS is zero")
    return float(1.0 - num / den)


def climatology_ensemble(train_values, train_months, verif_months, M, seed=0, mode="sample"):
    """Reference ensemble for CRPSS.

    ``mode="sample"``: M draws (seeded) from the training anomalies of each
    verification month. ``mode="zero"``: the degenerate zero-anomaly
    ensemble.
    """
    verif_months = np.asarray(verif_months)
    n = verif_months.shape[0]
    if mode == "zero":
        return np.zeros((n, M))
    if mode != "sample":
        raise DataError(f"unknown climatology ensemble mode {mode!r}")
    rng = np.random.default_rng(seed)
    train_values = np.asarray(train_values, dtype=np.float64)
    out = np.empty((n, M))
    for m in range(1, 13):
        pool = train_values[np.asarray(train_months) == m]
        sel = verif_months == m
        if not sel.any():
            continue
        if pool.size == 0:
            raise DataError(f"no training anomalies for calendar month {m}")
        out[sel] = rng.choice(pool, size=(int(sel.sum()), M), replace=True)
    return out


def persistence_forecast(z0, T):
    """Repeat the initial state at every lead."""
    z0 = np.asarray(z0, dtype=np.float64)
    return np.broadcast_to(z0, (T,) + z0.shape).copy()


def bootstrap_significance(errors_a, errors_b, n=1000, seed=0):
    """Two-sided t-test between bootstrap-mean populations of two error
    series.

    The resampling unit is the verification time index: each of the ``n``
    resamples draws one index set (with replacement) applied to both series,
    so paired forecasts stay paired and identical series give p = 1.
    Returns the p-value; the full resample means are available through
    :func:`bootstrap_details`.
    """
    return bootstrap_details(errors_a, errors_b, n=n, seed=seed)["p"]


def bootstrap_details(errors_a, errors_b, n=1000, seed=0):
    errors_a = np.asarray(errors_a, dtype=np.float64)
    errors_b = np.asarray(errors_b, dtype=np.float64)
    if errors_a.shape != errors_b.shape:
        raise DataError("error series must be paired (equal length)")
    N = errors_a.shape[0]
    if N < 2:
        raise DataError("bootstrap needs >= 2 samples")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, N, size=(n, N))
    means_a = errors_a[idx].mean(axis=1)
    means_b = errors_b[idx].mean(axis=1)
    if np.array_equal(means_a, means_b):
        t, p = 0.0, 1.0
    else:
        t, p = stats.ttest_ind(means_a, means_b)
    return {"p": float(p), "t": float(t), "means": (means_a, means_b),
            "mean_a": float(errors_a.mean()), "mean_b": float(errors_b.mean())}


def _metric_value(metric, forecast, target, members=None):
    if metric == "ACC":
        return acc(forecast, target)
    if metric == "RMSESS":
        return rmsess(forecast, target)
    if metric == "RMSE":
        return rmse(forecast, target)
    if metric == "CRPS":
        return float(crps_batch(members, target).mean())
    raise DataError(f"unsupported stratified metric {metric!r}")


def seasonal_skill_table(forecast, target, init_months, metric="ACC", members=None):
    """Metric stratified by lead and calendar month of the verified state.

    Parameters
    ----------
    forecast, target : ndarray, shape (N, T)
        Ensemble-mean forecast and verifying values per init sample/lead.
    init_months : ndarray, shape (N,)
        Calendar month (1..12) of each initial state.
    metric : {"ACC", "RMSESS", "RMSE", "CRPS"}
    members : ndarray, shape (N, M, T), optional
        Required for CRPS.

    Returns
    -------
    SkillReport with values [T, 12] (NaN where a stratum is empty or
    degenerate).
    """
    forecast = np.asarray(forecast, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    init_months = np.asarray(init_months)
    n, T = target.shape
    table = np.full((T, 12), np.nan)
    for tau in range(1, T + 1):
        vmonth = (init_months - 1 + tau) % 12 + 1
        for m in range(1, 13):
            sel = vmonth == m
            if sel.sum() < 3:
                continue
            try:
                table[tau - 1, m - 1] = _metric_value(
                    metric, forecast[sel, tau - 1], target[sel, tau - 1],
                    None if members is None else members[sel, :, tau - 1])
            except DataError:
                continue
    return SkillReport(metric=metric, values=table, dims=("lead", "verification_month"),
                       n_samples=n, coords={"lead": list(range(1, T + 1)),
                                            "verification_month": list(range(1, 13))})


def stratify_by_optimal_growth(states, structure, percentile_bands=((0, 10), (90, 100))):
    """Disjoint index sets banded by |projection on the optimal condition|.

    Banding is rank-based: band (lo, hi) takes the samples whose
    |projection| rank falls in [lo%, hi%) of the sorted order (the top band
    includes the largest sample).
    """
    states = np.asarray(states, dtype=np.float64)
    n = states.shape[0]
    if n < 20:
        raise DataError("need >= 20 states for decile stratification")
    proj = np.abs(states @ structure.oic)
    order = np.argsort(proj, kind="stable")
    out = {}
    for lo, hi in percentile_bands:
        if not 0 <= lo < hi <= 100:
            raise DataError(f"bad percentile band ({lo}, {hi})")
        a = int(np.floor(lo / 100.0 * n))
        b = int(np.floor(hi / 100.0 * n)) if hi < 100 else n
        out[(lo, hi)] = np.sort(order[a:b])
    return out


def asymmetry_composites(fields, growth_signs, alpha=0.05):
    """Warm/cold composite pair with cellwise two-sided t-tests.

    ``W-C = mean(warm) - mean(cold)`` and ``W+C = mean(warm) + mean(cold)``;
    the masks flag cells where warm vs cold (for W-C) or warm vs -cold (for
    W+C) differ at the ``1-alpha`` confidence level.
    """
    fields = np.asarray(fields, dtype=np.float64)
    growth_signs = np.asarray(growth_signs)
    if fields.shape[0] != growth_signs.shape[0]:
        raise DataError("fields and growth_signs must align on the sample axis")
    warm = fields[growth_signs > 0]
    cold = fields[growth_signs < 0]
    if warm.shape[0] < 2 or cold.shape[0] < 2:
        raise DataError("both warm and cold groups need >= 2 members")
    wc_minus = warm.mean(axis=0) - cold.mean(axis=0)
    wc_plus = warm.mean(axis=0) + cold.mean(axis=0)
    _, p_minus = stats.ttest_ind(warm, cold, axis=0)
    _, p_plus = stats.ttest_ind(warm, -cold, axis=0)
    return CompositePair(
        wc_minus=wc_minus,
        wc_plus=wc_plus,
        minus_mask=p_minus < alpha,
        plus_mask=p_plus < alpha,
        n_warm=int(warm.shape[0]),
        n_cold=int(cold.shape[0]),
    )
