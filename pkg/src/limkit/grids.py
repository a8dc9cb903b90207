"""Gridded anomaly preprocessing: detrending, climatology removal, scaling,
box indices, and train/val/test splitting.

All operations are pure: they return new objects and never mutate their
inputs. A :class:`GriddedSeries` is monthly, gap-free by construction, and
carries a shared land/ocean mask; masked cells hold NaN and are excluded
from every statistic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "GriddedSeries",
    "Climatology",
    "SplitSpec",
    "detrend_linear",
    "remove_climatology",
    "zscore_normalize",
    "nino_index",
    "split_series",
    "preprocess",
    "apply_preprocess",
    "NINO4_BOX",
]

# Standard central-Pacific index box: 5S-5N, 160E-150W (lon in 0-360).
NINO4_BOX = (-5.0, 5.0, 160.0, 210.0)


@dataclass
class GriddedSeries:
    """Monthly stacked anomaly fields on a rectilinear grid.

    Parameters
    ----------
    values : ndarray, shape (n_time, n_var, n_lat, n_lon)
        Field values; masked cells are NaN.
    lat, lon : ndarray
        Strictly increasing coordinates (degrees north / degrees east 0-360).
    start_year, start_month : int
        Calendar stamp of the first record; month in 1..12.
    var_names : list of str
    mask : ndarray of bool, shape (n_lat, n_lon)
        True where the cell is valid. Shared by all variables.
    """

    values: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    start_year: int
    start_month: int
    var_names: list[str]
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        if self.values.ndim != 4:
            raise DataError(f"values must be 4-d (time, var, lat, lon), got shape {self.values.shape}")
        n_time, n_var, n_lat, n_lon = self.values.shape
        if self.lat.shape != (n_lat,) or self.lon.shape != (n_lon,):
            raise DataError("lat/lon lengths do not match the value grid")
        if n_lat > 1 and not np.all(np.diff(self.lat) > 0):
            raise DataError("lat must be strictly increasing")
        if n_lon > 1 and not np.all(np.diff(self.lon) > 0):
            raise DataError("lon must be strictly increasing")
        if not 1 <= int(self.start_month) <= 12:
            raise DataError(f"start_month must be in 1..12, got {self.start_month}")
        if len(self.var_names) != n_var:
            raise DataError("var_names length does not match the variable axis")
        if self.mask is None:
            self.mask = np.isfinite(self.values).all(axis=(0, 1))
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (n_lat, n_lon):
            raise DataError("mask shape does not match the grid")
        # Masked cells hold NaN uniformly so they can never leak into stats.
        if not self.mask.all():
            self.values = self.values.copy()
            self.values[:, :, ~self.mask] = np.nan
        if not np.isfinite(self.values[:, :, self.mask]).all():
            raise DataError("non-finite values at unmasked cells")

    @property
    def n_time(self):
        return self.values.shape[0]

    @property
    def n_var(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def months(self):
        """Calendar month (1..12) of every record."""
        return (self.start_month - 1 + np.arange(self.n_time)) % 12 + 1

    @property
    def years(self):
        """Calendar year of every record."""
        return self.start_year + (self.start_month - 1 + np.arange(self.n_time)) // 12

    def slice_time(self, t0, t1):
        """Sub-series for record indices ``t0 <= t < t1``."""
        if not 0 <= t0 < t1 <= self.n_time:
            raise DataError(f"time slice [{t0}, {t1}) out of range for {self.n_time} records")
        total = self.start_month - 1 + t0
        return GriddedSeries(
            values=self.values[t0:t1].copy(),
            lat=self.lat,
            lon=self.lon,
            start_year=self.start_year + total // 12,
            start_month=total % 12 + 1,
            var_names=list(self.var_names),
            mask=self.mask,
        )

    def with_values(self, values):
        """Copy of this series with replaced values (same grid and stamp)."""
        return GriddedSeries(
            values=values,
            lat=self.lat,
            lon=self.lon,
            start_year=self.start_year,
            start_month=self.start_month,
            var_names=list(self.var_names),
            mask=self.mask,
        )


@dataclass
class Climatology:
    """Preprocessing state fitted on a training range.

    ``monthly_mean`` is indexed by calendar month (0 -> January). ``scale``
    holds one positive z-score divisor per variable; it is populated by
    :func:`zscore_normalize` with ``fit=True`` and read-only afterwards.
    """

    monthly_mean: np.ndarray  # [12, n_var, n_lat, n_lon]
    trend_slope: np.ndarray | None = None  # [n_var, n_lat, n_lon]
    trend_intercept: np.ndarray | None = None
    scale: np.ndarray | None = None  # [n_var]


@dataclass(frozen=True)
class SplitSpec:
    """Chronological train/val/test fractions, resolved to whole years."""

    train_fraction: float = 0.75
    val_fraction: float = 0.15
    test_fraction: float = 0.10

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if not all(0.0 < f < 1.0 for f in fr):
            raise DataError(f"split fractions must lie in (0, 1), got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {sum(fr)!r}")


def _trend_fit(values, t):
    """Per-cell OLS slope/intercept of ``values`` against time index ``t``."""
    t = t.astype(np.float64)
    tm = t.mean()
    vm = values.mean(axis=0)
    dt = t - tm
    denom = np.sum(dt * dt)
    slope = np.tensordot(dt, values - vm, axes=(0, 0)) / denom
    intercept = vm - slope * tm
    return slope, intercept


def detrend_linear(series, fit_range=None):
    """Remove a per-cell ordinary-least-squares line over the time index.

    Parameters
    ----------
    series : GriddedSeries
    fit_range : tuple of int, optional
        Half-open record range the line is fitted on; the fitted line is
        removed from the whole series. Defaults to the full record.

    Returns
    -------
    detrended : GriddedSeries
    slope, intercept : ndarray, shape (n_var, n_lat, n_lon)
        Units of value per month. Masked cells are NaN.
    """
    if series.n_time < 24:
        raise DataError(f"detrending needs >= 24 monthly records, got {series.n_time}")
    t0, t1 = (0, series.n_time) if fit_range is None else fit_range
    if t1 - t0 < 24:
        raise DataError(f"trend fit range needs >= 24 records, got {t1 - t0}")
    t = np.arange(series.n_time)
    slope, intercept = _trend_fit(series.values[t0:t1], t[t0:t1])
    line = slope[None] * t[:, None, None, None] + intercept[None]
    out = series.with_values(series.values - line)
    return out, slope, intercept


def remove_climatology(series, train_range):
    """Subtract per-calendar-month means fitted on ``train_range``.

    Returns the anomaly series and a :class:`Climatology` holding the
    twelve monthly mean fields. Each calendar month of the training range
    averages to zero (|mean| < 1e-10) in the result.
    """
    t0, t1 = train_range
    if t1 - t0 < 24:
        raise DataError(f"climatology needs >= 24 training months, got {t1 - t0}")
    months = series.months
    monthly = np.empty((12,) + series.values.shape[1:], dtype=np.float64)
    train_months = months[t0:t1]
    train_values = series.values[t0:t1]
    for m in range(1, 13):
        sel = train_months == m
        if not sel.any():
            raise DataError(f"training range has no samples for calendar month {m}")
        monthly[m - 1] = train_values[sel].mean(axis=0)
    anom = series.values - monthly[months - 1]
    clim = Climatology(monthly_mean=monthly)
    return series.with_values(anom), clim


def zscore_normalize(series, climatology, fit=True):
    """Scale each variable by its pooled standard deviation.

    With ``fit=True`` the divisor is the standard deviation pooled over all
    unmasked cells and all records of ``series`` (call this on the training
    slice), and is stored in ``climatology.scale``. With ``fit=False`` the
    stored scale is reused unchanged.
    """
    if fit:
        scale = np.empty(series.n_var, dtype=np.float64)
        for v in range(series.n_var):
            pool = series.values[:, v, series.mask]
            scale[v] = pool.std()
            if not np.isfinite(scale[v]) or scale[v] <= 0.0:
                raise DataError(f"variable {series.var_names[v]!r} has zero or undefined variance")
        climatology.scale = scale
    else:
        if climatology.scale is None:
            raise DataError("zscore_normalize(fit=False) requires a fitted scale")
        scale = climatology.scale
    out = series.values / scale[None, :, None, None]
    return series.with_values(out)


def _box_selection(series, region):
    lat_min, lat_max, lon_min, lon_max = region
    lat_sel = (series.lat >= lat_min) & (series.lat <= lat_max)
    if lon_min <= lon_max:
        lon_sel = (series.lon >= lon_min) & (series.lon <= lon_max)
    else:  # box wrapping the 0/360 seam
        lon_sel = (series.lon >= lon_min) | (series.lon <= lon_max)
    return lat_sel, lon_sel


def nino_index(series, var, region=NINO4_BOX):
    """Area-weighted (cos latitude) box mean of one variable per record.

    Parameters
    ----------
    series : GriddedSeries
    var : str
        Variable name.
    region : tuple
        ``(lat_min, lat_max, lon_min, lon_max)``; longitudes in 0-360, a
        box with ``lon_min > lon_max`` wraps the seam.

    Returns
    -------
    ndarray, shape (n_time,)
    """
    if var not in series.var_names:
        raise DataError(f"unknown variable {var!r}; have {series.var_names}")
    v = series.var_names.index(var)
    lat_sel, lon_sel = _box_selection(series, region)
    box_mask = series.mask & np.outer(lat_sel, lon_sel)
    if not box_mask.any():
        raise DataError(f"index region {region} contains no unmasked cells")
    w = np.cos(np.deg2rad(series.lat))[:, None] * np.ones_like(series.lon)[None, :]
    w = np.where(box_mask, w, 0.0)
    vals = np.where(box_mask[None], series.values[:, v], 0.0)
    return vals.reshape(series.n_time, -1) @ w.ravel() / w.sum()


def split_series(series, spec):
    """Chronological whole-year split into (train, val, test).

    The record must start in January and span whole calendar years so that
    no partition boundary splits a year. Year counts are the rounded
    fractions, remainder to the test set; every partition must receive at
    least one year.
    """
    if series.start_month != 1:
        raise DataError("split requires a series starting in January")
    if series.n_time % 12 != 0:
        raise DataError("split requires whole calendar years of data")
    n_years = series.n_time // 12
    if n_years < 4:
        raise DataError(f"split needs >= 4 years, got {n_years}")
    n_train = int(np.floor(spec.train_fraction * n_years + 0.5))
    n_val = int(np.floor(spec.val_fraction * n_years + 0.5))
    n_test = n_years - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(
            f"fractions {spec} leave an empty partition for {n_years} years "
            f"({n_train}/{n_val}/{n_test})"
        )
    b1, b2 = 12 * n_train, 12 * (n_train + n_val)
    return (
        series.slice_time(0, b1),
        series.slice_time(b1, b2),
        series.slice_time(b2, series.n_time),
    )


def preprocess(series, train_range, tol=1e-13, max_iter=100):
    """Full chain detrend -> climatology removal -> z-score.

    The trend, monthly means, and scales are all fitted on ``train_range``
    (half-open record indices) and applied to the whole series, so the
    returned :class:`Climatology` can reproduce the transform on unseen
    data via :func:`apply_preprocess`.

    Time trend and monthly means are not orthogonal regressors, so the
    detrend/deseasonalize alternation is repeated (detrend first) until it
    reaches its fixed point; this makes the whole chain idempotent. The
    accumulated line and monthly offsets are stored in the climatology.
    """
    t0, t1 = train_range
    t = np.arange(series.n_time)
    slope_acc = np.zeros(series.values.shape[1:])
    inter_acc = np.zeros(series.values.shape[1:])
    monthly_acc = np.zeros((12,) + series.values.shape[1:])
    work = series
    ref = np.nanstd(series.values[t0:t1]) or 1.0
    clim = None
    for _ in range(max_iter):
        work, slope, intercept = detrend_linear(work, fit_range=train_range)
        work, clim = remove_climatology(work, train_range)
        slope_acc += np.nan_to_num(slope)
        inter_acc += np.nan_to_num(intercept)
        monthly_acc += np.nan_to_num(clim.monthly_mean)
        step = max(np.nanmax(np.abs(slope)) * (t1 - t0), np.nanmax(np.abs(clim.monthly_mean)))
        if step < tol * ref:
            break
    clim = Climatology(monthly_mean=monthly_acc, trend_slope=slope_acc, trend_intercept=inter_acc)
    if not series.mask.all():
        clim.monthly_mean[:, :, ~series.mask] = np.nan
        clim.trend_slope[:, ~series.mask] = np.nan
        clim.trend_intercept[:, ~series.mask] = np.nan
    zscore_normalize(work.slice_time(t0, t1), clim, fit=True)
    out = zscore_normalize(work, clim, fit=False)
    return out, clim


def apply_preprocess(series, climatology, start_offset):
    """Apply a fitted :class:`Climatology` to new records.

    ``start_offset`` is the record index of ``series``' first record
    relative to the series the climatology was fitted on (the trend line
    continues along that index).
    """
    if climatology.trend_slope is None or climatology.scale is None:
        raise DataError("climatology is not fully fitted (trend or scale missing)")
    t = np.arange(start_offset, start_offset + series.n_time)
    line = climatology.trend_slope[None] * t[:, None, None, None] + climatology.trend_intercept[None]
    anom = series.values - line - climatology.monthly_mean[series.months - 1]
    anom /= climatology.scale[None, :, None, None]
    return series.with_values(anom)
