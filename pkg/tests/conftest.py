import numpy as np
import pytest

from limkit.grids import GriddedSeries


def make_grid(values, lat=None, lon=None, start_year=1, start_month=1,
              var_names=None, mask=None):
    """Build a GriddedSeries from a raw value array with default coords."""
    values = np.asarray(values, dtype=np.float64)
    n_time, n_var, n_lat, n_lon = values.shape
    if lat is None:
        lat = np.linspace(-10.0, 10.0, n_lat)
    if lon is None:
        lon = np.linspace(140.0, 260.0, n_lon)
    if var_names is None:
        var_names = [f"var{v}" for v in range(n_var)]
    return GriddedSeries(values, lat, lon, start_year, start_month, var_names, mask)


def random_grid(rng, n_time=48, n_var=2, n_lat=4, n_lon=5, masked=False):
    values = rng.standard_normal((n_time, n_var, n_lat, n_lon))
    mask = None
    if masked:
        mask = np.ones((n_lat, n_lon), dtype=bool)
        mask[0, 0] = False
        mask[-1, -1] = False
    return make_grid(values, mask=mask)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
