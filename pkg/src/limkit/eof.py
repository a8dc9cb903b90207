"""EOF basis fitting, projection to principal components, and field
reconstruction with optional high-mode noise augmentation.

Bases are fitted per variable on the (time x unmasked-cell) data matrix and
the per-variable PCs are concatenated into the reduced state. Pattern rows
are orthonormal over unmasked cells; the sign convention makes each
pattern's largest-magnitude element positive so fits are reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .grids import GriddedSeries
from .io import Reader, Writer, find_section, read_sections, write_sections

__all__ = ["VarBasis", "EofBasis", "PcSeries", "fit_eof", "project", "reconstruct",
           "save_basis", "load_basis", "save_pcs", "load_pcs"]


@dataclass
class VarBasis:
    """Single-variable EOF block: orthonormal patterns over unmasked cells."""

    name: str
    patterns: np.ndarray  # [n_modes, n_cells]
    singular_values: np.ndarray  # [n_modes], non-increasing
    n_keep: int
    train_pc_std: np.ndarray  # [n_modes]
    total_ss: float  # Frobenius norm squared of the training data matrix

    @property
    def n_modes(self):
        return self.patterns.shape[0]

    def explained_variance(self):
        """Fraction of total training variance carried by each mode."""
        return self.singular_values**2 / self.total_ss


@dataclass
class EofBasis:
    """Concatenated per-variable EOF truncation of a gridded state.

    ``cell_index`` maps unmasked (lat, lon) cells to flat row-major ids,
    shared by all variables. ``n_noise_hi`` is the upper mode bound for
    evaluation-time noise augmentation.
    """

    var_bases: list[VarBasis]
    lat: np.ndarray
    lon: np.ndarray
    mask: np.ndarray
    n_noise_hi: int
    basis_id: str = field(default="")

    def __post_init__(self):
        if not self.basis_id:
            self.basis_id = self._content_hash()
        for vb in self.var_bases:
            if vb.n_keep > vb.n_modes:
                raise DataError(f"{vb.name}: n_keep {vb.n_keep} exceeds {vb.n_modes} modes")

    def _content_hash(self):
        h = hashlib.sha1()
        for vb in self.var_bases:
            h.update(vb.name.encode())
            h.update(np.ascontiguousarray(vb.patterns).tobytes())
        return h.hexdigest()[:12]

    @property
    def cell_index(self):
        return np.flatnonzero(self.mask.ravel())

    @property
    def var_names(self):
        return [vb.name for vb in self.var_bases]

    @property
    def n_keep(self):
        return [vb.n_keep for vb in self.var_bases]

    @property
    def d(self):
        """Reduced state dimension (sum of per-variable truncations)."""
        return sum(vb.n_keep for vb in self.var_bases)

    def kept_patterns(self):
        """Block-diagonal map from the reduced state to stacked cell space.

        Returns an array of shape (d, n_var * n_cells): row k holds the
        pattern of reduced component k in its variable's cell block and
        zeros elsewhere.
        """
        n_cells = self.cell_index.size
        out = np.zeros((self.d, len(self.var_bases) * n_cells))
        row = 0
        for v, vb in enumerate(self.var_bases):
            out[row : row + vb.n_keep, v * n_cells : (v + 1) * n_cells] = vb.patterns[: vb.n_keep]
            row += vb.n_keep
        return out

    def grid_target(self, series):
        """Stacked unmasked-cell values of ``series``, shape (T, n_var*n_cells)."""
        cells = series.values[:, :, self.mask]
        return cells.reshape(series.n_time, -1)


@dataclass
class PcSeries:
    """Reduced state time series with calendar month labels."""

    z: np.ndarray  # [time, d]
    month: np.ndarray  # [time], 1..12, consecutive
    basis_id: str
    start_year: int = 1

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.month = np.asarray(self.month, dtype=np.int64)
        if self.z.ndim != 2 or self.month.shape != (self.z.shape[0],):
            raise DataError("PcSeries z must be [time, d] with matching month labels")
        if self.z.shape[0] > 1:
            nxt = self.month[:-1] % 12 + 1
            if not np.array_equal(nxt, self.month[1:]):
                raise DataError("month labels must advance consecutively through 1..12")

    @property
    def n_time(self):
        return self.z.shape[0]

    @property
    def d(self):
        return self.z.shape[1]

    def slice_time(self, t0, t1):
        return PcSeries(self.z[t0:t1].copy(), self.month[t0:t1].copy(), self.basis_id,
                        start_year=self.start_year + (self.month[0] - 1 + t0) // 12)


def _data_matrix(series, v, mask):
    return series.values[:, v, mask]


def fit_eof(train, n_keep, n_total=None):
    """Fit per-variable EOF bases on a preprocessed training series.

    Parameters
    ----------
    train : GriddedSeries
        Anomalies (detrended, deseasonalized, scaled).
    n_keep : dict or sequence of int
        Truncation per variable (by name, or in variable order).
    n_total : int, optional
        Number of modes retained in the basis (for reconstruction noise);
        defaults to the full rank bound min(n_time, n_cells).

    Returns
    -------
    EofBasis
    """
    if isinstance(n_keep, dict):
        keep = [int(n_keep[name]) for name in train.var_names]
    else:
        keep = [int(k) for k in n_keep]
    if len(keep) != train.n_var:
        raise DataError("n_keep must give one truncation per variable")
    n_cells = int(train.mask.sum())
    rank_bound = min(train.n_time, n_cells)
    if n_total is None:
        n_total = rank_bound
    if n_total > rank_bound:
        raise DataError(f"n_total={n_total} exceeds rank bound min(T, cells)={rank_bound}")
    if max(keep) > n_total:
        raise DataError(f"n_keep {keep} exceeds n_total={n_total}")
    var_bases = []
    for v, name in enumerate(train.var_names):
        X = _data_matrix(train, v, train.mask)
        _, s, vt = np.linalg.svd(X, full_matrices=False)
        pats = vt[:n_total].copy()
        # Reproducible sign: largest-magnitude element of each pattern positive.
        for k in range(pats.shape[0]):
            j = int(np.argmax(np.abs(pats[k])))
            if pats[k, j] < 0:
                pats[k] *= -1.0
        pcs = X @ pats.T
        var_bases.append(VarBasis(
            name=name,
            patterns=pats,
            singular_values=s[:n_total].copy(),
            n_keep=keep[v],
            train_pc_std=pcs.std(axis=0),
            total_ss=float(np.sum(s**2)),
        ))
    return EofBasis(var_bases, train.lat.copy(), train.lon.copy(), train.mask.copy(),
                    n_noise_hi=n_total)


def _check_grid(field, basis):
    same = (
        field.lat.shape == basis.lat.shape
        and field.lon.shape == basis.lon.shape
        and np.allclose(field.lat, basis.lat)
        and np.allclose(field.lon, basis.lon)
        and np.array_equal(field.mask, basis.mask)
        and field.var_names == basis.var_names
    )
    if not same:
        raise DataError("field grid/mask/variables do not match the basis")


def project(field, basis):
    """Project fields onto the kept modes of each variable's basis."""
    _check_grid(field, basis)
    blocks = []
    for v, vb in enumerate(basis.var_bases):
        X = _data_matrix(field, v, basis.mask)
        blocks.append(X @ vb.patterns[: vb.n_keep].T)
    return PcSeries(np.concatenate(blocks, axis=1), field.months, basis.basis_id,
                    start_year=int(field.years[0]))


def reconstruct(z, basis, noise_seed=None):
    """Rebuild gridded fields from reduced states.

    With ``noise_seed`` given, independent Gaussian loadings with the
    training per-mode standard deviation are added on modes
    ``n_keep..n_noise_hi`` of each variable, independently per time step.
    The kept-mode content is never altered by the augmentation.
    """
    if z.basis_id != basis.basis_id:
        raise DataError("PcSeries was produced with a different basis")
    if z.d != basis.d:
        raise DataError(f"state dimension {z.d} does not match basis d={basis.d}")
    n_time = z.n_time
    rng = np.random.default_rng(noise_seed) if noise_seed is not None else None
    values = np.full((n_time, len(basis.var_bases)) + basis.mask.shape, np.nan)
    col = 0
    for v, vb in enumerate(basis.var_bases):
        zv = z.z[:, col : col + vb.n_keep]
        col += vb.n_keep
        cells = zv @ vb.patterns[: vb.n_keep]
        if rng is not None:
            hi = min(basis.n_noise_hi, vb.n_modes)
            if hi > vb.n_keep:
                std = vb.train_pc_std[vb.n_keep : hi]
                eps = rng.standard_normal((n_time, hi - vb.n_keep)) * std
                cells = cells + eps @ vb.patterns[vb.n_keep : hi]
        full = np.full((n_time,) + basis.mask.shape, np.nan)
        full[:, basis.mask] = cells
        values[:, v] = full
    start_month = int(z.month[0])
    return GriddedSeries(values, basis.lat, basis.lon, z.start_year, start_month,
                         list(basis.var_names), basis.mask)


_EOFB_VERSION = 1
_PCSR_VERSION = 1


def basis_to_bytes(basis):
    w = Writer()
    w.u32(len(basis.var_bases))
    w.u32(basis.n_noise_hi)
    w.string(basis.basis_id)
    w.array(basis.lat)
    w.array(basis.lon)
    w.u32(basis.mask.shape[0])
    w.u32(basis.mask.shape[1])
    w.raw(basis.mask.astype(np.uint8).tobytes())
    for vb in basis.var_bases:
        w.string(vb.name)
        w.u32(vb.n_keep)
        w.f64(vb.total_ss)
        w.array(vb.patterns)
        w.array(vb.singular_values)
        w.array(vb.train_pc_std)
    return w.getvalue()


def basis_from_bytes(payload):
    r = Reader(payload)
    n_var = r.u32("n_var")
    n_noise_hi = r.u32("n_noise_hi")
    basis_id = r.string("basis_id")
    lat = r.array("lat")
    lon = r.array("lon")
    n_lat = r.u32("n_lat")
    n_lon = r.u32("n_lon")
    mask = np.frombuffer(r.raw(n_lat * n_lon, "mask"), dtype=np.uint8).reshape(n_lat, n_lon).astype(bool)
    var_bases = []
    for _ in range(n_var):
        name = r.string("var_name")
        n_keep = r.u32("n_keep")
        total_ss = r.f64("total_ss")
        patterns = r.array("patterns")
        singular_values = r.array("singular_values")
        train_pc_std = r.array("train_pc_std")
        var_bases.append(VarBasis(name, patterns, singular_values, n_keep, train_pc_std, total_ss))
    return EofBasis(var_bases, lat, lon, mask, n_noise_hi, basis_id=basis_id)


def save_basis(path, basis):
    write_sections(path, [("EOFB", _EOFB_VERSION, basis_to_bytes(basis))])


def load_basis(path):
    _, payload = find_section(read_sections(path), "EOFB")
    return basis_from_bytes(payload)


def pcs_to_bytes(pcs):
    w = Writer()
    w.string(pcs.basis_id)
    w.i64(pcs.start_year)
    w.array(pcs.z)
    w.array(pcs.month.astype(np.float64))
    return w.getvalue()


def pcs_from_bytes(payload):
    r = Reader(payload)
    basis_id = r.string("basis_id")
    start_year = r.i64("start_year")
    z = r.array("z")
    month = r.array("month").astype(np.int64)
    return PcSeries(z, month, basis_id, start_year=start_year)


def save_pcs(path, pcs):
    write_sections(path, [("PCSR", _PCSR_VERSION, pcs_to_bytes(pcs))])


def load_pcs(path):
    _, payload = find_section(read_sections(path), "PCSR")
    return pcs_from_bytes(payload)
