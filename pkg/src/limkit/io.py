"""Binary and CSV file formats.

Grid files ("LIMG") are flat little-endian binary:

    magic "LIMG" | u32 version=1 | u32 n_time n_var n_lat n_lon
    | u32 start_year | u32 start_month | f64 lat[n_lat] | f64 lon[n_lon]
    | u8 mask[n_lat*n_lon] (1=valid) | f64 names_len | UTF-8 name table
    | f64 values[time][var][lat][lon]   (masked cells NaN)

The name table is the variable names joined by ``\\n``; ``names_len`` is its
byte length. The CSV alternative is long format with header
``time,var,lat,lon,value`` (record index, no calendar stamp).

Every other artifact (EOF basis, operator, network checkpoint, ...) is
stored as one or more tagged sections:

    tag (4 bytes) | u32 version | u64 payload length | payload

Payload encodings live with the owning modules; this module provides the
container and the low-level pack/unpack helpers.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from .errors import DataError, ParseError
from .grids import GriddedSeries

__all__ = [
    "write_grid",
    "read_grid",
    "write_grid_csv",
    "read_grid_csv",
    "ingest_grid",
    "write_sections",
    "read_sections",
    "Writer",
    "Reader",
]

_GRID_MAGIC = b"LIMG"
_GRID_VERSION = 1


class Writer:
    """Accumulates little-endian fields into a byte buffer."""

    def __init__(self):
        self.parts = []

    def u8(self, x):
        self.parts.append(struct.pack("<B", x))

    def u32(self, x):
        self.parts.append(struct.pack("<I", x))

    def u64(self, x):
        self.parts.append(struct.pack("<Q", x))

    def i64(self, x):
        self.parts.append(struct.pack("<q", x))

    def f64(self, x):
        self.parts.append(struct.pack("<d", x))

    def string(self, s):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def array(self, a):
        """f64 array prefixed by ndim and dims."""
        a = np.ascontiguousarray(a, dtype=np.float64)
        self.u32(a.ndim)
        for d in a.shape:
            self.u64(d)
        self.parts.append(a.astype("<f8").tobytes())

    def raw(self, b):
        self.parts.append(bytes(b))

    def getvalue(self):
        return b"".join(self.parts)


class Reader:
    """Sequential little-endian field reader over a byte buffer."""

    def __init__(self, buf, offset=0):
        self.buf = buf
        self.pos = offset

    def _take(self, n, what):
        if self.pos + n > len(self.buf):
            raise ParseError("file truncated", field=what)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what="u8"):
        return struct.unpack("<B", self._take(1, what))[0]

    def u32(self, what="u32"):
        return struct.unpack("<I", self._take(4, what))[0]

    def u64(self, what="u64"):
        return struct.unpack("<Q", self._take(8, what))[0]

    def i64(self, what="i64"):
        return struct.unpack("<q", self._take(8, what))[0]

    def f64(self, what="f64"):
        return struct.unpack("<d", self._take(8, what))[0]

    def string(self, what="string"):
        n = self.u32(what)
        return self._take(n, what).decode("utf-8")

    def array(self, what="array"):
        ndim = self.u32(what)
        if ndim > 8:
            raise ParseError(f"implausible array rank {ndim}", field=what)
        shape = tuple(self.u64(what) for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def raw(self, n, what="raw"):
        return self._take(n, what)

    def done(self):
        return self.pos >= len(self.buf)


def write_grid(path, series):
    """Write a :class:`GriddedSeries` in the flat-binary grid format."""
    w = Writer()
    w.raw(_GRID_MAGIC)
    w.u32(_GRID_VERSION)
    n_time, n_var, n_lat, n_lon = series.shape
    for x in (n_time, n_var, n_lat, n_lon, int(series.start_year), int(series.start_month)):
        w.u32(x)
    w.raw(series.lat.astype("<f8").tobytes())
    w.raw(series.lon.astype("<f8").tobytes())
    w.raw(series.mask.astype(np.uint8).tobytes())
    names = "\n".join(series.var_names).encode("utf-8")
    w.f64(float(len(names)))
    w.raw(names)
    w.raw(np.ascontiguousarray(series.values, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(w.getvalue())


def read_grid(path):
    """Read a flat-binary grid file, validating header and payload length."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = Reader(buf)
    if r.raw(4, "magic") != _GRID_MAGIC:
        raise ParseError("bad magic; not a grid file", field="magic")
    version = r.u32("version")
    if version != _GRID_VERSION:
        raise ParseError(f"unsupported grid version {version}", field="version")
    n_time = r.u32("n_time")
    n_var = r.u32("n_var")
    n_lat = r.u32("n_lat")
    n_lon = r.u32("n_lon")
    start_year = r.u32("start_year")
    start_month = r.u32("start_month")
    if not 1 <= start_month <= 12:
        raise ParseError(f"start_month {start_month} out of range", field="start_month")
    lat = np.frombuffer(r.raw(8 * n_lat, "lat"), dtype="<f8").copy()
    lon = np.frombuffer(r.raw(8 * n_lon, "lon"), dtype="<f8").copy()
    if n_lat > 1 and not np.all(np.diff(lat) > 0):
        raise ParseError("lat not strictly increasing", field="lat")
    if n_lon > 1 and not np.all(np.diff(lon) > 0):
        raise ParseError("lon not strictly increasing", field="lon")
    mask = np.frombuffer(r.raw(n_lat * n_lon, "mask"), dtype=np.uint8).reshape(n_lat, n_lon).astype(bool)
    names_len = int(r.f64("names_len"))
    names = r.raw(names_len, "var_names").decode("utf-8")
    var_names = names.split("\n") if names else []
    if len(var_names) != n_var:
        raise ParseError(
            f"name table holds {len(var_names)} names for n_var={n_var}", field="var_names"
        )
    expect = n_time * n_var * n_lat * n_lon
    payload = buf[r.pos :]
    if len(payload) != 8 * expect:
        raise ParseError(
            f"declared n_time={n_time} implies {8 * expect} payload bytes, file has {len(payload)}",
            field="n_time",
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(n_time, n_var, n_lat, n_lon).copy()
    try:
        return GriddedSeries(values, lat, lon, start_year, start_month, var_names, mask)
    except DataError as exc:
        raise ParseError(str(exc), field="values") from exc


def write_grid_csv(path, series):
    """Write long-format CSV (``time,var,lat,lon,value``)."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["time", "var", "lat", "lon", "value"])
        for t in range(series.n_time):
            for v, name in enumerate(series.var_names):
                for i, la in enumerate(series.lat):
                    for j, lo in enumerate(series.lon):
                        out.writerow([t, name, repr(float(la)), repr(float(lo)),
                                      repr(float(series.values[t, v, i, j]))])


def read_grid_csv(path, start_year=1, start_month=1):
    """Read long-format CSV. The calendar stamp is not part of the format."""
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or [h.strip() for h in header] != ["time", "var", "lat", "lon", "value"]:
            raise ParseError(f"expected header time,var,lat,lon,value, got {header}", field="header")
        records = []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"line {lineno}: expected 5 columns, got {len(row)}", field="row")
            try:
                records.append((int(row[0]), row[1], float(row[2]), float(row[3]), float(row[4])))
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}", field="value") from exc
    if not records:
        raise ParseError("no data rows", field="value")
    times = sorted({r[0] for r in records})
    if times != list(range(len(times))):
        raise ParseError("time indices must be contiguous from 0", field="time")
    var_names = list(dict.fromkeys(r[1] for r in records))
    lat = np.array(sorted({r[2] for r in records}))
    lon = np.array(sorted({r[3] for r in records}))
    lat_ix = {v: i for i, v in enumerate(lat)}
    lon_ix = {v: i for i, v in enumerate(lon)}
    var_ix = {v: i for i, v in enumerate(var_names)}
    values = np.full((len(times), len(var_names), lat.size, lon.size), np.nan)
    for t, var, la, lo, val in records:
        values[t, var_ix[var], lat_ix[la], lon_ix[lo]] = val
    try:
        return GriddedSeries(values, lat, lon, start_year, start_month, var_names)
    except DataError as exc:
        raise ParseError(str(exc), field="values") from exc


def ingest_grid(path, format="flat-binary"):
    """Load a gridded series from disk.

    Parameters
    ----------
    path : str or Path
    format : {"flat-binary", "csv"}
    """
    if format == "flat-binary":
        return read_grid(path)
    if format == "csv":
        return read_grid_csv(path)
    raise DataError(f"unknown grid format {format!r}")


def write_sections(path, sections):
    """Write ``[(tag, version, payload_bytes), ...]`` to a container file."""
    with open(path, "wb") as fh:
        for tag, version, payload in sections:
            raw = tag.encode("ascii")
            if len(raw) != 4:
                raise DataError(f"section tag must be 4 bytes, got {tag!r}")
            fh.write(raw)
            fh.write(struct.pack("<I", version))
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_sections(path):
    """Read a container file into ``[(tag, version, payload_bytes), ...]``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    out = []
    pos = 0
    while pos < len(buf):
        if pos + 16 > len(buf):
            raise ParseError("truncated section header", field="section")
        tag = buf[pos : pos + 4].decode("ascii", errors="replace")
        version, length = struct.unpack("<IQ", buf[pos + 4 : pos + 16])
        pos += 16
        if pos + length > len(buf):
            raise ParseError(f"section {tag} declares {length} bytes beyond end of file", field=tag)
        out.append((tag, version, buf[pos : pos + length]))
        pos += length
    return out


def find_section(sections, tag):
    for t, version, payload in sections:
        if t == tag:
            return version, payload
    raise ParseError(f"no {tag} section in file", field=tag)
