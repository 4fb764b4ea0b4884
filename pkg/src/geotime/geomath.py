"""Spherical and toroidal geometry.

Locations are (lat, lon) in degrees. Times live on the flat unit torus as
(theta, phi) = (year fraction, day fraction), both in [0, 1).

Most functions accept either the small value types defined here or plain
arrays whose last axis has length 2, and are vectorized over leading axes.
"""

from __future__ import annotations

import calendar
import math
from dataclasses import dataclass
from datetime import datetime

import numpy as np

EARTH_RADIUS_KM = 6371.0
N_MONTH_BINS = 12
N_HOUR_BINS = 24
N_TIME_BINS = N_MONTH_BINS * N_HOUR_BINS
MAX_TORUS_DISTANCE = math.sqrt(0.5)


@dataclass(frozen=True)
class GeoCoord:
    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        if not -90.0 <= lat <= 90.0 or math.isnan(lat):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", float(wrap_lon(self.lon)))

    def as_array(self) -> np.ndarray:
        return np.array([self.lat, self.lon])


@dataclass(frozen=True)
class TorusTime:
    theta: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "theta", float(wrap_unit(self.theta)))
        object.__setattr__(self, "phi", float(wrap_unit(self.phi)))

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.phi])


@dataclass(frozen=True)
class CellId:
    nside: int
    index: int

    def __post_init__(self):
        check_nside(self.nside)
        if not 0 <= self.index < 12 * self.nside**2:
            raise IndexError(f"cell index {self.index} out of range for nside={self.nside}")


@dataclass(frozen=True)
class TimeBinId:
    month: int
    hour: int

    def __post_init__(self):
        if not (0 <= self.month < N_MONTH_BINS and 0 <= self.hour < N_HOUR_BINS):
            raise IndexError(f"time bin ({self.month}, {self.hour}) out of range")

    @property
    def flat(self) -> int:
        return self.hour * N_MONTH_BINS + self.month

    @classmethod
    def from_flat(cls, index: int) -> "TimeBinId":
        if not 0 <= index < N_TIME_BINS:
            raise IndexError(f"flat time bin {index} out of range")
        return cls(int(index) % N_MONTH_BINS, int(index) // N_MONTH_BINS)


def wrap_lon(lon):
    """Map longitudes into [-180, 180)."""
    return (np.asarray(lon, dtype=float) + 180.0) % 360.0 - 180.0


def wrap_unit(x):
    """Map values into [0, 1); guards the x % 1 == 1.0 rounding case."""
    y = np.asarray(x, dtype=float) % 1.0
    return np.where(y >= 1.0, 0.0, y)


def check_nside(nside: int) -> None:
    if nside < 1 or nside & (nside - 1):
        raise ValueError(f"nside must be a positive power of two, got {nside}")


def _latlon(x) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(x, GeoCoord):
        return np.float64(x.lat), np.float64(x.lon)
    a = np.asarray(x, dtype=float)
    return a[..., 0], a[..., 1]


def _torus(x) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(x, TorusTime):
        return np.float64(x.theta), np.float64(x.phi)
    a = np.asarray(x, dtype=float)
    return a[..., 0], a[..., 1]


# ---------------------------------------------------------------------------
# sphere


def haversine_km(a, b) -> np.ndarray | float:
    """Great-circle distance in km between points `a` and `b` (broadcasting)."""
    lat1, lon1 = _latlon(a)
    lat2, lon2 = _latlon(b)
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2 - lon1)
    h = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    h = np.clip(h, 0.0, 1.0)
    d = 2 * EARTH_RADIUS_KM * np.arctan2(np.sqrt(h), np.sqrt(1 - h))
    return float(d) if np.ndim(d) == 0 else d


def latlon_to_unit(lat, lon) -> np.ndarray:
    """Unit vectors on the sphere, shape (..., 3)."""
    la, lo = np.radians(lat), np.radians(lon)
    return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1)


def _ang2pix_ring(nside: int, z: np.ndarray, phi: np.ndarray) -> np.ndarray:
    # RING scheme ang2pix, z = cos(colatitude), phi in [0, 2pi)
    npix = 12 * nside * nside
    ncap = 2 * nside * (nside - 1)
    za = np.abs(z)
    tt = (phi / (0.5 * np.pi)) % 4.0
    pix = np.empty(z.shape, dtype=np.int64)

    eq = za <= 2.0 / 3.0
    if np.any(eq):
        t1 = nside * (0.5 + tt[eq])
        t2 = nside * z[eq] * 0.75
        jp = np.floor(t1 - t2).astype(np.int64)
        jm = np.floor(t1 + t2).astype(np.int64)
        ir = nside + 1 + jp - jm
        kshift = 1 - (ir & 1)
        ip = (jp + jm - nside + kshift + 1) // 2
        ip = ip % (4 * nside)
        pix[eq] = ncap + (ir - 1) * 4 * nside + ip

    cap = ~eq
    if np.any(cap):
        ttc = tt[cap]
        tp = ttc - np.floor(ttc)
        tmp = nside * np.sqrt(3.0 * (1.0 - za[cap]))
        jp = np.floor(tp * tmp).astype(np.int64)
        jm = np.floor((1.0 - tp) * tmp).astype(np.int64)
        ir = jp + jm + 1
        ip = np.floor(ttc * ir).astype(np.int64) % (4 * ir)
        north = z[cap] > 0
        pix[cap] = np.where(north, 2 * ir * (ir - 1) + ip, npix - 2 * ir * (ir + 1) + ip)
    return pix


def _pix2ang_ring(nside: int, pix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    npix = 12 * nside * nside
    ncap = 2 * nside * (nside - 1)
    fact2 = 4.0 / npix
    fact1 = 2 * nside * fact2
    z = np.empty(pix.shape)
    phi = np.empty(pix.shape)

    north = pix < ncap
    if np.any(north):
        p = pix[north]
        iring = (1 + np.sqrt(1 + 2 * p).astype(np.int64)) >> 1
        iring = _fix_isqrt_ring(iring, p, lambda r: 2 * r * (r - 1))
        iphi = p + 1 - 2 * iring * (iring - 1)
        z[north] = 1.0 - iring * iring * fact2
        phi[north] = (iphi - 0.5) * 0.5 * np.pi / iring

    eq = (pix >= ncap) & (pix < npix - ncap)
    if np.any(eq):
        ip = pix[eq] - ncap
        tmp = ip // (4 * nside)
        iring = tmp + nside
        iphi = ip - 4 * nside * tmp + 1
        fodd = np.where((iring + nside) & 1, 1.0, 0.5)
        z[eq] = (2 * nside - iring) * fact1
        phi[eq] = (iphi - fodd) * np.pi * 0.75 * fact1

    south = pix >= npix - ncap
    if np.any(south):
        ip = npix - pix[south]
        iring = (1 + np.sqrt(2 * ip - 1).astype(np.int64)) >> 1
        iring = _fix_isqrt_ring(iring, ip - 1, lambda r: 2 * r * (r - 1))
        iphi = 4 * iring + 1 - (ip - 2 * iring * (iring - 1))
        z[south] = iring * iring * fact2 - 1.0
        phi[south] = (iphi - 0.5) * 0.5 * np.pi / iring
    return z, phi


def _fix_isqrt_ring(iring, p, start):
    # float sqrt can be off by one for large p; ring r owns [start(r), start(r+1))
    iring = np.where(start(iring) > p, iring - 1, iring)
    return np.where(start(iring + 1) <= p, iring + 1, iring)


def geo_to_cell(coord, nside: int = 8):
    """HEALPix RING index of each location.

    Returns a ``CellId`` for a ``GeoCoord`` input, otherwise an integer array
    with the input's leading shape.
    """
    check_nside(nside)
    lat, lon = _latlon(coord)
    lat = np.atleast_1d(lat).astype(float)
    lon = np.atleast_1d(lon).astype(float)
    z = np.sin(np.radians(lat))
    phi = np.radians(lon) % (2 * np.pi)
    pix = _ang2pix_ring(nside, z, phi)
    if isinstance(coord, GeoCoord):
        return CellId(nside, int(pix[0]))
    return pix.reshape(np.shape(_latlon(coord)[0]))


def cell_center(cell, nside: int | None = None):
    """Center of a HEALPix RING cell.

    Accepts a ``CellId`` (returns ``GeoCoord``) or an index array together
    with ``nside`` (returns an array of shape (..., 2) in degrees).
    """
    if isinstance(cell, CellId):
        z, phi = _pix2ang_ring(cell.nside, np.array([cell.index], dtype=np.int64))
        return GeoCoord(np.degrees(np.arcsin(z[0])), np.degrees(phi[0]))
    if nside is None:
        raise TypeError("nside is required for raw cell indices")
    check_nside(nside)
    pix = np.asarray(cell, dtype=np.int64)
    if np.any((pix < 0) | (pix >= 12 * nside * nside)):
        raise IndexError(f"cell index out of range for nside={nside}")
    z, phi = _pix2ang_ring(nside, pix.ravel())
    lat = np.degrees(np.arcsin(np.clip(z, -1, 1)))
    lon = wrap_lon(np.degrees(phi))
    return np.stack([lat, lon], axis=-1).reshape(pix.shape + (2,))


def all_cell_centers(nside: int = 8) -> np.ndarray:
    return cell_center(np.arange(12 * nside * nside), nside)


# ---------------------------------------------------------------------------
# torus


def _year_bounds(year: int) -> tuple[datetime, float]:
    start = datetime(year, 1, 1)
    days = 366 if calendar.isleap(year) else 365
    return start, days * 86400.0


def timestamp_to_torus(ts: datetime) -> TorusTime:
    """(fraction of the year elapsed, fraction of the day elapsed)."""
    start, year_seconds = _year_bounds(ts.year)
    elapsed = (ts.replace(tzinfo=None) - start).total_seconds()
    day_seconds = ts.hour * 3600 + ts.minute * 60 + ts.second + ts.microsecond / 1e6
    return TorusTime(elapsed / year_seconds, day_seconds / 86400.0)


def timestamps_to_torus(stamps) -> np.ndarray:
    """Vector form of `timestamp_to_torus`, shape (n, 2)."""
    out = np.empty((len(stamps), 2))
    for i, ts in enumerate(stamps):
        t = timestamp_to_torus(ts)
        out[i] = t.theta, t.phi
    return out


def torus_distance(a, b):
    """Geodesic distance on the flat unit torus, in [0, sqrt(0.5)]."""
    ta, pa = _torus(a)
    tb, pb = _torus(b)
    total = 0.0
    for d in (np.abs(wrap_unit(ta) - wrap_unit(tb)), np.abs(wrap_unit(pa) - wrap_unit(pb))):
        total = total + np.minimum(1.0 - d, d) ** 2
    out = np.sqrt(total)
    return float(out) if np.ndim(out) == 0 else out


def torus_to_bin(t):
    """Month/hour bin of a torus point (``TimeBinId``) or flat bin indices for arrays.

    Flat index is ``hour * 12 + month``.
    """
    theta, phi = _torus(t)
    month = np.minimum(np.floor(wrap_unit(theta) * N_MONTH_BINS), N_MONTH_BINS - 1).astype(np.int64)
    hour = np.minimum(np.floor(wrap_unit(phi) * N_HOUR_BINS), N_HOUR_BINS - 1).astype(np.int64)
    if isinstance(t, TorusTime):
        return TimeBinId(int(month), int(hour))
    return hour * N_MONTH_BINS + month


def bin_center(b):
    """Torus coordinates of a bin center. ``TimeBinId`` in, ``TorusTime`` out;
    flat index arrays map to arrays of shape (..., 2)."""
    if isinstance(b, TimeBinId):
        return TorusTime((b.month + 0.5) / N_MONTH_BINS, (b.hour + 0.5) / N_HOUR_BINS)
    flat = np.asarray(b, dtype=np.int64)
    if np.any((flat < 0) | (flat >= N_TIME_BINS)):
        raise IndexError("flat time bin out of range")
    month = flat % N_MONTH_BINS
    hour = flat // N_MONTH_BINS
    return np.stack([(month + 0.5) / N_MONTH_BINS, (hour + 0.5) / N_HOUR_BINS], axis=-1)


def all_bin_centers() -> np.ndarray:
    return bin_center(np.arange(N_TIME_BINS))


def fine_time_grid(days: int = 365, hours: int = 24) -> np.ndarray:
    """Dense torus grid at day x hour resolution (cell midpoints), shape (days*hours, 2)."""
    th = (np.arange(days) + 0.5) / days
    ph = (np.arange(hours) + 0.5) / hours
    tt, pp = np.meshgrid(th, ph, indexing="ij")
    return np.stack([tt.ravel(), pp.ravel()], axis=-1)
