"""Independent reference implementations used by several test modules.

None of these import the package's own geometry; they are written from
first principles so that agreement is meaningful.
"""

from __future__ import annotations

import math
from datetime import datetime

import numpy as np


def uniform_sphere(rng, n):
    """(n, 2) lat/lon degrees, uniform on the sphere."""
    z = rng.uniform(-1.0, 1.0, n)
    lon = rng.uniform(-180.0, 180.0, n)
    return np.stack([np.degrees(np.arcsin(z)), lon], axis=1)


def central_angle_cosines(a, b):
    """Spherical law of cosines (degrees in, radians out)."""
    la1, lo1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    la2, lo2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    c = np.sin(la1) * np.sin(la2) + np.cos(la1) * np.cos(la2) * np.cos(lo1 - lo2)
    return np.arccos(np.clip(c, -1.0, 1.0))


def healpix_plane(lat, lon):
    """HEALPix projection to the plane (x, y) in radians.

    In this plane every HEALPix cell is a square rotated by 45 degrees
    centered on its cell center, so cell membership is the nearest center
    in L1 distance (x taken modulo 2 pi).
    """
    z = np.sin(np.radians(lat))
    phi = np.radians(((np.asarray(lon) + 180.0) % 360.0) - 180.0)
    x = phi.copy()
    y = 3 * np.pi / 8 * z
    cap = np.abs(z) > 2.0 / 3.0
    sigma = np.sqrt(3 * (1 - np.abs(z[cap])))
    pc = -np.pi + (2 * np.floor((phi[cap] + np.pi) / (np.pi / 2)) + 1) * np.pi / 4
    x[cap] = pc + (phi[cap] - pc) * sigma
    y[cap] = np.sign(z[cap]) * np.pi / 4 * (2 - sigma)
    return x, y


def l1_nearest(points, centers):
    """(index of nearest center in the HEALPix plane, margin to second nearest)."""
    px, py = healpix_plane(points[:, 0], points[:, 1])
    cx, cy = healpix_plane(centers[:, 0], centers[:, 1])
    dx = np.abs(px[:, None] - cx[None, :]) % (2 * np.pi)
    dx = np.minimum(dx, 2 * np.pi - dx)
    d = dx + np.abs(py[:, None] - cy[None, :])
    part = np.partition(d, 1, axis=1)
    return d.argmin(axis=1), part[:, 1] - part[:, 0]


def great_circle_nearest(points, centers):
    """(index of nearest center by great-circle angle, angular margin in rad)."""
    def unit(p):
        la, lo = np.radians(p[:, 0]), np.radians(p[:, 1])
        return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], 1)

    ang = np.arccos(np.clip(unit(points) @ unit(centers).T, -1, 1))
    part = np.partition(ang, 1, axis=1)
    return ang.argmin(axis=1), part[:, 1] - part[:, 0]


def torus_from_seconds(ts: datetime):
    """Year and day fractions by explicit second counting."""
    leap = ts.year % 4 == 0 and (ts.year % 100 != 0 or ts.year % 400 == 0)
    year_s = (366 if leap else 365) * 86400
    doy = ts.timetuple().tm_yday - 1
    sod = ts.hour * 3600 + ts.minute * 60 + ts.second
    return (doy * 86400 + sod) / year_s, sod / 86400


def info_nce_loop(x, y, tau):
    """Symmetrized InfoNCE with explicit loops."""
    n = len(x)
    total = 0.0
    for a, b in ((x, y), (y, x)):
        for i in range(n):
            logits = [float(a[i] @ b[j]) / tau for j in range(n)]
            m = max(logits)
            lse = m + math.log(sum(math.exp(v - m) for v in logits))
            total += (lse - logits[i]) / n
    return total / 2


def rerank_loop(sims, probs, bins, psi, beta_max):
    """Score oracle with scalar arithmetic."""
    B = len(probs)
    H = -sum(p * math.log(p) for p in probs if p > 0)
    beta = beta_max * (1 - H / math.log(B))
    return [s / psi + beta * math.log(max(probs[b], 1e-12)) for s, b in zip(sims, bins)]
