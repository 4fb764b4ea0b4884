"""Tour of the label spaces: HEALPix cells, torus time, soft targets and reranking.

Run: python demos/01_geometry_and_targets.py
"""

from datetime import datetime

import numpy as np

from geotime import objectives as O
from geotime import retrieval as R
from geotime.geomath import (
    GeoCoord,
    TimeBinId,
    bin_center,
    cell_center,
    geo_to_cell,
    haversine_km,
    timestamp_to_torus,
    torus_distance,
    torus_to_bin,
)

print("== places ==")
paris, sydney = GeoCoord(48.8566, 2.3522), GeoCoord(-33.8688, 151.2093)
print(f"Paris -> Sydney: {haversine_km(paris, sydney):.0f} km")
for nside in (1, 2, 4, 8):
    cell = geo_to_cell(paris, nside)
    c = cell_center(cell)
    print(f"nside {nside}: {12 * nside * nside:4d} cells, Paris in cell {cell.index:3d}, "
          f"center {c.lat:6.2f},{c.lon:7.2f} ({haversine_km(paris, c):.0f} km away)")

print("\n== times ==")
for ts in (datetime(2023, 1, 1), datetime(2023, 7, 2, 12), datetime(2023, 12, 31, 23, 30)):
    t = timestamp_to_torus(ts)
    b = torus_to_bin(t)
    print(f"{ts.isoformat():20s} -> theta {t.theta:.4f}, phi {t.phi:.4f}, bin {b.flat:3d} "
          f"(month {b.month + 1}, hour {b.hour})")
new_year_eve, new_year = timestamp_to_torus(datetime(2023, 12, 31, 23)), timestamp_to_torus(datetime(2023, 1, 1, 1))
print(f"31 Dec 23:00 vs 1 Jan 01:00 on the torus: {torus_distance(new_year_eve, new_year):.4f} (wraps around)")

print("\n== soft targets ==")
geo = O.geo_affinity()
row = O.soft_target(geo_to_cell(paris).index, geo)
top = np.argsort(row)[::-1][:4]
print("geo target mass for Paris' cell and its nearest neighbours:",
      ", ".join(f"{row[i]:.3f}" for i in top), f"(entropy {O.entropy(row):.2f} of ln 768 = {np.log(768):.2f})")
for gamma in (1.0, 0.05, 0.01):
    t = O.soft_target(torus_to_bin(timestamp_to_torus(datetime(2023, 6, 1, 12))).flat, O.time_affinity(gamma))
    print(f"time target, gamma {gamma:4}: own bin {t.max():.4f}, entropy {O.entropy(t):.2f} of ln 288 = {np.log(288):.2f}")

print("\n== entropy-adaptive reranking ==")
sims = np.array([0.80, 0.78, 0.60])
bins = np.array([0, 1, 2])
for name, probs in (("uniform head", np.full(3, 1 / 3)), ("confident head", np.array([0.05, 0.9, 0.05]))):
    scores, beta = R.rerank(sims, probs, bins, R.RerankConfig(psi=0.07, beta_max=1.0))
    print(f"{name:15s}: beta {beta:.3f}, order by cosine {np.argsort(-sims).tolist()}, reranked {np.argsort(-scores).tolist()}")
print("bin 100 center:", bin_center(TimeBinId.from_flat(100)))
