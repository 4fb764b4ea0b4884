"""Train a small model on a synthetic webcam world and run the four retrieval tasks.

The images here carry a weak location cue (geo_amp) so that geolocalization
has something to learn; time structure (seasons, daylight) is always present.
Time of year stays near chance at this budget; the README explains why.
Takes about a minute on one core.

Run: python demos/02_train_and_retrieve.py
"""

import time

import numpy as np

from geotime import data as D
from geotime import evaluation as E
from geotime import model as M
from geotime import retrieval as R
from geotime import trainer as T
from geotime.geomath import haversine_km

world = D.generate_synthetic(D.SyntheticWorldConfig(n_cameras=120, frames_per_camera=60, seed=7, geo_amp=1.0))
train, test = D.split_cameras(world, 12, np.random.default_rng(0))
print(f"world: {len(world)} frames; train {len(train)} frames, test {len(test)} frames from unseen cameras")

mcfg = M.ModelConfig(d=32, heads=4, img_feat_dim=32)
tcfg = T.TrainerConfig(schedule=T.ScheduleConfig(lr_max=1e-3, warmup_iters=50, total_iters=800))
t0 = time.time()
res = T.run_training(train, mcfg, tcfg, on_iter=lambda it, br: it % 200 == 0 and print(f"  iter {it:4d} loss {br.total:.3f}"))
model = res.model
print(f"trained {tcfg.schedule.total_iters} iterations in {time.time() - t0:.0f} s")

rep = E.evaluate(model, test, train.coords)
chance = E.chance_baselines(200_000, np.random.default_rng(0))
print("\n== held-out metrics ==")
print(f"time of day  : {rep.tod_error_hours:5.2f} h   (chance {chance['tod_hours']:.2f})")
print(f"time of year : {rep.toy_error_days:5.1f} d   (chance {chance['toy_days']:.1f})")
print(f"geolocation  : {rep.geo_error_km:5.0f} km  (chance {chance['geo_km']:.0f})")
print(f"geo-time R@10: {rep.recall['10']:.3f}  (random ranking {rep.extras['random_R@10']:.4f})")

i = 0
feat, truth_loc, truth_t = test.features[i], test.coords[i], test.torus[i]
print(f"\n== one query: camera {test.camera_ids[i]} at {truth_loc.round(1)}, {test.timestamps[i]} ==")

locs = R.location_gallery(model, R.default_geo_candidates(train.coords))
g = R.task_geolocalize(model, feat, locs, k=3)[0]
for rank, row in enumerate(g.rows, 1):
    print(f"geolocate #{rank}: {locs.coords[row].round(1)} ({haversine_km(locs.coords[row], truth_loc):.0f} km off)")

times = R.time_gallery(model)
tp = R.task_time_predict(model, feat, times, truth_loc, k=None)[0]
months, hours = R.time_distributions(tp, times)
print(f"time: predicted month {months.argmax() + 1}, hour {hours.argmax()} (true month {test.timestamps[i].month}, "
      f"hour {test.timestamps[i].hour}); rerank beta {tp.beta:.2f}")

gallery = R.image_gallery(model, test)
target = np.array([(truth_t[0] + 0.5) % 1.0, truth_t[1]])  # same hour, six months later
hits = R.task_geotime_retrieve(model, feat, target, gallery, k=5, exclude=np.array([i]))[0]
print("same place, six months later:")
for row, cos in zip(hits.rows, hits.cosines):
    print(f"  {gallery.ids[row]} {test.timestamps[row]}  cosine {cos:.3f}")

comp = R.task_compositional(model, truth_loc, target, gallery, k=3)[0]
print("compose (location + time) top 3:", [f"{gallery.ids[r]} {test.timestamps[r]:%m-%d %H}h" for r in comp.rows])
