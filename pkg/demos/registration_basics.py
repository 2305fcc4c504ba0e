"""Rigid registration on point sets: the workhorse under both the baseline
controller and track-to-goal conversion.

Run:  python3 demos/registration_basics.py
"""
import numpy as np

from ap2ap.geom import (DegenerateInput, Pose, interpolate_pose, kabsch,
                        mean_visible_distance, PointSet, so3_exp, so3_log)

rng = np.random.default_rng(0)

# a cloud, a known rigid motion, and its recovery
src = PointSet.of(rng.normal(size=(40, 3)) * 0.05)
true = Pose(so3_exp(np.array([0.2, -0.1, 0.4])), np.array([0.03, 0.0, 0.08]))
dst = PointSet.of(true.apply(src.points))

est = kabsch(src, dst)
print("rotation error:", np.linalg.norm(so3_log(est.rotation @ true.rotation.T)))
print("translation error:", np.linalg.norm(est.translation - true.translation))

# noise moves the estimate but detR stays +1
noisy = PointSet.of(dst.points + rng.normal(0, 0.002, size=dst.points.shape))
est_n = kabsch(src, noisy)
print("with noise 2mm, det(R) =", round(np.linalg.det(est_n.rotation), 12))
print("residual distance:", mean_visible_distance(PointSet.of(est_n.apply(src.points)), noisy))

# only mutually visible points count
vis_src = np.ones(40, dtype=bool)
vis_src[:10] = False
vis_dst = np.ones(40, dtype=bool)
vis_dst[30:] = False
est_v = kabsch(PointSet(src.points, vis_src), PointSet(dst.points, vis_dst))
print("partial visibility still works:",
      np.allclose(est_v.rotation, true.rotation, atol=1e-9))

# degenerate inputs refuse loudly instead of returning garbage
line = PointSet.of(np.outer(np.linspace(0, 1, 8), [1.0, 0.0, 0.0]))
try:
    kabsch(line, line)
except DegenerateInput as e:
    print("collinear cloud ->", e)

# interpolation for waypoint previews: rotation via the geodesic
a = Pose(np.eye(3), np.zeros(3))
b = Pose(so3_exp(np.array([0.0, 0.0, np.pi / 2])), np.array([0.1, 0.0, 0.0]))
for alpha in (0.0, 0.5, 1.0):
    p = interpolate_pose(a, b, alpha)
    print(f"alpha {alpha}: yaw {so3_log(p.rotation)[2]:.4f} x {p.translation[0]:.3f}")
