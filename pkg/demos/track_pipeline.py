"""From pixel tracks to an executable 3D track.

Synthesizes what an upstream perception stack would hand us: per-frame pixel
positions of tracked points, a relative depth video (wrong by a global
scale), and one metric depth observation of the first frame. The pipeline
calibrates, back-projects, picks waypoints, and writes the binary track.

Run:  python3 demos/track_pipeline.py
"""
import tempfile
from pathlib import Path

import numpy as np

from ap2ap.tracks import (DepthSequence, Track2D, calibrate_depths,
                          extract_waypoints, lift_tracks, project_to_pixels,
                          read_track, write_track)

rng = np.random.default_rng(4)
fx = fy = 320.0
cx, cy = 64.0, 64.0
intr = (fx, fy, cx, cy)

# a small object sliding away from the camera while rising
n, frames = 24, 30
base = np.concatenate([rng.uniform(-0.03, 0.03, size=(n, 2)),
                       rng.uniform(0.38, 0.42, size=(n, 1))], axis=1)
truth = np.stack([base + [0.002 * f, 0.001 * f, 0.003 * f] for f in range(frames)])

pix = project_to_pixels(truth, intr)
visible = np.ones((frames, n), dtype=bool)
visible[10:, 0] = False  # one point gets occluded a third of the way in

# relative depth: right shape, wrong scale (monocular nets do this).
# background is a far plane; each tracked point's depth is splatted at its
# pixel so the nearest-pixel lookup in the lift sees the true value.
depth_scale_error = 3.7
depth_maps = np.full((frames, 128, 128), 0.8 * depth_scale_error)
for f in range(frames):
    iu = np.round(pix[f, :, 0]).astype(int)
    iv = np.round(pix[f, :, 1]).astype(int)
    depth_maps[f, iv, iu] = truth[f, :, 2] * depth_scale_error

seq = DepthSequence(depth_maps, intr)
# the metric observation covers the same scene as relative frame 0, so the
# median ratio recovers the global scale exactly
observed = depth_maps[0] / depth_scale_error

calibrated = calibrate_depths(seq, observed)
print("scale recovered:",
      round(float(seq.depths[0, 0, 0] / calibrated.depths[0, 0, 0]), 4),
      "(injected", depth_scale_error, ")")

track = lift_tracks(Track2D(pix, visible), calibrated)
print("lifted:", track.n_frames, "frames of", track.n_points, "points,",
      int(track.visibility.sum()), "visible entries")

# keep only frames that moved at least 1cm since the previous waypoint
track = extract_waypoints(track, stride=2, min_advance=0.01)
print("waypoints at frames:", [int(w) for w in track.waypoint_indices])

err = np.abs(track.frame(0).points - truth[0]).max()
print("frame-0 reconstruction error:", float(err))

with tempfile.TemporaryDirectory() as td:
    path = Path(td) / "demo.trk"
    write_track(path, track)
    again = read_track(path)
    print("roundtrip lossless:",
          np.array_equal(track.coords, again.coords)
          and np.array_equal(track.visibility, again.visibility))
