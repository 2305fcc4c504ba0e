"""What the student actually sees: plane cuts, height cuts, and noise.

The masked visibility profile mimics a single fixed camera: a random plane
through the object hides one side, low points near the support surface drop
out, and what survives is jittered. This script measures those statistics
the same way the acceptance suite does.

Run:  python3 demos/mask_statistics.py
"""
import numpy as np

from ap2ap.geom import PointSet
from ap2ap.tracks import MaskSpec, PointMasker, apply_height_mask, sample_plane_mask

rng = np.random.default_rng(123)

# plane cut on a uniform ball: should keep half on average
trials = 10_000
kept = []
for _ in range(trials):
    direction = rng.normal(size=(2000, 3))
    radius = rng.random(2000) ** (1 / 3)
    ball = direction / np.linalg.norm(direction, axis=1, keepdims=True)
    ball = 0.05 * ball * radius[:, None]
    keep = sample_plane_mask(PointSet.of(ball), rng)
    kept.append(keep.mean())
kept = np.asarray(kept)
print(f"plane mask keep fraction: mean {kept.mean():.4f} over {trials} draws")
print(f"  middle 90%: [{np.quantile(kept, 0.05):.3f}, {np.quantile(kept, 0.95):.3f}]")

# height cut at ratio 1.0: the threshold sits at the very top, so only the
# small below_drop rate bites and ~95% survives
spec = MaskSpec(np.array([0.0, 0.0, 1.0]), 1.0, height_ratio=1.0,
                noise_sigma=0.0)
column = np.zeros((20_000, 3))
column[:, 2] = np.linspace(0.0, 0.10, 20_000)
masked = apply_height_mask(PointSet.of(column), spec, rng)
print(f"height mask at ratio 1.0 keeps {masked.visibility.mean():.3f} "
      "of a uniform column")

# noise: empirical sigma should match the spec
masker = PointMasker(plane=False, height=False, noise_sigma=0.005)
cloud = PointSet.of(rng.normal(size=(4000, 3)) * 0.03)
masker.reset(cloud, rng)
noisy = masker.step(cloud, rng)
residual = noisy.points[noisy.visibility] - cloud.points[noisy.visibility]
print(f"noise sigma: spec 0.0050, measured {residual.std():.4f}")
