"""Why the goal encoder consumes (current, target) rows as pairs.

A symmetric object rotated about its own center produces the same point SET
at every angle; the correspondence is the only thing that changes. An
encoder that pools current and target separately cannot see the rotation.
Pooling paired rows can.

Run:  python3 demos/encoding_pairs.py
"""
import numpy as np

from ap2ap.geom import so3_exp
from ap2ap.nn.models import (DecoupledEncoder, EncoderConfig, PairSetEncoder)
from ap2ap.nn.autodiff import Tensor
from ap2ap.nn.layers import ParamStore

rng = np.random.default_rng(7)

# 8 latitude rings of 8 points: a 45 degree yaw permutes the set exactly
rings = 8
per = 8
lat = np.arccos(np.linspace(-0.9, 0.9, rings))
lon = np.arange(per) * 2 * np.pi / per
phi, theta = np.meshgrid(lat, lon, indexing="ij")
sphere = 0.05 * np.stack([np.sin(phi) * np.cos(theta),
                          np.sin(phi) * np.sin(theta),
                          np.cos(phi)], axis=-1).reshape(-1, 3)
n = len(sphere)

R = so3_exp(np.array([0.0, 0.0, 2 * np.pi / per]))
rotated = sphere @ R.T

# same SET to machine precision, different correspondence
cfg = EncoderConfig(point_widths=(32, 64), post_widths=(64,))
store = ParamStore()
paired = PairSetEncoder(store, "paired", cfg, rng)
decoup = DecoupledEncoder(store, "decoup", cfg, rng)

def feat(enc, cur, tgt):
    rows = Tensor(np.concatenate([cur, tgt], axis=1)[None])
    return enc.forward(rows).numpy()

identity_goal = feat(paired, sphere, sphere)
rotated_goal = feat(paired, sphere, rotated)
print("paired encoder, |f(identity) - f(rotation)| =",
      float(np.abs(identity_goal - rotated_goal).max()))

identity_goal = feat(decoup, sphere, sphere)
rotated_goal = feat(decoup, sphere, rotated)
print("decoupled encoder, same diff =",
      float(np.abs(identity_goal - rotated_goal).max()))

# permutation of the JOINT rows never matters for either
perm = rng.permutation(n)
a = feat(paired, sphere, rotated)
b = feat(paired, sphere[perm], rotated[perm])
print("paired is permutation invariant:", float(np.abs(a - b).max()))
