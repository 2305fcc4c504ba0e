"""Point-track ingestion and masking.

Recorded 2D tracks plus relative depth come in as files, get calibrated to
metric scale against one real depth observation, and are lifted to 3D
object-centric tracks whose waypoints drive the executor. The same module
owns the plane-height masking used to model partial observability during
student training.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geom import PointSet, random_unit_vector

TRACK_MAGIC = b"AP2APTRK"
TRACK_VERSION = 1

IoError = OSError  # OS-level read/write failures propagate as-is


class FormatError(ValueError):
    """File does not parse: bad magic, version, or inconsistent shapes."""


class EmptyDepth(ValueError):
    """A depth frame (or the metric observation) has no valid pixels."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class Track2D:
    """Pixel-space point tracks. Frame 0 must see every point, since the
    tracked set is initialized from a segmented first frame."""

    coords: np.ndarray      # (T, N, 2) float64 pixels
    visibility: np.ndarray  # (T, N) bool

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.coords.ndim != 3 or self.coords.shape[2] != 2:
            raise FormatError(f"Track2D coords must be (T, N, 2), got {self.coords.shape}")
        if self.visibility.shape != self.coords.shape[:2]:
            raise FormatError("Track2D visibility shape mismatch")
        if not np.all(np.isfinite(self.coords)):
            raise FormatError("Track2D coords must be finite")
        if not np.all(self.visibility[0]):
            raise FormatError("Track2D frame 0 must have all points visible")

    @property
    def n_frames(self) -> int:
        return self.coords.shape[0]

    @property
    def n_points(self) -> int:
        return self.coords.shape[1]


@dataclass
class DepthSequence:
    """Per-frame depth maps with pinhole intrinsics. Pixels are valid where
    finite and > 0; units are relative until calibrated."""

    depths: np.ndarray                      # (T, H, W) float64
    intrinsics: tuple[float, float, float, float]  # fx, fy, cx, cy

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.depths.ndim != 3:
            raise FormatError(f"DepthSequence depths must be (T, H, W), got {self.depths.shape}")
        fx, fy, cx, cy = self.intrinsics
        if fx <= 0 or fy <= 0:
            raise FormatError("focal lengths must be positive")
        self.intrinsics = (float(fx), float(fy), float(cx), float(cy))

    @property
    def n_frames(self) -> int:
        return self.depths.shape[0]

    def valid_mask(self, t: int) -> np.ndarray:
        d = self.depths[t]
        return np.isfinite(d) & (d > 0)


@dataclass
class Track:
    """Metric 3D point tracks with ordered goal frames.

    Coordinates are float32 by contract: that is the on-disk precision, so
    write/read round trips are lossless.
    """

    coords: np.ndarray            # (T, N, 3) float32 meters
    visibility: np.ndarray        # (T, N) bool
    waypoint_indices: np.ndarray  # strictly increasing, last == T - 1
    intrinsics: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float32)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        self.waypoint_indices = np.asarray(self.waypoint_indices, dtype=np.int64)
        if self.coords.ndim != 3 or self.coords.shape[2] != 3:
            raise FormatError(f"Track coords must be (T, N, 3), got {self.coords.shape}")
        if self.visibility.shape != self.coords.shape[:2]:
            raise FormatError("Track visibility shape mismatch")
        w = self.waypoint_indices
        if w.size == 0 or w[-1] != self.n_frames - 1:
            raise FormatError("waypoint_indices must end at the final frame")
        if np.any(np.diff(w) <= 0) or w[0] < 0:
            raise FormatError("waypoint_indices must be strictly increasing and nonnegative")

    @property
    def n_frames(self) -> int:
        return self.coords.shape[0]

    @property
    def n_points(self) -> int:
        return self.coords.shape[1]

    def frame(self, t: int) -> PointSet:
        return PointSet(self.coords[t].astype(np.float64), self.visibility[t].copy())


@dataclass(frozen=True)
class MaskSpec:
    """One step's masking parameters: the episode plane plus the height rule."""

    plane_normal: np.ndarray
    plane_side: float
    height_ratio: float
    above_drop: float = 0.9
    below_drop: float = 0.05
    noise_sigma: float = 0.005

    def __post_init__(self):
        object.__setattr__(self, "plane_normal", np.asarray(self.plane_normal, dtype=np.float64))
        if abs(np.linalg.norm(self.plane_normal) - 1.0) > 1e-9:
            raise ValueError("plane_normal must be a unit vector")
        if not (0.0 <= self.above_drop <= 1.0 and 0.0 <= self.below_drop <= 1.0):
            raise ValueError("drop probabilities must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")


# ---------------------------------------------------------------------------
# Calibration and lifting
# ---------------------------------------------------------------------------

def _median_valid(depth: np.ndarray) -> float:
    valid = np.isfinite(depth) & (depth > 0)
    if not valid.any():
        raise EmptyDepth("depth map has no valid pixels")
    return float(np.median(depth[valid]))


def calibrate_depths(seq: DepthSequence, observed: np.ndarray) -> DepthSequence:
    """Scale the whole relative sequence by one global factor: the ratio of
    the metric observation's median depth to frame 0's median depth.

    Ordered as (depths / med_frame0) * med_observed so the calibrated
    frame-0 median reproduces the observed median bitwise (x/x is exactly
    1.0 in IEEE arithmetic), not merely within rounding.
    """
    med_obs = _median_valid(np.asarray(observed, dtype=np.float64))
    med_f0 = _median_valid(seq.depths[0])
    for t in range(seq.n_frames):
        if not seq.valid_mask(t).any():
            raise EmptyDepth(f"depth frame {t} has no valid pixels")
    return DepthSequence(seq.depths / med_f0 * med_obs, seq.intrinsics)


def project_to_pixels(points: np.ndarray, intrinsics) -> np.ndarray:
    """Pinhole projection of (..., 3) camera-frame points to (..., 2) pixels."""
    fx, fy, cx, cy = intrinsics
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    return np.stack([fx * points[..., 0] / z + cx,
                     fy * points[..., 1] / z + cy], axis=-1)


def lift_tracks(t2d: Track2D, depths: DepthSequence) -> Track:
    """Back-project each tracked pixel through the calibrated depth map.

    Points landing outside the image or on invalid depth turn invisible;
    depth is looked up at the nearest pixel (no filtering across object
    boundaries), while x/y use the exact subpixel coordinates.
    """
    if t2d.n_frames != depths.n_frames:
        raise FormatError(f"frame count mismatch: tracks {t2d.n_frames}, depths {depths.n_frames}")
    fx, fy, cx, cy = depths.intrinsics
    h, w = depths.depths.shape[1:]
    coords = np.zeros((t2d.n_frames, t2d.n_points, 3), dtype=np.float32)
    vis = np.zeros((t2d.n_frames, t2d.n_points), dtype=bool)
    for t in range(t2d.n_frames):
        u = t2d.coords[t, :, 0]
        v = t2d.coords[t, :, 1]
        iu = np.round(u).astype(int)
        iv = np.round(v).astype(int)
        inside = (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
        ok = t2d.visibility[t] & inside
        iu_c = np.clip(iu, 0, w - 1)
        iv_c = np.clip(iv, 0, h - 1)
        z = depths.depths[t, iv_c, iu_c]
        ok &= np.isfinite(z) & (z > 0)
        coords[t, ok, 0] = (u[ok] - cx) * z[ok] / fx
        coords[t, ok, 1] = (v[ok] - cy) * z[ok] / fy
        coords[t, ok, 2] = z[ok]
        vis[t] = ok
    return Track(coords, vis, np.array([t2d.n_frames - 1]), intrinsics=depths.intrinsics)


def extract_waypoints(track: Track, stride: int = 1, min_advance: float = 0.0) -> Track:
    """Pick goal frames: every stride-th frame whose mean displacement (over
    points visible at both ends) from the previous waypoint reaches
    min_advance. The final frame is always a waypoint."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    t_total = track.n_frames
    picked = []
    prev = 0
    for f in range(stride, t_total, stride):
        both = track.visibility[prev] & track.visibility[f]
        if both.any():
            d = np.linalg.norm(track.coords[f, both].astype(np.float64)
                               - track.coords[prev, both].astype(np.float64), axis=1)
            if d.mean() >= min_advance:
                picked.append(f)
                prev = f
    if not picked or picked[-1] != t_total - 1:
        picked.append(t_total - 1)
    return Track(track.coords, track.visibility, np.array(picked), intrinsics=track.intrinsics)


# ---------------------------------------------------------------------------
# Plane-height masking
# ---------------------------------------------------------------------------

def sample_plane_mask(points: PointSet, rng: np.random.Generator) -> np.ndarray:
    """Keep flags from one random plane through the centroid: a uniform
    normal is drawn, one side is chosen, and points strictly on the other
    side are dropped. Points on the plane are kept."""
    if points.points.shape[0] < 2:
        raise ValueError("plane masking needs at least 2 points")
    normal = random_unit_vector(rng)
    side = 1.0 if rng.random() < 0.5 else -1.0
    centroid = points.points.mean(axis=0)
    signed = (points.points - centroid) @ normal
    return side * signed >= 0


def apply_height_mask(points: PointSet, spec: MaskSpec, rng: np.random.Generator) -> PointSet:
    """Occlude by height, then perturb what survives.

    The threshold sits at height_ratio of the visible z-extent; visible
    points strictly above it drop with above_drop, the rest with below_drop.
    Survivors get iid Gaussian noise on every coordinate. Degenerate extent
    (all one z) counts everything as below.
    """
    if not points.visibility.any():
        raise ValueError("height masking needs at least one visible point")
    n = points.points.shape[0]
    z = points.points[:, 2]
    z_vis = z[points.visibility]
    z_min, z_max = float(z_vis.min()), float(z_vis.max())
    if z_max == z_min:
        above = np.zeros(n, dtype=bool)
    else:
        above = z > z_min + spec.height_ratio * (z_max - z_min)
    drop_p = np.where(above, spec.above_drop, spec.below_drop)
    u = rng.random(n)
    keep = points.visibility & (u >= drop_p)
    noise = rng.normal(0.0, spec.noise_sigma, size=(n, 3)) if spec.noise_sigma > 0 \
        else np.zeros((n, 3))
    coords = points.points.copy()
    coords[keep] += noise[keep]
    return PointSet(coords, keep)


class PointMasker:
    """Episode-scoped masking state for student observations.

    ``reset`` fixes one plane for the episode; ``step`` applies the plane
    flags, redraws the height ratio, and adds observation noise. Any part
    can be switched off for ablations or evaluation profiles.
    """

    def __init__(self, above_drop: float = 0.9, below_drop: float = 0.05,
                 noise_sigma: float = 0.005, ratio_range: tuple = (0.2, 1.0),
                 plane: bool = True, height: bool = True):
        self.above_drop = above_drop
        self.below_drop = below_drop
        self.noise_sigma = noise_sigma
        self.ratio_range = ratio_range
        self.plane = plane
        self.height = height
        self._plane_keep = None

    def reset(self, points: PointSet, rng: np.random.Generator):
        if self.plane:
            self._plane_keep = sample_plane_mask(points, rng)
        else:
            self._plane_keep = np.ones(points.points.shape[0], dtype=bool)

    def step(self, points: PointSet, rng: np.random.Generator) -> PointSet:
        if self._plane_keep is None:
            raise RuntimeError("PointMasker.step before reset")
        vis = points.visibility & self._plane_keep
        masked = PointSet(points.points, vis)
        if not vis.any():
            return masked
        if self.height:
            ratio = float(rng.uniform(*self.ratio_range))
            spec = MaskSpec(np.array([0.0, 0.0, 1.0]), 1.0, ratio,
                            self.above_drop, self.below_drop, self.noise_sigma)
            masked = apply_height_mask(masked, spec, rng)
        elif self.noise_sigma > 0:
            coords = masked.points.copy()
            coords[vis] += rng.normal(0.0, self.noise_sigma, size=(int(vis.sum()), 3))
            masked = PointSet(coords, vis)
        return masked


# ---------------------------------------------------------------------------
# Track file v1
# ---------------------------------------------------------------------------

_RECORD_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("v", "u1")])


def write_track(path, track: Track):
    with open(path, "wb") as f:
        f.write(TRACK_MAGIC)
        f.write(struct.pack("<III", TRACK_VERSION, track.n_frames, track.n_points))
        intr = track.intrinsics if track.intrinsics is not None else (0.0, 0.0, 0.0, 0.0)
        f.write(struct.pack("<4f", *intr))
        records = np.zeros(track.n_frames * track.n_points, dtype=_RECORD_DTYPE)
        flat = track.coords.reshape(-1, 3)
        records["x"] = flat[:, 0]
        records["y"] = flat[:, 1]
        records["z"] = flat[:, 2]
        records["v"] = track.visibility.reshape(-1).astype(np.uint8)
        f.write(records.tobytes())
        w = track.waypoint_indices
        f.write(struct.pack("<I", len(w)))
        f.write(np.asarray(w, dtype="<u4").tobytes())


def read_track(path) -> Track:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != TRACK_MAGIC:
            raise FormatError(f"not a track file (magic {magic!r})")
        version, t, n = struct.unpack("<III", _read_exact(f, 12))
        if version != TRACK_VERSION:
            raise FormatError(f"unsupported track version {version}")
        intr = struct.unpack("<4f", _read_exact(f, 16))
        intrinsics = None if all(v == 0 for v in intr) else intr
        records = np.frombuffer(_read_exact(f, t * n * _RECORD_DTYPE.itemsize), dtype=_RECORD_DTYPE)
        coords = np.stack([records["x"], records["y"], records["z"]], axis=1).reshape(t, n, 3)
        vis = records["v"].astype(bool).reshape(t, n)
        (w_count,) = struct.unpack("<I", _read_exact(f, 4))
        waypoints = np.frombuffer(_read_exact(f, 4 * w_count), dtype="<u4").astype(np.int64)
    return Track(coords, vis, waypoints, intrinsics=intrinsics)


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


# ---------------------------------------------------------------------------
# Text-header input formats (2D tracks, depth sequences, single depth maps)
# ---------------------------------------------------------------------------
#
# Each file is a short ASCII header terminated by a "data" line, followed by
# a raw little-endian payload:
#   TRACKS2D 1:  frames T / points N;   payload f32 coords (T*N*2), u8 vis (T*N)
#   DEPTHSEQ 1:  frames T / height H / width W / intrinsics fx fy cx cy;
#                payload f32 depths (T*H*W)
#   DEPTHOBS 1:  height H / width W;    payload f32 depths (H*W)


def _read_header(f, magic: str) -> dict:
    first = f.readline().decode("ascii", errors="replace").strip()
    parts = first.split()
    if len(parts) != 2 or parts[0] != magic:
        raise FormatError(f"expected '{magic} <version>' header, got {first!r}")
    if parts[1] != "1":
        raise FormatError(f"unsupported {magic} version {parts[1]}")
    fields = {}
    while True:
        line = f.readline()
        if not line:
            raise FormatError("header ended before 'data' line")
        line = line.decode("ascii", errors="replace").strip()
        if line == "data":
            return fields
        key, *vals = line.split()
        fields[key] = vals


def _header_int(fields: dict, key: str) -> int:
    try:
        return int(fields[key][0])
    except (KeyError, IndexError, ValueError) as e:
        raise FormatError(f"bad or missing header field {key!r}") from e


def read_tracks2d(path) -> Track2D:
    with open(path, "rb") as f:
        fields = _read_header(f, "TRACKS2D")
        t = _header_int(fields, "frames")
        n = _header_int(fields, "points")
        coords = np.frombuffer(_read_exact(f, 4 * t * n * 2), dtype="<f4").astype(np.float64)
        vis = np.frombuffer(_read_exact(f, t * n), dtype="u1").astype(bool)
    return Track2D(coords.reshape(t, n, 2), vis.reshape(t, n))


def write_tracks2d(path, t2d: Track2D):
    with open(path, "wb") as f:
        f.write(f"TRACKS2D 1\nframes {t2d.n_frames}\npoints {t2d.n_points}\ndata\n".encode())
        f.write(t2d.coords.astype("<f4").tobytes())
        f.write(t2d.visibility.astype("u1").tobytes())


def read_depth_sequence(path) -> DepthSequence:
    with open(path, "rb") as f:
        fields = _read_header(f, "DEPTHSEQ")
        t = _header_int(fields, "frames")
        h = _header_int(fields, "height")
        w = _header_int(fields, "width")
        try:
            intr = tuple(float(v) for v in fields["intrinsics"][:4])
            if len(intr) != 4:
                raise ValueError
        except (KeyError, ValueError) as e:
            raise FormatError("bad or missing intrinsics header field") from e
        depths = np.frombuffer(_read_exact(f, 4 * t * h * w), dtype="<f4").astype(np.float64)
    return DepthSequence(depths.reshape(t, h, w), intr)


def write_depth_sequence(path, seq: DepthSequence):
    fx, fy, cx, cy = seq.intrinsics
    t, h, w = seq.depths.shape
    with open(path, "wb") as f:
        f.write(f"DEPTHSEQ 1\nframes {t}\nheight {h}\nwidth {w}\n"
                f"intrinsics {fx} {fy} {cx} {cy}\ndata\n".encode())
        f.write(seq.depths.astype("<f4").tobytes())


def read_depth_map(path) -> np.ndarray:
    with open(path, "rb") as f:
        fields = _read_header(f, "DEPTHOBS")
        h = _header_int(fields, "height")
        w = _header_int(fields, "width")
        depths = np.frombuffer(_read_exact(f, 4 * h * w), dtype="<f4").astype(np.float64)
    return depths.reshape(h, w)


def write_depth_map(path, depth: np.ndarray):
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(f"DEPTHOBS 1\nheight {h}\nwidth {w}\ndata\n".encode())
        f.write(np.asarray(depth).astype("<f4").tobytes())
