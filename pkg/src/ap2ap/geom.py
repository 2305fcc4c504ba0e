"""SE(3) poses, visibility-aware point sets, rigid registration, and goal distances.

Everything here is a pure function over numpy arrays; RNG state is always
passed in explicitly so callers own determinism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateInput(ValueError):
    """Registration is impossible: too few or collinear/coincident visible pairs."""


class NoVisiblePoints(ValueError):
    """An operation that needs at least one visible point got none."""


# ---------------------------------------------------------------------------
# SO(3) helpers
# ---------------------------------------------------------------------------

def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (Rodrigues)."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        # second-order series, exact enough at this magnitude
        K = _skew(w)
        return np.eye(3) + K + 0.5 * (K @ K)
    axis = w / theta
    K = _skew(axis)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, with stable branches near 0 and pi."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < 1e-7:
        # R ~ I + [w]x, antisymmetric part recovers w to first order
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta > np.pi - 1e-5:
        # near pi the antisymmetric part vanishes; recover axis axis^T from
        # the symmetric part alone so it cannot contaminate the estimate
        S = (R + R.T) * 0.5
        A = (S - cos_theta * np.eye(3)) / (1.0 - cos_theta)  # ~ axis axis^T
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k]
        n = np.linalg.norm(axis)
        if n > 0:
            axis = axis / n
        # fix the sign using the antisymmetric residue
        v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(v, axis) < 0:
            axis = -axis
        return theta * axis
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * v


def rotation_angle(R: np.ndarray) -> float:
    """Rotation angle in [0, pi] of a rotation matrix."""
    return float(np.arccos(np.clip((np.trace(np.asarray(R)) - 1.0) * 0.5, -1.0, 1.0)))


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    n = np.linalg.norm(v)
    while n < 1e-12:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
    return v / n


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: x -> rotation @ x + translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (
            np.all(np.isfinite(R))
            and np.all(np.isfinite(self.translation))
            and np.linalg.norm(R.T @ R - np.eye(3)) < tol * 10
            and abs(np.linalg.det(R) - 1.0) < tol * 10
        )


@dataclass
class PointSet:
    """N x 3 points with per-point visibility flags."""

    points: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.visibility is None:
            self.visibility = np.ones(len(self.points), dtype=bool)
        self.visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)
        if len(self.points) < 1:
            raise ValueError("PointSet needs at least one point")
        if len(self.visibility) != len(self.points):
            raise ValueError("visibility length must match point count")

    @staticmethod
    def of(points: np.ndarray, visibility: np.ndarray | None = None) -> "PointSet":
        return PointSet(points, visibility)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_visible(self) -> int:
        return int(self.visibility.sum())

    def visible_points(self) -> np.ndarray:
        return self.points[self.visibility]


@dataclass
class PairedPoints:
    """N x 6 correspondence-concatenated current||target points.

    A pair is visible iff its current point is visible.
    """

    pairs: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.float64).reshape(-1, 6)
        self.visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)
        if len(self.visibility) != len(self.pairs):
            raise ValueError("visibility length must match pair count")

    @staticmethod
    def from_sets(current: PointSet, target: PointSet) -> "PairedPoints":
        if len(current) != len(target):
            raise ValueError("current/target point counts differ")
        pairs = np.concatenate([current.points, target.points], axis=1)
        return PairedPoints(pairs, current.visibility.copy())

    def current(self) -> PointSet:
        return PointSet(self.pairs[:, 0:3], self.visibility.copy())

    def target(self) -> PointSet:
        return PointSet(self.pairs[:, 3:6], self.visibility.copy())

    def __len__(self) -> int:
        return len(self.pairs)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def transform_points(p: Pose, s: PointSet) -> PointSet:
    return PointSet(p.apply(s.points), s.visibility.copy())


def kabsch(src: PointSet, dst: PointSet) -> Pose:
    """Least-squares rigid transform mapping visible src points onto dst.

    Uses only pairs visible in both sets (occluded points carry stale
    coordinates). The SVD reflection branch is corrected so det(R) = +1.
    Raises DegenerateInput when fewer than 3 pairs are mutually visible or
    the visible pairs are collinear/coincident.
    """
    if len(src) != len(dst):
        raise ValueError("src/dst point counts differ")
    mask = src.visibility & dst.visibility
    if int(mask.sum()) < 3:
        raise DegenerateInput("need at least 3 mutually visible pairs")
    a = src.points[mask]
    b = dst.points[mask]
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    H = (a - ca).T @ (b - cb)
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 1e-15 or S[1] <= 1e-9 * S[0]:
        raise DegenerateInput("visible pairs are collinear or coincident")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cb - R @ ca
    return Pose(R, t)


def mean_visible_distance(current: PointSet, target: PointSet) -> float:
    """Mean Euclidean distance over visible corresponding points (d_t).

    Visibility is taken from the current set; raises NoVisiblePoints when
    nothing is visible (tracking loss).
    """
    if len(current) != len(target):
        raise ValueError("current/target point counts differ")
    mask = current.visibility
    n = int(mask.sum())
    if n == 0:
        raise NoVisiblePoints("no visible points for distance")
    diff = current.points[mask] - target.points[mask]
    return float(np.linalg.norm(diff, axis=1).mean())


def sample_nearby_pose(current: Pose, trans_range: float, rot_range: float,
                       rng: np.random.Generator) -> Pose:
    """Random pose near `current`.

    Translation offset is uniform in a cube of half-width trans_range; the
    rotation perturbs the current orientation by an angle uniform in
    [0, rot_range] about a uniformly random axis, leaving the translation
    component untouched by the rotation.
    """
    if trans_range < 0 or rot_range < 0:
        raise ValueError("ranges must be nonnegative")
    dt = rng.uniform(-trans_range, trans_range, size=3)
    angle = rng.uniform(0.0, rot_range)
    axis = random_unit_vector(rng)
    dR = so3_exp(axis * angle)
    return Pose(dR @ current.rotation, current.translation + dt)


def interpolate_pose(a: Pose, b: Pose, alpha: float) -> Pose:
    """Geodesic interpolation from a (alpha=0) to b (alpha=1)."""
    w = so3_log(b.rotation @ a.rotation.T)
    R = so3_exp(w * alpha) @ a.rotation
    t = (1.0 - alpha) * a.translation + alpha * b.translation
    return Pose(R, t)
