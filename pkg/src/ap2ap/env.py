"""Desk-scale goal-conditioned manipulation environment.

A floating 6-DoF hand with four fingertip probes and a one-DoF grip moves
procedural rigid objects on a table. Goals are target poses expressed as
target point sets paired index-for-index with the object's surface points.
Grasping is an attach/detach/slip abstraction gated by the scaled contact
rule (fingertip distance sum < 0.48*s and hand-object distance < 0.12*s);
articulated contact physics is deliberately out of scope.

All randomness flows through one numpy Generator per environment instance,
drawn in a fixed order, so equal seeds give bit-equal trajectories.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .geom import (
    PairedPoints,
    PointSet,
    Pose,
    compose,
    invert,
    mean_visible_distance,
    sample_nearby_pose,
    so3_exp,
    transform_points,
)

SCALE = 0.25  # desk-scale factor applied to the contact and success constants

GRAVITY = 9.81
TABLE_Z = 0.0
GROUND_DAMPING = 8.0          # friction-proxy velocity decay on contact, per second
CONTACT_TOL = 1e-4
FINGERTIP_BASE_RADIUS = 0.06  # hand-frame ring radius at full aperture
FINGERTIP_Z = -0.04
FINGERTIP_ANGLES = np.deg2rad([45.0, 135.0, 225.0, 315.0])
APERTURE_CLOSE_FACTOR = 0.3   # ring radius factor at aperture 0
SLIP_COOLDOWN_S = 0.15        # re-attach lockout after a slip event

OBJECT_FAMILIES = ("box", "ellipsoid", "cylinder", "composite")


class InvalidAction(ValueError):
    """A step received a non-finite action component."""


class GoalNotReached(RuntimeError):
    """advance_goal called while the current goal is not stably achieved."""


# ---------------------------------------------------------------------------
# Curriculum
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurriculumStage:
    stage_id: int
    families: tuple
    lin_limit: float        # meters per step
    ang_limit: float        # radians per step
    reset_threshold: float  # object-goal distance that aborts the episode
    goal_trans_range: float
    goal_rot_range: float
    hz: float
    lr_scale: float


STAGES = {
    1: CurriculumStage(1, ("box",), 0.02, 0.15, 0.3, 0.10, 0.5, 20.0, 1.0),
    2: CurriculumStage(2, ("box",), 0.01, 0.10, 0.5, 0.10, 0.5, 20.0, 1.0),
    3: CurriculumStage(3, OBJECT_FAMILIES, 0.01, 0.10, 0.5, 0.12, 0.6, 10.0, 0.3),
}


# ---------------------------------------------------------------------------
# Objects
# ---------------------------------------------------------------------------

@dataclass
class ObjectSpec:
    family: str
    sizes: np.ndarray           # full extents of the primitive(s), meters
    surface_points: np.ndarray  # (n, 3) object frame, area-uniform
    mass: float
    friction: float = 1.0

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.float64)
        self.surface_points = np.asarray(self.surface_points, dtype=np.float64)


def _sample_box_surface(half: np.ndarray, n: int, rng) -> np.ndarray:
    areas = np.array([half[1] * half[2], half[1] * half[2],
                      half[0] * half[2], half[0] * half[2],
                      half[0] * half[1], half[0] * half[1]])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-half, half, size=(n, 3))
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _sample_ellipsoid_surface(semi: np.ndarray, n: int, rng) -> np.ndarray:
    a, b, c = semi
    m_max = max(b * c, a * c, a * b)
    out = []
    need = n
    while need > 0:
        u = rng.normal(size=(max(2 * need, 16), 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        m = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        keep = rng.random(len(u)) < m / m_max
        taken = (u * semi)[keep][:need]
        out.append(taken)
        need -= len(taken)
    return np.concatenate(out)


def _sample_cylinder_surface(radius: float, half_h: float, n: int, rng) -> np.ndarray:
    lateral = 2.0 * np.pi * radius * 2.0 * half_h
    cap = np.pi * radius * radius
    comp = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.zeros((n, 3))
    on_side = comp == 0
    pts[on_side, 0] = radius * np.cos(theta[on_side])
    pts[on_side, 1] = radius * np.sin(theta[on_side])
    pts[on_side, 2] = rng.uniform(-half_h, half_h, size=int(on_side.sum()))
    on_cap = ~on_side
    rho = radius * np.sqrt(rng.random(int(on_cap.sum())))
    pts[on_cap, 0] = rho * np.cos(theta[on_cap])
    pts[on_cap, 1] = rho * np.sin(theta[on_cap])
    pts[on_cap, 2] = np.where(comp[on_cap] == 1, half_h, -half_h)
    return pts


def sample_object(stage: CurriculumStage, rng: np.random.Generator,
                  size_range: tuple = (0.03, 0.12), n_points: int = 128,
                  fixed_family: str | None = None,
                  fixed_size: float | None = None) -> ObjectSpec:
    """Procedural object: family from the stage set, extents uniform in
    size_range, surface points area-uniform. ``fixed_family``/``fixed_size``
    pin the draw for controlled experiments."""
    family = fixed_family if fixed_family is not None else \
        stage.families[int(rng.integers(len(stage.families)))]
    lo, hi = size_range
    if fixed_size is not None:
        sizes = np.full(3, float(fixed_size))
    else:
        sizes = rng.uniform(lo, hi, size=3)
    half = sizes / 2.0
    if family == "box":
        pts = _sample_box_surface(half, n_points, rng)
        volume = sizes.prod()
    elif family == "ellipsoid":
        pts = _sample_ellipsoid_surface(half, n_points, rng)
        volume = 4.0 / 3.0 * np.pi * half.prod()
    elif family == "cylinder":
        sizes = np.array([sizes[0], sizes[0], sizes[2]])
        half = sizes / 2.0
        pts = _sample_cylinder_surface(half[0], half[2], n_points, rng)
        volume = np.pi * half[0] ** 2 * sizes[2]
    elif family == "composite":
        # two stacked boxes, the upper one smaller and laterally offset
        h2 = half * rng.uniform(0.4, 0.7, size=3)
        offset = np.array([half[0] * 0.4, 0.0, half[2] + h2[2]])
        a1 = 8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2])
        a2 = 8.0 * (h2[0] * h2[1] + h2[1] * h2[2] + h2[0] * h2[2])
        from_first = rng.random(n_points) < a1 / (a1 + a2)
        n1 = int(from_first.sum())
        pts = np.empty((n_points, 3))
        pts[from_first] = _sample_box_surface(half, n1, rng)
        pts[~from_first] = _sample_box_surface(h2, n_points - n1, rng) + offset
        v1, v2 = sizes.prod(), 8.0 * h2.prod()
        centroid = (v2 * offset) / (v1 + v2)
        pts -= centroid
        volume = v1 + v2
    else:
        raise ValueError(f"unknown object family: {family}")
    return ObjectSpec(family, sizes, pts, mass=300.0 * float(volume))


# ---------------------------------------------------------------------------
# Reward
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardWeights:
    w_g: float = 2.0
    w_f: float = 0.5
    w_h: float = 0.5
    w_b: float = 10.0
    w_c: float = 0.1
    w_t: float = 1.0
    w_a: float = 0.01
    w_hold: float = 0.0   # per-step bonus while attached; training aid, off by default
    w_prog: float = 0.0   # potential-based progress (prev d_t - d_t); off by default
    k_g: float = 20.0
    k_f: float = 10.0
    k_h: float = 10.0


@dataclass(frozen=True)
class RewardTerms:
    r_goal: float
    r_fo: float
    r_ho: float
    r_bonus: float
    r_grip: float
    r_table: float
    r_action: float
    r_hold: float = 0.0
    r_prog: float = 0.0

    @property
    def total(self) -> float:
        return (self.r_goal + self.r_fo + self.r_ho + self.r_bonus
                + self.r_grip + self.r_table + self.r_action + self.r_hold
                + self.r_prog)


@dataclass
class EnvState:
    object_pose: Pose
    object_velocity: np.ndarray   # linear 3 + angular 3
    hand_pose: Pose
    hand_velocity: np.ndarray     # linear 3 + angular 3, per second
    aperture: float
    aperture_rate: float
    attached: bool
    goal_pose: Pose
    waypoint_index: int
    sim_time: float
    success_time: float

    def fingertips(self) -> np.ndarray:
        return fingertip_positions(self.hand_pose, self.aperture)


def fingertip_positions(hand_pose: Pose, aperture: float) -> np.ndarray:
    """Four probes on a ring below the hand origin; the ring radius scales
    with aperture, the vertical offset does not."""
    radius = FINGERTIP_BASE_RADIUS * (APERTURE_CLOSE_FACTOR
                                      + (1.0 - APERTURE_CLOSE_FACTOR) * aperture)
    local = np.stack([radius * np.cos(FINGERTIP_ANGLES),
                      radius * np.sin(FINGERTIP_ANGLES),
                      np.full(4, FINGERTIP_Z)], axis=1)
    return hand_pose.apply(local)


def fingertip_object_distances(fingertips: np.ndarray, object_points: np.ndarray) -> np.ndarray:
    """Per-fingertip distance to the nearest object surface point."""
    d = np.linalg.norm(fingertips[:, None, :] - object_points[None, :, :], axis=2)
    return d.min(axis=1)


def compute_reward(state: EnvState, current: PointSet, target: PointSet,
                   action: np.ndarray, weights: RewardWeights,
                   stay_success: bool, scale: float = SCALE,
                   prev_dist: float | None = None) -> RewardTerms:
    w = weights
    d_t = mean_visible_distance(current, target)
    tips = state.fingertips()
    d_fo = float(fingertip_object_distances(tips, current.points).mean())
    d_ho = float(np.linalg.norm(state.hand_pose.translation - state.object_pose.translation))
    below = np.maximum(0.0, TABLE_Z - tips[:, 2])
    return RewardTerms(
        r_goal=w.w_g * float(np.exp(-w.k_g * d_t)),
        r_fo=w.w_f * float(np.exp(-w.k_f * d_fo)),
        r_ho=w.w_h * float(np.exp(-w.k_h * d_ho)),
        r_bonus=w.w_b if stay_success else 0.0,
        r_grip=-w.w_c * state.aperture_rate ** 2,
        r_table=-w.w_t * float(below.sum()),
        r_action=-w.w_a * float(np.sum(np.asarray(action) ** 2)),
        r_hold=w.w_hold if state.attached else 0.0,
        r_prog=w.w_prog * (prev_dist - d_t) if prev_dist is not None else 0.0,
    )


def check_success(current: PointSet, target: PointSet, success_time: float,
                  dt: float, scale: float = SCALE):
    """Success when the mean visible point distance is under 0.05*scale;
    stay_success when that has held for 0.5 s of sim time. Returns
    (success, stay_success, new_success_time)."""
    d_t = mean_visible_distance(current, target)
    success = d_t < 0.05 * scale
    new_time = success_time + dt if success else 0.0
    stay = new_time >= 0.5 - 1e-9
    return success, stay, new_time


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass
class EnvConfig:
    stage: int = 1
    scale: float = SCALE
    n_points: int = 128
    max_steps: int = 600
    max_waypoints: int = 8
    single_goal: bool = False    # stop at the first stably-achieved goal
    manage_goals: bool = True    # auto-advance goals on stay_success
    pushes: bool = True
    randomize: str = "train"     # off | train | mid
    fixed_object: str | None = None
    fixed_size: float | None = None
    size_range: tuple = (0.03, 0.12)
    spawn_half_extent: float = 0.15
    mask_privileged_rotations: bool = False
    hand_home: tuple = (0.0, 0.0, 0.25)
    attached_start_prob: float = 0.0  # training curriculum; keep 0 for eval
    grip_rate: float = 4.0       # aperture units per second
    lift_z_range: tuple = (0.05, 0.15)
    obs_noise_max: float = 0.005
    proprio_noise_max: float = 0.01
    act_noise_max: float = 0.01
    friction_range: tuple = (0.5, 1.5)
    slip_max: float = 0.02
    push_period_s: float = 4.0
    push_mag: float = 0.2
    weights: RewardWeights = field(default_factory=RewardWeights)
    hz: float | None = None                  # override stage control rate
    goal_trans_range: float | None = None    # override stage goal ranges
    goal_rot_range: float | None = None

    def resolved_stage(self) -> CurriculumStage:
        st = STAGES[self.stage]
        kw = {}
        if self.hz is not None:
            kw["hz"] = self.hz
        if self.goal_trans_range is not None:
            kw["goal_trans_range"] = self.goal_trans_range
        if self.goal_rot_range is not None:
            kw["goal_rot_range"] = self.goal_rot_range
        return replace(st, **kw) if kw else st

    def to_dict(self) -> dict:
        data = {k: v for k, v in self.__dict__.items() if k != "weights"}
        for k, v in list(data.items()):
            if isinstance(v, tuple):
                data[k] = list(v)
        data["weights"] = dict(self.weights.__dict__)
        return data

    def to_yaml(self, path):
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)

    @staticmethod
    def from_yaml(path) -> "EnvConfig":
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        return EnvConfig.from_dict(data)

    @staticmethod
    def from_dict(data: dict) -> "EnvConfig":
        data = dict(data)
        weights = data.pop("weights", None)
        cfg = EnvConfig()
        for k, v in data.items():
            if not hasattr(cfg, k):
                raise KeyError(f"unknown env config key: {k}")
            default = getattr(cfg, k)
            if isinstance(default, tuple) and v is not None:
                v = tuple(v)
            setattr(cfg, k, v)
        if weights is not None:
            cfg.weights = RewardWeights(**weights)
        return cfg


# ---------------------------------------------------------------------------
# Observation
# ---------------------------------------------------------------------------

@dataclass
class Observation:
    proprio: np.ndarray           # (17,)
    last_action: np.ndarray       # (7,)
    pairs: PairedPoints           # (N, 6) + visibility
    privileged: np.ndarray | None  # (36,) teacher only

    PROPRIO_DIM = 17
    ACTION_DIM = 7
    PRIVILEGED_DIM = 36


def rot6(R: np.ndarray) -> np.ndarray:
    """First two rotation-matrix columns, stacked (6 values)."""
    return np.concatenate([R[:, 0], R[:, 1]])


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------

class ManipEnv:
    """Single-owner environment instance. Actions are normalized 7-vectors in
    [-1, 1]: components 0-2 scale to the linear step limit, 3-5 to the
    angular limit, and component 6 maps to a grip aperture target via
    (a+1)/2. Raw twists within the limits may be passed directly via
    ``step_twist``.
    """

    def __init__(self, config: EnvConfig | None = None, seed: int | None = 0,
                 rng: np.random.Generator | None = None):
        self.config = config if config is not None else EnvConfig()
        self.stage = self.config.resolved_stage()
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.dt = 1.0 / self.stage.hz
        self._push_every = int(round(self.config.push_period_s * self.stage.hz))
        self._stay_steps = int(np.ceil(0.5 * self.stage.hz - 1e-9))
        self.object: ObjectSpec | None = None
        self.state: EnvState | None = None

    # -- episode setup -----------------------------------------------------

    def reset(self) -> Observation:
        cfg = self.config
        obj = sample_object(self.stage, self.rng, cfg.size_range, cfg.n_points,
                            cfg.fixed_object, cfg.fixed_size)
        xy = self.rng.uniform(-cfg.spawn_half_extent, cfg.spawn_half_extent, size=2)
        yaw = self.rng.uniform(0.0, 2.0 * np.pi)
        rot = so3_exp(np.array([0.0, 0.0, yaw]))
        z = -float((obj.surface_points @ rot.T)[:, 2].min())
        pose = Pose(rot, np.array([xy[0], xy[1], z]))
        return self._begin_episode(obj, pose, goal=None)

    def reset_with(self, obj: ObjectSpec, object_pose: Pose,
                   goal_pose: Pose | None = None) -> Observation:
        """Deterministic episode setup for benchmarks: a prepared object at a
        prepared pose, optionally with an externally managed first goal."""
        return self._begin_episode(copy.deepcopy(obj), object_pose, goal_pose)

    def _begin_episode(self, obj: ObjectSpec, pose: Pose, goal: Pose | None) -> Observation:
        cfg = self.config
        self.object = obj
        self._randomize_domain()
        if goal is None:
            goal = self._sample_lift_goal(pose)
        self.state = EnvState(
            object_pose=pose,
            object_velocity=np.zeros(6),
            hand_pose=Pose(np.eye(3), np.array(cfg.hand_home, dtype=np.float64)),
            hand_velocity=np.zeros(6),
            aperture=1.0,
            aperture_rate=0.0,
            attached=False,
            goal_pose=goal,
            waypoint_index=0,
            sim_time=0.0,
            success_time=0.0,
        )
        self._grasp_transform = None
        self._step_count = 0
        self._success_steps = 0
        self._prev_goal_dist = None
        self._slip_lockout = 0
        self._last_action = np.zeros(7)
        self._target_points = transform_points(goal, PointSet.of(obj.surface_points))
        if cfg.attached_start_prob > 0 and \
                float(self.rng.random()) < cfg.attached_start_prob:
            st = self.state
            st.hand_pose = Pose(np.eye(3), st.object_pose.translation.copy())
            st.aperture = 0.3
            st.attached = True
            self._grasp_transform = compose(invert(st.hand_pose), st.object_pose)
        return self._observe()

    def _sample_lift_goal(self, object_pose: Pose) -> Pose:
        g = sample_nearby_pose(object_pose, self.stage.goal_trans_range,
                               self.stage.goal_rot_range, self.rng)
        dz = self.rng.uniform(*self.config.lift_z_range)
        goal = Pose(g.rotation, np.array([g.translation[0], g.translation[1],
                                          object_pose.translation[2] + dz]))
        return self._clamp_goal_above_table(goal)

    def _clamp_goal_above_table(self, goal: Pose) -> Pose:
        # lift only actual penetration so zero-range resampling is a no-op
        low = float(goal.apply(self.object.surface_points)[:, 2].min())
        if low < 0.0:
            t = goal.translation.copy()
            t[2] -= low
            return Pose(goal.rotation, t)
        return goal

    def _randomize_domain(self):
        """Per-episode draws; the stream advances identically in every mode."""
        cfg = self.config
        draws = self.rng.uniform(0.0, 1.0, size=5)
        if cfg.randomize == "train":
            self._obs_sigma = draws[0] * cfg.obs_noise_max
            self._proprio_sigma = draws[1] * cfg.proprio_noise_max
            self._act_sigma = draws[2] * cfg.act_noise_max
            self._friction = cfg.friction_range[0] + draws[3] * (
                cfg.friction_range[1] - cfg.friction_range[0])
            self._slip_prob = draws[4] * cfg.slip_max
        elif cfg.randomize == "mid":
            self._obs_sigma = 0.5 * cfg.obs_noise_max
            self._proprio_sigma = 0.5 * cfg.proprio_noise_max
            self._act_sigma = 0.5 * cfg.act_noise_max
            self._friction = 0.5 * (cfg.friction_range[0] + cfg.friction_range[1])
            self._slip_prob = 0.5 * cfg.slip_max
        elif cfg.randomize == "off":
            self._obs_sigma = 0.0
            self._proprio_sigma = 0.0
            self._act_sigma = 0.0
            self._friction = 1.0
            self._slip_prob = 0.0
        else:
            raise ValueError(f"unknown randomize mode: {self.config.randomize}")

    # -- stepping ------------------------------------------------------------

    def step(self, action: np.ndarray):
        """Normalized action in [-1, 1]^7. Returns (obs, RewardTerms, done, info)."""
        action = np.asarray(action, dtype=np.float64).reshape(7)
        if not np.all(np.isfinite(action)):
            raise InvalidAction(f"non-finite action: {action}")
        commanded = np.clip(action, -1.0, 1.0)
        executed = commanded + self.rng.normal(0.0, self._act_sigma, size=7)
        twist = np.empty(6)
        twist[:3] = np.clip(executed[:3], -1.0, 1.0) * self.stage.lin_limit
        twist[3:] = np.clip(executed[3:6], -1.0, 1.0) * self.stage.ang_limit
        grip_target = float(np.clip((executed[6] + 1.0) / 2.0, 0.0, 1.0))
        return self._advance(commanded, twist, grip_target)

    def step_twist(self, twist: np.ndarray, grip_target: float):
        """Raw twist (meters/radians per step) and aperture target; clamped to
        stage limits. Used by scripted controllers."""
        twist = np.asarray(twist, dtype=np.float64).reshape(6)
        if not (np.all(np.isfinite(twist)) and np.isfinite(grip_target)):
            raise InvalidAction("non-finite twist or grip target")
        lim = np.array([self.stage.lin_limit] * 3 + [self.stage.ang_limit] * 3)
        clamped = np.clip(twist, -lim, lim)
        grip = float(np.clip(grip_target, 0.0, 1.0))
        commanded = np.concatenate([clamped / lim, [2.0 * grip - 1.0]])
        self.rng.normal(0.0, 0.0, size=7)  # keep the draw order aligned with step()
        return self._advance(commanded, clamped, grip)

    def _advance(self, commanded: np.ndarray, twist: np.ndarray, grip_target: float):
        st = self.state
        cfg = self.config
        self._step_count += 1
        self._last_action = commanded

        # hand kinematics: twist is a per-step delta about the hand origin
        new_hand = Pose(so3_exp(twist[3:]) @ st.hand_pose.rotation,
                        st.hand_pose.translation + twist[:3])
        st.hand_velocity = twist / self.dt
        max_da = cfg.grip_rate * self.dt
        da = np.clip(grip_target - st.aperture, -max_da, max_da)
        st.aperture = float(np.clip(st.aperture + da, 0.0, 1.0))
        st.aperture_rate = float(da)  # per-step units, shared by obs and reward
        st.hand_pose = new_hand

        slipped = False
        if st.attached:
            if self._slip_prob > 0 and self.rng.random() < self._slip_prob:
                slipped = True
                self._detach(inherit_velocity=True)
                self._slip_lockout = max(1, int(round(SLIP_COOLDOWN_S * self.stage.hz)))
            elif st.aperture > 0.8:
                self._detach(inherit_velocity=True)
        if st.attached:
            st.object_pose = compose(st.hand_pose, self._grasp_transform)
            st.object_velocity = st.hand_velocity.copy()
        else:
            self._free_object_dynamics()
            if self._slip_lockout > 0:
                self._slip_lockout -= 1
            elif self._attach_condition():
                st.attached = True
                self._grasp_transform = compose(invert(st.hand_pose), st.object_pose)
                st.object_velocity = np.zeros(6)

        pushed = False
        if cfg.pushes and self._push_every > 0 and self._step_count % self._push_every == 0:
            dv = self.rng.uniform(-cfg.push_mag, cfg.push_mag, size=5)
            st.object_velocity[0] += dv[0]
            st.object_velocity[1] += dv[1]
            st.object_velocity[3:] += dv[2:]
            pushed = True

        st.sim_time = self._step_count * self.dt

        current = self.current_points()
        d_t = mean_visible_distance(current, self._target_points)
        success = d_t < 0.05 * cfg.scale
        self._success_steps = self._success_steps + 1 if success else 0
        stay = self._success_steps >= self._stay_steps  # integer-exact 0.5 s
        st.success_time = self._success_steps * self.dt

        reward = compute_reward(st, current, self._target_points, commanded,
                                cfg.weights, stay, cfg.scale,
                                prev_dist=self._prev_goal_dist)
        self._prev_goal_dist = d_t

        done = False
        reason = None
        if stay:
            last_waypoint = st.waypoint_index >= cfg.max_waypoints - 1
            if cfg.single_goal or (cfg.manage_goals and last_waypoint):
                done = True
                reason = "success"
            elif cfg.manage_goals:
                self.advance_goal()
        drift = float(np.linalg.norm(st.object_pose.translation - st.goal_pose.translation))
        if not done and drift > self.stage.reset_threshold:
            done = True
            reason = "drift"
        if not done and self._step_count >= cfg.max_steps:
            done = True
            reason = "timeout"

        info = {
            "d_t": d_t,
            "success": success,
            "stay_success": stay,
            "attached": st.attached,
            "slipped": slipped,
            "pushed": pushed,
            "waypoint_index": st.waypoint_index,
            "sim_time": st.sim_time,
            "reset_reason": reason,
            "reward_terms": reward,
        }
        return self._observe(), reward, done, info

    def _free_object_dynamics(self):
        st = self.state
        v = st.object_velocity
        v[2] -= GRAVITY * self.dt
        t = st.object_pose.translation + v[:3] * self.dt
        w = v[3:]
        R = so3_exp(w * self.dt) @ st.object_pose.rotation if np.any(w != 0.0) \
            else st.object_pose.rotation
        pose = Pose(R, t)
        low = float(pose.apply(self.object.surface_points)[:, 2].min())
        if low < TABLE_Z:
            t = t.copy()
            t[2] += TABLE_Z - low
            pose = Pose(R, t)
            if v[2] < 0:
                v[2] = 0.0
            damp = max(0.0, 1.0 - GROUND_DAMPING * self._friction * self.dt)
            v[0] *= damp
            v[1] *= damp
            v[3:] *= damp
            v[np.abs(v) < 1e-4] = 0.0
        st.object_pose = pose

    def _attach_condition(self) -> bool:
        st = self.state
        if st.aperture >= 0.5:
            return False
        d_ho = np.linalg.norm(st.hand_pose.translation - st.object_pose.translation)
        if d_ho >= 0.12 * self.config.scale:
            return False
        tips = st.fingertips()
        d_sum = fingertip_object_distances(tips, self.current_points().points).sum()
        return d_sum < 0.48 * self.config.scale

    def _detach(self, inherit_velocity: bool):
        st = self.state
        st.attached = False
        self._grasp_transform = None
        st.object_velocity = st.hand_velocity.copy() if inherit_velocity else np.zeros(6)

    # -- goals ---------------------------------------------------------------

    def advance_goal(self):
        """Move to the next random nearby goal. Requires the current one to be
        stably achieved."""
        st = self.state
        if self._success_steps < self._stay_steps:
            raise GoalNotReached("advance_goal before stay_success")
        new_goal = sample_nearby_pose(st.goal_pose, self.stage.goal_trans_range,
                                      self.stage.goal_rot_range, self.rng)
        new_goal = self._clamp_goal_above_table(new_goal)
        st.goal_pose = new_goal
        st.waypoint_index += 1
        st.success_time = 0.0
        self._success_steps = 0
        self._prev_goal_dist = None  # no progress charge for the goal jump
        self._target_points = transform_points(new_goal, PointSet.of(self.object.surface_points))

    def pin_object(self, pose: Pose):
        """Rigidly pin the object to the hand at a world pose. Benchmark
        oracle and test support; not part of normal dynamics."""
        st = self.state
        st.object_pose = pose
        st.object_velocity = np.zeros(6)
        st.attached = True
        self._grasp_transform = compose(invert(st.hand_pose), pose)

    def set_goal_pose(self, goal: Pose, count_waypoint: bool = True):
        """Externally managed goals (benchmark executor). Resets the success
        accumulator; no stay_success precondition."""
        st = self.state
        st.goal_pose = goal
        if count_waypoint:
            st.waypoint_index += 1
        st.success_time = 0.0
        self._success_steps = 0
        self._prev_goal_dist = None
        self._target_points = transform_points(goal, PointSet.of(self.object.surface_points))

    # -- views ------------------------------------------------------------------

    def current_points(self) -> PointSet:
        return transform_points(self.state.object_pose, PointSet.of(self.object.surface_points))

    def target_points(self) -> PointSet:
        return PointSet(self._target_points.points.copy(), self._target_points.visibility.copy())

    def proprio_state(self) -> np.ndarray:
        """Noiseless proprioception of the current state."""
        st = self.state
        return np.concatenate([
            st.hand_pose.translation,
            rot6(st.hand_pose.rotation),
            st.hand_velocity,
            [st.aperture, st.aperture_rate],
        ])

    def _observe(self) -> Observation:
        st = self.state
        proprio = self.proprio_state()
        proprio = proprio + self.rng.normal(0.0, self._proprio_sigma, size=proprio.shape)
        current = self.current_points()
        noisy = current.points + self.rng.normal(0.0, self._obs_sigma, size=current.points.shape)
        pairs = PairedPoints.from_sets(PointSet(noisy, current.visibility),
                                       self._target_points)
        tips = st.fingertips()
        to_object = (st.object_pose.translation[None, :] - tips).reshape(-1)
        obj_rot = rot6(st.object_pose.rotation)
        goal_rot = rot6(st.goal_pose.rotation)
        if self.config.mask_privileged_rotations:
            obj_rot = np.zeros(6)
            goal_rot = np.zeros(6)
        privileged = np.concatenate([
            st.object_pose.translation, obj_rot,
            st.object_velocity,
            to_object,
            st.goal_pose.translation, goal_rot,
        ])
        return Observation(proprio, self._last_action.copy(), pairs, privileged)


# ---------------------------------------------------------------------------
# Vectorized batch
# ---------------------------------------------------------------------------

class VecEnv:
    """M independent environments with RNG streams spawned from one seed.

    ``step`` auto-resets finished instances and reports their episode stats,
    so rollouts always have a full batch of live environments.
    """

    def __init__(self, config: EnvConfig, n_envs: int, seed: int = 0):
        seqs = np.random.SeedSequence(seed).spawn(n_envs)
        self.envs = [ManipEnv(copy.deepcopy(config), rng=np.random.default_rng(s))
                     for s in seqs]
        self.n_envs = n_envs
        self._returns = np.zeros(n_envs)
        self._lengths = np.zeros(n_envs, dtype=int)
        self._stayed = np.zeros(n_envs, dtype=bool)

    def reset(self) -> list[Observation]:
        self._returns[:] = 0.0
        self._lengths[:] = 0
        self._stayed[:] = False
        return [env.reset() for env in self.envs]

    def step(self, actions: np.ndarray):
        """actions (M, 7). Returns (observations, rewards (M,), dones (M,),
        infos list, finished list of per-episode stats dicts)."""
        obs_list = []
        rewards = np.zeros(self.n_envs)
        dones = np.zeros(self.n_envs, dtype=bool)
        infos = []
        finished = []
        for i, env in enumerate(self.envs):
            obs, terms, done, info = env.step(actions[i])
            rewards[i] = terms.total
            self._returns[i] += terms.total
            self._lengths[i] += 1
            self._stayed[i] |= bool(info["stay_success"])
            dones[i] = done
            if done:
                finished.append({
                    "return": float(self._returns[i]),
                    "length": int(self._lengths[i]),
                    "stay_success": bool(self._stayed[i]),
                    "reset_reason": info["reset_reason"],
                    "waypoint_index": int(info["waypoint_index"]),
                })
                self._returns[i] = 0.0
                self._lengths[i] = 0
                self._stayed[i] = False
                obs = env.reset()
            obs_list.append(obs)
            infos.append(info)
        return obs_list, rewards, dones, infos, finished
