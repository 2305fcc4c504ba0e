"""Closed-loop deployment on recorded tracks.

A track-conditioned executor reads observed object points each step, pairs
them with the active waypoint's target points, and runs the student policy;
the waypoint advances whenever the observed mean distance drops below a
threshold, and the episode succeeds when the final waypoint is held stably.
A registration-servo baseline shares the exact same loop with the policy
replaced by per-step Kabsch alignment after a scripted grasp.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .distill import load_student, student_actions
from .env import ManipEnv
from .geom import (DegenerateInput, PointSet, Pose, compose, kabsch,
                   mean_visible_distance, so3_log)
from .tracks import PointMasker, Track

TRACKING_LOSS_LIMIT = 10


class TrackingLost(RuntimeError):
    """No usable point observation for TRACKING_LOSS_LIMIT consecutive steps."""


# ---------------------------------------------------------------------------
# Visibility model
# ---------------------------------------------------------------------------

class VisibilityModel:
    """Stand-in for an online point tracker.

    Ground-truth points pass through an occlusion model plus observation
    noise. Three profiles cover the evaluation conditions: ``clean`` (all
    points, no noise), ``masked`` (the plane + height masking the student
    trained under), and ``limited`` (a fixed random subset of k points,
    heavier noise).
    """

    def __init__(self, plane: bool = False, height: bool = False,
                 noise_sigma: float = 0.0, max_visible: int | None = None):
        if max_visible is not None and max_visible < 1:
            raise ValueError("max_visible must be positive")
        self.masker = PointMasker(noise_sigma=noise_sigma, plane=plane,
                                  height=height)
        self.max_visible = max_visible
        self._keep = None

    @staticmethod
    def clean() -> "VisibilityModel":
        return VisibilityModel()

    @staticmethod
    def masked(noise_sigma: float = 0.005) -> "VisibilityModel":
        return VisibilityModel(plane=True, height=True, noise_sigma=noise_sigma)

    @staticmethod
    def limited(k: int, noise_sigma: float = 0.01) -> "VisibilityModel":
        return VisibilityModel(noise_sigma=noise_sigma, max_visible=k)

    def reset(self, points: PointSet, rng: np.random.Generator):
        self.masker.reset(points, rng)
        n = len(points)
        if self.max_visible is not None and self.max_visible < n:
            keep = np.zeros(n, dtype=bool)
            keep[rng.choice(n, size=self.max_visible, replace=False)] = True
            self._keep = keep
        else:
            self._keep = np.ones(n, dtype=bool)

    def step(self, points: PointSet, rng: np.random.Generator) -> PointSet:
        if self._keep is None:
            raise RuntimeError("VisibilityModel.step before reset")
        return self.masker.step(PointSet(points.points,
                                         points.visibility & self._keep), rng)


# ---------------------------------------------------------------------------
# Executor
# ---------------------------------------------------------------------------

@dataclass
class ExecutorState:
    """Mutable per-episode bookkeeping for the closed-loop executor."""

    waypoint_index: int
    target: PointSet
    last_action: np.ndarray
    d_history: list[float] = field(default_factory=list)
    threshold: float = 0.0125
    lost_steps: int = 0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("advancement threshold must be positive")


@dataclass
class EpisodeResult:
    """Outcome schema shared by the policy and baseline controllers."""

    success: bool
    waypoints_achieved: int
    steps: int
    d_trace: np.ndarray
    reason: str


class TrackExecutor:
    """Observation, waypoint advancement, and loss detection shared by both
    controllers. The track is read-only; goal poses handed to the env are
    recovered per waypoint by registering frame 0 onto the waypoint frame."""

    def __init__(self, env: ManipEnv, track: Track, visibility: VisibilityModel,
                 threshold: float | None, rng: np.random.Generator):
        if threshold is None:
            threshold = 0.05 * env.config.scale
        if env.config.manage_goals or env.config.single_goal:
            raise ValueError("executor needs manage_goals=False and "
                             "single_goal=False; it owns the goal schedule")
        current = env.current_points()
        if len(current) != track.n_points:
            raise ValueError(f"env has {len(current)} points, track has "
                             f"{track.n_points}")
        first = track.frame(0)
        if mean_visible_distance(first, current) > 1e-3:
            raise ValueError("env is not at the track's first frame")
        pose0 = env.state.object_pose
        self.goals = [compose(kabsch(first, track.frame(int(w))), pose0)
                      for w in track.waypoint_indices]
        self.env = env
        self.track = track
        self.visibility = visibility
        self.rng = rng
        self.state = ExecutorState(0, track.frame(int(track.waypoint_indices[0])),
                                   np.zeros(7), threshold=threshold)
        env.set_goal_pose(self.goals[0], count_waypoint=False)
        visibility.reset(current, rng)

    @property
    def at_final(self) -> bool:
        return self.state.waypoint_index == len(self.goals) - 1

    def observe(self) -> PointSet | None:
        """Masked view of the current points with visibility restricted to
        rows also visible in the target; None while tracking is lost."""
        st = self.state
        seen = self.visibility.step(self.env.current_points(), self.rng)
        joint = seen.visibility & st.target.visibility
        if joint.any():
            d = mean_visible_distance(PointSet(seen.points, joint), st.target)
            if d < st.threshold and not self.at_final:
                self._advance()
                joint = seen.visibility & st.target.visibility
                if joint.any():
                    d = mean_visible_distance(PointSet(seen.points, joint),
                                              st.target)
        if not joint.any():
            st.lost_steps += 1
            st.d_history.append(float("nan"))
            if st.lost_steps >= TRACKING_LOSS_LIMIT:
                raise TrackingLost(f"no visible points for {st.lost_steps} "
                                   "consecutive steps")
            return None
        st.lost_steps = 0
        st.d_history.append(d)
        return PointSet(seen.points, joint)

    def _advance(self):
        st = self.state
        st.waypoint_index += 1
        w = int(self.track.waypoint_indices[st.waypoint_index])
        st.target = self.track.frame(w)
        self.env.set_goal_pose(self.goals[st.waypoint_index])

    def result(self, success: bool, steps: int, reason: str) -> EpisodeResult:
        achieved = self.state.waypoint_index + (1 if success else 0)
        return EpisodeResult(success, achieved, steps,
                             np.array(self.state.d_history), reason)


def run_policy_episode(student, env: ManipEnv, track: Track, max_steps: int,
                       visibility: VisibilityModel | None = None,
                       threshold: float | None = None,
                       rng: np.random.Generator | None = None) -> EpisodeResult:
    """Run one closed-loop student episode on a track.

    ``student`` is a loaded model or a checkpoint path. The env must already
    be reset with the object at the track's first frame; ``visibility``
    defaults to the clean profile and ``threshold`` to the success radius.
    Tracking loss marks the episode failed rather than raising.
    """
    if isinstance(student, (str, os.PathLike)):
        student = load_student(student)
    vm = visibility if visibility is not None else VisibilityModel.clean()
    rng = rng if rng is not None else np.random.default_rng(0)
    ex = TrackExecutor(env, track, vm, threshold, rng)
    st = ex.state
    proprio = env.proprio_state()
    steps = 0
    try:
        for _ in range(max_steps):
            seen = ex.observe()
            if seen is None:
                action = st.last_action  # hold through tracking dropouts
            else:
                pairs = np.concatenate([seen.points, st.target.points], axis=1)
                action = student_actions(student, proprio[None],
                                         st.last_action[None], pairs[None],
                                         seen.visibility[None])[0]
            obs, _, done, info = env.step(action)
            steps += 1
            proprio = obs.proprio
            st.last_action = obs.last_action
            if ex.at_final and info["stay_success"]:
                return ex.result(True, steps, "success")
            if done:
                return ex.result(False, steps, info["reset_reason"])
    except TrackingLost:
        return ex.result(False, steps, "tracking_lost")
    return ex.result(False, steps, "max_steps")


# ---------------------------------------------------------------------------
# Registration-servo baseline
# ---------------------------------------------------------------------------

def kabsch_cl_step(current: PointSet, target: PointSet, gain: float = 0.1,
                   lin_limit: float = np.inf,
                   ang_limit: float = np.inf) -> np.ndarray:
    """One servo twist: gain times the log-map of the rigid transform taking
    the visible current points onto their targets, clamped to speed limits.
    Returns a zero twist (hold) when registration is degenerate."""
    if gain <= 0:
        raise ValueError("gain must be positive")
    try:
        T = kabsch(current, target)
    except DegenerateInput:
        return np.zeros(6)
    twist = np.concatenate([gain * T.translation, gain * so3_log(T.rotation)])
    twist[:3] = np.clip(twist[:3], -lin_limit, lin_limit)
    twist[3:] = np.clip(twist[3:], -ang_limit, ang_limit)
    return twist


def run_baseline_episode(env: ManipEnv, track: Track, max_steps: int,
                         visibility: VisibilityModel | None = None,
                         threshold: float | None = None,
                         rng: np.random.Generator | None = None,
                         gain: float = 0.1) -> EpisodeResult:
    """Scripted approach-and-close until attached, then Kabsch servoing with
    the grip held closed. Advancement, success, and tracking-loss rules are
    identical to the policy episode; there is no regrasp after a slip."""
    vm = visibility if visibility is not None else VisibilityModel.clean()
    rng = rng if rng is not None else np.random.default_rng(0)
    ex = TrackExecutor(env, track, vm, threshold, rng)
    st = ex.state
    steps = 0
    grasped = False
    try:
        for _ in range(max_steps):
            seen = ex.observe()
            grasped = grasped or env.state.attached
            if not grasped:
                delta = (env.state.object_pose.translation
                         - env.state.hand_pose.translation)
                twist = np.concatenate([delta, np.zeros(3)])
                grip = 0.2
            else:
                twist = np.zeros(6) if seen is None else kabsch_cl_step(
                    seen, st.target, gain, env.stage.lin_limit,
                    env.stage.ang_limit)
                grip = 0.0
            _, _, done, info = env.step_twist(twist, grip)
            steps += 1
            if ex.at_final and info["stay_success"]:
                return ex.result(True, steps, "success")
            if done:
                return ex.result(False, steps, info["reset_reason"])
    except TrackingLost:
        return ex.result(False, steps, "tracking_lost")
    return ex.result(False, steps, "max_steps")
