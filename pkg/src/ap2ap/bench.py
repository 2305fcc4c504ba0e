"""Evaluation harness and ablation orchestration.

A procedurally generated desk task suite (track files plus env configs) is
evaluated over seeded trials with success-rate and task-progress metrics.
Per-trial seeds derive only from the suite seed and trial position, so runs
of different controllers at the same seed are paired trial-for-trial. The
ablation matrix trains encoder and student variants at equal budgets and
tabulates their evaluated stay rates.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .control import (EpisodeResult, TrackExecutor, TrackingLost,
                      VisibilityModel,
                      run_baseline_episode, run_policy_episode)
from .distill import DAggerConfig, load_student, train_student
from .env import EnvConfig, ManipEnv, ObjectSpec, sample_object
from .geom import Pose, so3_exp
from .nn.models import AWMConfig
from .rl import PPOConfig, TeacherConfig, train_teacher
from .tracks import Track, read_track, write_track

TASK_NAMES = ("LiftToPose", "TranslateSet", "RotateInAir", "PlaceRegion")


# ---------------------------------------------------------------------------
# Task suite
# ---------------------------------------------------------------------------

@dataclass
class TaskSpec:
    """One benchmark task: env config, a deterministically regenerable
    object, its start pose, and the track file holding waypoint targets."""

    name: str
    track: str
    env: EnvConfig
    object_family: str
    object_size: float
    object_seed: int
    pose0: Pose

    def save(self, path):
        path = Path(path)
        data = {
            "name": self.name,
            "track": os.path.relpath(self.track, path.parent),
            "env": self.env.to_dict(),
            "object": {"family": self.object_family, "size": self.object_size,
                       "seed": self.object_seed},
            "pose0": {
                "rotation": np.asarray(self.pose0.rotation).reshape(-1).tolist(),
                "translation": np.asarray(self.pose0.translation).tolist(),
            },
        }
        with open(path, "w") as f:
            yaml.safe_dump(data, f, sort_keys=True)

    @staticmethod
    def load(path) -> "TaskSpec":
        path = Path(path)
        with open(path) as f:
            data = yaml.safe_load(f)
        obj = data["object"]
        p = data["pose0"]
        pose = Pose(np.array(p["rotation"], dtype=np.float64).reshape(3, 3),
                    np.array(p["translation"], dtype=np.float64))
        return TaskSpec(data["name"], str((path.parent / data["track"]).resolve()),
                        EnvConfig.from_dict(data["env"]), obj["family"],
                        float(obj["size"]), int(obj["seed"]), pose)

    def make_object(self):
        return sample_object(self.env.resolved_stage(),
                             np.random.default_rng(self.object_seed),
                             n_points=self.env.n_points,
                             fixed_family=self.object_family,
                             fixed_size=self.object_size)

    def load_track(self) -> Track:
        return read_track(self.track)


def load_tasks(directory) -> list[TaskSpec]:
    paths = sorted(Path(directory).glob("*.task.yaml"))
    if not paths:
        raise FileNotFoundError(f"no *.task.yaml files in {directory}")
    return [TaskSpec.load(p) for p in paths]


@dataclass
class TrackTask:
    """Task synthesized from a bare track file; duck-types TaskSpec for
    evaluate_suite. The first frame's points double as the object surface."""

    name: str
    track: str
    env: EnvConfig
    obj: ObjectSpec
    pose0: Pose

    def make_object(self) -> ObjectSpec:
        return copy.deepcopy(self.obj)

    def load_track(self) -> Track:
        return read_track(self.track)

    # report fingerprints want an object identity; the track sha already
    # pins a synthesized object, so these only need to be well-formed
    @property
    def object_family(self) -> str:
        return self.obj.family

    @property
    def object_size(self) -> float:
        return float(self.obj.sizes.max())

    @property
    def object_seed(self) -> int:
        return -1


def task_from_track(path, stage: int = 1, max_steps: int = 400,
                    randomize: str = "mid"):
    """Resolve a track file to something evaluate_suite can run.

    A sibling <stem>.task.yaml wins; it regenerates the exact object the
    track was built from. Without one, the first frame is recentred into an
    object of its own: surface points drive attachment and success checks,
    so a box spec around them is enough. The first frame should be a resting
    pose; a floating object falls under free dynamics before approach.
    """
    path = Path(path)
    sibling = path.with_suffix("").with_suffix(".task.yaml")
    if sibling.exists():
        return TaskSpec.load(sibling)
    track = read_track(path)
    frame0 = track.frame(0)
    if not np.all(np.isfinite(frame0.points)):
        raise ValueError(f"{path}: first frame has non-finite points")
    centroid = frame0.points.mean(axis=0)
    local = frame0.points - centroid
    extents = local.max(axis=0) - local.min(axis=0)
    obj = ObjectSpec(family="box", sizes=extents, surface_points=local,
                     mass=0.1)
    env = EnvConfig(stage=stage, n_points=track.n_points, max_steps=max_steps,
                    manage_goals=False, single_goal=False,
                    randomize=randomize, pushes=False)
    return TrackTask(path.stem, str(path), env, obj,
                     Pose(np.eye(3), centroid))


def _yawed(R: np.ndarray, yaw: float) -> np.ndarray:
    return so3_exp(np.array([0.0, 0.0, yaw])) @ R


def _rest_pose(obj, rng: np.random.Generator) -> Pose:
    xy = rng.uniform(-0.05, 0.05, size=2)
    R = so3_exp(np.array([0.0, 0.0, rng.uniform(0.0, 2.0 * np.pi)]))
    z = -float((obj.surface_points @ R.T)[:, 2].min())
    return Pose(R, np.array([xy[0], xy[1], z]))


def _waypoints_lift(p0: Pose, rng) -> list[Pose]:
    dx, dy = rng.uniform(-0.04, 0.04, size=2)
    return [Pose(_yawed(p0.rotation, 0.3),
                 p0.translation + np.array([dx, dy, 0.10]))]


def _waypoints_translate(p0: Pose, rng) -> list[Pose]:
    up = p0.translation + np.array([0.0, 0.0, 0.08])
    return [Pose(p0.rotation, up),
            Pose(p0.rotation, up + np.array([0.08, 0.0, 0.0])),
            Pose(p0.rotation, up + np.array([0.08, -0.08, 0.0]))]


def _waypoints_rotate(p0: Pose, rng) -> list[Pose]:
    # the quarter turn is split into thirds so each hop stays near the
    # rotation range the policies trained under
    up = p0.translation + np.array([0.0, 0.0, 0.08])
    hops = [Pose(p0.rotation, up)]
    for frac in (1.0 / 3.0, 2.0 / 3.0, 1.0):
        hops.append(Pose(_yawed(p0.rotation, frac * np.pi / 2.0), up))
    return hops


def _waypoints_place(p0: Pose, rng) -> list[Pose]:
    up = p0.translation + np.array([0.0, 0.0, 0.08])
    over = up + np.array([0.08, 0.05, 0.0])
    down = over.copy()
    down[2] = p0.translation[2] + 0.005
    return [Pose(p0.rotation, up), Pose(p0.rotation, over),
            Pose(p0.rotation, down)]


_TASK_BUILDERS = {
    "LiftToPose": _waypoints_lift,
    "TranslateSet": _waypoints_translate,
    "RotateInAir": _waypoints_rotate,
    "PlaceRegion": _waypoints_place,
}


def _slug(name: str) -> str:
    out = [name[0].lower()]
    for c in name[1:]:
        out.append(f"_{c.lower()}" if c.isupper() else c)
    return "".join(out)


def make_tasks(out_dir, seed: int = 0, n_points: int = 64, stage: int = 1,
               max_steps: int = 400) -> list[TaskSpec]:
    """Write the desk task suite: one track file and task spec per task."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_env = EnvConfig(stage=stage, n_points=n_points, max_steps=max_steps,
                         manage_goals=False, single_goal=False,
                         randomize="mid", pushes=False)
    specs = []
    for name, ss in zip(TASK_NAMES, np.random.SeedSequence(seed).spawn(len(TASK_NAMES))):
        rng = np.random.default_rng(ss)
        size = float(rng.uniform(0.05, 0.07))
        object_seed = int(rng.integers(2**31 - 1))
        obj = sample_object(base_env.resolved_stage(),
                            np.random.default_rng(object_seed),
                            n_points=n_points, fixed_family="box",
                            fixed_size=size)
        pose0 = _rest_pose(obj, rng)
        poses = [pose0] + _TASK_BUILDERS[name](pose0, rng)
        coords = np.stack([p.apply(obj.surface_points) for p in poses])
        track = Track(coords.astype(np.float32),
                      np.ones(coords.shape[:2], dtype=bool),
                      np.arange(1, len(poses)))
        track_path = out / f"{_slug(name)}.trk"
        write_track(track_path, track)
        spec = TaskSpec(name, str(track_path), base_env, "box", size,
                        object_seed, pose0)
        spec.save(out / f"{_slug(name)}.task.yaml")
        specs.append(spec)
    return specs


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------

def _file_sha(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _arrays_sha(arrays: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(arrays):
        h.update(key.encode())
        h.update(np.ascontiguousarray(arrays[key], dtype=np.float64).tobytes())
    return h.hexdigest()


def _drive(ex: TrackExecutor, max_steps: int, step_fn) -> EpisodeResult:
    """Shared loop for bench-side scripted controllers."""
    steps = 0
    try:
        for _ in range(max_steps):
            seen = ex.observe()
            _, _, done, info = step_fn(seen)
            steps += 1
            if ex.at_final and info["stay_success"]:
                return ex.result(True, steps, "success")
            if done:
                return ex.result(False, steps, info["reset_reason"])
    except TrackingLost:
        return ex.result(False, steps, "tracking_lost")
    return ex.result(False, steps, "max_steps")


class PolicyController:
    """Closed-loop student executor; accepts a model or checkpoint path."""

    name = "policy"

    def __init__(self, student):
        if isinstance(student, (str, os.PathLike)):
            self._sha = _file_sha(student)
            student = load_student(student)
        else:
            self._sha = _arrays_sha(student.store.state_dict())
        self.student = student

    def describe(self) -> dict:
        return {"kind": self.name, "checkpoint": self._sha}

    def run(self, env, track, max_steps, visibility, threshold, rng):
        return run_policy_episode(self.student, env, track, max_steps,
                                  visibility, threshold, rng)


class BaselineController:
    """Registration-servo baseline with a scripted grasp."""

    name = "kabsch_cl"

    def __init__(self, gain: float = 0.1):
        self.gain = gain

    def describe(self) -> dict:
        return {"kind": self.name, "gain": self.gain}

    def run(self, env, track, max_steps, visibility, threshold, rng):
        return run_baseline_episode(env, track, max_steps, visibility,
                                    threshold, rng, gain=self.gain)


class HoldController:
    """Never moves; the floor any useful controller must beat."""

    name = "hold"

    def describe(self) -> dict:
        return {"kind": self.name}

    def run(self, env, track, max_steps, visibility, threshold, rng):
        ex = TrackExecutor(env, track, visibility, threshold, rng)
        return _drive(ex, max_steps, lambda seen: env.step_twist(np.zeros(6), 1.0))


class OracleController:
    """Test-only upper bound: pins the object to each goal pose in turn."""

    name = "oracle"

    def describe(self) -> dict:
        return {"kind": self.name}

    def run(self, env, track, max_steps, visibility, threshold, rng):
        ex = TrackExecutor(env, track, visibility, threshold, rng)

        def step(seen):
            env.pin_object(ex.goals[ex.state.waypoint_index])
            return env.step_twist(np.zeros(6), 0.0)

        return _drive(ex, max_steps, step)


def make_controller(kind: str, checkpoint=None, gain: float = 0.1):
    if kind == "policy":
        if checkpoint is None:
            raise ValueError("policy controller needs a checkpoint")
        return PolicyController(checkpoint)
    if kind in ("baseline", "kabsch_cl"):
        return BaselineController(gain)
    if kind == "hold":
        return HoldController()
    if kind == "oracle":
        return OracleController()
    raise ValueError(f"unknown controller kind: {kind}")


# ---------------------------------------------------------------------------
# Metrics and reports
# ---------------------------------------------------------------------------

@dataclass
class TrialRecord:
    seed: int
    success: bool
    waypoints: int
    steps: int
    mean_d: float
    reason: str


@dataclass
class TaskResult:
    task: str
    trials: int
    waypoint_count: int
    sr: float
    tp: float
    records: list[TrialRecord]


@dataclass
class EvalReport:
    controller: dict
    seed: int
    visibility: dict
    threshold: float | None
    tasks: list[TaskResult]
    fingerprint: str


def _fingerprint(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _make_visibility(profile: str, k: int, sigma: float | None) -> VisibilityModel:
    if profile == "clean":
        return VisibilityModel.clean()
    if profile == "masked":
        return VisibilityModel.masked(**({} if sigma is None else
                                         {"noise_sigma": sigma}))
    if profile == "limited":
        return VisibilityModel.limited(k, **({} if sigma is None else
                                             {"noise_sigma": sigma}))
    raise ValueError(f"unknown visibility profile: {profile}")


def _mean_d(trace: np.ndarray) -> float:
    finite = trace[np.isfinite(trace)] if trace.size else trace
    return float(finite.mean()) if finite.size else float("nan")


def evaluate_suite(controller, tasks: list[TaskSpec], trials: int = 100,
                   seed: int = 0, visibility: str = "clean", vis_k: int = 10,
                   vis_sigma: float | None = None,
                   threshold: float | None = None,
                   progress: bool = False) -> EvalReport:
    """Seeded trials of one controller over the task list.

    A trial resets a fresh env at the track's first frame with its own
    randomization draws, then hands control to the controller. Trial errors
    become failed records rather than aborting the suite.
    """
    vis_desc = {"profile": visibility, "k": vis_k, "sigma": vis_sigma}
    results = []
    for ti, task in enumerate(tasks):
        track = task.load_track()
        trial_seeds = np.random.SeedSequence(seed).spawn(len(tasks))[ti] \
            .generate_state(trials)
        recs = []
        for tseed in (int(t) for t in trial_seeds):
            env_ss, vm_ss = np.random.SeedSequence(tseed).spawn(2)
            try:
                env = ManipEnv(copy.deepcopy(task.env),
                               rng=np.random.default_rng(env_ss))
                env.reset_with(task.make_object(), task.pose0)
                vm = _make_visibility(visibility, vis_k, vis_sigma)
                res = controller.run(env, track, task.env.max_steps, vm,
                                     threshold, np.random.default_rng(vm_ss))
                recs.append(TrialRecord(tseed, bool(res.success),
                                        int(res.waypoints_achieved),
                                        int(res.steps), _mean_d(res.d_trace),
                                        res.reason))
            except Exception as e:  # noqa: BLE001 — failed trial, not a dead suite
                recs.append(TrialRecord(tseed, False, 0, 0, float("nan"),
                                        f"error:{type(e).__name__}"))
        sr = sum(r.success for r in recs) / trials
        tp = float(np.mean([r.waypoints for r in recs]))
        results.append(TaskResult(task.name, trials,
                                  len(track.waypoint_indices), sr, tp, recs))
        if progress:
            print(f"[{controller.name}] {task.name}: SR {sr:.2f} TP {tp:.2f}")
    payload = {
        "controller": controller.describe(),
        "seed": seed,
        "visibility": vis_desc,
        "threshold": threshold,
        "trials": trials,
        "tasks": [{"name": t.name, "env": t.env.to_dict(),
                   "object": [t.object_family, t.object_size, t.object_seed],
                   "track_sha": _file_sha(t.track)} for t in tasks],
    }
    return EvalReport(controller.describe(), seed, vis_desc, threshold,
                      results, _fingerprint(payload))


def write_report(report: EvalReport, path, format: str = "json"):
    """JSON is the canonical form; CSV flattens to one row per trial."""
    if format == "json":
        with open(path, "w") as f:
            json.dump(asdict(report), f, indent=2, sort_keys=True)
            f.write("\n")
    elif format == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task", "seed", "success", "waypoints", "steps",
                        "mean_d", "reason"])
            for task in report.tasks:
                for r in task.records:
                    w.writerow([task.task, r.seed, int(r.success), r.waypoints,
                                r.steps, r.mean_d, r.reason])
    else:
        raise ValueError(f"unknown report format: {format}")


def read_report(path) -> EvalReport:
    with open(path) as f:
        data = json.load(f)
    tasks = [TaskResult(t["task"], t["trials"], t["waypoint_count"], t["sr"],
                        t["tp"], [TrialRecord(**r) for r in t["records"]])
             for t in data["tasks"]]
    return EvalReport(data["controller"], data["seed"], data["visibility"],
                      data["threshold"], tasks, data["fingerprint"])


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------

@dataclass
class AblationConfig:
    env: EnvConfig
    ppo: PPOConfig
    teacher: TeacherConfig
    dagger: DAggerConfig
    awm: AWMConfig
    out_dir: str = "ablations"
    n_seeds: int = 3
    teacher_encoders: tuple = ("paired", "decoupled", "flat")
    student_variants: tuple = ("paired", "decoupled", "flat", "no_attention",
                               "no_world_model")


def _student_cfg(base: AWMConfig, variant: str) -> AWMConfig:
    if variant in ("paired", "decoupled", "flat"):
        return replace(base, encoder=variant)
    if variant == "no_attention":
        return replace(base, attention=False)
    if variant == "no_world_model":
        return replace(base, world_model=False)
    raise ValueError(f"unknown student variant: {variant}")


def run_ablation_matrix(cfg: AblationConfig, seed: int = 0,
                        progress: bool = False) -> dict:
    """Train every variant at equal budget over shared seeds and tabulate
    the best evaluated stay rate. Per-cell failures are recorded and the
    rest of the matrix still runs."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [seed + i for i in range(cfg.n_seeds)]
    table: dict = {"seeds": seeds, "teacher": {}, "student": {}}
    teachers = {}

    def cell_result(values, errors, extra=None):
        cell = {"stay": values, "errors": errors,
                "median": float(np.median(values)) if values else float("nan")}
        if extra:
            cell.update(extra)
        return cell

    for enc in cfg.teacher_encoders:
        values, errors = [], []
        for s in seeds:
            try:
                res = train_teacher(cfg.ppo, cfg.env,
                                    replace(cfg.teacher, encoder=enc), seed=s,
                                    out_dir=out / f"teacher_{enc}_s{s}",
                                    progress=progress)
                values.append(float(res["best_eval"]["stay_success_rate"]))
                if enc == "paired":
                    teachers[s] = res["policy"]
            except Exception as e:  # noqa: BLE001 — keep the matrix running
                errors.append({"seed": s, "error": f"{type(e).__name__}: {e}"})
        table["teacher"][enc] = cell_result(values, errors)
        if progress:
            print(f"[ablate] teacher {enc}: {table['teacher'][enc]['median']:.2f}")

    for variant in cfg.student_variants:
        values, errors = [], []
        wm_peak = 0.0
        for s in seeds:
            teacher = teachers.get(s)
            if teacher is None:
                errors.append({"seed": s, "error": "no paired teacher"})
                continue
            try:
                res = train_student(cfg.dagger, teacher, cfg.env,
                                    _student_cfg(cfg.awm, variant), seed=s,
                                    out_dir=out / f"student_{variant}_s{s}",
                                    progress=progress)
                values.append(float(res["best_eval"]["stay_success_rate"]))
                wm_peak = max(wm_peak, max(abs(r["wm_loss"])
                                           for r in res["records"]))
            except Exception as e:  # noqa: BLE001
                errors.append({"seed": s, "error": f"{type(e).__name__}: {e}"})
        table["student"][variant] = cell_result(values, errors,
                                                {"wm_loss_peak": wm_peak})
        if progress:
            print(f"[ablate] student {variant}: "
                  f"{table['student'][variant]['median']:.2f}")

    table["fingerprint"] = _fingerprint({
        "env": cfg.env.to_dict(), "ppo": asdict(cfg.ppo),
        "teacher": asdict(cfg.teacher), "dagger": asdict(cfg.dagger),
        "awm": asdict(cfg.awm), "seed": seed, "n_seeds": cfg.n_seeds,
        "teacher_encoders": list(cfg.teacher_encoders),
        "student_variants": list(cfg.student_variants),
    })
    with open(out / "ablation.json", "w") as f:
        json.dump(table, f, indent=2, sort_keys=True)
        f.write("\n")
    return table
