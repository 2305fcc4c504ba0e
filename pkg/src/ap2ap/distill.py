"""DAgger distillation of the privileged teacher into the masked-point student.

The student is the action world model: it sees only proprioception, the last
action, and a masked 64-point subset of the pairs, and is trained to imitate
teacher actions while predicting its own next proprioceptive state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .env import EnvConfig, ManipEnv, Observation, VecEnv
from .geom import PairedPoints, PointSet
from .nn.autodiff import Tensor, no_grad
from .nn.layers import Adam, clip_grad_norm, load_params, save_params
from .nn.models import (
    ANGLE_COLS,
    VELOCITY_COLS,
    ActionWorldModel,
    AWMConfig,
    EncoderConfig,
    loss_bc_wm,
)
from .rl import ENCODER_KINDS, NonFiniteLoss, TeacherPolicy, batch_obs, _config_from_dict
from .tracks import PointMasker


@dataclass(frozen=True)
class DAggerConfig:
    iterations: int = 2500
    horizon: int = 64
    n_envs: int = 8
    buffer_capacity: int = 60000
    batch_size: int = 256
    updates_per_iter: int = 8
    lr: float = 1e-3
    max_grad_norm: float = 1.0
    anneal_frac: float = 0.2        # K_anneal as a fraction of iterations
    student_points: int = 64
    masking: bool = True            # plane + height masking on student points
    noise_sigma: float = 0.005
    wm_weight: float = 1.0          # 0 trains behavior cloning alone
    eval_every: int = 250
    eval_episodes: int = 16
    val_episodes: int = 8           # held-out rollouts for world-model L1

    def __post_init__(self):
        if self.buffer_capacity < self.batch_size:
            raise ValueError("buffer capacity must be >= batch size")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def beta(self, k: int) -> float:
        """Teacher-control probability at iteration k, annealed linearly."""
        k_anneal = max(1, int(round(self.anneal_frac * self.iterations)))
        return max(0.0, 1.0 - k / k_anneal)

    @classmethod
    def from_dict(cls, data: dict) -> "DAggerConfig":
        return _config_from_dict(cls, data)


# ---------------------------------------------------------------------------
# Student observations
# ---------------------------------------------------------------------------

@dataclass
class StudentObs:
    proprio: np.ndarray       # (17,)
    last_action: np.ndarray   # (7,)
    pairs: PairedPoints       # (n, 6); target visibility mirrors current

    def visible(self) -> bool:
        return bool(self.pairs.visibility.any())


class StudentObsBuilder:
    """Per-episode partial view of the environment observation.

    At episode start a fixed random subset of the full point rows is chosen
    and a half-space plane mask is frozen; every step applies the plane
    flags, a fresh height threshold, and additive noise to the current half
    of each surviving pair. Targets keep exact coordinates but share the
    current visibility (correspondence masking).
    """

    def __init__(self, n_points: int = 64, masking: bool = True,
                 noise_sigma: float = 0.005):
        self.n_points = n_points
        self.masker = PointMasker(noise_sigma=noise_sigma,
                                  plane=masking, height=masking)
        self._rows = None

    def begin_episode(self, obs: Observation, rng: np.random.Generator):
        n_full = obs.pairs.pairs.shape[0]
        k = min(self.n_points, n_full)
        self._rows = np.sort(rng.choice(n_full, size=k, replace=False))
        current = PointSet.of(obs.pairs.pairs[self._rows, 0:3])
        self.masker.reset(current, rng)

    def step(self, obs: Observation, rng: np.random.Generator) -> StudentObs:
        if self._rows is None:
            raise RuntimeError("StudentObsBuilder.step before begin_episode")
        rows = obs.pairs.pairs[self._rows]
        vis = obs.pairs.visibility[self._rows]
        masked = self.masker.step(PointSet(rows[:, 0:3], vis), rng)
        pairs = np.concatenate([masked.points, rows[:, 3:6]], axis=1)
        return StudentObs(obs.proprio, obs.last_action,
                          PairedPoints(pairs, masked.visibility))


def batch_student_obs(sobs: list[StudentObs]):
    proprio = np.stack([o.proprio for o in sobs])
    last_action = np.stack([o.last_action for o in sobs])
    pairs = np.stack([o.pairs.pairs for o in sobs])
    vis = np.stack([o.pairs.visibility for o in sobs])
    return proprio, last_action, pairs, vis


def student_actions(student: ActionWorldModel, proprio, last_action, pairs,
                    vis) -> np.ndarray:
    """Batch deterministic student actions (tanh-squashed)."""
    with no_grad():
        pre, _, _ = student.forward(Tensor(proprio), Tensor(last_action),
                                    Tensor(pairs), vis)
    return np.tanh(pre.data)


# ---------------------------------------------------------------------------
# Aggregate buffer
# ---------------------------------------------------------------------------

class AggregateBuffer:
    """FIFO sample store with uniform random minibatch sampling."""

    def __init__(self, capacity: int, n_points: int,
                 proprio_dim: int = 17, action_dim: int = 7):
        self.capacity = capacity
        self._data = {
            "proprio": np.zeros((capacity, proprio_dim)),
            "last_action": np.zeros((capacity, action_dim)),
            "pairs": np.zeros((capacity, n_points, 6)),
            "vis": np.zeros((capacity, n_points), dtype=bool),
            "action": np.zeros((capacity, action_dim)),
            "next_angle": np.zeros((capacity, len(ANGLE_COLS))),
            "next_velocity": np.zeros((capacity, len(VELOCITY_COLS))),
        }
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def extend(self, batch: dict):
        n = batch["action"].shape[0]
        if n == 0:
            return
        idx = (self._cursor + np.arange(n)) % self.capacity
        for key, store in self._data.items():
            store[idx] = batch[key]
        self._cursor = int((self._cursor + n) % self.capacity)
        self._size = min(self._size + n, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        idx = rng.integers(self._size, size=batch_size)
        return {key: store[idx] for key, store in self._data.items()}


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------

def dagger_collect(teacher: TeacherPolicy, student: ActionWorldModel,
                   vec: VecEnv, builders: list[StudentObsBuilder],
                   obs: list[Observation], beta: float,
                   rng: np.random.Generator, horizon: int):
    """Roll the β-mixture policy for ``horizon`` steps, labeling every state.

    Teacher labels come from the full privileged observation; the recorded
    sample holds the masked student view plus next-step noiseless proprio.
    Steps where masking hides every point, or that cross an episode reset,
    are executed but not recorded. Returns (samples, next obs, episode stats).
    """
    out: dict[str, list] = {k: [] for k in ("proprio", "last_action", "pairs",
                                            "vis", "action", "next_angle",
                                            "next_velocity")}
    stats: list[bool] = []
    for _ in range(horizon):
        state, full_pairs, full_vis = batch_obs(obs)
        labels = np.clip(teacher.mean_actions(
            state, full_pairs, None if full_vis.all() else full_vis), -1.0, 1.0)
        sobs = [builders[i].step(obs[i], rng) for i in range(vec.n_envs)]
        visible = np.array([o.visible() for o in sobs])
        executed = labels.copy()
        use_student = (rng.random(vec.n_envs) >= beta) & visible
        if use_student.any():
            sel = np.flatnonzero(use_student)
            p, la, pr, vi = batch_student_obs([sobs[i] for i in sel])
            executed[sel] = student_actions(student, p, la, pr, vi)
        obs, _, dones, _, finished = vec.step(executed)
        stats.extend(bool(ep["stay_success"]) for ep in finished)
        for i in range(vec.n_envs):
            if visible[i] and not dones[i]:
                nxt = vec.envs[i].proprio_state()
                out["proprio"].append(sobs[i].proprio)
                out["last_action"].append(sobs[i].last_action)
                out["pairs"].append(sobs[i].pairs.pairs)
                out["vis"].append(sobs[i].pairs.visibility)
                out["action"].append(labels[i])
                out["next_angle"].append(nxt[ANGLE_COLS])
                out["next_velocity"].append(nxt[VELOCITY_COLS])
            if dones[i]:
                builders[i].begin_episode(obs[i], rng)
    batch = {k: (np.stack(v) if v else np.zeros((0,))) for k, v in out.items()}
    return batch, obs, stats


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_student(student: ActionWorldModel, path):
    cfg = student.cfg
    arrays = student.store.state_dict()
    arrays.update({
        "meta.arch": np.array([cfg.token_dim, cfg.heads, cfg.layers,
                               cfg.proprio_dim, cfg.action_dim, cfg.n_points,
                               cfg.head_width], float),
        "meta.encoder_kind": np.array([ENCODER_KINDS.index(cfg.encoder)], float),
        "meta.flags": np.array([float(cfg.attention), float(cfg.world_model)]),
        "meta.point_widths": np.array(cfg.encoder_cfg.point_widths, float),
        "meta.post_widths": np.array(cfg.encoder_cfg.post_widths, float),
    })
    save_params(path, arrays)


def load_student(path) -> ActionWorldModel:
    arrays = load_params(path)
    meta = {k: arrays.pop(k) for k in list(arrays) if k.startswith("meta.")}
    arch = meta["meta.arch"].astype(int)
    cfg = AWMConfig(
        token_dim=int(arch[0]), heads=int(arch[1]), layers=int(arch[2]),
        proprio_dim=int(arch[3]), action_dim=int(arch[4]), n_points=int(arch[5]),
        head_width=int(arch[6]),
        encoder=ENCODER_KINDS[int(meta["meta.encoder_kind"][0])],
        attention=bool(meta["meta.flags"][0]),
        world_model=bool(meta["meta.flags"][1]),
        encoder_cfg=EncoderConfig(tuple(meta["meta.point_widths"].astype(int)),
                                  tuple(meta["meta.post_widths"].astype(int))))
    student = ActionWorldModel(cfg, np.random.default_rng(0))
    student.store.load_state_dict(arrays)
    return student


# ---------------------------------------------------------------------------
# Evaluation and validation
# ---------------------------------------------------------------------------

def evaluate_student(student: ActionWorldModel, env_cfg: EnvConfig,
                     episodes: int, seed: int, masking: bool = True,
                     noise_sigma: float = 0.005) -> dict:
    """Student-only episodes on masked observations, deterministic actions.
    Steps with no visible points repeat the previous action."""
    vec = VecEnv(env_cfg, episodes, seed=seed)
    rng = np.random.default_rng(seed)
    builders = [StudentObsBuilder(student.cfg.n_points, masking, noise_sigma)
                for _ in range(episodes)]
    obs = vec.reset()
    for i in range(episodes):
        builders[i].begin_episode(obs[i], rng)
    held = np.zeros((episodes, student.cfg.action_dim))
    results: list[dict | None] = [None] * episodes
    pending = episodes
    while pending:
        sobs = [builders[i].step(obs[i], rng) for i in range(episodes)]
        visible = np.array([o.visible() for o in sobs])
        actions = held.copy()
        if visible.any():
            sel = np.flatnonzero(visible)
            p, la, pr, vi = batch_student_obs([sobs[i] for i in sel])
            actions[sel] = student_actions(student, p, la, pr, vi)
        held = actions
        obs, _, dones, _, finished = vec.step(actions)
        k = 0
        for i in range(episodes):
            if dones[i]:
                ep = finished[k]
                k += 1
                if results[i] is None:
                    results[i] = ep
                    pending -= 1
                builders[i].begin_episode(obs[i], rng)
    stay = float(np.mean([ep["stay_success"] for ep in results]))
    return {
        "stay_success_rate": stay,
        "success_rate": float(np.mean([ep["reset_reason"] == "success" for ep in results])),
        "mean_return": float(np.mean([ep["return"] for ep in results])),
        "mean_length": float(np.mean([ep["length"] for ep in results])),
    }


def collect_validation_set(teacher: TeacherPolicy, env_cfg: EnvConfig,
                           cfg: DAggerConfig, seed: int) -> dict:
    """Held-out teacher-driven rollouts for world-model validation."""
    vec = VecEnv(env_cfg, cfg.val_episodes, seed=seed)
    builders = [StudentObsBuilder(cfg.student_points, cfg.masking, cfg.noise_sigma)
                for _ in range(cfg.val_episodes)]
    obs = vec.reset()
    rng = np.random.default_rng(seed)
    for i in range(cfg.val_episodes):
        builders[i].begin_episode(obs[i], rng)
    student_stub = None
    batch, _, _ = dagger_collect(teacher, student_stub, vec, builders, obs,
                                 beta=1.0, rng=rng, horizon=cfg.horizon * 2)
    return batch


def validation_wm_l1(student: ActionWorldModel, val: dict) -> float:
    """Mean L1 (summed over channels) of next-state predictions."""
    if not student.cfg.world_model or val["action"].shape[0] == 0:
        return float("nan")
    with no_grad():
        _, ang, vel = student.forward(Tensor(val["proprio"]),
                                      Tensor(val["last_action"]),
                                      Tensor(val["pairs"]), val["vis"])
    err = (np.abs(ang.data - val["next_angle"]).sum(axis=-1)
           + np.abs(vel.data - val["next_velocity"]).sum(axis=-1))
    return float(err.mean())


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_student(cfg: DAggerConfig, teacher: TeacherPolicy, env_cfg: EnvConfig,
                  awm_cfg: AWMConfig | None = None, seed: int = 0,
                  out_dir=None, progress: bool = False) -> dict:
    """Alternate DAgger collection with aggregate-buffer updates.

    The JSONL log carries no wall-clock fields; a seeded run reproduces it
    exactly. World-model validation L1 is logged at every 10% checkpoint.
    """
    awm_cfg = awm_cfg or AWMConfig()
    if awm_cfg.n_points != cfg.student_points:
        raise ValueError("awm n_points must equal cfg.student_points")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(seed).spawn(6)
    student = ActionWorldModel(awm_cfg, np.random.default_rng(seeds[0]))
    rng_collect = np.random.default_rng(seeds[1])
    rng_batch = np.random.default_rng(seeds[2])
    env_seed, eval_seed, val_seed = (int(s.generate_state(1)[0]) for s in seeds[3:6])

    eval_env = replace(env_cfg, randomize="mid", attached_start_prob=0.0)
    val_set = collect_validation_set(teacher, replace(env_cfg, randomize="mid",
                                                     attached_start_prob=0.0),
                                     cfg, val_seed)
    vec = VecEnv(env_cfg, cfg.n_envs, seed=env_seed)
    builders = [StudentObsBuilder(cfg.student_points, cfg.masking, cfg.noise_sigma)
                for _ in range(cfg.n_envs)]
    obs = vec.reset()
    for i in range(cfg.n_envs):
        builders[i].begin_episode(obs[i], rng_collect)

    buffer = AggregateBuffer(cfg.buffer_capacity, cfg.student_points)
    opt = Adam(student.store, cfg.lr)
    records: list[dict] = []
    log_file = open(out_dir / "student_log.jsonl", "w") if out_dir else None
    best = {"stay_success_rate": -1.0}
    best_path = out_dir / "student_best.bin" if out_dir else None
    final_path = out_dir / "student_final.bin" if out_dir else None
    checkpoint_marks = {max(1, int(round(cfg.iterations * f / 10))): f * 10
                        for f in range(1, 11)}
    val_curve: list[tuple[int, float]] = []
    nonfinite_streak = 0

    try:
        for k in range(cfg.iterations):
            beta = cfg.beta(k)
            batch, obs, stats = dagger_collect(teacher, student, vec, builders,
                                               obs, beta, rng_collect, cfg.horizon)
            buffer.extend(batch)
            bc_sum = wm_sum = 0.0
            snapshot = student.store.state_dict()
            try:
                for _ in range(cfg.updates_per_iter if len(buffer) else 0):
                    mb = buffer.sample(cfg.batch_size, rng_batch)
                    pre, ang, vel = student.forward(Tensor(mb["proprio"]),
                                                    Tensor(mb["last_action"]),
                                                    Tensor(mb["pairs"]), mb["vis"])
                    _, bc, wm = loss_bc_wm(pre.tanh(), Tensor(mb["action"]),
                                           ang, vel, mb["next_angle"],
                                           mb["next_velocity"])
                    loss = bc + cfg.wm_weight * wm
                    if not np.isfinite(loss.item()):
                        student.store.load_state_dict(snapshot)
                        raise NonFiniteLoss(f"loss {loss.item()} in train_student")
                    student.store.zero_grad()
                    loss.backward()
                    clip_grad_norm(student.store, cfg.max_grad_norm)
                    opt.step()
                    bc_sum += bc.item()
                    wm_sum += wm.item()
                nonfinite_streak = 0
            except NonFiniteLoss:
                nonfinite_streak += 1
                if nonfinite_streak >= 3:
                    raise
            record = {
                "iteration": k,
                "beta": round(beta, 6),
                "bc_loss": round(bc_sum / cfg.updates_per_iter, 6),
                "wm_loss": round(wm_sum / cfg.updates_per_iter, 6),
                "buffer": len(buffer),
                "episodes_stayed": int(np.sum(stats)),
                "episodes": len(stats),
            }
            if k + 1 in checkpoint_marks:
                v = validation_wm_l1(student, val_set)
                record["val_wm_l1"] = round(v, 6) if np.isfinite(v) else None
                val_curve.append((k + 1, v))
            records.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            if (k + 1) % cfg.eval_every == 0 or k + 1 == cfg.iterations:
                ev = evaluate_student(student, eval_env, cfg.eval_episodes,
                                      eval_seed, cfg.masking, cfg.noise_sigma)
                if progress:
                    print(f"dagger iter {k + 1}: beta {beta:.2f} "
                          f"bc {record['bc_loss']:.4f} "
                          f"eval stay {ev['stay_success_rate']:.2f}", flush=True)
                if ev["stay_success_rate"] > best["stay_success_rate"]:
                    best = {**ev, "iteration": k + 1}
                    if best_path:
                        save_student(student, best_path)
    finally:
        if log_file:
            log_file.close()
    if final_path:
        save_student(student, final_path)
    return {
        "student": student,
        "records": records,
        "best_eval": best,
        "val_curve": val_curve,
        "best_checkpoint": str(best_path) if best_path else None,
        "final_checkpoint": str(final_path) if final_path else None,
    }
