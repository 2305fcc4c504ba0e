"""PPO teacher training with the three-stage curriculum.

The teacher is an actor-critic pair over privileged observations. Both heads
consume the same concatenated [state, goal-feature] vector where the goal
feature comes from a point-pair set encoder, so the whole policy differs
between ablation variants only in that encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .env import STAGES, EnvConfig, Observation, VecEnv
from .nn.autodiff import Tensor, concat, minimum, no_grad
from .nn.layers import MLP, Adam, ParamStore, clip_grad_norm, load_params, save_params
from .nn.models import EncoderConfig, make_encoder

LOG2PI = float(np.log(2.0 * np.pi))
ENCODER_KINDS = ("paired", "decoupled", "flat")


class NonFiniteLoss(RuntimeError):
    """An update produced a non-finite loss; parameters were rolled back."""


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 2048
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    horizon: int = 128
    n_envs: int = 64
    stages: tuple = (1, 2, 3)
    stage_iters: tuple = (1500, 1000, 2500)
    eval_every: int = 50
    eval_episodes: int = 32
    # ends a stage early once the periodic evaluation reaches this rate
    early_stop_success: float | None = None
    normalize_advantages: bool = True
    # multiplies rewards before GAE so value targets stay O(1) under the
    # dense shaping terms; logged reward terms remain raw
    reward_scale: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in (0, 1]")
        if not (0.0 < self.clip_eps < 1.0):
            raise ValueError("clip_eps must lie in (0, 1)")
        if len(self.stages) != len(self.stage_iters):
            raise ValueError("stages and stage_iters must align")
        if any(n < 1 for n in self.stage_iters):
            raise ValueError("stage iteration budgets must be >= 1")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("epochs and minibatch_size must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "PPOConfig":
        return _config_from_dict(cls, data)


@dataclass(frozen=True)
class TeacherConfig:
    encoder: str = "paired"
    encoder_cfg: EncoderConfig = EncoderConfig(point_widths=(32, 64), post_widths=(64,))
    actor_widths: tuple = (128, 128)
    critic_widths: tuple = (128, 128)
    state_dim: int = Observation.PROPRIO_DIM + Observation.ACTION_DIM + Observation.PRIVILEGED_DIM
    action_dim: int = Observation.ACTION_DIM
    n_points: int = 32          # row count required by the flat variant
    point_scale: float = 4.0    # desk coordinates -> roughly unit range
    logstd_init: float = -0.5
    encoder_from_critic: bool = True  # let value-loss gradients reach the encoder

    def __post_init__(self):
        if self.encoder not in ENCODER_KINDS:
            raise ValueError(f"encoder must be one of {ENCODER_KINDS}")

    @classmethod
    def from_dict(cls, data: dict) -> "TeacherConfig":
        data = dict(data)
        if "encoder_cfg" in data and isinstance(data["encoder_cfg"], dict):
            data["encoder_cfg"] = _config_from_dict(EncoderConfig, data["encoder_cfg"])
        return _config_from_dict(cls, data)


def _config_from_dict(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    coerced = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        coerced[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**coerced)


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------

class TeacherPolicy:
    """Gaussian policy and value function sharing one goal encoder.

    The action mean passes through a final tanh so it stays inside the
    normalized action box; the log-std is a single free parameter vector,
    clamped to LOGSTD_RANGE wherever it is used.
    """

    LOGSTD_RANGE = (-5.0, 1.0)

    def __init__(self, cfg: TeacherConfig, rng: np.random.Generator,
                 store: ParamStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        self.encoder = make_encoder(cfg.encoder, self.store, "encoder", rng,
                                    cfg.encoder_cfg, fixed_n=cfg.n_points)
        in_dim = cfg.state_dim + self.encoder.feature_dim
        self.actor = MLP(self.store, "actor.mean",
                         (in_dim, *cfg.actor_widths, cfg.action_dim), rng,
                         final_activation=True, zero_last=True)
        self.critic = MLP(self.store, "critic.value",
                          (in_dim, *cfg.critic_widths, 1), rng)
        self.logstd = self.store.add(
            "actor.logstd", np.full(cfg.action_dim, cfg.logstd_init))

    def forward(self, state: np.ndarray, pairs: np.ndarray,
                vis: np.ndarray | None):
        """state (B, S), pairs (B, N, 6), vis (B, N) or None.
        Returns (mean (B, A), value (B,), logstd (A,)) as graph tensors."""
        feat = self.encoder.forward(Tensor(pairs * self.cfg.point_scale), vis)
        s = Tensor(np.asarray(state, dtype=np.float64))
        x = concat([s, feat], axis=-1)
        mean = self.actor(x)
        xc = x if self.cfg.encoder_from_critic else concat([s, feat.detach()], axis=-1)
        value = self.critic(xc).reshape(state.shape[0])
        return mean, value, self.logstd.clip(*self.LOGSTD_RANGE)

    def sample_actions(self, state, pairs, vis, rng: np.random.Generator):
        """Stochastic rollout actions; returns numpy (actions, logp, values)."""
        with no_grad():
            mean, value, logstd = self.forward(state, pairs, vis)
        std = np.exp(logstd.data)
        actions = mean.data + std * rng.standard_normal(mean.data.shape)
        logp = gaussian_log_prob_np(actions, mean.data, logstd.data)
        return actions, logp, value.data

    def mean_actions(self, state, pairs, vis) -> np.ndarray:
        with no_grad():
            mean, _, _ = self.forward(state, pairs, vis)
        return mean.data

    def act(self, obs: Observation) -> np.ndarray:
        """Deterministic single-observation action, clipped to the box."""
        state, pairs, vis = batch_obs([obs])
        return np.clip(self.mean_actions(state, pairs, _mask(vis))[0], -1.0, 1.0)

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        cfg = self.cfg
        arrays = self.store.state_dict()
        arrays.update({
            "meta.encoder_kind": np.array([ENCODER_KINDS.index(cfg.encoder)], float),
            "meta.point_widths": np.array(cfg.encoder_cfg.point_widths, float),
            "meta.post_widths": np.array(cfg.encoder_cfg.post_widths, float),
            "meta.actor_widths": np.array(cfg.actor_widths, float),
            "meta.critic_widths": np.array(cfg.critic_widths, float),
            "meta.dims": np.array([cfg.state_dim, cfg.action_dim, cfg.n_points], float),
            "meta.scalars": np.array([cfg.point_scale, cfg.logstd_init,
                                      float(cfg.encoder_from_critic)]),
        })
        save_params(path, arrays)

    @classmethod
    def load(cls, path) -> "TeacherPolicy":
        arrays = load_params(path)
        meta = {k: arrays.pop(k) for k in list(arrays) if k.startswith("meta.")}
        dims = meta["meta.dims"].astype(int)
        scalars = meta["meta.scalars"]
        cfg = TeacherConfig(
            encoder=ENCODER_KINDS[int(meta["meta.encoder_kind"][0])],
            encoder_cfg=EncoderConfig(
                tuple(meta["meta.point_widths"].astype(int)),
                tuple(meta["meta.post_widths"].astype(int))),
            actor_widths=tuple(meta["meta.actor_widths"].astype(int)),
            critic_widths=tuple(meta["meta.critic_widths"].astype(int)),
            state_dim=int(dims[0]), action_dim=int(dims[1]), n_points=int(dims[2]),
            point_scale=float(scalars[0]), logstd_init=float(scalars[1]),
            encoder_from_critic=bool(scalars[2]))
        policy = cls(cfg, np.random.default_rng(0))
        policy.store.load_state_dict(arrays)
        return policy


def gaussian_log_prob_np(actions, mean, logstd) -> np.ndarray:
    z = (actions - mean) * np.exp(-logstd)
    return (-0.5 * np.sum(z * z, axis=-1) - np.sum(logstd)
            - 0.5 * actions.shape[-1] * LOG2PI)


def gaussian_log_prob(actions: np.ndarray, mean: Tensor, logstd: Tensor) -> Tensor:
    a = Tensor(actions)
    z = (a - mean) * (-logstd).exp()
    return (z * z).sum(axis=-1) * -0.5 - logstd.sum() - 0.5 * actions.shape[-1] * LOG2PI


def gaussian_entropy(logstd: Tensor) -> Tensor:
    return logstd.sum() + 0.5 * logstd.data.size * (1.0 + LOG2PI)


def batch_obs(obs_list: list[Observation]):
    """Stack observations into (state, pairs, visibility) arrays."""
    state = np.stack([np.concatenate([o.proprio, o.last_action, o.privileged])
                      for o in obs_list])
    pairs = np.stack([o.pairs.pairs for o in obs_list])
    vis = np.stack([o.pairs.visibility for o in obs_list])
    return state, pairs, vis


def _mask(vis: np.ndarray) -> np.ndarray | None:
    return None if vis.all() else vis


# ---------------------------------------------------------------------------
# GAE
# ---------------------------------------------------------------------------

def compute_gae(rewards, values, dones, gamma: float, lam: float,
                normalize: bool = True):
    """Generalized advantage estimates over a (T,) or (T, E) rollout.

    ``values`` must carry the bootstrap row, shape (T+1,) or (T+1, E);
    ``dones[t]`` masks the bootstrap across episode boundaries. Returns
    (advantages, returns) shaped like ``rewards``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    squeeze = r.ndim == 1
    r = r.reshape(r.shape[0], -1)
    t_len, n = r.shape
    v = np.asarray(values, dtype=np.float64).reshape(-1, n)
    d = np.asarray(dones, dtype=bool).reshape(t_len, n)
    if v.shape[0] != t_len + 1:
        raise ValueError(f"values must have {t_len + 1} rows, got {v.shape[0]}")
    adv = np.zeros_like(r)
    carry = np.zeros(n)
    for t in range(t_len - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * live - v[t]
        carry = delta + gamma * lam * live * carry
        adv[t] = carry
    ret = adv + v[:t_len]
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    if squeeze:
        return adv[:, 0], ret[:, 0]
    return adv, ret


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------

def make_optimizers(policy: TeacherPolicy, cfg: PPOConfig):
    """Actor and critic optimizers partitioning the shared store; the
    encoder steps at the actor rate."""
    critic_names = [n for n in policy.store.names() if n.startswith("critic.")]
    actor_names = [n for n in policy.store.names() if not n.startswith("critic.")]
    return (Adam(policy.store, cfg.actor_lr, names=actor_names),
            Adam(policy.store, cfg.critic_lr, names=critic_names))


def ppo_update(policy: TeacherPolicy, batch: dict, cfg: PPOConfig,
               optimizers=None, rng: np.random.Generator | None = None,
               lr_scale: float = 1.0) -> dict:
    """One clipped-surrogate pass over the batch (cfg.epochs x minibatches).

    Raises NonFiniteLoss and restores the pre-update parameters if any
    minibatch loss or gradient norm goes non-finite.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    opt_actor, opt_critic = optimizers if optimizers else make_optimizers(policy, cfg)
    snapshot = policy.store.state_dict()
    b = batch["actions"].shape[0]
    vis = _mask(batch["vis"])
    eps = cfg.clip_eps
    stats = {k: 0.0 for k in ("policy_loss", "value_loss", "entropy", "kl",
                              "clip_fraction", "grad_norm")}
    n_batches = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(b)
        for start in range(0, b, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            mean, value, logstd = policy.forward(
                batch["state"][idx], batch["pairs"][idx],
                vis[idx] if vis is not None else None)
            logp = gaussian_log_prob(batch["actions"][idx], mean, logstd)
            adv = batch["advantages"][idx]
            ratio = (logp - batch["logp"][idx]).exp()
            surrogate = minimum(ratio * adv, ratio.clip(1.0 - eps, 1.0 + eps) * adv)
            policy_loss = -surrogate.mean()
            err = value - batch["returns"][idx]
            value_loss = (err * err).mean()
            entropy = gaussian_entropy(logstd)
            loss = (policy_loss + cfg.value_coef * value_loss
                    - cfg.entropy_coef * entropy)
            if not np.isfinite(loss.item()):
                policy.store.load_state_dict(snapshot)
                raise NonFiniteLoss(f"loss {loss.item()} in ppo_update")
            policy.store.zero_grad()
            loss.backward()
            norm = clip_grad_norm(policy.store, cfg.max_grad_norm)
            if not np.isfinite(norm):
                policy.store.load_state_dict(snapshot)
                raise NonFiniteLoss(f"gradient norm {norm} in ppo_update")
            opt_actor.step(cfg.actor_lr * lr_scale)
            opt_critic.step(cfg.critic_lr * lr_scale)
            stats["policy_loss"] += policy_loss.item()
            stats["value_loss"] += value_loss.item()
            stats["entropy"] += entropy.item()
            stats["kl"] += float(np.mean(batch["logp"][idx] - logp.data))
            stats["clip_fraction"] += float(np.mean(np.abs(ratio.data - 1.0) > eps))
            stats["grad_norm"] += norm
            n_batches += 1
    return {k: v / n_batches for k, v in stats.items()}


# ---------------------------------------------------------------------------
# Evaluation and training
# ---------------------------------------------------------------------------

def evaluate_policy(policy: TeacherPolicy, env_cfg: EnvConfig,
                    episodes: int = 32, seed: int = 0) -> dict:
    """Deterministic mean-action episodes, one per parallel env instance."""
    vec = VecEnv(env_cfg, episodes, seed=seed)
    obs = vec.reset()
    results: list[dict | None] = [None] * episodes
    pending = episodes
    while pending:
        state, pairs, vis = batch_obs(obs)
        actions = np.clip(policy.mean_actions(state, pairs, _mask(vis)), -1.0, 1.0)
        obs, _, dones, _, finished = vec.step(actions)
        k = 0
        for i in range(episodes):
            if dones[i]:
                ep = finished[k]
                k += 1
                if results[i] is None:
                    results[i] = ep
                    pending -= 1
    stay = float(np.mean([ep["stay_success"] for ep in results]))
    return {
        "stay_success_rate": stay,
        "success_rate": float(np.mean([ep["reset_reason"] == "success" for ep in results])),
        "mean_return": float(np.mean([ep["return"] for ep in results])),
        "mean_length": float(np.mean([ep["length"] for ep in results])),
    }


_TERM_NAMES = ("r_goal", "r_fo", "r_ho", "r_bonus", "r_grip", "r_table",
               "r_action", "r_hold", "r_prog")


def train_teacher(cfg: PPOConfig, env_cfg: EnvConfig,
                  teacher_cfg: TeacherConfig | None = None, seed: int = 0,
                  out_dir=None, progress: bool = False) -> dict:
    """Run the staged curriculum; returns checkpoints, log records, and the
    best evaluation. The JSONL log contains no wall-clock fields so a seeded
    rerun reproduces it byte for byte.
    """
    teacher_cfg = teacher_cfg or TeacherConfig()
    if teacher_cfg.encoder == "flat" and teacher_cfg.n_points != env_cfg.n_points:
        raise ValueError("flat encoder requires teacher n_points == env n_points")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    seeds = np.random.SeedSequence(seed).spawn(5)
    policy = TeacherPolicy(teacher_cfg, np.random.default_rng(seeds[0]))
    rng_actions = np.random.default_rng(seeds[1])
    rng_shuffle = np.random.default_rng(seeds[2])
    env_seed, eval_seed = (int(s.generate_state(1)[0]) for s in seeds[3:5])

    optimizers = make_optimizers(policy, cfg)
    records: list[dict] = []
    best = {"stay_success_rate": -1.0}
    best_path = out_dir / "best.bin" if out_dir else None
    final_path = out_dir / "final.bin" if out_dir else None
    log_file = open(out_dir / "train_log.jsonl", "w") if out_dir else None
    recent: list[bool] = []
    nonfinite_streak = 0
    iteration = 0

    try:
        for stage_pos, stage_id in enumerate(cfg.stages):
            stage_env = replace(env_cfg, stage=stage_id)
            eval_env = replace(stage_env, randomize="mid", attached_start_prob=0.0)
            lr_scale = STAGES[stage_id].lr_scale
            vec = VecEnv(stage_env, cfg.n_envs, seed=env_seed + stage_id)
            obs = vec.reset()
            for it in range(cfg.stage_iters[stage_pos]):
                batch, obs, ep_stats, term_means = _collect_rollout(
                    policy, vec, obs, cfg, rng_actions)
                try:
                    metrics = ppo_update(policy, batch, cfg, optimizers,
                                         rng_shuffle, lr_scale)
                    nonfinite_streak = 0
                except NonFiniteLoss:
                    nonfinite_streak += 1
                    if nonfinite_streak >= 3:
                        raise
                    metrics = {"skipped": 1.0}
                recent.extend(ep_stats)
                del recent[:-100]
                record = {
                    "iteration": iteration,
                    "stage": stage_id,
                    "stay_success": round(float(np.mean(recent)) if recent else 0.0, 6),
                    "episodes": len(ep_stats),
                    "reward_terms": {k: round(v, 6) for k, v in term_means.items()},
                    "losses": {k: round(v, 6) for k, v in metrics.items()},
                }
                records.append(record)
                if log_file:
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
                    log_file.flush()
                iteration += 1
                last_iter = it == cfg.stage_iters[stage_pos] - 1
                if iteration % cfg.eval_every == 0 or last_iter:
                    ev = evaluate_policy(policy, eval_env, cfg.eval_episodes, eval_seed)
                    if progress:
                        print(f"stage {stage_id} iter {iteration}: "
                              f"eval stay {ev['stay_success_rate']:.2f} "
                              f"rolling {record['stay_success']:.2f}", flush=True)
                    if ev["stay_success_rate"] > best["stay_success_rate"]:
                        best = {**ev, "iteration": iteration, "stage": stage_id}
                        if best_path:
                            policy.save(best_path)
                    if (cfg.early_stop_success is not None
                            and ev["stay_success_rate"] >= cfg.early_stop_success):
                        break
    finally:
        if log_file:
            log_file.close()
    if final_path:
        policy.save(final_path)
    return {
        "policy": policy,
        "records": records,
        "best_eval": best,
        "best_checkpoint": str(best_path) if best_path else None,
        "final_checkpoint": str(final_path) if final_path else None,
    }


def _collect_rollout(policy, vec, obs, cfg, rng):
    t_len, n = cfg.horizon, vec.n_envs
    state0, pairs0, vis0 = batch_obs(obs)
    states = np.empty((t_len,) + state0.shape)
    pairs = np.empty((t_len,) + pairs0.shape)
    vis = np.empty((t_len,) + vis0.shape, dtype=bool)
    actions = np.empty((t_len, n, policy.cfg.action_dim))
    logps = np.empty((t_len, n))
    values = np.empty((t_len + 1, n))
    rewards = np.empty((t_len, n))
    dones = np.empty((t_len, n), dtype=bool)
    ep_stats: list[bool] = []
    term_sums = dict.fromkeys(_TERM_NAMES, 0.0)
    for t in range(t_len):
        s, p, v = batch_obs(obs) if t else (state0, pairs0, vis0)
        states[t], pairs[t], vis[t] = s, p, v
        a, lp, val = policy.sample_actions(s, p, _mask(v), rng)
        actions[t], logps[t], values[t] = a, lp, val
        obs, r, d, infos, finished = vec.step(np.clip(a, -1.0, 1.0))
        rewards[t], dones[t] = r * cfg.reward_scale, d
        for info in infos:
            terms = info["reward_terms"]
            for name in _TERM_NAMES:
                term_sums[name] += getattr(terms, name)
        ep_stats.extend(bool(ep["stay_success"]) for ep in finished)
    s, p, v = batch_obs(obs)
    with no_grad():
        _, boot, _ = policy.forward(s, p, _mask(v))
    values[t_len] = boot.data
    adv, ret = compute_gae(rewards, values, dones, cfg.gamma, cfg.lam,
                           cfg.normalize_advantages)
    flat = t_len * n
    batch = {
        "state": states.reshape(flat, -1),
        "pairs": pairs.reshape(flat, *pairs0.shape[1:]),
        "vis": vis.reshape(flat, -1),
        "actions": actions.reshape(flat, -1),
        "logp": logps.reshape(flat),
        "advantages": adv.reshape(flat),
        "returns": ret.reshape(flat),
    }
    term_means = {k: v / (t_len * n) for k, v in term_sums.items()}
    return batch, obs, ep_stats, term_means
