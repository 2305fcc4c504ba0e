"""A smoke-scale PPO run: thirty iterations on a small box task.

This will not learn anything useful; it exists to show the training loop,
the log schema, and the checkpoint files without tying up a machine. Real
runs go through the CLI (see README) with the full-size config.

Run:  python3 demos/train_tiny_teacher.py
"""
import tempfile
from pathlib import Path

from ap2ap.env import EnvConfig, RewardWeights
from ap2ap.rl import PPOConfig, TeacherConfig, train_teacher

env_cfg = EnvConfig(stage=1, n_points=16, max_steps=80, randomize="train",
                    fixed_object="box", fixed_size=0.06,
                    attached_start_prob=0.5,
                    weights=RewardWeights(w_hold=0.5, k_g=10.0))

ppo = PPOConfig(horizon=32, n_envs=8, stages=(1,), stage_iters=(30,),
                minibatch_size=64, epochs=2, eval_every=10, eval_episodes=4,
                entropy_coef=1e-4, reward_scale=0.02)

teacher = TeacherConfig(n_points=16, logstd_init=-1.0)

with tempfile.TemporaryDirectory() as td:
    result = train_teacher(ppo, env_cfg, teacher, seed=0, out_dir=td,
                           progress=True)
    print("\nlog records:", len(result["records"]))
    first = result["records"][0]
    print("record fields:", sorted(first))
    print("reward terms:", {k: round(v, 3)
                            for k, v in first["reward_terms"].items()})
    print("checkpoints written:",
          sorted(p.name for p in Path(td).glob("*.bin")))
    print("best eval:", result["best_eval"])
