"""A guided lap around the manipulation env: reset, scripted grasp, lift,
reward terms, and goal cycling.

Run:  python3 demos/env_tour.py
"""
import numpy as np

from ap2ap.env import EnvConfig, ManipEnv
from ap2ap.geom import so3_log

cfg = EnvConfig(stage=1, n_points=32, max_steps=400, randomize="off",
                fixed_object="box", fixed_size=0.06, pushes=False)
env = ManipEnv(cfg, rng=np.random.default_rng(11))
obs = env.reset()

print("object at", np.round(env.state.object_pose.translation, 3),
      "goal at", np.round(env.state.goal_pose.translation, 3))
print("observation: proprio", obs.proprio.shape, "pairs",
      obs.pairs.pairs.shape, "privileged", obs.privileged.shape)

# phase 1: descend onto the object. step_twist takes per-step meters/radians.
info = {}
for t in range(200):
    delta = env.state.object_pose.translation - env.state.hand_pose.translation
    obs, reward, done, info = env.step_twist(
        np.concatenate([np.clip(delta, -0.008, 0.008), np.zeros(3)]), 0.2)
    if info["attached"]:
        print(f"attached at step {t}, hand error "
              f"{np.linalg.norm(delta):.4f} m")
        break
assert info["attached"], "scripted descent failed to attach"

# phase 2: carry the object through the managed goal sequence
waypoints_seen = 0
for t in range(cfg.max_steps):
    st = env.state
    err = st.goal_pose.translation - st.object_pose.translation
    spin = so3_log(st.goal_pose.rotation @ st.object_pose.rotation.T)
    obs, reward, done, info = env.step_twist(
        np.concatenate([np.clip(err, -0.008, 0.008),
                        np.clip(spin, -0.05, 0.05)]), 0.2)
    if info["stay_success"]:
        waypoints_seen += 1
        print(f"step {t}: waypoint {info['waypoint_index']} held, "
              f"d_t {info['d_t']:.4f}, bonus {reward.r_bonus}")
    if done:
        print("episode over:", info["reset_reason"])
        break

print("reward terms at the end:")
for name, value in reward.__dict__.items():
    print(f"  {name:9s} {value: .4f}")
print("total (as the agent sees it):", round(reward.total, 4))
