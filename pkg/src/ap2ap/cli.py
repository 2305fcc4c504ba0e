"""Command-line entry points.

Each subcommand is a thin wrapper over one library call, so anything the CLI
does can be reproduced from Python with the printed arguments. Heavy imports
happen inside the handlers.

``--threads N`` caps the numeric backends. BLAS pools are sized when numpy
loads, which happens on package import, so the process re-executes itself
once with the caps exported before anything heavy runs. ``--threads 1``
makes runs bit-deterministic.

Exit codes: 0 on success, 2 for bad arguments or config files, 3 for
runtime failures (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
_REEXEC_GUARD = "AP2AP_THREADS"

# malformed inputs and unknown keys; everything else is a runtime failure
_CONFIG_ERRORS = (FileNotFoundError, IsADirectoryError, NotADirectoryError,
                  KeyError, ValueError)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    import yaml
    with open(path) as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ValueError(f"{path}: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return data


def _check_sections(config: dict, allowed: tuple):
    unknown = set(config) - set(allowed)
    if unknown:
        raise KeyError(f"unknown config sections {sorted(unknown)}; "
                       f"expected a subset of {sorted(allowed)}")


def _env_cfg(config: dict):
    from .env import EnvConfig
    return EnvConfig.from_dict(config.get("env", {}))


def _awm_cfg(config: dict):
    from .nn.models import AWMConfig, EncoderConfig
    from .rl import _config_from_dict
    data = dict(config.get("awm", {}))
    if isinstance(data.get("encoder_cfg"), dict):
        data["encoder_cfg"] = _config_from_dict(EncoderConfig,
                                                data["encoder_cfg"])
    return _config_from_dict(AWMConfig, data)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def cmd_make_tasks(args) -> int:
    from .bench import make_tasks
    specs = make_tasks(args.out, seed=args.seed, n_points=args.n_points,
                       stage=args.stage, max_steps=args.max_steps)
    for spec in specs:
        print(f"wrote {spec.track} ({spec.name})")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    config = _load_config(args.config)
    _check_sections(config, ("env", "ppo", "teacher"))
    from .rl import PPOConfig, TeacherConfig, train_teacher
    res = train_teacher(PPOConfig.from_dict(config.get("ppo", {})),
                        _env_cfg(config),
                        TeacherConfig.from_dict(config.get("teacher", {})),
                        seed=args.seed, out_dir=args.out,
                        progress=not args.quiet)
    print(json.dumps({"best_eval": res["best_eval"],
                      "best_checkpoint": str(res["best_checkpoint"]),
                      "final_checkpoint": str(res["final_checkpoint"])},
                     indent=2, sort_keys=True))
    return EXIT_OK


def cmd_distill_student(args) -> int:
    config = _load_config(args.config)
    _check_sections(config, ("env", "dagger", "awm"))
    from .distill import DAggerConfig, train_student
    from .rl import TeacherPolicy
    teacher = TeacherPolicy.load(args.teacher)
    res = train_student(DAggerConfig.from_dict(config.get("dagger", {})),
                        teacher, _env_cfg(config), _awm_cfg(config),
                        seed=args.seed, out_dir=args.out,
                        progress=not args.quiet)
    print(json.dumps({"best_eval": res["best_eval"],
                      "val_curve": res["val_curve"],
                      "best_checkpoint": str(res["best_checkpoint"]),
                      "final_checkpoint": str(res["final_checkpoint"])},
                     indent=2, sort_keys=True))
    return EXIT_OK


def _print_report(report):
    for tr in report.tasks:
        print(f"{tr.task}: SR {tr.sr:.3f} TP {tr.tp:.2f}/{tr.waypoint_count}")
    print(f"fingerprint {report.fingerprint}")


def _run_suite(args, controller, tasks) -> int:
    from .bench import evaluate_suite, write_report
    report = evaluate_suite(controller, tasks, trials=args.trials,
                            seed=args.seed, visibility=args.visibility,
                            vis_k=args.vis_k, vis_sigma=args.vis_sigma,
                            threshold=args.threshold,
                            progress=not args.quiet)
    if args.out:
        write_report(report, args.out)
    if getattr(args, "csv", None):
        write_report(report, args.csv, format="csv")
    _print_report(report)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .bench import load_tasks, make_controller
    controller = make_controller(args.controller, checkpoint=args.checkpoint,
                                 gain=args.gain)
    return _run_suite(args, controller, load_tasks(args.tasks))


def cmd_run_policy(args) -> int:
    from .bench import make_controller, task_from_track
    task = task_from_track(args.track, max_steps=args.max_steps)
    controller = make_controller("policy", checkpoint=args.checkpoint)
    return _run_suite(args, controller, [task])


def cmd_run_baseline(args) -> int:
    from .bench import make_controller, task_from_track
    task = task_from_track(args.track, max_steps=args.max_steps)
    controller = make_controller("kabsch_cl", gain=args.gain)
    return _run_suite(args, controller, [task])


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    _check_sections(config, ("env", "ppo", "teacher", "dagger", "awm",
                             "ablation"))
    from .bench import AblationConfig, run_ablation_matrix
    from .distill import DAggerConfig
    from .rl import PPOConfig, TeacherConfig, _config_from_dict

    extras = dict(config.get("ablation", {}))
    known = {"n_seeds", "teacher_encoders", "student_variants"}
    if set(extras) - known:
        raise KeyError(f"unknown ablation keys {sorted(set(extras) - known)}")
    for key in ("teacher_encoders", "student_variants"):
        if key in extras:
            extras[key] = tuple(extras[key])
    cfg = AblationConfig(env=_env_cfg(config),
                         ppo=PPOConfig.from_dict(config.get("ppo", {})),
                         teacher=TeacherConfig.from_dict(
                             config.get("teacher", {})),
                         dagger=DAggerConfig.from_dict(
                             config.get("dagger", {})),
                         awm=_awm_cfg(config), out_dir=args.out, **extras)
    table = run_ablation_matrix(cfg, seed=args.seed, progress=not args.quiet)
    medians = {role: {name: cell["median"] for name, cell in table[role].items()}
               for role in ("teacher", "student")}
    print(json.dumps({"seeds": table["seeds"], "medians": medians,
                      "fingerprint": table["fingerprint"]},
                     indent=2, sort_keys=True))
    return EXIT_OK


def cmd_lift_tracks(args) -> int:
    from .tracks import (calibrate_depths, extract_waypoints, lift_tracks,
                         read_depth_map, read_depth_sequence, read_tracks2d,
                         write_track)
    t2d = read_tracks2d(args.tracks2d)
    depths = calibrate_depths(read_depth_sequence(args.depths),
                              read_depth_map(args.observed))
    track = extract_waypoints(lift_tracks(t2d, depths),
                              stride=args.stride,
                              min_advance=args.min_advance)
    write_track(args.out, track)
    print(f"wrote {args.out}: {track.n_points} points, "
          f"{track.n_frames} frames, {len(track.waypoint_indices)} waypoints")
    return EXIT_OK


def cmd_env_rollout(args) -> int:
    import numpy as np

    from .env import ManipEnv
    config = _load_config(args.config)
    _check_sections(config, ("env",))
    env_cfg = _env_cfg(config)
    if "env" not in config:
        env_cfg.stage = args.stage
    rng = np.random.default_rng(args.seed)
    env = ManipEnv(env_cfg, rng=rng)
    env.reset()
    records = []
    episodes = 1
    stays = 0
    for t in range(args.steps):
        action = np.zeros(7) if args.policy == "zero" \
            else rng.uniform(-0.5, 0.5, size=7)
        obs, reward, done, info = env.step(action)
        stays += bool(info["stay_success"])
        records.append({"step": t, "d_t": round(info["d_t"], 6),
                        "attached": bool(info["attached"]),
                        "reward": round(reward.total, 6),
                        "done": bool(done),
                        "reason": info.get("reset_reason")})
        if done:
            episodes += 1
            env.reset()
    if args.out:
        with open(args.out, "w") as f:
            for rec in records:
                f.write(json.dumps(rec) + "\n")
    mean_r = sum(r["reward"] for r in records) / max(1, len(records))
    print(f"{args.steps} steps, {episodes} episodes, {stays} stay successes, "
          f"mean reward {mean_r:.3f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    import numpy as np

    from .env import Observation
    from .nn.autodiff import Tensor
    from .nn.gradcheck import grad_check
    from .nn.models import ActionWorldModel, AWMConfig, EncoderConfig
    from .rl import TeacherConfig, TeacherPolicy

    rng = np.random.default_rng(args.seed)
    enc = EncoderConfig(point_widths=(8, 8), post_widths=(8,))
    reports = []

    policy = TeacherPolicy(TeacherConfig(encoder_cfg=enc, actor_widths=(16,),
                                         critic_widths=(16,), n_points=6),
                           np.random.default_rng(args.seed))
    state = rng.normal(size=(3, TeacherConfig().state_dim))
    pairs = rng.normal(size=(3, 6, 6)) * 0.1
    vis = np.ones((3, 6))
    vis[1, :2] = 0.0

    def policy_loss():
        mean, value, logstd = policy.forward(state, pairs, vis)
        return (mean * mean).mean() + (value * value).mean() \
            + (logstd * logstd).sum()

    reports.append(("teacher", grad_check(
        policy_loss, policy.store, max_entries_per_param=args.entries,
        tolerance=args.tolerance, rng=np.random.default_rng(args.seed))))

    for world_model in (True, False):
        awm = ActionWorldModel(
            AWMConfig(token_dim=16, heads=2, layers=1, n_points=6,
                      encoder_cfg=enc, head_width=16,
                      world_model=world_model),
            np.random.default_rng(args.seed + 1))
        proprio = Tensor(rng.normal(size=(3, Observation.PROPRIO_DIM)))
        last_action = Tensor(rng.normal(size=(3, Observation.ACTION_DIM)))
        points = Tensor(rng.normal(size=(3, 6, 6)) * 0.1)

        def awm_loss():
            action, angle, velocity = awm.forward(proprio, last_action,
                                                  points, vis)
            loss = (action * action).mean()
            if angle is not None:
                loss = loss + (angle * angle).mean() \
                    + (velocity * velocity).mean()
            return loss

        label = "student" if world_model else "student-no-wm"
        reports.append((label, grad_check(
            awm_loss, awm.store, max_entries_per_param=args.entries,
            tolerance=args.tolerance, rng=np.random.default_rng(args.seed))))

    failed = False
    for label, rep in reports:
        print(f"{label}: {rep}")
        failed = failed or not rep.passed
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_suite_flags(p: argparse.ArgumentParser, trials: int):
    p.add_argument("--trials", type=int, default=trials)
    p.add_argument("--visibility", default="clean",
                   choices=("clean", "masked", "limited"))
    p.add_argument("--vis-k", type=int, default=10,
                   help="visible point budget for the limited profile")
    p.add_argument("--vis-sigma", type=float, default=None,
                   help="override the profile's noise sigma")
    p.add_argument("--threshold", type=float, default=None,
                   help="waypoint advance threshold, meters")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ap2ap",
        description="Point-track manipulation policies on a desk-scale "
                    "simulator: training, distillation, and evaluation.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", default=None,
                        help="YAML config with per-section overrides")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric backend threads; 1 is "
                             "bit-deterministic")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-tasks", parents=[common],
                       help="write the procedural benchmark task suite")
    p.add_argument("--out", required=True)
    p.add_argument("--n-points", type=int, default=64)
    p.add_argument("--stage", type=int, default=1)
    p.add_argument("--max-steps", type=int, default=400)
    p.set_defaults(func=cmd_make_tasks)

    p = sub.add_parser("train-teacher", parents=[common],
                       help="PPO teacher with privileged state")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill-student", parents=[common],
                       help="DAgger student with the action world model")
    p.add_argument("--teacher", required=True,
                   help="teacher checkpoint (.bin)")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_distill_student)

    p = sub.add_parser("eval", parents=[common],
                       help="seeded controller evaluation over a task suite")
    p.add_argument("--tasks", required=True, help="task suite directory")
    p.add_argument("--controller", required=True,
                   choices=("policy", "kabsch_cl", "hold", "oracle"))
    p.add_argument("--checkpoint", default=None,
                   help="student checkpoint for --controller policy")
    p.add_argument("--gain", type=float, default=0.1)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--csv", default=None, help="also write per-trial CSV")
    _add_suite_flags(p, trials=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-policy", parents=[common],
                       help="run a student checkpoint on one track file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--track", required=True)
    p.add_argument("--max-steps", type=int, default=400)
    p.add_argument("--out", default=None, help="JSON report path")
    _add_suite_flags(p, trials=20)
    p.set_defaults(func=cmd_run_policy)

    p = sub.add_parser("run-baseline", parents=[common],
                       help="run the registration servo baseline on one track")
    p.add_argument("--track", required=True)
    p.add_argument("--gain", type=float, default=0.1)
    p.add_argument("--max-steps", type=int, default=400)
    p.add_argument("--out", default=None, help="JSON report path")
    _add_suite_flags(p, trials=20)
    p.set_defaults(func=cmd_run_baseline)

    p = sub.add_parser("ablate", parents=[common],
                       help="equal-budget encoder and student variant matrix")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("lift-tracks", parents=[common],
                       help="pixel tracks + depths -> calibrated 3D track")
    p.add_argument("--tracks2d", required=True)
    p.add_argument("--depths", required=True)
    p.add_argument("--observed", required=True,
                   help="metric depth map for frame-0 calibration")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--min-advance", type=float, default=0.0)
    p.set_defaults(func=cmd_lift_tracks)

    p = sub.add_parser("env-rollout", parents=[common],
                       help="scripted rollout for smoke tests and inspection")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--stage", type=int, default=1)
    p.add_argument("--policy", default="random", choices=("random", "zero"))
    p.add_argument("--out", default=None, help="JSONL step log")
    p.set_defaults(func=cmd_env_rollout)

    p = sub.add_parser("grad-check", parents=[common],
                       help="finite-difference check of model gradients")
    p.add_argument("--entries", type=int, default=40,
                   help="checked entries per parameter tensor")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    return parser


def _apply_threads(threads, argv):
    if threads is None or os.environ.get(_REEXEC_GUARD) == str(threads):
        return
    if threads < 1:
        raise ValueError("--threads must be >= 1")
    env = dict(os.environ)
    env.update({var: str(threads) for var in _THREAD_VARS})
    env[_REEXEC_GUARD] = str(threads)
    os.execve(sys.executable,
              [sys.executable, "-m", "ap2ap.cli", *argv], env)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        _apply_threads(args.threads, argv)
        return args.func(args)
    except _CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 — CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
