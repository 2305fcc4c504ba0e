import numpy as np
import pytest

from ap2ap.distill import (
    AggregateBuffer,
    DAggerConfig,
    StudentObsBuilder,
    batch_student_obs,
    collect_validation_set,
    dagger_collect,
    evaluate_student,
    load_student,
    save_student,
    student_actions,
    train_student,
    validation_wm_l1,
)
from ap2ap.env import EnvConfig, ManipEnv, VecEnv
from ap2ap.nn.autodiff import Tensor
from ap2ap.nn.layers import Adam, MLP, ParamStore
from ap2ap.nn.models import ANGLE_COLS, VELOCITY_COLS, ActionWorldModel, AWMConfig, EncoderConfig
from ap2ap.rl import TeacherConfig, TeacherPolicy, batch_obs

SMALL_ENC = EncoderConfig(point_widths=(8, 8), post_widths=(8,))
TINY_AWM = AWMConfig(token_dim=16, heads=2, layers=1, n_points=8,
                     encoder_cfg=SMALL_ENC, head_width=8)
ENV16 = EnvConfig(stage=1, n_points=16, max_steps=30, single_goal=True,
                  fixed_object="box", fixed_size=0.06, randomize="off",
                  pushes=False)


def make_teacher(seed=0):
    return TeacherPolicy(TeacherConfig(encoder_cfg=SMALL_ENC, actor_widths=(16,),
                                       critic_widths=(16,)),
                         np.random.default_rng(seed))


def make_student(seed=0, **kw):
    cfg = TINY_AWM if not kw else AWMConfig(token_dim=16, heads=2, layers=1,
                                            n_points=8, encoder_cfg=SMALL_ENC,
                                            head_width=8, **kw)
    return ActionWorldModel(cfg, np.random.default_rng(seed))


def fresh_run(n_envs=2, masking=True, noise=0.005, n_student=8, seed=3):
    vec = VecEnv(ENV16, n_envs, seed=seed)
    builders = [StudentObsBuilder(n_student, masking, noise) for _ in range(n_envs)]
    obs = vec.reset()
    rng = np.random.default_rng(seed)
    for i in range(n_envs):
        builders[i].begin_episode(obs[i], rng)
    return vec, builders, obs, rng


# -- config -----------------------------------------------------------------

def test_beta_schedule():
    cfg = DAggerConfig(iterations=100, anneal_frac=0.2)
    assert cfg.beta(0) == 1.0
    assert cfg.beta(10) == 0.5
    assert cfg.beta(20) == 0.0
    assert cfg.beta(90) == 0.0
    assert all(0.0 <= cfg.beta(k) <= 1.0 for k in range(100))


def test_config_validation():
    with pytest.raises(ValueError):
        DAggerConfig(buffer_capacity=8, batch_size=16)
    with pytest.raises(ValueError):
        DAggerConfig(iterations=0)


# -- student observations ------------------------------------------------------

def test_builder_subsamples_fixed_rows():
    env = ManipEnv(ENV16, seed=0)
    obs = env.reset()
    b = StudentObsBuilder(8, masking=False, noise_sigma=0.0)
    rng = np.random.default_rng(1)
    b.begin_episode(obs, rng)
    rows = b._rows.copy()
    assert rows.shape == (8,) and len(set(rows)) == 8
    s1 = b.step(obs, rng)
    obs2, _, _, _ = env.step(np.zeros(7))
    s2 = b.step(obs2, rng)
    np.testing.assert_array_equal(b._rows, rows)  # fixed for the episode
    np.testing.assert_allclose(s1.pairs.pairs, obs.pairs.pairs[rows])
    np.testing.assert_allclose(s2.pairs.pairs[:, 3:6], obs2.pairs.pairs[rows][:, 3:6])


def test_builder_masking_shares_visibility_and_keeps_targets_exact():
    env = ManipEnv(ENV16, seed=1)
    obs = env.reset()
    b = StudentObsBuilder(12, masking=True, noise_sigma=0.005)
    rng = np.random.default_rng(2)
    b.begin_episode(obs, rng)
    s = b.step(obs, rng)
    # single shared visibility array covers current and target halves
    assert s.pairs.visibility.shape == (12,)
    assert s.pairs.visibility.sum() < 12  # plane mask drops about half
    np.testing.assert_array_equal(s.pairs.pairs[:, 3:6], obs.pairs.pairs[b._rows, 3:6])
    vis = s.pairs.visibility
    moved = np.abs(s.pairs.pairs[vis, 0:3] - obs.pairs.pairs[b._rows][vis, 0:3])
    assert moved.max() > 0.0  # noise applied to the surviving current points
    assert moved.max() < 0.05


def test_student_obs_has_no_privileged_field():
    env = ManipEnv(ENV16, seed=2)
    obs = env.reset()
    b = StudentObsBuilder(8, masking=True)
    rng = np.random.default_rng(3)
    b.begin_episode(obs, rng)
    s = b.step(obs, rng)
    assert not hasattr(s, "privileged")
    buf = AggregateBuffer(16, 8)
    assert "privileged" not in buf._data


def test_builder_requires_begin():
    env = ManipEnv(ENV16, seed=3)
    obs = env.reset()
    b = StudentObsBuilder(8)
    with pytest.raises(RuntimeError):
        b.step(obs, np.random.default_rng(0))


# -- buffer -----------------------------------------------------------------------

def sample_batch(values, n_points=8):
    b = len(values)
    return {
        "proprio": np.tile(np.asarray(values, float)[:, None], (1, 17)),
        "last_action": np.zeros((b, 7)),
        "pairs": np.zeros((b, n_points, 6)),
        "vis": np.ones((b, n_points), dtype=bool),
        "action": np.tile(np.asarray(values, float)[:, None], (1, 7)),
        "next_angle": np.zeros((b, len(ANGLE_COLS))),
        "next_velocity": np.zeros((b, len(VELOCITY_COLS))),
    }


def test_buffer_fifo_eviction():
    buf = AggregateBuffer(10, 8)
    for start in range(0, 12, 3):
        buf.extend(sample_batch([start, start + 1, start + 2]))
    assert len(buf) == 10
    rng = np.random.default_rng(0)
    seen = set(buf.sample(2000, rng)["action"][:, 0].astype(int))
    assert seen == set(range(2, 12))  # 0 and 1 evicted first, rest retained


def test_buffer_capacity_never_exceeded():
    buf = AggregateBuffer(5, 8)
    for _ in range(7):
        buf.extend(sample_batch([1.0]))
        assert len(buf) <= 5


# -- collection ---------------------------------------------------------------------

def test_beta_one_executes_teacher_actions():
    teacher = make_teacher()
    vec, builders, obs, rng = fresh_run()
    state, pairs, vis = batch_obs(obs)
    expected = np.clip(teacher.mean_actions(state, pairs, None), -1.0, 1.0)
    batch, obs2, _ = dagger_collect(teacher, None, vec, builders, obs,
                                    beta=1.0, rng=rng, horizon=1)
    for i in range(vec.n_envs):
        np.testing.assert_array_equal(obs2[i].last_action, expected[i])
    np.testing.assert_array_equal(batch["action"], expected)


def test_beta_zero_executes_student_actions():
    teacher = make_teacher()
    student = make_student()
    vec, builders, obs, rng = fresh_run(masking=False, noise=0.0)
    batch, obs2, _ = dagger_collect(teacher, student, vec, builders, obs,
                                    beta=0.0, rng=rng, horizon=1)
    expected = student_actions(student, batch["proprio"], batch["last_action"],
                               batch["pairs"], batch["vis"])
    for i in range(vec.n_envs):
        np.testing.assert_array_equal(obs2[i].last_action, expected[i])


def test_labels_are_noiseless_next_proprio():
    teacher = make_teacher()
    env_cfg = EnvConfig(stage=1, n_points=16, max_steps=30, single_goal=True,
                        fixed_object="box", fixed_size=0.06, randomize="mid",
                        pushes=False)
    vec = VecEnv(env_cfg, 2, seed=5)
    builders = [StudentObsBuilder(8, False, 0.0) for _ in range(2)]
    obs = vec.reset()
    rng = np.random.default_rng(5)
    for i in range(2):
        builders[i].begin_episode(obs[i], rng)
    batch, obs2, _ = dagger_collect(teacher, None, vec, builders, obs,
                                    beta=1.0, rng=rng, horizon=1)
    for i in range(2):
        true_next = vec.envs[i].proprio_state()
        np.testing.assert_array_equal(batch["next_angle"][i], true_next[ANGLE_COLS])
        np.testing.assert_array_equal(batch["next_velocity"][i], true_next[VELOCITY_COLS])
        # the student's own observation of that state is noisy, labels are not
        assert np.any(obs2[i].proprio != true_next)


def test_collect_skips_episode_boundaries():
    teacher = make_teacher()
    env_cfg = EnvConfig(stage=1, n_points=16, max_steps=4, single_goal=True,
                        fixed_object="box", fixed_size=0.06, randomize="off",
                        pushes=False)
    vec = VecEnv(env_cfg, 2, seed=6)
    builders = [StudentObsBuilder(8, False, 0.0) for _ in range(2)]
    obs = vec.reset()
    rng = np.random.default_rng(6)
    for i in range(2):
        builders[i].begin_episode(obs[i], rng)
    batch, _, _ = dagger_collect(teacher, None, vec, builders, obs,
                                 beta=1.0, rng=rng, horizon=8)
    # 8 steps x 2 envs, minus one terminal step per episode end (every 4 steps)
    assert batch["action"].shape[0] == 2 * 8 - 2 * 2


# -- checkpoints / validation ----------------------------------------------------------

def test_student_checkpoint_roundtrip(tmp_path):
    student = make_student(seed=7, encoder="decoupled", attention=False)
    path = tmp_path / "student.bin"
    save_student(student, path)
    back = load_student(path)
    assert back.cfg == student.cfg
    rng = np.random.default_rng(8)
    p = rng.normal(size=(3, 17))
    la = rng.normal(size=(3, 7))
    pts = rng.normal(scale=0.1, size=(3, 8, 6))
    np.testing.assert_array_equal(
        student_actions(student, p, la, pts, np.ones((3, 8), bool)),
        student_actions(back, p, la, pts, np.ones((3, 8), bool)))


def test_validation_l1_nan_without_world_model():
    teacher = make_teacher()
    cfg = DAggerConfig(iterations=1, horizon=4, n_envs=2, buffer_capacity=64,
                       batch_size=8, student_points=8, val_episodes=2)
    val = collect_validation_set(teacher, ENV16, cfg, seed=0)
    student = make_student(world_model=False)
    assert np.isnan(validation_wm_l1(student, val))
    full = make_student()
    assert np.isfinite(validation_wm_l1(full, val))


# -- training loop ---------------------------------------------------------------------

def tiny_cfg(**kw):
    base = dict(iterations=3, horizon=8, n_envs=2, buffer_capacity=400,
                batch_size=16, updates_per_iter=2, student_points=8,
                eval_every=100, eval_episodes=2, val_episodes=2)
    base.update(kw)
    return DAggerConfig(**base)


def test_train_student_deterministic(tmp_path):
    teacher = make_teacher()
    logs = []
    for run in range(2):
        out = train_student(tiny_cfg(), teacher, ENV16, TINY_AWM, seed=9,
                            out_dir=tmp_path / str(run))
        logs.append((tmp_path / str(run) / "student_log.jsonl").read_text())
    assert logs[0] == logs[1]
    assert len(logs[0].splitlines()) == 3


def test_train_student_losses_decrease_on_average():
    teacher = make_teacher()
    out = train_student(tiny_cfg(iterations=12, updates_per_iter=4), teacher,
                        ENV16, TINY_AWM, seed=10)
    bc = [r["bc_loss"] for r in out["records"]]
    assert np.mean(bc[-3:]) < np.mean(bc[:3])
    marks = [v for _, v in out["val_curve"]]
    assert marks[-1] < marks[0]


def test_train_student_rejects_mismatched_points():
    with pytest.raises(ValueError):
        train_student(tiny_cfg(student_points=16), make_teacher(), ENV16,
                      TINY_AWM, seed=0)


def test_wm_weight_zero_trains_bc_only():
    teacher = make_teacher()
    out = train_student(tiny_cfg(wm_weight=0.0), teacher, ENV16,
                        AWMConfig(token_dim=16, heads=2, layers=1, n_points=8,
                                  encoder_cfg=SMALL_ENC, head_width=8,
                                  world_model=False),
                        seed=11)
    assert all(r["wm_loss"] == 0.0 for r in out["records"])


def test_evaluate_student_bounds():
    student = make_student()
    ev = evaluate_student(student, ENV16, episodes=2, seed=0)
    assert 0.0 <= ev["stay_success_rate"] <= 1.0
    assert ev["mean_length"] <= ENV16.max_steps


def test_self_distillation_reaches_low_bc_loss():
    """A fresh copy of the teacher architecture regressed onto teacher mean
    actions on teacher-visited states: mean-abs error per action dim falls
    under 0.05 within 200 updates."""
    rng = np.random.default_rng(12)
    teacher = make_teacher(seed=13)
    # give the teacher a non-trivial action surface (its head starts at zero)
    w = teacher.store["actor.mean.1.weight"]
    w.data = rng.normal(scale=0.6, size=w.data.shape)
    vec = VecEnv(ENV16, 4, seed=14)
    obs = vec.reset()
    states, pairs = [], []
    for _ in range(64):
        s, p, v = batch_obs(obs)
        states.append(s)
        pairs.append(p)
        a = np.clip(teacher.mean_actions(s, p, None), -1, 1)
        obs, _, _, _, _ = vec.step(a)
    states = np.concatenate(states)
    pairs = np.concatenate(pairs)
    labels = teacher.mean_actions(states, pairs, None)

    copy = make_teacher(seed=15)
    opt = Adam(copy.store, 3e-3)
    n = states.shape[0]
    final = None
    for step in range(200):
        idx = rng.integers(n, size=64)
        mean, _, _ = copy.forward(states[idx], pairs[idx], None)
        loss = (mean - Tensor(labels[idx])).abs().sum(axis=-1).mean()
        copy.store.zero_grad()
        loss.backward()
        opt.step()
        final = loss.item() / 7.0
    assert final < 0.05
