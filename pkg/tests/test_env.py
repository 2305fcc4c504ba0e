import numpy as np
import pytest

from ap2ap.env import (
    STAGES,
    CurriculumStage,
    EnvConfig,
    EnvState,
    GoalNotReached,
    InvalidAction,
    ManipEnv,
    Observation,
    RewardTerms,
    RewardWeights,
    VecEnv,
    check_success,
    compute_reward,
    fingertip_positions,
    sample_object,
)
from ap2ap.geom import PointSet, Pose, compose, invert, mean_visible_distance, transform_points

QUIET = EnvConfig(randomize="off", pushes=False)


def make_env(seed=0, **kw):
    cfg = EnvConfig(randomize="off", pushes=False)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return ManipEnv(cfg, seed=seed)


def descend_and_grasp(env, max_steps=200):
    """Scripted approach: close the grip while steering the hand toward the
    object center; returns True once attached."""
    for _ in range(max_steps):
        delta = env.state.object_pose.translation - env.state.hand_pose.translation
        _, _, done, info = env.step_twist(np.concatenate([delta, np.zeros(3)]), 0.2)
        if info["attached"]:
            return True
        if done:
            return False
    return False


# -- objects --------------------------------------------------------------------

def test_box_points_on_surface():
    rng = np.random.default_rng(0)
    spec = sample_object(STAGES[1], rng, fixed_family="box", fixed_size=0.06)
    on_face = np.isclose(np.abs(spec.surface_points), 0.03, atol=1e-9).any(axis=1)
    assert on_face.all()
    assert np.abs(spec.surface_points).max() <= 0.03 + 1e-9
    assert spec.surface_points.shape == (128, 3)


def test_box_face_counts_match_areas():
    rng = np.random.default_rng(1)
    n = 6000
    spec = sample_object(STAGES[1], rng, fixed_family="box", n_points=n,
                         size_range=(0.06, 0.06))
    sizes = spec.sizes
    half = sizes / 2
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]) * 2
    probs = areas / areas.sum()
    counts = np.array([np.isclose(np.abs(spec.surface_points[:, ax]), half[ax], atol=1e-9).sum()
                       for ax in range(3)])
    for ax in range(3):
        sigma = np.sqrt(n * probs[ax] * (1 - probs[ax]))
        assert abs(counts[ax] - n * probs[ax]) < 3 * sigma + 1


def test_ellipsoid_and_cylinder_surfaces():
    rng = np.random.default_rng(2)
    ell = sample_object(STAGES[3], rng, fixed_family="ellipsoid")
    semi = ell.sizes / 2
    q = np.sum((ell.surface_points / semi) ** 2, axis=1)
    np.testing.assert_allclose(q, 1.0, atol=1e-6)
    cyl = sample_object(STAGES[3], rng, fixed_family="cylinder")
    r, hh = cyl.sizes[0] / 2, cyl.sizes[2] / 2
    rho = np.linalg.norm(cyl.surface_points[:, :2], axis=1)
    on_side = np.isclose(rho, r, atol=1e-9)
    on_cap = np.isclose(np.abs(cyl.surface_points[:, 2]), hh, atol=1e-9)
    assert (on_side | on_cap).all()


def test_stage1_single_family():
    rng = np.random.default_rng(3)
    fams = {sample_object(STAGES[1], rng).family for _ in range(20)}
    assert fams == {"box"}


def test_stage3_all_families():
    rng = np.random.default_rng(4)
    fams = {sample_object(STAGES[3], rng).family for _ in range(200)}
    assert fams == {"box", "ellipsoid", "cylinder", "composite"}


def test_curriculum_invariants():
    assert STAGES[2].lin_limit < STAGES[1].lin_limit
    assert set(STAGES[1].families) <= set(STAGES[3].families)


# -- reset ------------------------------------------------------------------------

def test_reset_deterministic():
    a, b = make_env(seed=7), make_env(seed=7)
    oa, ob = a.reset(), b.reset()
    np.testing.assert_array_equal(oa.proprio, ob.proprio)
    np.testing.assert_array_equal(oa.pairs.pairs, ob.pairs.pairs)
    np.testing.assert_array_equal(oa.privileged, ob.privileged)
    act = np.full(7, 0.3)
    for _ in range(10):
        ra = a.step(act)
        rb = b.step(act)
        np.testing.assert_array_equal(ra[0].proprio, rb[0].proprio)
        assert ra[1].total == rb[1].total


def test_reset_lift_goal_band():
    env = make_env(seed=8)
    for _ in range(300):
        env.reset()
        dz = env.state.goal_pose.translation[2] - env.state.object_pose.translation[2]
        assert 0.05 - 1e-12 <= dz <= 0.15 + 1e-12


def test_reset_object_rests_on_table():
    env = make_env(seed=9)
    for _ in range(50):
        env.reset()
        low = env.current_points().points[:, 2].min()
        assert abs(low) < 1e-9


def test_observation_shapes_and_pairing():
    env = make_env(seed=10)
    obs = env.reset()
    assert obs.proprio.shape == (17,)
    assert obs.last_action.shape == (7,)
    assert obs.pairs.pairs.shape == (128, 6)
    assert obs.pairs.visibility.all()
    assert obs.privileged.shape == (36,)
    # with randomization off the current half of the pairs is exact
    np.testing.assert_allclose(obs.pairs.current().points, env.current_points().points)
    np.testing.assert_allclose(obs.pairs.target().points, env.target_points().points)


# -- stepping ---------------------------------------------------------------------

def test_static_equilibrium():
    env = make_env(seed=11)
    env.reset()
    pose0 = env.state.object_pose
    for _ in range(20):
        env.step(np.zeros(7))
    np.testing.assert_allclose(env.state.object_pose.translation, pose0.translation, atol=1e-9)
    np.testing.assert_allclose(env.state.object_pose.rotation, pose0.rotation, atol=1e-9)


def test_attached_object_follows_hand():
    env = make_env(seed=12)
    env.reset()
    assert descend_and_grasp(env)
    z0 = env.state.object_pose.translation[2]
    for _ in range(5):
        env.step_twist(np.array([0, 0, 0.01, 0, 0, 0]), 0.2)
    assert env.state.attached
    np.testing.assert_allclose(env.state.object_pose.translation[2] - z0, 0.05, atol=1e-12)


def test_attached_start_curriculum():
    env = make_env(seed=14, attached_start_prob=1.0)
    env.reset()
    st = env.state
    assert st.attached and st.aperture == 0.3
    np.testing.assert_allclose(st.hand_pose.translation,
                               st.object_pose.translation, atol=1e-12)
    z0 = st.object_pose.translation[2]
    for _ in range(5):
        env.step_twist(np.array([0, 0, 0.01, 0, 0, 0]), 0.2)
    assert env.state.object_pose.translation[2] - z0 == pytest.approx(0.05)

    never = make_env(seed=14, attached_start_prob=0.0)
    never.reset()
    assert not never.state.attached


def test_rigid_attachment_in_hand_frame():
    env = make_env(seed=13)
    env.reset()
    assert descend_and_grasp(env)
    rng = np.random.default_rng(0)

    def in_hand():
        return transform_points(invert(env.state.hand_pose),
                                env.current_points()).points

    ref = in_hand()
    for _ in range(10):
        env.step(np.concatenate([rng.uniform(-0.5, 0.5, 6), [-1.0]]))
        if not env.state.attached:
            break
        np.testing.assert_allclose(in_hand(), ref, atol=1e-9)


def test_speed_limit_clamp():
    env = make_env(seed=14)
    env.reset()
    t0 = env.state.hand_pose.translation.copy()
    env.step(np.array([5.0, 0, 0, 0, 0, 0, 1.0]))  # way past the limit
    moved = env.state.hand_pose.translation - t0
    assert abs(moved[0] - STAGES[1].lin_limit) < 1e-12


def test_invalid_action():
    env = make_env(seed=15)
    env.reset()
    with pytest.raises(InvalidAction):
        env.step(np.array([np.nan, 0, 0, 0, 0, 0, 0]))
    with pytest.raises(InvalidAction):
        env.step_twist(np.full(6, np.inf), 0.5)


def test_detach_on_open_and_fall():
    env = make_env(seed=16)
    env.reset()
    assert descend_and_grasp(env)
    for _ in range(10):
        env.step_twist(np.array([0, 0, 0.01, 0, 0, 0]), 0.2)
    env.step_twist(np.zeros(6), 1.0)  # open wide
    for _ in range(10):
        env.step_twist(np.zeros(6), 1.0)
        if env.state.aperture > 0.8:
            break
    for _ in range(30):
        env.step_twist(np.zeros(6), 1.0)
    assert not env.state.attached
    low = env.current_points().points[:, 2].min()
    assert abs(low) < 1e-4  # fell back to rest on the table


def test_object_never_below_table():
    env = make_env(seed=17)
    env.reset()
    rng = np.random.default_rng(1)
    for _ in range(100):
        _, _, done, _ = env.step(np.concatenate([rng.uniform(-1, 1, 6), [rng.uniform(-1, 1)]]))
        assert env.current_points().points[:, 2].min() > -1e-4
        if done:
            env.reset()


def test_timeout_done():
    env = make_env(seed=18, max_steps=25)
    env.reset()
    for i in range(25):
        _, _, done, info = env.step(np.zeros(7))
    assert done and info["reset_reason"] == "timeout"


def test_drift_reset():
    env = make_env(seed=19)
    env.reset()
    assert descend_and_grasp(env)
    done = False
    for _ in range(100):
        _, _, done, info = env.step_twist(np.array([0.02, 0, 0.004, 0, 0, 0]), 0.2)
        if done:
            break
    assert done and info["reset_reason"] == "drift"


# -- success and goals ----------------------------------------------------------------

def test_check_success_thresholds():
    pts = np.random.default_rng(2).normal(size=(16, 3))
    cur = PointSet.of(pts)

    near = PointSet.of(pts + [0.04 * 0.25 / np.sqrt(3)] * 3)
    s, stay, t = check_success(cur, near, 0.0, 0.05)
    assert s and not stay and t == 0.05

    far = PointSet.of(pts + [0.06 * 0.25, 0, 0])
    s, stay, t = check_success(cur, far, 0.45, 0.05)
    assert not s and not stay and t == 0.0

    s, stay, t = check_success(cur, near, 0.45, 0.05)
    assert s and stay


def test_stay_success_accumulates_12_steps():
    env = make_env(seed=20, single_goal=True)
    env.reset()
    # teleport-style check by moving the goal onto the object
    env.set_goal_pose(env.state.object_pose, count_waypoint=False)
    stays = []
    for i in range(12):
        _, terms, done, info = env.step(np.zeros(7))
        stays.append(info["stay_success"])
        if done:
            break
    assert not any(stays[:9])
    assert stays[9]  # 10 steps at 20 Hz = 0.5 s
    assert done and info["reset_reason"] == "success"


def test_alternating_success_never_stays():
    env = make_env(seed=21)
    env.reset()
    goal_on = env.state.object_pose
    goal_off = Pose(goal_on.rotation, goal_on.translation + np.array([0.2, 0, 0]))
    for i in range(30):
        env.set_goal_pose(goal_on if i % 2 == 0 else goal_off, count_waypoint=False)
        # set_goal_pose resets the accumulator, mirroring a goal that flickers
        _, _, _, info = env.step(np.zeros(7))
        assert not info["stay_success"]


def test_advance_goal_requires_stay():
    env = make_env(seed=22)
    env.reset()
    with pytest.raises(GoalNotReached):
        env.advance_goal()


def test_advance_goal_transform_identity():
    env = make_env(seed=23, manage_goals=False)
    env.reset()
    env.set_goal_pose(env.state.object_pose, count_waypoint=False)
    for _ in range(10):
        env.step(np.zeros(7))
    old_goal = env.state.goal_pose
    old_targets = env.target_points()
    wp0 = env.state.waypoint_index
    env.advance_goal()
    new_goal = env.state.goal_pose
    expected = transform_points(compose(new_goal, invert(old_goal)), old_targets)
    np.testing.assert_allclose(env.target_points().points, expected.points, atol=1e-9)
    assert env.state.waypoint_index == wp0 + 1
    assert env.state.success_time == 0.0


def test_zero_range_goal_advance():
    env = make_env(seed=24, goal_trans_range=0.0, goal_rot_range=0.0, manage_goals=False)
    env.reset()
    env.set_goal_pose(env.state.object_pose, count_waypoint=False)
    for _ in range(10):
        env.step(np.zeros(7))
    old = env.state.goal_pose
    env.advance_goal()
    np.testing.assert_allclose(env.state.goal_pose.translation, old.translation, atol=1e-12)
    np.testing.assert_allclose(env.state.goal_pose.rotation, old.rotation, atol=1e-12)


# -- pushes ------------------------------------------------------------------------

def test_push_schedule_and_bounds():
    env = make_env(seed=25, pushes=True, max_steps=300)
    env.reset()
    pushed_steps = []
    for i in range(1, 170):
        _, _, done, info = env.step(np.zeros(7))
        if info["pushed"]:
            pushed_steps.append(i)
            assert np.all(np.abs(env.state.object_velocity[[0, 1, 3, 4, 5]]) <= 0.4)
        if done:
            break
    assert 80 in pushed_steps
    assert 79 not in pushed_steps and 81 not in pushed_steps


def test_pushes_disabled():
    env = make_env(seed=26, pushes=False)
    env.reset()
    for i in range(85):
        _, _, done, info = env.step(np.zeros(7))
        assert not info["pushed"]
        if done:
            break


# -- domain randomization --------------------------------------------------------------

def test_randomization_off_is_noiseless():
    env = make_env(seed=27)
    env.reset()
    assert env._obs_sigma == 0.0 and env._proprio_sigma == 0.0
    assert env._act_sigma == 0.0 and env._friction == 1.0 and env._slip_prob == 0.0


def test_randomization_bounds():
    cfg = EnvConfig(randomize="train")
    env = ManipEnv(cfg, seed=28)
    for _ in range(2000):
        env.reset()
        assert 0.0 <= env._obs_sigma <= cfg.obs_noise_max
        assert 0.0 <= env._proprio_sigma <= cfg.proprio_noise_max
        assert 0.0 <= env._act_sigma <= cfg.act_noise_max
        assert cfg.friction_range[0] <= env._friction <= cfg.friction_range[1]
        assert 0.0 <= env._slip_prob <= cfg.slip_max


def test_mid_randomization_fixed():
    env = ManipEnv(EnvConfig(randomize="mid"), seed=29)
    env.reset()
    assert env._obs_sigma == 0.0025 and env._act_sigma == 0.005
    assert env._friction == 1.0 and env._slip_prob == 0.01


def test_action_noise_std():
    cfg = EnvConfig(randomize="mid", pushes=False)
    cfg.act_noise_max = 0.02  # mid -> sigma 0.01
    env = ManipEnv(cfg, seed=30)
    env.reset()
    t_prev = env.state.hand_pose.translation.copy()
    diffs = []
    cmd = np.array([0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
    for _ in range(3000):
        _, _, done, _ = env.step(cmd)
        moved = (env.state.hand_pose.translation - t_prev) / STAGES[1].lin_limit
        diffs.append(moved[0] - 0.5)
        t_prev = env.state.hand_pose.translation.copy()
        if done:
            env.reset()
            t_prev = env.state.hand_pose.translation.copy()
    assert abs(np.std(diffs) - 0.01) < 0.002


# -- reward -----------------------------------------------------------------------------

def state_for_reward(hand_z=0.2):
    pose = Pose(np.eye(3), [0.0, 0.0, 0.05])
    return EnvState(object_pose=pose, object_velocity=np.zeros(6),
                    hand_pose=Pose(np.eye(3), [0.0, 0.0, hand_z]),
                    hand_velocity=np.zeros(6), aperture=1.0, aperture_rate=0.0,
                    attached=False, goal_pose=pose, waypoint_index=0,
                    sim_time=0.0, success_time=0.0)


def test_reward_goal_at_zero_distance():
    w = RewardWeights()
    pts = PointSet.of(np.random.default_rng(3).normal(size=(8, 3)) * 0.02 + [0, 0, 0.05])
    terms = compute_reward(state_for_reward(), pts, pts, np.zeros(7), w, stay_success=False)
    assert terms.r_goal == w.w_g
    assert terms.r_bonus == 0.0


def test_reward_bonus_on_stay():
    w = RewardWeights()
    pts = PointSet.of(np.zeros((4, 3)) + [0, 0, 0.05])
    terms = compute_reward(state_for_reward(), pts, pts, np.zeros(7), w, stay_success=True)
    assert terms.r_bonus == w.w_b


def test_reward_table_penalty():
    w = RewardWeights()
    st = state_for_reward(hand_z=0.04 - 0.01)  # fingertips sit at hand_z - 0.04
    pts = PointSet.of(np.zeros((4, 3)) + [0, 0, 0.05])
    terms = compute_reward(st, pts, pts, np.zeros(7), w, stay_success=False)
    assert abs(terms.r_table - (-w.w_t * 4 * 0.01)) < 1e-12
    assert terms.r_table <= 0.0


def test_reward_action_penalty_and_total():
    w = RewardWeights()
    pts = PointSet.of(np.zeros((4, 3)) + [0, 0, 0.05])
    a = np.full(7, 0.5)
    terms = compute_reward(state_for_reward(), pts, pts, a, w, stay_success=False)
    assert abs(terms.r_action - (-w.w_a * 7 * 0.25)) < 1e-12
    expected = (terms.r_goal + terms.r_fo + terms.r_ho + terms.r_bonus
                + terms.r_grip + terms.r_table + terms.r_action + terms.r_hold
                + terms.r_prog)
    assert terms.total == expected


def test_reward_hold_term():
    pts = PointSet.of(np.zeros((4, 3)) + [0, 0, 0.05])
    w = RewardWeights(w_hold=0.5)
    st = state_for_reward()
    assert compute_reward(st, pts, pts, np.zeros(7), w, stay_success=False).r_hold == 0.0
    st.attached = True
    assert compute_reward(st, pts, pts, np.zeros(7), w, stay_success=False).r_hold == 0.5
    # off by default so existing reward totals are untouched
    assert compute_reward(st, pts, pts, np.zeros(7), RewardWeights(),
                          stay_success=False).r_hold == 0.0


def test_reward_progress_term():
    src = PointSet.of(np.zeros((4, 3)) + [0, 0, 0.05])
    dst = PointSet.of(np.zeros((4, 3)) + [0.02, 0, 0.05])
    w = RewardWeights(w_prog=5.0)
    st = state_for_reward()
    # no previous distance recorded -> no charge
    assert compute_reward(st, src, dst, np.zeros(7), w, stay_success=False).r_prog == 0.0
    closer = compute_reward(st, src, dst, np.zeros(7), w, stay_success=False,
                            prev_dist=0.03)
    assert abs(closer.r_prog - 5.0 * (0.03 - 0.02)) < 1e-12
    away = compute_reward(st, src, dst, np.zeros(7), w, stay_success=False,
                          prev_dist=0.01)
    assert away.r_prog < 0.0
    assert compute_reward(st, src, dst, np.zeros(7), RewardWeights(),
                          stay_success=False, prev_dist=0.03).r_prog == 0.0


def test_env_progress_telescopes():
    # potential-based: per-episode sum of r_prog telescopes to
    # w_prog * (d_first - d_last) across steps with an unchanged goal
    env = make_env(seed=5, weights=RewardWeights(w_prog=1.0), single_goal=True)
    env.reset()
    total, dists = 0.0, []
    for _ in range(30):
        _, _, done, info = env.step(np.array([0.3, 0, -0.2, 0, 0, 0, -1.0]))
        total += info["reward_terms"].r_prog
        dists.append(info["d_t"])
        if done:
            break
    assert abs(total - (dists[0] - dists[-1])) < 1e-9


def test_reward_bounded():
    env = make_env(seed=31)
    env.reset()
    w = env.config.weights
    upper = w.w_g + w.w_f + w.w_h + w.w_b
    rng = np.random.default_rng(4)
    for _ in range(200):
        _, terms, done, _ = env.step(rng.uniform(-1, 1, 7))
        assert np.isfinite(terms.total)
        assert terms.total <= upper + 1e-9
        if done:
            env.reset()


# -- vec env and config -------------------------------------------------------------------

def test_vecenv_matches_single_env():
    cfg = EnvConfig(randomize="off", pushes=False)
    vec = VecEnv(cfg, n_envs=3, seed=42)
    obs = vec.reset()
    assert len(obs) == 3
    seqs = np.random.SeedSequence(42).spawn(3)
    solo = ManipEnv(cfg, rng=np.random.default_rng(seqs[1]))
    so = solo.reset()
    np.testing.assert_array_equal(obs[1].proprio, so.proprio)
    actions = np.tile(np.linspace(-0.5, 0.5, 7), (3, 1))
    obs2, rewards, dones, infos, finished = vec.step(actions)
    so2, terms, _, _ = solo.step(actions[1])
    np.testing.assert_array_equal(obs2[1].proprio, so2.proprio)
    assert rewards[1] == terms.total


def test_vecenv_auto_reset_reports_episodes():
    cfg = EnvConfig(randomize="off", pushes=False, max_steps=10)
    vec = VecEnv(cfg, n_envs=2, seed=5)
    vec.reset()
    done_count = 0
    for _ in range(25):
        _, _, dones, _, finished = vec.step(np.zeros((2, 7)))
        done_count += len(finished)
        for ep in finished:
            assert ep["length"] == 10 and ep["reset_reason"] == "timeout"
    assert done_count == 4


def test_config_yaml_roundtrip(tmp_path):
    cfg = EnvConfig(stage=2, pushes=False, randomize="mid",
                    weights=RewardWeights(w_g=3.0), goal_rot_range=0.7)
    path = tmp_path / "env.yaml"
    cfg.to_yaml(path)
    back = EnvConfig.from_yaml(path)
    assert back.stage == 2 and back.pushes is False and back.randomize == "mid"
    assert back.weights.w_g == 3.0 and back.goal_rot_range == 0.7
    assert back.size_range == cfg.size_range


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("unknown_key: 3\n")
    with pytest.raises(KeyError):
        EnvConfig.from_yaml(path)


def test_privileged_rotation_masking():
    env = make_env(seed=32, mask_privileged_rotations=True)
    obs = env.reset()
    np.testing.assert_array_equal(obs.privileged[3:9], 0.0)
    np.testing.assert_array_equal(obs.privileged[30:36], 0.0)
    assert np.any(obs.privileged[0:3] != 0.0)


def test_fingertips_track_aperture():
    pose = Pose(np.eye(3), [0.0, 0.0, 0.3])
    open_tips = fingertip_positions(pose, 1.0)
    closed_tips = fingertip_positions(pose, 0.0)
    r_open = np.linalg.norm(open_tips[:, :2], axis=1)
    r_closed = np.linalg.norm(closed_tips[:, :2], axis=1)
    np.testing.assert_allclose(r_open, 0.06, atol=1e-12)
    np.testing.assert_allclose(r_closed, 0.018, atol=1e-12)
    np.testing.assert_allclose(open_tips[:, 2], 0.26, atol=1e-12)
