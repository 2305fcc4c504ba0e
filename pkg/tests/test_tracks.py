import numpy as np
import pytest

from ap2ap.geom import PointSet
from ap2ap.tracks import (
    DepthSequence,
    EmptyDepth,
    FormatError,
    MaskSpec,
    PointMasker,
    Track,
    Track2D,
    apply_height_mask,
    calibrate_depths,
    extract_waypoints,
    lift_tracks,
    project_to_pixels,
    read_depth_map,
    read_depth_sequence,
    read_track,
    read_tracks2d,
    sample_plane_mask,
    write_depth_map,
    write_depth_sequence,
    write_track,
    write_tracks2d,
)

INTR = (100.0, 100.0, 64.0, 48.0)


def make_track(t=5, n=3, seed=0, waypoints=None):
    rng = np.random.default_rng(seed)
    coords = rng.normal(size=(t, n, 3)).astype(np.float32)
    vis = rng.random((t, n)) > 0.2
    return Track(coords, vis, waypoints if waypoints is not None else [t - 1])


# -- calibration ---------------------------------------------------------------

def test_calibrate_scale_half():
    seq = DepthSequence(np.full((3, 4, 4), 2.0), INTR)
    out = calibrate_depths(seq, np.full((4, 4), 1.0))
    assert np.median(out.depths[0]) == 1.0
    np.testing.assert_array_equal(out.depths, np.full((3, 4, 4), 1.0))


def test_calibrate_identity():
    rng = np.random.default_rng(1)
    depths = rng.uniform(0.5, 2.0, size=(4, 6, 6))
    seq = DepthSequence(depths, INTR)
    out = calibrate_depths(seq, depths[0])
    np.testing.assert_array_equal(out.depths, depths)  # scale is exactly 1.0


def test_calibrate_constant_sequence():
    seq = DepthSequence(np.full((2, 3, 3), 4.0), INTR)
    out = calibrate_depths(seq, np.full((3, 3), 0.8))
    np.testing.assert_allclose(out.depths, 0.8)


def test_calibrate_ignores_invalid_pixels():
    frame = np.array([[1.0, 3.0], [0.0, np.nan]])  # valid median = 2.0
    seq = DepthSequence(np.stack([frame, frame]), INTR)
    out = calibrate_depths(seq, np.array([[1.0]]))
    assert abs(np.nanmax(out.depths[0]) - 1.5) < 1e-12


def test_calibrate_empty_errors():
    with pytest.raises(EmptyDepth):
        calibrate_depths(DepthSequence(np.zeros((2, 2, 2)), INTR), np.ones((2, 2)))
    with pytest.raises(EmptyDepth):
        calibrate_depths(DepthSequence(np.ones((2, 2, 2)), INTR), np.zeros((2, 2)))
    bad_later = np.ones((3, 2, 2))
    bad_later[2] = 0.0
    with pytest.raises(EmptyDepth):
        calibrate_depths(DepthSequence(bad_later, INTR), np.ones((2, 2)))


# -- lifting -------------------------------------------------------------------

def test_lift_principal_point():
    t2d = Track2D(np.array([[[64.0, 48.0]]]), np.ones((1, 1), bool))
    seq = DepthSequence(np.full((1, 96, 128), 1.0), INTR)
    track = lift_tracks(t2d, seq)
    np.testing.assert_allclose(track.coords[0, 0], [0.0, 0.0, 1.0], atol=1e-7)
    assert track.visibility[0, 0]


def test_lift_similar_triangles():
    intr = (100.0, 100.0, 0.0, 0.0)
    t2d = Track2D(np.array([[[100.0, 0.0]]]), np.ones((1, 1), bool))
    seq = DepthSequence(np.full((1, 64, 128), 2.0), intr)
    track = lift_tracks(t2d, seq)
    np.testing.assert_allclose(track.coords[0, 0], [2.0, 0.0, 2.0], atol=1e-7)


def test_lift_project_roundtrip():
    rng = np.random.default_rng(2)
    pts = np.stack([rng.uniform(-0.3, 0.3, 40), rng.uniform(-0.2, 0.2, 40),
                    rng.uniform(0.8, 1.6, 40)], axis=1)
    pix = project_to_pixels(pts, INTR)
    # depth map quantized to pixel grid: nearest-pixel depth equals true z
    depth = np.full((96, 128), np.nan)
    iu = np.round(pix[:, 0]).astype(int)
    iv = np.round(pix[:, 1]).astype(int)
    depth[iv, iu] = pts[:, 2]
    t2d = Track2D(pix[None], np.ones((1, 40), bool))
    track = lift_tracks(t2d, DepthSequence(depth[None], INTR))
    assert track.visibility.all()
    np.testing.assert_allclose(track.coords[0], pts, atol=1e-6)


def test_lift_out_of_bounds_and_invalid_become_invisible():
    coords = np.array([[[500.0, 48.0], [-3.0, 2.0], [64.0, 48.0], [10.0, 10.0]]])
    vis = np.ones((1, 4), bool)
    depth = np.full((96, 128), 1.0)
    depth[10, 10] = 0.0  # invalid at the 4th point's pixel
    track = lift_tracks(Track2D(coords, vis), DepthSequence(depth[None], INTR))
    np.testing.assert_array_equal(track.visibility[0], [False, False, True, False])
    np.testing.assert_array_equal(track.coords[0, 0], 0.0)


def test_lift_respects_2d_visibility():
    coords = np.tile(np.array([[64.0, 48.0]]), (2, 1))[:, None, :]
    vis = np.array([[True], [False]])
    track = lift_tracks(Track2D(coords, vis), DepthSequence(np.ones((2, 96, 128)), INTR))
    assert track.visibility[0, 0] and not track.visibility[1, 0]


def test_lift_frame_mismatch():
    t2d = Track2D(np.zeros((2, 1, 2)) + 5.0, np.ones((2, 1), bool))
    with pytest.raises(FormatError):
        lift_tracks(t2d, DepthSequence(np.ones((3, 8, 8)), INTR))


# -- waypoints -----------------------------------------------------------------

def test_waypoints_static_track():
    coords = np.zeros((8, 4, 3), dtype=np.float32)
    track = Track(coords, np.ones((8, 4), bool), [7])
    out = extract_waypoints(track, stride=1, min_advance=0.01)
    np.testing.assert_array_equal(out.waypoint_indices, [7])


def test_waypoints_all_frames():
    track = make_track(t=6, n=2)
    track.visibility[:] = True
    out = extract_waypoints(track, stride=1, min_advance=0.0)
    np.testing.assert_array_equal(out.waypoint_indices, [1, 2, 3, 4, 5])


def test_waypoints_accumulation_rule():
    t = 10
    coords = np.zeros((t, 3, 3), dtype=np.float32)
    coords[:, :, 0] = 0.02 * np.arange(t)[:, None]
    track = Track(coords, np.ones((t, 3), bool), [t - 1])
    out = extract_waypoints(track, stride=1, min_advance=0.05)
    np.testing.assert_array_equal(out.waypoint_indices, [3, 6, 9])


def test_waypoints_stride_and_final_frame():
    t = 10
    coords = np.zeros((t, 2, 3), dtype=np.float32)
    coords[:, :, 1] = 0.1 * np.arange(t)[:, None]
    track = Track(coords, np.ones((t, 2), bool), [t - 1])
    out = extract_waypoints(track, stride=4, min_advance=0.0)
    np.testing.assert_array_equal(out.waypoint_indices, [4, 8, 9])


def test_waypoint_validation():
    with pytest.raises(FormatError):
        make_track(waypoints=[2])          # does not end at T-1
    with pytest.raises(FormatError):
        make_track(waypoints=[3, 3, 4])    # not strictly increasing


# -- plane mask ------------------------------------------------------------------

def test_plane_mask_cube_symmetry():
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    rng = np.random.default_rng(3)
    for _ in range(50):
        keep = sample_plane_mask(PointSet.of(corners), rng)
        assert keep.sum() == 4


def test_plane_mask_two_points_keeps_one():
    rng = np.random.default_rng(4)
    pts = PointSet.of(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
    for _ in range(100):
        assert sample_plane_mask(pts, rng).sum() >= 1


def test_plane_mask_keep_fraction_near_half():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(64, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= rng.random((64, 1)) ** (1 / 3)
    ball = PointSet.of(pts)
    fractions = [sample_plane_mask(ball, rng).mean() for _ in range(10000)]
    assert 0.45 <= np.mean(fractions) <= 0.55


# -- height mask -------------------------------------------------------------------

def zspec(ratio, above=0.9, below=0.05, sigma=0.005):
    return MaskSpec(np.array([0.0, 0.0, 1.0]), 1.0, ratio, above, below, sigma)


def test_height_mask_identity():
    rng = np.random.default_rng(6)
    pts = PointSet.of(rng.normal(size=(20, 3)))
    out = apply_height_mask(pts, zspec(0.5, above=0.0, below=0.0, sigma=0.0), rng)
    np.testing.assert_array_equal(out.points, pts.points)
    np.testing.assert_array_equal(out.visibility, pts.visibility)


def test_height_mask_ratio_one_keeps_95_percent():
    rng = np.random.default_rng(7)
    pts = PointSet.of(rng.uniform(-1, 1, size=(100, 3)))
    kept = 0
    trials = 1000
    for _ in range(trials):
        kept += apply_height_mask(pts, zspec(1.0, sigma=0.0), rng).n_visible
    frac = kept / (trials * 100)
    assert abs(frac - 0.95) < 0.01


def test_height_mask_all_above_keeps_10_percent():
    rng = np.random.default_rng(8)
    # ratio 0: threshold at z_min, everything strictly above it drops at 0.9
    z = np.linspace(0.0, 1.0, 101)
    pts = PointSet.of(np.stack([np.zeros(101), np.zeros(101), z], axis=1))
    kept = np.mean([apply_height_mask(pts, zspec(0.0, sigma=0.0), rng).n_visible
                    for _ in range(500)])
    # 100 points strictly above at 10% expected keep, plus the z_min point at 95%
    assert abs(kept - (100 * 0.1 + 0.95)) < 1.0


def test_height_mask_degenerate_extent_counts_below():
    rng = np.random.default_rng(9)
    pts = PointSet.of(np.tile([0.0, 0.0, 0.5], (50, 1)))
    kept = np.mean([apply_height_mask(pts, zspec(0.3, sigma=0.0), rng).n_visible
                    for _ in range(400)])
    assert abs(kept - 50 * 0.95) < 1.0


def test_height_mask_noise_sigma():
    rng = np.random.default_rng(10)
    pts = PointSet.of(np.zeros((2000, 3)))
    out = apply_height_mask(pts, zspec(1.0, above=0.0, below=0.0, sigma=0.005), rng)
    assert out.visibility.all()
    assert abs(out.points.std() - 0.005) < 0.0005


def test_height_mask_threshold_uses_visible_extent_only():
    pts = np.zeros((4, 3))
    pts[:, 2] = [0.0, 1.0, 2.0, 100.0]  # the tall point is already invisible
    ps = PointSet(pts, np.array([True, True, True, False]))
    rng = np.random.default_rng(11)
    out = apply_height_mask(ps, zspec(0.5, above=1.0, below=0.0, sigma=0.0), rng)
    # threshold = 1.0; only z=2.0 is strictly above among the visible
    np.testing.assert_array_equal(out.visibility, [True, True, False, False])


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec(np.array([0.0, 0.0, 2.0]), 1.0, 0.5)
    with pytest.raises(ValueError):
        zspec(0.5, above=1.5)
    with pytest.raises(ValueError):
        zspec(0.5, sigma=-1.0)


def test_point_masker_plane_fixed_height_varies():
    rng = np.random.default_rng(12)
    pts = PointSet.of(rng.normal(size=(64, 3)))
    masker = PointMasker(noise_sigma=0.0)
    masker.reset(pts, rng)
    plane_keep = masker._plane_keep.copy()
    outs = [masker.step(pts, rng).visibility for _ in range(20)]
    for v in outs:
        assert not v[~plane_keep].any()  # plane flags hold all episode
    differs = sum(not np.array_equal(outs[i], outs[i + 1]) for i in range(19))
    assert differs > 10  # height mask resamples per step
    masker.reset(pts, rng)
    assert not np.array_equal(masker._plane_keep, plane_keep)


def test_point_masker_disabled_passthrough():
    rng = np.random.default_rng(13)
    pts = PointSet.of(rng.normal(size=(16, 3)))
    masker = PointMasker(plane=False, height=False, noise_sigma=0.0)
    masker.reset(pts, rng)
    out = masker.step(pts, rng)
    np.testing.assert_array_equal(out.points, pts.points)
    assert out.visibility.all()


# -- track file roundtrip ------------------------------------------------------------

def test_track_roundtrip(tmp_path):
    track = make_track(t=7, n=5, waypoints=[2, 4, 6])
    track.visibility[0] = True
    path = tmp_path / "a.trk"
    write_track(path, track)
    back = read_track(path)
    np.testing.assert_array_equal(back.coords, track.coords)
    np.testing.assert_array_equal(back.visibility, track.visibility)
    np.testing.assert_array_equal(back.waypoint_indices, track.waypoint_indices)
    assert back.intrinsics is None


def test_track_roundtrip_minimal_and_intrinsics(tmp_path):
    track = Track(np.array([[[1.5, -2.0, 0.25]]], dtype=np.float32),
                  np.ones((1, 1), bool), [0], intrinsics=(100.0, 100.0, 32.0, 24.0))
    path = tmp_path / "m.trk"
    write_track(path, track)
    back = read_track(path)
    np.testing.assert_array_equal(back.coords, track.coords)
    assert back.intrinsics == (100.0, 100.0, 32.0, 24.0)


def test_track_bad_magic(tmp_path):
    path = tmp_path / "bad.trk"
    path.write_bytes(b"WRONGMAG" + b"\x00" * 32)
    with pytest.raises(FormatError):
        read_track(path)


def test_track_truncated(tmp_path):
    track = make_track()
    path = tmp_path / "t.trk"
    write_track(path, track)
    data = path.read_bytes()
    path.write_bytes(data[:-6])
    with pytest.raises(FormatError):
        read_track(path)


# -- text input formats ---------------------------------------------------------------

def test_tracks2d_roundtrip(tmp_path):
    rng = np.random.default_rng(14)
    coords = rng.uniform(0, 100, size=(3, 4, 2)).astype(np.float32).astype(np.float64)
    vis = rng.random((3, 4)) > 0.3
    vis[0] = True
    t2d = Track2D(coords, vis)
    path = tmp_path / "t.t2d"
    write_tracks2d(path, t2d)
    back = read_tracks2d(path)
    np.testing.assert_array_equal(back.coords, coords)
    np.testing.assert_array_equal(back.visibility, vis)


def test_depth_sequence_roundtrip(tmp_path):
    rng = np.random.default_rng(15)
    seq = DepthSequence(rng.uniform(0.5, 2, size=(2, 4, 6)).astype(np.float32).astype(np.float64), INTR)
    path = tmp_path / "d.dsq"
    write_depth_sequence(path, seq)
    back = read_depth_sequence(path)
    np.testing.assert_array_equal(back.depths, seq.depths)
    assert back.intrinsics == INTR


def test_depth_map_roundtrip(tmp_path):
    rng = np.random.default_rng(16)
    d = rng.uniform(0.5, 2, size=(5, 7)).astype(np.float32).astype(np.float64)
    path = tmp_path / "o.dpt"
    write_depth_map(path, d)
    np.testing.assert_array_equal(read_depth_map(path), d)


def test_text_format_errors(tmp_path):
    path = tmp_path / "x"
    path.write_bytes(b"WRONG 1\ndata\n")
    with pytest.raises(FormatError):
        read_tracks2d(path)
    path.write_bytes(b"TRACKS2D 9\nframes 1\npoints 1\ndata\n" + b"\x00" * 9)
    with pytest.raises(FormatError):
        read_tracks2d(path)
    path.write_bytes(b"TRACKS2D 1\nframes 1\ndata\n")
    with pytest.raises(FormatError):
        read_tracks2d(path)


def test_track2d_frame0_must_be_visible():
    with pytest.raises(FormatError):
        Track2D(np.zeros((2, 2, 2)), np.array([[True, False], [True, True]]))
