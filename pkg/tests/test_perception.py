import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

import oracles
from restorebot.errors import EmptyMask, NoGroundIntersection, NoHit, OutOfImage
from restorebot.geo import GeoCoordinate, LocalFrame, LocalPoint, geo_to_local
from restorebot.octree import OccupancyOctree
from restorebot.perception import (
    CameraIntrinsics,
    CameraPose,
    DESCRIPTOR_LENGTH,
    HeuristicClassifier,
    ImageStats,
    ProjectionNoise,
    SegmentMask,
    classify_mask,
    compute_descriptor,
    mask_centroid_bbox,
    pixel_to_ray,
    project_down_facing,
    project_front_facing,
)

K = CameraIntrinsics(200.0, 200.0, 160.0, 120.0, 320, 240)
FRAME = LocalFrame(GeoCoordinate(40.1, -105.2, 1600.0))
GREEN = ImageStats((0.3, 0.55, 0.2), (0.01, 0.01, 0.01))


def mask_of(us, vs, k=K, **kw):
    return SegmentMask.from_pixels("f0", us, vs, k.width, k.height, **kw)


def render_disk(k, pose, center, radius, height=0.0, **kw):
    """Pixels whose ray meets the plane ``up = height`` inside the disk."""
    u, v = np.meshgrid(np.arange(k.width), np.arange(k.height))
    d = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u, dtype=float)], axis=-1)
    d = d @ pose.rotation.T
    t = (height - pose.position[2]) / d[..., 2]
    pts = pose.position + t[..., None] * d
    inside = (t > 0) & (np.hypot(pts[..., 0] - center[0], pts[..., 1] - center[1]) <= radius)
    vs, us = np.nonzero(inside)
    return mask_of(us, vs, k, **kw)


def random_rotation(rng, tilt_deg=20.0):
    """Nadir camera tilted by up to ``tilt_deg`` and yawed freely."""
    tilt = Rotation.from_rotvec(rng.normal(size=3) * math.radians(tilt_deg) / 2)
    yaw = Rotation.from_euler("z", rng.uniform(0, 2 * math.pi))
    base = Rotation.from_matrix(CameraPose.nadir((0, 0, 0)).rotation)
    return (tilt * yaw * base).as_matrix()


# -- masks ---------------------------------------------------------------------

def test_single_pixel_centroid():
    cb = mask_centroid_bbox(mask_of([10], [20]))
    assert cb.centroid == (10.0, 20.0)
    assert cb.bbox == (10, 10, 20, 20)


def test_block_centroid():
    cb = mask_centroid_bbox(mask_of([0, 1, 0, 1], [0, 0, 1, 1]))
    assert cb.centroid == (0.5, 0.5)


def test_empty_mask_raises():
    m = SegmentMask("f0", [(0, K.width * K.height)], K.width, K.height)
    with pytest.raises(EmptyMask):
        mask_centroid_bbox(m)
    with pytest.raises(EmptyMask):
        compute_descriptor(m, GREEN, 0.005)


def test_runs_must_cover_image():
    with pytest.raises(ValueError):
        SegmentMask("f0", [(1, 5)], K.width, K.height)


def test_unknown_label_rejected():
    with pytest.raises(ValueError):
        mask_of([1], [1], class_label="tree")


def test_random_mask_centroid_matches_direct_sum():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 400))
        us = rng.integers(0, K.width, n)
        vs = rng.integers(0, K.height, n)
        cb = mask_centroid_bbox(mask_of(us, vs))
        flat = sorted(set(zip(us.tolist(), vs.tolist())))
        mu = sum(p[0] for p in flat) / len(flat)
        mv = sum(p[1] for p in flat) / len(flat)
        assert abs(cb.centroid[0] - mu) < 1e-12 and abs(cb.centroid[1] - mv) < 1e-12
        assert cb.bbox == (min(p[0] for p in flat), max(p[0] for p in flat),
                           min(p[1] for p in flat), max(p[1] for p in flat))


def test_run_length_round_trip():
    rng = np.random.default_rng(1)
    us = rng.integers(0, K.width, 300)
    vs = rng.integers(0, K.height, 300)
    m = mask_of(us, vs)
    got = set(zip(*(a.tolist() for a in m.pixels())))
    assert got == set(zip(us.tolist(), vs.tolist()))
    assert m.area_px == len(got)


# -- rays ----------------------------------------------------------------------

def test_principal_point_ray_is_optical_axis():
    pose = CameraPose.nadir((1.0, 2.0, 1.0), yaw=0.3)
    r = pixel_to_ray(K, pose, (K.cx, K.cy))
    assert np.allclose(r.direction, pose.optical_axis, atol=1e-15)
    assert r.origin == (1.0, 2.0, 1.0)


def test_identity_orientation_pixel_ray():
    k = CameraIntrinsics(200.0, 200.0, 160.0, 120.0, 640, 240)
    pose = CameraPose((0, 0, 0), np.eye(3))
    r = pixel_to_ray(k, pose, (k.cx + k.fx, k.cy))
    assert np.allclose(r.direction, np.array([1.0, 0.0, 1.0]) / math.sqrt(2), atol=1e-15)


def test_pixel_outside_image():
    pose = CameraPose((0, 0, 0), np.eye(3))
    with pytest.raises(OutOfImage):
        pixel_to_ray(K, pose, (K.width + 1, 0))
    with pytest.raises(OutOfImage):
        pixel_to_ray(K, pose, (0, -1))


def test_rotation_validated():
    with pytest.raises(ValueError):
        CameraPose((0, 0, 0), np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        CameraPose((0, 0, 0), 2 * np.eye(3))


def test_forward_projection_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(200):
        pose = CameraPose(rng.normal(size=3), random_rotation(rng, 40))
        pc = np.array([rng.uniform(-1, 1), rng.uniform(-0.8, 0.8), rng.uniform(0.5, 5)])
        point = pose.rotation @ pc + pose.position
        px = pose.project(K, point)
        if not K.contains(*px):
            continue
        r = pixel_to_ray(K, pose, px)
        assert oracles.point_line_distance(point, r.origin, r.direction) < 1e-9


# -- down-facing projection ----------------------------------------------------

def test_principal_point_lands_below_camera():
    pose = CameraPose.nadir((3.0, 4.0, 1.0))
    m = mask_of([160], [120], stats=GREEN)
    obs = project_down_facing(m, K, pose, 0.0)
    assert np.allclose(obs.position, [3.0, 4.0, 0.0], atol=1e-12)


def test_similar_triangles_offset():
    k = CameraIntrinsics(500.0, 500.0, 600.0, 400.0, 1200, 800)
    pose = CameraPose.nadir((0.0, 0.0, 1.0))
    m = SegmentMask.from_pixels("f0", [1100], [400], k.width, k.height, stats=GREEN)
    obs = project_down_facing(m, k, pose, 0.0)
    assert np.allclose(obs.position, [1.0, 0.0, 0.0], atol=1e-12)


def test_ground_intersection_errors():
    up = CameraPose((0, 0, 1.0), CameraPose.nadir((0, 0, 0)).rotation @ np.diag([1.0, -1.0, -1.0]))
    m = mask_of([160], [120])
    with pytest.raises(NoGroundIntersection):
        project_down_facing(m, K, up, 0.0)
    below = CameraPose.nadir((0, 0, -1.0))
    with pytest.raises(NoGroundIntersection):
        project_down_facing(m, K, below, 0.0)


def test_down_projection_matches_least_squares_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        rot = random_rotation(rng, 30)
        pose = CameraPose(np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.5, 3)]), rot)
        u, v = int(rng.integers(0, K.width)), int(rng.integers(0, K.height))
        h = rng.uniform(-0.2, 0.2)
        obs = project_down_facing(mask_of([u], [v]), K, pose, h)
        ref = oracles.ground_point_lsq(rot, pose.position, K.fx, K.fy, K.cx, K.cy, u, v, h)
        assert np.linalg.norm(obs.position - ref) < 1e-9


def test_geo_consistent_with_position():
    rng = np.random.default_rng(4)
    for _ in range(20):
        pose = CameraPose.nadir((rng.uniform(0, 50), rng.uniform(0, 50), 1.0), yaw=rng.uniform(0, 6))
        m = mask_of([int(rng.integers(0, 320))], [int(rng.integers(0, 240))])
        obs = project_down_facing(m, K, pose, 0.0, frame=FRAME)
        back = geo_to_local(FRAME, obs.geo)
        assert np.linalg.norm(np.array(back.as_tuple()) - obs.position) < 1e-6


def test_covariance_symmetric_psd():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = rng.normal(size=(6, 6)) * 0.05
        pose = CameraPose((0, 0, 1.0), random_rotation(rng), a @ a.T)
        obs = project_down_facing(mask_of([100], [100]), K, pose, 0.0)
        c = obs.position_covariance
        assert np.array_equal(c, c.T)
        assert np.linalg.eigvalsh(c).min() > -1e-15


def test_monte_carlo_chi_square_consistency():
    """Render with the true pose, project with a noisy one, gate at 99%."""
    rng = np.random.default_rng(6)
    sig_p, sig_r, sig_h = 0.05, math.radians(1.0), 0.05
    cov = np.diag([sig_p ** 2] * 3 + [sig_r ** 2] * 3)
    noise = ProjectionNoise(ground_height_sigma=sig_h, pixel_sigma=0.5)
    gate = 9.210  # chi-square 99%, 2 dof
    inside = 0
    trials = 300
    for _ in range(trials):
        true_pose = CameraPose.nadir((0.0, 0.0, 1.0), yaw=rng.uniform(0, 2 * math.pi))
        relief = rng.normal() * sig_h
        center = rng.uniform(-0.4, 0.4, size=2)
        m = render_disk(K, true_pose, center, 0.05, height=relief)
        dp = rng.normal(size=3) * sig_p
        dr = Rotation.from_rotvec(rng.normal(size=3) * sig_r).as_matrix()
        noisy = CameraPose(true_pose.position + dp, dr @ true_pose.rotation, cov)
        obs = project_down_facing(m, K, noisy, 0.0, noise=noise)
        e = obs.position[:2] - center
        c = obs.position_covariance[:2, :2]
        inside += float(e @ np.linalg.solve(c, e)) <= gate
    assert inside / trials >= 0.99


def test_label_passthrough_and_classification():
    pose = CameraPose.nadir((0.0, 0.0, 1.0))
    labelled = render_disk(K, pose, (0.0, 0.0), 0.1, stats=GREEN, class_label="litter", confidence=0.7)
    obs = project_down_facing(labelled, K, pose, 0.0)
    assert (obs.class_label, obs.confidence) == ("litter", 0.7)
    unlabelled = render_disk(K, pose, (0.0, 0.0), 0.1, stats=GREEN)
    assert project_down_facing(unlabelled, K, pose, 0.0).class_label == "vegetation"


# -- descriptor ----------------------------------------------------------------

def test_uniform_square_descriptor():
    us, vs = np.meshgrid(np.arange(50, 70), np.arange(60, 80))
    m = mask_of(us.ravel(), vs.ravel())
    d = compute_descriptor(m, ImageStats((0.5, 0.5, 0.5), (0.0, 0.0, 0.0)), 0.01)
    assert len(d) == DESCRIPTOR_LENGTH
    assert np.all(d[4:7] == 0)
    assert d[7] == 1.0
    assert abs(d[0] - 0.04) < 1e-12
    assert abs(d[9] - 0.8 / 0.04) < 1e-9


def test_descriptor_scale_invariance():
    """An object twice as far away gives half the pixel size but the same metric area."""
    near = CameraPose.nadir((0.0, 0.0, 1.0))
    far = CameraPose.nadir((0.0, 0.0, 2.0))
    m1 = render_disk(K, near, (0.0, 0.0), 0.2, stats=GREEN)
    m2 = render_disk(K, far, (0.0, 0.0), 0.2, stats=GREEN)
    assert abs(m1.area_px / m2.area_px - 4.0) < 0.05
    a1 = project_down_facing(m1, K, near, 0.0).descriptor[0]
    a2 = project_down_facing(m2, K, far, 0.0).descriptor[0]
    assert abs(a1 - a2) / a1 < 0.01
    assert abs(a1 - math.pi * 0.04) / (math.pi * 0.04) < 0.01


def test_descriptor_deterministic_and_order_free():
    rng = np.random.default_rng(7)
    us = rng.integers(0, 40, 300)
    vs = rng.integers(0, 40, 300)
    perm = rng.permutation(300)
    d1 = compute_descriptor(mask_of(us, vs), GREEN, 0.005)
    d2 = compute_descriptor(mask_of(us[perm], vs[perm]), GREEN, 0.005)
    d3 = compute_descriptor(mask_of(us, vs), GREEN, 0.005)
    assert d1.tobytes() == d2.tobytes() == d3.tobytes()


def test_elongation_and_orientation():
    us, vs = np.meshgrid(np.arange(100, 160), np.arange(100, 106))
    d = compute_descriptor(mask_of(us.ravel(), vs.ravel()), GREEN, 0.01)
    assert abs(d[7] - 10.0) < 1e-9  # 60 x 6 box: ratio of std devs
    assert d[8] == 0.0
    tall = compute_descriptor(mask_of(vs.ravel(), us.ravel()), GREEN, 0.01)
    assert abs(tall[8] - math.pi / 2) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 319), st.integers(0, 239)), min_size=1, max_size=60))
def test_descriptor_finite(pixels):
    us, vs = zip(*pixels)
    d = compute_descriptor(mask_of(us, vs), GREEN, 0.005)
    assert np.all(np.isfinite(d)) and d[7] >= 1.0 and 0.0 <= d[8] < math.pi


# -- classifier ----------------------------------------------------------------

def descriptor(area, color, elong=1.0):
    return np.array([area, *color, 0.0, 0.0, 0.0, elong, 0.0, 40.0])


def test_stub_green_is_vegetation():
    assert classify_mask(None, descriptor(0.01, (0.3, 0.6, 0.2)))[0] == "vegetation"


def test_stub_thin_dark_is_crack():
    assert classify_mask(None, descriptor(0.003, (0.18, 0.16, 0.14), elong=8.0))[0] == "crack"


def test_stub_other_rules():
    assert classify_mask(None, descriptor(0.005, (0.22, 0.2, 0.19)))[0] == "dip"
    assert classify_mask(None, descriptor(0.07, (0.6, 0.6, 0.62)))[0] == "conmod"
    assert classify_mask(None, descriptor(0.01, (0.5, 0.38, 0.22)))[0] == "litter"
    assert classify_mask(None, descriptor(0.5, (0.3, 0.6, 0.2)))[0] == "shrub"
    assert classify_mask(None, descriptor(0.01, (0.9, 0.1, 0.9))) == ("other", 0.0)


def test_broken_classifier_falls_back():
    def bad(_):
        raise RuntimeError("model unavailable")

    assert classify_mask(None, descriptor(0.01, (0.3, 0.6, 0.2)), bad) == ("other", 0.0)
    assert classify_mask(None, descriptor(0.01, (0.3, 0.6, 0.2)), lambda d: ("tree", 1.0)) == ("other", 0.0)


def test_custom_classifier_plugs_in():
    assert classify_mask(None, descriptor(0.01, (0.3, 0.6, 0.2)), lambda d: ("dip", 2.0)) == ("dip", 1.0)


# -- front-facing projection ---------------------------------------------------

def front_setup():
    tree = OccupancyOctree.for_region((-1, -1, -1), (6, 6, 3), margin=1.0)
    pose = CameraPose.forward((0.0, 0.0, 0.5))
    return tree, pose


def test_single_voxel_ahead():
    tree, pose = front_setup()
    key = tree.key_of((2.0, 0.0, 0.5))
    tree.set_log_odds(key, 2.0)
    center = np.array(tree.voxel_center(key).as_tuple())
    # aim the camera exactly at the voxel centre
    pose = CameraPose.forward((0.0, float(center[1]), float(center[2])))
    obs = project_front_facing(mask_of([160], [120]), K, pose, tree)
    assert np.allclose(obs.position, center, atol=1e-12)


def test_empty_octree_no_hit():
    tree, pose = front_setup()
    with pytest.raises(NoHit):
        project_front_facing(mask_of([160], [120]), K, pose, tree)


def test_shrub_column_localised():
    tree, pose = front_setup()
    shrub = np.array([3.0, 0.2, 0.0])
    r, top = 0.07, 0.8
    for z in np.arange(0.0, top, tree.resolution / 3):
        for a in np.linspace(0, 2 * math.pi, 24, endpoint=False):
            p = shrub + [r * math.cos(a), r * math.sin(a), z]
            key = tree.key_of(tuple(p))
            tree.set_log_odds(key, 3.5)
    # silhouette of the column as seen by the camera
    pts = []
    for z in np.linspace(0.0, top, 40):
        for dy in np.linspace(-r, r, 10):
            px = pose.project(K, shrub + [0.0, dy, z])
            pts.append((round(px[0]), round(px[1])))
    us, vs = zip(*set(pts))
    m = mask_of(us, vs, stats=GREEN)
    obs = project_front_facing(m, K, pose, tree)
    assert np.linalg.norm(obs.position[:2] - shrub[:2]) <= tree.resolution
    # extent: roughly column width times height
    assert 0.5 * (2 * r * top) < obs.descriptor[0] < 3.0 * (2 * r * top)


# -- stub accuracy on rendered masks -------------------------------------------

def test_stub_accuracy_on_renders():
    rng = np.random.default_rng(8)
    pose = CameraPose.nadir((0.0, 0.0, 1.0))
    kinds = {
        "vegetation": ((0.3, 0.55, 0.22), 0.06),
        "litter": ((0.45, 0.35, 0.22), 0.06),
        "dip": ((0.24, 0.21, 0.19), 0.08),
        "conmod": ((0.62, 0.62, 0.64), 0.15),
    }
    right = total = 0
    for label, (color, radius) in kinds.items():
        for _ in range(25):
            jitter = tuple(float(c + rng.normal() * 0.02) for c in color)
            m = render_disk(K, pose, rng.uniform(-0.1, 0.1, 2), radius * rng.uniform(0.8, 1.0),
                            stats=ImageStats(jitter, (0.002,) * 3))
            obs = project_down_facing(m, K, pose, 0.0)
            right += obs.class_label == label
            total += 1
    # cracks: thin dark strips
    for _ in range(25):
        length, width = rng.uniform(0.12, 0.2), rng.uniform(0.01, 0.02)
        us, vs = np.meshgrid(np.arange(100, 100 + int(length * 200)), np.arange(120, 120 + max(1, int(width * 200))))
        m = mask_of(us.ravel(), vs.ravel(), stats=ImageStats((0.18, 0.16, 0.14), (0.001,) * 3))
        right += project_down_facing(m, K, pose, 0.0).class_label == "crack"
        total += 1
    assert right / total >= 0.95
