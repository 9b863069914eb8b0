"""Survey one season of a simulated world: trajectories, noisy poses and masks.

Masks are produced analytically: every pixel of the image is back-projected
through the *true* camera pose onto the ground (or onto a shrub cylinder
for the front camera) and tested against the landmark's footprint.  The
session records the *noisy* pose, so localisation error enters exactly as
it would in the field.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from ..errors import InvalidConfig
from ..octree import OccupancyOctree, OctreeParams
from ..perception import CameraIntrinsics, CameraPose, ImageStats, SegmentMask
from ..session import FrameRecord, Session
from .world import CONMOD_COLOR, MICROSITE_COLORS, SHRUB_COLOR, GroundTruth

RTK_SIGMA = 0.05
FALSE_SOURCE = "false"

DOWN = CameraIntrinsics(200.0, 200.0, 159.5, 119.5, 320, 240)
FRONT = CameraIntrinsics(200.0, 200.0, 159.5, 119.5, 320, 240)

# RNG substreams per (season, plot)
_POSE, _DETECT, _FALSE = 0, 1, 2


@dataclass
class NoiseModel:
    """Localisation and detection noise of one deployment.

    Pose error is the sum of a per-plot offset (``pose_noise_sigma``, per
    horizontal axis), a per-row bias and per-frame jitter, scaled back onto
    the disc of radius ``pose_noise_max`` when it lands outside.  The
    per-plot term models the slowly varying GNSS error over a plot survey;
    the other two are the local odometry error.  ``rtk_mode`` replaces the
    per-plot sigma with the 5 cm RTK figure.
    """
    pose_noise_sigma: float = 0.5
    pose_noise_max: float = 1.0
    row_sigma: float = 0.03
    jitter_sigma: float = 0.02
    rtk_mode: bool = False
    detection_miss_rate: float = 0.0
    false_positive_rate: float = 0.0   # expected false masks per frame
    descriptor_noise_sigma: float = 0.01

    def __post_init__(self):
        vals = (self.pose_noise_sigma, self.pose_noise_max, self.row_sigma, self.jitter_sigma,
                self.detection_miss_rate, self.false_positive_rate, self.descriptor_noise_sigma)
        if min(vals) < 0:
            raise InvalidConfig("noise parameters must be non-negative")
        if self.pose_noise_max < self.effective_sigma:
            raise InvalidConfig("pose_noise_max must be at least pose_noise_sigma")
        if self.detection_miss_rate > 1:
            raise InvalidConfig("detection_miss_rate must lie in [0, 1]")

    @property
    def effective_sigma(self) -> float:
        return RTK_SIGMA if self.rtk_mode else self.pose_noise_sigma

    @property
    def horizontal_variance(self) -> float:
        return self.effective_sigma ** 2 + self.row_sigma ** 2 + self.jitter_sigma ** 2

    @classmethod
    def noiseless(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, descriptor_noise_sigma=0.0)

    @classmethod
    def rtk(cls, **kw) -> "NoiseModel":
        return cls(rtk_mode=True, **kw)


@dataclass
class Lawnmower:
    """Serpentine rows across each plot; nadir camera at ``height``."""
    height: float = 1.0
    row_spacing: float = 0.8
    frame_spacing: float = 1.25
    edge_margin: float = 0.3
    front_height: float = 0.5
    frame_period: float = 1.0   # seconds between frames

    def rows(self, plot_size: float) -> np.ndarray:
        n = int(math.floor((plot_size - self.edge_margin) / self.row_spacing)) + 1
        return self.edge_margin + self.row_spacing * np.arange(n)

    def columns(self, plot_size: float) -> np.ndarray:
        n = int(math.floor((plot_size - self.frame_spacing) / self.frame_spacing)) + 1
        return self.frame_spacing / 2 + self.frame_spacing * np.arange(n)


@dataclass
class SessionTruth:
    """Sidecar ground truth of one simulated session; never read by the pipeline."""
    session_id: str
    season: int
    mask_source: dict[str, str]
    pose_error: dict[str, np.ndarray] = field(default_factory=dict)

    def max_pose_error(self) -> float:
        if not self.pose_error:
            return 0.0
        return float(max(np.hypot(e[0], e[1]) for e in self.pose_error.values()))


@dataclass
class Deployment:
    session: Session
    truth: SessionTruth


def session_id_for(world: GroundTruth, season: int) -> str:
    return f"S{season}-{world.config.season_tags[season]}"


def _truncate(e: np.ndarray, limit: float) -> np.ndarray:
    n = math.hypot(e[0], e[1])
    if n > limit:
        return e * (limit / n) if n > 0 else e
    return e


def _pixel_dirs(k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame direction of every pixel centre, shape (H, W, 3)."""
    u = np.arange(k.width, dtype=float)
    v = np.arange(k.height, dtype=float)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)


class _Footprints:
    """Flat landmarks (plants, microsites, ConMods) as ground ellipses."""

    def __init__(self, world: GroundTruth, season: int, plots: set[str]):
        items = []
        for p in world.plants:
            if p.plot_id in plots and p.alive(season):
                r = p.radius[season]
                s = math.sqrt(p.aspect)
                items.append((p.plant_id, "vegetation", p.position, r * s, r / s, p.angle, p.color[season], True))
        for c in world.conmods:
            if c.plot_id in plots:
                r = world.config.conmod_diameter / 2
                items.append((c.conmod_id, "conmod", c.position, r, r, 0.0, CONMOD_COLOR, False))
        for m in world.microsites:
            if m.plot_id in plots:
                if m.kind == "crack":
                    a, b = m.radius, m.radius / m.aspect
                else:
                    s = math.sqrt(m.aspect)
                    a, b = m.radius * s, m.radius / s
                items.append((m.microsite_id, m.kind, m.position, a, b, m.angle, MICROSITE_COLORS[m.kind], False))
        self.items = items
        self.tree = cKDTree(np.array([it[2] for it in items]).reshape(-1, 2)) if items else None
        self.reach = max((it[3] for it in items), default=0.0)

    def near(self, center, radius):
        if self.tree is None:
            return []
        return sorted(self.tree.query_ball_point(center, radius + self.reach))


# bounding octagon of a unit circle
_RING = np.array([(math.cos(t), math.sin(t)) for t in np.linspace(0, 2 * math.pi, 8, endpoint=False)]) \
    / math.cos(math.pi / 8)


def _ellipse_pixels(pose: CameraPose, k: CameraIntrinsics, dirs, center, a, b, angle):
    """Pixels whose ground intersection (plane z=0) falls inside the ellipse."""
    # cheap reject for near-nadir views: the centre is too far outside the
    # image for the ellipse to reach in
    pc0 = pose.rotation.T @ (np.array([center[0], center[1], 0.0]) - pose.position)
    if pc0[2] <= 0:
        return None
    reach = 1.1 * a * max(k.fx, k.fy) / pc0[2]
    u_c, v_c = k.fx * pc0[0] / pc0[2] + k.cx, k.fy * pc0[1] / pc0[2] + k.cy
    if u_c < -reach - 1 or u_c > k.width + reach or v_c < -reach - 1 or v_c > k.height + reach:
        return None
    if pose.rotation[2, 2] < -1 + 1e-12:
        # optical axis straight down: the ground disc of radius a images to
        # a disc of radius a * f / depth around the centre
        ru, rv = a * k.fx / pc0[2], a * k.fy / pc0[2]
        pu_lo, pu_hi, pv_lo, pv_hi = u_c - ru, u_c + ru, v_c - rv, v_c + rv
    else:
        ring = np.column_stack([center[0] + a * _RING[:, 0], center[1] + a * _RING[:, 1], np.zeros(len(_RING))])
        pc = (ring - pose.position) @ pose.rotation
        if np.any(pc[:, 2] <= 0):
            return None
        pu = k.fx * pc[:, 0] / pc[:, 2] + k.cx
        pv = k.fy * pc[:, 1] / pc[:, 2] + k.cy
        pu_lo, pu_hi, pv_lo, pv_hi = pu.min(), pu.max(), pv.min(), pv.max()
    u0 = max(0, int(math.floor(pu_lo)) - 1)
    u1 = min(k.width - 1, int(math.ceil(pu_hi)) + 1)
    v0 = max(0, int(math.floor(pv_lo)) - 1)
    v1 = min(k.height - 1, int(math.ceil(pv_hi)) + 1)
    if u0 > u1 or v0 > v1:
        return None
    d = dirs[v0:v1 + 1, u0:u1 + 1] @ pose.rotation.T
    t = -pose.position[2] / d[..., 2]
    gx = pose.position[0] + t * d[..., 0] - center[0]
    gy = pose.position[1] + t * d[..., 1] - center[1]
    c, s = math.cos(angle), math.sin(angle)
    qx, qy = c * gx + s * gy, -s * gx + c * gy
    inside = (t > 0) & ((qx / a) ** 2 + (qy / b) ** 2 <= 1.0)
    vs, us = np.nonzero(inside)
    return us + u0, vs + v0


def _cylinder_pixels(pose: CameraPose, k: CameraIntrinsics, dirs, center, radius, height):
    """Pixels whose ray meets a vertical cylinder before the ground."""
    d = dirs.reshape(-1, 3) @ pose.rotation.T
    o = pose.position
    ox, oy = o[0] - center[0], o[1] - center[1]
    qa = d[:, 0] ** 2 + d[:, 1] ** 2
    qb = 2 * (ox * d[:, 0] + oy * d[:, 1])
    qc = ox * ox + oy * oy - radius * radius
    disc = qb * qb - 4 * qa * qc
    ok = (disc >= 0) & (qa > 0)
    t = np.full(len(d), np.inf)
    t[ok] = (-qb[ok] - np.sqrt(disc[ok])) / (2 * qa[ok])
    z = o[2] + t * d[:, 2]
    hit = ok & (t > 0) & (z >= 0) & (z <= height)
    flat = np.flatnonzero(hit)
    return flat % k.width, flat // k.width


def _stats(rng, color, sigma):
    mean = np.clip(np.asarray(color) + rng.normal(size=3) * sigma, 0.0, 1.0)
    var = np.full(3, 0.002) + np.abs(rng.normal(size=3)) * sigma * 0.1
    return ImageStats(tuple(float(x) for x in mean), tuple(float(x) for x in var))


def _pose_cov(noise: NoiseModel) -> np.ndarray:
    h = noise.horizontal_variance
    return np.diag([h, h, 1e-6, 1e-8, 1e-8, 1e-8])


def simulate_deployment(world: GroundTruth, season: int, noise: NoiseModel | None = None,
                        trajectory: Lawnmower | None = None, *, plots=None,
                        label_masks: bool = True, seed: int | None = None,
                        octree_params: OctreeParams | None = None) -> Deployment:
    """One survey of the plots in ``plots`` (all by default) in ``season``.

    Every plot is simulated from its own RNG substream keyed by
    ``(seed, season, plot index)``, so a subset of plots sees exactly the
    same poses and detections as the full survey.
    """
    if not 0 <= season < world.n_seasons:
        raise InvalidConfig(f"season {season} outside 0..{world.n_seasons - 1}")
    noise = noise or NoiseModel()
    traj = trajectory or Lawnmower()
    seed = world.config.rng_seed if seed is None else seed
    keep = [p for p in world.plots if plots is None or p.plot_id in set(plots)]
    sid = session_id_for(world, season)
    flat = _Footprints(world, season, {p.plot_id for p in keep})
    shrubs = [s for s in world.shrubs if s.plot_id in {p.plot_id for p in keep}]
    dirs_down, dirs_front = _pixel_dirs(DOWN), _pixel_dirs(FRONT)
    half_diag = math.hypot(DOWN.width, DOWN.height) / 2 / DOWN.fx * traj.height
    cov = _pose_cov(noise)

    frames: list[FrameRecord] = []
    masks: list[SegmentMask] = []
    source: dict[str, str] = {}
    errors: dict[str, np.ndarray] = {}
    scans: list[tuple[np.ndarray, np.ndarray]] = []
    clock = 0.0
    plot_index = {p.plot_id: i for i, p in enumerate(world.plots)}

    for plot in keep:
        pi = plot_index[plot.plot_id]
        rng_pose = np.random.default_rng([seed, season, pi, _POSE])
        rng_det = np.random.default_rng([seed, season, pi, _DETECT])
        rng_fp = np.random.default_rng([seed, season, pi, _FALSE])
        plot_err = rng_pose.normal(size=2) * noise.effective_sigma
        plot_shrubs = [s for s in shrubs if s.plot_id == plot.plot_id]
        for r, y in enumerate(traj.rows(plot.size)):
            row_err = plot_err + rng_pose.normal(size=2) * noise.row_sigma
            cols = traj.columns(plot.size)
            yaw = 0.0 if r % 2 == 0 else math.pi
            order = cols if r % 2 == 0 else cols[::-1]
            for c, x in enumerate(order):
                fid = f"{sid}-{plot.plot_id}-r{r:02d}-c{c:02d}"
                e = _truncate(row_err + rng_pose.normal(size=2) * noise.jitter_sigma, noise.pose_noise_max)
                true_pos = np.array([plot.x0 + x, plot.y0 + y, traj.height])
                true_pose = CameraPose.nadir(true_pos, yaw)
                reported = CameraPose.nadir(true_pos + [e[0], e[1], 0.0], yaw, cov)
                frames.append(FrameRecord(fid, clock, "down", reported, plot.plot_id))
                errors[fid] = e
                clock += traj.frame_period
                j = 0
                for idx in flat.near(true_pos[:2], half_diag):
                    oid, label, center, a, b, ang, color, is_plant = flat.items[idx]
                    if is_plant and noise.detection_miss_rate > 0 and rng_det.random() < noise.detection_miss_rate:
                        continue
                    pix = _ellipse_pixels(true_pose, DOWN, dirs_down, center, a, b, ang)
                    if pix is None or len(pix[0]) == 0:
                        continue
                    mid = f"{fid}:{j:03d}"
                    masks.append(SegmentMask.from_pixels(
                        fid, pix[0], pix[1], DOWN.width, DOWN.height,
                        class_label=label if label_masks else None, confidence=1.0 if label_masks else 0.0,
                        stats=_stats(rng_det, color, noise.descriptor_noise_sigma), mask_id=mid))
                    source[mid] = oid
                    j += 1
                for _ in range(rng_fp.poisson(noise.false_positive_rate) if noise.false_positive_rate else 0):
                    center = true_pos[:2] + rng_fp.uniform(-0.6, 0.6, size=2)
                    rad = float(rng_fp.uniform(0.03, 0.06))
                    pix = _ellipse_pixels(true_pose, DOWN, dirs_down, center, rad, rad, 0.0)
                    if pix is None or len(pix[0]) == 0:
                        continue
                    mid = f"{fid}:{j:03d}"
                    masks.append(SegmentMask.from_pixels(
                        fid, pix[0], pix[1], DOWN.width, DOWN.height,
                        class_label="vegetation" if label_masks else None, confidence=1.0 if label_masks else 0.0,
                        stats=_stats(rng_fp, (0.33, 0.54, 0.26), 0.03), mask_id=mid))
                    source[mid] = FALSE_SOURCE
                    j += 1
            if plot_shrubs:
                # front camera at the east end of the row, looking east
                fid = f"{sid}-{plot.plot_id}-r{r:02d}-front"
                e = _truncate(row_err + rng_pose.normal(size=2) * noise.jitter_sigma, noise.pose_noise_max)
                true_pos = np.array([plot.x0 + cols[-1], plot.y0 + y, traj.front_height])
                true_pose = CameraPose.forward(true_pos, 0.0)
                reported = CameraPose.forward(true_pos + [e[0], e[1], 0.0], 0.0, cov)
                frames.append(FrameRecord(fid, clock, "front", reported, plot.plot_id))
                errors[fid] = e
                clock += traj.frame_period
                for j, sh in enumerate(plot_shrubs):
                    us, vs = _cylinder_pixels(true_pose, FRONT, dirs_front, sh.position, sh.radius, sh.height)
                    if len(us) == 0:
                        continue
                    mid = f"{fid}:{j:03d}"
                    masks.append(SegmentMask.from_pixels(
                        fid, us, vs, FRONT.width, FRONT.height,
                        class_label="shrub" if label_masks else None, confidence=1.0 if label_masks else 0.0,
                        stats=_stats(rng_det, SHRUB_COLOR, noise.descriptor_noise_sigma), mask_id=mid))
                    source[mid] = sh.shrub_id
                    pts = _shrub_scan(true_pos, sh) + [e[0], e[1], 0.0]
                    scans.append((reported.position, pts))

    octree = _build_octree(world, keep, scans, octree_params) if scans else None
    session = Session(sid, world.config.season_tags[season], float(season), world.frame,
                      {"down": DOWN, "front": FRONT}, frames, masks, 0.0, octree)
    return Deployment(session, SessionTruth(sid, season, source, errors))


def _shrub_scan(origin, shrub, step: float = 0.04) -> np.ndarray:
    """Height-field style samples of the shrub surface facing ``origin``."""
    to_cam = np.arctan2(origin[1] - shrub.position[1], origin[0] - shrub.position[0])
    angles = to_cam + np.linspace(-math.pi / 2, math.pi / 2, 13)
    zs = np.arange(step / 2, shrub.height, step)
    pts = [(shrub.position[0] + shrub.radius * math.cos(a), shrub.position[1] + shrub.radius * math.sin(a), z)
           for z in zs for a in angles]
    return np.array(pts)


def _build_octree(world: GroundTruth, plots, scans, params: OctreeParams | None = None) -> OccupancyOctree:
    lo = (min(p.x0 for p in plots), min(p.y0 for p in plots), -1.0)
    hi = (max(p.x0 + p.size for p in plots) + world.config.plot_gap, max(p.y0 + p.size for p in plots), 3.0)
    extent = max(h - l for l, h in zip(lo, hi)) + 4.0
    params = params or OctreeParams()
    depth = max(1, math.ceil(math.log2(extent / params.resolution)))
    tree = OccupancyOctree.for_region(lo, hi, margin=2.0, params=replace(params, max_depth=depth))
    for origin, pts in scans:
        tree.insert_scan(origin, pts)
    return tree
