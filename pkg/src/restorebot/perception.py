"""From labelled segmentation masks to geo-referenced landmark observations.

Pixel coordinates are ``(u, v)`` = (column, row) with pixel centres on
integers.  Camera axes follow the usual pinhole convention: x right, y down,
z along the optical axis.  No lens distortion is modelled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import EmptyMask, NoGroundIntersection, NoHit, OutOfImage
from .geo import LocalFrame, LocalPoint, GeoCoordinate, local_to_geo
from .octree import OccupancyOctree, Ray

CLASS_LABELS = ("vegetation", "litter", "crack", "dip", "conmod", "shrub", "other")

DESCRIPTOR_FIELDS = (
    "area_m2",
    "color_r", "color_g", "color_b",
    "var_r", "var_g", "var_b",
    "elongation",
    "orientation",
    "perimeter_per_area",
)
DESCRIPTOR_LENGTH = len(DESCRIPTOR_FIELDS)


# -- camera model --------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def contains(self, u: float, v: float) -> bool:
        return -0.5 <= u <= self.width - 0.5 and -0.5 <= v <= self.height - 0.5


def _skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rotation_about_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# camera x -> east, camera y -> south, optical axis -> down
NADIR = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
# camera x -> south, camera y -> down, optical axis -> east
FORWARD = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


_EYE3 = np.eye(3)


@dataclass
class CameraPose:
    """Camera-to-local rigid transform.

    ``covariance`` is 6x6 over (position east/north/up, small rotation about
    the local east/north/up axes), in m^2 and rad^2.
    """
    position: np.ndarray
    rotation: np.ndarray
    covariance: np.ndarray | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        r = self.rotation
        if np.abs(r.T @ r - _EYE3).max() > 1e-9:
            raise ValueError("rotation must be orthonormal")
        (a, b, c), (d, e, f), (g, h, i) = r.tolist()
        if a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g) < 0:
            raise ValueError("rotation must have determinant +1")
        if self.covariance is not None:
            self.covariance = np.asarray(self.covariance, dtype=float).reshape(6, 6)

    @classmethod
    def nadir(cls, position, yaw: float = 0.0, covariance=None) -> "CameraPose":
        """Down-facing camera; ``yaw`` rotates the image x axis away from east."""
        return cls(position, rotation_about_z(yaw) @ NADIR, covariance)

    @classmethod
    def forward(cls, position, yaw: float = 0.0, covariance=None) -> "CameraPose":
        """Front-facing camera looking along ``yaw`` (0 = east)."""
        return cls(position, rotation_about_z(yaw) @ FORWARD, covariance)

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2]

    def project(self, k: CameraIntrinsics, point) -> tuple[float, float] | None:
        """Pixel of a local point, or None when it lies behind the camera."""
        pc = self.rotation.T @ (np.asarray(point, dtype=float) - self.position)
        if pc[2] <= 0:
            return None
        return (k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy)


def pixel_to_ray(k: CameraIntrinsics, pose: CameraPose, px) -> Ray:
    u, v = float(px[0]), float(px[1])
    if not k.contains(u, v):
        raise OutOfImage(f"pixel ({u:.2f}, {v:.2f}) outside {k.width}x{k.height} image")
    d_cam = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    d = pose.rotation @ d_cam
    return Ray(tuple(pose.position), tuple(d / np.linalg.norm(d)))


# -- masks ---------------------------------------------------------------------

@dataclass(frozen=True)
class ImageStats:
    """Per-mask colour summary (RGB in [0, 1])."""
    color_mean: tuple[float, float, float]
    color_var: tuple[float, float, float]


@dataclass
class SegmentMask:
    """Binary mask stored as row-major ``(value, length)`` runs over the image."""
    frame_id: str
    runs: list[tuple[int, int]]
    width: int
    height: int
    class_label: str | None = None
    confidence: float = 0.0
    stats: ImageStats | None = None
    mask_id: str = ""
    _crop: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.class_label is not None and self.class_label not in CLASS_LABELS:
            raise ValueError(f"unknown class label {self.class_label!r}")
        total = sum(length for _, length in self.runs)
        if total != self.width * self.height:
            raise ValueError(f"runs cover {total} pixels, image has {self.width * self.height}")

    @classmethod
    def from_pixels(cls, frame_id, us, vs, width, height, **kw) -> "SegmentMask":
        flat = np.unique(np.asarray(vs, dtype=np.int64) * width + np.asarray(us, dtype=np.int64))
        if flat.size and (flat[0] < 0 or flat[-1] >= width * height):
            raise OutOfImage("mask pixels outside the image")
        m = cls(frame_id, encode_runs(flat, width * height), width, height, **kw)
        if flat.size:
            m._crop = _crop_of(flat, width)
        return m

    def flat_indices(self) -> np.ndarray:
        runs = np.asarray(self.runs, dtype=np.int64).reshape(-1, 2)
        if runs.size == 0:
            return np.empty(0, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(runs[:, 1])[:-1]])
        on = runs[:, 0] != 0
        if not on.any():
            return np.empty(0, dtype=np.int64)
        s, n = starts[on], runs[on, 1]
        # arange per run, done as one cumulative sum
        steps = np.ones(int(n.sum()), dtype=np.int64)
        heads = np.concatenate([[0], np.cumsum(n)[:-1]])
        steps[heads] = s - np.concatenate([[0], (s + n - 1)[:-1]])
        steps[0] = s[0]
        return np.cumsum(steps)

    def pixels(self) -> tuple[np.ndarray, np.ndarray]:
        flat = self.flat_indices()
        return flat % self.width, flat // self.width

    @property
    def area_px(self) -> int:
        return int(sum(length for value, length in self.runs if value))

    def crop(self):
        """``(u0, v0, grid)`` with ``grid[v - v0, u - u0]`` true inside the mask."""
        if self._crop is None:
            flat = self.flat_indices()
            if flat.size == 0:
                raise EmptyMask(f"mask {self.mask_id or self.frame_id} is empty")
            self._crop = _crop_of(flat, self.width)
        return self._crop

    def touches_border(self) -> bool:
        u0, v0, grid = self.crop()
        return u0 == 0 or v0 == 0 or u0 + grid.shape[1] == self.width or v0 + grid.shape[0] == self.height


def _crop_of(flat: np.ndarray, width: int):
    us, vs = flat % width, flat // width
    u0, v0 = int(us.min()), int(vs.min())
    grid = np.zeros((int(vs.max()) - v0 + 1, int(us.max()) - u0 + 1), dtype=bool)
    grid[vs - v0, us - u0] = True
    return u0, v0, grid


def encode_runs(flat_sorted: np.ndarray, total: int) -> list[tuple[int, int]]:
    """Run-length encode sorted unique flat indices over ``total`` pixels."""
    flat = np.asarray(flat_sorted, dtype=np.int64)
    if flat.size == 0:
        return [(0, total)]
    breaks = np.flatnonzero(np.diff(flat) != 1)
    starts = np.concatenate([[flat[0]], flat[breaks + 1]])
    ends = np.concatenate([flat[breaks] + 1, [flat[-1] + 1]])
    gaps = starts - np.concatenate([[0], ends[:-1]])
    runs = [r for g, n in zip(gaps.tolist(), (ends - starts).tolist()) for r in ((0, g), (1, n))]
    if runs[0][1] == 0:   # only the leading gap can be empty
        del runs[0]
    if ends[-1] < total:
        runs.append((0, total - int(ends[-1])))
    return runs


@dataclass(frozen=True)
class CentroidBox:
    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]  # u_min, u_max, v_min, v_max (inclusive)


def mask_centroid_bbox(m: SegmentMask) -> CentroidBox:
    u0, v0, grid = m.crop()
    vs, us = np.nonzero(grid)
    return CentroidBox(
        (float(us.mean() + u0), float(vs.mean() + v0)),
        (u0, u0 + grid.shape[1] - 1, v0, v0 + grid.shape[0] - 1),
    )


def _shape_moments(grid):
    vs, us = np.nonzero(grid)
    n = len(us)
    du = us - us.sum() / n
    dv = vs - vs.sum() / n
    # each pixel is a unit square: add its own second moment
    cuu = float(du @ du) / n + 1.0 / 12.0
    cvv = float(dv @ dv) / n + 1.0 / 12.0
    cuv = float(du @ dv) / n
    return cuu, cvv, cuv


def _perimeter_px(grid) -> int:
    """Count of pixel edges between the mask and the outside."""
    inner = np.count_nonzero(grid[1:] != grid[:-1]) + np.count_nonzero(grid[:, 1:] != grid[:, :-1])
    border = (np.count_nonzero(grid[0]) + np.count_nonzero(grid[-1])
              + np.count_nonzero(grid[:, 0]) + np.count_nonzero(grid[:, -1]))
    return int(inner + border)


def compute_descriptor(m: SegmentMask, image_stats: ImageStats | None,
                       meters_per_pixel: float, area_scale: float = 1.0) -> np.ndarray:
    """Fixed-length appearance descriptor, ordered as ``DESCRIPTOR_FIELDS``.

    ``meters_per_pixel`` converts pixel lengths to metres at the landmark;
    ``area_scale`` corrects area for surface tilt.  Elongation is the ratio
    of principal standard deviations (1 for a square) and orientation is the
    major axis angle in image axes, in [0, pi).
    """
    _, _, grid = m.crop()
    stats = image_stats or m.stats or ImageStats((0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    n = int(grid.sum())
    area = n * meters_per_pixel ** 2 * area_scale
    cuu, cvv, cuv = _shape_moments(grid)
    tr, det = cuu + cvv, cuu * cvv - cuv * cuv
    disc = math.sqrt(max(0.0, tr * tr / 4 - det))
    lam_max, lam_min = tr / 2 + disc, tr / 2 - disc
    elongation = math.sqrt(lam_max / lam_min)
    orientation = 0.0 if disc < 1e-12 else (0.5 * math.atan2(2 * cuv, cuu - cvv)) % math.pi
    perimeter = _perimeter_px(grid) * meters_per_pixel
    return np.array([
        area,
        *stats.color_mean,
        *stats.color_var,
        elongation,
        orientation,
        perimeter / area if area > 0 else 0.0,
    ], dtype=float)


# -- classification ------------------------------------------------------------

class MaskClassifier(Protocol):
    def __call__(self, descriptor: np.ndarray) -> tuple[str, float]: ...


@dataclass
class HeuristicClassifier:
    """Colour/shape rules standing in for a trained mask classifier."""
    min_vegetation_area: float = 0.0005
    shrub_area: float = 0.25
    crack_elongation: float = 5.0
    dark_brightness: float = 0.35
    conmod_area: tuple[float, float] = (0.03, 0.15)

    def __call__(self, descriptor: np.ndarray) -> tuple[str, float]:
        area = descriptor[0]
        r, g, b = descriptor[1:4]
        elong = descriptor[7]
        brightness = (r + g + b) / 3.0
        chroma = max(r, g, b) - min(r, g, b)
        if g > r and g > b and g - max(r, b) > 0.05 and area > self.min_vegetation_area:
            return ("shrub", 0.8) if area >= self.shrub_area else ("vegetation", 0.9)
        if r > g > b and chroma > 0.15:
            return "litter", 0.75
        if brightness < self.dark_brightness:
            if elong > self.crack_elongation:
                return "crack", 0.85
            return "dip", 0.7
        if chroma < 0.12 and brightness > 0.5 and self.conmod_area[0] <= area <= self.conmod_area[1]:
            return "conmod", 0.9
        return "other", 0.0


def classify_mask(m: SegmentMask, descriptor: np.ndarray,
                  classifier: MaskClassifier | Callable | None = None) -> tuple[str, float]:
    """Label a mask; anything the classifier cannot place becomes ("other", 0)."""
    clf = classifier or HeuristicClassifier()
    try:
        label, conf = clf(descriptor)
    except Exception:
        return "other", 0.0
    if label not in CLASS_LABELS:
        return "other", 0.0
    return label, float(min(1.0, max(0.0, conf)))


# -- projection ----------------------------------------------------------------

@dataclass
class LandmarkObservation:
    position: np.ndarray
    position_covariance: np.ndarray
    class_label: str
    descriptor: np.ndarray
    timestamp: float
    frame_id: str
    geo: GeoCoordinate | None = None
    mask_id: str = ""
    confidence: float = 1.0

    @property
    def local(self) -> LocalPoint:
        return LocalPoint(*map(float, self.position))


@dataclass
class ProjectionNoise:
    """Extra uncertainty folded into projected positions."""
    ground_height_sigma: float = 0.05  # microsite relief, m
    pixel_sigma: float = 0.5           # centroid uncertainty, px


def ground_intersection(origin, direction, ground_height: float):
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    if d[2] >= -1e-12:
        raise NoGroundIntersection("ray does not descend toward the ground plane")
    t = (ground_height - o[2]) / d[2]
    if t <= 0:
        raise NoGroundIntersection("camera is below the ground plane")
    return o + t * d, t


def _label_of(m: SegmentMask, descriptor, classifier):
    if m.class_label is not None:
        return m.class_label, m.confidence
    return classify_mask(m, descriptor, classifier)


def _geo(frame, p):
    return None if frame is None else local_to_geo(frame, LocalPoint(*map(float, p)))


def project_down_facing(m: SegmentMask, k: CameraIntrinsics, pose: CameraPose,
                        ground_height: float, *, timestamp: float = 0.0,
                        frame: LocalFrame | None = None,
                        noise: ProjectionNoise | None = None,
                        classifier=None) -> LandmarkObservation:
    """Intersect the centroid ray with the plane ``up = ground_height``.

    Position covariance is the first-order propagation of the pose
    covariance, ground relief and centroid pixel noise through the
    intersection.
    """
    noise = noise or ProjectionNoise()
    cb = mask_centroid_bbox(m)
    ray = pixel_to_ray(k, pose, cb.centroid)
    d = np.array(ray.direction)
    p, t = ground_intersection(ray.origin, d, ground_height)

    # dp/dd for fixed height: t (I - d e_z^T / d_z)
    proj = np.eye(3) - np.outer(d, [0.0, 0.0, 1.0]) / d[2]
    j_pos = proj                      # camera position
    j_rot = t * proj @ (-_skew(d))    # small rotation in the local frame
    j_h = d / d[2]                    # ground height
    cov = np.zeros((3, 3))
    if pose.covariance is not None:
        j = np.hstack([j_pos, j_rot])
        cov += j @ pose.covariance @ j.T
    cov += noise.ground_height_sigma ** 2 * np.outer(j_h, j_h)
    # pixel noise: unnormalised camera ray moves by sigma/f per axis
    r = pose.rotation
    dn = np.linalg.norm(r.T @ d / (r.T @ d)[2])
    for axis, f in ((0, k.fx), (1, k.fy)):
        dd = r[:, axis] / f / dn
        dd = dd - d * (d @ dd)
        jp = t * proj @ dd
        cov += noise.pixel_sigma ** 2 * np.outer(jp, jp)
    cov = 0.5 * (cov + cov.T)

    depth = float((pose.rotation.T @ (p - pose.position))[2])
    mpp = depth / math.sqrt(k.fx * k.fy)
    tilt = abs(pose.optical_axis[2])
    desc = compute_descriptor(m, m.stats, mpp, 1.0 / tilt if tilt > 1e-9 else 1.0)
    label, conf = _label_of(m, desc, classifier)
    return LandmarkObservation(p, cov, label, desc, timestamp, m.frame_id,
                               _geo(frame, p), m.mask_id, conf)


def project_front_facing(m: SegmentMask, k: CameraIntrinsics, pose: CameraPose,
                         tree: OccupancyOctree, *, max_range: float = 20.0,
                         timestamp: float = 0.0, frame: LocalFrame | None = None,
                         classifier=None, depth_gate: float = 1.0) -> LandmarkObservation:
    """Localise a front-facing detection by ray casting into the octree.

    The centroid ray's first occupied voxel gives the position.  The four
    bounding-box corner rays bound the landmark's extent; a corner whose
    hit is missing or more than ``depth_gate`` metres beyond the centroid
    hit is replaced by its intersection with the fronto-parallel plane
    through the centroid hit.
    """
    cb = mask_centroid_bbox(m)
    ray = pixel_to_ray(k, pose, cb.centroid)
    hit = tree.raycast(ray, max_range)
    if hit is None:
        raise NoHit(f"centroid ray of {m.mask_id or m.frame_id} hit nothing within {max_range} m")
    p = np.array(tree.voxel_center(hit[0]).as_tuple())
    axis = pose.optical_axis
    depth = float(axis @ (p - pose.position))

    u_min, u_max, v_min, v_max = cb.bbox
    corners = []
    for u, v in ((u_min, v_min), (u_max, v_min), (u_min, v_max), (u_max, v_max)):
        cr = pixel_to_ray(k, pose, (u, v))
        ch = tree.raycast(cr, max_range)
        dvec = np.array(cr.direction)
        if ch is not None:
            cp = np.array(tree.voxel_center(ch[0]).as_tuple())
            if axis @ (cp - pose.position) <= depth + depth_gate:
                corners.append(cp)
                continue
        corners.append(pose.position + dvec * depth / (axis @ dvec))
    corners = np.array(corners)
    lateral = np.cross(axis, [0.0, 0.0, 1.0])
    lateral = lateral / np.linalg.norm(lateral) if np.linalg.norm(lateral) > 1e-9 else pose.rotation[:, 0]
    width = float(np.ptp(corners @ lateral))
    height = float(np.ptp(corners[:, 2]))

    mpp = depth / math.sqrt(k.fx * k.fy)
    desc = compute_descriptor(m, m.stats, mpp)
    if width > 0 and height > 0:
        desc[0] = width * height
    cov = np.eye(3) * tree.resolution ** 2 / 12.0
    if pose.covariance is not None:
        j_rot = -_skew(p - pose.position)
        j = np.hstack([np.eye(3), j_rot])
        cov = cov + j @ pose.covariance @ j.T
    label, conf = _label_of(m, desc, classifier)
    return LandmarkObservation(p, cov, label, desc, timestamp, m.frame_id,
                               _geo(frame, p), m.mask_id, conf)
