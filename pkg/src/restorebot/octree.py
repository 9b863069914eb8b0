"""Sparse log-odds occupancy octree with exact grid traversal.

Leaves sit at ``max_depth`` and hold clamped log-odds.  Every inner node
stores the maximum log-odds of its existing children, which lets ray casts
skip subtrees that contain no occupied voxel.  Node boxes are derived from
integer keys so that each child box is bit-exactly one octant of its parent.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import Iterable

from .geo import LocalPoint

Key = tuple[int, int, int]

_RECORD = struct.Struct("<B3id")
_MAGIC = "restorebot-octree"
_VERSION = 1


@dataclass
class OctreeParams:
    resolution: float = 0.15
    max_depth: int = 16
    hit: float = 0.85
    miss: float = -0.4
    clamp_min: float = -2.0
    clamp_max: float = 3.5
    carve_free_space: bool = True

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if not 1 <= self.max_depth <= 30:
            raise ValueError("max_depth must lie in [1, 30]")
        if not self.clamp_min < 0 < self.clamp_max:
            raise ValueError("clamp interval must straddle zero")


@dataclass(frozen=True)
class Aabb:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        if any(lo > hi for lo, hi in zip(self.min, self.max)):
            raise ValueError("Aabb min must be <= max componentwise")

    def contains(self, p) -> bool:
        return all(lo <= v <= hi for lo, v, hi in zip(self.min, p, self.max))


@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]

    def __post_init__(self):
        d = tuple(float(v) for v in self.direction)
        n = math.sqrt(sum(v * v for v in d))
        if not n > 0 or not math.isfinite(n):
            raise ValueError("ray direction must be a non-zero finite vector")
        if abs(n - 1.0) > 1e-12:
            d = tuple(v / n for v in d)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @classmethod
    def through(cls, origin, target) -> "Ray":
        return cls(tuple(origin), tuple(t - o for t, o in zip(target, origin)))

    def at(self, t: float) -> tuple[float, float, float]:
        return tuple(o + t * d for o, d in zip(self.origin, self.direction))


def _slab(origin, direction, lo, hi):
    t0, t1 = 0.0, math.inf
    for axis in range(3):
        o, d = origin[axis], direction[axis]
        if d == 0.0:
            if o < lo[axis] or o > hi[axis]:
                return None
            continue
        inv = 1.0 / d
        ta = (lo[axis] - o) * inv
        tb = (hi[axis] - o) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return None
    return t0, t1


def ray_box_intersect(r: Ray, b: Aabb) -> tuple[float, float] | None:
    """Slab test on the closed box; returns ``(t_enter, t_exit)`` with
    ``0 <= t_enter <= t_exit`` or None on a miss.  Axis-parallel rays are
    handled without dividing by zero."""
    return _slab(r.origin, r.direction, b.min, b.max)


def probability(log_odds: float) -> float:
    return 1.0 / (1.0 + math.exp(-log_odds))


@dataclass(frozen=True)
class Occupancy:
    probability: float
    state: str  # "occupied" | "free" | "unknown"


class OccupancyOctree:
    """Occupancy octree over the cube anchored at ``bounds.min``.

    The cube has edge ``resolution * 2**max_depth``; ``bounds`` is the mapped
    region and must fit inside it.  Insertion is single-writer; queries and
    ray casts do not mutate the tree.
    """

    def __init__(self, bounds: Aabb, params: OctreeParams | None = None):
        self.params = params or OctreeParams()
        self.bounds = bounds
        self.resolution = self.params.resolution
        self.max_depth = self.params.max_depth
        self.size = self.resolution * (1 << self.max_depth)
        extent = max(hi - lo for lo, hi in zip(bounds.min, bounds.max))
        if extent > self.size:
            raise ValueError(
                f"bounds extent {extent:.2f} m exceeds octree cube {self.size:.2f} m; raise max_depth"
            )
        self._origin = tuple(float(v) for v in bounds.min)
        # _levels[d] maps key -> log-odds (leaves) or max child log-odds (inner)
        self._levels: list[dict[Key, float]] = [dict() for _ in range(self.max_depth + 1)]

    @classmethod
    def for_region(cls, lo, hi, margin: float = 5.0, params: OctreeParams | None = None):
        """Tree covering ``[lo, hi]`` plus ``margin`` metres on every side."""
        lo = tuple(v - margin for v in lo)
        hi = tuple(v + margin for v in hi)
        return cls(Aabb(lo, hi), params)

    # -- geometry -------------------------------------------------------------

    def cell(self, depth: int) -> float:
        return self.resolution * (1 << (self.max_depth - depth))

    def node_box(self, depth: int, key: Key) -> Aabb:
        c = self.cell(depth)
        o = self._origin
        return Aabb(
            tuple(o[i] + key[i] * c for i in range(3)),
            tuple(o[i] + (key[i] + 1) * c for i in range(3)),
        )

    def _box(self, depth, key):
        c = self.cell(depth)
        o = self._origin
        lo = (o[0] + key[0] * c, o[1] + key[1] * c, o[2] + key[2] * c)
        hi = (o[0] + (key[0] + 1) * c, o[1] + (key[1] + 1) * c, o[2] + (key[2] + 1) * c)
        return lo, hi

    def key_of(self, p) -> Key | None:
        if not self.bounds.contains(p):
            return None
        n = 1 << self.max_depth
        key = tuple(min(n - 1, int(math.floor((p[i] - self._origin[i]) / self.resolution))) for i in range(3))
        return key

    def voxel_center(self, key: Key) -> LocalPoint:
        r = self.resolution
        return LocalPoint(*(self._origin[i] + (key[i] + 0.5) * r for i in range(3)))

    # -- access ---------------------------------------------------------------

    def log_odds(self, key: Key) -> float | None:
        return self._levels[self.max_depth].get(key)

    def leaves(self) -> dict[Key, float]:
        return dict(self._levels[self.max_depth])

    def __len__(self) -> int:
        return len(self._levels[self.max_depth])

    def nodes(self) -> Iterable[tuple[int, Key, float]]:
        """All stored nodes as ``(depth, key, value)`` in a canonical order."""
        for d, level in enumerate(self._levels):
            for key in sorted(level):
                yield d, key, level[key]

    def query_occupancy(self, p) -> Occupancy:
        key = self.key_of(tuple(p))
        if key is None:
            return Occupancy(0.5, "unknown")
        lo = self._levels[self.max_depth].get(key)
        if lo is None:
            return Occupancy(0.5, "unknown")
        prob = probability(lo)
        return Occupancy(prob, "occupied" if prob > 0.5 else "free")

    # -- updates --------------------------------------------------------------

    def _apply(self, deltas: dict[Key, float]) -> None:
        p = self.params
        leaves = self._levels[self.max_depth]
        for key, delta in deltas.items():
            v = leaves.get(key, 0.0) + delta
            leaves[key] = min(p.clamp_max, max(p.clamp_min, v))
        self._refresh_ancestors(deltas.keys())

    def _refresh_ancestors(self, keys) -> None:
        dirty = set(keys)
        for d in range(self.max_depth - 1, -1, -1):
            parents = {(k[0] >> 1, k[1] >> 1, k[2] >> 1) for k in dirty}
            child_level = self._levels[d + 1]
            level = self._levels[d]
            for pk in parents:
                best = None
                for dx in (0, 1):
                    for dy in (0, 1):
                        for dz in (0, 1):
                            v = child_level.get((2 * pk[0] + dx, 2 * pk[1] + dy, 2 * pk[2] + dz))
                            if v is not None and (best is None or v > best):
                                best = v
                if best is None:
                    level.pop(pk, None)
                else:
                    level[pk] = best
            dirty = parents

    def set_log_odds(self, key: Key, value: float) -> None:
        """Directly set one leaf (clamped); used for synthetic worlds and loading."""
        p = self.params
        self._levels[self.max_depth][key] = min(p.clamp_max, max(p.clamp_min, value))
        self._refresh_ancestors([key])

    def insert_scan(self, sensor_origin, points) -> None:
        """Integrate one scan taken from ``sensor_origin``.

        Each endpoint voxel gets one hit update and every voxel traversed on
        the way gets one miss update; a voxel both hit and traversed in the
        same scan counts as hit.  Points outside the bounds are clipped to the
        bound surface and contribute free space only.
        """
        hits: set[Key] = set()
        free: set[Key] = set()
        origin = tuple(float(v) for v in sensor_origin)
        for pt in points:
            pt = tuple(float(v) for v in pt)
            inside = self.bounds.contains(pt)
            if inside:
                hits.add(self.key_of(pt))
            if not self.params.carve_free_space:
                continue
            seg = self._clip_segment(origin, pt)
            if seg is None:
                continue
            start, end = seg
            path = self._traverse(start, end)
            if inside and path:
                path = path[:-1]  # endpoint voxel is the hit
            free.update(path)
        free -= hits
        deltas = {k: self.params.hit for k in hits}
        deltas.update({k: self.params.miss for k in free})
        if deltas:
            self._apply(deltas)

    def _clip_segment(self, a, b):
        length = math.dist(a, b)
        if length == 0.0:
            return None
        r = Ray(a, tuple(bi - ai for ai, bi in zip(a, b)))
        iv = _slab(r.origin, r.direction, self.bounds.min, self.bounds.max)
        if iv is None or iv[0] > length:
            return None
        t0, t1 = iv[0], min(iv[1], length)
        return r.at(t0), r.at(t1)

    def _traverse(self, a, b) -> list[Key]:
        """Voxels crossed by segment a->b, in order (3D DDA).

        When the segment passes exactly through an edge or corner the voxel
        with the smallest (x, y, z) index among the candidates is entered.
        """
        res = self.resolution
        n = 1 << self.max_depth
        o = self._origin
        key = list(self.key_of(a) or ())
        end = self.key_of(b)
        if not key or end is None:
            return []
        d = [b[i] - a[i] for i in range(3)]
        step = [0, 0, 0]
        t_max = [math.inf] * 3
        t_delta = [math.inf] * 3
        for i in range(3):
            if d[i] > 0:
                step[i] = 1
                t_max[i] = (o[i] + (key[i] + 1) * res - a[i]) / d[i]
                t_delta[i] = res / d[i]
            elif d[i] < 0:
                step[i] = -1
                t_max[i] = (o[i] + key[i] * res - a[i]) / d[i]
                t_delta[i] = -res / d[i]
        out = [tuple(key)]
        budget = sum(abs(end[i] - key[i]) for i in range(3)) + 3
        while tuple(key) != end and budget > 0:
            budget -= 1
            t_next = min(t_max)
            if t_next > 1.0:
                break
            tied = [i for i in range(3) if t_max[i] == t_next]
            if len(tied) > 1:
                cands = []
                for i in tied:
                    c = list(key)
                    c[i] += step[i]
                    cands.append((tuple(c), i))
                axis = min(cands)[1]
            else:
                axis = tied[0]
            key[axis] += step[axis]
            t_max[axis] += t_delta[axis]
            if not 0 <= key[axis] < n:
                break
            out.append(tuple(key))
        return out

    # -- ray casting ----------------------------------------------------------

    def raycast(self, r: Ray, max_range: float) -> tuple[Key, float] | None:
        """First occupied leaf along ``r`` as ``(key, t_enter)``.

        Nodes are visited front to back; children are ordered by entry
        distance with ties broken by the smaller (x, y, z) index.  Subtrees
        whose max log-odds is not positive are skipped.
        """
        if max_range <= 0:
            raise ValueError("max_range must be positive")
        if not self._levels[0]:
            return None
        o, dvec = r.origin, r.direction
        leaf_depth = self.max_depth
        levels = self._levels

        def visit(depth, key, t_enter):
            if depth == leaf_depth:
                return key, t_enter
            child_level = levels[depth + 1]
            kids = []
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        ck = (2 * key[0] + dx, 2 * key[1] + dy, 2 * key[2] + dz)
                        v = child_level.get(ck)
                        if v is None or v <= 0.0:
                            continue
                        lo, hi = self._box(depth + 1, ck)
                        iv = _slab(o, dvec, lo, hi)
                        if iv is None or iv[0] > max_range:
                            continue
                        kids.append((iv[0], ck))
            kids.sort()
            for t0, ck in kids:
                found = visit(depth + 1, ck, t0)
                if found is not None:
                    return found
            return None

        root = (0, 0, 0)
        v = levels[0].get(root)
        if v is None or v <= 0.0:
            return None
        lo, hi = self._box(0, root)
        iv = _slab(o, dvec, lo, hi)
        if iv is None or iv[0] > max_range:
            return None
        return visit(0, root, iv[0])

    # -- serialization --------------------------------------------------------

    def dump(self) -> bytes:
        """Text header followed by little-endian ``(u8 depth, 3 x i32 key, f64 value)`` records."""
        records = list(self.nodes())
        b = self.bounds
        header = (
            f"{_MAGIC} {_VERSION}\n"
            f"resolution {self.resolution!r}\n"
            f"max_depth {self.max_depth}\n"
            f"bounds {' '.join(repr(float(v)) for v in (*b.min, *b.max))}\n"
            f"log_odds {self.params.hit!r} {self.params.miss!r} "
            f"{self.params.clamp_min!r} {self.params.clamp_max!r}\n"
            f"count {len(records)}\n"
            "end\n"
        )
        buf = io.BytesIO()
        buf.write(header.encode("utf-8"))
        for depth, key, value in records:
            buf.write(_RECORD.pack(depth, *key, value))
        return buf.getvalue()

    @classmethod
    def load(cls, data: bytes) -> "OccupancyOctree":
        from .errors import SchemaError

        stream = io.BytesIO(data)
        fields = {}
        first = stream.readline().decode("utf-8").split()
        if len(first) != 2 or first[0] != _MAGIC:
            raise SchemaError("not an octree dump")
        if int(first[1]) != _VERSION:
            raise SchemaError(f"unsupported octree dump version {first[1]}")
        while True:
            line = stream.readline().decode("utf-8").strip()
            if line == "end":
                break
            if not line:
                raise SchemaError("truncated octree header")
            name, *vals = line.split()
            fields[name] = vals
        res = float(fields["resolution"][0])
        depth = int(fields["max_depth"][0])
        hit, miss, cmin, cmax = map(float, fields["log_odds"])
        bvals = list(map(float, fields["bounds"]))
        tree = cls(Aabb(tuple(bvals[:3]), tuple(bvals[3:])),
                   OctreeParams(res, depth, hit, miss, cmin, cmax))
        count = int(fields["count"][0])
        for _ in range(count):
            raw = stream.read(_RECORD.size)
            if len(raw) != _RECORD.size:
                raise SchemaError("truncated octree records")
            d, kx, ky, kz, value = _RECORD.unpack(raw)
            tree._levels[d][(kx, ky, kz)] = value
        return tree


def raycast_first_occupied(tree: OccupancyOctree, r: Ray, max_range: float) -> LocalPoint | None:
    """Centre of the first occupied voxel along ``r`` within ``max_range``."""
    hit = tree.raycast(r, max_range)
    if hit is None:
        return None
    return tree.voxel_center(hit[0])


def insert_scan(tree: OccupancyOctree, sensor_origin, points) -> OccupancyOctree:
    tree.insert_scan(sensor_origin, points)
    return tree


def query_occupancy(tree: OccupancyOctree, p) -> Occupancy:
    return tree.query_occupancy(p)

