import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from restorebot.errors import SchemaError
from restorebot.octree import (
    Aabb, OccupancyOctree, OctreeParams, Ray,
    insert_scan, query_occupancy, ray_box_intersect, raycast_first_occupied,
)

import oracles

RES = 0.15


def small_tree(depth=6, **kw):
    return OccupancyOctree(Aabb((0.0, 0.0, 0.0), (RES * 2 ** depth,) * 3),
                           OctreeParams(resolution=RES, max_depth=depth, **kw))


def random_world(seed, depth=6, fraction=0.003):
    rng = np.random.default_rng(seed)
    tree = small_tree(depth)
    n = 2 ** depth
    occupied = set()
    for key in map(tuple, rng.integers(0, n, size=(int(fraction * n ** 3), 3))):
        key = tuple(int(k) for k in key)
        tree.set_log_odds(key, 1.0)
        occupied.add(key)
    # some free voxels too; they must never be returned
    for key in map(tuple, rng.integers(0, n, size=(200, 3))):
        key = tuple(int(k) for k in key)
        if key not in occupied:
            tree.set_log_odds(key, -1.0)
    return tree, occupied


# -- insertion and queries ---------------------------------------------------

def test_empty_scan_leaves_tree_unchanged():
    tree = small_tree()
    insert_scan(tree, (1.0, 1.0, 1.0), [])
    assert len(tree) == 0
    assert list(tree.nodes()) == []


def test_single_point_hit_and_free_path():
    tree = small_tree()
    origin = (1.0, 1.0, 1.0)
    target = (2.0, 1.0, 1.0)
    insert_scan(tree, origin, [target])
    assert query_occupancy(tree, target).probability > 0.5
    assert query_occupancy(tree, target).state == "occupied"
    for x in np.arange(1.0, 1.85, 0.05):
        occ = query_occupancy(tree, (x, 1.0, 1.0))
        assert occ.probability < 0.5 and occ.state == "free"


def test_repeated_hits_saturate():
    tree = small_tree()
    for _ in range(10):
        insert_scan(tree, (1.0, 1.0, 1.0), [(2.0, 1.0, 1.0)])
    assert tree.log_odds(tree.key_of((2.0, 1.0, 1.0))) == 3.5
    assert tree.log_odds(tree.key_of((1.5, 1.0, 1.0))) == -2.0


def test_untouched_is_unknown():
    tree = small_tree()
    assert query_occupancy(tree, (3.0, 3.0, 3.0)).state == "unknown"
    assert query_occupancy(tree, (-3.0, 3.0, 3.0)).state == "unknown"


def test_one_hit_probability():
    tree = small_tree(carve_free_space=False)
    insert_scan(tree, (0.1, 0.1, 0.1), [(2.0, 2.0, 2.0)])
    assert query_occupancy(tree, (2.0, 2.0, 2.0)).probability == pytest.approx(1 / (1 + math.exp(-0.85)), abs=1e-12)
    assert query_occupancy(tree, (2.0, 2.0, 2.0)).probability == pytest.approx(0.7006, abs=1e-4)


def test_hit_then_miss():
    tree = small_tree()
    insert_scan(tree, (1.0, 1.0, 1.0), [(2.0, 1.0, 1.0)])
    insert_scan(tree, (1.0, 1.0, 1.0), [(3.0, 1.0, 1.0)])
    key = tree.key_of((2.0, 1.0, 1.0))
    assert tree.log_odds(key) == pytest.approx(0.45, abs=1e-12)
    assert query_occupancy(tree, (2.0, 1.0, 1.0)).probability == pytest.approx(0.6106, abs=1e-4)


def test_out_of_bounds_point_is_free_only():
    tree = small_tree()
    insert_scan(tree, (1.0, 1.0, 1.0), [(50.0, 1.0, 1.0)])
    states = {query_occupancy(tree, (x, 1.0, 1.0)).state for x in np.arange(1.0, 9.5, 0.1)}
    assert states == {"free"}
    assert all(v < 0 for v in tree.leaves().values())


def test_carving_can_be_disabled():
    tree = small_tree(carve_free_space=False)
    insert_scan(tree, (1.0, 1.0, 1.0), [(2.0, 1.0, 1.0)])
    assert len(tree) == 1


def test_scan_order_invariance():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0.5, 9.0, size=(60, 3))
    a, b = small_tree(), small_tree()
    insert_scan(a, (4.0, 4.0, 4.0), pts)
    insert_scan(b, (4.0, 4.0, 4.0), pts[rng.permutation(len(pts))])
    assert a.leaves() == b.leaves()


def test_traversal_has_no_gaps():
    tree = small_tree()
    rng = np.random.default_rng(9)
    for _ in range(200):
        a = tuple(rng.uniform(0.1, 9.5, 3))
        b = tuple(rng.uniform(0.1, 9.5, 3))
        path = tree._traverse(a, b)
        assert path[0] == tree.key_of(a) and path[-1] == tree.key_of(b)
        for p, q in zip(path, path[1:]):
            assert sum(abs(x - y) for x, y in zip(p, q)) == 1


def test_corner_tie_enters_smallest_index():
    tree = small_tree()
    # passes exactly through the corner at (0.3, 0.3, z)
    path = tree._traverse((0.225, 0.225, 0.05), (0.375, 0.375, 0.05))
    assert path == [(1, 1, 0), (1, 2, 0), (2, 2, 0)]
    path = tree._traverse((0.375, 0.375, 0.05), (0.225, 0.225, 0.05))
    assert path == [(2, 2, 0), (1, 2, 0), (1, 1, 0)]


def test_hierarchical_containment_bit_exact():
    tree, _ = random_world(1, fraction=0.0005)
    for depth, key, _ in tree.nodes():
        if depth == tree.max_depth:
            continue
        parent = tree.node_box(depth, key)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    child = tree.node_box(depth + 1, (2 * key[0] + dx, 2 * key[1] + dy, 2 * key[2] + dz))
                    for i, off in enumerate((dx, dy, dz)):
                        if off == 0:
                            assert child.min[i] == parent.min[i]
                        else:
                            assert child.max[i] == parent.max[i]
        lower = tree.node_box(depth + 1, (2 * key[0], 2 * key[1], 2 * key[2]))
        upper = tree.node_box(depth + 1, (2 * key[0] + 1, 2 * key[1] + 1, 2 * key[2] + 1))
        assert lower.max == upper.min
        assert all(lo < mid < hi for lo, mid, hi in zip(parent.min, lower.max, parent.max))


def test_inner_nodes_hold_child_max():
    tree, _ = random_world(2, fraction=0.0005)
    levels = tree._levels
    for d in range(tree.max_depth):
        for key, v in levels[d].items():
            kids = [levels[d + 1].get((2 * key[0] + dx, 2 * key[1] + dy, 2 * key[2] + dz))
                    for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]
            assert v == max(k for k in kids if k is not None)


def test_log_odds_stay_clamped():
    tree = small_tree()
    rng = np.random.default_rng(0)
    for _ in range(20):
        insert_scan(tree, (4.0, 4.0, 1.0), rng.uniform(2.0, 6.0, size=(30, 3)))
    assert all(-2.0 <= v <= 3.5 for v in tree.leaves().values())


# -- ray/box -----------------------------------------------------------------

def test_ray_box_analytic():
    r = Ray((0.5, 0.5, 10.0), (0.0, 0.0, -1.0))
    assert ray_box_intersect(r, Aabb((0, 0, 0), (1, 1, 1))) == (9.0, 10.0)


def test_ray_parallel_outside_slab_misses():
    r = Ray((2.0, 0.5, 10.0), (0.0, 0.0, -1.0))
    assert ray_box_intersect(r, Aabb((0, 0, 0), (1, 1, 1))) is None


def test_ray_starting_inside():
    r = Ray((0.5, 0.5, 0.5), (1.0, 0.0, 0.0))
    assert ray_box_intersect(r, Aabb((0, 0, 0), (1, 1, 1))) == (0.0, 0.5)


def test_ray_pointing_away_misses():
    r = Ray((2.0, 0.5, 0.5), (1.0, 0.0, 0.0))
    assert ray_box_intersect(r, Aabb((0, 0, 0), (1, 1, 1))) is None


def test_ray_direction_normalized():
    r = Ray((0, 0, 0), (3.0, 4.0, 0.0))
    assert math.hypot(*r.direction) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        Ray((0, 0, 0), (0.0, 0.0, 0.0))


def random_ray_box_pairs(seed, n):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        lo = rng.uniform(-1, 1, 3)
        hi = lo + rng.uniform(0.2, 1.5, 3)
        o = rng.uniform(-3, 3, 3)
        target = rng.uniform(lo - 0.3, hi + 0.3)
        d = target - o
        if rng.random() < 0.1:
            d[rng.integers(3)] = 0.0  # axis-parallel component
        if not np.any(d):
            d = np.array([1.0, 0.0, 0.0])
        yield Ray(tuple(o), tuple(d)), Aabb(tuple(lo), tuple(hi))


def test_ray_box_matches_sampling_oracle():
    step = RES / 100
    for ray, box in random_ray_box_pairs(21, 1000):
        got = ray_box_intersect(ray, box)
        ref = oracles.sample_ray_box(ray.origin, ray.direction, box.min, box.max, step, 12.0)
        if got is None:
            assert ref is None
        elif ref is None:
            # chord shorter than the sampling step
            assert got[1] - got[0] < step
        else:
            assert got[0] == pytest.approx(ref[0], abs=step)
            assert got[1] == pytest.approx(ref[1], abs=step)


# -- raycasting --------------------------------------------------------------

def test_raycast_empty_tree_misses():
    tree = small_tree()
    assert raycast_first_occupied(tree, Ray((1, 1, 1), (1, 0, 0)), 5.0) is None


def test_raycast_single_voxel_ahead():
    tree = small_tree()
    key = tree.key_of((3.0, 1.0, 1.0))
    tree.set_log_odds(key, 2.0)
    hit = raycast_first_occupied(tree, Ray((1.0, 1.0, 1.0), (1, 0, 0)), 5.0)
    assert hit == tree.voxel_center(key)
    assert abs(hit.east - 3.0) <= RES


def test_raycast_respects_max_range():
    tree = small_tree()
    tree.set_log_odds(tree.key_of((3.0, 1.0, 1.0)), 2.0)
    assert raycast_first_occupied(tree, Ray((1.0, 1.0, 1.0), (1, 0, 0)), 1.5) is None


def test_raycast_ignores_free_voxels():
    tree = small_tree()
    tree.set_log_odds(tree.key_of((2.0, 1.0, 1.0)), -1.0)
    tree.set_log_odds(tree.key_of((3.0, 1.0, 1.0)), 1.0)
    hit = raycast_first_occupied(tree, Ray((1.0, 1.0, 1.0), (1, 0, 0)), 5.0)
    assert hit == tree.voxel_center(tree.key_of((3.0, 1.0, 1.0)))


def _random_rays(rng, n, extent):
    for _ in range(n):
        o = rng.uniform(0, extent, 3)
        d = rng.normal(size=3)
        yield Ray(tuple(o), tuple(d))


def test_raycast_matches_voxel_marching():
    step = RES / 1000
    for w in range(4):
        tree, occupied = random_world(w)
        rng = np.random.default_rng(100 + w)
        for ray in _random_rays(rng, 50, 64 * RES):
            hit = tree.raycast(ray, 10.0)
            ref = oracles.march_first_occupied(occupied, ray.origin, ray.direction, (0, 0, 0), RES, 10.0, step)
            assert (hit[0] if hit else None) == ref


def test_raycast_coarse_marching_only_misses_slivers():
    # at resolution/10 the marcher can step over voxels clipped for < one step
    step = RES / 10
    for w in range(4):
        tree, occupied = random_world(w)
        rng = np.random.default_rng(200 + w)
        for ray in _random_rays(rng, 50, 64 * RES):
            hit = tree.raycast(ray, 10.0)
            ref = oracles.march_first_occupied(occupied, ray.origin, ray.direction, (0, 0, 0), RES, 10.0, step)
            if (hit[0] if hit else None) != ref:
                box = tree.node_box(tree.max_depth, hit[0])
                t0, t1 = oracles.slab_interval(ray.origin, ray.direction, box.min, box.max)
                assert t1 - t0 < step


def test_raycast_is_order_consistent():
    tree, occupied = random_world(7)
    rng = np.random.default_rng(7)
    for ray in _random_rays(rng, 100, 64 * RES):
        hit = tree.raycast(ray, 20.0)
        entries = []
        for key in occupied:
            box = tree.node_box(tree.max_depth, key)
            iv = oracles.slab_interval(ray.origin, ray.direction, box.min, box.max)
            if iv is not None and iv[0] <= 20.0:
                entries.append((iv[0], key))
        if not entries:
            assert hit is None
            continue
        assert hit is not None
        assert hit[1] <= min(entries)[0] + 1e-12


# -- export ------------------------------------------------------------------

def test_dump_round_trip():
    tree, _ = random_world(3, fraction=0.001)
    data = tree.dump()
    header = data.split(b"end\n", 1)[0].decode()
    assert "resolution 0.15" in header and "count" in header
    back = OccupancyOctree.load(data)
    assert list(back.nodes()) == list(tree.nodes())
    assert back.bounds == tree.bounds
    assert back.resolution == tree.resolution


def test_dump_rejects_bad_version():
    data = small_tree().dump().replace(b"restorebot-octree 1", b"restorebot-octree 9")
    with pytest.raises(SchemaError):
        OccupancyOctree.load(data)


def test_bounds_must_fit():
    with pytest.raises(ValueError):
        OccupancyOctree(Aabb((0, 0, 0), (100, 1, 1)), OctreeParams(max_depth=4))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(*[st.floats(0.2, 9.4)] * 3), min_size=1, max_size=15))
def test_scan_updates_are_permutation_invariant(points):
    a, b = small_tree(), small_tree()
    insert_scan(a, (4.8, 4.8, 4.8), points)
    insert_scan(b, (4.8, 4.8, 4.8), list(reversed(points)))
    assert a.leaves() == b.leaves()
