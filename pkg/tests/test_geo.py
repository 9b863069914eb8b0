import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from restorebot.errors import NonConvergence, OutOfRange
from restorebot.geo import (
    WGS84, Ellipsoid, GeoCoordinate, LocalFrame, LocalPoint,
    geo_to_local, local_to_geo, vincenty_direct, vincenty_inverse,
)

import oracles

ORIGIN = GeoCoordinate(37.9050, -109.3900, 1900.0)  # near Monticello, UT
FRAME = LocalFrame(ORIGIN)


def random_pairs(rng, n, max_km, lat_limit=80.0):
    """Pairs of points at most ``max_km`` apart, built on a sphere-ish offset."""
    out = []
    for _ in range(n):
        lat = rng.uniform(-lat_limit, lat_limit)
        lon = rng.uniform(-179.9, 180.0)
        d = rng.uniform(0.0, max_km * 1000.0)
        az = rng.uniform(0.0, 360.0)
        # crude spherical offset just to place b; exact geometry is irrelevant
        dlat = d * math.cos(math.radians(az)) / 111_320.0
        dlon = d * math.sin(math.radians(az)) / (111_320.0 * math.cos(math.radians(lat)))
        lat2 = max(-89.0, min(89.0, lat + dlat))
        lon2 = (lon + dlon + 180.0) % 360.0 - 180.0
        if lon2 == -180.0:
            lon2 = 180.0
        out.append((GeoCoordinate(lat, lon), GeoCoordinate(lat2, lon2)))
    return out


def test_coincident_points():
    r = vincenty_inverse(ORIGIN, ORIGIN)
    assert r.distance == 0.0
    assert r.forward_azimuth == 0.0 and r.reverse_azimuth == 0.0


def test_meridian_100m_matches_sphere():
    b = vincenty_direct(ORIGIN, 0.0, 100.0)
    r = vincenty_inverse(ORIGIN, b)
    ref = oracles.spherical_distance(ORIGIN.latitude, ORIGIN.longitude, b.latitude, b.longitude)
    assert r.distance == pytest.approx(ref, rel=5e-3)
    assert r.distance == pytest.approx(100.0, abs=1e-6)


def test_short_range_sphere_agreement_random():
    rng = np.random.default_rng(3)
    for a, b in random_pairs(rng, 300, 1.0):
        d = vincenty_inverse(a, b).distance
        ref = oracles.spherical_distance(a.latitude, a.longitude, b.latitude, b.longitude)
        if ref > 1.0:
            assert abs(d - ref) / ref < 5e-3


def test_inverse_against_ode_integrator():
    rng = np.random.default_rng(11)
    for a, b in random_pairs(rng, 150, 500.0):
        r = vincenty_inverse(a, b)
        lat, lon = oracles.integrate_geodesic(a.latitude, a.longitude, r.forward_azimuth, r.distance)
        assert oracles.surface_gap(lat, lon, b.latitude, b.longitude) < 1e-3


def test_reverse_azimuth_points_back():
    b = vincenty_direct(ORIGIN, 60.0, 5000.0)
    r = vincenty_inverse(ORIGIN, b)
    assert r.forward_azimuth == pytest.approx(60.0, abs=1e-9)
    back = vincenty_inverse(b, ORIGIN)
    assert back.forward_azimuth == pytest.approx(r.reverse_azimuth, abs=1e-9)
    assert 0.0 <= r.reverse_azimuth < 360.0


def test_symmetry_is_exact():
    rng = np.random.default_rng(5)
    for a, b in random_pairs(rng, 200, 500.0):
        assert vincenty_inverse(a, b).distance == vincenty_inverse(b, a).distance


def test_triangle_inequality():
    rng = np.random.default_rng(8)
    for (a, b), (c, _) in zip(random_pairs(rng, 200, 100.0), random_pairs(rng, 200, 100.0)):
        c = vincenty_direct(a, rng.uniform(0, 360), rng.uniform(0, 100_000.0))
        ab = vincenty_inverse(a, b).distance
        bc = vincenty_inverse(b, c).distance
        ac = vincenty_inverse(a, c).distance
        assert ac <= ab + bc + 1e-6


def test_direct_zero_distance_returns_start():
    assert vincenty_direct(ORIGIN, 123.0, 0.0) == ORIGIN


def test_direct_north_from_equator():
    a = GeoCoordinate(0.0, 10.0)
    b = vincenty_direct(a, 0.0, 10_000.0)
    assert b.latitude > 0.0
    assert b.longitude == pytest.approx(10.0, abs=1e-12)


def test_round_trip_direct_of_inverse():
    rng = np.random.default_rng(1)
    for a, b in random_pairs(rng, 300, 500.0):
        r = vincenty_inverse(a, b)
        c = vincenty_direct(a, r.forward_azimuth, r.distance)
        assert vincenty_inverse(b, c).distance < 1e-6


def test_antipodal_raises():
    with pytest.raises(NonConvergence):
        vincenty_inverse(GeoCoordinate(0.0, 0.0), GeoCoordinate(0.5, 179.7))


def test_ellipsoid_validation():
    with pytest.raises(ValueError):
        Ellipsoid(-1.0, 0.0)
    with pytest.raises(ValueError):
        Ellipsoid(1.0, 1.0)


def test_coordinate_validation():
    with pytest.raises(ValueError):
        GeoCoordinate(91.0, 0.0)
    with pytest.raises(ValueError):
        GeoCoordinate(0.0, -180.0)
    with pytest.raises(ValueError):
        LocalPoint(math.nan, 0.0, 0.0)


def test_local_origin_and_north():
    assert geo_to_local(FRAME, ORIGIN) == LocalPoint(0.0, 0.0, 0.0)
    assert local_to_geo(FRAME, LocalPoint(0.0, 0.0, 0.0)) == ORIGIN
    p = vincenty_direct(ORIGIN, 0.0, 10.0)
    q = geo_to_local(FRAME, p)
    assert q.east == pytest.approx(0.0, abs=1e-3)
    assert q.north == pytest.approx(10.0, abs=1e-3)
    assert q.up == pytest.approx(0.0, abs=1e-9)


def test_local_3_4_5():
    g = local_to_geo(FRAME, LocalPoint(3.0, 4.0, 0.0))
    r = vincenty_inverse(ORIGIN, g)
    assert r.distance == pytest.approx(5.0, abs=1e-9)
    assert r.forward_azimuth == pytest.approx(math.degrees(math.atan2(3.0, 4.0)), abs=1e-9)


def test_local_out_of_range():
    with pytest.raises(OutOfRange):
        local_to_geo(FRAME, LocalPoint(20_000.0, 0.0, 0.0))
    with pytest.raises(OutOfRange):
        geo_to_local(FRAME, vincenty_direct(ORIGIN, 90.0, 20_000.0))


@settings(max_examples=200, deadline=None)
@given(
    east=st.floats(-7000, 7000), north=st.floats(-7000, 7000), up=st.floats(-100, 100),
)
def test_local_round_trip(east, north, up):
    q = LocalPoint(east, north, up)
    g = local_to_geo(FRAME, q)
    back = geo_to_local(FRAME, g)
    assert math.dist(q.as_tuple(), back.as_tuple()) < 1e-6
    again = local_to_geo(FRAME, back)
    assert vincenty_inverse(g, again).distance < 1e-6
