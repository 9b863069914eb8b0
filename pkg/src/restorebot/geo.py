"""Ellipsoidal geodesy and local east-north-up frames.

Azimuths are in degrees, measured clockwise from true north, in [0, 360).
``vincenty_inverse`` returns the forward azimuth at ``a`` toward ``b`` and
the reverse azimuth at ``b`` pointing back toward ``a``.  For coincident
points both azimuths are reported as 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import NonConvergence, OutOfRange

TOLERANCE = 1e-12
MAX_ITERATIONS = 200
LOCAL_VALIDITY_RADIUS = 10_000.0


@dataclass(frozen=True)
class Ellipsoid:
    semi_major_axis: float
    flattening: float

    def __post_init__(self):
        if not self.semi_major_axis > 0:
            raise ValueError("semi_major_axis must be positive")
        if not 0 <= self.flattening < 1:
            raise ValueError("flattening must lie in [0, 1)")

    @property
    def semi_minor_axis(self) -> float:
        return self.semi_major_axis * (1.0 - self.flattening)

    @property
    def eccentricity_sq(self) -> float:
        f = self.flattening
        return f * (2.0 - f)


WGS84 = Ellipsoid(6378137.0, 1.0 / 298.257223563)


def normalize_longitude(lon: float) -> float:
    """Wrap a longitude in degrees into (-180, 180]."""
    lon = math.fmod(lon, 360.0)
    if lon <= -180.0:
        lon += 360.0
    elif lon > 180.0:
        lon -= 360.0
    return lon


@dataclass(frozen=True)
class GeoCoordinate:
    latitude: float
    longitude: float
    height: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 < self.longitude <= 180.0:
            raise ValueError(f"longitude {self.longitude} outside (-180, 180]")
        if not math.isfinite(self.height):
            raise ValueError("height must be finite")


@dataclass(frozen=True)
class LocalPoint:
    east: float
    north: float
    up: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.east, self.north, self.up)):
            raise ValueError("local coordinates must be finite")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.east, self.north, self.up)


@dataclass(frozen=True)
class LocalFrame:
    origin: GeoCoordinate
    ellipsoid: Ellipsoid = WGS84


@dataclass(frozen=True)
class InverseResult:
    distance: float
    forward_azimuth: float
    reverse_azimuth: float


def _wrap_azimuth(rad: float) -> float:
    deg = math.degrees(rad) % 360.0
    # (-tiny) % 360 can round to exactly 360.0
    return 0.0 if deg >= 360.0 else deg


def _series_ab(cos_sq_alpha: float, e: Ellipsoid) -> tuple[float, float]:
    a, b = e.semi_major_axis, e.semi_minor_axis
    u_sq = cos_sq_alpha * (a * a - b * b) / (b * b)
    big_a = 1 + u_sq / 16384 * (4096 + u_sq * (-768 + u_sq * (320 - 175 * u_sq)))
    big_b = u_sq / 1024 * (256 + u_sq * (-128 + u_sq * (74 - 47 * u_sq)))
    return big_a, big_b


def _delta_sigma(big_b: float, sin_s: float, cos_s: float, cos_2sm: float) -> float:
    return big_b * sin_s * (
        cos_2sm
        + big_b / 4 * (
            cos_s * (-1 + 2 * cos_2sm ** 2)
            - big_b / 6 * cos_2sm * (-3 + 4 * sin_s ** 2) * (-3 + 4 * cos_2sm ** 2)
        )
    )


def _inverse_core(lat1, lon1, lat2, lon2, e: Ellipsoid):
    f = e.flattening
    big_l = math.radians(normalize_longitude(lon2 - lon1))
    u1 = math.atan((1 - f) * math.tan(math.radians(lat1)))
    u2 = math.atan((1 - f) * math.tan(math.radians(lat2)))
    sin_u1, cos_u1 = math.sin(u1), math.cos(u1)
    sin_u2, cos_u2 = math.sin(u2), math.cos(u2)

    def terms(lam):
        sin_lam, cos_lam = math.sin(lam), math.cos(lam)
        sin_sigma = math.hypot(cos_u2 * sin_lam, cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lam)
        cos_sigma = sin_u1 * sin_u2 + cos_u1 * cos_u2 * cos_lam
        if sin_sigma == 0.0:
            return sin_lam, cos_lam, 0.0, cos_sigma, 0.0, 0.0, 1.0, 0.0
        sigma = math.atan2(sin_sigma, cos_sigma)
        sin_alpha = cos_u1 * cos_u2 * sin_lam / sin_sigma
        cos_sq_alpha = 1 - sin_alpha * sin_alpha
        # equatorial line: cos_sq_alpha == 0
        cos_2sm = cos_sigma - 2 * sin_u1 * sin_u2 / cos_sq_alpha if cos_sq_alpha != 0 else 0.0
        return sin_lam, cos_lam, sin_sigma, cos_sigma, sigma, sin_alpha, cos_sq_alpha, cos_2sm

    lam = big_l
    for _ in range(MAX_ITERATIONS):
        _, _, sin_sigma, cos_sigma, sigma, sin_alpha, cos_sq_alpha, cos_2sm = terms(lam)
        if sin_sigma == 0.0:
            return 0.0, 0.0, 0.0
        c = f / 16 * cos_sq_alpha * (4 + f * (4 - 3 * cos_sq_alpha))
        lam_prev = lam
        lam = big_l + (1 - c) * f * sin_alpha * (
            sigma + c * sin_sigma * (cos_2sm + c * cos_sigma * (-1 + 2 * cos_2sm * cos_2sm))
        )
        if abs(lam) > math.pi:
            raise NonConvergence("lambda left [-pi, pi]; points are nearly antipodal")
        if abs(lam - lam_prev) < TOLERANCE:
            break
    else:
        raise NonConvergence(f"no convergence within {MAX_ITERATIONS} iterations")

    # evaluate at the converged lambda, not the previous iterate
    sin_lam, cos_lam, sin_sigma, cos_sigma, sigma, _, cos_sq_alpha, cos_2sm = terms(lam)
    if sin_sigma == 0.0:
        return 0.0, 0.0, 0.0
    big_a, big_b = _series_ab(cos_sq_alpha, e)
    s = e.semi_minor_axis * big_a * (sigma - _delta_sigma(big_b, sin_sigma, cos_sigma, cos_2sm))
    alpha1 = math.atan2(cos_u2 * sin_lam, cos_u1 * sin_u2 - sin_u1 * cos_u2 * cos_lam)
    # forward azimuth at point 2 (direction of travel)
    alpha2 = math.atan2(cos_u1 * sin_lam, -sin_u1 * cos_u2 + cos_u1 * sin_u2 * cos_lam)
    return s, alpha1, alpha2


def vincenty_inverse(a: GeoCoordinate, b: GeoCoordinate, e: Ellipsoid = WGS84) -> InverseResult:
    """Geodesic distance and azimuths between two points on the ellipsoid.

    The computation always runs with the two points in a canonical order so
    that swapping the arguments gives a bit-identical distance.

    Raises
    ------
    NonConvergence
        If the longitude iteration does not settle (nearly antipodal points).
    """
    key_a = (a.latitude, a.longitude)
    key_b = (b.latitude, b.longitude)
    if key_a == key_b:
        return InverseResult(0.0, 0.0, 0.0)
    swapped = key_b < key_a
    p, q = (b, a) if swapped else (a, b)
    s, alpha1, alpha2 = _inverse_core(p.latitude, p.longitude, q.latitude, q.longitude, e)
    if s == 0.0:
        return InverseResult(0.0, 0.0, 0.0)
    # alpha1: heading at p toward q; alpha2 + pi: heading at q back toward p
    at_p = _wrap_azimuth(alpha1)
    at_q = _wrap_azimuth(alpha2 + math.pi)
    if swapped:
        return InverseResult(s, at_q, at_p)
    return InverseResult(s, at_p, at_q)


def vincenty_direct(a: GeoCoordinate, azimuth: float, distance: float,
                    e: Ellipsoid = WGS84) -> GeoCoordinate:
    """Destination reached by travelling ``distance`` metres from ``a`` along ``azimuth``.

    The returned height equals the height of ``a``.
    """
    if distance < 0:
        raise ValueError("distance must be non-negative")
    if distance == 0:
        return a
    f = e.flattening
    alpha1 = math.radians(azimuth)
    sin_a1, cos_a1 = math.sin(alpha1), math.cos(alpha1)
    tan_u1 = (1 - f) * math.tan(math.radians(a.latitude))
    cos_u1 = 1 / math.sqrt(1 + tan_u1 * tan_u1)
    sin_u1 = tan_u1 * cos_u1
    sigma1 = math.atan2(tan_u1, cos_a1)
    sin_alpha = cos_u1 * sin_a1
    cos_sq_alpha = 1 - sin_alpha * sin_alpha
    big_a, big_b = _series_ab(cos_sq_alpha, e)

    sigma = distance / (e.semi_minor_axis * big_a)
    for _ in range(MAX_ITERATIONS):
        cos_2sm = math.cos(2 * sigma1 + sigma)
        sin_s, cos_s = math.sin(sigma), math.cos(sigma)
        sigma_prev = sigma
        sigma = distance / (e.semi_minor_axis * big_a) + _delta_sigma(big_b, sin_s, cos_s, cos_2sm)
        if abs(sigma - sigma_prev) < TOLERANCE:
            break
    else:
        raise NonConvergence("direct problem did not converge")

    cos_2sm = math.cos(2 * sigma1 + sigma)
    sin_s, cos_s = math.sin(sigma), math.cos(sigma)
    tmp = sin_u1 * sin_s - cos_u1 * cos_s * cos_a1
    lat2 = math.atan2(
        sin_u1 * cos_s + cos_u1 * sin_s * cos_a1,
        (1 - f) * math.hypot(sin_alpha, tmp),
    )
    lam = math.atan2(sin_s * sin_a1, cos_u1 * cos_s - sin_u1 * sin_s * cos_a1)
    c = f / 16 * cos_sq_alpha * (4 + f * (4 - 3 * cos_sq_alpha))
    big_l = lam - (1 - c) * f * sin_alpha * (
        sigma + c * sin_s * (cos_2sm + c * cos_s * (-1 + 2 * cos_2sm * cos_2sm))
    )
    lon2 = normalize_longitude(a.longitude + math.degrees(big_l))
    return GeoCoordinate(math.degrees(lat2), lon2, a.height)


def geo_to_local(frame: LocalFrame, p: GeoCoordinate) -> LocalPoint:
    """Express ``p`` in the east-north-up frame anchored at ``frame.origin``.

    East/north come from the geodesic distance and azimuth from the origin,
    up is the ellipsoidal height difference.
    """
    inv = vincenty_inverse(frame.origin, p, frame.ellipsoid)
    if inv.distance > LOCAL_VALIDITY_RADIUS:
        raise OutOfRange(f"{inv.distance:.1f} m from frame origin exceeds {LOCAL_VALIDITY_RADIUS:.0f} m")
    az = math.radians(inv.forward_azimuth)
    return LocalPoint(inv.distance * math.sin(az), inv.distance * math.cos(az),
                      p.height - frame.origin.height)


def local_to_geo(frame: LocalFrame, q: LocalPoint) -> GeoCoordinate:
    d = math.hypot(q.east, q.north)
    if d > LOCAL_VALIDITY_RADIUS:
        raise OutOfRange(f"{d:.1f} m from frame origin exceeds {LOCAL_VALIDITY_RADIUS:.0f} m")
    o = frame.origin
    if d == 0.0:
        return GeoCoordinate(o.latitude, o.longitude, o.height + q.up)
    az = math.degrees(math.atan2(q.east, q.north))
    g = vincenty_direct(o, az % 360.0, d, frame.ellipsoid)
    return GeoCoordinate(g.latitude, g.longitude, o.height + q.up)
