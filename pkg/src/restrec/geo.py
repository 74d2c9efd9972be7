"""Geohash codec and great-circle distances."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0

BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
_DECODE = {c: i for i, c in enumerate(BASE32)}


class GeohashError(ValueError):
    """Bad geohash text or precision."""


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


class GeohashCode(str):
    """A validated geohash string; ``precision`` is its length."""

    def __new__(cls, code: str):
        if not 1 <= len(code) <= 12:
            raise GeohashError(f"geohash precision {len(code)} outside [1, 12]")
        for pos, ch in enumerate(code):
            if ch not in _DECODE:
                raise GeohashError(f"invalid geohash character {ch!r} at position {pos}")
        return super().__new__(cls, code)

    @property
    def precision(self) -> int:
        return len(self)


def geohash_encode(p: GeoPoint, precision: int = 12) -> GeohashCode:
    """Interleaved bisection: even bits refine longitude, odd bits latitude."""
    if not isinstance(precision, int) or not 1 <= precision <= 12:
        raise GeohashError(f"geohash precision must be an int in [1, 12], got {precision!r}")
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    chars = []
    bit_index = 0
    for _ in range(precision):
        value = 0
        for _ in range(5):
            if bit_index % 2 == 0:
                mid = (lon_lo + lon_hi) / 2
                if p.lon >= mid:
                    value = value * 2 + 1
                    lon_lo = mid
                else:
                    value *= 2
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2
                if p.lat >= mid:
                    value = value * 2 + 1
                    lat_lo = mid
                else:
                    value *= 2
                    lat_hi = mid
            bit_index += 1
        chars.append(BASE32[value])
    return GeohashCode("".join(chars))


def geohash_decode(code: str) -> tuple[GeoPoint, tuple[float, float]]:
    """Return the cell center and its (lat, lon) half-widths."""
    code = GeohashCode(code)
    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    even = True
    for ch in code:
        value = _DECODE[ch]
        for shift in range(4, -1, -1):
            bit = (value >> shift) & 1
            if even:
                mid = (lon_lo + lon_hi) / 2
                if bit:
                    lon_lo = mid
                else:
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2
                if bit:
                    lat_lo = mid
                else:
                    lat_hi = mid
            even = not even
    center = GeoPoint((lat_lo + lat_hi) / 2, (lon_lo + lon_hi) / 2)
    return center, ((lat_hi - lat_lo) / 2, (lon_hi - lon_lo) / 2)


def haversine_km(p1: GeoPoint, p2: GeoPoint) -> float:
    phi1, phi2 = math.radians(p1.lat), math.radians(p2.lat)
    dphi = phi2 - phi1
    dlam = math.radians(p2.lon) - math.radians(p1.lon)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    a = min(max(a, 0.0), 1.0)
    # atan2 form of 2*asin(sqrt(a)); stays accurate near antipodes
    return 2.0 * EARTH_RADIUS_KM * math.atan2(math.sqrt(a), math.sqrt(1.0 - a))


def within_radius(p1: GeoPoint, p2: GeoPoint, r_km: float) -> bool:
    if r_km < 0:
        raise ValueError(f"radius must be non-negative, got {r_km}")
    return haversine_km(p1, p2) <= r_km


def haversine_matrix(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Pairwise distances (km) between two coordinate arrays, shape (len1, len2)."""
    phi1 = np.radians(np.asarray(lat1, dtype=np.float64))[:, None]
    phi2 = np.radians(np.asarray(lat2, dtype=np.float64))[None, :]
    lam1 = np.radians(np.asarray(lon1, dtype=np.float64))[:, None]
    lam2 = np.radians(np.asarray(lon2, dtype=np.float64))[None, :]
    a = np.sin((phi2 - phi1) / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin((lam2 - lam1) / 2) ** 2
    a = np.clip(a, 0.0, 1.0)
    return 2.0 * EARTH_RADIUS_KM * np.arctan2(np.sqrt(a), np.sqrt(1.0 - a))


def haversine_to_point(lat, lon, p: GeoPoint) -> np.ndarray:
    """Distances (km) from many coordinates to a single point."""
    return haversine_matrix(lat, lon, [p.lat], [p.lon])[:, 0]
