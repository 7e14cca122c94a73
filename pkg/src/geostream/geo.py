"""Spherical-earth distance helpers."""

import math

from .errors import DataError

EARTH_RADIUS_KM = 6371.0


def check_coords(lat: float, lon: float) -> None:
    if lat is None or lon is None:
        raise DataError("missing coordinates")
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise DataError(f"coordinates out of range: ({lat}, {lon})")


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in kilometers."""
    check_coords(lat1, lon1)
    check_coords(lat2, lon2)
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))
