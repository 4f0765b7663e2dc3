"""Physics mean functions: sphere geometry, travel times and source amplitudes.

Travel times and amplitudes are affine stand-ins for tabulated travel-time
models and source models; the GP residual models absorb their misfit.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Tuple, Union

import numpy as np

from sigmon.base import ConfigurationError, DomainError, StationId


EARTH_RADIUS_KM = 6371.0

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class Station:
    sta: StationId
    lon: float
    lat: float


@dataclass(frozen=True)
class PhaseVelocity:
    surface_velocity: float = 7.9
    depth_coefficient: float = 0.0
    fixed_delay: float = 0.0


@dataclass(frozen=True)
class PhaseAmplitude:
    c_mb: float = 2.0
    c_dist: float = 1.0
    c_0: float = -1.0


@dataclass(frozen=True)
class VelocityModel:
    phases: Dict[str, PhaseVelocity] = field(default_factory=lambda: {
        "P": PhaseVelocity(7.9, 0.0, 0.0),
        "S": PhaseVelocity(4.5, 0.0, 0.0),
    })

    def validate(self) -> None:
        for name, pv in self.phases.items():
            if pv.surface_velocity <= 0:
                raise ConfigurationError(f"velocity.{name}: surface_velocity must be positive")
            if pv.fixed_delay < 0:
                raise ConfigurationError(f"velocity.{name}: fixed_delay must be >= 0")
        # P can never be slower than S at any (distance, depth)
        if "P" in self.phases and "S" in self.phases:
            p, s = self.phases["P"], self.phases["S"]
            if (p.surface_velocity < s.surface_velocity or p.fixed_delay > s.fixed_delay
                    or p.depth_coefficient > s.depth_coefficient):
                raise ConfigurationError("velocity model predicts S before P")

    def min_velocity(self) -> float:
        return min(pv.surface_velocity for pv in self.phases.values())


@dataclass(frozen=True)
class AmplitudeModel:
    phases: Dict[str, PhaseAmplitude] = field(default_factory=lambda: {
        "P": PhaseAmplitude(2.0, 1.0, -1.0),
        "S": PhaseAmplitude(2.0, 1.0, -1.5),
    })


@dataclass(frozen=True)
class GeoModel:
    velocity: VelocityModel = field(default_factory=VelocityModel)
    amplitude: AmplitudeModel = field(default_factory=AmplitudeModel)

    @property
    def phases(self) -> Tuple[str, ...]:
        return tuple(self.velocity.phases.keys())


def great_circle_km(lon1: ArrayLike, lat1: ArrayLike, lon2: ArrayLike, lat2: ArrayLike) -> ArrayLike:
    """Haversine distance on the sphere; works elementwise on arrays."""
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2.0) ** 2
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    if np.ndim(d) == 0:
        return float(d)
    return d


def unit_vectors(lons: np.ndarray, lats: np.ndarray) -> np.ndarray:
    lon = np.radians(np.asarray(lons, dtype=float))
    lat = np.radians(np.asarray(lats, dtype=float))
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def wrap_lon(lon: float) -> float:
    return ((lon + 180.0) % 360.0) - 180.0


def destination_point(lon: float, lat: float, azimuth_rad: float, distance_km: float) -> Tuple[float, float]:
    delta = distance_km / EARTH_RADIUS_KM
    phi1 = math.radians(lat)
    lmb1 = math.radians(lon)
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(azimuth_rad)
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    y = math.sin(azimuth_rad) * math.sin(delta) * math.cos(phi1)
    x = math.cos(delta) - math.sin(phi1) * sin_phi2
    lmb2 = lmb1 + math.atan2(y, x)
    return wrap_lon(math.degrees(lmb2)), math.degrees(phi2)


def _phase_velocity(phase: str, vm: VelocityModel) -> PhaseVelocity:
    try:
        return vm.phases[phase]
    except KeyError:
        raise ConfigurationError(f"Unknown phase {phase!r}; configured phases: {sorted(vm.phases)}")


def predict_travel_time(event, station: Station, phase: str, vm: VelocityModel) -> float:
    pv = _phase_velocity(phase, vm)
    delta = great_circle_km(event.lon, event.lat, station.lon, station.lat)
    return pv.fixed_delay + delta / pv.surface_velocity + pv.depth_coefficient * event.depth


def travel_time_array(lons: np.ndarray, lats: np.ndarray, depth: ArrayLike, station: Station,
                      phase: str, vm: VelocityModel) -> np.ndarray:
    pv = _phase_velocity(phase, vm)
    delta = great_circle_km(lons, lats, station.lon, station.lat)
    return pv.fixed_delay + np.asarray(delta) / pv.surface_velocity + pv.depth_coefficient * np.asarray(depth)


def predict_log_amplitude(event, station: Station, phase: str, am: AmplitudeModel) -> float:
    try:
        pa = am.phases[phase]
    except KeyError:
        raise ConfigurationError(f"Unknown phase {phase!r} in amplitude model")
    delta = great_circle_km(event.lon, event.lat, station.lon, station.lat)
    if delta <= 0.0:
        raise DomainError(f"log amplitude undefined at zero distance (station {station.sta})")
    return pa.c_mb * event.mb - pa.c_dist * math.log(delta) - pa.c_0
