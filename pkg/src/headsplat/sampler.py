"""Training-time camera sampling.

Full-phase batches draw one azimuth per quadrant so view coverage is exactly
balanced; the face phase draws frontal close-in poses with a fixed narrow FoV.
Range relaxation widens the FoV and pulls the radius in on a fixed iteration
cadence, clamped to configured maximum bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .guidance import bucket_view
from .rasterizer import CameraPose, pose_from_spherical

# face-phase constants: tight frontal crops with a fixed focal length
FACE_PHASE_FOV = 0.4
FACE_PHASE_ELEVATION = (60.0, 90.0)

# full-phase azimuth quadrants, one draw each per batch (order is fixed)
QUADRANTS = ((-90.0, 0.0), (0.0, 90.0), (-180.0, -90.0), (90.0, 180.0))


def _check_interval(name: str, pair) -> tuple[float, float]:
    lo, hi = float(pair[0]), float(pair[1])
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
        raise ConfigError(f"{name} must be a finite [lo, hi] interval",
                          interval=[lo, hi])
    return lo, hi


@dataclass(frozen=True)
class CameraRanges:
    """Current sampling ranges plus the bounds relaxation may not exceed."""

    radius: tuple[float, float] = (5.2, 5.5)
    radius_max_bounds: tuple[float, float] = (4.2, 5.2)
    fov: tuple[float, float] = (0.53, 0.53)
    fov_max_bounds: tuple[float, float] = (0.3, 0.7)
    elevation: tuple[float, float] = (40.0, 100.0)
    azimuth: tuple[float, float] = (-110.0, 110.0)  # face phase only
    relax_start_iter: int = 2000
    relax_interval: int = 2000
    fov_factor: tuple[float, float] = (0.8, 1.1)
    radius_factor: float = 0.95

    def __post_init__(self):
        for name in ("radius", "radius_max_bounds", "fov", "fov_max_bounds",
                     "elevation", "azimuth", "fov_factor"):
            object.__setattr__(self, name,
                               _check_interval(name, getattr(self, name)))
        if self.radius[0] <= 0 or self.radius_max_bounds[0] <= 0:
            raise ConfigError("radius ranges must be positive",
                              radius=list(self.radius),
                              bounds=list(self.radius_max_bounds))
        if self.relax_start_iter < 0 or self.relax_interval < 1:
            raise ConfigError("relaxation schedule must have start >= 0 and "
                              "interval >= 1",
                              start=self.relax_start_iter,
                              interval=self.relax_interval)
        if self.radius_factor <= 0:
            raise ConfigError("radius_factor must be positive",
                              factor=self.radius_factor)


def sample_batch(ranges: CameraRanges, batch: int, rng: np.random.Generator,
                 phase: str, *, width: int, height: int,
                 look_at=(0.0, 0.0, 0.0)) -> list[tuple[CameraPose, str]]:
    """Draw a batch of poses; each is paired with its view-direction bucket."""
    if phase not in ("face_only", "full"):
        raise ConfigError("phase must be face_only or full", phase=phase)
    if batch < 1:
        raise ConfigError("batch must be >= 1", batch=batch)
    if phase == "full" and batch != 4:
        raise ConfigError("full-phase batches are quadrant-balanced and must "
                          "have batch = 4", batch=batch)
    out = []
    for k in range(batch):
        if phase == "full":
            lo, hi = QUADRANTS[k]
            if lo == 90.0:  # the (90, 180] quadrant is open at the bottom
                az = 180.0 - rng.uniform(0.0, 90.0)
            else:
                az = rng.uniform(lo, hi)
            fov = rng.uniform(*ranges.fov)
            elev = rng.uniform(*ranges.elevation)
        else:
            az = rng.uniform(*ranges.azimuth)
            fov = FACE_PHASE_FOV
            elev = rng.uniform(*FACE_PHASE_ELEVATION)
        radius = rng.uniform(*ranges.radius)
        pose = pose_from_spherical(radius, az, elev, fov, width, height,
                                   look_at=look_at)
        out.append((pose, bucket_view(az)))
    return out


def relax(ranges: CameraRanges, iteration: int,
          rng: np.random.Generator) -> CameraRanges:
    """Shrink the radius and rescale the FoV range on the relaxation cadence.

    Outside an event iteration this is the identity. The FoV factor is drawn
    once per event and applied to both bounds; results are clamped into the
    configured maximum bounds.
    """
    if iteration < 0:
        raise ConfigError("iteration must be >= 0", iteration=iteration)
    if iteration < ranges.relax_start_iter or \
            iteration % ranges.relax_interval != 0:
        return ranges
    f = rng.uniform(*ranges.fov_factor)
    fov = tuple(float(np.clip(v * f, *ranges.fov_max_bounds))
                for v in ranges.fov)
    radius = tuple(float(np.clip(v * ranges.radius_factor,
                                 *ranges.radius_max_bounds))
                   for v in ranges.radius)
    return replace(ranges, fov=fov, radius=radius)
