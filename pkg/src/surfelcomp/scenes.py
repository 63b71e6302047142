"""Analytic surfel scene builders: planes, spheres, the plane+sphere tutorial
scene and a small insertable object, plus camera rigs. These are the assets
the CLI demo, benchmarks and tests run against.
"""

from __future__ import annotations

import numpy as np

from .gbuffer import Camera
from .geometry import SurfelScene
from .mathutils import normalize, quat_multiply, quat_normalize

_Z = np.array([0.0, 0.0, 1.0])


def _quat_from_z_to(n: np.ndarray) -> np.ndarray:
    """Unit quaternion rotating +Z onto unit vector n."""
    n = np.asarray(n, dtype=np.float64)
    c = float(n[2])
    if c > 1.0 - 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    if c < -1.0 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])  # 180 degrees about X
    axis = np.cross(_Z, n)
    s = np.linalg.norm(axis)
    axis /= s
    half = 0.5 * np.arctan2(s, c)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def make_plane(center=(0.0, 0.0, 0.0), half_extent: float = 2.0, side: int = 48,
               normal=(0.0, 0.0, 1.0), color=(0.7, 0.7, 0.7), albedo=(0.6, 0.6, 0.6),
               roughness: float = 1.0, metallic: float = 0.0,
               opacity: float = 1.0, overlap: float = 1.0) -> SurfelScene:
    """Square grid of coplanar surfels; overlap >= 1 makes it near opaque."""
    ticks = np.linspace(-half_extent, half_extent, side)
    spacing = ticks[1] - ticks[0] if side > 1 else half_extent
    gx, gy = np.meshgrid(ticks, ticks, indexing="xy")
    n = side * side
    q = _quat_from_z_to(normalize(np.asarray(normal, dtype=np.float64)))
    from .mathutils import quat_rotate

    local = np.stack([gx.ravel(), gy.ravel(), np.zeros(n)], axis=1)
    centers = quat_rotate(q, local) + np.asarray(center, dtype=np.float64)
    return SurfelScene(
        centers, np.tile(q, (n, 1)), np.full((n, 2), overlap * spacing),
        np.full(n, opacity), np.tile(color, (n, 1)), np.tile(albedo, (n, 1)),
        np.full(n, roughness), np.full(n, metallic))


def make_sphere(center=(0.0, 0.0, 0.0), radius: float = 1.0, count: int = 2000,
                color=(0.8, 0.3, 0.2), albedo=(0.8, 0.3, 0.2),
                roughness: float = 1.0, metallic: float = 0.0,
                opacity: float = 1.0, overlap: float = 1.2) -> SurfelScene:
    """Fibonacci-spiral shell of tangent surfels with radial normals."""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * np.arange(count)
    normals = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    centers = np.asarray(center, dtype=np.float64) + radius * normals
    quats = np.stack([_quat_from_z_to(nrm) for nrm in normals])
    # Disc half-extent sized so neighboring discs overlap into a closed shell.
    scale = overlap * 2.0 * radius / np.sqrt(count)
    n = count
    return SurfelScene(
        centers, quats, np.full((n, 2), scale), np.full(n, opacity),
        np.tile(color, (n, 1)), np.tile(albedo, (n, 1)),
        np.full(n, roughness), np.full(n, metallic))


def merge_scenes(*scenes: SurfelScene) -> SurfelScene:
    live = [s for s in scenes if len(s)]
    if not live:
        return SurfelScene.empty()
    return SurfelScene(
        np.concatenate([s.centers for s in live]),
        np.concatenate([s.orientations for s in live]),
        np.concatenate([s.scales for s in live]),
        np.concatenate([s.opacity for s in live]),
        np.concatenate([s.color for s in live]),
        np.concatenate([s.albedo for s in live]),
        np.concatenate([s.roughness for s in live]),
        np.concatenate([s.metallic for s in live]))


def tutorial_scene(plane_side: int = 64, sphere_count: int = 2000) -> SurfelScene:
    """Ground plane plus one resting sphere; the standard demo scene."""
    ground = make_plane(center=(0, 0, 0), half_extent=2.5, side=plane_side,
                        color=(0.55, 0.55, 0.6), albedo=(0.55, 0.55, 0.6))
    ball = make_sphere(center=(0.9, 0.4, 0.45), radius=0.45, count=sphere_count,
                       color=(0.7, 0.25, 0.2), albedo=(0.7, 0.25, 0.2))
    return merge_scenes(ground, ball)


def tutorial_object(count: int = 1200) -> SurfelScene:
    """Small sphere used as the insertable object (origin-centered)."""
    return make_sphere(center=(0, 0, 0), radius=0.3, count=count,
                       color=(0.2, 0.4, 0.8), albedo=(0.2, 0.4, 0.8),
                       roughness=0.9, metallic=0.0)


def closed_sphere(radius: float = 2.0, count: int = 4000,
                  color=(0.5, 0.5, 0.5)) -> SurfelScene:
    """Watertight shell enclosing the origin; used for capture tests."""
    return make_sphere(center=(0, 0, 0), radius=radius, count=count,
                       color=color, albedo=color, overlap=1.4)


def orbit_cameras(target=(0.0, 0.0, 0.0), distance: float = 4.0, count: int = 4,
                  elevation_deg: float = 35.0, fov_y_deg: float = 50.0,
                  width: int = 160, height: int = 120) -> list[Camera]:
    """Ring of cameras on a tilted circle, all looking at the target."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    el = np.radians(elevation_deg)
    for i in range(count):
        az = 2.0 * np.pi * i / count
        pos = target + distance * np.array([
            np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cams.append(Camera.look_at(pos, target, fov_y=np.radians(fov_y_deg),
                                   width=width, height=height))
    return cams
