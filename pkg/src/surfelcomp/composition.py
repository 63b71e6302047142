"""Object insertion: shadow-region definition, object-only occlusion caching,
correlated shadow-ratio estimation, relighting, and depth compositing.

The shadow ratio divides two importance-sampled radiance estimates that share
one sample set, so the ratio is exactly within [0, 1] per channel and both
estimates cancel bitwise when the cached occlusion is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange, get_num_threads, get_thread_id

from .geometry import PlacementTransform, SurfelScene, apply_transform
from .gbuffer import Camera, GBuffer, W_MIN, linear_to_srgb_u8, render_gbuffers, shading_points, unbiased_depth
from .octmap import (OctTexture, SamplingTable, _importance_sample_scalar,
                     _radical_inverse_base2, _sample_bilinear)
from .probes import ProbeSet, _frnn_collect, _neighbor_weights, bake_probes, farthest_point_sample, fuse_surface_points, place_probes
from .shading import IlluminationContext, ShadedImage, _env_radiance, _probe_args, _sample_shift, deferred_pbr

DEFAULT_REGION_MULTIPLIER = 6.0
DEFAULT_SHADOW_PROBES = 10000
DENOM_EPS = 1e-6


@dataclass(frozen=True)
class ShadowRegion:
    """Axis-aligned box around the placed object that can receive its shadow."""

    center: np.ndarray
    half_extent: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        he = np.asarray(self.half_extent, dtype=np.float64)
        object.__setattr__(self, "half_extent", he)
        if not np.all(he > 0):
            raise ValueError("half_extent must be positive")

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all(np.abs(p - self.center) <= self.half_extent, axis=-1)

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_extent

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_extent


@dataclass
class ShadowField:
    """Probes inside the shadow region whose occlusion is object-only."""

    probes: ProbeSet
    region: ShadowRegion


@dataclass
class ObjectRender:
    """Relit object layer ready for depth compositing."""

    color: np.ndarray  # (H, W, 3) linear radiance
    depth: np.ndarray  # (H, W) unbiased depth, NaN where invalid
    alpha: np.ndarray  # (H, W) blend weight
    probe_fallbacks: int = 0


def define_shadow_region(obj: SurfelScene, xf: PlacementTransform,
                         n: float = DEFAULT_REGION_MULTIPLIER) -> ShadowRegion:
    """Box centered on the placed object, n times its dimensions wide."""
    if n < 1.0:
        raise ValueError("region multiplier must be >= 1")
    if len(obj) == 0:
        raise ValueError("cannot define a shadow region for an empty object")
    placed = apply_transform(obj, xf)
    lo, hi = placed.bounds
    return ShadowRegion(center=0.5 * (lo + hi), half_extent=0.5 * n * (hi - lo))


def cache_occlusion(scene: SurfelScene, object_placed: SurfelScene,
                    region: ShadowRegion, cams,
                    probe_count: int = DEFAULT_SHADOW_PROBES,
                    tex_size: int = 16, offset: float | None = None,
                    fps_start: int = 0) -> ShadowField:
    """Place probes on scene surfaces inside the region and bake the occlusion
    introduced by the object alone (scene surfels excluded)."""
    points, normals = fuse_surface_points(scene, cams)
    inside = region.contains(points)
    points, normals = points[inside], normals[inside]
    if len(points) == 0:
        raise ValueError("nothing to shadow: no scene surface inside the region")
    k = min(probe_count, len(points))
    sel = farthest_point_sample(points, k, start=fps_start)
    if offset is None:
        diag = object_placed.diagonal
        offset = 0.01 * diag if diag > 0 else 0.005 * float(np.linalg.norm(region.half_extent))
    positions, src_normals = place_probes(points[sel], normals[sel], offset)
    rad, occ = bake_probes(object_placed, positions, tex_size)
    return ShadowField(probes=ProbeSet(positions, src_normals, rad, occ), region=region)


@njit(cache=True, parallel=True)
def _shadow_ratio_kernel(points, normals, indices, region_lo, region_hi,
                         env_data, row_cdf, cond_cdf, pmf, omega,
                         s_r, seed,
                         has_probes, p_pos, p_nrm, p_rad, p_occ,
                         cell_start, sorted_idx, grid_lo, inv_cell, dims, radius2, k,
                         out_rgb):
    n = points.shape[0]
    nt = get_num_threads()
    nn_idx_b = np.empty((nt, k), dtype=np.int64)
    nn_d2_b = np.empty((nt, k), dtype=np.float64)
    weights_b = np.empty((nt, k), dtype=np.float64)
    tmp3_b = np.empty((nt, 3), dtype=np.float64)
    tmp1_b = np.empty((nt, 1), dtype=np.float64)
    for q in prange(n):
        tid = get_thread_id()
        x, y, z = points[q, 0], points[q, 1], points[q, 2]
        if (x < region_lo[0] or x > region_hi[0] or y < region_lo[1]
                or y > region_hi[1] or z < region_lo[2] or z > region_hi[2]):
            out_rgb[q, 0] = 1.0
            out_rgb[q, 1] = 1.0
            out_rgb[q, 2] = 1.0
            continue
        nn_idx = nn_idx_b[tid]
        nn_d2 = nn_d2_b[tid]
        weights = weights_b[tid]
        tmp3 = tmp3_b[tid]
        tmp1 = tmp1_b[tid]
        nx, ny, nz = normals[q, 0], normals[q, 1], normals[q, 2]
        count = 0
        if has_probes:
            count = _frnn_collect(x, y, z, p_pos, cell_start, sorted_idx, grid_lo,
                                  inv_cell, dims, radius2, k, nn_idx, nn_d2)
            if count > 0:
                _neighbor_weights(x, y, z, p_pos, p_nrm, nn_idx, nn_d2, count, weights)
        su1, su2 = _sample_shift(seed, indices[q])
        num0 = 0.0
        num1 = 0.0
        num2 = 0.0
        den0 = 0.0
        den1 = 0.0
        den2 = 0.0
        for s in range(s_r):
            u1 = s / s_r + su1
            if u1 >= 1.0:
                u1 -= 1.0
            u2 = _radical_inverse_base2(s) + su2
            if u2 >= 1.0:
                u2 -= 1.0
            dx, dy, dz, pdf = _importance_sample_scalar(row_cdf, cond_cdf, pmf, omega, u1, u2)
            ndl = dx * nx + dy * ny + dz * nz
            if ndl <= 0.0:
                continue
            w = ndl / pdf
            lr, lg, lb = _env_radiance(env_data, dx, dy, dz, tmp3)
            occ = 0.0
            if count > 0:
                wsum = 0.0
                acc = 0.0
                for j in range(count):
                    wj = weights[j]
                    if wj <= 0.0:
                        continue
                    _sample_bilinear(p_occ[nn_idx[j]], dx, dy, dz, tmp1)
                    acc += wj * tmp1[0]
                    wsum += wj
                if wsum > 0.0:
                    occ = acc / wsum
            keep = 1.0 - occ
            num0 += lr * w * keep
            num1 += lg * w * keep
            num2 += lb * w * keep
            den0 += lr * w
            den1 += lg * w
            den2 += lb * w
        out_rgb[q, 0] = num0 / den0 if den0 > DENOM_EPS else 1.0
        out_rgb[q, 1] = num1 / den1 if den1 > DENOM_EPS else 1.0
        out_rgb[q, 2] = num2 / den2 if den2 > DENOM_EPS else 1.0


def shadow_ratio_batch(points: np.ndarray, normals: np.ndarray,
                       env: OctTexture, table: SamplingTable, field: ShadowField,
                       s_r: int = 256, seed: int = 0,
                       indices: np.ndarray | None = None) -> np.ndarray:
    """Per-channel multiplicative shadow factors for a batch of shading points."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
    if indices is None:
        indices = np.arange(len(points), dtype=np.int64)
    out = np.empty((len(points), 3))
    _shadow_ratio_kernel(points, normals, np.ascontiguousarray(indices, dtype=np.int64),
                         field.region.lo, field.region.hi,
                         env.data, table.row_cdf, table.cond_cdf,
                         table.texel_pmf, table.solid_angles,
                         s_r, seed, *_probe_args(field.probes), out)
    return out


def shadow_ratio(x, n, env: OctTexture, table: SamplingTable, field: ShadowField,
                 s_r: int = 256, seed: int = 0) -> np.ndarray:
    """Shadow ratio at one point: ratio of occluded to unoccluded radiance."""
    return shadow_ratio_batch(np.reshape(x, (1, 3)), np.reshape(n, (1, 3)),
                              env, table, field, s_r, seed)[0]


def make_shadow_fn(env: OctTexture, table: SamplingTable, field: ShadowField,
                   s_r: int = 256, seed: int = 0):
    """Bind a shadow_ratio_batch suitable for compose_frame."""

    def fn(points, normals, indices):
        return shadow_ratio_batch(points, normals, env, table, field,
                                  s_r=s_r, seed=seed, indices=indices)

    return fn


def relight_object(object_placed: SurfelScene, env: OctTexture,
                   table: SamplingTable, object_probes: ProbeSet | None,
                   cam: Camera, s_r: int = 256, seed: int = 0) -> ObjectRender:
    """Render the object alone and shade it under the estimated environment."""
    g = render_gbuffers(object_placed, cam)
    ctx = IlluminationContext(env=env, env_table=table, probes=object_probes)
    shaded = deferred_pbr(g, cam, ctx, s_r=s_r, mode="importance", seed=seed)
    return ObjectRender(color=shaded.color, depth=unbiased_depth(g),
                        alpha=g.weight.copy(), probe_fallbacks=shaded.probe_fallbacks)


def compose_frame(scene_gb: GBuffer, cam: Camera,
                  object_render: ObjectRender | None = None,
                  shadow_fn=None, w_min: float = W_MIN):
    """Shadow the scene radiance, then depth-composite the relit object.

    Returns (hdr, ldr_u8). With no object and no shadow function the output
    equals the plain scene color export bit for bit.
    """
    h, w = scene_gb.shape
    if (cam.height, cam.width) != (h, w):
        raise ValueError("camera resolution does not match the G-buffer")
    hdr = scene_gb.color.copy()
    if shadow_fn is not None:
        sp = shading_points(scene_gb, cam, w_min)
        valid = sp.valid
        if np.any(valid):
            idx = np.flatnonzero(valid.ravel())
            ratios = shadow_fn(sp.position[valid], sp.normal[valid], idx)
            hdr[valid] *= ratios
    if object_render is not None:
        if object_render.color.shape[:2] != (h, w):
            raise ValueError("object render resolution does not match the scene")
        sd = unbiased_depth(scene_gb, w_min)
        scene_depth = np.where(np.isfinite(sd), sd, np.inf)
        obj_depth = np.where(np.isfinite(object_render.depth), object_render.depth, np.inf)
        show = (object_render.alpha > 0.5) & (obj_depth < scene_depth)
        hdr[show] = object_render.color[show]
    return hdr, linear_to_srgb_u8(hdr)
