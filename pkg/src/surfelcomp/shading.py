"""Physically based shading: simplified Disney BRDF (GGX/Schlick/Smith),
the direct+indirect illumination split, and two Monte Carlo estimators.

The uniform estimator follows the reconstruction convention: Hammersley
directions uniform over the hemisphere, weighted 2*pi/S_r. The importance
estimator draws directions proportional to environment luminance and divides
by the texel PDF; below-horizon samples contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange, get_num_threads, get_thread_id

from .gbuffer import Camera, GBuffer, W_MIN, shading_points
from .octmap import (OctTexture, SamplingTable, _importance_sample_scalar,
                     _radical_inverse_base2, _sample_bilinear,
                     build_sampling_table)
from .probes import ProbeSet, _frnn_collect, _interp_textures, _neighbor_weights

_U64 = np.uint64
_INV_2_53 = 1.0 / 9007199254740992.0


@dataclass(frozen=True)
class BRDFParams:
    albedo: np.ndarray
    roughness: float
    metallic: float

    def __post_init__(self):
        a = np.asarray(self.albedo, dtype=np.float64)
        object.__setattr__(self, "albedo", a)
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("albedo out of [0, 1]")
        if not (0.0 <= self.roughness <= 1.0 and 0.0 <= self.metallic <= 1.0):
            raise ValueError("roughness/metallic out of [0, 1]")


@dataclass
class IlluminationContext:
    """Environment texture plus optional probes for indirect light/occlusion."""

    env: OctTexture
    env_table: SamplingTable | None = None
    probes: ProbeSet | None = None

    @classmethod
    def create(cls, env: OctTexture, probes: ProbeSet | None = None,
               build_table: bool = True) -> "IlluminationContext":
        table = build_sampling_table(env) if build_table else None
        return cls(env=env, env_table=table, probes=probes)


@dataclass
class ShadedImage:
    color: np.ndarray  # (H, W, 3) linear radiance
    alpha: np.ndarray  # (H, W) accumulated blend weight
    probe_fallbacks: int = 0  # pixels shaded with no probe in range


# ---------------------------------------------------------------------------
# scalar building blocks
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _onb(nx, ny, nz):
    s = 1.0 if nz >= 0.0 else -1.0
    a = -1.0 / (s + nz)
    b = nx * ny * a
    return (1.0 + s * nx * nx * a, s * b, -s * nx,
            b, s + ny * ny * a, -ny)


@njit(cache=True, inline="always")
def _brdf(ax, ay, az, rough, metal, wox, woy, woz, wix, wiy, wiz, nx, ny, nz):
    """Diffuse + GGX specular with Schlick Fresnel and height-correlated Smith."""
    ndv = nx * wox + ny * woy + nz * woz
    ndl = nx * wix + ny * wiy + nz * wiz
    if ndl <= 0.0 or ndv <= 0.0:
        return 0.0, 0.0, 0.0
    hx = wox + wix
    hy = woy + wiy
    hz = woz + wiz
    hl = np.sqrt(hx * hx + hy * hy + hz * hz)
    if hl < 1e-12:
        return 0.0, 0.0, 0.0
    hx /= hl
    hy /= hl
    hz /= hl
    ndh = nx * hx + ny * hy + nz * hz
    hdv = hx * wox + hy * woy + hz * woz
    if hdv < 0.0:
        hdv = 0.0
    alpha = rough * rough
    a2 = alpha * alpha
    t = ndh * ndh * (a2 - 1.0) + 1.0
    d_ggx = a2 / (np.pi * t * t)
    fres = (1.0 - hdv) ** 5
    vis = 0.5 / (ndl * np.sqrt(ndv * ndv * (1.0 - a2) + a2)
                 + ndv * np.sqrt(ndl * ndl * (1.0 - a2) + a2) + 1e-12)
    kd = (1.0 - metal) / np.pi
    out0 = kd * ax
    out1 = kd * ay
    out2 = kd * az
    spec = d_ggx * vis
    f0r = 0.04 * (1.0 - metal) + ax * metal
    f0g = 0.04 * (1.0 - metal) + ay * metal
    f0b = 0.04 * (1.0 - metal) + az * metal
    out0 += spec * (f0r + (1.0 - f0r) * fres)
    out1 += spec * (f0g + (1.0 - f0g) * fres)
    out2 += spec * (f0b + (1.0 - f0b) * fres)
    return out0, out1, out2


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z + _U64(0x9E3779B97F4A7C15)) & _U64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)) & _U64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)) & _U64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> _U64(31))


@njit(cache=True, inline="always")
def _sample_shift(seed, index):
    """Deterministic per-point toroidal shift for scrambled Hammersley."""
    base = _mix64(_U64(seed) ^ (_U64(index) * _U64(0x9E3779B97F4A7C15)))
    a = _mix64(base)
    b = _mix64(base ^ _U64(0x6A09E667F3BCC909))
    return float(a >> _U64(11)) * _INV_2_53, float(b >> _U64(11)) * _INV_2_53


@njit(cache=True, inline="always")
def _env_radiance(env_data, dx, dy, dz, tmp3):
    _sample_bilinear(env_data, dx, dy, dz, tmp3)
    return tmp3[0], tmp3[1], tmp3[2]


@njit(cache=True)
def _shade_batch(points, normals, view_dirs, albedo, rough, metal, indices,
                 env_data, row_cdf, cond_cdf, pmf, omega,
                 s_r, seed, importance_mode,
                 has_probes, p_pos, p_nrm, p_rad, p_occ,
                 cell_start, sorted_idx, grid_lo, inv_cell, dims, radius2, k,
                 out_rgb, out_found):
    """Shade a flat list of points; one estimator pass per point.

    importance_mode selects environment-importance sampling (seeded) over the
    deterministic uniform-hemisphere Hammersley estimator.
    """
    n = points.shape[0]
    nt = get_num_threads()
    nn_idx_b = np.empty((nt, k), dtype=np.int64)
    nn_d2_b = np.empty((nt, k), dtype=np.float64)
    weights_b = np.empty((nt, k), dtype=np.float64)
    tmp3_b = np.empty((nt, 3), dtype=np.float64)
    tmp1_b = np.empty((nt, 1), dtype=np.float64)
    for q in prange(n):
        tid = get_thread_id()
        nn_idx = nn_idx_b[tid]
        nn_d2 = nn_d2_b[tid]
        weights = weights_b[tid]
        tmp3 = tmp3_b[tid]
        tmp1 = tmp1_b[tid]
        x, y, z = points[q, 0], points[q, 1], points[q, 2]
        nx, ny, nz = normals[q, 0], normals[q, 1], normals[q, 2]
        wox, woy, woz = view_dirs[q, 0], view_dirs[q, 1], view_dirs[q, 2]
        ax, ay, az = albedo[q, 0], albedo[q, 1], albedo[q, 2]
        rg = rough[q]
        mt = metal[q]
        count = 0
        if has_probes:
            count = _frnn_collect(x, y, z, p_pos, cell_start, sorted_idx, grid_lo,
                                  inv_cell, dims, radius2, k, nn_idx, nn_d2)
            if count > 0:
                _neighbor_weights(x, y, z, p_pos, p_nrm, nn_idx, nn_d2, count, weights)
        out_found[q] = count
        tx, txy, txz, bx, by, bz = _onb(nx, ny, nz)
        su1 = 0.0
        su2 = 0.0
        if importance_mode:
            su1, su2 = _sample_shift(seed, indices[q])
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        for s in range(s_r):
            u1 = s / s_r + su1
            if u1 >= 1.0:
                u1 -= 1.0
            u2 = _radical_inverse_base2(s) + su2
            if u2 >= 1.0:
                u2 -= 1.0
            if importance_mode:
                dx, dy, dz, pdf = _importance_sample_scalar(row_cdf, cond_cdf, pmf, omega, u1, u2)
                ndl = dx * nx + dy * ny + dz * nz
                if ndl <= 0.0:
                    continue
                w = ndl / pdf
            else:
                # Uniform hemisphere about n: cos(theta) = u1 by construction.
                r = np.sqrt(max(0.0, 1.0 - u1 * u1))
                phi = 2.0 * np.pi * u2
                lx = r * np.cos(phi)
                ly = r * np.sin(phi)
                dx = lx * tx + ly * bx + u1 * nx
                dy = lx * txy + ly * by + u1 * ny
                dz = lx * txz + ly * bz + u1 * nz
                ndl = u1
                w = ndl
            lr, lg, lb = _env_radiance(env_data, dx, dy, dz, tmp3)
            if count > 0:
                ir, ig, ib, occ = _interp_textures(dx, dy, dz, p_rad, p_occ,
                                                   nn_idx, weights, count, tmp3, tmp1)
                lr = (1.0 - occ) * lr + ir
                lg = (1.0 - occ) * lg + ig
                lb = (1.0 - occ) * lb + ib
            fr, fg, fb = _brdf(ax, ay, az, rg, mt, wox, woy, woz, dx, dy, dz, nx, ny, nz)
            acc0 += fr * lr * w
            acc1 += fg * lg * w
            acc2 += fb * lb * w
        if importance_mode:
            norm = 1.0 / s_r
        else:
            norm = 2.0 * np.pi / s_r
        out_rgb[q, 0] = acc0 * norm
        out_rgb[q, 1] = acc1 * norm
        out_rgb[q, 2] = acc2 * norm


_shade_batch_parallel = njit(cache=True, parallel=True)(_shade_batch.py_func)


def _dummy_probe_args():
    return (False, np.zeros((0, 3)), np.zeros((0, 3)),
            np.zeros((0, 2, 2, 3), dtype=np.float32),
            np.zeros((0, 2, 2, 1), dtype=np.float32),
            np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64),
            np.zeros(3), 1.0, np.ones(3, dtype=np.int64), 1.0, 1)


def _probe_args(probes: ProbeSet | None):
    if probes is None or len(probes) == 0:
        return _dummy_probe_args()
    return (True,) + probes.grid_args()


def _table_args(table: SamplingTable | None):
    if table is None:
        one = np.ones(1)
        return one, np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1))
    return table.row_cdf, table.cond_cdf, table.texel_pmf, table.solid_angles


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def eval_brdf(p: BRDFParams, w_o: np.ndarray, w_i: np.ndarray, n: np.ndarray) -> np.ndarray:
    """BRDF value for one (view, light, normal) triple; zero below horizon."""
    w_o = np.asarray(w_o, dtype=np.float64)
    w_i = np.asarray(w_i, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    r = _brdf(p.albedo[0], p.albedo[1], p.albedo[2], p.roughness, p.metallic,
              w_o[0], w_o[1], w_o[2], w_i[0], w_i[1], w_i[2], n[0], n[1], n[2])
    return np.array(r)


def incident_radiance(x: np.ndarray, w_i: np.ndarray, ctx: IlluminationContext) -> np.ndarray:
    """(1 - O) * L_dir + L_in at point x from direction w_i."""
    from .octmap import sample_texture
    from .probes import interpolate

    l_dir = np.asarray(sample_texture(ctx.env, np.asarray(w_i, dtype=np.float64)), dtype=np.float64)
    if ctx.probes is None or len(ctx.probes) == 0:
        return l_dir
    l_in, occ, found = interpolate(ctx.probes, x, w_i)
    if found == 0:
        return l_dir
    return (1.0 - occ) * l_dir + l_in


def _shade_points(points, normals, view_dirs, albedo, rough, metal, indices,
                  ctx: IlluminationContext, s_r: int, mode: str, seed: int,
                  parallel: bool = True):
    importance = mode == "importance"
    if importance and ctx.env_table is None:
        raise ValueError("importance mode requires a sampling table")
    out_rgb = np.empty((len(points), 3))
    out_found = np.empty(len(points), dtype=np.int64)
    kern = _shade_batch_parallel if parallel else _shade_batch
    kern(np.ascontiguousarray(points, dtype=np.float64),
         np.ascontiguousarray(normals, dtype=np.float64),
         np.ascontiguousarray(view_dirs, dtype=np.float64),
         np.ascontiguousarray(albedo, dtype=np.float64),
         np.ascontiguousarray(rough, dtype=np.float64),
         np.ascontiguousarray(metal, dtype=np.float64),
         np.ascontiguousarray(indices, dtype=np.int64),
         ctx.env.data, *_table_args(ctx.env_table),
         s_r, seed, importance, *_probe_args(ctx.probes),
         out_rgb, out_found)
    return out_rgb, out_found


def shade_point_uniform(x, n, w_o, p: BRDFParams, ctx: IlluminationContext,
                        s_r: int = 128) -> np.ndarray:
    """Deterministic uniform-hemisphere Hammersley estimator at one point."""
    rgb, _ = _shade_points(
        np.reshape(x, (1, 3)), np.reshape(n, (1, 3)), np.reshape(w_o, (1, 3)),
        p.albedo.reshape(1, 3), np.array([p.roughness]), np.array([p.metallic]),
        np.zeros(1, dtype=np.int64), ctx, s_r, "uniform", 0, parallel=False)
    return rgb[0]


def shade_point_importance(x, n, w_o, p: BRDFParams, ctx: IlluminationContext,
                           s_r: int = 256, seed: int = 0) -> np.ndarray:
    """Environment-importance-sampled estimator; deterministic given seed."""
    rgb, _ = _shade_points(
        np.reshape(x, (1, 3)), np.reshape(n, (1, 3)), np.reshape(w_o, (1, 3)),
        p.albedo.reshape(1, 3), np.array([p.roughness]), np.array([p.metallic]),
        np.zeros(1, dtype=np.int64), ctx, s_r, "importance", seed, parallel=False)
    return rgb[0]


def deferred_pbr(g: GBuffer, cam: Camera, ctx: IlluminationContext,
                 s_r: int = 256, mode: str = "importance", seed: int = 0,
                 w_min: float = W_MIN) -> ShadedImage:
    """Shade every valid G-buffer pixel; invalid pixels stay black."""
    if mode not in ("uniform", "importance"):
        raise ValueError(f"unknown shading mode: {mode}")
    sp = shading_points(g, cam, w_min)
    h, w = g.shape
    out = np.zeros((h, w, 3))
    valid = sp.valid
    fallbacks = 0
    if np.any(valid):
        flat_idx = np.flatnonzero(valid.ravel())
        rgb, found = _shade_points(
            sp.position[valid], sp.normal[valid], sp.view_dir[valid],
            sp.albedo[valid], sp.roughness[valid], sp.metallic[valid],
            flat_idx, ctx, s_r, mode, seed)
        out[valid] = rgb
        if ctx.probes is not None and len(ctx.probes):
            fallbacks = int(np.sum(found == 0))
    return ShadedImage(color=out, alpha=g.weight.copy(), probe_fallbacks=fallbacks)
