"""Surface-anchored light probes with octahedral radiance/occlusion textures.

Probes are placed slightly above fused surface points, baked by ray tracing
the surfel scene once per texel, and queried by fixed-radius neighbor search
plus distance/back-face weighted interpolation. Querying a baked probe set is
the fast path that replaces per-shading-point ray tracing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from numba import njit, prange, get_num_threads, get_thread_id

from .errors import FormatError
from .geometry import MAX_HITS, T_STOP, SurfelScene, _collect_hits
from . import gbuffer as gb
from .mathutils import normalize
from .octmap import OctTexture, _sample_bilinear, texel_center_dirs

K_NEIGHBORS = 8
BACKFACE_BIAS = 0.01
SNAP_EPS = 1e-8

_MAGIC = b"SOPS1"


@dataclass(frozen=True)
class Probe:
    """One probe: position, the surface normal it was offset from, textures."""

    position: np.ndarray
    source_normal: np.ndarray
    radiance_tex: OctTexture
    occlusion_tex: OctTexture

    def __post_init__(self):
        if self.radiance_tex.size != self.occlusion_tex.size:
            raise ValueError("probe textures must share size")
        if self.radiance_tex.channels != 3 or self.occlusion_tex.channels != 1:
            raise ValueError("expected 3-channel radiance and 1-channel occlusion")


class ProbeSet:
    """Baked probes plus a uniform-grid index for fixed-radius queries."""

    def __init__(self, positions, source_normals, radiance, occlusion,
                 radius: float | None = None, k: int = K_NEIGHBORS):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.source_normals = np.ascontiguousarray(source_normals, dtype=np.float64).reshape(n, 3)
        self.radiance = np.ascontiguousarray(radiance, dtype=np.float32)
        self.occlusion = np.ascontiguousarray(occlusion, dtype=np.float32)
        if self.radiance.ndim != 4 or self.radiance.shape[3] != 3 or len(self.radiance) != n:
            raise ValueError("radiance must be (n, size, size, 3)")
        if self.occlusion.shape != self.radiance.shape[:3] + (1,):
            raise ValueError("occlusion must be (n, size, size, 1)")
        if radius is None:
            radius = default_radius(self.positions)
        if not radius > 0:
            raise ValueError("radius must be > 0")
        self.radius = float(radius)
        self.k = int(k)
        self._grid = _build_grid(self.positions, self.radius) if n else None

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def tex_size(self) -> int:
        return self.radiance.shape[1] if len(self) else 0

    def probe(self, i: int) -> Probe:
        return Probe(self.positions[i], self.source_normals[i],
                     OctTexture(self.radiance[i]), OctTexture(self.occlusion[i]))

    @classmethod
    def from_probes(cls, probes, radius: float | None = None) -> "ProbeSet":
        return cls(
            np.stack([p.position for p in probes]),
            np.stack([p.source_normal for p in probes]),
            np.stack([p.radiance_tex.data for p in probes]),
            np.stack([p.occlusion_tex.data for p in probes]),
            radius=radius,
        )

    def grid_args(self):
        """Array bundle consumed by the numba interpolation kernels."""
        if self._grid is None:
            raise ValueError("empty probe set has no index")
        cell_start, sorted_idx, lo, inv_cell, dims = self._grid
        return (self.positions, self.source_normals, self.radiance, self.occlusion,
                cell_start, sorted_idx, lo, inv_cell, dims,
                self.radius * self.radius, self.k)


def default_radius(positions: np.ndarray) -> float:
    """Four times the mean-spacing heuristic diag/sqrt(count)."""
    n = len(positions)
    if n == 0:
        return 1.0
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0:
        return 1.0
    return 4.0 * diag / np.sqrt(n)


def _build_grid(positions: np.ndarray, radius: float):
    """Uniform grid with cell size = radius (counting sort, stable order)."""
    lo = positions.min(axis=0) - radius
    inv_cell = 1.0 / radius
    dims = np.maximum(((positions.max(axis=0) + radius - lo) * inv_cell).astype(np.int64) + 1, 1)
    cells = np.minimum(((positions - lo) * inv_cell).astype(np.int64), dims - 1)
    flat = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    order = np.argsort(flat, kind="stable").astype(np.int64)
    ncells = int(dims[0] * dims[1] * dims[2])
    counts = np.bincount(flat, minlength=ncells)
    cell_start = np.zeros(ncells + 1, dtype=np.int64)
    np.cumsum(counts, out=cell_start[1:])
    return cell_start, order, lo, inv_cell, dims


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _frnn_collect(x, y, z, positions, cell_start, sorted_idx, lo, inv_cell, dims,
                  radius2, k, out_idx, out_d2):
    """Up to k nearest probes within the radius, ties broken by index."""
    cx = int((x - lo[0]) * inv_cell)
    cy = int((y - lo[1]) * inv_cell)
    cz = int((z - lo[2]) * inv_cell)
    count = 0
    for gx in range(max(0, cx - 1), min(dims[0], cx + 2)):
        for gy in range(max(0, cy - 1), min(dims[1], cy + 2)):
            for gz in range(max(0, cz - 1), min(dims[2], cz + 2)):
                cell = (gx * dims[1] + gy) * dims[2] + gz
                for s in range(cell_start[cell], cell_start[cell + 1]):
                    i = sorted_idx[s]
                    ddx = positions[i, 0] - x
                    ddy = positions[i, 1] - y
                    ddz = positions[i, 2] - z
                    d2 = ddx * ddx + ddy * ddy + ddz * ddz
                    if d2 > radius2:
                        continue
                    if count == k:
                        last = count - 1
                        if d2 > out_d2[last] or (d2 == out_d2[last] and i >= out_idx[last]):
                            continue
                        count -= 1
                    j = count
                    while j > 0 and (out_d2[j - 1] > d2 or (out_d2[j - 1] == d2 and out_idx[j - 1] > i)):
                        out_d2[j] = out_d2[j - 1]
                        out_idx[j] = out_idx[j - 1]
                        j -= 1
                    out_d2[j] = d2
                    out_idx[j] = i
                    count += 1
    return count


@njit(cache=True, inline="always")
def _neighbor_weights(x, y, z, positions, src_normals, nn_idx, nn_d2, count, out_w):
    """Spatial 1/d times back-face 0.5*(1 + dhat.n_p) + 0.01 per neighbor.

    A neighbor closer than SNAP_EPS wins outright (weight pattern 1/0...).
    """
    for j in range(count):
        i = nn_idx[j]
        d = np.sqrt(nn_d2[j])
        if d < SNAP_EPS:
            for m in range(count):
                out_w[m] = 0.0
            out_w[j] = 1.0
            return
        dx = (positions[i, 0] - x) / d
        dy = (positions[i, 1] - y) / d
        dz = (positions[i, 2] - z) / d
        cosb = dx * src_normals[i, 0] + dy * src_normals[i, 1] + dz * src_normals[i, 2]
        wb = 0.5 * (1.0 + cosb) + BACKFACE_BIAS
        out_w[j] = wb / d


@njit(cache=True, inline="always")
def _interp_textures(dirx, diry, dirz, radiance, occlusion, nn_idx, weights, count, tmp3, tmp1):
    """Weighted texture samples at one direction. Returns (r, g, b, occ)."""
    wsum = 0.0
    r = 0.0
    g = 0.0
    b = 0.0
    o = 0.0
    for j in range(count):
        w = weights[j]
        if w <= 0.0:
            continue
        i = nn_idx[j]
        _sample_bilinear(radiance[i], dirx, diry, dirz, tmp3)
        _sample_bilinear(occlusion[i], dirx, diry, dirz, tmp1)
        r += w * tmp3[0]
        g += w * tmp3[1]
        b += w * tmp3[2]
        o += w * tmp1[0]
        wsum += w
    if wsum <= 0.0:
        return 0.0, 0.0, 0.0, 0.0
    inv = 1.0 / wsum
    return r * inv, g * inv, b * inv, o * inv


@njit(cache=True, parallel=True)
def _interpolate_batch(points, dirs, positions, src_normals, radiance, occlusion,
                       cell_start, sorted_idx, lo, inv_cell, dims, radius2, k,
                       out_rgb, out_occ, out_found):
    nt = get_num_threads()
    nn_idx_b = np.empty((nt, k), dtype=np.int64)
    nn_d2_b = np.empty((nt, k), dtype=np.float64)
    weights_b = np.empty((nt, k), dtype=np.float64)
    tmp3_b = np.empty((nt, 3), dtype=np.float64)
    tmp1_b = np.empty((nt, 1), dtype=np.float64)
    for q in prange(points.shape[0]):
        tid = get_thread_id()
        nn_idx = nn_idx_b[tid]
        nn_d2 = nn_d2_b[tid]
        weights = weights_b[tid]
        x, y, z = points[q, 0], points[q, 1], points[q, 2]
        count = _frnn_collect(x, y, z, positions, cell_start, sorted_idx, lo,
                              inv_cell, dims, radius2, k, nn_idx, nn_d2)
        out_found[q] = count
        if count == 0:
            out_rgb[q, 0] = 0.0
            out_rgb[q, 1] = 0.0
            out_rgb[q, 2] = 0.0
            out_occ[q] = 0.0
            continue
        _neighbor_weights(x, y, z, positions, src_normals, nn_idx, nn_d2, count, weights)
        r, g, b, o = _interp_textures(dirs[q, 0], dirs[q, 1], dirs[q, 2],
                                      radiance, occlusion, nn_idx, weights, count,
                                      tmp3_b[tid], tmp1_b[tid])
        out_rgb[q, 0] = r
        out_rgb[q, 1] = g
        out_rgb[q, 2] = b
        out_occ[q] = o


@njit(cache=True, parallel=True)
def _occlusion_interp_grid(points, dirs, positions, src_normals, radiance, occlusion,
                           cell_start, sorted_idx, lo, inv_cell, dims, radius2, k,
                           out_occ):
    """Occlusion for every point x shared direction pair; neighbors found once
    per point and reused across all directions (the amortized fast path)."""
    n = points.shape[0]
    nd = dirs.shape[0]
    nt = get_num_threads()
    nn_idx_b = np.empty((nt, k), dtype=np.int64)
    nn_d2_b = np.empty((nt, k), dtype=np.float64)
    weights_b = np.empty((nt, k), dtype=np.float64)
    tmp1_b = np.empty((nt, 1), dtype=np.float64)
    for q in prange(n):
        tid = get_thread_id()
        nn_idx = nn_idx_b[tid]
        nn_d2 = nn_d2_b[tid]
        weights = weights_b[tid]
        tmp1 = tmp1_b[tid]
        x, y, z = points[q, 0], points[q, 1], points[q, 2]
        count = _frnn_collect(x, y, z, positions, cell_start, sorted_idx, lo,
                              inv_cell, dims, radius2, k, nn_idx, nn_d2)
        if count == 0:
            for m in range(nd):
                out_occ[q, m] = 0.0
            continue
        _neighbor_weights(x, y, z, positions, src_normals, nn_idx, nn_d2, count, weights)
        for m in range(nd):
            wsum = 0.0
            o = 0.0
            for j in range(count):
                w = weights[j]
                if w <= 0.0:
                    continue
                _sample_bilinear(occlusion[nn_idx[j]], dirs[m, 0], dirs[m, 1], dirs[m, 2], tmp1)
                o += w * tmp1[0]
                wsum += w
            out_occ[q, m] = o / wsum if wsum > 0.0 else 0.0


def occlusion_interp_grid(pset: ProbeSet, points: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """(n_points, n_dirs) interpolated occlusion, directions shared by all points."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(points), len(dirs)))
    if len(pset):
        _occlusion_interp_grid(points, dirs, *pset.grid_args(), out)
    return out


@njit(cache=True, parallel=True)
def _bake_kernel(positions, texel_dirs, t_stop,
                 node_min, node_max, node_left, node_right,
                 node_start, node_count, prim_order,
                 centers, tan_u, tan_v, normals, scales, opacity, color,
                 out_rad, out_occ):
    n_probes = positions.shape[0]
    n_tex = texel_dirs.shape[0]
    nt = get_num_threads()
    b_idx = np.empty((nt, MAX_HITS), dtype=np.int64)
    b_t = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_u = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_v = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_a = np.empty((nt, MAX_HITS), dtype=np.float64)
    for p in prange(n_probes):
        tid = get_thread_id()
        ox, oy, oz = positions[p, 0], positions[p, 1], positions[p, 2]
        for m in range(n_tex):
            dx, dy, dz = texel_dirs[m, 0], texel_dirs[m, 1], texel_dirs[m, 2]
            n = _collect_hits(ox, oy, oz, dx, dy, dz, 0.0, np.inf,
                              node_min, node_max, node_left, node_right,
                              node_start, node_count, prim_order,
                              centers, tan_u, tan_v, normals, scales, opacity,
                              b_idx[tid], b_t[tid], b_u[tid], b_v[tid], b_a[tid])
            trans = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            for h in range(n):
                i = b_idx[tid, h]
                a = b_a[tid, h]
                w = trans * a
                r += w * color[i, 0]
                g += w * color[i, 1]
                b += w * color[i, 2]
                trans *= 1.0 - a
                if trans < t_stop:
                    break
            out_rad[p, m, 0] = r
            out_rad[p, m, 1] = g
            out_rad[p, m, 2] = b
            out_occ[p, m] = 1.0 - trans


@njit(cache=True, parallel=True)
def _occlusion_traced_batch(points, dirs, t_stop,
                            node_min, node_max, node_left, node_right,
                            node_start, node_count, prim_order,
                            centers, tan_u, tan_v, normals, scales, opacity,
                            out_occ):
    n = points.shape[0]
    nt = get_num_threads()
    b_idx = np.empty((nt, MAX_HITS), dtype=np.int64)
    b_t = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_u = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_v = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_a = np.empty((nt, MAX_HITS), dtype=np.float64)
    for q in prange(n):
        tid = get_thread_id()
        cnt = _collect_hits(points[q, 0], points[q, 1], points[q, 2],
                            dirs[q, 0], dirs[q, 1], dirs[q, 2], 0.0, np.inf,
                            node_min, node_max, node_left, node_right,
                            node_start, node_count, prim_order,
                            centers, tan_u, tan_v, normals, scales, opacity,
                            b_idx[tid], b_t[tid], b_u[tid], b_v[tid], b_a[tid])
        trans = 1.0
        for h in range(cnt):
            trans *= 1.0 - b_a[tid, h]
            if trans < t_stop:
                break
        out_occ[q] = 1.0 - trans


# ---------------------------------------------------------------------------
# placement
# ---------------------------------------------------------------------------

def fuse_surface_points(scene: SurfelScene, cams, voxel: float | None = None):
    """Multi-view depth fusion: back-project valid unbiased-depth pixels from
    every camera and deduplicate on a voxel grid.

    Returns (points, normals). Raises if no camera sees any surface.
    """
    if not cams:
        raise ValueError("at least one camera required")
    pts_list, nrm_list = [], []
    for cam in cams:
        g = gb.render_gbuffers(scene, cam)
        depth = gb.unbiased_depth(g)
        valid = np.isfinite(depth)
        if not np.any(valid):
            continue
        pts = gb.depth_to_points(depth, cam)
        pts_list.append(pts[valid])
        nrm_list.append(g.normal[valid])
    if not pts_list:
        raise ValueError("no surface coverage: no valid depth in any view")
    points = np.concatenate(pts_list)
    nrms = np.concatenate(nrm_list)
    if voxel is None:
        voxel = scene.diagonal / 512.0
    if voxel <= 0:
        voxel = 1.0
    lo = points.min(axis=0)
    keys = np.floor((points - lo) / voxel).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    nvox = inverse.max() + 1
    acc_p = np.zeros((nvox, 3))
    acc_n = np.zeros((nvox, 3))
    cnt = np.zeros(nvox)
    np.add.at(acc_p, inverse, points)
    np.add.at(acc_n, inverse, nrms)
    np.add.at(cnt, inverse, 1.0)
    mean_p = acc_p / cnt[:, None]
    nlen = np.linalg.norm(acc_n, axis=1)
    # Opposing view normals cancel; such voxels are ambiguous and dropped.
    keep = nlen > 0.3 * cnt
    return mean_p[keep], acc_n[keep] / nlen[keep, None]


def farthest_point_sample(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subsample; deterministic for a fixed start index."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not (1 <= k <= n):
        raise ValueError(f"k must be in [1, {n}]")
    if not (0 <= start < n):
        raise ValueError("start index out of range")
    chosen = np.empty(k, dtype=np.int64)
    best = np.full(n, np.inf)
    cur = start
    for i in range(k):
        chosen[i] = cur
        d = np.sum((points - points[cur]) ** 2, axis=1)
        np.minimum(best, d, out=best)
        cur = int(np.argmax(best))
    return chosen


def place_probes(points: np.ndarray, normals: np.ndarray, offset: float):
    """Positions offset along normals; returns (positions, source_normals)."""
    if not offset > 0:
        raise ValueError("offset must be > 0")
    normals = normalize(np.asarray(normals, dtype=np.float64))
    return np.asarray(points, dtype=np.float64) + offset * normals, normals


def bake_probe(scene: SurfelScene, pos, tex_size: int = 16):
    """Trace one probe: per-texel blended radiance and 1 - transmittance."""
    rad, occ = bake_probes(scene, np.asarray(pos, dtype=np.float64).reshape(1, 3), tex_size)
    return OctTexture(rad[0]), OctTexture(occ[0])


def bake_probes(scene: SurfelScene, positions: np.ndarray, tex_size: int = 16,
                t_stop: float = T_STOP):
    """Vector bake; returns (radiance (n,s,s,3), occlusion (n,s,s,1)) float32."""
    n = len(positions)
    dirs = np.ascontiguousarray(texel_center_dirs(tex_size).reshape(-1, 3))
    out_rad = np.zeros((n, tex_size * tex_size, 3))
    out_occ = np.zeros((n, tex_size * tex_size))
    if len(scene):
        args = scene.kernel_args()
        _bake_kernel(np.ascontiguousarray(positions, dtype=np.float64), dirs, t_stop,
                     *args, scene.color, out_rad, out_occ)
    rad = out_rad.reshape(n, tex_size, tex_size, 3).astype(np.float32)
    occ = np.clip(out_occ.reshape(n, tex_size, tex_size, 1), 0.0, 1.0).astype(np.float32)
    return rad, occ


def build_probe_set(scene: SurfelScene, cams, count: int, tex_size: int = 16,
                    offset: float | None = None, fps_start: int = 0,
                    radius: float | None = None) -> ProbeSet:
    """Fuse -> farthest-point sample -> offset -> bake, in one call."""
    points, normals = fuse_surface_points(scene, cams)
    k = min(count, len(points))
    sel = farthest_point_sample(points, k, start=fps_start)
    if offset is None:
        offset = 0.01 * scene.diagonal
    positions, src_normals = place_probes(points[sel], normals[sel], offset)
    rad, occ = bake_probes(scene, positions, tex_size)
    return ProbeSet(positions, src_normals, rad, occ, radius=radius)


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------

def frnn_query(pset: ProbeSet, x) -> np.ndarray:
    """Indices of probes within the set radius of x, nearest first, capped."""
    if len(pset) == 0:
        return np.empty(0, dtype=np.int64)
    x = np.asarray(x, dtype=np.float64)
    args = pset.grid_args()
    (positions, _, _, _, cell_start, sorted_idx, lo, inv_cell, dims, radius2, k) = args
    nn_idx = np.empty(k, dtype=np.int64)
    nn_d2 = np.empty(k, dtype=np.float64)
    count = _frnn_collect(x[0], x[1], x[2], positions, cell_start, sorted_idx,
                          lo, inv_cell, dims, radius2, k, nn_idx, nn_d2)
    return nn_idx[:count].copy()


def interpolate(pset: ProbeSet, x, w_i) -> tuple[np.ndarray, float, int]:
    """Weighted probe lookup at point x, direction w_i.

    Returns (indirect RGB, occlusion, neighbor count); zeros with count 0
    when no probe is in range (callers fall back to direct lighting).
    """
    if len(pset) == 0:
        return np.zeros(3), 0.0, 0
    pts = np.asarray(x, dtype=np.float64).reshape(1, 3)
    dirs = np.asarray(w_i, dtype=np.float64).reshape(1, 3)
    out_rgb = np.empty((1, 3))
    out_occ = np.empty(1)
    out_found = np.empty(1, dtype=np.int64)
    _interpolate_batch(pts, dirs, *pset.grid_args(), out_rgb, out_occ, out_found)
    return out_rgb[0], float(out_occ[0]), int(out_found[0])


def interpolate_batch(pset: ProbeSet, points: np.ndarray, dirs: np.ndarray):
    """Vector version of interpolate; returns (rgb, occ, neighbor counts)."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    out_rgb = np.empty((len(points), 3))
    out_occ = np.empty(len(points))
    out_found = np.empty(len(points), dtype=np.int64)
    if len(pset) == 0:
        out_rgb[:] = 0.0
        out_occ[:] = 0.0
        out_found[:] = 0
    else:
        _interpolate_batch(points, dirs, *pset.grid_args(), out_rgb, out_occ, out_found)
    return out_rgb, out_occ, out_found


def traced_occlusion_batch(scene: SurfelScene, points: np.ndarray, dirs: np.ndarray,
                           t_stop: float = T_STOP) -> np.ndarray:
    """Reference occlusion 1 - transmittance for (point, direction) pairs."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(points))
    if len(scene):
        _occlusion_traced_batch(points, dirs, t_stop, *scene.kernel_args(), out)
    return out


@dataclass
class ProbeErrorReport:
    n_samples: int
    occlusion_mean_abs: float
    occlusion_p95_abs: float
    radiance_mean_abs: float
    interp_seconds: float
    traced_seconds: float

    @property
    def speedup(self) -> float:
        return self.traced_seconds / max(self.interp_seconds, 1e-12)


def interpolated_vs_traced_error(scene: SurfelScene, pset: ProbeSet,
                                 samples: int = 10000, seed: int = 0) -> ProbeErrorReport:
    """Compare probe interpolation against fresh ray tracing at random
    near-surface points and directions; also times both paths."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(pset), samples)
    spacing = pset.radius / 4.0
    points = pset.positions[idx] + rng.uniform(-0.5, 0.5, (samples, 3)) * spacing
    dirs = normalize(rng.standard_normal((samples, 3)))

    t0 = time.perf_counter()
    rgb_i, occ_i, _ = interpolate_batch(pset, points, dirs)
    t1 = time.perf_counter()
    occ_t = traced_occlusion_batch(scene, points, dirs)
    t2 = time.perf_counter()

    rad_t = np.zeros((samples, 3))
    if len(scene):
        rad, _ = _bake_pairs(scene, points, dirs)
        rad_t = rad
    occ_err = np.abs(occ_i - occ_t)
    return ProbeErrorReport(
        n_samples=samples,
        occlusion_mean_abs=float(occ_err.mean()),
        occlusion_p95_abs=float(np.percentile(occ_err, 95)),
        radiance_mean_abs=float(np.abs(rgb_i - rad_t).mean()),
        interp_seconds=t1 - t0,
        traced_seconds=t2 - t1,
    )


def _bake_pairs(scene: SurfelScene, points: np.ndarray, dirs: np.ndarray):
    """Traced blended radiance and occlusion for arbitrary (point, dir) pairs."""
    n = len(points)
    rad = np.zeros((n, 3))
    occ = np.zeros(n)
    _traced_radiance_batch(points, dirs, T_STOP, *scene.kernel_args(), scene.color, rad, occ)
    return rad, occ


@njit(cache=True, parallel=True)
def _traced_radiance_batch(points, dirs, t_stop,
                           node_min, node_max, node_left, node_right,
                           node_start, node_count, prim_order,
                           centers, tan_u, tan_v, normals, scales, opacity, color,
                           out_rad, out_occ):
    n = points.shape[0]
    nt = get_num_threads()
    b_idx = np.empty((nt, MAX_HITS), dtype=np.int64)
    b_t = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_u = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_v = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_a = np.empty((nt, MAX_HITS), dtype=np.float64)
    for q in prange(n):
        tid = get_thread_id()
        cnt = _collect_hits(points[q, 0], points[q, 1], points[q, 2],
                            dirs[q, 0], dirs[q, 1], dirs[q, 2], 0.0, np.inf,
                            node_min, node_max, node_left, node_right,
                            node_start, node_count, prim_order,
                            centers, tan_u, tan_v, normals, scales, opacity,
                            b_idx[tid], b_t[tid], b_u[tid], b_v[tid], b_a[tid])
        trans = 1.0
        for h in range(cnt):
            i = b_idx[tid, h]
            a = b_a[tid, h]
            w = trans * a
            out_rad[q, 0] += w * color[i, 0]
            out_rad[q, 1] += w * color[i, 1]
            out_rad[q, 2] += w * color[i, 2]
            trans *= 1.0 - a
            if trans < t_stop:
                break
        out_occ[q] = 1.0 - trans


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_probes(pset: ProbeSet, path) -> None:
    """`SOPS1 <count> <tex_size>` header, then packed per-probe f32 records."""
    s = pset.tex_size if len(pset) else 16
    with open(path, "wb") as f:
        f.write(_MAGIC + f" {len(pset)} {s}\n".encode("ascii"))
        for i in range(len(pset)):
            f.write(pset.positions[i].astype("<f4").tobytes())
            f.write(pset.source_normals[i].astype("<f4").tobytes())
            f.write(pset.radiance[i].astype("<f4").tobytes())
            f.write(pset.occlusion[i].astype("<f4").tobytes())


def load_probes(path, radius: float | None = None) -> ProbeSet:
    with open(path, "rb") as f:
        header = f.readline(64)
        payload = f.read()
    parts = header.split()
    if len(parts) != 3 or parts[0] != _MAGIC:
        raise FormatError("missing probe file header")
    count, size = int(parts[1]), int(parts[2])
    rec = (3 + 3 + 3 * size * size + size * size) * 4
    if len(payload) != count * rec:
        raise FormatError(f"probe payload size mismatch (record {len(payload) // max(rec, 1)})")
    data = np.frombuffer(payload, dtype="<f4").reshape(count, rec // 4)
    if not np.all(np.isfinite(data)):
        raise FormatError("non-finite probe data")
    positions = data[:, 0:3].astype(np.float64)
    normals = data[:, 3:6].astype(np.float64)
    rad = data[:, 6:6 + 3 * size * size].reshape(count, size, size, 3)
    occ = data[:, 6 + 3 * size * size:].reshape(count, size, size, 1)
    return ProbeSet(positions, normals, rad, occ, radius=radius)
