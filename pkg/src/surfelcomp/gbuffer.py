"""Multi-target rendering: per-pixel alpha blending of color, weight, depth,
normal and material planes, plus unbiased depth and depth-derived quantities.

Blending accumulates sum(T_i * alpha_i * b_i) per target over the ordered hit
chain. Depth is the distance along the unit pixel ray, so unprojecting the
unbiased depth lands back on the blended surface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, prange, get_num_threads, get_thread_id

from .errors import FormatError
from .geometry import MAX_HITS, T_STOP, SurfelScene, _collect_hits
from .mathutils import normalize, quat_normalize, quat_rotate, quat_to_matrix

# Unbiased depth D/W is unstable near silhouettes; below this weight the
# pixel carries no usable surface.
W_MIN = 0.05


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; orientation rotates camera axes (+X right, +Y up,
    looking along -Z) into world space."""

    position: np.ndarray
    orientation: np.ndarray  # unit quaternion (w, x, y, z)
    fov_y: float  # radians
    width: int
    height: int
    near: float = 1e-4
    far: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "orientation", quat_normalize(self.orientation))
        if not (0.0 < self.fov_y < np.pi):
            raise ValueError("fov_y must be in (0, pi)")
        if not (self.width >= 1 and self.height >= 1):
            raise ValueError("resolution must be >= 1")
        if not (0.0 < self.near < self.far):
            raise ValueError("require 0 < near < far")

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def ray_directions(self) -> np.ndarray:
        """(H, W, 3) unit ray directions through pixel centers."""
        tan_half = np.tan(0.5 * self.fov_y)
        aspect = self.width / self.height
        xs = ((np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0) * tan_half * aspect
        ys = (1.0 - (np.arange(self.height) + 0.5) / self.height * 2.0) * tan_half
        xx, yy = np.meshgrid(xs, ys, indexing="xy")
        local = np.stack([xx, yy, -np.ones_like(xx)], axis=-1)
        world = local @ self.rotation().T
        return normalize(world)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points -> (x_pix, y_pix, ray_depth); behind-camera flagged NaN."""
        p = np.asarray(points, dtype=np.float64) - self.position
        cam = p @ self.rotation()
        z = cam[..., 2]
        ok = z < 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            tan_half = np.tan(0.5 * self.fov_y)
            aspect = self.width / self.height
            xn = cam[..., 0] / (-z) / (tan_half * aspect)
            yn = cam[..., 1] / (-z) / tan_half
        xpix = np.where(ok, (xn + 1.0) * 0.5 * self.width - 0.5, np.nan)
        ypix = np.where(ok, (1.0 - yn) * 0.5 * self.height - 0.5, np.nan)
        depth = np.where(ok, np.linalg.norm(p, axis=-1), np.nan)
        return xpix, ypix, depth

    @staticmethod
    def look_at(position, target, up=(0.0, 0.0, 1.0), **kw) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        fwd = normalize(np.asarray(target, dtype=np.float64) - position)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-8:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right = normalize(right)
        upv = np.cross(right, fwd)
        m = np.stack([right, upv, -fwd], axis=-1)
        w = np.sqrt(max(0.0, 1.0 + m[0, 0] + m[1, 1] + m[2, 2])) / 2.0
        if w > 1e-8:
            q = np.array([w, (m[2, 1] - m[1, 2]) / (4 * w),
                          (m[0, 2] - m[2, 0]) / (4 * w),
                          (m[1, 0] - m[0, 1]) / (4 * w)])
        else:
            # Fallback for 180-degree orientations.
            i = int(np.argmax(np.diag(m)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(max(1e-12, 1.0 + m[i, i] - m[j, j] - m[k, k])) * 2.0
            q = np.empty(4)
            q[0] = (m[k, j] - m[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (m[j, i] + m[i, j]) / s
            q[1 + k] = (m[k, i] + m[i, k]) / s
        return Camera(position=position, orientation=q, **kw)


@dataclass
class GBuffer:
    """Blended per-pixel planes from multi-target rendering."""

    color: np.ndarray      # (H, W, 3)
    weight: np.ndarray     # (H, W)
    depth: np.ndarray      # (H, W), premultiplied (divide by weight to unbias)
    normal: np.ndarray     # (H, W, 3), unit where weight > 0
    albedo: np.ndarray     # (H, W, 3)
    roughness: np.ndarray  # (H, W)
    metallic: np.ndarray   # (H, W)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class ShadingPointSet:
    """World-space shading inputs recovered from a G-buffer."""

    position: np.ndarray   # (H, W, 3)
    normal: np.ndarray     # (H, W, 3)
    view_dir: np.ndarray   # (H, W, 3), unit, towards the camera
    albedo: np.ndarray
    roughness: np.ndarray
    metallic: np.ndarray
    valid: np.ndarray      # (H, W) bool


@njit(cache=True, parallel=True)
def _render_kernel(ox, oy, oz, dirs, t_min, t_max, t_stop,
                   node_min, node_max, node_left, node_right,
                   node_start, node_count, prim_order,
                   centers, tan_u, tan_v, normals, scales, opacity,
                   color, albedo, roughness, metallic,
                   out_color, out_weight, out_depth, out_normal,
                   out_albedo, out_rough, out_metal):
    npix = dirs.shape[0]
    nt = get_num_threads()
    b_idx = np.empty((nt, MAX_HITS), dtype=np.int64)
    b_t = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_u = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_v = np.empty((nt, MAX_HITS), dtype=np.float64)
    b_a = np.empty((nt, MAX_HITS), dtype=np.float64)
    for p in prange(npix):
        tid = get_thread_id()
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        n = _collect_hits(ox, oy, oz, dx, dy, dz, t_min, t_max,
                          node_min, node_max, node_left, node_right,
                          node_start, node_count, prim_order,
                          centers, tan_u, tan_v, normals, scales, opacity,
                          b_idx[tid], b_t[tid], b_u[tid], b_v[tid], b_a[tid])
        trans = 1.0
        for k in range(n):
            i = b_idx[tid, k]
            a = b_a[tid, k]
            w = trans * a
            out_color[p, 0] += w * color[i, 0]
            out_color[p, 1] += w * color[i, 1]
            out_color[p, 2] += w * color[i, 2]
            out_weight[p] += w
            out_depth[p] += w * b_t[tid, k]
            # Normals face the camera during blending (two-sided surfels).
            nxv = normals[i, 0]
            nyv = normals[i, 1]
            nzv = normals[i, 2]
            if nxv * dx + nyv * dy + nzv * dz > 0.0:
                nxv = -nxv
                nyv = -nyv
                nzv = -nzv
            out_normal[p, 0] += w * nxv
            out_normal[p, 1] += w * nyv
            out_normal[p, 2] += w * nzv
            out_albedo[p, 0] += w * albedo[i, 0]
            out_albedo[p, 1] += w * albedo[i, 1]
            out_albedo[p, 2] += w * albedo[i, 2]
            out_rough[p] += w * roughness[i]
            out_metal[p] += w * metallic[i]
            trans *= 1.0 - a
            if trans < t_stop:
                break


def render_gbuffers(scene: SurfelScene, cam: Camera, t_stop: float = T_STOP) -> GBuffer:
    """Cast one ray per pixel and alpha-blend all seven targets."""
    h, w = cam.height, cam.width
    dirs = np.ascontiguousarray(cam.ray_directions().reshape(-1, 3))
    out_color = np.zeros((h * w, 3))
    out_weight = np.zeros(h * w)
    out_depth = np.zeros(h * w)
    out_normal = np.zeros((h * w, 3))
    out_albedo = np.zeros((h * w, 3))
    out_rough = np.zeros(h * w)
    out_metal = np.zeros(h * w)
    if len(scene):
        args = scene.kernel_args()
        _render_kernel(cam.position[0], cam.position[1], cam.position[2],
                       dirs, cam.near, cam.far, t_stop, *args,
                       scene.color, scene.albedo, scene.roughness, scene.metallic,
                       out_color, out_weight, out_depth, out_normal,
                       out_albedo, out_rough, out_metal)
    # Blended normals are weighted averages; report them unit length.
    norms = np.linalg.norm(out_normal, axis=1)
    nz = norms > 1e-12
    out_normal[nz] /= norms[nz, None]
    out_normal[~nz] = 0.0
    return GBuffer(
        color=out_color.reshape(h, w, 3),
        weight=out_weight.reshape(h, w),
        depth=out_depth.reshape(h, w),
        normal=out_normal.reshape(h, w, 3),
        albedo=out_albedo.reshape(h, w, 3),
        roughness=out_rough.reshape(h, w),
        metallic=out_metal.reshape(h, w),
    )


def unbiased_depth(g: GBuffer, w_min: float = W_MIN) -> np.ndarray:
    """D/W where the accumulated weight is trustworthy; NaN elsewhere."""
    with np.errstate(divide="ignore", invalid="ignore"):
        d = g.depth / g.weight
    return np.where(g.weight >= w_min, d, np.nan)


def depth_to_points(depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Unproject a ray-depth plane to world-space points (NaN propagates)."""
    dirs = cam.ray_directions()
    return cam.position + depth[..., None] * dirs


def normal_from_depth(depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Cross product of world-space finite differences of the point grid.

    Border pixels and pixels with any invalid neighbor come back NaN. The
    result is oriented towards the camera, matching the blending convention.
    """
    pts = depth_to_points(depth, cam)
    out = np.full_like(pts, np.nan)
    ddx = pts[1:-1, 2:] - pts[1:-1, :-2]
    ddy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(ddx, ddy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        n = n / norm
    n[norm[..., 0] < 1e-12] = np.nan
    to_cam = cam.position - pts[1:-1, 1:-1]
    flip = np.sum(n * to_cam, axis=-1) < 0.0
    n[flip] *= -1.0
    out[1:-1, 1:-1] = n
    return out


def shading_points(g: GBuffer, cam: Camera, w_min: float = W_MIN) -> ShadingPointSet:
    """Recover shading inputs from the G-buffer (positions from unbiased depth)."""
    depth = unbiased_depth(g, w_min)
    valid = np.isfinite(depth) & (np.linalg.norm(g.normal, axis=-1) > 0.5)
    pos = depth_to_points(depth, cam)
    dirs = cam.ray_directions()
    return ShadingPointSet(
        position=pos,
        normal=g.normal,
        view_dir=-dirs,
        albedo=g.albedo,
        roughness=g.roughness,
        metallic=g.metallic,
        valid=valid,
    )


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

_PLANE_ORDER = ("color", "weight", "depth", "normal", "albedo", "roughness", "metallic")


def export_planes(g: GBuffer, out_dir) -> Path:
    """Raw float32 planes plus a JSON sidecar naming order and dimensions."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = g.shape
    planes = []
    for name in _PLANE_ORDER:
        arr = getattr(g, name).astype("<f4")
        fname = f"{name}.f32"
        (out / fname).write_bytes(arr.tobytes())
        planes.append({"name": name, "file": fname,
                       "channels": 1 if arr.ndim == 2 else arr.shape[2]})
    sidecar = {"width": w, "height": h, "dtype": "float32-le", "planes": planes}
    (out / "planes.json").write_text(json.dumps(sidecar, indent=2))
    return out / "planes.json"


def load_planes(sidecar_path) -> GBuffer:
    sidecar_path = Path(sidecar_path)
    meta = json.loads(sidecar_path.read_text())
    h, w = meta["height"], meta["width"]
    fields = {}
    for p in meta["planes"]:
        raw = np.frombuffer((sidecar_path.parent / p["file"]).read_bytes(), dtype="<f4")
        shape = (h, w) if p["channels"] == 1 else (h, w, p["channels"])
        if raw.size != np.prod(shape):
            raise FormatError(f"plane {p['name']} has wrong size")
        fields[p["name"]] = raw.reshape(shape).astype(np.float64)
    return GBuffer(**fields)


def linear_to_srgb_u8(img: np.ndarray) -> np.ndarray:
    """Gamma 2.2 LDR preview conversion."""
    return (np.clip(img, 0.0, 1.0) ** (1.0 / 2.2) * 255.0 + 0.5).astype(np.uint8)


def export_preview(g: GBuffer, path) -> None:
    from PIL import Image

    Image.fromarray(linear_to_srgb_u8(g.color)).save(path)
