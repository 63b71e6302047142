"""Surfel scene representation, ray-surfel intersection and BVH-accelerated
ordered alpha traversal.

A surfel is an oriented 2D Gaussian disc: its tangent frame comes from a unit
quaternion, its footprint from two half-extent scales. Ray queries return
hits sorted front-to-back with the Gaussian alpha already evaluated, which is
what both G-buffer blending and occlusion tracing consume.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import FormatError
from .mathutils import quat_multiply, quat_normalize, quat_rotate, quat_to_matrix

# Gaussian alpha below this is dropped entirely (keeps hit lists short).
ALPHA_CUTOFF = 1.0 / 255.0
# Ordered traversal stops once accumulated transmittance falls below this.
T_STOP = 1e-3
# Disc radius, in sigmas, at which alpha of a fully opaque surfel reaches
# ALPHA_CUTOFF: sqrt(2*ln(255)). BVH bounds must use this radius so the
# accelerated hit set matches exhaustive intersection exactly.
CUTOFF_SIGMA = float(np.sqrt(2.0 * np.log(255.0)))
MAX_LEAF = 4
_SAH_BINS = 16
# Upper bound on hits that can matter before transmittance drops below
# T_STOP given ALPHA_CUTOFF: (1 - 1/255)^n < 1e-3 for n >= 1763.
MAX_HITS = 2048

_RECORD_FLOATS = 18
_MAGIC = b"SURFEL1"


class SurfelFormatError(FormatError):
    """Raised for malformed surfel files; carries the offending record index."""

    def __init__(self, message: str, record: int | None = None):
        self.record = record
        if record is not None:
            message = f"{message} (record {record})"
        super().__init__(message)


@dataclass(frozen=True)
class Surfel:
    """One oriented Gaussian disc with radiance color and PBR material."""

    center: np.ndarray
    orientation: np.ndarray  # unit quaternion, (w, x, y, z)
    scale: np.ndarray  # tangent-plane half extents, both > 0
    opacity: float
    color: np.ndarray
    albedo: np.ndarray
    roughness: float
    metallic: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=np.float64))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64))
        object.__setattr__(self, "albedo", np.asarray(self.albedo, dtype=np.float64))
        _validate_fields(
            self.center[None], self.orientation[None], self.scale[None],
            np.array([self.opacity]), self.color[None], self.albedo[None],
            np.array([self.roughness]), np.array([self.metallic]),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit length
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "direction", d)
        if not (0.0 <= self.t_min < self.t_max):
            raise ValueError("require 0 <= t_min < t_max")


@dataclass(frozen=True)
class SurfelHit:
    surfel_index: int
    t: float
    local_uv: np.ndarray  # planar offset in the surfel tangent frame
    alpha: float


@dataclass(frozen=True)
class PlacementTransform:
    """Similarity transform used to drop an object into a scene."""

    translation: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    uniform_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        if not self.uniform_scale > 0:
            raise ValueError("uniform_scale must be > 0")

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return quat_rotate(self.rotation, np.asarray(pts, dtype=np.float64) * self.uniform_scale) + self.translation

    def inverse(self) -> "PlacementTransform":
        inv_q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        inv_s = 1.0 / self.uniform_scale
        inv_t = -inv_s * quat_rotate(inv_q, self.translation)
        return PlacementTransform(inv_t, inv_q, inv_s)

    @staticmethod
    def identity() -> "PlacementTransform":
        return PlacementTransform(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]), 1.0)


def _validate_fields(centers, quats, scales, opacity, color, albedo, roughness, metallic):
    if not np.all(np.isfinite(centers)):
        raise ValueError("non-finite surfel center")
    norms = np.linalg.norm(quats, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= 1e-6):
        raise ValueError("surfel quaternion not normalized")
    if not np.all(scales > 0):
        raise ValueError("surfel scale components must be > 0")
    for name, arr, lo, hi in (
        ("opacity", opacity, 0.0, 1.0),
        ("albedo", albedo, 0.0, 1.0),
        ("roughness", roughness, 0.0, 1.0),
        ("metallic", metallic, 0.0, 1.0),
    ):
        if not (np.all(arr >= lo) and np.all(arr <= hi)):
            raise ValueError(f"surfel {name} out of [{lo}, {hi}]")
    if not (np.all(np.isfinite(color)) and np.all(color >= 0)):
        raise ValueError("surfel color must be finite and >= 0")


class SurfelScene:
    """A list of surfels stored as flat arrays, with a lazily built BVH.

    Scene arrays are treated as immutable after construction; the BVH is
    built once on first query and shared by any number of reader threads.
    """

    def __init__(self, centers, orientations, scales, opacity, color, albedo,
                 roughness, metallic):
        self.centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.orientations = np.ascontiguousarray(orientations, dtype=np.float64).reshape(n, 4)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(n, 2)
        self.opacity = np.ascontiguousarray(opacity, dtype=np.float64).reshape(n)
        self.color = np.ascontiguousarray(color, dtype=np.float64).reshape(n, 3)
        self.albedo = np.ascontiguousarray(albedo, dtype=np.float64).reshape(n, 3)
        self.roughness = np.ascontiguousarray(roughness, dtype=np.float64).reshape(n)
        self.metallic = np.ascontiguousarray(metallic, dtype=np.float64).reshape(n)
        if n:
            _validate_fields(self.centers, self.orientations, self.scales, self.opacity,
                             self.color, self.albedo, self.roughness, self.metallic)
        self._bvh = None
        self._frames = None

    @classmethod
    def from_surfels(cls, surfels) -> "SurfelScene":
        if not surfels:
            return cls.empty()
        return cls(
            np.stack([s.center for s in surfels]),
            np.stack([s.orientation for s in surfels]),
            np.stack([s.scale for s in surfels]),
            np.array([s.opacity for s in surfels]),
            np.stack([s.color for s in surfels]),
            np.stack([s.albedo for s in surfels]),
            np.array([s.roughness for s in surfels]),
            np.array([s.metallic for s in surfels]),
        )

    @classmethod
    def empty(cls) -> "SurfelScene":
        z = np.zeros((0, 3))
        return cls(z, np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0), z.copy(),
                   z.copy(), np.zeros(0), np.zeros(0))

    def __len__(self) -> int:
        return len(self.centers)

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.centers[i], self.orientations[i], self.scales[i],
                      float(self.opacity[i]), self.color[i], self.albedo[i],
                      float(self.roughness[i]), float(self.metallic[i]))

    def frames(self):
        """Per-surfel (tangent_u, tangent_v, normal) rows of the rotation matrix."""
        if self._frames is None:
            m = quat_to_matrix(quat_normalize(self.orientations))
            self._frames = (
                np.ascontiguousarray(m[:, :, 0]),
                np.ascontiguousarray(m[:, :, 1]),
                np.ascontiguousarray(m[:, :, 2]),
            )
        return self._frames

    def normals(self) -> np.ndarray:
        return self.frames()[2]

    def disc_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-surfel AABBs of the alpha-cutoff disc extents."""
        tu, tv, _ = self.frames()
        half = CUTOFF_SIGMA * np.sqrt(
            (tu * self.scales[:, :1]) ** 2 + (tv * self.scales[:, 1:2]) ** 2
        )
        return self.centers - half, self.centers + half

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        lo, hi = self.disc_bounds()
        return lo.min(axis=0), hi.max(axis=0)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def build_accel(self) -> "Bvh":
        if self._bvh is None:
            lo, hi = self.disc_bounds() if len(self) else (np.zeros((0, 3)), np.zeros((0, 3)))
            self._bvh = build_bvh(lo, hi)
        return self._bvh

    @property
    def accel(self) -> "Bvh":
        return self.build_accel()

    def invalidate_accel(self):
        self._bvh = None
        self._frames = None

    def kernel_args(self):
        """Flat array bundle consumed by the numba traversal kernels."""
        bvh = self.build_accel()
        tu, tv, nrm = self.frames()
        return (bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right,
                bvh.node_start, bvh.node_count, bvh.prim_order,
                self.centers, tu, tv, nrm, self.scales, self.opacity)


@dataclass(frozen=True)
class Bvh:
    """Flattened binned-SAH BVH over surfel discs (max leaf size 4)."""

    node_min: np.ndarray
    node_max: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    prim_order: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_left)


def build_bvh(prim_lo: np.ndarray, prim_hi: np.ndarray) -> Bvh:
    """Binned-SAH build over primitive AABBs; splits until leaves hold <= 4."""
    n = len(prim_lo)
    if n == 0:
        return Bvh(np.zeros((1, 3)), np.zeros((1, 3)),
                   np.full(1, -1, np.int32), np.full(1, -1, np.int32),
                   np.zeros(1, np.int32), np.zeros(1, np.int32),
                   np.zeros(0, np.int32))
    centroids = 0.5 * (prim_lo + prim_hi)

    node_min, node_max = [], []
    node_left, node_right, node_start, node_count = [], [], [], []
    prim_order: list[int] = []

    def new_node(idx):
        node_min.append(prim_lo[idx].min(axis=0))
        node_max.append(prim_hi[idx].max(axis=0))
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(0)
        node_count.append(0)
        return len(node_left) - 1

    # Explicit stack of (node_id, prim index array) to avoid recursion limits.
    root = new_node(np.arange(n))
    stack = [(root, np.arange(n))]
    while stack:
        node_id, idx = stack.pop()
        if len(idx) <= MAX_LEAF:
            node_start[node_id] = len(prim_order)
            node_count[node_id] = len(idx)
            prim_order.extend(idx.tolist())
            continue
        c = centroids[idx]
        ext = c.max(axis=0) - c.min(axis=0)
        axis = int(np.argmax(ext))
        if ext[axis] <= 0.0:
            # All centroids coincide: arbitrary median split keeps leaves small.
            half = len(idx) // 2
            left_idx, right_idx = idx[:half], idx[half:]
        else:
            lo_c = c[:, axis].min()
            bin_of = np.minimum(
                ((c[:, axis] - lo_c) / ext[axis] * _SAH_BINS).astype(np.int64),
                _SAH_BINS - 1,
            )
            counts = np.bincount(bin_of, minlength=_SAH_BINS)
            bin_lo = np.full((_SAH_BINS, 3), np.inf)
            bin_hi = np.full((_SAH_BINS, 3), -np.inf)
            np.minimum.at(bin_lo, bin_of, prim_lo[idx])
            np.maximum.at(bin_hi, bin_of, prim_hi[idx])
            # Prefix/suffix accumulate bounds and counts over the bins.
            lcount = np.cumsum(counts)[:-1]
            rcount = len(idx) - lcount
            llo = np.minimum.accumulate(bin_lo, axis=0)[:-1]
            lhi = np.maximum.accumulate(bin_hi, axis=0)[:-1]
            rlo = np.minimum.accumulate(bin_lo[::-1], axis=0)[::-1][1:]
            rhi = np.maximum.accumulate(bin_hi[::-1], axis=0)[::-1][1:]

            def area(lo, hi):
                d = np.maximum(hi - lo, 0.0)
                return d[:, 0] * d[:, 1] + d[:, 1] * d[:, 2] + d[:, 2] * d[:, 0]

            cost = np.where(
                (lcount > 0) & (rcount > 0),
                area(llo, lhi) * lcount + area(rlo, rhi) * rcount,
                np.inf,
            )
            best = int(np.argmin(cost))
            if not np.isfinite(cost[best]):
                half = len(idx) // 2
                order = np.argsort(c[:, axis], kind="stable")
                left_idx, right_idx = idx[order[:half]], idx[order[half:]]
            else:
                mask = bin_of <= best
                left_idx, right_idx = idx[mask], idx[~mask]
        left = new_node(left_idx)
        right = new_node(right_idx)
        node_left[node_id] = left
        node_right[node_id] = right
        stack.append((left, left_idx))
        stack.append((right, right_idx))

    return Bvh(
        np.ascontiguousarray(node_min, dtype=np.float64),
        np.ascontiguousarray(node_max, dtype=np.float64),
        np.asarray(node_left, dtype=np.int32),
        np.asarray(node_right, dtype=np.int32),
        np.asarray(node_start, dtype=np.int32),
        np.asarray(node_count, dtype=np.int32),
        np.asarray(prim_order, dtype=np.int32),
    )


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _surfel_hit(i, ox, oy, oz, dx, dy, dz, t_min, t_max,
                centers, tan_u, tan_v, normals, scales, opacity):
    """Intersect one ray with surfel i. Returns (t, u, v, alpha); alpha<0 = miss."""
    nx, ny, nz = normals[i, 0], normals[i, 1], normals[i, 2]
    denom = dx * nx + dy * ny + dz * nz
    if abs(denom) <= 1e-8:
        return -1.0, 0.0, 0.0, -1.0
    cx = centers[i, 0] - ox
    cy = centers[i, 1] - oy
    cz = centers[i, 2] - oz
    t = (cx * nx + cy * ny + cz * nz) / denom
    if t <= t_min or t >= t_max:
        return -1.0, 0.0, 0.0, -1.0
    px = ox + t * dx - centers[i, 0]
    py = oy + t * dy - centers[i, 1]
    pz = oz + t * dz - centers[i, 2]
    u = px * tan_u[i, 0] + py * tan_u[i, 1] + pz * tan_u[i, 2]
    v = px * tan_v[i, 0] + py * tan_v[i, 1] + pz * tan_v[i, 2]
    su = u / scales[i, 0]
    sv = v / scales[i, 1]
    alpha = opacity[i] * np.exp(-0.5 * (su * su + sv * sv))
    if alpha > 1.0:
        alpha = 1.0
    if alpha <= ALPHA_CUTOFF:
        return -1.0, 0.0, 0.0, -1.0
    return t, u, v, alpha


@njit(cache=True)
def _collect_hits(ox, oy, oz, dx, dy, dz, t_min, t_max,
                  node_min, node_max, node_left, node_right,
                  node_start, node_count, prim_order,
                  centers, tan_u, tan_v, normals, scales, opacity,
                  hit_idx, hit_t, hit_u, hit_v, hit_a):
    """Gather every surfel hit along a ray, insertion-sorted by (t, index).

    The caller owns the fixed-size output buffers. If more than MAX_HITS
    surfels pass the alpha cutoff the farthest are dropped, which cannot
    change any transmittance-truncated result (see MAX_HITS bound).
    """
    cap = hit_idx.shape[0]
    inv_dx = 1.0 / dx if dx != 0.0 else np.inf
    inv_dy = 1.0 / dy if dy != 0.0 else np.inf
    inv_dz = 1.0 / dz if dz != 0.0 else np.inf
    n_hits = 0
    stack = np.empty(128, dtype=np.int32)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        # Slab test against [t_min, t_max].
        t0 = (node_min[node, 0] - ox) * inv_dx
        t1 = (node_max[node, 0] - ox) * inv_dx
        if t0 > t1:
            t0, t1 = t1, t0
        lo = t0 if t0 > t_min else t_min
        hi = t1 if t1 < t_max else t_max
        t0 = (node_min[node, 1] - oy) * inv_dy
        t1 = (node_max[node, 1] - oy) * inv_dy
        if t0 > t1:
            t0, t1 = t1, t0
        if t0 > lo:
            lo = t0
        if t1 < hi:
            hi = t1
        t0 = (node_min[node, 2] - oz) * inv_dz
        t1 = (node_max[node, 2] - oz) * inv_dz
        if t0 > t1:
            t0, t1 = t1, t0
        if t0 > lo:
            lo = t0
        if t1 < hi:
            hi = t1
        if lo > hi:
            continue
        cnt = node_count[node]
        if node_left[node] < 0:
            start = node_start[node]
            for k in range(cnt):
                i = prim_order[start + k]
                t, u, v, a = _surfel_hit(i, ox, oy, oz, dx, dy, dz, t_min, t_max,
                                         centers, tan_u, tan_v, normals, scales, opacity)
                if a < 0.0:
                    continue
                # Insertion sort by (t, surfel index); drop farthest on overflow.
                if n_hits == cap:
                    if t > hit_t[cap - 1] or (t == hit_t[cap - 1] and i >= hit_idx[cap - 1]):
                        continue
                    n_hits -= 1
                j = n_hits
                while j > 0 and (hit_t[j - 1] > t or (hit_t[j - 1] == t and hit_idx[j - 1] > i)):
                    hit_t[j] = hit_t[j - 1]
                    hit_idx[j] = hit_idx[j - 1]
                    hit_u[j] = hit_u[j - 1]
                    hit_v[j] = hit_v[j - 1]
                    hit_a[j] = hit_a[j - 1]
                    j -= 1
                hit_t[j] = t
                hit_idx[j] = i
                hit_u[j] = u
                hit_v[j] = v
                hit_a[j] = a
                n_hits += 1
        else:
            stack[top] = node_left[node]
            stack[top + 1] = node_right[node]
            top += 2
    return n_hits


@njit(cache=True, inline="always")
def _truncate_hits(n_hits, hit_a, t_stop):
    """Number of sorted hits to keep and the transmittance after them."""
    trans = 1.0
    for k in range(n_hits):
        trans *= 1.0 - hit_a[k]
        if trans < t_stop:
            return k + 1, trans
    return n_hits, trans


@njit(cache=True)
def _transmittance_one(ox, oy, oz, dx, dy, dz, t_min, t_max, t_stop,
                       node_min, node_max, node_left, node_right,
                       node_start, node_count, prim_order,
                       centers, tan_u, tan_v, normals, scales, opacity,
                       hit_idx, hit_t, hit_u, hit_v, hit_a):
    n = _collect_hits(ox, oy, oz, dx, dy, dz, t_min, t_max,
                      node_min, node_max, node_left, node_right,
                      node_start, node_count, prim_order,
                      centers, tan_u, tan_v, normals, scales, opacity,
                      hit_idx, hit_t, hit_u, hit_v, hit_a)
    _, trans = _truncate_hits(n, hit_a, t_stop)
    return trans


def _hit_buffers():
    return (np.empty(MAX_HITS, dtype=np.int64), np.empty(MAX_HITS, dtype=np.float64),
            np.empty(MAX_HITS, dtype=np.float64), np.empty(MAX_HITS, dtype=np.float64),
            np.empty(MAX_HITS, dtype=np.float64))


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def surfel_normal(s: Surfel) -> np.ndarray:
    """Unit normal of the surfel disc (rotation applied to +Z)."""
    return quat_rotate(quat_normalize(s.orientation), np.array([0.0, 0.0, 1.0]))


def ray_surfel_intersect(ray: Ray, s: Surfel) -> SurfelHit | None:
    """Ray vs. one surfel's tangent plane; None if missed or alpha negligible."""
    scene = SurfelScene.from_surfels([s])
    tu, tv, nrm = scene.frames()
    t, u, v, a = _surfel_hit(
        0, ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        ray.t_min, ray.t_max,
        scene.centers, tu, tv, nrm, scene.scales, scene.opacity)
    if a < 0.0:
        return None
    return SurfelHit(0, float(t), np.array([u, v]), float(a))


def trace_ordered(ray: Ray, scene: SurfelScene, t_stop: float = T_STOP) -> list[SurfelHit]:
    """Front-to-back hits along the ray, stopping once transmittance < t_stop."""
    if len(scene) == 0:
        return []
    args = scene.kernel_args()
    bufs = _hit_buffers()
    n = _collect_hits(ray.origin[0], ray.origin[1], ray.origin[2],
                      ray.direction[0], ray.direction[1], ray.direction[2],
                      ray.t_min, ray.t_max, *args, *bufs)
    keep, _ = _truncate_hits(n, bufs[4], t_stop)
    hit_idx, hit_t, hit_u, hit_v, hit_a = bufs
    return [
        SurfelHit(int(hit_idx[k]), float(hit_t[k]),
                  np.array([hit_u[k], hit_v[k]]), float(hit_a[k]))
        for k in range(keep)
    ]


def transmittance(ray: Ray, scene: SurfelScene, t_stop: float = T_STOP) -> float:
    """Product of (1 - alpha) over ordered hits; 1.0 means unoccluded."""
    if len(scene) == 0:
        return 1.0
    args = scene.kernel_args()
    bufs = _hit_buffers()
    return float(_transmittance_one(
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        ray.t_min, ray.t_max, t_stop, *args, *bufs))


def apply_transform(scene: SurfelScene, xf: PlacementTransform) -> SurfelScene:
    """Similarity-transform a scene: new scene, accel left unbuilt."""
    centers = xf.apply_points(scene.centers)
    orientations = quat_multiply(xf.rotation, scene.orientations) if len(scene) else scene.orientations
    return SurfelScene(centers, orientations, scene.scales * xf.uniform_scale,
                       scene.opacity, scene.color, scene.albedo,
                       scene.roughness, scene.metallic)


def save_surfels(scene: SurfelScene, path) -> None:
    """Write `SURFEL1 <count>` header plus packed little-endian f32 records."""
    data = np.empty((len(scene), _RECORD_FLOATS), dtype="<f4")
    data[:, 0:3] = scene.centers
    data[:, 3:7] = scene.orientations
    data[:, 7:9] = scene.scales
    data[:, 9] = scene.opacity
    data[:, 10:13] = scene.color
    data[:, 13:16] = scene.albedo
    data[:, 16] = scene.roughness
    data[:, 17] = scene.metallic
    with open(path, "wb") as f:
        f.write(_MAGIC + b" " + str(len(scene)).encode() + b"\n")
        f.write(data.tobytes())


def load_surfels(path) -> SurfelScene:
    """Parse a surfel file; raises SurfelFormatError naming the bad record."""
    with open(path, "rb") as f:
        header = f.readline(64)
        payload = f.read()
    parts = header.split()
    if len(parts) != 2 or parts[0] != _MAGIC or not header.endswith(b"\n"):
        raise SurfelFormatError("missing header")
    try:
        count = int(parts[1])
    except ValueError:
        raise SurfelFormatError("missing header") from None
    if count < 0:
        raise SurfelFormatError("missing header")
    expected = count * _RECORD_FLOATS * 4
    if len(payload) != expected:
        bad = min(len(payload) // (_RECORD_FLOATS * 4), count)
        raise SurfelFormatError("payload size does not match header count", record=bad)
    data = np.frombuffer(payload, dtype="<f4").reshape(count, _RECORD_FLOATS).astype(np.float64)
    finite = np.all(np.isfinite(data), axis=1)
    if not np.all(finite):
        raise SurfelFormatError("non-finite field", record=int(np.argmin(finite)))
    try:
        return SurfelScene(data[:, 0:3], data[:, 3:7], data[:, 7:9], data[:, 9],
                           data[:, 10:13], data[:, 13:16], data[:, 16], data[:, 17])
    except ValueError as e:
        raise SurfelFormatError(str(e)) from None
