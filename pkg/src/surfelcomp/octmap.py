"""Octahedral direction<->texture mapping, texture sampling, solid angles,
Hammersley sequences and the environment importance-sampling table.

Convention: +Z maps to the square center, -Z to the four corners; border
addressing wraps across the octahedral fold so bilinear taps never clamp.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

from .errors import FormatError
from . import hdrio
from .mathutils import normalize, orthonormal_basis

LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class OctTexture:
    """Square texture indexed by octahedral direction; 1 or 3 channels."""

    data: np.ndarray  # (size, size, channels) float32, non-negative

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", d)
        if d.ndim != 3 or d.shape[0] != d.shape[1] or d.shape[2] not in (1, 3):
            raise ValueError("OctTexture data must be (size, size, 1|3)")
        if d.shape[0] < 2:
            raise ValueError("OctTexture size must be >= 2")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("OctTexture values must be finite and >= 0")
        if d.shape[2] == 1 and np.any(d > 1.0):
            raise ValueError("occlusion texture values must be <= 1")

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @staticmethod
    def zeros(size: int, channels: int = 3) -> "OctTexture":
        return OctTexture(np.zeros((size, size, channels), dtype=np.float32))

    @staticmethod
    def constant(size: int, value, channels: int = 3) -> "OctTexture":
        data = np.empty((size, size, channels), dtype=np.float32)
        data[:] = value
        return OctTexture(data)


# ---------------------------------------------------------------------------
# direction <-> uv
# ---------------------------------------------------------------------------

def dir_to_oct_uv(d: np.ndarray) -> np.ndarray:
    """Map unit direction(s) to uv in [0,1]^2 via the octahedral fold."""
    d = np.asarray(d, dtype=np.float64)
    n = np.abs(d).sum(axis=-1)
    if np.any(n < 1e-12):
        raise ValueError("zero direction has no octahedral coordinates")
    p = d[..., :2] / n[..., None]
    south = d[..., 2] < 0.0
    folded = (1.0 - np.abs(p[..., ::-1])) * np.where(p >= 0.0, 1.0, -1.0)
    p = np.where(south[..., None], folded, p)
    return 0.5 * p + 0.5


def oct_uv_to_dir(uv: np.ndarray) -> np.ndarray:
    """Inverse of dir_to_oct_uv; returns unit direction(s)."""
    uv = np.asarray(uv, dtype=np.float64)
    p = 2.0 * uv - 1.0
    z = 1.0 - np.abs(p).sum(axis=-1)
    folded = (1.0 - np.abs(p[..., ::-1])) * np.where(p >= 0.0, 1.0, -1.0)
    xy = np.where((z < 0.0)[..., None], folded, p)
    d = np.concatenate([xy, z[..., None]], axis=-1)
    return normalize(d)


@njit(cache=True, inline="always")
def _dir_to_uv_scalar(x, y, z):
    n = abs(x) + abs(y) + abs(z)
    px = x / n
    py = y / n
    if z < 0.0:
        fx = (1.0 - abs(py)) * (1.0 if px >= 0.0 else -1.0)
        fy = (1.0 - abs(px)) * (1.0 if py >= 0.0 else -1.0)
        px, py = fx, fy
    return 0.5 * px + 0.5, 0.5 * py + 0.5


@njit(cache=True, inline="always")
def _uv_to_dir_scalar(u, v):
    px = 2.0 * u - 1.0
    py = 2.0 * v - 1.0
    z = 1.0 - abs(px) - abs(py)
    if z < 0.0:
        fx = (1.0 - abs(py)) * (1.0 if px >= 0.0 else -1.0)
        fy = (1.0 - abs(px)) * (1.0 if py >= 0.0 else -1.0)
        px, py = fx, fy
    inv = 1.0 / np.sqrt(px * px + py * py + z * z)
    return px * inv, py * inv, z * inv


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _wrap_texel(i, j, n):
    # Octahedral border wrap: mirror across the crossed edge, flip the other axis.
    for _ in range(2):
        if j < 0:
            i = n - 1 - i
            j = -1 - j
        elif j >= n:
            i = n - 1 - i
            j = 2 * n - 1 - j
        if i < 0:
            j = n - 1 - j
            i = -1 - i
        elif i >= n:
            j = n - 1 - j
            i = 2 * n - 1 - i
    return i, j


@njit(cache=True)
def _sample_bilinear(data, dx, dy, dz, out):
    """Bilinear octahedral lookup of (size,size,C) data at a unit direction."""
    n = data.shape[0]
    u, v = _dir_to_uv_scalar(dx, dy, dz)
    fu = u * n - 0.5
    fv = v * n - 0.5
    j0 = int(np.floor(fu))
    i0 = int(np.floor(fv))
    wu = fu - j0
    wv = fv - i0
    i0w, j0w = _wrap_texel(i0, j0, n)
    i1w, j1w = _wrap_texel(i0, j0 + 1, n)
    i2w, j2w = _wrap_texel(i0 + 1, j0, n)
    i3w, j3w = _wrap_texel(i0 + 1, j0 + 1, n)
    w00 = (1.0 - wu) * (1.0 - wv)
    w01 = wu * (1.0 - wv)
    w10 = (1.0 - wu) * wv
    w11 = wu * wv
    for c in range(data.shape[2]):
        out[c] = (w00 * data[i0w, j0w, c] + w01 * data[i1w, j1w, c]
                  + w10 * data[i2w, j2w, c] + w11 * data[i3w, j3w, c])


def sample_texture(tex: OctTexture, d: np.ndarray) -> np.ndarray:
    """Bilinear texture value(s) for unit direction(s) d."""
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    dirs = d.reshape(-1, 3)
    out = np.empty((len(dirs), tex.channels), dtype=np.float64)
    _sample_many(tex.data, dirs, out)
    if single:
        return out[0, 0] if tex.channels == 1 else out[0]
    return out[:, 0] if tex.channels == 1 else out


@njit(cache=True)
def _sample_many(data, dirs, out):
    tmp = np.empty(data.shape[2], dtype=np.float64)
    for k in range(dirs.shape[0]):
        _sample_bilinear(data, dirs[k, 0], dirs[k, 1], dirs[k, 2], tmp)
        for c in range(data.shape[2]):
            out[k, c] = tmp[c]


def _spherical_triangle_area(a, b, c):
    """Unsigned spherical excess via the Van Oosterom-Strackee tangent form."""
    triple = np.abs(np.einsum("...i,...i->...", a, np.cross(b, c)))
    denom = (1.0 + np.einsum("...i,...i->...", a, b)
             + np.einsum("...i,...i->...", b, c)
             + np.einsum("...i,...i->...", c, a))
    return 2.0 * np.arctan2(triple, denom)


@lru_cache(maxsize=32)
def texel_solid_angles(size: int) -> np.ndarray:
    """(size, size) array of texel solid angles; sums to 4*pi."""
    ticks = np.arange(size + 1) / size
    uu, vv = np.meshgrid(ticks, ticks, indexing="xy")
    corners = oct_uv_to_dir(np.stack([uu, vv], axis=-1))  # (size+1, size+1, 3)
    a = corners[:-1, :-1]
    b = corners[:-1, 1:]
    c = corners[1:, 1:]
    d = corners[1:, :-1]
    # Split each quad along its more central diagonal; the other choice
    # degenerates for the size-2 corner texels whose diagonal is antipodal.
    ac = 1.0 + np.einsum("...i,...i->...", a, c)
    bd = 1.0 + np.einsum("...i,...i->...", b, d)
    use_ac = ac >= bd
    area_ac = _spherical_triangle_area(a, b, c) + _spherical_triangle_area(a, c, d)
    area_bd = _spherical_triangle_area(a, b, d) + _spherical_triangle_area(b, c, d)
    omega = np.where(use_ac, area_ac, area_bd)
    omega.setflags(write=False)
    return omega


def texel_solid_angle(tex: OctTexture, i: int, j: int) -> float:
    """Solid angle in steradians of texel (row i, column j)."""
    if not (0 <= i < tex.size and 0 <= j < tex.size):
        raise IndexError("texel index out of range")
    return float(texel_solid_angles(tex.size)[i, j])


def texel_center_dirs(size: int) -> np.ndarray:
    """(size, size, 3) unit directions at texel centers."""
    ticks = (np.arange(size) + 0.5) / size
    uu, vv = np.meshgrid(ticks, ticks, indexing="xy")
    return oct_uv_to_dir(np.stack([uu, vv], axis=-1))


# ---------------------------------------------------------------------------
# Hammersley / hemisphere sampling
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _radical_inverse_base2(i):
    bits = np.uint32(i)
    bits = (bits << np.uint32(16)) | (bits >> np.uint32(16))
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | ((bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1))
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | ((bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2))
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | ((bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4))
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | ((bits & np.uint32(0xFF00FF00)) >> np.uint32(8))
    return float(bits) * 2.3283064365386963e-10


def hammersley(i: int, n: int) -> tuple[float, float]:
    """Point i of the n-point 2D Hammersley set: (i/n, bit-reversed i)."""
    if not (0 <= i < n):
        raise ValueError("require 0 <= i < n")
    return i / n, float(_radical_inverse_base2(i))


def hammersley_set(n: int) -> np.ndarray:
    idx = np.arange(n)
    u2 = np.array([_radical_inverse_base2(int(i)) for i in idx])
    return np.stack([idx / n, u2], axis=-1)


def uniform_hemisphere_dir(u1: float, u2: float, n: np.ndarray) -> np.ndarray:
    """Uniform-density hemisphere direction about unit normal n (cos θ = u1)."""
    n = np.asarray(n, dtype=np.float64)
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    z = u1
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * u2
    t, bt = orthonormal_basis(n)
    local = (r * np.cos(phi))[..., None] * t + (r * np.sin(phi))[..., None] * bt + z[..., None] * n
    return local


# ---------------------------------------------------------------------------
# importance sampling (environment PDF over the sphere)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingTable:
    """Inverse-CDF table over texels, pmf proportional to luminance x solid angle."""

    texel_pmf: np.ndarray      # (size, size) float64, sums to 1
    row_cdf: np.ndarray        # (size,) cumulative row marginals
    cond_cdf: np.ndarray       # (size, size) per-row conditional cumulatives
    solid_angles: np.ndarray   # (size, size)
    total_intensity: float     # luminance integral over the sphere

    @property
    def size(self) -> int:
        return len(self.row_cdf)


def build_sampling_table(tex: OctTexture) -> SamplingTable:
    """Build the texel pmf and cumulative tables used for importance sampling."""
    data = tex.data.astype(np.float64)
    lum = data[:, :, 0] if tex.channels == 1 else data @ LUMA
    omega = texel_solid_angles(tex.size)
    weights = lum * omega
    total = weights.sum()
    if not total > 0:
        raise ValueError("unsampleable: texture has no positive luminance")
    pmf = weights / total
    row_marginal = pmf.sum(axis=1)
    row_cdf = np.cumsum(row_marginal)
    row_cdf[-1] = 1.0
    safe = np.where(row_marginal > 0, row_marginal, 1.0)
    cond_cdf = np.cumsum(pmf, axis=1) / safe[:, None]
    cond_cdf[:, -1] = 1.0
    return SamplingTable(pmf, row_cdf, np.ascontiguousarray(cond_cdf), np.asarray(omega),
                         float(total))


@njit(cache=True, inline="always")
def _searchsorted_right(cdf, u):
    lo = 0
    hi = len(cdf)
    while lo < hi:
        mid = (lo + hi) // 2
        if cdf[mid] <= u:
            lo = mid + 1
        else:
            hi = mid
    if lo >= len(cdf):
        lo = len(cdf) - 1
    return lo


@njit(cache=True, inline="always")
def _importance_sample_scalar(row_cdf, cond_cdf, pmf, omega, u1, u2):
    """Pick a texel by inverse CDF, jitter inside it; returns (dir, pdf)."""
    size = len(row_cdf)
    i = _searchsorted_right(row_cdf, u1)
    lo = row_cdf[i - 1] if i > 0 else 0.0
    span = row_cdf[i] - lo
    r1 = (u1 - lo) / span if span > 0 else 0.5
    j = _searchsorted_right(cond_cdf[i], u2)
    lo2 = cond_cdf[i, j - 1] if j > 0 else 0.0
    span2 = cond_cdf[i, j] - lo2
    r2 = (u2 - lo2) / span2 if span2 > 0 else 0.5
    u = (j + r2) / size
    v = (i + r1) / size
    dx, dy, dz = _uv_to_dir_scalar(u, v)
    pdf = pmf[i, j] / omega[i, j]
    return dx, dy, dz, pdf


def importance_sample(tab: SamplingTable, tex: OctTexture, u1: float, u2: float):
    """Draw one direction proportional to the texel pmf; returns (dir, pdf)."""
    dx, dy, dz, pdf = _importance_sample_scalar(
        tab.row_cdf, tab.cond_cdf, tab.texel_pmf, tab.solid_angles,
        float(u1), float(u2))
    return np.array([dx, dy, dz]), float(pdf)


# ---------------------------------------------------------------------------
# serialization (environment-map HDR container with an OCT tag)
# ---------------------------------------------------------------------------

def save_oct_texture(tex: OctTexture, path) -> None:
    rgb = tex.data if tex.channels == 3 else np.repeat(tex.data, 3, axis=2)
    hdrio.write_hdr(path, rgb, extra_header=[f"OCT={tex.channels}"])


def load_oct_texture(path) -> OctTexture:
    rgb, header = hdrio.read_hdr(path)
    tag = next((ln for ln in header if ln.startswith("OCT=")), None)
    if tag is None:
        raise FormatError("not an octahedral texture file (missing OCT tag)")
    channels = int(tag.split("=", 1)[1])
    if channels == 1:
        return OctTexture(np.clip(rgb[:, :, :1], 0.0, 1.0))
    return OctTexture(rgb)
