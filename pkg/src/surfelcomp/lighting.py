"""Environment-light estimation plumbing: 360-degree panorama capture from
the surfel radiance field, hole completion, multi-exposure HDR fusion, and
conversion to the octahedral relighting texture.

The captured field is linear radiance; LDR panoramas are derived per exposure
value with clamp + gamma 2.2, which the fusion step inverts exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .geometry import SurfelScene, T_STOP
from .gbuffer import _render_kernel
from .mathutils import normalize
from .octmap import OctTexture, texel_center_dirs, texel_solid_angles

GAMMA = 2.2
DEFAULT_EVS = (-5.0, -2.5, 0.0)
DEFAULT_RES = (512, 1024)


@dataclass
class PartialPanorama:
    """LDR equirect capture with blended normals and coverage alpha."""

    rgb: np.ndarray     # (H, W, 3) in [0, 1]
    normal: np.ndarray  # (H, W, 3)
    alpha: np.ndarray   # (H, W) in [0, 1]


@dataclass
class EVStack:
    """LDR panoramas at strictly increasing exposure values."""

    exposures: tuple
    panoramas: list

    def __post_init__(self):
        if len(self.exposures) != len(self.panoramas):
            raise ValueError("exposures and panoramas must pair up")
        evs = tuple(float(e) for e in self.exposures)
        if any(b <= a for a, b in zip(evs, evs[1:])):
            raise ValueError("exposure values must be strictly increasing")
        self.exposures = evs


@dataclass
class HdrEnvironment:
    equirect: np.ndarray  # (H, W, 3) linear radiance
    oct: OctTexture


def equirect_dirs(height: int, width: int) -> np.ndarray:
    """Unit directions at equirect pixel centers; +Z at row 0 (the pole)."""
    theta = np.pi * (np.arange(height) + 0.5) / height
    phi = 2.0 * np.pi * (np.arange(width) + 0.5) / width
    st, ct = np.sin(theta), np.cos(theta)
    return np.stack([
        st[:, None] * np.cos(phi)[None, :],
        st[:, None] * np.sin(phi)[None, :],
        np.broadcast_to(ct[:, None], (height, width)),
    ], axis=-1)


def equirect_solid_angles(height: int, width: int) -> np.ndarray:
    """(H,) per-row pixel solid angles (rows share the same value)."""
    edges = np.pi * np.arange(height + 1) / height
    return (np.cos(edges[:-1]) - np.cos(edges[1:])) * (2.0 * np.pi / width)


def tonemap_ldr(radiance: np.ndarray, ev: float = 0.0) -> np.ndarray:
    """Clamp + gamma LDR capture at the given exposure value."""
    return np.clip(np.asarray(radiance) * 2.0 ** ev, 0.0, 1.0) ** (1.0 / GAMMA)


def linearize_ldr(ldr: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(ldr), 0.0, 1.0) ** GAMMA


def capture_radiance(scene: SurfelScene, location, res: tuple[int, int] = DEFAULT_RES,
                     t_stop: float = T_STOP):
    """Trace the full sphere; returns linear (radiance, normal, alpha) planes."""
    h, w = res
    loc = np.asarray(location, dtype=np.float64)
    dirs = np.ascontiguousarray(equirect_dirs(h, w).reshape(-1, 3))
    npx = h * w
    color = np.zeros((npx, 3))
    weight = np.zeros(npx)
    depth = np.zeros(npx)
    nrm = np.zeros((npx, 3))
    alb = np.zeros((npx, 3))
    rough = np.zeros(npx)
    metal = np.zeros(npx)
    if len(scene):
        args = scene.kernel_args()
        _render_kernel(loc[0], loc[1], loc[2], dirs, 0.0, np.inf, t_stop, *args,
                       scene.color, scene.albedo, scene.roughness, scene.metallic,
                       color, weight, depth, nrm, alb, rough, metal)
    n = np.linalg.norm(nrm, axis=1)
    nz = n > 1e-12
    nrm[nz] /= n[nz, None]
    nrm[~nz] = 0.0
    return (color.reshape(h, w, 3), nrm.reshape(h, w, 3), weight.reshape(h, w))


def capture_panorama(scene: SurfelScene, location, res: tuple[int, int] = DEFAULT_RES,
                     ev: float = 0.0) -> PartialPanorama:
    """360-degree sweep: LDR rgb, partial normal map, and coverage alpha."""
    radiance, nrm, alpha = capture_radiance(scene, location, res)
    return PartialPanorama(rgb=tonemap_ldr(radiance, ev), normal=nrm, alpha=alpha)


def complete_panorama(p: PartialPanorama, completer: str = "identity-fill",
                      external_image: np.ndarray | None = None) -> np.ndarray:
    """Fill unreconstructed pixels; known pixels (alpha > 0.5) pass through.

    identity-fill uses each row's mean of known pixels (global mean for rows
    with no coverage); external takes hole values from a supplied panorama.
    """
    known = p.alpha > 0.5
    out = p.rgb.copy()
    if completer == "identity-fill":
        if not np.any(known):
            out[:] = 0.0
            return out
        gmean = p.rgb[known].mean(axis=0)
        for i in range(p.rgb.shape[0]):
            row_known = known[i]
            if np.any(row_known):
                fill = p.rgb[i][row_known].mean(axis=0)
            else:
                fill = gmean
            out[i][~row_known] = fill
        return out
    if completer == "external":
        if external_image is None:
            raise ValueError("external completer requires an image")
        ext = np.asarray(external_image)
        if ext.shape != p.rgb.shape:
            raise FormatError(
                f"external panorama shape {ext.shape} does not match capture {p.rgb.shape}")
        out[~known] = ext[~known]
        return out
    raise ValueError(f"unknown completer: {completer}")


def fuse_hdr(stack: EVStack, saturation: float = 1.0 - 1e-6) -> np.ndarray:
    """Merge bracketed LDR panoramas into linear HDR radiance.

    Each LDR is linearized and divided by 2^ev, then averaged under a hat
    weight peaking at mid-gray. Pixels with no usable exposure anywhere fall
    back to the lowest-EV (least clipped) estimate.
    """
    if len(stack.panoramas) == 1:
        warnings.warn("single-exposure stack: HDR fusion is a passthrough")
        return linearize_ldr(stack.panoramas[0]) / 2.0 ** stack.exposures[0]
    num = None
    den = None
    for ev, pano in zip(stack.exposures, stack.panoramas):
        ldr = np.clip(np.asarray(pano, dtype=np.float64), 0.0, 1.0)
        rad = (ldr ** GAMMA) / 2.0 ** ev
        w = 1.0 - np.abs(2.0 * ldr - 1.0)
        if num is None:
            num = w * rad
            den = w.copy()
        else:
            num += w * rad
            den += w
    lowest = np.clip(np.asarray(stack.panoramas[0], dtype=np.float64), 0.0, 1.0)
    fallback = (lowest ** GAMMA) / 2.0 ** stack.exposures[0]
    usable = den > 1e-9
    out = fallback
    out[usable] = num[usable] / den[usable]
    return out


def sample_equirect(eq: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Bilinear equirect lookup for unit dirs; phi wraps, theta clamps."""
    eq = np.asarray(eq, dtype=np.float64)
    h, w = eq.shape[:2]
    d = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2.0 * np.pi)
    fu = phi / (2.0 * np.pi) * w - 0.5
    fv = theta / np.pi * h - 0.5
    j0 = np.floor(fu).astype(np.int64)
    i0 = np.floor(fv).astype(np.int64)
    wu = fu - j0
    wv = fv - i0
    j1 = np.mod(j0 + 1, w)
    j0 = np.mod(j0, w)
    i1 = np.clip(i0 + 1, 0, h - 1)
    i0 = np.clip(i0, 0, h - 1)
    wu = wu[..., None]
    wv = wv[..., None]
    return ((1 - wu) * (1 - wv) * eq[i0, j0] + wu * (1 - wv) * eq[i0, j1]
            + (1 - wu) * wv * eq[i1, j0] + wu * wv * eq[i1, j1])


def equirect_to_oct(equirect: np.ndarray, size: int = 512) -> OctTexture:
    """Resample an equirect radiance map onto the octahedral layout."""
    eq = np.asarray(equirect, dtype=np.float64)
    if eq.ndim != 3 or eq.shape[2] != 3 or not np.all(np.isfinite(eq)):
        raise ValueError("expected finite (H, W, 3) equirect radiance")
    dirs = texel_center_dirs(size)
    vals = sample_equirect(eq, dirs)
    return OctTexture(np.maximum(vals, 0.0).astype(np.float32))


def estimate_environment(scene: SurfelScene, location,
                         completer: str = "identity-fill",
                         external_hdr: np.ndarray | None = None,
                         evs: tuple = DEFAULT_EVS,
                         res: tuple[int, int] = DEFAULT_RES,
                         oct_size: int = 512) -> HdrEnvironment:
    """Capture -> per-EV completion -> HDR fusion -> octahedral conversion.

    external_hdr, when given, is a linear-radiance panorama used to fill
    holes; it is re-exposed at every EV of the bracket before completion.
    """
    radiance, nrm, alpha = capture_radiance(scene, location, res)
    panos = []
    for ev in evs:
        partial = PartialPanorama(rgb=tonemap_ldr(radiance, ev), normal=nrm, alpha=alpha)
        ext = tonemap_ldr(external_hdr, ev) if external_hdr is not None else None
        panos.append(complete_panorama(partial, completer, external_image=ext))
    hdr = fuse_hdr(EVStack(tuple(evs), panos))
    return HdrEnvironment(equirect=hdr, oct=equirect_to_oct(hdr, oct_size))
