"""Image metrics and the reconstruction loss terms, exposed as plain
measurements (no optimizer consumes them here).

PSNR assumes data range 1 and is capped at 99 dB for identical inputs. SSIM
uses the canonical 11x11 Gaussian window, sigma 1.5, k1=0.01, k2=0.03, and
averages over fully valid windows only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .probes import ProbeSet, bake_probes
from .geometry import SurfelScene

PSNR_CAP = 99.0
_BCE_CLAMP = 1e-6

# Loss weights quoted for combined reporting; nothing optimizes against them.
LAMBDA_D2N = 0.05
LAMBDA_MASK = 0.05
LAMBDA_LAM = 0.001
LAMBDA_SOPS = 1.0


@dataclass(frozen=True)
class ImagePair:
    prediction: np.ndarray
    reference: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.prediction, dtype=np.float64)
        r = np.asarray(self.reference, dtype=np.float64)
        object.__setattr__(self, "prediction", p)
        object.__setattr__(self, "reference", r)
        if p.shape != r.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {r.shape}")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(r))):
            raise ValueError("non-finite image values")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != p.shape[:2]:
                raise ValueError("mask shape must match image height/width")
            object.__setattr__(self, "mask", m)

    def _flat_diff(self) -> np.ndarray:
        d = self.prediction - self.reference
        if self.mask is not None:
            d = d[self.mask]
        return d


def l1(pair: ImagePair) -> float:
    return float(np.abs(pair._flat_diff()).mean())


def psnr(pair: ImagePair) -> float:
    mse = float((pair._flat_diff() ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(float(-10.0 * np.log10(mse)), PSNR_CAP)


def _gaussian_window(radius: int = 5, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _window_means(img: np.ndarray, kernel: np.ndarray, radius: int) -> np.ndarray:
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[radius:-radius, radius:-radius]


def ssim(pair: ImagePair, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over valid (fully interior) windows, data range 1."""
    p, r = pair.prediction, pair.reference
    if p.ndim == 2:
        p = p[..., None]
        r = r[..., None]
    radius = 5
    if p.shape[0] < 2 * radius + 1 or p.shape[1] < 2 * radius + 1:
        raise ValueError("image smaller than the 11x11 SSIM window")
    kernel = _gaussian_window(radius)
    c1 = k1 ** 2
    c2 = k2 ** 2
    vals = []
    for c in range(p.shape[2]):
        x = p[..., c]
        y = r[..., c]
        mx = _window_means(x, kernel, radius)
        my = _window_means(y, kernel, radius)
        mxx = _window_means(x * x, kernel, radius)
        myy = _window_means(y * y, kernel, radius)
        mxy = _window_means(x * y, kernel, radius)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def render_loss(pair: ImagePair) -> float:
    """L1 plus 0.2 * (1 - SSIM); the 0.2 weight is part of the contract."""
    return l1(pair) + 0.2 * (1.0 - ssim(pair))


def loss_d2n(normal: np.ndarray, normal_from_depth: np.ndarray,
             mask: np.ndarray | None = None) -> float:
    """Mean 1 - (N . N_d) over valid pixels."""
    n = np.asarray(normal, dtype=np.float64)
    nd = np.asarray(normal_from_depth, dtype=np.float64)
    dots = np.sum(n * nd, axis=-1)
    valid = np.isfinite(dots)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not np.any(valid):
        raise ValueError("no valid pixels for depth-normal consistency")
    return float(np.mean(1.0 - dots[valid]))


def loss_mask(weight: np.ndarray, mask: np.ndarray) -> float:
    """Binary cross-entropy between blend weight and the coverage mask."""
    w = np.clip(np.asarray(weight, dtype=np.float64), _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    k = np.asarray(mask, dtype=np.float64)
    if w.shape != k.shape:
        raise ValueError("weight and mask shapes differ")
    return float(np.mean(-k * np.log(w) - (1.0 - k) * np.log(1.0 - w)))


def loss_lam(roughness: np.ndarray, metallic: np.ndarray) -> float:
    """Material prior favoring rough dielectric: L1(R,1) + L1(M,0)."""
    r = np.asarray(roughness, dtype=np.float64)
    m = np.asarray(metallic, dtype=np.float64)
    return float(np.abs(r - 1.0).mean() + np.abs(m).mean())


def loss_sops(pset: ProbeSet, scene: SurfelScene) -> float:
    """Texel-mean L1 of stored probe textures against freshly traced ones."""
    if len(pset) == 0:
        raise ValueError("empty probe set")
    rad_ref, occ_ref = bake_probes(scene, pset.positions, pset.tex_size)
    rad_err = np.abs(pset.radiance.astype(np.float64) - rad_ref.astype(np.float64)).mean()
    occ_err = np.abs(pset.occlusion.astype(np.float64) - occ_ref.astype(np.float64)).mean()
    return float(rad_err + occ_err)
