"""Quantitative evaluation: SSIM, a structural garment-overlap proxy, a
spectral texture proxy, a small-feature Frechet distance, and the
bias/variance decomposition of repeated generations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    run_id: str = ""
    t_s: int = 0
    t_t: int = 0
    ssim: float = float("nan")
    garment_iou: float = float("nan")
    spectrum_dist: float = float("nan")
    frechet_toy: float = float("nan")
    bias2: float = float("nan")
    variance: float = float("nan")
    mse: float = float("nan")
    seed_count: int = 0

    CSV_HEADER = ("run_id", "t_s", "t_t", "ssim", "garment_iou",
                  "spectrum_dist", "frechet_toy", "bias2", "variance", "mse",
                  "seed_count")

    def row(self):
        return [getattr(self, name) for name in self.CSV_HEADER]

    def validate(self):
        if not -1.0 <= self.ssim <= 1.0:
            raise MetricError(f"ssim {self.ssim} outside [-1, 1]")
        if not 0.0 <= self.garment_iou <= 1.0:
            raise MetricError(f"iou {self.garment_iou} outside [0, 1]")
        for name in ("bias2", "variance", "mse"):
            v = getattr(self, name)
            if np.isfinite(v) and v < 0:
                raise MetricError(f"{name} is negative: {v}")
        return self


# ---------------------------------------------------------------------------
# SSIM: 11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03, L = 1

def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()

_SSIM_WINDOW = _gaussian_window()


def _filter2_valid(img, kernel):
    """2-D correlation, 'valid' region, serial accumulation order."""
    kh, kw = kernel.shape
    h, w = img.shape
    out = np.zeros((h - kh + 1, w - kw + 1), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * img[i:i + out.shape[0], j:j + out.shape[1]]
    return out


def ssim(a, b):
    """Mean SSIM over channels and positions; inputs in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"ssim: shapes {a.shape} != {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx = _filter2_valid(x, _SSIM_WINDOW)
        my = _filter2_valid(y, _SSIM_WINDOW)
        mxx = _filter2_valid(x * x, _SSIM_WINDOW)
        myy = _filter2_valid(y * y, _SSIM_WINDOW)
        mxy = _filter2_valid(x * y, _SSIM_WINDOW)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# garment IoU: palette-threshold segmentation against the ground-truth mask

PALETTE_THRESHOLD = 0.15


def garment_iou(generated, instance):
    """IoU of the palette-thresholded garment region vs. the known mask."""
    img = np.asarray(generated, dtype=np.float64)
    mask_gt = instance.garment_mask_gt.astype(bool)
    palette = np.asarray(instance.texture_params.palette(), dtype=np.float64)
    dists = np.stack([np.sqrt(np.sum((img - color) ** 2, axis=-1)) for color in palette])
    predicted = np.min(dists, axis=0) < PALETTE_THRESHOLD
    predicted &= instance.body_mask.astype(bool)
    inter = np.count_nonzero(predicted & mask_gt)
    union = np.count_nonzero(predicted | mask_gt)
    if union == 0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# radial spectrum distance: texture proxy

SPECTRUM_SIZE = 64
MIN_MASK_PIXELS = 16


def _radial_log_spectrum(gray, size=SPECTRUM_SIZE):
    h, w = gray.shape
    win = np.outer(np.hanning(h), np.hanning(w))
    padded = np.zeros((size, size))
    padded[:h, :w] = gray * win
    spec = np.abs(np.fft.fft2(padded))
    spec = np.fft.fftshift(spec)
    log_spec = np.log1p(spec)
    cy = cx = size // 2
    yy, xx = np.mgrid[:size, :size]
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2).astype(int)
    nbins = size // 2
    profile = np.zeros(nbins)
    for k in range(nbins):
        sel = r == k
        profile[k] = log_spec[sel].mean() if np.any(sel) else 0.0
    return profile


def spectrum_distance(generated, reference, mask):
    """L1 distance between radially averaged log spectra of the masked
    grayscale regions (DC bin excluded)."""
    mask = np.asarray(mask).astype(bool)
    if np.count_nonzero(mask) < MIN_MASK_PIXELS:
        raise MetricError(f"spectrum_distance: mask has fewer than {MIN_MASK_PIXELS} pixels")
    ys, xs = np.nonzero(mask)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    profiles = []
    for img in (generated, reference):
        img = np.asarray(img, dtype=np.float64)
        gray = img.mean(axis=-1) if img.ndim == 3 else img
        crop = gray[y0:y1, x0:x1] * mask[y0:y1, x0:x1]
        profiles.append(_radial_log_spectrum(crop))
    # bin 0 is the DC term: constant offsets must not register
    return float(np.mean(np.abs(profiles[0][1:] - profiles[1][1:])))


# ---------------------------------------------------------------------------
# toy Frechet distance over small feature vectors

FRECHET_REG = 1e-6


def frechet_gaussian(mu_a, cov_a, mu_b, cov_b):
    """||mu_a - mu_b||^2 + Tr(C_a + C_b - 2 (C_a C_b)^{1/2})."""
    diff = np.sum((mu_a - mu_b) ** 2)
    # symmetrized product keeps the eigendecomposition real
    sa = _sqrtm_psd(cov_a)
    inner = sa @ cov_b @ sa
    tr_cross = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0, None)))
    return float(max(0.0, diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross))


def _sqrtm_psd(mat):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    vals = np.clip(vals, 0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def feature_stats(features):
    feats = np.asarray(features, dtype=np.float64)
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    cov = np.atleast_2d(cov) + FRECHET_REG * np.eye(feats.shape[1])
    return mu, cov


def toy_frechet(set_a, set_b, feature_encoder):
    """Frechet distance between feature clouds of two image sets.

    `feature_encoder` is a callable x -> feature vector or a projection
    matrix applied to the flattened input."""
    if callable(feature_encoder):
        enc = feature_encoder
    else:
        proj = np.asarray(feature_encoder, dtype=np.float64)
        enc = lambda x: np.asarray(x, dtype=np.float64).reshape(-1) @ proj
    fa = np.stack([enc(img) for img in set_a])
    fb = np.stack([enc(img) for img in set_b])
    dim = fa.shape[1]
    if len(fa) < 2 * dim or len(fb) < 2 * dim:
        raise MetricError(f"toy_frechet: need >= {2 * dim} samples per set for {dim}-dim features")
    mu_a, cov_a = feature_stats(fa)
    mu_b, cov_b = feature_stats(fb)
    return frechet_gaussian(mu_a, cov_a, mu_b, cov_b)


def random_projection(in_dim, out_dim, seed=1234):
    """Fixed random projection used to keep feature dims small."""
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
    return mat


# ---------------------------------------------------------------------------
# bias / variance decomposition of repeated generations

def bias_variance(samples, z_star):
    """Per-element-normalized decomposition of squared error to z_star."""
    arrs = [np.asarray(s, dtype=np.float64) for s in samples]
    if len(arrs) < 2:
        raise MetricError("bias_variance needs at least 2 samples")
    z_star = np.asarray(z_star, dtype=np.float64)
    for a in arrs:
        if a.shape != z_star.shape:
            raise MetricError(f"bias_variance: sample shape {a.shape} != target {z_star.shape}")
    stack = np.stack(arrs)
    n_el = z_star.size
    z_bar = stack.mean(axis=0)
    variance = float(np.mean(np.sum((stack - z_bar) ** 2, axis=tuple(range(1, stack.ndim)))) / n_el)
    bias2 = float(np.sum((z_bar - z_star) ** 2) / n_el)
    mse = float(np.mean(np.sum((stack - z_star) ** 2, axis=tuple(range(1, stack.ndim)))) / n_el)
    return bias2, variance, mse
