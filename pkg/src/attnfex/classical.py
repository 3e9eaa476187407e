"""Classical texture descriptors: HOG, uniform LBP, GLCM statistics, Gabor bank.

Each extractor maps one grayscale image (float64 in [0, 1]) to a fixed-length
feature vector and is exposed both as a plain function and as an
sklearn-style transformer operating on a stack of images.  Color inputs are
reduced to luminance (0.299 R + 0.587 G + 0.114 B) first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import DomainError


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 2:
        return pixels
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        return pixels @ np.array([0.299, 0.587, 0.114])
    raise DomainError(f"expected (H, W) or (H, W, 3) image, got shape {pixels.shape}")


# ---------------------------------------------------------------------------
# HOG


@dataclass
class HogParams:
    orientations: int = 9
    cell: tuple[int, int] = (8, 8)
    block: tuple[int, int] = (2, 2)
    clip: float = 0.2
    eps: float = 1e-12


def _l2_hys(v: np.ndarray, clip: float, eps: float) -> np.ndarray:
    v = v / (np.sqrt(np.sum(v * v)) + eps)
    v = np.minimum(v, clip)
    return v / (np.sqrt(np.sum(v * v)) + eps)


def hog_features(gray: np.ndarray, params: HogParams | None = None) -> np.ndarray:
    """Histogram of oriented gradients, unsigned (0-180 degrees), L2-Hys blocks.

    Gradients are centered differences with replicated edges; each pixel's
    magnitude is split linearly between the two nearest orientation bins.
    Cells that do not fit entirely inside the image are truncated.
    """
    p = params or HogParams()
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    ch, cw = p.cell
    bh, bw = p.block
    if h < ch or w < cw:
        raise DomainError(f"image {h}x{w} smaller than one {ch}x{cw} cell")
    n_cy, n_cx = h // ch, w // cw
    if n_cy < bh or n_cx < bw:
        raise DomainError(f"image {h}x{w} yields fewer cells than one {bh}x{bw} block")

    padded_x = np.pad(gray, ((0, 0), (1, 1)), mode="edge")
    padded_y = np.pad(gray, ((1, 1), (0, 0)), mode="edge")
    gx = padded_x[:, 2:] - padded_x[:, :-2]
    gy = padded_y[2:, :] - padded_y[:-2, :]
    magnitude = np.hypot(gx, gy)
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0

    n_bins = p.orientations
    bin_width = 180.0 / n_bins
    t = angle / bin_width - 0.5
    lower = np.floor(t)
    frac = t - lower
    bin0 = (lower.astype(int)) % n_bins
    bin1 = (bin0 + 1) % n_bins

    hy, wx = n_cy * ch, n_cx * cw
    cell_y = (np.arange(hy) // ch)[:, None]
    cell_x = (np.arange(wx) // cw)[None, :]
    hist = np.zeros(n_cy * n_cx * n_bins)
    base = (cell_y * n_cx + cell_x) * n_bins
    region = np.s_[:hy, :wx]
    np.add.at(hist, (base + bin0[region]).ravel(), ((1.0 - frac) * magnitude)[region].ravel())
    np.add.at(hist, (base + bin1[region]).ravel(), (frac * magnitude)[region].ravel())
    hist = hist.reshape(n_cy, n_cx, n_bins)

    blocks = []
    for by in range(n_cy - bh + 1):
        for bx in range(n_cx - bw + 1):
            v = hist[by : by + bh, bx : bx + bw].ravel()
            blocks.append(_l2_hys(v, p.clip, p.eps))
    return np.concatenate(blocks)


def hog_feature_dim(image_size: tuple[int, int], params: HogParams | None = None) -> int:
    p = params or HogParams()
    n_cy, n_cx = image_size[0] // p.cell[0], image_size[1] // p.cell[1]
    n_by, n_bx = n_cy - p.block[0] + 1, n_cx - p.block[1] + 1
    return n_by * n_bx * p.block[0] * p.block[1] * p.orientations


# ---------------------------------------------------------------------------
# uniform LBP


@dataclass
class LbpParams:
    radius: int = 1
    points: int = 8

    @property
    def num_bins(self) -> int:
        return self.points * (self.points - 1) + 3


def _circular_transitions(code: int, points: int) -> int:
    bits = [(code >> k) & 1 for k in range(points)]
    return sum(bits[k] != bits[(k + 1) % points] for k in range(points))


def uniform_bin_table(points: int) -> np.ndarray:
    """Map each raw code to its uniform-pattern bin; non-uniform codes share the last."""
    n_codes = 1 << points
    uniform = [c for c in range(n_codes) if _circular_transitions(c, points) <= 2]
    table = np.full(n_codes, len(uniform), dtype=np.int64)
    for rank, code in enumerate(uniform):
        table[code] = rank
    return table


def lbp_features(gray: np.ndarray, params: LbpParams | None = None) -> np.ndarray:
    """Normalized histogram of uniform LBP codes over interior pixels.

    Neighbors sit on a circle of the given radius (angle 2*pi*k/points,
    counterclockwise from east) and are bilinearly sampled, then compared to
    the center with >=.
    """
    p = params or LbpParams()
    if p.points < 4:
        raise DomainError(f"LBP needs at least 4 sample points, got {p.points}")
    gray = np.asarray(gray, dtype=np.float64)
    h, w = gray.shape
    r = p.radius
    if h < 2 * r + 1 or w < 2 * r + 1:
        raise DomainError(f"image {h}x{w} has no interior at radius {r}")

    center = gray[r : h - r, r : w - r]
    yy, xx = np.mgrid[r : h - r, r : w - r].astype(np.float64)
    codes = np.zeros(center.shape, dtype=np.int64)
    for k in range(p.points):
        theta = 2.0 * math.pi * k / p.points
        dy = round(-r * math.sin(theta), 9)
        dx = round(r * math.cos(theta), 9)
        sy, sx = yy + dy, xx + dx
        y0 = np.floor(sy).astype(int)
        x0 = np.floor(sx).astype(int)
        fy, fx = sy - y0, sx - x0
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        sampled = (
            (1 - fy) * (1 - fx) * gray[y0, x0]
            + (1 - fy) * fx * gray[y0, x1]
            + fy * (1 - fx) * gray[y1, x0]
            + fy * fx * gray[y1, x1]
        )
        codes |= (sampled >= center).astype(np.int64) << k

    table = uniform_bin_table(p.points)
    hist = np.bincount(table[codes].ravel(), minlength=p.num_bins).astype(np.float64)
    return hist / codes.size


# ---------------------------------------------------------------------------
# GLCM statistics


@dataclass
class GlcmParams:
    distances: tuple[int, ...] = (1,)
    angles: tuple[float, ...] = (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4)
    levels: int = 32
    symmetric: bool = True
    normalized: bool = True


def glcm_matrix(
    quantized: np.ndarray, distance: int, angle: float, levels: int, symmetric: bool
) -> np.ndarray:
    """Co-occurrence counts for one (distance, angle) offset, optionally symmetrized."""
    dy = int(round(distance * math.sin(angle)))
    dx = int(round(distance * math.cos(angle)))
    h, w = quantized.shape
    y0, y1 = max(0, -dy), min(h, h - dy)
    x0, x1 = max(0, -dx), min(w, w - dx)
    a = quantized[y0:y1, x0:x1]
    b = quantized[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
    counts = np.zeros((levels, levels))
    np.add.at(counts, (a.ravel(), b.ravel()), 1.0)
    if symmetric:
        counts = counts + counts.T
    return counts


def glcm_statistics(p: np.ndarray) -> np.ndarray:
    """contrast, homogeneity, entropy, energy, correlation of one normalized GLCM."""
    levels = p.shape[0]
    i = np.arange(levels)[:, None]
    j = np.arange(levels)[None, :]
    diff2 = (i - j) ** 2
    contrast = float(np.sum(p * diff2))
    homogeneity = float(np.sum(p / (1.0 + diff2)))
    nonzero = p > 0
    entropy = float(-np.sum(p[nonzero] * np.log(p[nonzero])))
    energy = float(np.sum(p * p))
    mu_i = float(np.sum(i * p))
    mu_j = float(np.sum(j * p))
    var_i = float(np.sum((i - mu_i) ** 2 * p))
    var_j = float(np.sum((j - mu_j) ** 2 * p))
    denom = math.sqrt(var_i) * math.sqrt(var_j)
    if denom == 0.0:
        correlation = 1.0
    else:
        correlation = float(np.sum((i - mu_i) * (j - mu_j) * p) / denom)
    return np.array([contrast, homogeneity, entropy, energy, correlation])


def glcm_haralick_features(gray: np.ndarray, params: GlcmParams | None = None) -> np.ndarray:
    """Five Haralick statistics per (distance, angle) co-occurrence matrix."""
    p = params or GlcmParams()
    if p.levels < 2:
        raise DomainError(f"GLCM needs at least 2 quantization levels, got {p.levels}")
    gray = np.asarray(gray, dtype=np.float64)
    if gray.shape[0] < 2 or gray.shape[1] < 2:
        raise DomainError(f"image {gray.shape} too small for co-occurrence pairs")
    quantized = np.clip((gray * p.levels).astype(np.int64), 0, p.levels - 1)
    feats = []
    for d in p.distances:
        for angle in p.angles:
            counts = glcm_matrix(quantized, d, angle, p.levels, p.symmetric)
            total = counts.sum()
            matrix = counts / total if (p.normalized and total > 0) else counts
            feats.append(glcm_statistics(matrix))
    return np.concatenate(feats)


# ---------------------------------------------------------------------------
# Gabor filter bank


@dataclass
class GaborBankParams:
    kernel_size: tuple[int, int] = (21, 21)
    sigmas: tuple[float, ...] = (1.0, 3.0)
    num_orientations: int = 4
    wavelengths: tuple[float, ...] = (math.pi / 4, math.pi / 2)
    gamma: float = 0.5
    psi: float = 0.0

    @property
    def bank_size(self) -> int:
        return len(self.sigmas) * self.num_orientations * len(self.wavelengths)


def gabor_kernel(
    size: tuple[int, int], sigma: float, theta: float, wavelength: float,
    gamma: float = 0.5, psi: float = 0.0,
) -> np.ndarray:
    """Real part of a Gabor kernel: Gaussian envelope times a cosine carrier."""
    half_h, half_w = (size[0] - 1) / 2.0, (size[1] - 1) / 2.0
    y, x = np.mgrid[-half_h : half_h + 1, -half_w : half_w + 1]
    x_rot = x * math.cos(theta) + y * math.sin(theta)
    y_rot = -x * math.sin(theta) + y * math.cos(theta)
    envelope = np.exp(-(x_rot**2 + (gamma * y_rot) ** 2) / (2.0 * sigma**2))
    return envelope * np.cos(2.0 * math.pi * x_rot / wavelength + psi)


def gabor_bank(params: GaborBankParams | None = None) -> list[np.ndarray]:
    """Kernels ordered sigma-major, then orientation, then wavelength."""
    p = params or GaborBankParams()
    kernels = []
    for sigma in p.sigmas:
        for k in range(p.num_orientations):
            theta = math.pi * k / p.num_orientations
            for wavelength in p.wavelengths:
                kernels.append(
                    gabor_kernel(p.kernel_size, sigma, theta, wavelength, p.gamma, p.psi)
                )
    return kernels


def gabor_features(gray: np.ndarray, params: GaborBankParams | None = None) -> np.ndarray:
    """Per-filter (mean, std) of reflect-padded responses; 2 values per kernel."""
    p = params or GaborBankParams()
    gray = np.asarray(gray, dtype=np.float64)
    kh, kw = p.kernel_size
    if gray.shape[0] < kh or gray.shape[1] < kw:
        raise DomainError(f"image {gray.shape} smaller than the {kh}x{kw} Gabor kernel")
    feats = np.empty(2 * p.bank_size)
    for idx, kernel in enumerate(gabor_bank(p)):
        response = ndimage.correlate(gray, kernel, mode="reflect")
        feats[2 * idx] = response.mean()
        feats[2 * idx + 1] = response.std()
    return feats


# ---------------------------------------------------------------------------
# sklearn-style wrappers


class _GrayImageTransformer(BaseEstimator, TransformerMixin):
    """Stateless transformer: stack of images in, feature matrix out."""

    def fit(self, X, y=None):
        return self

    def _feature_fn(self, gray: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def transform(self, X) -> np.ndarray:
        rows = [self._feature_fn(to_grayscale(img)) for img in X]
        return np.vstack(rows)


class HogFeatures(_GrayImageTransformer):
    def __init__(self, orientations=9, cell=(8, 8), block=(2, 2), clip=0.2):
        self.orientations = orientations
        self.cell = cell
        self.block = block
        self.clip = clip

    def _feature_fn(self, gray):
        return hog_features(
            gray,
            HogParams(
                orientations=self.orientations,
                cell=tuple(self.cell),
                block=tuple(self.block),
                clip=self.clip,
            ),
        )


class LbpFeatures(_GrayImageTransformer):
    def __init__(self, radius=1, points=8):
        self.radius = radius
        self.points = points

    def _feature_fn(self, gray):
        return lbp_features(gray, LbpParams(radius=self.radius, points=self.points))


class GlcmFeatures(_GrayImageTransformer):
    def __init__(
        self, distances=(1,),
        angles=(0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4), levels=32,
    ):
        self.distances = distances
        self.angles = angles
        self.levels = levels

    def _feature_fn(self, gray):
        return glcm_haralick_features(
            gray,
            GlcmParams(
                distances=tuple(self.distances),
                angles=tuple(self.angles),
                levels=self.levels,
            ),
        )


class GaborFeatures(_GrayImageTransformer):
    def __init__(
        self, kernel_size=(21, 21), sigmas=(1.0, 3.0), num_orientations=4,
        wavelengths=(math.pi / 4, math.pi / 2), gamma=0.5, psi=0.0,
    ):
        self.kernel_size = kernel_size
        self.sigmas = sigmas
        self.num_orientations = num_orientations
        self.wavelengths = wavelengths
        self.gamma = gamma
        self.psi = psi

    def _feature_fn(self, gray):
        return gabor_features(
            gray,
            GaborBankParams(
                kernel_size=tuple(self.kernel_size),
                sigmas=tuple(self.sigmas),
                num_orientations=self.num_orientations,
                wavelengths=tuple(self.wavelengths),
                gamma=self.gamma,
                psi=self.psi,
            ),
        )
