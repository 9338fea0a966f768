# src/qmr_motion/metrics.py
"""
Similarity and alignment metrics.

NMI uses a soft joint histogram on [0, 1] with bin centers at (k + 0.5) / B.
Each intensity splits its mass linearly between the two nearest bin centers;
the 2 x 2 block of cells a pixel pair touches is filled with the comonotone
coupling of those two splits, so identical images give a purely diagonal
histogram and nmi(x, x) is exactly 1.

The coupling is not neutral for unrelated images. Values below the first bin
center or above the last one put all their mass in an edge bin, and the
coupling sends two such values to the same corner. For independent uniform
images the (0, 0) and (B-1, B-1) cells get 13 / (12 B^2) and the two
anti-diagonal corners 11 / (12 B^2), against 1 / B^2 in the interior. The
excess is O(1/B^2) and only touches the four corner cells.

Loss functions come in pairs: a value function and a `*_with_gradient`
variant returning analytic derivatives with respect to image intensities
(or displacements, for the cyclic loss).
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import uniform_filter1d

from .errors import ConfigError, DegenerateInputError, ValidationError

logger = logging.getLogger(__name__)

NCC_VARIANCE_FLOOR = 1e-5
_MASS_FLOOR = 1e-12
_TIE_TOLERANCE = 1e-9
_RANGE_SLACK = 1e-9


@dataclass(frozen=True)
class JointHistogram:
    counts: np.ndarray
    bins: int

    @property
    def marginal_a(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def marginal_b(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    for name, image in (("a", a), ("b", b)):
        if not np.all(np.isfinite(image)):
            raise ValidationError(f"image {name} has non-finite values")
        if image.min() < -_RANGE_SLACK or image.max() > 1.0 + _RANGE_SLACK:
            raise ValidationError(f"image {name} must lie in [0, 1], got [{image.min():.4g}, {image.max():.4g}]")


def _bin_positions(values: np.ndarray, bins: int):
    """Lower bin index, weight of the upper bin, and d(weight)/d(value) for each value."""
    position = values * bins - 0.5
    clipped = np.clip(position, 0.0, bins - 1)
    lower = np.minimum(np.floor(clipped).astype(np.intp), bins - 2)
    weight = clipped - lower
    slope = np.where((position >= 0.0) & (position <= bins - 1), float(bins), 0.0)
    return lower, weight, slope


class _PairHistogram:
    """Soft joint histogram of one image pair, keeping what the gradient needs."""

    def __init__(self, a: np.ndarray, b: np.ndarray, bins: int):
        if bins < 2:
            raise ConfigError(f"need at least 2 histogram bins, got {bins}")
        self.bins = bins
        self.n = a.size
        self.ka, self.wa, self.sa = _bin_positions(a.ravel(), bins)
        self.kb, self.wb, self.sb = _bin_positions(b.ravel(), bins)
        high = np.maximum(self.wa, self.wb)
        c00 = 1.0 - high
        c11 = np.minimum(self.wa, self.wb)
        c01 = np.maximum(0.0, self.wb - self.wa)
        c10 = np.maximum(0.0, self.wa - self.wb)
        base = self.ka * bins + self.kb
        index = np.concatenate([base, base + bins + 1, base + 1, base + bins])
        weights = np.concatenate([c00, c11, c01, c10])
        self.joint = (np.bincount(index, weights=weights, minlength=bins * bins) / self.n).reshape(bins, bins)

    def pull_back(self, cell_gradient: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Chains d(metric)/d(cell mass) down to d(metric)/d(a) and d(metric)/d(b) per pixel."""
        g = cell_gradient.ravel()
        base = self.ka * self.bins + self.kb
        g00 = g[base]
        g11 = g[base + self.bins + 1]
        g01 = g[base + 1]
        g10 = g[base + self.bins]
        da_low, da_high = g11 - g01, g10 - g00   # wa < wb, wa > wb
        db_low, db_high = g01 - g00, g11 - g10
        tie = np.abs(self.wa - self.wb) <= _TIE_TOLERANCE
        below = self.wa < self.wb
        d_wa = np.where(tie, 0.5 * (da_low + da_high), np.where(below, da_low, da_high))
        d_wb = np.where(tie, 0.5 * (db_low + db_high), np.where(below, db_low, db_high))
        return d_wa * self.sa / self.n, d_wb * self.sb / self.n


def soft_joint_histogram(a: np.ndarray, b: np.ndarray, bins: int = 32) -> JointHistogram:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    return JointHistogram(_PairHistogram(a, b, bins).joint, bins)


def _entropy(p: np.ndarray) -> float:
    q = p[p > 0]
    return float(-np.sum(q * np.log(q)))


def _entropy_gradient(p: np.ndarray) -> np.ndarray:
    g = np.zeros_like(p)
    alive = p > _MASS_FLOOR
    g[alive] = -(np.log(p[alive]) + 1.0)
    return g


def _nmi_from_histogram(hist: _PairHistogram, with_gradient: bool):
    joint = hist.joint
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    h_a, h_b, h_ab = _entropy(pa), _entropy(pb), _entropy(joint)
    total = h_a + h_b
    if total <= 0.0:
        raise DegenerateInputError("both images have zero histogram entropy")
    value = 2.0 - 2.0 * h_ab / total
    if not with_gradient:
        return value, None, None
    d_total = _entropy_gradient(pa)[:, None] + _entropy_gradient(pb)[None, :]
    d_joint = _entropy_gradient(joint)
    cell_gradient = (2.0 / total ** 2) * (h_ab * d_total - total * d_joint)
    grad_a, grad_b = hist.pull_back(cell_gradient)
    return value, grad_a, grad_b


def _check_not_constant(*images: np.ndarray):
    for image in images:
        if np.ptp(image) == 0.0:
            raise DegenerateInputError("NMI is undefined for a constant image")


def nmi(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """Normalized mutual information 2·MI / (H(a) + H(b)) from the soft joint histogram."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    _check_not_constant(a, b)
    return _nmi_from_histogram(_PairHistogram(a, b, bins), False)[0]


def nmi_with_gradient(a: np.ndarray, b: np.ndarray, bins: int = 32) -> Tuple[float, np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    _check_not_constant(a, b)
    value, grad_a, grad_b = _nmi_from_histogram(_PairHistogram(a, b, bins), True)
    return value, grad_a.reshape(a.shape), grad_b.reshape(b.shape)


def pairwise_nmi_matrix(frames: np.ndarray, bins: int = 32) -> np.ndarray:
    n = frames.shape[0]
    matrix = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = nmi(frames[i], frames[j], bins)
    return matrix


def groupwise_nmi_loss(warped: np.ndarray, reference: np.ndarray, bins: int = 32) -> float:
    """−(1/N) Σ_n nmi(warped_n, reference)."""
    warped = np.asarray(warped, dtype=np.float64)
    return -float(np.mean([nmi(frame, reference, bins) for frame in warped]))


def groupwise_nmi_loss_with_gradient(warped: np.ndarray, bins: int = 32) -> Tuple[float, np.ndarray]:
    """
    Groupwise NMI loss against the implicit mean reference, with the gradient
    taken through both the frames and the mean.
    """
    n = warped.shape[0]
    reference = warped.mean(axis=0)
    values = np.empty(n)
    grad_frames = np.empty_like(warped)
    grad_reference = np.zeros_like(reference)
    for k in range(n):
        values[k], grad_a, grad_b = nmi_with_gradient(warped[k], reference, bins)
        grad_frames[k] = grad_a
        grad_reference += grad_b
    gradient = -(grad_frames + grad_reference[None] / n) / n
    return -float(values.mean()), gradient


# --- Local NCC ---

class _WindowMeans:
    """Windowed means as left/right matrix products, with the exact adjoint."""

    def __init__(self, height: int, width: int, window: int):
        self.rows = uniform_filter1d(np.eye(height), window, axis=0, mode="reflect")
        self.cols = uniform_filter1d(np.eye(width), window, axis=0, mode="reflect")

    def apply(self, images: np.ndarray) -> np.ndarray:
        return np.einsum("hi,nij,wj->nhw", self.rows, images, self.cols, optimize=True)

    def adjoint(self, images: np.ndarray) -> np.ndarray:
        return np.einsum("ih,nij,jw->nhw", self.rows, images, self.cols, optimize=True)


@lru_cache(maxsize=16)
def _window_means(height: int, width: int, window: int) -> _WindowMeans:
    return _WindowMeans(height, width, window)


def _check_window(window: int, shape: Tuple[int, int]):
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"NCC window must be odd and >= 3, got {window}")
    if window > min(shape):
        raise ValidationError(f"NCC window {window} is larger than the image {shape}")


def _local_ncc_batch(a: np.ndarray, b: np.ndarray, window: int, with_gradient: bool):
    """Per-frame mean local NCC for N x H x W batches (b may be broadcast)."""
    means = _window_means(a.shape[1], a.shape[2], window)
    b = np.broadcast_to(b, a.shape)
    ma, mb = means.apply(a), means.apply(b)
    va = means.apply(a * a) - ma ** 2
    vb = means.apply(b * b) - mb ** 2
    cab = means.apply(a * b) - ma * mb
    floor_a = np.maximum(va, NCC_VARIANCE_FLOOR)
    floor_b = np.maximum(vb, NCC_VARIANCE_FLOOR)
    inv = 1.0 / np.sqrt(floor_a * floor_b)
    values = (cab * inv).mean(axis=(1, 2))
    if not with_gradient:
        return values, None, None
    pixels = a.shape[1] * a.shape[2]
    g_cab = inv / pixels
    g_va = np.where(va > NCC_VARIANCE_FLOOR, -0.5 * cab * inv / floor_a, 0.0) / pixels
    g_vb = np.where(vb > NCC_VARIANCE_FLOOR, -0.5 * cab * inv / floor_b, 0.0) / pixels
    g_ma = -g_cab * mb - 2.0 * ma * g_va
    g_mb = -g_cab * ma - 2.0 * mb * g_vb
    back_cab = means.adjoint(g_cab)
    grad_a = back_cab * b + 2.0 * a * means.adjoint(g_va) + means.adjoint(g_ma)
    grad_b = back_cab * a + 2.0 * b * means.adjoint(g_vb) + means.adjoint(g_mb)
    return values, grad_a, grad_b


def local_ncc(a: np.ndarray, b: np.ndarray, window: int = 9) -> float:
    """Mean over pixels of the windowed normalized cross-correlation (reflective borders)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    _check_window(window, a.shape)
    return float(_local_ncc_batch(a[None], b[None], window, False)[0][0])


def ncc_to_mean(frames: np.ndarray, window: int = 9) -> np.ndarray:
    """Local NCC of every frame against the frame mean."""
    _check_window(window, frames.shape[1:])
    return _local_ncc_batch(frames, frames.mean(axis=0)[None], window, False)[0]


def groupwise_ncc_loss_with_gradient(warped: np.ndarray, window: int = 9) -> Tuple[float, np.ndarray]:
    """−(1/N) Σ_n local_ncc(warped_n, mean), gradient through frames and mean."""
    _check_window(window, warped.shape[1:])
    n = warped.shape[0]
    reference = warped.mean(axis=0)[None]
    values, grad_a, grad_b = _local_ncc_batch(warped, reference, window, True)
    gradient = -(grad_a + grad_b.sum(axis=0, keepdims=True) / n) / n
    return -float(values.mean()), gradient


# --- Displacement and alignment scores ---

def cyclic_loss(fields: np.ndarray) -> float:
    """sqrt(Σ_pixels Σ_channels (Σ_n u_n)² / (2·H·W)); zero when the fields sum to zero."""
    return cyclic_loss_with_gradient(fields)[0]


def cyclic_loss_with_gradient(fields: np.ndarray) -> Tuple[float, np.ndarray]:
    u = np.asarray(getattr(fields, "u", fields), dtype=np.float64)
    _, height, width, _ = u.shape
    total = u.sum(axis=0)
    scale = 2.0 * height * width
    loss = float(np.sqrt(np.sum(total ** 2) / scale))
    if loss == 0.0:
        return 0.0, np.zeros_like(u)
    gradient = np.broadcast_to(total / (scale * loss), u.shape).copy()
    return loss, gradient


def d_pca(frames: np.ndarray, top_k: int = 1, mask: Optional[np.ndarray] = None) -> float:
    """
    Share (in percent) of the top-K eigenvalues of the frame correlation matrix.
    100 means every frame is a positive affine copy of the others.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    if n < 2:
        raise ValidationError("D_PCA needs at least 2 frames")
    if not 1 <= top_k <= n:
        raise ConfigError(f"top_k must be in [1, {n}], got {top_k}")
    vectors = frames.reshape(n, -1)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != frames.shape[1:]:
            raise ValidationError(f"mask {mask.shape} does not match frames {frames.shape[1:]}")
        vectors = vectors[:, mask.ravel()]
    std = vectors.std(axis=1)
    if np.any(std == 0.0):
        raise DegenerateInputError("D_PCA is undefined when a frame is constant")
    z = (vectors - vectors.mean(axis=1, keepdims=True)) / std[:, None]
    correlation = z @ z.T / z.shape[1]
    eigenvalues = np.clip(np.linalg.eigvalsh(correlation), 0.0, None)[::-1]
    return float(100.0 * eigenvalues[:top_k].sum() / eigenvalues.sum())
