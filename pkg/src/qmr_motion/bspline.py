# src/qmr_motion/bspline.py
"""
Cubic B-spline free-form deformation.

Control index k sits at pixel (k - 1) * spacing along each axis, so a grid of
(L - 1) // spacing + 4 points covers L pixels (31 points for 112 pixels at
spacing 4). Dense fields are tensor products of per-axis basis matrices, which
keeps upsampling, its adjoint and the bending energy to a few matrix products.

Displacements are in pixels; channel 0 is the row (y) offset, channel 1 the
column (x) offset. Warping is backward: out(x) = image(x + u(x)).
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

from .errors import ConfigError, FormatError, ValidationError
from .stack import read_container, write_container

logger = logging.getLogger(__name__)


def cubic_basis(u: float) -> Tuple[float, float, float, float]:
    """Uniform cubic B-spline weights (B0, B1, B2, B3) for a local coordinate 0 <= u < 1."""
    if not 0.0 <= u < 1.0:
        raise ValidationError(f"local coordinate must lie in [0, 1), got {u}")
    weights = _basis_weights(np.array([u], dtype=np.float64), 0)[0]
    return tuple(float(w) for w in weights)


def _basis_weights(u: np.ndarray, order: int) -> np.ndarray:
    """Weights of the four active basis functions (or their derivatives), shape (len(u), 4)."""
    if order == 0:
        columns = [(1 - u) ** 3 / 6, (3 * u ** 3 - 6 * u ** 2 + 4) / 6,
                   (-3 * u ** 3 + 3 * u ** 2 + 3 * u + 1) / 6, u ** 3 / 6]
    elif order == 1:
        columns = [-(1 - u) ** 2 / 2, (3 * u ** 2 - 4 * u) / 2,
                   (-3 * u ** 2 + 2 * u + 1) / 2, u ** 2 / 2]
    elif order == 2:
        columns = [1 - u, 3 * u - 2, -3 * u + 1, u]
    else:
        raise ValueError(f"unsupported derivative order {order}")
    return np.stack(columns, axis=1)


def grid_size(length: int, spacing: int) -> int:
    """Control points needed along an axis of `length` pixels."""
    if spacing < 1:
        raise ConfigError(f"control spacing must be >= 1, got {spacing}")
    return (length - 1) // spacing + 4


def basis_matrix(length: int, spacing: int, order: int = 0) -> np.ndarray:
    """(length x grid_size) matrix mapping control values to pixel values (or d^order/dy^order of them)."""
    positions = np.arange(length, dtype=np.float64) / spacing
    cells = np.floor(positions).astype(int)
    local = positions - cells
    weights = _basis_weights(local, order) / float(spacing) ** order
    matrix = np.zeros((length, grid_size(length, spacing)))
    rows = np.arange(length)
    for j in range(4):
        matrix[rows, cells + j] = weights[:, j]
    return matrix


@dataclass(frozen=True)
class ControlGrid:
    """Per-frame control-point displacements, shape N x Gh x Gw x 2."""

    coefficients: np.ndarray
    spacing: int = 4

    def __post_init__(self):
        coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if coefficients.ndim != 4 or coefficients.shape[-1] != 2:
            raise ValidationError(f"control grid must be N x Gh x Gw x 2, got {coefficients.shape}")
        if coefficients.shape[1] < 4 or coefficients.shape[2] < 4:
            raise ValidationError(f"control grid needs at least 4x4 points, got {coefficients.shape[1:3]}")
        if not np.all(np.isfinite(coefficients)):
            raise ValidationError("control grid has non-finite coefficients")
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def zeros(cls, n_frames: int, height: int, width: int, spacing: int = 4) -> "ControlGrid":
        return cls(np.zeros((n_frames, grid_size(height, spacing), grid_size(width, spacing), 2)), spacing)


@dataclass(frozen=True)
class DisplacementField:
    """Dense pixel displacements, shape N x H x W x 2."""

    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if u.ndim != 4 or u.shape[-1] != 2:
            raise ValidationError(f"displacement field must be N x H x W x 2, got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValidationError("displacement field has non-finite values")
        object.__setattr__(self, "u", u)

    @property
    def n_frames(self) -> int:
        return self.u.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape[1], self.u.shape[2]

    @classmethod
    def zeros(cls, n_frames: int, height: int, width: int) -> "DisplacementField":
        return cls(np.zeros((n_frames, height, width, 2)))


class FFDBasis:
    """Cached basis matrices for one (height, width, spacing) combination."""

    def __init__(self, height: int, width: int, spacing: int):
        self.height = height
        self.width = width
        self.spacing = spacing
        self.grid_shape = (grid_size(height, spacing), grid_size(width, spacing))
        self.by = [basis_matrix(height, spacing, order) for order in range(3)]
        self.bx = [basis_matrix(width, spacing, order) for order in range(3)]

    def check(self, coefficients: np.ndarray):
        if tuple(coefficients.shape[1:3]) != self.grid_shape:
            raise ConfigError(
                f"grid {tuple(coefficients.shape[1:3])} does not match {self.height}x{self.width} "
                f"at spacing {self.spacing} (expected {self.grid_shape})")

    def upsample(self, coefficients: np.ndarray, order_y: int = 0, order_x: int = 0) -> np.ndarray:
        return np.einsum("hi,nijc,wj->nhwc", self.by[order_y], coefficients, self.bx[order_x], optimize=True)

    def adjoint(self, dense: np.ndarray, order_y: int = 0, order_x: int = 0) -> np.ndarray:
        """Transpose of `upsample`: maps a dense N x H x W x 2 gradient back to the control grid."""
        return np.einsum("hi,nhwc,wj->nijc", self.by[order_y], dense, self.bx[order_x], optimize=True)

    def bending(self, coefficients: np.ndarray) -> Tuple[float, np.ndarray]:
        """Bending energy (pixel mean, summed over channels) and its gradient w.r.t. the coefficients."""
        n = coefficients.shape[0]
        count = n * self.height * self.width
        u_yy = self.upsample(coefficients, 2, 0)
        u_xx = self.upsample(coefficients, 0, 2)
        u_xy = self.upsample(coefficients, 1, 1)
        energy = float((np.sum(u_yy ** 2) + np.sum(u_xx ** 2) + 2.0 * np.sum(u_xy ** 2)) / count)
        gradient = (2.0 / count) * (self.adjoint(u_yy, 2, 0) + self.adjoint(u_xx, 0, 2)
                                    + 2.0 * self.adjoint(u_xy, 1, 1))
        return energy, gradient


@lru_cache(maxsize=16)
def ffd_basis(height: int, width: int, spacing: int) -> FFDBasis:
    return FFDBasis(height, width, spacing)


def ffd_upsample(grid: ControlGrid, height: int, width: int) -> DisplacementField:
    basis = ffd_basis(height, width, grid.spacing)
    basis.check(grid.coefficients)
    return DisplacementField(basis.upsample(grid.coefficients))


def bending_energy(grid: ControlGrid, height: int, width: int) -> float:
    basis = ffd_basis(height, width, grid.spacing)
    basis.check(grid.coefficients)
    return basis.bending(grid.coefficients)[0]


def bending_energy_gradient(grid: ControlGrid, height: int, width: int) -> np.ndarray:
    basis = ffd_basis(height, width, grid.spacing)
    basis.check(grid.coefficients)
    return basis.bending(grid.coefficients)[1]


# --- Sampling ---

def sample_bilinear(images: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                    with_gradient: bool = False):
    """
    Samples each image of an N x H x W batch at real-valued (rows, cols), also N x H x W.

    Coordinates are clamped to the image, so out-of-range samples repeat the
    border. With `with_gradient`, also returns d(sample)/d(row) and d(sample)/d(col),
    which are zero where the coordinate was clamped.
    """
    _, height, width = images.shape
    r = np.clip(rows, 0.0, height - 1)
    c = np.clip(cols, 0.0, width - 1)
    r0 = np.minimum(np.floor(r).astype(int), height - 2)
    c0 = np.minimum(np.floor(c).astype(int), width - 2)
    wr = r - r0
    wc = c - c0
    frame = np.arange(images.shape[0])[:, None, None]
    v00 = images[frame, r0, c0]
    v01 = images[frame, r0, c0 + 1]
    v10 = images[frame, r0 + 1, c0]
    v11 = images[frame, r0 + 1, c0 + 1]
    values = (1 - wr) * (1 - wc) * v00 + (1 - wr) * wc * v01 + wr * (1 - wc) * v10 + wr * wc * v11
    if not with_gradient:
        return values
    inside_r = (rows >= 0.0) & (rows <= height - 1)
    inside_c = (cols >= 0.0) & (cols <= width - 1)
    grad_r = ((1 - wc) * (v10 - v00) + wc * (v11 - v01)) * inside_r
    grad_c = ((1 - wr) * (v01 - v00) + wr * (v11 - v10)) * inside_c
    return values, grad_r, grad_c


def _sample_grid(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    _, height, width, _ = u.shape
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return rows[None] + u[..., 0], cols[None] + u[..., 1]


def warp_frames(frames: np.ndarray, u: np.ndarray, with_gradient: bool = False):
    """Backward-warps an N x H x W batch by an N x H x W x 2 displacement array."""
    if frames.shape != u.shape[:3]:
        raise ValidationError(f"frames {frames.shape} and field {u.shape} do not match")
    rows, cols = _sample_grid(u)
    return sample_bilinear(frames, rows, cols, with_gradient)


def warp_image(image: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Warps one H x W image by one H x W x 2 displacement frame."""
    image = np.asarray(image, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    if image.ndim != 2 or field.shape != image.shape + (2,):
        raise ValidationError(f"image {image.shape} and field {field.shape} do not match")
    if not (np.all(np.isfinite(image)) and np.all(np.isfinite(field))):
        raise ValidationError("warp inputs must be finite")
    return warp_frames(image[None], field[None])[0]


def warp_stack(frames: np.ndarray, field: DisplacementField) -> np.ndarray:
    return warp_frames(np.asarray(frames, dtype=np.float64), field.u)


def compose_displacements(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """
    Field equivalent to warping by `inner` first and then by `outer`:
    u(x) = u_outer(x) + u_inner(x + u_outer(x)).
    """
    if outer.u.shape != inner.u.shape:
        raise ValidationError(f"cannot compose fields of shapes {outer.u.shape} and {inner.u.shape}")
    rows, cols = _sample_grid(outer.u)
    n = inner.n_frames
    channels = np.concatenate([inner.u[..., 0], inner.u[..., 1]], axis=0)
    sampled = sample_bilinear(channels, np.concatenate([rows, rows]), np.concatenate([cols, cols]))
    resampled = np.stack([sampled[:n], sampled[n:]], axis=-1)
    return DisplacementField(outer.u + resampled)


def jacobian_determinant(field: DisplacementField) -> np.ndarray:
    """Determinant of d(x + u)/dx per frame and pixel; values <= 0 mark folding."""
    du_y_dy, du_y_dx = np.gradient(field.u[..., 0], axis=(1, 2))
    du_x_dy, du_x_dx = np.gradient(field.u[..., 1], axis=(1, 2))
    return (1.0 + du_y_dy) * (1.0 + du_x_dx) - du_y_dx * du_x_dy


# --- Field files ---

def save_field(field: DisplacementField, path: str):
    write_container(path, field.u, "f32le", {"kind": "displacement"})


def load_field(path: str) -> DisplacementField:
    header, array = read_container(path)
    if header.get("channels") != 2 or array.ndim != 4:
        raise FormatError(f"{path}: not a displacement field (channels={header.get('channels')})")
    return DisplacementField(array)
