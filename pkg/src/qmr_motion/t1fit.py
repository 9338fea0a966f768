# src/qmr_motion/t1fit.py
"""
Three-parameter inversion-recovery fitting, y(TI) = A - B * exp(-TI / T1*).

Every pixel, and every polarity-flip candidate of every pixel, is fitted in one
vectorized Levenberg-Marquardt loop: Jacobians are stacked into a
(fits x frames x 3) array and the damped normal equations solved as a batch of
3 x 3 systems.
"""

import logging
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np

from .config import T1FitConfig
from .errors import ConfigError, ValidationError
from .stack import ImageStack, RoiMask

logger = logging.getLogger(__name__)

_INITIAL_DAMPING = 1e-3
_MAX_DAMPING = 1e16
_CONDITION_LIMIT = 1e12
SENTINEL = 0.0


class PixelFit(NamedTuple):
    a: float
    b: float
    t1_star: float
    t1: float
    sd: float
    residual: float
    converged: bool


@dataclass(frozen=True)
class T1MapResult:
    a_map: np.ndarray
    b_map: np.ndarray
    t1_star_map: np.ndarray
    t1_map: np.ndarray
    sd_map: np.ndarray
    residual_map: np.ndarray
    converged: np.ndarray
    look_locker: bool = False

    MAP_NAMES = ("A", "B", "T1star", "T1", "SD")

    def as_frames(self) -> np.ndarray:
        """The five maps (A, B, T1*, T1, SD) stacked for the QMRSTACK container."""
        return np.stack([self.a_map, self.b_map, self.t1_star_map, self.t1_map, self.sd_map])

    def named_maps(self) -> Dict[str, np.ndarray]:
        return dict(zip(self.MAP_NAMES, self.as_frames()))


def signal_model(inversion_times: np.ndarray, a, b, t1_star) -> np.ndarray:
    """Forward model evaluated at every inversion time (last axis)."""
    t = np.asarray(inversion_times, dtype=np.float64)
    a, b, t1_star = (np.asarray(v, dtype=np.float64)[..., None] for v in (a, b, t1_star))
    return a - b * np.exp(-t / t1_star)


def look_locker_t1(a, b, t1_star):
    """T1 = T1* (B / A - 1)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return t1_star * (b / a - 1.0)


def _check_times(inversion_times) -> np.ndarray:
    t = np.asarray(inversion_times, dtype=np.float64).reshape(-1)
    if t.size < 4:
        raise ValidationError(f"need at least 4 inversion times for a 3-parameter fit, got {t.size}")
    if np.any(t <= 0) or not np.all(np.isfinite(t)):
        raise ValidationError("inversion times must be finite and strictly positive")
    if np.unique(t).size != t.size:
        raise ValidationError("inversion times must be distinct")
    return t


def _residuals(t: np.ndarray, y: np.ndarray, params: np.ndarray) -> np.ndarray:
    t1_star = np.where(params[:, 2] > 0, params[:, 2], 1.0)
    return y - signal_model(t, params[:, 0], params[:, 1], t1_star)


def _rss(t: np.ndarray, y: np.ndarray, params: np.ndarray) -> np.ndarray:
    rss = np.sum(_residuals(t, y, params) ** 2, axis=1)
    return np.where((params[:, 2] > 0) & np.isfinite(rss), rss, np.inf)


def _jacobian(t: np.ndarray, params: np.ndarray) -> np.ndarray:
    """d(model)/d(A, B, T1*), shape (fits, frames, 3)."""
    b = params[:, 1:2]
    t1_star = params[:, 2:3]
    decay = np.exp(-t[None, :] / t1_star)
    return np.stack([np.ones_like(decay), -decay, -b * decay * t[None, :] / t1_star ** 2], axis=-1)


def _normal_matrix(jac: np.ndarray) -> np.ndarray:
    return np.einsum("kni,knj->kij", jac, jac)


def _levenberg_marquardt(t: np.ndarray, y: np.ndarray, params: np.ndarray,
                         max_iterations: int, tolerance: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (params, rss, stopped) where `stopped` marks fits that met a stopping criterion."""
    params = params.copy()
    damping = np.full(y.shape[0], _INITIAL_DAMPING)
    rss = _rss(t, y, params)
    stopped = ~np.isfinite(rss)
    failed = stopped.copy()
    identity = np.eye(3)

    for _ in range(max_iterations):
        idx = np.flatnonzero(~stopped)
        if idx.size == 0:
            break
        current = params[idx]
        jac = _jacobian(t, current)
        jtj = _normal_matrix(jac)
        jtr = np.einsum("kni,kn->ki", jac, _residuals(t, y[idx], current))
        diagonal = np.diagonal(jtj, axis1=1, axis2=2)
        floor = 1e-12 * diagonal.max(axis=1, keepdims=True) + 1e-300
        damped = jtj + (damping[idx, None] * np.maximum(diagonal, floor))[:, :, None] * identity
        delta = np.linalg.solve(damped, jtr[..., None])[..., 0]

        candidate = current + delta
        candidate_rss = _rss(t, y[idx], candidate)
        better = candidate_rss <= rss[idx]
        relative_step = np.max(np.abs(delta) / (np.abs(current) + 1e-12), axis=1)

        accepted = idx[better]
        params[accepted] = candidate[better]
        rss[accepted] = candidate_rss[better]
        damping[accepted] *= 0.1
        damping[idx[~better]] *= 10.0

        stopped[accepted[relative_step[better] <= tolerance]] = True
        stopped[idx[damping[idx] > _MAX_DAMPING]] = True
    else:
        logger.debug("LM hit max_iterations=%d with %d fits still running", max_iterations, int((~stopped).sum()))

    return params, rss, stopped & ~failed


def _flip_candidates(t: np.ndarray, y: np.ndarray, polarity_restore: bool) -> np.ndarray:
    """(flips, pixels, frames): the first k samples in TI order negated, k = 0..N-1."""
    if not polarity_restore:
        return y[None]
    order = np.argsort(t, kind="stable")
    signs = np.ones((t.size, t.size))
    for k in range(t.size):
        signs[k, order[:k]] = -1.0
    return signs[:, None, :] * y[None]


def _initial_guess(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    a = np.max(np.abs(y), axis=1)
    b = a - np.min(y, axis=1)
    t1_star = np.full(y.shape[0], float(np.median(t)))
    return np.stack([a, b, t1_star], axis=1)


def _uncertainty(t: np.ndarray, params: np.ndarray, rss: np.ndarray, look_locker: bool):
    """Standard error of T1 (or T1*) from sigma^2 (J^T J)^-1, plus a well-conditioned flag."""
    n = t.size
    jtj = _normal_matrix(_jacobian(t, params))
    diagonal = np.diagonal(jtj, axis1=1, axis2=2)
    ok = np.all(diagonal > 1e-300, axis=1) & np.all(np.isfinite(jtj), axis=(1, 2))
    scale = 1.0 / np.sqrt(np.where(ok[:, None], diagonal, 1.0))
    normalized = jtj * scale[:, :, None] * scale[:, None, :]
    condition = np.linalg.cond(np.where(ok[:, None, None], normalized, np.eye(3)))
    ok &= np.isfinite(condition) & (condition < _CONDITION_LIMIT)

    sd = np.full(params.shape[0], np.inf)
    if ok.any():
        sigma2 = rss[ok] / (n - 3)
        covariance = sigma2[:, None, None] * np.linalg.inv(jtj[ok])
        a, b, t1_star = params[ok, 0], params[ok, 1], params[ok, 2]
        if look_locker:
            grad = np.stack([-t1_star * b / a ** 2, t1_star / a, b / a - 1.0], axis=1)
        else:
            grad = np.tile([0.0, 0.0, 1.0], (a.size, 1))
        variance = np.einsum("ki,kij,kj->k", grad, covariance, grad)
        sd[ok] = np.sqrt(np.clip(variance, 0.0, None))
    return sd, ok


def fit_curves(inversion_times, intensities: np.ndarray,
               config: Optional[T1FitConfig] = None) -> Dict[str, np.ndarray]:
    """
    Fits every row of `intensities` (pixels x frames). Returns arrays keyed
    a, b, t1_star, t1, sd, residual, converged.
    """
    config = config or T1FitConfig()
    t = _check_times(inversion_times)
    y = np.atleast_2d(np.asarray(intensities, dtype=np.float64))
    if y.shape[1] != t.size:
        raise ValidationError(f"{y.shape[1]} samples per pixel for {t.size} inversion times")
    n_pixels = y.shape[0]

    candidates = _flip_candidates(t, y, config.polarity_restore)
    n_flips = candidates.shape[0]
    flat = candidates.reshape(n_flips * n_pixels, t.size)
    params, rss, stopped = _levenberg_marquardt(t, flat, _initial_guess(t, flat),
                                                config.max_iterations, config.gradient_tolerance)

    best = np.argmin(rss.reshape(n_flips, n_pixels), axis=0)
    pick = best * n_pixels + np.arange(n_pixels)
    params, rss, stopped = params[pick], rss[pick], stopped[pick]

    sd, well_conditioned = _uncertainty(t, params, rss, config.look_locker)
    a, b, t1_star = params[:, 0], params[:, 1], params[:, 2]
    identifiable = np.abs(b) > 1e-9 * np.maximum(np.abs(a), 1e-300)
    t1 = look_locker_t1(a, b, t1_star) if config.look_locker else t1_star.copy()
    converged = (stopped & well_conditioned & identifiable & (t1_star > 0)
                 & np.isfinite(sd) & np.isfinite(t1))
    return {
        "a": a, "b": b, "t1_star": t1_star, "t1": t1, "sd": sd,
        "residual": np.sqrt(rss / t.size), "converged": converged, "flips": best,
    }


def fit_pixel(inversion_times, intensities, polarity_restore: bool = True,
              config: Optional[T1FitConfig] = None) -> PixelFit:
    config = (config or T1FitConfig()).model_copy(update={"polarity_restore": polarity_restore})
    fit = fit_curves(inversion_times, np.asarray(intensities, dtype=np.float64)[None], config)
    return PixelFit(*(float(fit[key][0]) for key in ("a", "b", "t1_star", "t1", "sd", "residual")),
                    bool(fit["converged"][0]))


def fit_map(stack: ImageStack, mask: Optional[RoiMask] = None,
            config: Optional[T1FitConfig] = None) -> T1MapResult:
    config = config or T1FitConfig()
    if stack.inversion_times is None:
        raise ConfigError("T1 fitting needs inversion times on the input stack")
    height, width = stack.shape
    selected = np.ones((height, width), dtype=bool) if mask is None else mask.mask
    if mask is not None:
        mask.check_matches((height, width))

    pixels = stack.frames[:, selected].T
    keys = ("a", "b", "t1_star", "t1", "sd", "residual")
    values = {key: np.empty(pixels.shape[0]) for key in keys}
    converged = np.zeros(pixels.shape[0], dtype=bool)
    for start in range(0, pixels.shape[0], config.chunk_size):
        chunk = slice(start, start + config.chunk_size)
        fit = fit_curves(stack.inversion_times, pixels[chunk], config)
        for key in keys:
            values[key][chunk] = fit[key]
        converged[chunk] = fit["converged"]
    logger.info("T1 fit: %d/%d pixels converged", int(converged.sum()), pixels.shape[0])

    maps = {}
    for key in keys:
        full = np.full((height, width), SENTINEL)
        full[selected] = np.where(np.isfinite(values[key]), values[key], SENTINEL)
        maps[key] = full
    converged_map = np.zeros((height, width), dtype=bool)
    converged_map[selected] = converged
    return T1MapResult(maps["a"], maps["b"], maps["t1_star"], maps["t1"], maps["sd"], maps["residual"],
                       converged_map, config.look_locker)


def roi_stats(values: np.ndarray, mask: RoiMask, converged: Optional[np.ndarray] = None) -> Tuple[float, float, int]:
    """Mean, population std and count of `values` over the mask (and converged pixels when given)."""
    values = np.asarray(values, dtype=np.float64)
    mask.check_matches(values.shape)
    selected = mask.mask if converged is None else mask.mask & np.asarray(converged, dtype=bool)
    if not selected.any():
        raise ValidationError(f"ROI '{mask.label}' has no usable pixels")
    picked = values[selected]
    return float(picked.mean()), float(picked.std()), int(picked.size)
