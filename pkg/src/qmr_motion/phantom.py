# src/qmr_motion/phantom.py
"""
Synthetic MOLLI phantom with known tissue parameters and planted motion.

Tissue parameter maps (A, B, T1*) are rendered from simple shapes, softened
with a Gaussian blur, and turned into frames with the inversion-recovery
model. Each frame is then warped by a smooth random B-spline field confined to
a tapered disk around the image center, and Gaussian noise with a standard
deviation of `noise_sigma` signal units is added. The reported motion region is
the core of the disk where the taper is at least one half.

Tissue T1* values are design values, not measurements.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .bspline import DisplacementField, ffd_basis, grid_size, jacobian_determinant, sample_bilinear, save_field, warp_frames
from .config import ContrastMode, PhantomConfig, TissueSpec
from .errors import ConfigError, ValidationError
from .stack import ImageStack, RoiMask, save_masks, save_stack, write_container
from .t1fit import signal_model

logger = logging.getLogger(__name__)

# name -> (T1* pre-contrast ms, T1* post-contrast ms, A)
TISSUE_DEFAULTS: Dict[str, Tuple[float, float, float]] = {
    "background": (300.0, 200.0, 0.4),
    "liver": (800.0, 300.0, 0.6),
    "myocardium": (1200.0, 500.0, 0.7),
    "blood-pool": (1600.0, 350.0, 1.0),
    "right-ventricle": (1600.0, 350.0, 1.0),
}
B_OVER_A = 1.9
_INVERSION_ITERATIONS = 30


@dataclass(frozen=True)
class PhantomTruth:
    clean_stack: ImageStack
    observed_stack: ImageStack
    true_fields: DisplacementField
    motion_fields: DisplacementField
    masks: List[RoiMask]
    true_t1_star_map: np.ndarray
    a_map: np.ndarray
    b_map: np.ndarray
    motion_region: RoiMask

    def mask(self, label: str) -> RoiMask:
        for mask in self.masks:
            if mask.label == label:
                return mask
        if label == self.motion_region.label:
            return self.motion_region
        raise ValidationError(f"phantom has no mask labelled '{label}'")


def _tissue_values(name: str, mode: ContrastMode) -> Tuple[float, float, float]:
    pre, post, a = TISSUE_DEFAULTS[name]
    return (pre if mode == ContrastMode.PRE_GD else post), a, B_OVER_A * a


def default_tissues(height: int, width: int, mode: ContrastMode = ContrastMode.PRE_GD) -> List[TissueSpec]:
    """
    Blood pool inside a myocardial ring at the center, a right-ventricle disk
    beside it and a static liver disk near a corner. The right ventricle makes
    the moving region asymmetric, so rotations about the center are visible.
    """
    scale = min(height, width) / 112.0
    center = (height / 2.0, width / 2.0)

    def spec(name, shape, c, outer, inner=0.0):
        t1_star, a, b = _tissue_values(name, mode)
        return TissueSpec(name=name, shape=shape, center=c, outer_radius=outer, inner_radius=inner,
                          t1_star=t1_star, a=a, b=b)

    return [
        spec("liver", "disk", (0.82 * height, 0.2 * width), 12.0 * scale),
        spec("right-ventricle", "disk", (height / 2.0, width / 2.0 - 24.0 * scale), 9.0 * scale),
        spec("myocardium", "annulus", center, 17.0 * scale, 10.0 * scale),
        spec("blood-pool", "disk", center, 10.0 * scale),
    ]


def _tissue_mask(tissue: TissueSpec, height: int, width: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    distance = np.hypot(rows - tissue.center[0], cols - tissue.center[1])
    if tissue.shape == "annulus":
        return (distance >= tissue.inner_radius) & (distance < tissue.outer_radius)
    return distance < tissue.outer_radius


def _check_bounds(tissue: TissueSpec, height: int, width: int):
    cy, cx = tissue.center
    r = tissue.outer_radius
    if cy - r < 0 or cx - r < 0 or cy + r > height - 1 or cx + r > width - 1:
        raise ConfigError(f"tissue '{tissue.name}' extends outside the {height}x{width} image")


def render_parameter_maps(config: PhantomConfig):
    """Blurred (A, B, T1*) maps plus one undeformed mask per tissue, background first."""
    height, width = config.height, config.width
    tissues = config.tissues or default_tissues(height, width, config.contrast_mode)
    t1_bg, a_bg, b_bg = _tissue_values("background", config.contrast_mode)
    a_map = np.full((height, width), a_bg)
    b_map = np.full((height, width), b_bg)
    t1_map = np.full((height, width), t1_bg)
    covered = np.zeros((height, width), dtype=bool)
    tissue_masks = []
    for tissue in tissues:
        _check_bounds(tissue, height, width)
        region = _tissue_mask(tissue, height, width)
        a_map[region], b_map[region], t1_map[region] = tissue.a, tissue.b, tissue.t1_star
        covered |= region
        tissue_masks.append((tissue.name, region))

    masks = [RoiMask(~covered, "background")]
    for index, (name, region) in enumerate(tissue_masks):
        # later tissues paint over earlier ones
        for later_name, later in tissue_masks[index + 1:]:
            region = region & ~later
        masks.append(RoiMask(region, name))

    if config.edge_blur > 0:
        a_map = gaussian_filter(a_map, config.edge_blur, mode="nearest")
        b_map = gaussian_filter(b_map, config.edge_blur, mode="nearest")
        t1_map = gaussian_filter(t1_map, config.edge_blur, mode="nearest")
    return a_map, b_map, t1_map, masks


def _motion_window(config: PhantomConfig) -> np.ndarray:
    height, width = config.height, config.width
    radius = config.motion_radius * min(height, width)
    rows, cols = np.mgrid[0:height, 0:width]
    distance = np.hypot(rows - (height - 1) / 2.0, cols - (width - 1) / 2.0)
    return np.where(distance < radius, 0.5 * (1.0 + np.cos(np.pi * distance / radius)), 0.0)


def planted_motion(config: PhantomConfig, rng: np.random.Generator) -> DisplacementField:
    """Random smooth per-frame fields, zero outside the motion disk, peak |u| in [amplitude/2, amplitude]."""
    height, width, n = config.height, config.width, config.n_frames
    spacing = config.deformation_spacing
    shape = (n, grid_size(height, spacing), grid_size(width, spacing), 2)
    coefficients = rng.standard_normal(shape)
    peaks = config.amplitude * rng.uniform(0.5, 1.0, size=n)
    if config.amplitude == 0.0:
        return DisplacementField.zeros(n, height, width)

    u = ffd_basis(height, width, spacing).upsample(coefficients) * _motion_window(config)[None, :, :, None]
    magnitude = np.linalg.norm(u, axis=-1).reshape(n, -1).max(axis=1)
    u *= (peaks / np.maximum(magnitude, 1e-12))[:, None, None, None]
    field = DisplacementField(u)
    if np.any(jacobian_determinant(field) <= 0.0):
        raise ConfigError(f"planted motion folds at amplitude {config.amplitude}; lower it or raise the spacing")
    return field


def invert_displacement(field: DisplacementField, iterations: int = _INVERSION_ITERATIONS) -> DisplacementField:
    """Fixed-point inverse v = -u(x + v), so that warping by u and then by v is close to the identity."""
    u = field.u
    n, height, width, _ = u.shape
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    channels = np.concatenate([u[..., 0], u[..., 1]], axis=0)
    v = -u.copy()
    for _ in range(iterations):
        r = np.concatenate([rows[None] + v[..., 0]] * 2)
        c = np.concatenate([cols[None] + v[..., 1]] * 2)
        sampled = sample_bilinear(channels, r, c)
        v = -np.stack([sampled[:n], sampled[n:]], axis=-1)
    return DisplacementField(v)


def generate_phantom(config: Optional[PhantomConfig] = None) -> PhantomTruth:
    config = config or PhantomConfig()
    rng = np.random.default_rng(config.seed)
    times = np.asarray(config.resolved_inversion_times(), dtype=np.float64)
    a_map, b_map, t1_map, masks = render_parameter_maps(config)

    signal = np.moveaxis(signal_model(times, a_map, b_map, t1_map), -1, 0)
    if config.magnitude:
        signal = np.abs(signal)

    motion = planted_motion(config, rng)
    clean = warp_frames(signal, motion.u) if config.amplitude > 0 else signal
    noise = rng.standard_normal(clean.shape) * config.noise_sigma
    observed = clean + noise

    truth_fields = invert_displacement(motion) if config.amplitude > 0 else DisplacementField.zeros(*clean.shape)
    logger.info("Phantom %dx%dx%d (%s): amplitude %.2f px, noise sd %.4f", config.height, config.width,
                config.n_frames, config.contrast_mode.value, config.amplitude, config.noise_sigma)
    return PhantomTruth(
        clean_stack=ImageStack(clean, times),
        observed_stack=ImageStack(observed, times),
        true_fields=truth_fields,
        motion_fields=motion,
        masks=masks,
        true_t1_star_map=t1_map,
        a_map=a_map,
        b_map=b_map,
        motion_region=RoiMask(_motion_window(config) >= 0.5, "motion-region"),
    )


def endpoint_error(estimated: DisplacementField, truth: DisplacementField,
                   region: Optional[RoiMask] = None) -> Tuple[float, float]:
    """Mean and 95th-percentile endpoint error after removing each field's per-pixel mean over frames."""
    if estimated.u.shape != truth.u.shape:
        raise ValidationError(f"field shapes differ: {estimated.u.shape} vs {truth.u.shape}")
    est = estimated.u - estimated.u.mean(axis=0, keepdims=True)
    ref = truth.u - truth.u.mean(axis=0, keepdims=True)
    error = np.linalg.norm(est - ref, axis=-1)
    if region is not None:
        region.check_matches(truth.shape)
        error = error[:, region.mask]
    return float(error.mean()), float(np.percentile(error, 95))


def save_truth(truth: PhantomTruth, directory: str, config: PhantomConfig) -> Dict[str, str]:
    """Writes truth fields, masks and parameter maps plus a manifest.json; returns the manifest."""
    os.makedirs(directory, exist_ok=True)
    files = {
        "clean": "clean.qmr",
        "true_fields": "true_fields.qmr",
        "motion_fields": "motion_fields.qmr",
        "masks": "masks.qmr",
        "parameter_maps": "parameter_maps.qmr",
    }
    save_stack(truth.clean_stack, os.path.join(directory, files["clean"]))
    save_field(truth.true_fields, os.path.join(directory, files["true_fields"]))
    save_field(truth.motion_fields, os.path.join(directory, files["motion_fields"]))
    save_masks(truth.masks + [truth.motion_region], os.path.join(directory, files["masks"]))
    write_container(os.path.join(directory, files["parameter_maps"]),
                    np.stack([truth.a_map, truth.b_map, truth.true_t1_star_map]), "f32le",
                    {"maps": ["A", "B", "T1star"]})
    manifest = {"files": files, "config": config.model_dump(mode="json"),
                "labels": [m.label for m in truth.masks] + [truth.motion_region.label]}
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest
