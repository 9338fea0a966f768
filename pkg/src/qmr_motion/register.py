# src/qmr_motion/register.py
"""
Groupwise registration with an iterative low-rank round loop.

Each round decomposes the currently corrected sequence, registers its low-rank
part to the implicit mean reference by optimizing per-frame B-spline control
grids, and composes the round's field into the running total, which is always
applied to the original input.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .bspline import ControlGrid, DisplacementField, compose_displacements, ffd_basis, warp_frames
from .config import RegistrationConfig, Similarity
from .errors import ConvergenceError, DataError, DegenerateInputError
from .metrics import (cyclic_loss_with_gradient, d_pca, groupwise_ncc_loss_with_gradient,
                      groupwise_nmi_loss_with_gradient)
from .rpca import godec_decompose
from .stack import ImageStack, normalize_stack

logger = logging.getLogger(__name__)

_BETA1 = 0.9
_BETA2 = 0.999
_EPSILON = 1e-8
_REGROW = 1.1


class LossTerms(NamedTuple):
    total: float
    similarity: float
    smooth: float
    cyclic: float


@dataclass(frozen=True)
class RegistrationResult:
    fields: DisplacementField
    grids_per_round: List[ControlGrid]
    warped: ImageStack
    loss_trace: List[Dict[str, Any]] = field(default_factory=list)
    round_reports: List[Dict[str, Any]] = field(default_factory=list)
    aborted: bool = False
    abort_reason: Optional[str] = None

    def to_report(self) -> Dict[str, Any]:
        magnitude = np.linalg.norm(self.fields.u, axis=-1)
        return {
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "rounds_completed": sum(1 for r in self.round_reports if "kept" in r),
            "rounds_kept": len(self.grids_per_round),
            "rounds": self.round_reports,
            "loss_trace": self.loss_trace,
            "field_mean_px": float(magnitude.mean()),
            "field_max_px": float(magnitude.max()),
        }


def implicit_reference(warped) -> np.ndarray:
    """Pixelwise mean of the warped frames."""
    frames = warped.frames if isinstance(warped, ImageStack) else np.asarray(warped, dtype=np.float64)
    return frames.mean(axis=0)


def _frames_of(stack) -> np.ndarray:
    return stack.frames if isinstance(stack, ImageStack) else np.asarray(stack, dtype=np.float64)


def _coefficients_of(grids) -> np.ndarray:
    return grids.coefficients if isinstance(grids, ControlGrid) else np.asarray(grids, dtype=np.float64)


def _similarity_with_gradient(warped: np.ndarray, config: RegistrationConfig):
    if config.similarity == Similarity.NCC:
        return groupwise_ncc_loss_with_gradient(warped, config.ncc_window)
    return groupwise_nmi_loss_with_gradient(warped, config.bins)


def loss_and_gradient(frames: np.ndarray, coefficients: np.ndarray, config: RegistrationConfig):
    """Total loss terms and the gradient with respect to every control coefficient."""
    _, height, width = frames.shape
    basis = ffd_basis(height, width, config.control_spacing)
    basis.check(coefficients)
    u = basis.upsample(coefficients)
    warped, grad_rows, grad_cols = warp_frames(frames, u, with_gradient=True)

    similarity, d_warped = _similarity_with_gradient(warped, config)
    smooth, d_smooth = basis.bending(coefficients)
    cyclic, d_cyclic = cyclic_loss_with_gradient(u)

    d_dense = np.stack([d_warped * grad_rows, d_warped * grad_cols], axis=-1) + config.lambda_cyclic * d_cyclic
    gradient = basis.adjoint(d_dense) + config.lambda_smooth * d_smooth
    total = similarity + config.lambda_smooth * smooth + config.lambda_cyclic * cyclic
    return LossTerms(total, similarity, smooth, cyclic), gradient


def total_loss(stack, grids, config: RegistrationConfig) -> LossTerms:
    return loss_and_gradient(_frames_of(stack), _coefficients_of(grids), config)[0]


def loss_gradient(stack, grids, config: RegistrationConfig) -> np.ndarray:
    return loss_and_gradient(_frames_of(stack), _coefficients_of(grids), config)[1]


def _record(terms: LossTerms, round_index: int, step: int, step_size: float) -> Dict[str, Any]:
    return {"round": round_index, "step": step, "total": terms.total, "similarity": terms.similarity,
            "smooth": terms.smooth, "cyclic": terms.cyclic, "step_size": step_size}


def precondition(gradient: np.ndarray, config: RegistrationConfig) -> np.ndarray:
    """
    Search direction source for one step: the gradient with its frame mean
    removed (when `zero_sum_updates`) and smoothed over the control grid.
    """
    shaped = gradient
    if config.zero_sum_updates:
        shaped = shaped - shaped.mean(axis=0, keepdims=True)
    if config.update_sigma > 0:
        shaped = gaussian_filter(shaped, sigma=(0.0, config.update_sigma, config.update_sigma, 0.0), mode="nearest")
    return shaped


def optimize_round(stack, init: ControlGrid, config: RegistrationConfig,
                   trace: Optional[List[Dict[str, Any]]] = None, round_index: int = 1) -> ControlGrid:
    """
    Moment-scaled gradient descent on the control grid with backtracking.

    First and second moments are kept per coefficient, but the step is divided
    by the largest second moment of the whole grid, so `config.step_size` bounds
    how far the most active control point moves and coefficients with weak
    gradients move proportionally less.

    A step is accepted only if the total loss does not increase; a rejected
    step halves the step size, an accepted one grows it back towards
    `config.step_size`. If every backtrack of a step built on accumulated
    moments fails, the moments are reset and the next step starts from the
    plain gradient. A step from fresh moments that fails every backtrack (the
    first step of the round, or the first after a reset) ends the round.
    """
    frames = _frames_of(stack)
    coefficients = init.coefficients.copy()
    terms, gradient = loss_and_gradient(frames, coefficients, config)
    if not np.isfinite(terms.total):
        raise ConvergenceError(f"round {round_index}: initial loss is not finite ({terms.total})")
    if trace is not None:
        trace.append(_record(terms, round_index, 0, config.step_size))
    initial_total = terms.total

    first = np.zeros_like(coefficients)
    second = np.zeros_like(coefficients)
    t = 0
    step_size = config.step_size
    for step in range(1, config.steps_per_round + 1):
        shaped = precondition(gradient, config)
        t += 1
        first = _BETA1 * first + (1 - _BETA1) * shaped
        second = _BETA2 * second + (1 - _BETA2) * shaped ** 2
        scale = float(np.sqrt(second.max() / (1 - _BETA2 ** t)))
        if scale <= _EPSILON:
            logger.debug("Round %d: gradient vanished after %d steps", round_index, step - 1)
            break
        direction = (first / (1 - _BETA1 ** t)) / scale

        accepted = False
        for _ in range(config.max_backtracks + 1):
            candidate = coefficients - step_size * direction
            candidate_terms, candidate_gradient = loss_and_gradient(frames, candidate, config)
            if not np.isfinite(candidate_terms.total):
                raise ConvergenceError(f"round {round_index}, step {step}: loss became non-finite")
            if candidate_terms.total <= terms.total:
                accepted = True
                break
            step_size *= 0.5

        if accepted:
            coefficients, terms, gradient = candidate, candidate_terms, candidate_gradient
            if trace is not None:
                trace.append(_record(terms, round_index, step, step_size))
            step_size = min(step_size * _REGROW, config.step_size)
        elif t == 1:
            logger.debug("Round %d: no descent from fresh moments at step %d, stopping early", round_index, step)
            break
        else:
            logger.debug("Round %d: step %d rejected, resetting moments", round_index, step)
            first[:] = 0.0
            second[:] = 0.0
            t = 0

    logger.info("Round %d: loss %.6f -> %.6f", round_index, initial_total, terms.total)
    return ControlGrid(coefficients, init.spacing)


def _rescale_unit(frames: np.ndarray) -> np.ndarray:
    low, high = float(frames.min()), float(frames.max())
    if not high > low:
        raise DegenerateInputError("low-rank component is constant")
    return (frames - low) / (high - low)


def _safe_d_pca(frames: np.ndarray) -> Optional[float]:
    try:
        return d_pca(frames, 1)
    except DataError as e:
        logger.warning("D_PCA unavailable: %s", e)
        return None


def _smooth_driver(frames: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return frames
    return gaussian_filter(frames, sigma=(0.0, sigma, sigma), mode="nearest")


def rpca_register(stack: ImageStack, config: Optional[RegistrationConfig] = None) -> RegistrationResult:
    """
    Runs the round loop on `stack` and returns the accumulated fields.

    A round whose loss improves by less than `round_tolerance` of its starting
    loss is discarded (its field is not composed) and ends the loop, so a
    sequence without motion comes back with an (almost) identity field.
    """
    config = config or RegistrationConfig()
    normalized, _ = normalize_stack(stack)
    n, height, width = stack.frames.shape
    basis = ffd_basis(height, width, config.control_spacing)
    total = DisplacementField.zeros(n, height, width)
    current = normalized.frames
    grids: List[ControlGrid] = []
    trace: List[Dict[str, Any]] = []
    reports: List[Dict[str, Any]] = []
    aborted, reason = False, None

    for round_index in range(1, config.rounds + 1):
        report: Dict[str, Any] = {"round": round_index, "d_pca_before": _safe_d_pca(current)}
        if config.use_rpca:
            decomposition = godec_decompose(normalized.with_frames(current), config.rpca, seed=config.seed)
            report["rpca_iterations"] = decomposition.iterations_used
            report["rpca_relative_error"] = decomposition.final_relative_error
            driver = current if config.similarity_source == "original" else _rescale_unit(decomposition.low_rank.frames)
        else:
            driver = current
        driver = _smooth_driver(driver, config.driver_sigma)

        init = ControlGrid.zeros(n, height, width, config.control_spacing)
        round_trace: List[Dict[str, Any]] = []
        try:
            grid = optimize_round(driver, init, config, round_trace, round_index)
        except ConvergenceError as e:
            logger.error("Registration aborted in round %d: %s", round_index, e)
            aborted, reason = True, str(e)
            trace.extend(round_trace)
            reports.append(report)
            break
        trace.extend(round_trace)

        loss_before = round_trace[0]["total"]
        loss_after = round_trace[-1]["total"]
        report["loss_before"] = loss_before
        report["loss_after"] = loss_after
        if loss_before - loss_after < config.round_tolerance * abs(loss_before):
            report["kept"] = False
            report["d_pca_after"] = report["d_pca_before"]
            reports.append(report)
            logger.info("Round %d/%d: loss %.6f -> %.6f below tolerance, stopping",
                        round_index, config.rounds, loss_before, loss_after)
            break

        field_r = DisplacementField(basis.upsample(grid.coefficients))
        total = compose_displacements(field_r, total)
        current = warp_frames(normalized.frames, total.u)
        grids.append(grid)
        report["kept"] = True
        report["d_pca_after"] = _safe_d_pca(current)
        reports.append(report)
        logger.info("Round %d/%d: D_PCA %s -> %s", round_index, config.rounds,
                    report["d_pca_before"], report["d_pca_after"])

    warped = stack.with_frames(warp_frames(stack.frames, total.u))
    return RegistrationResult(total, grids, warped, trace, reports, aborted, reason)
