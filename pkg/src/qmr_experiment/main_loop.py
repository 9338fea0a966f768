"""
End-to-end experiment: phantom (or files) -> register -> fit T1 -> evaluate.

The report mirrors the usual before/after comparison of motion correction:
ROI T1 SD error, D_PCA(K) and, when ground truth exists, endpoint error and
T1 bias. Everything except the `timing` section is deterministic for a fixed
config and seed.
"""

import json
import logging
import os
import time
from contextlib import contextmanager
from multiprocessing import Pool
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from qmr_motion import __version__
from qmr_motion.bspline import DisplacementField, load_field, save_field
from qmr_motion.config import Config, Similarity
from qmr_motion.errors import ConfigError, DataError, StageError, exit_code_for
from qmr_motion.export import save_map_images
from qmr_motion.metrics import d_pca
from qmr_motion.phantom import endpoint_error, generate_phantom
from qmr_motion.register import rpca_register
from qmr_motion.stack import ImageStack, RoiMask, load_masks, load_stack, save_stack, write_container
from qmr_motion.t1fit import T1MapResult, fit_map, roi_stats

from .evaluator import ExperimentEvaluator

logger = logging.getLogger(__name__)

ANNULUS_LABEL = "myocardium"


class _Inputs:
    """Stack, ROI masks and optional ground truth for one experiment."""

    def __init__(self, stack: ImageStack, masks: List[RoiMask], truth_fields: Optional[DisplacementField] = None,
                 truth_t1_star: Optional[np.ndarray] = None, motion_region: Optional[RoiMask] = None,
                 seed: Optional[int] = None):
        self.stack = stack
        self.masks = masks
        self.truth_fields = truth_fields
        self.truth_t1_star = truth_t1_star
        self.motion_region = motion_region
        self.seed = seed


@contextmanager
def _stage(name: str, timing: Dict[str, float]):
    start = time.perf_counter()
    logger.info("Stage %s started", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e
    finally:
        timing[name] = round(time.perf_counter() - start, 3)


def _existing(path: str, key: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"{key} does not exist: {path}")
    return path


def _load_inputs(config: Config) -> _Inputs:
    experiment = config.section("experiment")
    if experiment.get("source", "phantom") == "phantom":
        phantom_config = config.phantom_config()
        truth = generate_phantom(phantom_config)
        return _Inputs(truth.observed_stack, truth.masks, truth.true_fields, truth.true_t1_star_map,
                       truth.motion_region, phantom_config.seed)

    if experiment.get("source") != "files":
        raise ConfigError(f"experiment.source must be 'phantom' or 'files', got {experiment.get('source')!r}")
    if not experiment.get("input") or not experiment.get("mask"):
        raise ConfigError("experiment.source = 'files' needs both experiment.input and experiment.mask")
    stack = load_stack(_existing(experiment["input"], "experiment.input"))
    masks = load_masks(_existing(experiment["mask"], "experiment.mask"))
    truth_fields, motion_region = None, None
    truth_dir = experiment.get("truth_dir")
    if truth_dir:
        _existing(truth_dir, "experiment.truth_dir")
        truth_fields = load_field(os.path.join(truth_dir, "true_fields.qmr"))
        region = [m for m in load_masks(os.path.join(truth_dir, "masks.qmr")) if m.label == "motion-region"]
        motion_region = region[0] if region else None
    return _Inputs(stack, masks, truth_fields, None, motion_region)


def _roi_masks(inputs: _Inputs, labels: Sequence[str]) -> List[RoiMask]:
    by_label = {m.label: m for m in inputs.masks}
    missing = [label for label in labels if label not in by_label]
    if missing:
        raise ConfigError(f"ROI labels {missing} not found; available: {sorted(by_label)}")
    return [by_label[label] for label in labels]


def _union(masks: Sequence[RoiMask]) -> RoiMask:
    union = np.zeros_like(masks[0].mask)
    for mask in masks:
        union = union | mask.mask
    return RoiMask(union, "+".join(m.label for m in masks))


def _roi_summary(maps: T1MapResult, rois: Sequence[RoiMask],
                 truth_t1_star: Optional[np.ndarray]) -> Dict[str, Dict[str, Any]]:
    summary = {}
    for roi in rois:
        sd_mean, sd_std, count = roi_stats(maps.sd_map, roi, maps.converged)
        t1_mean, t1_std, _ = roi_stats(maps.t1_star_map, roi, maps.converged)
        entry = {"sd_mean": sd_mean, "sd_std": sd_std, "t1_star_mean": t1_mean, "t1_star_std": t1_std,
                 "converged_pixels": count, "pixels": roi.count}
        if truth_t1_star is not None:
            usable = roi.mask & maps.converged
            entry["t1_star_bias"] = float(np.mean(np.abs(maps.t1_star_map[usable] - truth_t1_star[usable])))
        summary[roi.label] = entry
    return summary


def _mean_sd(maps: T1MapResult, roi: RoiMask) -> float:
    return roi_stats(maps.sd_map, roi, maps.converged)[0]


def _register_and_fit(inputs: _Inputs, config: Config, union: RoiMask, timing, tag: str, **updates):
    registration_config = config.registration_config().model_copy(update=updates)
    with _stage(f"register{tag}", timing):
        result = rpca_register(inputs.stack, registration_config)
    with _stage(f"fit_after{tag}", timing):
        maps = fit_map(result.warped, union, config.t1fit_config())
    return result, maps


def _after_metrics(inputs: _Inputs, result, maps_after: T1MapResult, union: RoiMask, top_k: int) -> Dict[str, Any]:
    field_magnitude = np.linalg.norm(result.fields.u, axis=-1)
    metrics = {
        "d_pca_after": d_pca(result.warped.frames, top_k),
        "sd_after": _mean_sd(maps_after, union),
        "field_max_px": float(field_magnitude.max()),
        "field_mean_px": float(field_magnitude.mean()),
    }
    if inputs.truth_fields is not None:
        metrics["endpoint_error_after"], metrics["endpoint_error_after_p95"] = endpoint_error(
            result.fields, inputs.truth_fields, inputs.motion_region)
    return metrics


def run_experiment(config_source, output_dir: Optional[str] = None) -> Dict[str, Any]:
    """
    Runs one experiment. `config_source` is a path to a JSON/YAML/TOML file or a Config.
    Returns the report; `report["evaluation"]["passed"]` tells whether every threshold held.
    """
    timing: Dict[str, float] = {}
    with _stage("config", timing):
        config = config_source if isinstance(config_source, Config) else Config(custom_config_path=config_source)
    experiment = config.section("experiment")
    evaluation = config.section("evaluation")
    output_dir = output_dir or experiment.get("output_dir")
    top_k = int(evaluation.get("top_k", 1))

    with _stage("load", timing):
        inputs = _load_inputs(config)
        rois = _roi_masks(inputs, evaluation.get("roi_labels") or [m.label for m in inputs.masks])
        union = _union(rois)

    with _stage("fit_before", timing):
        maps_before = fit_map(inputs.stack, union, config.t1fit_config())
        d_pca_before = d_pca(inputs.stack.frames, top_k)

    similarity = config.registration_config().similarity
    result, maps_after = _register_and_fit(inputs, config, union, timing, "")
    with _stage("evaluate", timing):
        metrics: Dict[str, Any] = {"d_pca_before": d_pca_before, "sd_before": _mean_sd(maps_before, union)}
        metrics.update(_after_metrics(inputs, result, maps_after, union, top_k))
        if inputs.truth_fields is not None:
            zero = DisplacementField.zeros(*inputs.stack.frames.shape)
            metrics["endpoint_error_before"], metrics["endpoint_error_before_p95"] = endpoint_error(
                zero, inputs.truth_fields, inputs.motion_region)

        report: Dict[str, Any] = {
            "experiment": experiment.get("name", config.experiment_name),
            "version": __version__,
            "seed": inputs.seed,
            "config": config.get_config(),
            "metrics": metrics,
            "rois_before": _roi_summary(maps_before, rois, inputs.truth_t1_star),
            "rois_after": _roi_summary(maps_after, rois, inputs.truth_t1_star),
            "registration": {k: v for k, v in result.to_report().items() if k != "loss_trace"},
            "timing": timing,
        }

    if experiment.get("compare_similarities"):
        other = Similarity.NCC if similarity == Similarity.NMI else Similarity.NMI
        _, maps_other = _register_and_fit(inputs, config, union, timing, f"_{other.value}", similarity=other)
        comparison = {similarity.value: report["rois_after"], other.value: _roi_summary(maps_other, rois, inputs.truth_t1_star)}
        report["similarity_comparison"] = {
            name: {"annulus_t1_star_bias": rois_.get(ANNULUS_LABEL, {}).get("t1_star_bias"),
                   "annulus_sd_mean": rois_.get(ANNULUS_LABEL, {}).get("sd_mean")}
            for name, rois_ in comparison.items()
        }

    if experiment.get("compare_rpca"):
        use_rpca = config.registration_config().use_rpca
        other_result, maps_other = _register_and_fit(inputs, config, union, timing, "_rpca_toggled", use_rpca=not use_rpca)
        with _stage("evaluate_rpca_toggled", timing):
            other_metrics = _after_metrics(inputs, other_result, maps_other, union, top_k)
        this_metrics = {key: metrics[key] for key in other_metrics}
        with_rpca, without_rpca = (this_metrics, other_metrics) if use_rpca else (other_metrics, this_metrics)
        report["rpca_comparison"] = {"with_rpca": with_rpca, "without_rpca": without_rpca}
        logger.info("rPCA comparison: SD %.3f with, %.3f without", with_rpca["sd_after"], without_rpca["sd_after"])

    report["evaluation"] = ExperimentEvaluator(config.section("thresholds")).evaluate(metrics)
    if result.aborted:
        report["evaluation"]["passed"] = False
        report["evaluation"]["failed_criteria"].append("registration_aborted")

    if output_dir:
        with _stage("write", timing):
            _write_outputs(output_dir, report, result, maps_before, maps_after, union, experiment.get("png", False))
    logger.info("Experiment '%s' %s", report["experiment"], "passed" if report["evaluation"]["passed"] else "failed")
    return report


def _write_outputs(output_dir, report, result, maps_before, maps_after, union, png: bool):
    os.makedirs(output_dir, exist_ok=True)
    save_stack(result.warped, os.path.join(output_dir, "warped.qmr"))
    save_field(result.fields, os.path.join(output_dir, "field.qmr"))
    for tag, maps in (("before", maps_before), ("after", maps_after)):
        write_container(os.path.join(output_dir, f"maps_{tag}.qmr"), maps.as_frames(), "f32le",
                        {"maps": list(T1MapResult.MAP_NAMES)})
        if png:
            save_map_images(maps.named_maps(), os.path.join(output_dir, f"maps_{tag}"), union.mask)
    with open(os.path.join(output_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)


def _run_one(config_path: str) -> Tuple[str, int, Dict[str, Any]]:
    try:
        report = run_experiment(config_path)
        return config_path, (0 if report["evaluation"]["passed"] else 1), report
    except Exception as e:
        logger.error("Experiment %s failed: %s", config_path, e)
        return config_path, exit_code_for(e), {"error": str(e), "stage": getattr(e, "stage", None)}


def run_many(config_paths: Sequence[str], jobs: int = 1) -> List[Tuple[str, int, Dict[str, Any]]]:
    """Runs several experiment configs, in a process pool when jobs > 1. Order follows the input."""
    if jobs <= 1 or len(config_paths) <= 1:
        return [_run_one(path) for path in config_paths]
    with Pool(processes=min(jobs, len(config_paths))) as pool:
        return pool.map(_run_one, list(config_paths))
