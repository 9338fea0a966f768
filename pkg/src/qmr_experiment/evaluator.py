import logging
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

# --- Acceptance Criteria ---
# Each criterion reads one or two numbers from the experiment metrics and
# passes or fails them against a threshold from the `thresholds` config section.
DEFAULT_CRITERIA = {
    "endpoint_error": {
        "description": "Mean endpoint error in the motion region after registration, relative to before.",
        "threshold_key": "max_endpoint_error_ratio",
        "kind": "max_ratio",
        "metric": ("endpoint_error_after", "endpoint_error_before"),
    },
    "d_pca": {
        "description": "D_PCA(K) must increase when frames are aligned.",
        "threshold_key": "require_dpca_increase",
        "kind": "increase",
        "metric": ("d_pca_after", "d_pca_before"),
    },
    "sd_reduction": {
        "description": "Relative reduction of the ROI-mean T1 SD error.",
        "threshold_key": "min_sd_reduction",
        "kind": "min_reduction",
        "metric": ("sd_after", "sd_before"),
    },
    "zero_motion_field": {
        "description": "Largest displacement (px) when the input has no motion.",
        "threshold_key": "max_zero_motion_field",
        "kind": "max_value",
        "metric": ("field_max_px",),
    },
    "sd_change": {
        "description": "Relative change of the ROI-mean T1 SD error (zero-motion runs).",
        "threshold_key": "max_sd_change",
        "kind": "max_abs_change",
        "metric": ("sd_after", "sd_before"),
    },
}


class ExperimentEvaluator:
    """Checks experiment metrics against acceptance thresholds; a threshold of None skips its criterion."""

    def __init__(self, thresholds: Dict[str, Any], criteria: Optional[Dict[str, Dict[str, Any]]] = None):
        self.criteria = criteria if criteria else DEFAULT_CRITERIA
        self.thresholds = thresholds

    def _check(self, kind: str, threshold: Any, values) -> Dict[str, Any]:
        if kind == "max_ratio":
            after, before = values
            if before <= 0:
                return {"observed": None, "passed": True}
            observed = after / before
            return {"observed": observed, "passed": observed <= threshold}
        if kind == "increase":
            after, before = values
            return {"observed": after - before, "passed": (after > before) if threshold else True}
        if kind == "min_reduction":
            after, before = values
            observed = (before - after) / before if before > 0 else 0.0
            return {"observed": observed, "passed": observed >= threshold}
        if kind == "max_value":
            return {"observed": values[0], "passed": values[0] <= threshold}
        if kind == "max_abs_change":
            after, before = values
            observed = abs(after - before) / before if before > 0 else abs(after - before)
            return {"observed": observed, "passed": observed <= threshold}
        raise ValueError(f"Unknown criterion kind '{kind}'")

    def evaluate(self, metrics: Dict[str, Any]) -> Dict[str, Any]:
        """
        Evaluates the metrics of one experiment run.
        Criteria whose threshold is unset or whose metrics are missing are reported as skipped.
        """
        details = {}
        for name, criterion in self.criteria.items():
            threshold = self.thresholds.get(criterion["threshold_key"])
            values = [metrics.get(key) for key in criterion["metric"]]
            if threshold is None or threshold is False or any(v is None for v in values):
                details[name] = {"status": "skipped", "threshold": threshold}
                continue
            outcome = self._check(criterion["kind"], threshold, values)
            if outcome["observed"] is None:
                details[name] = {"status": "skipped", "threshold": threshold}
                continue
            outcome.update({"status": "passed" if outcome["passed"] else "failed", "threshold": threshold})
            details[name] = outcome
            log = logger.info if outcome["passed"] else logger.warning
            log("Criterion %s: %s (observed %.4g, threshold %s)", name, outcome["status"],
                outcome["observed"], threshold)

        failed = [name for name, d in details.items() if d["status"] == "failed"]
        return {
            "passed": not failed,
            "failed_criteria": failed,
            "criteria": details,
        }
