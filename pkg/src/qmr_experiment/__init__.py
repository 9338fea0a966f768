from .evaluator import DEFAULT_CRITERIA, ExperimentEvaluator
from .main_loop import run_experiment, run_many

__all__ = ["DEFAULT_CRITERIA", "ExperimentEvaluator", "run_experiment", "run_many"]
