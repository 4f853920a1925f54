from .config import ExperimentConfig, plan_dict
from .experiments import RunResult, SamplingResult, evaluate_sampling, load_run, run_central, run_federated
from .report import ComparisonReport, DegenerateMean, MetricKeyMismatch, compare, percent_diff

__all__ = [
    "ComparisonReport", "DegenerateMean", "ExperimentConfig", "MetricKeyMismatch", "RunResult",
    "SamplingResult", "compare", "evaluate_sampling", "load_run", "percent_diff", "plan_dict",
    "run_central", "run_federated",
]
