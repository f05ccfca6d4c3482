"""Minimal data manipulations that fake Disparate Impact compliance, and the
resampling tests a supervisory authority can use to detect them."""

__version__ = "0.1.0"

from .audit import AuditConfig, Auditor, run_battery, search_highest_undetected, test_sample  # noqa: E402
from .data import (CsvSchema, Dataset, GroupCounts, WeightedDistribution, bin_histogram,  # noqa: E402
                   disparate_impact, group_counts, load_csv, sample_fraction, write_csv)
from .discrete import equality_of_odds, match_greedy, replace_greedy  # noqa: E402
from .divergences import (kl_atoms, kl_sy, ks_two_sample, mmd, mmd_sy, wasserstein_exact,  # noqa: E402
                          wasserstein_sy)
from .entropic import delta_split, fairwash_entropic, solve_tilt  # noqa: E402
from .methods import METHODS, manipulate  # noqa: E402
from .model import Classifier, TrainConfig, fit, select_threshold  # noqa: E402
from .ot_projection import ManipulationResult, ProjectionConfig, fairwash_grad  # noqa: E402
from .synthetic import SyntheticSpec, gen_synthetic  # noqa: E402

__all__ = [
    "AuditConfig", "Auditor", "Classifier", "CsvSchema", "Dataset", "GroupCounts", "METHODS",
    "ManipulationResult", "ProjectionConfig", "SyntheticSpec", "TrainConfig", "WeightedDistribution",
    "bin_histogram", "delta_split", "disparate_impact", "equality_of_odds", "fairwash_entropic",
    "fairwash_grad", "fit", "gen_synthetic", "group_counts", "kl_atoms", "kl_sy", "ks_two_sample",
    "load_csv", "manipulate", "match_greedy", "mmd", "mmd_sy", "replace_greedy", "run_battery",
    "sample_fraction", "search_highest_undetected", "select_threshold", "solve_tilt", "test_sample",
    "wasserstein_exact", "wasserstein_sy", "write_csv",
]
