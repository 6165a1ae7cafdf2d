"""Config loading, strategy bundles, experiment commands and the CLI."""
from .bundles import AlgorithmEntry, builtin_bundles, bundle_by_name, pretrain
from .commands import (EXTERNAL, INTERNAL, Leaderboard, cmd_central_baseline,
                       cmd_demographics, cmd_evaluate, cmd_gen_data, cmd_leaderboard,
                       cmd_rank, cmd_run, compare_phases, load_predictor, run_challenge)
from .config import ExperimentConfig, build_config, load_config

__all__ = [
    "AlgorithmEntry", "EXTERNAL", "ExperimentConfig", "INTERNAL", "Leaderboard",
    "build_config", "builtin_bundles", "bundle_by_name", "cmd_central_baseline",
    "cmd_demographics", "cmd_evaluate", "cmd_gen_data", "cmd_leaderboard", "cmd_rank",
    "cmd_run", "compare_phases", "load_config", "load_predictor", "pretrain", "run_challenge",
]
