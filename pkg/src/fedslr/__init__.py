"""Federated training of a shared low-rank model with sparse per-client
personal components, plus baselines, diagnostics and an experiment runner."""

from .baselines import fedavg_round, gpgd_round, lpgd_round
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .core import (ClientState, HyperParams, ServerState, aggregate_full,
                   aggregate_memory_efficient, aggregate_partial, local_fusion, run_round,
                   solve_local_subproblem, update_aux)
from .diagnostics import (CommLedger, RoundMetrics, comm_account, gradient_mapping, potential,
                          stationarity_residual)
from .linalg_prox import prox_l1, prox_nuclear, soft_threshold, svd
from .reshape import Conv, Dense, ParamSet, Passthrough, factorize, from_matrix, to_matrix
from .runner import build_task, run_experiment

__version__ = "0.1.0"
