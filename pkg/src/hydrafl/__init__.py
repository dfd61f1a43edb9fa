"""Federated learning simulator for studying how distillation-based client
losses interact with untargeted model poisoning, plus a hybrid loss that
moves most of the distillation onto a shallow auxiliary classifier.

Pure NumPy: a dense ReLU network with manual backprop, client losses (CE,
not-true distillation, model-contrastive, and their hybrid variants), a
Dirichlet non-IID partitioner, mean / trimmed-mean aggregation, Stat-Opt and
Dyn-Opt attacks, and an experiment harness with a CLI.
"""

from .aggregation import Defense, aggregate_mean, aggregate_trimmed_mean, make_agr
from .attacks import AttackConfig, AttackKind, DynOptDirection, StatOptForm, apply_attack, dyn_opt, stat_opt
from .data import (
    ClientShard,
    LabeledDataset,
    PartitionConfig,
    dirichlet_partition,
    load_idx,
    synth_gaussian_mixture,
)
from .errors import ConfigError, FormatError, HydraError, InputError, NumericError
from .federation import FederationConfig, Simulation, local_train, run_round, sample_clients
from .harness import ExperimentConfig, run_experiment, run_paired, run_sweep
from .losses import DistillContext, LossKind, LossSpec, client_loss
from .metrics import MetricsRecord, accuracy_drop, evaluate
from .nn import ModelArch, OptimizerState, ParameterVector, backward, forward, grad_check, init_params, sgd_step

__version__ = "0.1.0"
