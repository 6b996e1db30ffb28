"""Split learning simulator: six split topologies, federated averaging and
large-batch synchronous SGD baselines, with exact per-role FLOP and byte ledgers."""

from .engine import (ClientData, FederatedTrainer, LargeBatchTrainer, MonolithicNet, SplitTrainer,
                     run_federated_round, run_largebatch_sgd_round, run_split_epoch, run_split_step)
from .metering import ResourceLedger, predict, reconcile
from .topology import PartitionPlan, TopologyKind, build_plan, monolithic_equivalent, validate_plan

__version__ = "0.1.0"

__all__ = [
    "ClientData", "FederatedTrainer", "LargeBatchTrainer", "MonolithicNet", "SplitTrainer",
    "run_federated_round", "run_largebatch_sgd_round", "run_split_epoch", "run_split_step",
    "ResourceLedger", "predict", "reconcile",
    "PartitionPlan", "TopologyKind", "build_plan", "monolithic_equivalent", "validate_plan",
]
