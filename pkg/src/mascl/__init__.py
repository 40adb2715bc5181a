"""Per-parameter importance regularization for continual learning.

Modules:

* ``nn``: dense ReLU networks, flat parameter vectors, exact per-layer gradients.
* ``importance``: MAS (squared norm and vector output), local Hebbian, EWC, SI.
* ``continual``: penalized training and task-sequence orchestration.
* ``tasks``: MNIST IDX ingestion, permuted MNIST, synthetic tasks, subsets.
* ``analysis``: forgetting, memory accounting, importance diagnostics, CSV.
* ``experiments`` / ``cli``: declarative experiment grids.
"""
from .continual import TrainConfig, joint_train, run_sequence
from .importance import ImportanceMap
from .nn import FlatParams, Network, init_network

__version__ = "0.1.0"

__all__ = ["FlatParams", "ImportanceMap", "Network", "TrainConfig", "init_network", "joint_train",
           "run_sequence", "__version__"]
