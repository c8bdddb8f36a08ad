"""Federated adversarial training with boundary-distance re-weighting and
global-model regularisation, plus baseline defenses, attacks and partitioners."""

from .attacks import AttackConfig, ProbeResult, boundary_probe, fgsm, mim, pgd, run_attack
from .data import (
    ClientShard, Dataset, PartitionSpec, load_mnist_idx, make_synthetic_blobs, partition,
    partition_dirichlet, partition_iid, partition_shards,
)
from .estimator import FederatedAdversarialClassifier
from .evaluation import (
    Metrics, RoundReport, accuracy_clean, accuracy_robust, boundary_grid, per_class_accuracy,
)
from .federation import (
    ClientUpdate, FedConfig, ServerState, aggregate_fedavg, local_train, run_round,
    select_clients,
)
from .losses import (
    DefenseConfig, WeightVector, loss_alp, loss_dbfat, loss_pgd_at, loss_trades, weights_rho,
)
from .nn import (
    NetworkSpec, ParamSet, backward_input, backward_params, forward, init_params,
    kl_divergence, sgd_step, softmax_cross_entropy,
)

__version__ = "0.1.0"
