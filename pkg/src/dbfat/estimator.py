"""scikit-learn compatible wrapper around the federated trainer.

``FederatedAdversarialClassifier.fit(X, y)`` partitions ``(X, y)`` across
simulated clients and runs federated adversarial training; the fitted global
model then predicts like any other classifier, so it drops into pipelines,
``cross_val_score`` and ``GridSearchCV``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attacks import AttackConfig, run_attack
from .data import Dataset, PartitionSpec, partition
from .federation import FedConfig, ServerState, run_round, stream
from .losses import DefenseConfig
from .nn import NetworkSpec, init_params, predict_logits, softmax


def check_unit_range(X: np.ndarray) -> np.ndarray:
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("features must be scaled to [0, 1] (attacks clip to that box)")
    return X


class FederatedAdversarialClassifier(ClassifierMixin, BaseEstimator):
    """Federated adversarially trained MLP classifier.

    Parameters
    ----------
    defense : {"dbfat", "pgd_at", "alp", "trades", "plain"}
    beta : float
        Weight of the regulariser (KL to the global model for ``dbfat``).
    reweight : bool
        ``dbfat`` only: weight samples by boundary distance; False gives
        uniform weights.
    epsilon, step_size, attack_steps :
        L-infinity budget, step size and iterations of the training attack.
    eps_warmup_rounds : int
        Ramp the training epsilon linearly up to ``epsilon`` over this many rounds.
    n_clients, clients_per_round, rounds, local_epochs, batch_size, lr, prox_mu :
        Federation settings; ``prox_mu > 0`` adds the FedProx term.
    partition, dirichlet_alpha, shards_per_client :
        How training data is split across clients.
    n_jobs : int
        Client threads per round.
    """

    def __init__(self, hidden_layer_sizes=(128, 64), defense="dbfat", beta=1.5, reweight=True,
                 epsilon=0.3, step_size=0.01, attack_steps=20, eps_warmup_rounds=0, n_clients=10,
                 clients_per_round=5, rounds=10, local_epochs=5, batch_size=10, lr=0.01,
                 prox_mu=0.0, partition="iid", dirichlet_alpha=0.5, shards_per_client=2,
                 n_jobs=1, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.defense = defense
        self.beta = beta
        self.reweight = reweight
        self.epsilon = epsilon
        self.step_size = step_size
        self.attack_steps = attack_steps
        self.eps_warmup_rounds = eps_warmup_rounds
        self.n_clients = n_clients
        self.clients_per_round = clients_per_round
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.prox_mu = prox_mu
        self.partition = partition
        self.dirichlet_alpha = dirichlet_alpha
        self.shards_per_client = shards_per_client
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _fed_config(self) -> FedConfig:
        attack = AttackConfig("pgd", self.epsilon, self.step_size, self.attack_steps)
        defense = DefenseConfig(self.defense, self.beta, attack, self.reweight)
        return FedConfig(self.n_clients, self.clients_per_round, self.local_epochs,
                         self.batch_size, self.lr, self.rounds, defense, self.prox_mu,
                         self.random_state, self.eps_warmup_rounds)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_unit_range(X)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        seed = int(self.random_state)
        cfg = self._fed_config()
        data = Dataset(X, y_enc, len(self.classes_))
        spec_p = PartitionSpec(self.partition, self.n_clients, self.dirichlet_alpha,
                               self.shards_per_client, seed)
        self.shards_ = partition(data, spec_p)
        self.network_ = NetworkSpec.mlp(X.shape[1], self.hidden_layer_sizes, len(self.classes_))
        server = ServerState(init_params(self.network_, stream(seed, "init")), 0, seed)
        self.history_ = []
        for _ in range(self.rounds):
            server, report = run_round(server, self.shards_, data, self.network_, cfg, self.n_jobs)
            self.history_.append(report)
        self.params_ = server.global_params
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict_logits(self.network_, self.params_, X)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def perturb(self, X, y, attack: AttackConfig | str = "pgd", random_state=None) -> np.ndarray:
        """Adversarial versions of ``X`` against the fitted global model."""
        check_is_fitted(self, "params_")
        X, y = check_X_y(X, y, dtype=np.float64)
        check_unit_range(X)
        if isinstance(attack, str):
            attack = AttackConfig(attack, self.epsilon, self.step_size, self.attack_steps)
        y_enc = np.searchsorted(self.classes_, y)
        if np.any(self.classes_[np.minimum(y_enc, len(self.classes_) - 1)] != y):
            raise ValueError("y contains labels not seen during fit")
        return run_attack(self.network_, self.params_, X, y_enc, attack, random_state)

    def robust_score(self, X, y, attack: AttackConfig | str = "pgd", random_state=None) -> float:
        """Accuracy on adversarially perturbed inputs."""
        X_adv = self.perturb(X, y, attack, random_state)
        return float(np.mean(self.predict(X_adv) == np.asarray(y)))
