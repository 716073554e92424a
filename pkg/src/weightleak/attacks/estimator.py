"""scikit-learn style front end to :func:`run_attack`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..models import ModelSpec, preset
from .core import AttackConfig, run_attack


class LeakageAttack(BaseEstimator):
    """Reconstruct the private batch behind one wiretapped update.

    ``fit`` runs the optimisation; ``transform`` returns the recovered
    images clamped to [0, 1] and ``predict`` the inferred labels.

    >>> attack = LeakageAttack(model="tiny-mlp", objective="dlm-plus", iterations=50)
    >>> attack.get_params()["objective"]
    'dlm-plus'
    """

    def __init__(self, model="tiny-mlp", objective="dlm-plus", k=1.0, gamma0=1.0, beta_tv=0.0,
                 optimizer="adam", lr=0.1, history=100, line_search=False, iterations=4000,
                 seed=0, success_threshold_db=30.0, batch_size=1):
        self.model = model
        self.objective = objective
        self.k = k
        self.gamma0 = gamma0
        self.beta_tv = beta_tv
        self.optimizer = optimizer
        self.lr = lr
        self.history = history
        self.line_search = line_search
        self.iterations = iterations
        self.seed = seed
        self.success_threshold_db = success_threshold_db
        self.batch_size = batch_size

    def _config(self) -> AttackConfig:
        params = self.get_params()
        params.pop("model")
        return AttackConfig(**params)

    def _spec(self) -> ModelSpec:
        return preset(self.model) if isinstance(self.model, str) else self.model

    def fit(self, update, truth=None, true_labels=None):
        """Attack ``update``; ``truth`` is used for scoring only."""
        self.spec_ = self._spec()
        self.result_ = run_attack(update, self.spec_, self._config(), truth=truth, true_labels=true_labels)
        self.recovered_ = np.clip(self.result_.recovered, 0.0, 1.0)
        self.labels_ = np.asarray(self.result_.labels)
        return self

    def transform(self, update=None):
        """Recovered images; refits when given a new update."""
        if update is not None:
            self.fit(update)
        check_is_fitted(self, "result_")
        return self.recovered_

    def predict(self, update=None):
        if update is not None:
            self.fit(update)
        check_is_fitted(self, "result_")
        return self.labels_

    def score(self, update, truth, true_labels=None) -> float:
        """PSNR of the reconstruction (higher is better)."""
        self.fit(update, truth, true_labels)
        return self.result_.final_psnr
