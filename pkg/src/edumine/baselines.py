"""Imputation baselines: a one-parameter logistic (Rasch) model fit by
penalized maximum likelihood, plus random and majority-value predictors.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .autodiff import sigmoid_array
from .data import SparseAnswerMatrix
from .errors import ConfigError, TrainingError
from .optim import AdamState, adam_update

log = logging.getLogger(__name__)

__all__ = [
    "RaschModel",
    "random_impute",
    "majority_values",
    "majority_impute",
    "rasch_predictor",
    "random_predictor",
    "majority_predictor",
]


class RaschModel(BaseEstimator):
    """p(correct) = sigmoid(ability_i + intercept_j), fit with Adam on the
    L2-penalized Bernoulli log-likelihood. Abilities for unseen students
    are fit afterwards with the question intercepts frozen."""

    def __init__(
        self,
        epochs: int = 300,
        learning_rate: float = 0.1,
        l2: float = 1e-4,
        ability_steps: int = 200,
        seed: int = 0,
    ):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.l2 = l2
        self.ability_steps = ability_steps
        self.seed = seed

    def fit(self, X, y=None, students=None):
        """Fit on the given student rows (defaults to all rows of X)."""
        if self.epochs < 1 or self.ability_steps < 1:
            raise ConfigError("epochs and ability_steps must be >= 1")
        if self.learning_rate <= 0 or self.l2 < 0:
            raise ConfigError("learning_rate must be positive and l2 nonnegative")
        matrix = X if isinstance(X, SparseAnswerMatrix) else SparseAnswerMatrix.from_dense(X)
        rows = list(range(matrix.n_students)) if students is None else [int(i) for i in students]
        if not rows:
            raise ConfigError("no training rows given")
        sid, qid, val = [], [], []
        for local, i in enumerate(rows):
            qidx, vals = matrix.row(i)
            sid.append(np.full(qidx.size, local, dtype=np.int64))
            qid.append(qidx)
            val.append(vals)
        sid = np.concatenate(sid)
        qid = np.concatenate(qid)
        val = np.concatenate(val)

        theta = np.zeros(len(rows))
        d = np.zeros(matrix.n_questions)
        st_theta = AdamState(np.zeros_like(theta), np.zeros_like(theta))
        st_d = AdamState(np.zeros_like(d), np.zeros_like(d))
        trace = []
        rising = 0
        for epoch in range(1, self.epochs + 1):
            p = sigmoid_array(theta[sid] + d[qid])
            loglik = float(
                np.sum(val * np.log(np.maximum(p, 1e-300))
                       + (1.0 - val) * np.log(np.maximum(1.0 - p, 1e-300)))
            )
            penalty = self.l2 * (float(theta @ theta) + float(d @ d))
            loss = -loglik + penalty
            if trace and loss > trace[-1][1]:
                rising += 1
                if rising >= 5:
                    raise TrainingError(f"Rasch fit diverging at epoch {epoch}")
            else:
                rising = 0
            trace.append((loglik, loss))
            resid = p - val  # gradient of -loglik wrt logits
            g_theta = np.bincount(sid, weights=resid, minlength=len(rows)) + 2.0 * self.l2 * theta
            g_d = np.bincount(qid, weights=resid, minlength=matrix.n_questions) + 2.0 * self.l2 * d
            adam_update(theta, g_theta, st_theta, self.learning_rate)
            adam_update(d, g_d, st_d, self.learning_rate)

        self.intercepts_ = d
        self.abilities_ = theta
        self.train_students_ = np.array(rows, dtype=np.int64)
        self.loglik_trace_ = np.array([t[0] for t in trace])
        return self

    def _require_fit(self) -> np.ndarray:
        d = getattr(self, "intercepts_", None)
        if d is None:
            raise NotFittedError("this RaschModel instance is not fitted yet")
        return d

    def ability_for(self, pairs) -> float:
        """Penalized-likelihood ability for a conditioning set, with the
        question intercepts frozen. An empty set gives ability 0."""
        return float(self.abilities_for([pairs])[0])

    def abilities_for(self, sets) -> np.ndarray:
        d = self._require_fit()
        sets = [list(s) if not isinstance(s, tuple) else s for s in sets]
        sid, qid, val = [], [], []
        for i, s in enumerate(sets):
            if isinstance(s, tuple) and len(s) == 2 and isinstance(s[0], np.ndarray):
                qidx = np.asarray(s[0], dtype=np.int64)
                vals = np.asarray(s[1], dtype=np.float64)
            else:
                qidx = np.array([q for q, _ in s], dtype=np.int64)
                vals = np.array([v for _, v in s], dtype=np.float64)
            sid.append(np.full(qidx.size, i, dtype=np.int64))
            qid.append(qidx)
            val.append(vals)
        sid = np.concatenate(sid) if sid else np.empty(0, dtype=np.int64)
        qid = np.concatenate(qid) if qid else np.empty(0, dtype=np.int64)
        val = np.concatenate(val) if val else np.empty(0)
        theta = np.zeros(len(sets))
        state = AdamState(np.zeros_like(theta), np.zeros_like(theta))
        dq = d[qid]
        for _ in range(self.ability_steps):
            resid = sigmoid_array(theta[sid] + dq) - val
            grad = np.bincount(sid, weights=resid, minlength=len(sets)) + 2.0 * self.l2 * theta
            adam_update(theta, grad, state, self.learning_rate)
        return theta

    def predict_pair(self, ability: float, question: int) -> float:
        d = self._require_fit()
        return float(sigmoid_array(ability + d[question]))

    def predict_proba(self, ability, questions) -> np.ndarray:
        d = self._require_fit()
        return sigmoid_array(np.asarray(ability) + d[np.asarray(questions, dtype=np.int64)])


def random_impute(shape, seed: int = 0) -> np.ndarray:
    """Uniform(0, 1) probability per cell."""
    return np.random.default_rng(seed).random(shape)


def majority_values(matrix: SparseAnswerMatrix) -> np.ndarray:
    """Per-question observed majority value; ties and empty columns fall
    back to the global majority (1 on a global tie)."""
    counts = matrix.question_counts()
    sums = matrix.question_sums()
    total = counts.sum()
    global_major = 1.0 if total == 0 or 2 * sums.sum() >= total else 0.0
    out = np.full(matrix.n_questions, global_major)
    out[2 * sums > counts] = 1.0
    out[(counts > 0) & (2 * sums < counts)] = 0.0
    return out


def majority_impute(matrix: SparseAnswerMatrix) -> np.ndarray:
    """Dense matrix with missing cells filled by the question majority."""
    filled = np.tile(majority_values(matrix), (matrix.n_students, 1))
    for i in range(matrix.n_students):
        qidx, vals = matrix.row(i)
        filled[i, qidx] = vals
    return filled


def rasch_predictor(model: RaschModel):
    def predict(student, conditioning, targets, rng):
        ability = model.ability_for(conditioning)
        return model.predict_proba(ability, targets)

    return predict


def random_predictor():
    def predict(student, conditioning, targets, rng):
        return rng.random(len(targets))

    return predict


def majority_predictor(matrix: SparseAnswerMatrix):
    values = majority_values(matrix)

    def predict(student, conditioning, targets, rng):
        return values[np.asarray(targets, dtype=np.int64)]

    return predict
