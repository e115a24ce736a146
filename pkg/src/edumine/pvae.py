"""Partial variational auto-encoder over sparse binary answer rows.

The inference network is set-based: each observed (question, value) pair
is embedded, passed through a shared pointwise net, and summed, so any
subset of a row (including the empty set) maps to a posterior over the
latent student vector. The decoder emits one Bernoulli logit per
question, and training maximizes the evidence lower bound restricted to
observed entries.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .autodiff import Parameter, sigmoid_array, softplus_array
from .data import SparseAnswerMatrix
from .errors import ConfigError, DataError, TrainingError
from .gaussian import DiagGaussian
from .optim import Adam

log = logging.getLogger(__name__)

__all__ = ["PVaeParams", "PartialVAE", "ImputationResult", "evaluate_imputation",
           "pvae_predictor", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_VERSION = 1

_PARAM_FIELDS = [
    "q_embed", "q_bias",
    "enc_w1", "enc_b1", "enc_w2", "enc_b2",
    "post_w1", "post_b1", "post_w2", "post_b2",
    "dec_w1", "dec_b1", "dec_w2", "dec_b2",
]


@dataclass
class PVaeParams:
    """All trainable tensors plus the dimensions they were built for."""

    n_questions: int
    embed_dim: int
    feature_dim: int
    latent_dim: int
    hidden_dim: int
    sigma_floor: float
    q_embed: Parameter      # (M, c) per-question embedding
    q_bias: Parameter       # (M, 1) per-question location feature
    enc_w1: Parameter
    enc_b1: Parameter
    enc_w2: Parameter
    enc_b2: Parameter
    post_w1: Parameter
    post_b1: Parameter
    post_w2: Parameter
    post_b2: Parameter
    dec_w1: Parameter
    dec_b1: Parameter
    dec_w2: Parameter
    dec_b2: Parameter

    def parameters(self) -> list[Parameter]:
        return [getattr(self, name) for name in _PARAM_FIELDS]

    @classmethod
    def init(
        cls,
        n_questions: int,
        embed_dim: int,
        feature_dim: int,
        latent_dim: int,
        hidden_dim: int,
        sigma_floor: float,
        rng: np.random.Generator,
        rate_logits: np.ndarray | None = None,
    ) -> "PVaeParams":
        def dense(out_dim, in_dim, name):
            w = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim))
            return Parameter(w, name), Parameter(np.zeros(out_dim), name + "_bias")

        m, c, d, k, h = n_questions, embed_dim, feature_dim, latent_dim, hidden_dim
        q_embed = Parameter(rng.normal(0.0, 1.0 / np.sqrt(c), size=(m, c)), "q_embed")
        bias0 = np.zeros((m, 1)) if rate_logits is None else rate_logits.reshape(m, 1).copy()
        q_bias = Parameter(bias0, "q_bias")
        enc_w1, enc_b1 = dense(h, c + 2, "enc_w1")
        enc_w2, enc_b2 = dense(d, h, "enc_w2")
        post_w1, post_b1 = dense(h, d, "post_w1")
        post_w2, post_b2 = dense(2 * k, h, "post_w2")
        dec_w1, dec_b1 = dense(h, k, "dec_w1")
        dec_w2, dec_b2 = dense(m, h, "dec_w2")
        if rate_logits is not None:
            dec_b2.value[...] = rate_logits
        return cls(m, c, d, k, h, sigma_floor,
                   q_embed, q_bias, enc_w1, enc_b1, enc_w2, enc_b2,
                   post_w1, post_b1, post_w2, post_b2,
                   dec_w1, dec_b1, dec_w2, dec_b2)


def rate_logit_init(matrix: SparseAnswerMatrix, clamp: float = 3.0) -> np.ndarray:
    """Logit of each question's observed correctness rate, clamped."""
    counts = matrix.question_counts()
    sums = matrix.question_sums()
    total = counts.sum()
    global_rate = sums.sum() / total if total else 0.5
    rate = np.where(counts > 0, sums / np.maximum(counts, 1), global_rate)
    rate = np.clip(rate, 1e-12, 1.0 - 1e-12)
    return np.clip(np.log(rate / (1.0 - rate)), -clamp, clamp)


# ---------------------------------------------------------------------------
# Raw (gradient-free) forward passes, used for all inference.

def _pointwise_features(p: PVaeParams, qidx: np.ndarray, xvals: np.ndarray) -> np.ndarray:
    """Per-entry feature h([x, x*e_q, b_q]) for flat entry arrays."""
    x = xvals.reshape(-1, 1)
    s = np.concatenate([x, x * p.q_embed.value[qidx], p.q_bias.value[qidx]], axis=1)
    h1 = np.tanh(s @ p.enc_w1.value.T + p.enc_b1.value)
    return h1 @ p.enc_w2.value.T + p.enc_b2.value


def _posterior_from_agg(p: PVaeParams, agg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f1 = np.tanh(agg @ p.post_w1.value.T + p.post_b1.value)
    out = f1 @ p.post_w2.value.T + p.post_b2.value
    k = p.latent_dim
    mu = out[:, :k]
    sigma = softplus_array(out[:, k:]) + p.sigma_floor
    return mu, sigma


def _aggregate(p: PVaeParams, qidx, xvals, seg, n_sets) -> np.ndarray:
    agg = np.zeros((n_sets, p.feature_dim))
    if len(qidx):
        np.add.at(agg, seg, _pointwise_features(p, qidx, xvals))
    return agg


def _encode_sets(p: PVaeParams, qidx, xvals, seg, n_sets):
    return _posterior_from_agg(p, _aggregate(p, qidx, xvals, seg, n_sets))


def _decode_batch(p: PVaeParams, z: np.ndarray) -> np.ndarray:
    h1 = np.tanh(z @ p.dec_w1.value.T + p.dec_b1.value)
    return sigmoid_array(h1 @ p.dec_w2.value.T + p.dec_b2.value)


def _flatten_sets(sets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    qs, xs, segs = [], [], []
    for i, (qidx, xvals) in enumerate(sets):
        qs.append(np.asarray(qidx, dtype=np.int64))
        xs.append(np.asarray(xvals, dtype=np.float64))
        segs.append(np.full(len(qs[-1]), i, dtype=np.int64))
    if not qs:
        empty = np.empty(0, dtype=np.int64)
        return empty, np.empty(0, dtype=np.float64), empty
    return np.concatenate(qs), np.concatenate(xs), np.concatenate(segs)


def _check_pairs(pairs, n_questions: int) -> tuple[np.ndarray, np.ndarray]:
    """Validate and canonically sort a conditioning set.

    Accepts either a sequence of (question, value) pairs or a tuple of
    two parallel arrays as returned by SparseAnswerMatrix.row.
    """
    if (
        isinstance(pairs, tuple)
        and len(pairs) == 2
        and isinstance(pairs[0], np.ndarray)
        and isinstance(pairs[1], np.ndarray)
    ):
        qidx = np.asarray(pairs[0], dtype=np.int64)
        xvals = np.asarray(pairs[1], dtype=np.float64)
    else:
        pairs = list(pairs)
        if not pairs:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
        qidx = np.array([q for q, _ in pairs], dtype=np.int64)
        xvals = np.array([v for _, v in pairs], dtype=np.float64)
    if qidx.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    if np.any(qidx < 0) or np.any(qidx >= n_questions):
        raise ValueError("question index out of range")
    if len(np.unique(qidx)) != len(qidx):
        raise ValueError("duplicate question index in conditioning set")
    if not np.all((xvals == 0.0) | (xvals == 1.0)):
        raise ValueError("answer values must be 0 or 1")
    order = np.argsort(qidx)
    return qidx[order], xvals[order]


# ---------------------------------------------------------------------------
# Tape-based batched loss used for training and single-row ELBO evaluation.

def _batch_elbo_graph(
    p: PVaeParams,
    enc_q, enc_x, enc_seg, n_rows,
    lik_q, lik_x, lik_seg,
    noise_draws: list[np.ndarray],
):
    """Build the summed-over-rows ELBO as a Var.

    Returns (elbo, loglik, kl, mu, sigma); elbo = loglik - kl.
    """
    k = p.latent_dim
    if len(enc_q):
        xcol = ad.constant(enc_x.reshape(-1, 1))
        emb = ad.gather_rows(p.q_embed, enc_q)
        qb = ad.gather_rows(p.q_bias, enc_q)
        s = ad.concat([xcol, ad.mul(xcol, emb), qb], axis=1)
        h1 = ad.tanh(ad.affine(s, p.enc_w1, p.enc_b1))
        feats = ad.affine(h1, p.enc_w2, p.enc_b2)
        agg = ad.segment_sum(feats, enc_seg, n_rows)
    else:
        # Empty conditioning: the aggregate is a zero vector and the
        # encoder parameters legitimately receive zero gradient.
        agg = ad.constant(np.zeros((n_rows, p.feature_dim)))
    f1 = ad.tanh(ad.affine(agg, p.post_w1, p.post_b1))
    out = ad.affine(f1, p.post_w2, p.post_b2)
    mu = ad.slice_cols(out, 0, k)
    sigma = ad.shift(ad.softplus(ad.slice_cols(out, k, 2 * k)), p.sigma_floor)

    ll_terms = []
    for eps in noise_draws:
        z = ad.add(mu, ad.mul(sigma, ad.constant(eps)))
        d1 = ad.tanh(ad.affine(z, p.dec_w1, p.dec_b1))
        logits = ad.affine(d1, p.dec_w2, p.dec_b2)
        lvals = ad.take_pairs(logits, lik_seg, lik_q)
        # log Bernoulli(x; sigmoid(l)) = -(x*softplus(-l) + (1-x)*softplus(l))
        sp_neg = ad.softplus(ad.neg(lvals))
        sp_pos = ad.softplus(lvals)
        ll = ad.neg(ad.vsum(ad.add(
            ad.mul(ad.constant(lik_x), sp_neg),
            ad.mul(ad.constant(1.0 - lik_x), sp_pos),
        )))
        ll_terms.append(ll)
    ll_mean = ll_terms[0]
    for extra in ll_terms[1:]:
        ll_mean = ad.add(ll_mean, extra)
    if len(ll_terms) > 1:
        ll_mean = ad.scale(ll_mean, 1.0 / len(ll_terms))

    # KL(q || N(0, I)) summed over rows, in closed form.
    t = ad.add(ad.mul(mu, mu), ad.mul(sigma, sigma))
    t = ad.sub(ad.shift(t, -1.0), ad.scale(ad.log(sigma), 2.0))
    kl_sum = ad.scale(ad.vsum(t), 0.5)

    return ad.sub(ll_mean, kl_sum), ll_mean, kl_sum, mu, sigma


class PartialVAE(BaseEstimator):
    """Scikit-learn style estimator for probabilistic answer imputation.

    ``fit`` accepts a SparseAnswerMatrix or a dense (students, questions)
    array with NaN marking missing answers. During training a random
    fraction of each row is dropped from the encoder input (the
    likelihood still covers every observed entry) so the model stays
    calibrated for small conditioning sets.
    """

    def __init__(
        self,
        latent_dim: int = 20,
        embed_dim: int = 16,
        feature_dim: int = 32,
        hidden_dim: int = 64,
        epochs: int = 50,
        learning_rate: float = 0.001,
        batch_size: int = 128,
        dropout_range: tuple[float, float] = (0.0, 0.99),
        elbo_samples: int = 1,
        impute_samples: int = 50,
        sigma_floor: float = 1e-4,
        bias_init: str = "rate",
        seed: int = 0,
    ):
        self.latent_dim = latent_dim
        self.embed_dim = embed_dim
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.dropout_range = dropout_range
        self.elbo_samples = elbo_samples
        self.impute_samples = impute_samples
        self.sigma_floor = sigma_floor
        self.bias_init = bias_init
        self.seed = seed

    # -- fitting ----------------------------------------------------------

    def _validate_config(self):
        for name in ("latent_dim", "embed_dim", "feature_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        lo, hi = self.dropout_range
        if not (0.0 <= lo <= hi < 1.0):
            raise ConfigError(f"dropout_range must satisfy 0 <= lo <= hi < 1, got {self.dropout_range}")
        if self.elbo_samples < 1 or self.impute_samples < 1:
            raise ConfigError("sample counts must be >= 1")
        if self.sigma_floor <= 0:
            raise ConfigError("sigma_floor must be positive")
        if self.bias_init not in ("rate", "zero"):
            raise ConfigError(f"bias_init must be 'rate' or 'zero', got {self.bias_init!r}")

    @staticmethod
    def _as_matrix(x) -> SparseAnswerMatrix:
        if isinstance(x, SparseAnswerMatrix):
            return x
        return SparseAnswerMatrix.from_dense(np.asarray(x, dtype=np.float64))

    def fit(self, X, y=None, validation=None):
        """Train on one matrix; optionally track ELBO on a validation one."""
        self._validate_config()
        matrix = self._as_matrix(X)
        val_matrix = self._as_matrix(validation) if validation is not None else None
        if val_matrix is not None and val_matrix.n_questions != matrix.n_questions:
            raise DataError("validation matrix must share the question space")
        rng = np.random.default_rng(self.seed)
        rate_logits = rate_logit_init(matrix) if self.bias_init == "rate" else None
        params = PVaeParams.init(
            matrix.n_questions, self.embed_dim, self.feature_dim,
            self.latent_dim, self.hidden_dim, self.sigma_floor, rng, rate_logits,
        )
        opt = Adam(params.parameters(), lr=self.learning_rate)
        n = matrix.n_students
        lo, hi = self.dropout_range
        history = []
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(n)
            epoch_elbo = 0.0
            for start in range(0, n, self.batch_size):
                rows = order[start:start + self.batch_size]
                enc_sets, lik_sets = [], []
                for i in rows:
                    qidx, vals = matrix.row(i)
                    lik_sets.append((qidx, vals))
                    size = qidx.size
                    n_drop = int(np.floor(rng.uniform(lo, hi) * size)) if size else 0
                    if n_drop:
                        keep = np.sort(rng.choice(size, size - n_drop, replace=False))
                        enc_sets.append((qidx[keep], vals[keep]))
                    else:
                        enc_sets.append((qidx, vals))
                enc_q, enc_x, enc_seg = _flatten_sets(enc_sets)
                lik_q, lik_x, lik_seg = _flatten_sets(lik_sets)
                draws = [rng.standard_normal((len(rows), self.latent_dim))
                         for _ in range(self.elbo_samples)]
                elbo, _, _, _, _ = _batch_elbo_graph(
                    params, enc_q, enc_x, enc_seg, len(rows), lik_q, lik_x, lik_seg, draws,
                )
                value = float(elbo.value)
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {start // self.batch_size}"
                    )
                loss = ad.scale(elbo, -1.0 / len(rows))
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                epoch_elbo += value
            entry = {"epoch": epoch, "train_elbo": epoch_elbo / n}
            if val_matrix is not None:
                entry["val_elbo"] = self._dataset_elbo(params, val_matrix, seed=self.seed + epoch)
            history.append(entry)
        self.params_ = params
        self.history_ = history
        self.n_questions_ = matrix.n_questions
        self.question_ids_ = matrix.question_ids
        self._cache = {}
        return self

    def _dataset_elbo(self, params: PVaeParams, matrix: SparseAnswerMatrix, seed: int) -> float:
        rng = np.random.default_rng(seed)
        sets = [matrix.row(i) for i in range(matrix.n_students)]
        q, x, seg = _flatten_sets(sets)
        draws = [rng.standard_normal((matrix.n_students, params.latent_dim))]
        elbo, _, _, _, _ = _batch_elbo_graph(params, q, x, seg, matrix.n_students, q, x, seg, draws)
        return float(elbo.value) / matrix.n_students

    def _require_fit(self) -> PVaeParams:
        params = getattr(self, "params_", None)
        if params is None:
            raise NotFittedError("this PartialVAE instance is not fitted yet")
        return params

    # -- inference --------------------------------------------------------

    def encode(self, pairs) -> DiagGaussian:
        """Posterior over the latent vector given (question, answer) pairs.

        The pairs are sorted by question index before summation, so any
        permutation of the same set yields bitwise-identical output.
        """
        p = self._require_fit()
        qidx, xvals = _check_pairs(pairs, p.n_questions)
        mu, sigma = _encode_sets(p, qidx, xvals, np.zeros(len(qidx), dtype=np.int64), 1)
        return DiagGaussian(mu[0], sigma[0])

    def encode_sets(self, sets) -> tuple[np.ndarray, np.ndarray]:
        """Batched encode; returns (means, stds) with one row per set."""
        p = self._require_fit()
        checked = [_check_pairs(s, p.n_questions) for s in sets]
        q, x, seg = _flatten_sets(checked)
        return _encode_sets(p, q, x, seg, len(checked))

    def decode(self, z) -> np.ndarray:
        """Per-question correct-answer probabilities for one latent vector."""
        p = self._require_fit()
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (p.latent_dim,):
            raise ValueError(f"latent vector must have shape ({p.latent_dim},)")
        return _decode_batch(p, z[None, :])[0]

    def decode_batch(self, z: np.ndarray) -> np.ndarray:
        p = self._require_fit()
        return _decode_batch(p, np.asarray(z, dtype=np.float64))

    def elbo_terms(self, pairs, noise=None, conditioning=None) -> tuple[float, float]:
        """(expected log-likelihood over ``pairs``, KL to the prior) with
        one reparameterized sample; ``conditioning`` defaults to the same
        pairs."""
        p = self._require_fit()
        lik_q, lik_x = _check_pairs(pairs, p.n_questions)
        cond = pairs if conditioning is None else conditioning
        enc_q, enc_x = _check_pairs(cond, p.n_questions)
        if noise is None:
            noise = np.random.default_rng(self.seed).standard_normal(p.latent_dim)
        noise = np.asarray(noise, dtype=np.float64).reshape(1, p.latent_dim)
        _, loglik, kl, _, _ = _batch_elbo_graph(
            p,
            enc_q, enc_x, np.zeros(len(enc_q), dtype=np.int64), 1,
            lik_q, lik_x, np.zeros(len(lik_q), dtype=np.int64),
            [noise],
        )
        return float(loglik.value), float(kl.value)

    def elbo(self, pairs, noise=None, conditioning=None) -> float:
        """Single-row evidence lower bound (likelihood term minus KL)."""
        ll, kl = self.elbo_terms(pairs, noise=noise, conditioning=conditioning)
        return ll - kl

    def elbo_gradients(self, sets, noise: np.ndarray):
        """ELBO summed over the given rows plus parameter gradients.

        Exposed for gradient checking; ``noise`` has one row per set.
        """
        p = self._require_fit()
        checked = [_check_pairs(s, p.n_questions) for s in sets]
        q, x, seg = _flatten_sets(checked)
        noise = np.asarray(noise, dtype=np.float64).reshape(len(checked), p.latent_dim)
        elbo, _, _, _, _ = _batch_elbo_graph(p, q, x, seg, len(checked), q, x, seg, [noise])
        for param in p.parameters():
            param.zero_grad()
        ad.backward(elbo)
        grads = {param.name: param.grad.copy() for param in p.parameters()}
        for param in p.parameters():
            param.zero_grad()
        return float(elbo.value), grads

    def _posterior_samples(self, mu, sigma, n_samples, rng):
        eps = rng.standard_normal((mu.shape[0], n_samples, mu.shape[1]))
        return mu[:, None, :] + sigma[:, None, :] * eps

    def impute(self, pairs, n_samples: int | None = None, rng=None) -> np.ndarray:
        """p(answer correct | conditioning pairs) for every question,
        averaged over posterior samples. Conditioned positions are
        included in the output for diagnostics."""
        return self.impute_rows([pairs], n_samples=n_samples, rng=rng)[0]

    def impute_rows(self, sets, n_samples: int | None = None, rng=None,
                    chunk: int = 256) -> np.ndarray:
        p = self._require_fit()
        n_samples = n_samples or self.impute_samples
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        sets = list(sets)
        out = np.empty((len(sets), p.n_questions))
        for start in range(0, len(sets), chunk):
            part = sets[start:start + chunk]
            mu, sigma = self.encode_sets(part)
            z = self._posterior_samples(mu, sigma, n_samples, rng)
            probs = _decode_batch(p, z.reshape(-1, p.latent_dim))
            out[start:start + len(part)] = probs.reshape(
                len(part), n_samples, p.n_questions
            ).mean(axis=1)
        return out

    def predict_proba(self, X) -> np.ndarray:
        """Dense probability matrix given dense NaN-masked conditioning rows."""
        matrix = self._as_matrix(X)
        p = self._require_fit()
        if matrix.n_questions != p.n_questions:
            raise DataError("question count does not match the fitted model")
        sets = [matrix.row(i) for i in range(matrix.n_students)]
        return self.impute_rows(sets)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int8)

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "PartialVAE":
        return load_checkpoint(path)


# ---------------------------------------------------------------------------
# Evaluation harness shared with the baseline predictors.

@dataclass(frozen=True)
class ImputationResult:
    accuracy: float
    mae: float
    n_targets: int
    n_skipped: int


def evaluate_imputation(
    matrix: SparseAnswerMatrix,
    students,
    conditioning_fraction: float,
    predictor,
    seed: int = 0,
    threshold: float = 0.5,
) -> ImputationResult:
    """Split each student's row, condition on one part, score the rest.

    ``predictor(student, conditioning_pairs, target_questions, rng)``
    returns correct-answer probabilities for the target questions.
    Students whose target set comes out empty are skipped and counted.
    """
    if not 0.0 < conditioning_fraction < 1.0:
        raise ConfigError(f"conditioning fraction must be in (0, 1), got {conditioning_fraction}")
    students = list(students)
    children = np.random.SeedSequence([seed]).spawn(len(students))
    hits = 0.0
    abs_err = 0.0
    n_targets = 0
    n_skipped = 0
    for child, i in zip(children, students):
        rng = np.random.default_rng(child)
        qidx, vals = matrix.row(int(i))
        n = qidx.size
        n_cond = int(np.floor(conditioning_fraction * n + 0.5))
        if n == 0 or n_cond == n:
            n_skipped += 1
            continue
        perm = rng.permutation(n)
        cond_idx = np.sort(perm[:n_cond])
        targ_idx = np.sort(perm[n_cond:])
        cond = list(zip(qidx[cond_idx].tolist(), vals[cond_idx].tolist()))
        targets = qidx[targ_idx]
        truth = vals[targ_idx]
        probs = np.asarray(predictor(int(i), cond, targets, rng), dtype=np.float64)
        hits += np.sum((probs >= threshold) == (truth == 1.0))
        abs_err += np.sum(np.abs(probs - truth))
        n_targets += targets.size
    if n_targets == 0:
        raise DataError("no target answers left to evaluate")
    return ImputationResult(hits / n_targets, abs_err / n_targets, n_targets, n_skipped)


def pvae_predictor(model: PartialVAE, n_samples: int | None = None):
    def predict(student, conditioning, targets, rng):
        probs = model.impute(conditioning, n_samples=n_samples, rng=rng)
        return probs[targets]

    return predict


# ---------------------------------------------------------------------------
# Checkpoints: bit-exact round trip via npz.

def save_checkpoint(model: PartialVAE, path) -> None:
    params = model._require_fit()
    arrays = {name: getattr(params, name).value for name in _PARAM_FIELDS}
    meta = {
        "version": CHECKPOINT_VERSION,
        "estimator": model.get_params(),
        "dims": {
            "n_questions": params.n_questions,
            "embed_dim": params.embed_dim,
            "feature_dim": params.feature_dim,
            "latent_dim": params.latent_dim,
            "hidden_dim": params.hidden_dim,
            "sigma_floor": params.sigma_floor,
        },
        "extra": getattr(model, "meta_", {}),
    }
    buf = io.BytesIO()
    np.savez(
        buf,
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        question_ids=np.array(model.question_ids_, dtype=np.str_),
        history=np.frombuffer(json.dumps(model.history_).encode(), dtype=np.uint8),
        **arrays,
    )
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> PartialVAE:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"].tobytes()).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version in {path}")
        est = meta["estimator"]
        est["dropout_range"] = tuple(est["dropout_range"])
        model = PartialVAE(**est)
        dims = meta["dims"]
        params = PVaeParams.init(
            dims["n_questions"], dims["embed_dim"], dims["feature_dim"],
            dims["latent_dim"], dims["hidden_dim"], dims["sigma_floor"],
            np.random.default_rng(0),
        )
        for name in _PARAM_FIELDS:
            stored = data[name]
            current = getattr(params, name)
            if stored.shape != current.value.shape:
                raise DataError(f"checkpoint array {name} has wrong shape")
            current.value[...] = stored
        model.params_ = params
        model.history_ = json.loads(bytes(data["history"].tobytes()).decode())
        model.question_ids_ = tuple(str(q) for q in data["question_ids"])
        model.n_questions_ = dims["n_questions"]
        model.meta_ = meta.get("extra", {})
        model._cache = {}
    return model
