"""Question analytics: difficulty from the model-completed matrix,
information-based quality scores, the entropy baseline, topic
aggregation, and Spearman rank correlation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .baselines import majority_values
from .data import SparseAnswerMatrix
from .errors import ConfigError, DataError
from .gaussian import kl_to_standard
from .pvae import PartialVAE, _encode_sets

log = logging.getLogger(__name__)

__all__ = [
    "DifficultyReport",
    "QualityReport",
    "difficulty_report",
    "baseline_difficulty",
    "topic_ranking",
    "question_quality",
    "quality_report",
    "entropy_baseline",
    "spearman",
]


@dataclass(frozen=True)
class DifficultyReport:
    """Per-question easiness (mean correctness over the completed matrix)
    and its complement. Both directions are carried to avoid sign
    confusion in downstream comparisons."""

    question_ids: tuple[str, ...]
    easiness: np.ndarray
    difficulty: np.ndarray
    n_observed: np.ndarray
    n_imputed: np.ndarray

    def __post_init__(self):
        if not np.allclose(self.easiness + self.difficulty, 1.0, atol=1e-12):
            raise ValueError("easiness and difficulty must sum to 1")


@dataclass(frozen=True)
class QualityReport:
    question_ids: tuple[str, ...]
    scores: np.ndarray       # information score per question, >= 0
    entropies: np.ndarray    # observed-rate entropy baseline
    sample_counts: np.ndarray


def difficulty_report(
    model: PartialVAE,
    matrix: SparseAnswerMatrix,
    n_samples: int | None = None,
    seed: int = 0,
    chunk: int = 256,
) -> DifficultyReport:
    """Complete the matrix (observed values kept, missing cells imputed
    conditioned on each student's full row) and take column means."""
    params = model._require_fit()
    if matrix.n_questions != params.n_questions:
        raise DataError("matrix question count does not match the model")
    n, m = matrix.n_students, matrix.n_questions
    rng = np.random.default_rng(seed)
    col_sum = np.zeros(m)
    for start in range(0, n, chunk):
        rows = range(start, min(start + chunk, n))
        sets = [matrix.row(i) for i in rows]
        probs = model.impute_rows(sets, n_samples=n_samples, rng=rng, chunk=chunk)
        for k, i in enumerate(rows):
            qidx, vals = matrix.row(i)
            probs[k, qidx] = vals
        col_sum += probs.sum(axis=0)
    counts = matrix.question_counts()
    easiness = col_sum / n
    return DifficultyReport(
        question_ids=matrix.question_ids,
        easiness=easiness,
        difficulty=1.0 - easiness,
        n_observed=counts,
        n_imputed=n - counts,
    )


def baseline_difficulty(matrix: SparseAnswerMatrix, mode: str, seed: int = 0) -> DifficultyReport:
    """Model-free difficulty schemes: seeded random scores, majority-value
    imputation, or observed-entry column means."""
    n, m = matrix.n_students, matrix.n_questions
    counts = matrix.question_counts()
    sums = matrix.question_sums()
    if mode == "random":
        if m < 2:
            raise ConfigError("random difficulty needs at least 2 questions")
        difficulty = np.random.default_rng(seed).permutation(m) / (m - 1)
        easiness = 1.0 - difficulty
    elif mode == "majority":
        fill = majority_values(matrix)
        easiness = (sums + (n - counts) * fill) / n
        difficulty = 1.0 - easiness
    elif mode == "observed":
        total = counts.sum()
        global_rate = sums.sum() / total if total else 0.5
        easiness = np.where(counts > 0, sums / np.maximum(counts, 1), global_rate)
        difficulty = 1.0 - easiness
    else:
        raise ConfigError(f"unknown difficulty mode {mode!r}")
    return DifficultyReport(matrix.question_ids, easiness, difficulty, counts, n - counts)


def topic_ranking(report: DifficultyReport, meta: dict[str, list[str]]):
    """Mean difficulty per topic, hardest first; a question contributes to
    each of its topics. Ties break on the topic label. Questions without
    metadata are excluded with a warning."""
    totals: dict[str, list[float]] = {}
    for qid, diff in zip(report.question_ids, report.difficulty):
        topics = meta.get(qid)
        if not topics:
            log.warning("question %s has no topic metadata; excluded from ranking", qid)
            continue
        for topic in topics:
            totals.setdefault(topic, []).append(float(diff))
    ranked = sorted(
        ((topic, float(np.mean(vals)), len(vals)) for topic, vals in totals.items()),
        key=lambda t: (-t[1], t[0]),
    )
    return ranked


def _sample_observers(matrix: SparseAnswerMatrix, seed: int, max_samples: int):
    """For each question, seeded sample of (observing students' answers)."""
    n, m = matrix.n_students, matrix.n_questions
    by_question_vals: list[list[float]] = [[] for _ in range(m)]
    for i in range(n):
        qidx, vals = matrix.row(i)
        for q, v in zip(qidx, vals):
            by_question_vals[q].append(v)
    sampled: list[np.ndarray] = []
    for q in range(m):
        vals = np.asarray(by_question_vals[q])
        if vals.size == 0:
            sampled.append(vals)
            continue
        s = min(max_samples, vals.size)
        rng = np.random.default_rng(np.random.SeedSequence([seed, q]))
        take = rng.choice(vals.size, size=s, replace=False) if s < vals.size else np.arange(vals.size)
        sampled.append(vals[take])
    return sampled


def question_quality(
    model: PartialVAE,
    matrix: SparseAnswerMatrix,
    question: int,
    n_samples: int = 500,
    seed: int = 0,
) -> float:
    """Mean KL from the prior of the posterior conditioned on a single
    sampled observed answer to this question."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    params = model._require_fit()
    sampled = _sample_observers(matrix, seed, n_samples)[question]
    if sampled.size == 0:
        raise DataError(
            f"question {matrix.question_ids[question]} has no observed answers"
        )
    qidx = np.full(sampled.size, question, dtype=np.int64)
    seg = np.arange(sampled.size, dtype=np.int64)
    mu, sigma = _encode_sets(params, qidx, sampled, seg, sampled.size)
    return float(np.mean(kl_to_standard(mu, sigma)))


def entropy_baseline(matrix: SparseAnswerMatrix, question: int) -> float:
    """Entropy of the observed correctness rate; zero for rates 0 and 1."""
    counts = matrix.question_counts()
    if counts[question] == 0:
        raise DataError(f"question {matrix.question_ids[question]} has no observed answers")
    p = matrix.question_sums()[question] / counts[question]
    return _binary_entropy(p)


def _binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-p * np.log(p) - (1.0 - p) * np.log(1.0 - p))


def quality_report(
    model: PartialVAE,
    matrix: SparseAnswerMatrix,
    max_samples: int = 500,
    seed: int = 0,
) -> QualityReport:
    """Information score and entropy baseline for every question with at
    least one observed answer (others get NaN)."""
    params = model._require_fit()
    if matrix.n_questions != params.n_questions:
        raise DataError("matrix question count does not match the model")
    m = matrix.n_questions
    sampled = _sample_observers(matrix, seed, max_samples)
    qs, xs, segs = [], [], []
    counts = np.zeros(m, dtype=np.int64)
    for q in range(m):
        vals = sampled[q]
        counts[q] = vals.size
        if vals.size:
            qs.append(np.full(vals.size, q, dtype=np.int64))
            xs.append(vals)
            segs.append(np.full(vals.size, q, dtype=np.int64))
    scores = np.full(m, np.nan)
    if qs:
        flat_q = np.concatenate(qs)
        flat_x = np.concatenate(xs)
        seg = np.arange(flat_q.size, dtype=np.int64)
        mu, sigma = _encode_sets(params, flat_q, flat_x, seg, flat_q.size)
        kls = kl_to_standard(mu, sigma)
        owner = np.concatenate(segs)
        totals = np.bincount(owner, weights=kls, minlength=m)
        scores = np.divide(totals, counts, out=np.full(m, np.nan), where=counts > 0)
    obs_counts = matrix.question_counts()
    obs_sums = matrix.question_sums()
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = obs_sums / obs_counts
    entropies = np.array([
        _binary_entropy(rates[q]) if obs_counts[q] else np.nan for q in range(m)
    ])
    return QualityReport(matrix.question_ids, scores, entropies, counts)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    base = np.arange(1, x.size + 1, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = base[i:j + 1].mean()
        i = j + 1
    return ranks


def spearman(scores_a, scores_b) -> float | None:
    """Rank correlation with average ranks for ties.

    Returns None (not 0) when either input is constant, where the
    coefficient is undefined.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("inputs must be equal-length vectors of length >= 2")
    if np.any(~np.isfinite(a)) or np.any(~np.isfinite(b)):
        raise ValueError("inputs must be finite")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    sa = ra.std()
    sb = rb.std()
    if sa == 0.0 or sb == 0.0:
        return None
    return float(np.mean((ra - ra.mean()) * (rb - rb.mean())) / (sa * sb))
