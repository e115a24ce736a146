"""Sequential question selection driven by expected information gain.

Each step scores candidate questions by the expected KL divergence
between the latent posterior after and before observing the answer
(exact over the two binary outcomes; Monte Carlo only for the predictive
probability), then reveals the chosen answer and re-imputes the held-out
targets. Includes the random and population-averaged (single global
sequence) baselines plus an offline replay evaluation.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SparseAnswerMatrix, hold_out_targets
from .errors import ConfigError
from .gaussian import kl_diag_batch
from .pvae import PartialVAE, _aggregate, _check_pairs, _pointwise_features, _posterior_from_agg

log = logging.getLogger(__name__)

__all__ = [
    "StrategyConfig",
    "SelectionSession",
    "StrategyResult",
    "information_reward",
    "information_rewards",
    "select_next",
    "run_session",
    "sing_sequences",
    "rand_strategy",
    "evaluate_strategies",
    "replay_oracle",
    "matrix_oracle",
]


@dataclass(frozen=True)
class StrategyConfig:
    steps: int = 10
    reward_samples: int = 30
    impute_samples: int = 50
    seed: int = 0
    candidates: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.reward_samples < 1 or self.impute_samples < 1:
            raise ConfigError("sample counts must be >= 1")


@dataclass
class SelectionSession:
    student: int
    conditioning: list[tuple[int, int]] = field(default_factory=list)
    chosen: list[int] = field(default_factory=list)
    targets: list[tuple[int, int]] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    step_mae: list[float] = field(default_factory=list)
    initial_mae: float = float("nan")
    exhausted: bool = False


@dataclass(frozen=True)
class StrategyResult:
    strategies: tuple[str, ...]
    mean_mae: dict[str, np.ndarray]
    stderr_mae: dict[str, np.ndarray]
    n_sessions: int
    sessions: dict[str, list[SelectionSession]] | None = None


def _singleton_features(model: PartialVAE) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise feature of {(q, 0)} and {(q, 1)} for every question q;
    cached per fitted parameter set."""
    cache = getattr(model, "_cache", None)
    if cache is None:
        cache = model._cache = {}
    if "singleton" not in cache:
        p = model._require_fit()
        all_q = np.arange(p.n_questions, dtype=np.int64)
        h0 = _pointwise_features(p, all_q, np.zeros(p.n_questions))
        h1 = _pointwise_features(p, all_q, np.ones(p.n_questions))
        cache["singleton"] = (h0, h1)
    return cache["singleton"]


def _reward_core(model: PartialVAE, conditioning, candidates: np.ndarray, noise: np.ndarray):
    """Rewards for all candidates given one conditioning set.

    The base posterior's samples are shared across candidates, and the
    augmented-set aggregates are formed incrementally from the base
    aggregate plus the candidate's singleton feature.
    """
    p = model._require_fit()
    qidx, xvals = _check_pairs(conditioning, p.n_questions)
    if np.any(np.isin(candidates, qidx)):
        raise ValueError("candidate question already in the conditioning set")
    base_agg = _aggregate(p, qidx, xvals, np.zeros(len(qidx), dtype=np.int64), 1)
    base_mu, base_sigma = _posterior_from_agg(p, base_agg)

    z = base_mu[0] + base_sigma[0] * noise  # (n_samples, K)
    probs = model.decode_batch(z)           # (n_samples, M)
    p_hat = probs[:, candidates].mean(axis=0)

    h0, h1 = _singleton_features(model)
    agg0 = base_agg[0] + h0[candidates]
    agg1 = base_agg[0] + h1[candidates]
    mu0, sigma0 = _posterior_from_agg(p, agg0)
    mu1, sigma1 = _posterior_from_agg(p, agg1)
    kl0 = kl_diag_batch(mu0, sigma0, base_mu, base_sigma)
    kl1 = kl_diag_batch(mu1, sigma1, base_mu, base_sigma)
    return p_hat * kl1 + (1.0 - p_hat) * kl0


def information_reward(
    model: PartialVAE,
    conditioning,
    question: int,
    n_samples: int = 30,
    seed: int = 0,
    noise: np.ndarray | None = None,
) -> float:
    """Expected posterior shift from observing the answer to ``question``.

    Nonnegative by construction: a convex combination of two KL terms.
    """
    p = model._require_fit()
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal((n_samples, p.latent_dim))
    rewards = _reward_core(model, conditioning, np.array([question], dtype=np.int64), noise)
    return float(rewards[0])


def information_rewards(model, conditioning, candidates, noise) -> np.ndarray:
    return _reward_core(model, conditioning, np.asarray(candidates, dtype=np.int64), noise)


def _best_candidate(candidates: np.ndarray, rewards: np.ndarray) -> int:
    """Index (into candidates) of the max reward; ties take the smallest
    question index. Candidates are kept sorted, so argmax suffices."""
    return int(np.argmax(rewards))


def select_next(model, session: SelectionSession, candidates, rng=None, n_samples: int = 30):
    """Greedy argmax of the information reward over the candidate pool."""
    p = model._require_fit()
    candidates = np.asarray(sorted(candidates), dtype=np.int64)
    if candidates.size == 0:
        raise ConfigError("candidate pool is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    noise = rng.standard_normal((n_samples, p.latent_dim))
    rewards = _reward_core(model, session.conditioning, candidates, noise)
    k = _best_candidate(candidates, rewards)
    return int(candidates[k]), float(rewards[k])


def _pool(n_questions: int, session: SelectionSession, dead: set, restrict=None) -> np.ndarray:
    blocked = {q for q, _ in session.conditioning}
    blocked.update(session.chosen)
    blocked.update(q for q, _ in session.targets)
    blocked.update(dead)
    universe = range(n_questions) if restrict is None else restrict
    return np.array(sorted(q for q in universe if q not in blocked), dtype=np.int64)


def _target_mae(model, session: SelectionSession, rng, n_samples: int) -> float:
    # Draw the imputation noise even without targets so rng consumption
    # (and hence reproducibility) does not depend on the target set.
    probs = model.impute(session.conditioning, n_samples=n_samples, rng=rng)
    if not session.targets:
        return float("nan")
    tq = np.array([q for q, _ in session.targets], dtype=np.int64)
    tv = np.array([v for _, v in session.targets], dtype=np.float64)
    return float(np.mean(np.abs(probs[tq] - tv)))


def run_session(
    model: PartialVAE,
    oracle,
    targets,
    config: StrategyConfig,
    student: int = 0,
) -> SelectionSession:
    """Greedy selection loop: choose, reveal, extend the conditioning set,
    and score the targets after every step.

    ``oracle(question)`` returns 0/1, or None when no answer exists, in
    which case the question is dropped from the pool and the next-best
    candidate is taken.
    """
    p = model._require_fit()
    rng = np.random.default_rng(config.seed)
    session = SelectionSession(student=student, targets=[(int(q), int(v)) for q, v in targets])
    session.initial_mae = _target_mae(model, session, rng, config.impute_samples)
    dead: set[int] = set()
    for _ in range(config.steps):
        cands = _pool(p.n_questions, session, dead, config.candidates)
        if cands.size == 0:
            session.exhausted = True
            break
        noise = rng.standard_normal((config.reward_samples, p.latent_dim))
        rewards = _reward_core(model, session.conditioning, cands, noise)
        answer = None
        for k in np.argsort(-rewards, kind="stable"):
            q = int(cands[k])
            answer = oracle(q)
            if answer is None:
                dead.add(q)
                continue
            session.chosen.append(q)
            session.rewards.append(float(rewards[k]))
            session.conditioning.append((q, int(answer)))
            break
        if answer is None:
            session.exhausted = True
            break
        session.step_mae.append(_target_mae(model, session, rng, config.impute_samples))
    return session


def sing_sequences(
    model: PartialVAE,
    oracles: list,
    targets_per_student: list,
    config: StrategyConfig,
) -> tuple[list[int], list[SelectionSession]]:
    """One global sequence chosen by the population-averaged reward.

    Every student receives the same question at each step but reveals
    their own answer; questions in any student's target set are excluded
    from the pool. With a single student this reduces to run_session.
    """
    if not oracles or len(oracles) != len(targets_per_student):
        raise ConfigError("need one oracle per student")
    p = model._require_fit()
    rng = np.random.default_rng(config.seed)
    sessions = [
        SelectionSession(student=i, targets=[(int(q), int(v)) for q, v in targets])
        for i, targets in enumerate(targets_per_student)
    ]
    for s in sessions:
        s.initial_mae = _target_mae(model, s, rng, config.impute_samples)
    blocked: set[int] = set()
    for s in sessions:
        blocked.update(q for q, _ in s.targets)
    dead: set[int] = set()
    sequence: list[int] = []
    universe = range(p.n_questions) if config.candidates is None else config.candidates
    for _ in range(config.steps):
        cands = np.array(
            sorted(q for q in universe if q not in blocked and q not in dead and q not in sequence),
            dtype=np.int64,
        )
        if cands.size == 0:
            for s in sessions:
                s.exhausted = True
            break
        noise = rng.standard_normal((config.reward_samples, p.latent_dim))
        totals = np.zeros(cands.size)
        for s in sessions:
            totals += _reward_core(model, s.conditioning, cands, noise)
        rewards = totals / len(sessions)
        chosen = None
        for k in np.argsort(-rewards, kind="stable"):
            q = int(cands[k])
            answers = [oracle(q) for oracle in oracles]
            if all(a is None for a in answers):
                dead.add(q)
                continue
            chosen = q
            sequence.append(q)
            for s, a in zip(sessions, answers):
                s.chosen.append(q)
                s.rewards.append(float(rewards[k]))
                if a is not None:
                    s.conditioning.append((q, int(a)))
            break
        if chosen is None:
            for s in sessions:
                s.exhausted = True
            break
        for s in sessions:
            s.step_mae.append(_target_mae(model, s, rng, config.impute_samples))
    return sequence, sessions


def rand_strategy(candidates, steps: int, seed: int = 0) -> tuple[list[int], bool]:
    """Uniform sample without replacement; flags a pool smaller than steps."""
    candidates = sorted(int(q) for q in candidates)
    rng = np.random.default_rng(seed)
    take = min(steps, len(candidates))
    picks = rng.choice(len(candidates), size=take, replace=False)
    return [candidates[i] for i in picks], take < steps


def _rand_session(model, oracle, targets, config: StrategyConfig, student: int = 0) -> SelectionSession:
    """Random selection replayed with the same reveal/impute loop."""
    p = model._require_fit()
    rng = np.random.default_rng(config.seed)
    session = SelectionSession(student=student, targets=[(int(q), int(v)) for q, v in targets])
    session.initial_mae = _target_mae(model, session, rng, config.impute_samples)
    pool = _pool(p.n_questions, session, set(), config.candidates)
    order = rng.permutation(pool.size)
    taken = 0
    for k in order:
        if taken == config.steps:
            break
        q = int(pool[k])
        answer = oracle(q)
        if answer is None:
            continue
        session.chosen.append(q)
        session.rewards.append(float("nan"))
        session.conditioning.append((q, int(answer)))
        session.step_mae.append(_target_mae(model, session, rng, config.impute_samples))
        taken += 1
    if taken < config.steps:
        session.exhausted = True
    return session


def replay_oracle(matrix: SparseAnswerMatrix, student: int):
    """Answers from the student's logged row; None for unseen questions."""
    qidx, vals = matrix.row(student)
    row = {int(q): int(v) for q, v in zip(qidx, vals)}
    return lambda q: row.get(q)


def matrix_oracle(answers: np.ndarray, student: int):
    """Answers from a fully generated answer matrix."""
    row = answers[student]
    return lambda q: int(row[q])


# Stream id for the shared-sequence strategy, outside the student range.
_SING_STREAM = 2**31 - 1


def _session_seed(seed: int, run: int, student: int) -> int:
    return int(np.random.SeedSequence([seed, run, student]).generate_state(1)[0])


def evaluate_strategies(
    model: PartialVAE,
    matrix: SparseAnswerMatrix,
    students,
    config: StrategyConfig,
    runs: int = 10,
    target_fraction: float = 0.1,
    strategies=("ours", "rand", "sing"),
    full_answers: np.ndarray | None = None,
    population: int | None = None,
    threads: int = 1,
    keep_sessions: bool = False,
) -> StrategyResult:
    """Per-step mean target MAE for each strategy over runs x students.

    Targets are re-drawn per run from each student's observed row. When
    ``full_answers`` is given it answers revealed questions; otherwise
    answers replay from the observed row (missing ones trigger
    reselection).
    """
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    known = {"ours", "rand", "sing"}
    if not set(strategies) <= known:
        raise ConfigError(f"unknown strategy in {strategies}; pick from {sorted(known)}")
    students = [int(i) for i in students if matrix.row(int(i))[0].size >= 2]
    if not students:
        raise ConfigError("no usable students (need at least 2 observed answers)")
    mae: dict[str, list[list[float]]] = {name: [] for name in strategies}
    all_sessions: dict[str, list[SelectionSession]] = {name: [] for name in strategies}

    for run in range(runs):
        run_rng = np.random.default_rng(np.random.SeedSequence([config.seed, run]))
        cohort = students
        if population is not None and population < len(students):
            cohort = sorted(run_rng.choice(students, size=population, replace=False).tolist())
        targets = {}
        oracles = {}
        for i in cohort:
            _, targ = hold_out_targets(
                matrix.pairs(i), target_fraction, seed=_session_seed(config.seed, run, i)
            )
            targets[i] = targ
            oracles[i] = (
                matrix_oracle(full_answers, i) if full_answers is not None
                else replay_oracle(matrix, i)
            )

        def per_student(i, which):
            cfg = replace(config, seed=_session_seed(config.seed, run, i))
            if which == "ours":
                return run_session(model, oracles[i], targets[i], cfg, student=i)
            return _rand_session(model, oracles[i], targets[i], cfg, student=i)

        for name in strategies:
            if name == "sing":
                cfg = replace(config, seed=_session_seed(config.seed, run, _SING_STREAM))
                _, sessions = sing_sequences(
                    model, [oracles[i] for i in cohort], [targets[i] for i in cohort], cfg
                )
            elif threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    sessions = list(pool.map(lambda i: per_student(i, name), cohort))
            else:
                sessions = [per_student(i, name) for i in cohort]
            for s in sessions:
                if len(s.step_mae) == config.steps:
                    mae[name].append(s.step_mae)
                else:
                    log.warning("dropping truncated %s session (student %d)", name, s.student)
            if keep_sessions:
                all_sessions[name].extend(sessions)

    means = {}
    stderrs = {}
    n_sessions = 0
    for name in strategies:
        arr = np.asarray(mae[name])
        if arr.size == 0:
            raise ConfigError(f"no complete sessions for strategy {name!r}")
        means[name] = arr.mean(axis=0)
        stderrs[name] = arr.std(axis=0, ddof=1) / np.sqrt(arr.shape[0]) if arr.shape[0] > 1 else np.zeros(arr.shape[1])
        n_sessions = max(n_sessions, arr.shape[0])
    return StrategyResult(
        strategies=tuple(strategies),
        mean_mae=means,
        stderr_mae=stderrs,
        n_sessions=n_sessions,
        sessions=all_sessions if keep_sessions else None,
    )
