"""Synthetic two-parameter logistic (2PL) ground truth and observation
simulators, used as the desk-scale oracle for evaluating difficulty,
quality, and selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import sigmoid_array
from .data import SparseAnswerMatrix, default_ids
from .errors import ConfigError

__all__ = [
    "IrtGroundTruth",
    "ObservationModel",
    "generate_ground_truth",
    "answer_probability",
    "full_answer_matrix",
    "sample_answers",
    "save_ground_truth",
    "load_question_truth",
]


@dataclass(frozen=True)
class IrtGroundTruth:
    """Student abilities plus per-question difficulty and discrimination."""

    abilities: np.ndarray
    difficulties: np.ndarray
    discriminations: np.ndarray
    seed: int

    def __post_init__(self):
        for name in ("abilities", "difficulties", "discriminations"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.difficulties.shape != self.discriminations.shape:
            raise ConfigError("difficulties and discriminations must align")
        if np.any(self.discriminations <= 0):
            raise ConfigError("discriminations must be positive")

    @property
    def n_students(self) -> int:
        return self.abilities.shape[0]

    @property
    def n_questions(self) -> int:
        return self.difficulties.shape[0]


@dataclass(frozen=True)
class ObservationModel:
    """Which cells get observed: uniformly at random, or biased so that
    students mostly see questions matched to their ability."""

    mode: str = "mcar"
    density: float = 0.2
    bandwidth: float = 0.5

    def __post_init__(self):
        if self.mode not in ("mcar", "biased"):
            raise ConfigError(f"unknown observation mode {self.mode!r}")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError(f"density must be in (0, 1], got {self.density}")
        if self.bandwidth <= 0.0:
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}")


def generate_ground_truth(
    n_students: int,
    n_questions: int,
    seed: int = 0,
    discrimination_scale: float = 0.25,
) -> IrtGroundTruth:
    """Draw abilities and difficulties from N(0,1) and discriminations
    from a log-normal with the given log-scale (scale 0 gives all ones).
    """
    if n_students < 2 or n_questions < 2:
        raise ConfigError("need at least 2 students and 2 questions")
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal(n_students)
    b = rng.standard_normal(n_questions)
    a = rng.lognormal(mean=0.0, sigma=discrimination_scale, size=n_questions)
    return IrtGroundTruth(theta, b, a, seed)


def answer_probability(theta, a, b):
    """sigmoid(a * (theta - b)); exactly 0.5 when theta equals b."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a <= 0):
        raise ConfigError("discrimination must be positive")
    return sigmoid_array(a * (np.asarray(theta, dtype=np.float64) - np.asarray(b, dtype=np.float64)))


def _streams(seed: int):
    answers_ss, mask_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(answers_ss), np.random.default_rng(mask_ss)


def full_answer_matrix(truth: IrtGroundTruth, seed: int = 0) -> np.ndarray:
    """Every student's answer to every question, as drawn by sample_answers."""
    answers_rng, _ = _streams(seed)
    probs = answer_probability(
        truth.abilities[:, None], truth.discriminations[None, :], truth.difficulties[None, :]
    )
    return (answers_rng.random(probs.shape) < probs).astype(np.int8)


def _observation_probs(truth: IrtGroundTruth, obs: ObservationModel) -> np.ndarray:
    if obs.mode == "mcar":
        return np.full((truth.n_students, truth.n_questions), obs.density)
    d = truth.abilities[:, None] - truth.difficulties[None, :]
    w = np.exp(-(d * d) / (2.0 * obs.bandwidth**2))
    # Scale the kernel so the expected overall density hits the target,
    # re-balancing when the cap at probability 1 binds.
    s = obs.density * w.size / w.sum()
    for _ in range(100):
        p = np.minimum(1.0, s * w)
        mean = p.mean()
        if abs(mean - obs.density) < 1e-12:
            break
        s *= obs.density / mean
    return np.minimum(1.0, s * w)


def sample_answers(
    truth: IrtGroundTruth, obs: ObservationModel, seed: int = 0
) -> tuple[SparseAnswerMatrix, np.ndarray]:
    """Draw the observation mask and observed answers.

    Returns the sparse matrix and the boolean mask. Students or questions
    with zero observations are kept (downstream filtering may drop them).
    """
    answers_rng, mask_rng = _streams(seed)
    probs = answer_probability(
        truth.abilities[:, None], truth.discriminations[None, :], truth.difficulties[None, :]
    )
    answers = (answers_rng.random(probs.shape) < probs).astype(np.int8)
    mask = mask_rng.random(probs.shape) < _observation_probs(truth, obs)
    student_ids = default_ids("s", truth.n_students)
    question_ids = default_ids("q", truth.n_questions)
    rows = []
    for i in range(truth.n_students):
        qidx = np.nonzero(mask[i])[0]
        rows.append((qidx, answers[i, qidx].astype(np.float64)))
    return SparseAnswerMatrix(student_ids, question_ids, rows), mask


def save_ground_truth(
    truth: IrtGroundTruth,
    questions_path,
    students_path,
    question_ids=None,
    student_ids=None,
) -> None:
    """Dump the truth as ``question_id  a  b`` and ``student_id  theta`` TSVs."""
    question_ids = question_ids or default_ids("q", truth.n_questions)
    student_ids = student_ids or default_ids("s", truth.n_students)
    with open(questions_path, "w", encoding="utf-8") as fh:
        fh.write("question_id\ta\tb\n")
        for qid, a, b in zip(question_ids, truth.discriminations, truth.difficulties):
            fh.write(f"{qid}\t{a:.10g}\t{b:.10g}\n")
    with open(students_path, "w", encoding="utf-8") as fh:
        fh.write("student_id\ttheta\n")
        for sid, theta in zip(student_ids, truth.abilities):
            fh.write(f"{sid}\t{theta:.10g}\n")


def load_question_truth(path) -> dict[str, tuple[float, float]]:
    """Read a ``question_id  a  b`` TSV back as a mapping."""
    out: dict[str, tuple[float, float]] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:3] != ["question_id", "a", "b"]:
            raise ConfigError(f"{path}: expected a question_id/a/b header")
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) >= 3:
                out[parts[0]] = (float(parts[1]), float(parts[2]))
    return out
