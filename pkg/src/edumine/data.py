"""Sparse answer-matrix data model: CSV ingestion, preprocessing, splits,
holdout partitions, and a line-oriented serialization format.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

__all__ = [
    "AnswerRecord",
    "SparseAnswerMatrix",
    "StudentSplit",
    "ingest_csv",
    "preprocess",
    "split_students",
    "hold_out_targets",
    "save_matrix",
    "load_matrix",
    "load_question_meta",
]


@dataclass(frozen=True)
class AnswerRecord:
    student_id: str
    question_id: str
    correct: int
    timestamp: int | None = None

    def __post_init__(self):
        if self.correct not in (0, 1):
            raise DataError(f"correctness must be 0 or 1, got {self.correct!r}")


class SparseAnswerMatrix:
    """Per-student rows of (question index, 0/1 value) pairs.

    Rows are stored sorted by question index, which fixes the summation
    order everywhere downstream. Instances are immutable after
    construction and safe to share.
    """

    def __init__(self, student_ids, question_ids, rows):
        self.student_ids = tuple(str(s) for s in student_ids)
        self.question_ids = tuple(str(q) for q in question_ids)
        if not self.student_ids or not self.question_ids:
            raise DataError("matrix must have at least one student and one question")
        m = len(self.question_ids)
        self._rows = []
        for i, (qidx, vals) in enumerate(rows):
            qidx = np.asarray(qidx, dtype=np.int64)
            vals = np.asarray(vals, dtype=np.float64)
            if qidx.shape != vals.shape or qidx.ndim != 1:
                raise DataError(f"row {i}: malformed index/value arrays")
            if qidx.size and (qidx[0] < 0 or qidx[-1] >= m):
                raise DataError(f"row {i}: question index out of range")
            if qidx.size > 1 and np.any(np.diff(qidx) <= 0):
                raise DataError(f"row {i}: question indices must be strictly increasing")
            if not np.all((vals == 0.0) | (vals == 1.0)):
                raise DataError(f"row {i}: values must be 0 or 1")
            qidx.flags.writeable = False
            vals.flags.writeable = False
            self._rows.append((qidx, vals))
        if len(self._rows) != len(self.student_ids):
            raise DataError("row count does not match student count")
        self._student_index = {s: i for i, s in enumerate(self.student_ids)}
        self._question_index = {q: j for j, q in enumerate(self.question_ids)}

    @property
    def n_students(self) -> int:
        return len(self.student_ids)

    @property
    def n_questions(self) -> int:
        return len(self.question_ids)

    @property
    def n_observed(self) -> int:
        return sum(q.size for q, _ in self._rows)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self._rows[i]

    def pairs(self, i: int) -> list[tuple[int, int]]:
        qidx, vals = self._rows[i]
        return [(int(q), int(v)) for q, v in zip(qidx, vals)]

    def student_index(self, student_id: str) -> int:
        return self._student_index[student_id]

    def question_index(self, question_id: str) -> int:
        return self._question_index[question_id]

    def question_counts(self) -> np.ndarray:
        counts = np.zeros(self.n_questions, dtype=np.int64)
        for qidx, _ in self._rows:
            counts[qidx] += 1
        return counts

    def question_sums(self) -> np.ndarray:
        sums = np.zeros(self.n_questions, dtype=np.float64)
        for qidx, vals in self._rows:
            sums[qidx] += vals
        return sums

    def subset_students(self, indices) -> "SparseAnswerMatrix":
        """Row subset sharing the full question index space."""
        indices = [int(i) for i in indices]
        return SparseAnswerMatrix(
            [self.student_ids[i] for i in indices],
            self.question_ids,
            [self._rows[i] for i in indices],
        )

    def to_dense(self) -> np.ndarray:
        """Dense (n_students, n_questions) array with NaN for missing cells."""
        out = np.full((self.n_students, self.n_questions), np.nan)
        for i, (qidx, vals) in enumerate(self._rows):
            out[i, qidx] = vals
        return out

    @classmethod
    def from_dense(cls, x, student_ids=None, question_ids=None) -> "SparseAnswerMatrix":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise DataError(f"dense input must be 2-d, got shape {x.shape}")
        n, m = x.shape
        if student_ids is None:
            student_ids = default_ids("s", n)
        if question_ids is None:
            question_ids = default_ids("q", m)
        rows = []
        for i in range(n):
            obs = np.nonzero(~np.isnan(x[i]))[0]
            rows.append((obs, x[i, obs]))
        return cls(student_ids, question_ids, rows)

    def __eq__(self, other):
        if not isinstance(other, SparseAnswerMatrix):
            return NotImplemented
        return (
            self.student_ids == other.student_ids
            and self.question_ids == other.question_ids
            and all(
                np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                for a, b in zip(self._rows, other._rows)
            )
        )


def default_ids(prefix: str, n: int) -> list[str]:
    width = len(str(max(n - 1, 0)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


@dataclass(frozen=True)
class StudentSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def ingest_csv(
    path,
    student_col: str = "student_id",
    question_col: str = "question_id",
    correct_col: str = "is_correct",
    timestamp_col: str = "timestamp",
    max_skip_fraction: float = 0.01,
) -> list[AnswerRecord]:
    """Read answer records from a CSV file with a header row.

    Malformed rows are skipped with a warning; more than
    ``max_skip_fraction`` of rows skipped is fatal.
    """
    records: list[AnswerRecord] = []
    skipped = 0
    total = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for col in (student_col, question_col, correct_col):
            if col not in fields:
                raise DataError(f"missing required column {col!r} in {path}")
        has_ts = timestamp_col in fields
        for lineno, row in enumerate(reader, start=2):
            total += 1
            sid = (row.get(student_col) or "").strip()
            qid = (row.get(question_col) or "").strip()
            raw_correct = (row.get(correct_col) or "").strip()
            raw_ts = (row.get(timestamp_col) or "").strip() if has_ts else ""
            try:
                correct = int(raw_correct)
                if correct not in (0, 1):
                    raise ValueError(f"is_correct={raw_correct}")
                if not sid or not qid:
                    raise ValueError("empty id")
                ts = int(raw_ts) if raw_ts else None
            except ValueError as exc:
                skipped += 1
                log.warning("skipping line %d of %s: %s", lineno, path, exc)
                continue
            records.append(AnswerRecord(sid, qid, correct, ts))
    if total and skipped / total > max_skip_fraction:
        raise DataError(
            f"{skipped} of {total} rows unparsable in {path}, above the "
            f"{max_skip_fraction:.0%} threshold"
        )
    return records


def _dedup_latest(records) -> dict[tuple[str, str], int]:
    """Keep the latest answer per (student, question).

    Later timestamps win; file order breaks ties and decides when
    timestamps are absent.
    """
    best: dict[tuple[str, str], tuple[tuple, int]] = {}
    for order, rec in enumerate(records):
        ts = rec.timestamp if rec.timestamp is not None else -math.inf
        key = (rec.student_id, rec.question_id)
        rank = (ts, order)
        if key not in best or rank > best[key][0]:
            best[key] = (rank, rec.correct)
    return {key: val for key, (_, val) in best.items()}


def preprocess(
    records,
    min_answers_per_question: int = 50,
    min_answers_per_student: int = 50,
) -> SparseAnswerMatrix:
    """Deduplicate, filter sparse questions/students to a fixed point,
    and assemble the matrix with sorted-id index maps.
    """
    if min_answers_per_question < 0 or min_answers_per_student < 0:
        raise ConfigError("filter thresholds must be nonnegative")
    cells = _dedup_latest(records)
    n_dedup = len(cells)

    students = {sid for sid, _ in cells}
    questions = {qid for _, qid in cells}
    while True:
        q_counts: dict[str, int] = {}
        for (sid, qid) in cells:
            if sid in students and qid in questions:
                q_counts[qid] = q_counts.get(qid, 0) + 1
        new_questions = {
            q for q in questions if q_counts.get(q, 0) >= min_answers_per_question
        }
        s_counts: dict[str, int] = {}
        for (sid, qid) in cells:
            if sid in students and qid in new_questions:
                s_counts[sid] = s_counts.get(sid, 0) + 1
        new_students = {
            s for s in students if s_counts.get(s, 0) >= min_answers_per_student
        }
        if new_questions == questions and new_students == students:
            break
        questions, students = new_questions, new_students

    if not students or not questions:
        raise DataError(
            f"no data left after filtering ({n_dedup} deduplicated answers, "
            f"thresholds {min_answers_per_question}/{min_answers_per_student})"
        )

    student_ids = sorted(students)
    question_ids = sorted(questions)
    q_index = {q: j for j, q in enumerate(question_ids)}
    per_student: dict[str, list[tuple[int, int]]] = {s: [] for s in student_ids}
    for (sid, qid), val in cells.items():
        if sid in per_student and qid in q_index:
            per_student[sid].append((q_index[qid], val))
    rows = []
    for sid in student_ids:
        pairs = sorted(per_student[sid])
        rows.append((np.array([q for q, _ in pairs], dtype=np.int64),
                     np.array([v for _, v in pairs], dtype=np.float64)))
    return SparseAnswerMatrix(student_ids, question_ids, rows)


def split_students(matrix: SparseAnswerMatrix, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> StudentSplit:
    """Seeded shuffle-and-partition of student indices."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    n = matrix.n_students
    sizes = _largest_remainder(n, ratios)
    if any(s == 0 for s in sizes):
        raise DataError(f"split of {n} students with ratios {ratios} leaves an empty set")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return StudentSplit(
        train=np.sort(perm[:a]),
        validation=np.sort(perm[a:b]),
        test=np.sort(perm[b:]),
    )


def _largest_remainder(n: int, ratios) -> list[int]:
    raw = [r * n for r in ratios]
    sizes = [int(math.floor(x)) for x in raw]
    rest = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: raw[i] - sizes[i], reverse=True)
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def hold_out_targets(row_pairs, fraction: float, seed: int = 0):
    """Partition one student's observed pairs into (conditioning, targets).

    The target set has size max(1, round(fraction * len(row))), so a
    single-answer row yields an empty conditioning set.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
    pairs = list(row_pairs)
    n = len(pairs)
    if n == 0:
        raise DataError("cannot hold out targets from an empty row")
    n_targets = min(n, max(1, int(math.floor(fraction * n + 0.5))))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=n_targets, replace=False).tolist())
    targets = [pairs[i] for i in range(n) if i in chosen]
    conditioning = [pairs[i] for i in range(n) if i not in chosen]
    return conditioning, targets


def save_matrix(matrix: SparseAnswerMatrix, path) -> None:
    """Write one line per student: ``student_id<TAB>qid:value,qid:value,...``"""
    for sid in matrix.student_ids:
        if "\t" in sid or "\n" in sid:
            raise DataError(f"student id {sid!r} cannot be serialized")
    for qid in matrix.question_ids:
        if any(c in qid for c in ":,\t\n"):
            raise DataError(f"question id {qid!r} cannot be serialized")
    with open(path, "w", encoding="utf-8") as fh:
        for i, sid in enumerate(matrix.student_ids):
            qidx, vals = matrix.row(i)
            cells = ",".join(
                f"{matrix.question_ids[q]}:{int(v)}" for q, v in zip(qidx, vals)
            )
            fh.write(f"{sid}\t{cells}\n")


def load_matrix(path) -> SparseAnswerMatrix:
    per_student: dict[str, dict[str, int]] = {}
    questions: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                sid, cells = line.split("\t", 1)
            except ValueError:
                raise DataError(f"{path}:{lineno}: expected a tab separator") from None
            if sid in per_student:
                raise DataError(f"{path}:{lineno}: duplicate student id {sid!r}")
            row: dict[str, int] = {}
            if cells:
                for cell in cells.split(","):
                    qid, _, raw = cell.partition(":")
                    if not qid or raw not in ("0", "1"):
                        raise DataError(f"{path}:{lineno}: malformed cell {cell!r}")
                    if qid in row:
                        raise DataError(f"{path}:{lineno}: duplicate question {qid!r}")
                    row[qid] = int(raw)
                    questions.add(qid)
            per_student[sid] = row
    if not per_student or not questions:
        raise DataError(f"{path}: no data")
    student_ids = sorted(per_student)
    question_ids = sorted(questions)
    q_index = {q: j for j, q in enumerate(question_ids)}
    rows = []
    for sid in student_ids:
        pairs = sorted((q_index[q], v) for q, v in per_student[sid].items())
        rows.append((np.array([q for q, _ in pairs], dtype=np.int64),
                     np.array([v for _, v in pairs], dtype=np.float64)))
    return SparseAnswerMatrix(student_ids, question_ids, rows)


def load_question_meta(path) -> dict[str, list[str]]:
    """Read ``question_id,topics`` rows with ``|``-separated topic labels."""
    meta: dict[str, list[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        for col in ("question_id", "topics"):
            if col not in fields:
                raise DataError(f"missing required column {col!r} in {path}")
        for lineno, row in enumerate(reader, start=2):
            qid = (row.get("question_id") or "").strip()
            topics = [t.strip() for t in (row.get("topics") or "").split("|") if t.strip()]
            if not qid:
                continue
            if not topics:
                log.warning("question %s at line %d has no topics; excluded", qid, lineno)
                continue
            meta[qid] = topics
    return meta
