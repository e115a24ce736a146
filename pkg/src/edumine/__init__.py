"""Probabilistic question analytics for sparse student-answer matrices.

Trains a partial variational auto-encoder on binary answer data with
arbitrary missingness, imputes unanswered questions probabilistically,
scores question difficulty and quality, and selects question sequences
that are maximally informative about each student.
"""

from .analytics import (
    DifficultyReport,
    QualityReport,
    baseline_difficulty,
    difficulty_report,
    entropy_baseline,
    quality_report,
    question_quality,
    spearman,
    topic_ranking,
)
from .baselines import RaschModel, majority_impute, majority_values, random_impute
from .data import (
    AnswerRecord,
    SparseAnswerMatrix,
    StudentSplit,
    hold_out_targets,
    ingest_csv,
    load_matrix,
    preprocess,
    save_matrix,
    split_students,
)
from .errors import ConfigError, DataError, EdumineError, ShapeError, TrainingError
from .gaussian import DiagGaussian, gaussian_kl, reparam_sample, standard_normal
from .pvae import (
    ImputationResult,
    PartialVAE,
    evaluate_imputation,
    load_checkpoint,
    save_checkpoint,
)
from .selection import (
    SelectionSession,
    StrategyConfig,
    evaluate_strategies,
    information_reward,
    rand_strategy,
    run_session,
    select_next,
    sing_sequences,
)
from .synthgen import (
    IrtGroundTruth,
    ObservationModel,
    answer_probability,
    full_answer_matrix,
    generate_ground_truth,
    sample_answers,
)

__version__ = "0.1.0"
