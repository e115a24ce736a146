"""Command-line pipeline: synthesize data, train, evaluate, and report.

Every command accepts --seed, --threads, and --config. The config file
holds ``key = value`` lines (# comments allowed) that fill in defaults;
explicit flags always win. Commands exit 0 on success, 2 on usage or
validation errors, and 1 on runtime failures. Reports are plain TSV and
byte-identical across reruns with the same inputs and seed.
"""

from __future__ import annotations

import functools
import logging
import os
import sys

import click
import numpy as np

from . import analytics, baselines, data, selection, synthgen
from .errors import EdumineError
from .pvae import PartialVAE, evaluate_imputation, load_checkpoint, pvae_predictor, save_checkpoint

log = logging.getLogger("edumine")


def _parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise click.UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(ctx: click.Context, config_path: str | None, values: dict) -> dict:
    """Fill defaults from the config file; flags keep precedence."""
    if not config_path:
        return values
    cfg = _parse_config_file(config_path)
    for param in ctx.command.params:
        if (
            param.name in cfg
            and param.name in values
            and ctx.get_parameter_source(param.name) == click.core.ParameterSource.DEFAULT
        ):
            values[param.name] = param.type.convert(cfg[param.name], param, ctx)
    return values


def common_options(f):
    f = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     default=None, help="key=value defaults file; flags override.")(f)
    f = click.option("--threads", type=int, default=None,
                     help="Worker cap (default: available cores).")(f)
    f = click.option("--seed", type=int, default=0, show_default=True,
                     help="Base seed for all randomness.")(f)
    return f


def command_body(f):
    """Merge config defaults and convert runtime failures to exit code 1."""

    @functools.wraps(f)
    @click.pass_context
    def wrapper(ctx, *args, **kwargs):
        kwargs = _apply_config(ctx, kwargs.pop("config_path", None), kwargs)
        try:
            return f(*args, **kwargs)
        except EdumineError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
def main():
    """Probabilistic question analytics for sparse student-answer data."""
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")


def _check_range(name, value, lo, hi, lo_open=False, hi_open=False):
    bad = value < lo or value > hi or (lo_open and value == lo) or (hi_open and value == hi)
    if bad:
        lo_b = "(" if lo_open else "["
        hi_b = ")" if hi_open else "]"
        raise click.UsageError(f"--{name} must be in {lo_b}{lo}, {hi}{hi_b}, got {value}")


def _write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")


def _fmt(x) -> str:
    if x is None:
        return "undefined"
    return f"{x:.6f}"


# ---------------------------------------------------------------------------


@main.command()
@click.option("--students", type=int, default=2000, show_default=True)
@click.option("--questions", type=int, default=300, show_default=True)
@click.option("--density", type=float, default=0.2, show_default=True)
@click.option("--mode", type=click.Choice(["mcar", "biased"]), default="mcar", show_default=True)
@click.option("--bandwidth", type=float, default=0.5, show_default=True,
              help="Ability-match bandwidth for biased observation.")
@click.option("--discrimination-scale", type=float, default=0.25, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=".", show_default=True)
@click.option("--full/--no-full", "write_full", default=True, show_default=True,
              help="Also write the fully generated answer matrix.")
@common_options
@command_body
def synth(students, questions, density, mode, bandwidth, discrimination_scale,
          out_dir, write_full, seed, threads):
    """Generate a synthetic dataset with known ability/difficulty truth."""
    if students < 2 or questions < 2:
        raise click.UsageError("--students and --questions must be >= 2")
    _check_range("density", density, 0.0, 1.0, lo_open=True)
    if bandwidth <= 0:
        raise click.UsageError("--bandwidth must be positive")
    if discrimination_scale < 0:
        raise click.UsageError("--discrimination-scale must be nonnegative")
    os.makedirs(out_dir, exist_ok=True)
    truth = synthgen.generate_ground_truth(students, questions, seed, discrimination_scale)
    obs = synthgen.ObservationModel(mode=mode, density=density, bandwidth=bandwidth)
    matrix, _ = synthgen.sample_answers(truth, obs, seed)

    answers_path = os.path.join(out_dir, "answers.csv")
    with open(answers_path, "w", encoding="utf-8") as fh:
        fh.write("student_id,question_id,is_correct\n")
        for i, sid in enumerate(matrix.student_ids):
            qidx, vals = matrix.row(i)
            for q, v in zip(qidx, vals):
                fh.write(f"{sid},{matrix.question_ids[q]},{int(v)}\n")
    synthgen.save_ground_truth(
        truth,
        os.path.join(out_dir, "truth_questions.tsv"),
        os.path.join(out_dir, "truth_students.tsv"),
        question_ids=list(matrix.question_ids),
        student_ids=list(matrix.student_ids),
    )
    if write_full:
        full = synthgen.full_answer_matrix(truth, seed)
        full_matrix = data.SparseAnswerMatrix(
            matrix.student_ids, matrix.question_ids,
            [(np.arange(questions), full[i].astype(np.float64)) for i in range(students)],
        )
        data.save_matrix(full_matrix, os.path.join(out_dir, "full_answers.tsv"))
    log.info("wrote %d observed answers to %s", matrix.n_observed, answers_path)


def _load_inputs(input_path, min_q, min_s):
    records = data.ingest_csv(input_path)
    return data.preprocess(records, min_q, min_s)


@main.command()
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "model_path", type=click.Path(dir_okay=False), default="model.npz", show_default=True)
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default="trace.tsv",
              show_default=True, help="Per-epoch ELBO trace TSV.")
@click.option("--min-question-answers", type=int, default=50, show_default=True)
@click.option("--min-student-answers", type=int, default=50, show_default=True)
@click.option("--ratios", type=str, default="0.8,0.1,0.1", show_default=True)
@click.option("--epochs", type=int, default=50, show_default=True)
@click.option("--learning-rate", type=float, default=0.001, show_default=True)
@click.option("--batch-size", type=int, default=128, show_default=True)
@click.option("--latent-dim", type=int, default=20, show_default=True)
@click.option("--embed-dim", type=int, default=16, show_default=True)
@click.option("--feature-dim", type=int, default=32, show_default=True)
@click.option("--hidden-dim", type=int, default=64, show_default=True)
@click.option("--elbo-samples", type=int, default=1, show_default=True)
@click.option("--dropout-lo", type=float, default=0.0, show_default=True)
@click.option("--dropout-hi", type=float, default=0.99, show_default=True)
@common_options
@command_body
def train(input_path, model_path, trace_path, min_question_answers, min_student_answers,
          ratios, epochs, learning_rate, batch_size, latent_dim, embed_dim, feature_dim,
          hidden_dim, elbo_samples, dropout_lo, dropout_hi, seed, threads):
    """Train the partial VAE on an answers CSV and save a checkpoint."""
    if epochs < 1:
        raise click.UsageError("--epochs must be >= 1")
    try:
        ratio_values = tuple(float(r) for r in ratios.split(","))
    except ValueError:
        raise click.UsageError(f"--ratios must be three comma-separated numbers, got {ratios!r}")
    matrix = _load_inputs(input_path, min_question_answers, min_student_answers)
    split = data.split_students(matrix, ratio_values, seed)
    model = PartialVAE(
        latent_dim=latent_dim, embed_dim=embed_dim, feature_dim=feature_dim,
        hidden_dim=hidden_dim, epochs=epochs, learning_rate=learning_rate,
        batch_size=batch_size, dropout_range=(dropout_lo, dropout_hi),
        elbo_samples=elbo_samples, seed=seed,
    )
    model.fit(
        matrix.subset_students(split.train),
        validation=matrix.subset_students(split.validation),
    )
    model.meta_ = {
        "split_seed": seed,
        "ratios": list(ratio_values),
        "min_question_answers": min_question_answers,
        "min_student_answers": min_student_answers,
    }
    save_checkpoint(model, model_path)
    if trace_path:
        _write_tsv(
            trace_path,
            ["epoch", "train_elbo", "val_elbo"],
            (
                [str(h["epoch"]), _fmt(h["train_elbo"]), _fmt(h.get("val_elbo"))]
                for h in model.history_
            ),
        )
    log.info("saved checkpoint to %s", model_path)


def _restore(model_path, input_path):
    model = load_checkpoint(model_path)
    meta = getattr(model, "meta_", {}) or {}
    matrix = _load_inputs(
        input_path,
        int(meta.get("min_question_answers", 50)),
        int(meta.get("min_student_answers", 50)),
    )
    if matrix.question_ids != model.question_ids_:
        raise click.UsageError(
            "--input does not match the checkpoint's question set; "
            "pass the same answers file used for training"
        )
    split = data.split_students(
        matrix, tuple(meta.get("ratios", (0.8, 0.1, 0.1))), int(meta.get("split_seed", 0))
    )
    return model, matrix, split


@main.command("eval")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--methods", type=str, default="pvae,irt,random,majority", show_default=True)
@click.option("--conditioning-fraction", type=float, default=0.5, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="eval.tsv", show_default=True)
@click.option("--irt-epochs", type=int, default=300, show_default=True)
@click.option("--irt-learning-rate", type=float, default=0.1, show_default=True)
@click.option("--irt-l2", type=float, default=1e-4, show_default=True)
@common_options
@command_body
def eval_cmd(model_path, input_path, methods, conditioning_fraction, out_path,
             irt_epochs, irt_learning_rate, irt_l2, seed, threads):
    """Score imputation accuracy and MAE on held-out test students."""
    _check_range("conditioning-fraction", conditioning_fraction, 0.0, 1.0, True, True)
    method_list = [m.strip() for m in methods.split(",") if m.strip()]
    known = {"pvae", "irt", "random", "majority"}
    for m in method_list:
        if m not in known:
            raise click.UsageError(f"unknown method {m!r}; pick from {sorted(known)}")
    model, matrix, split = _restore(model_path, input_path)
    predictors = {}
    for m in method_list:
        if m == "pvae":
            predictors[m] = pvae_predictor(model)
        elif m == "irt":
            irt = baselines.RaschModel(
                epochs=irt_epochs, learning_rate=irt_learning_rate, l2=irt_l2, seed=seed
            ).fit(matrix, students=split.train)
            predictors[m] = baselines.rasch_predictor(irt)
        elif m == "random":
            predictors[m] = baselines.random_predictor()
        else:
            predictors[m] = baselines.majority_predictor(matrix)
    rows = []
    for m in method_list:
        result = evaluate_imputation(
            matrix, split.test, conditioning_fraction, predictors[m], seed=seed
        )
        rows.append([m, _fmt(result.accuracy), _fmt(result.mae),
                     str(result.n_targets), str(result.n_skipped)])
        log.info("%s: accuracy %.4f, mae %.4f", m, result.accuracy, result.mae)
    _write_tsv(out_path, ["method", "accuracy", "mae", "n_targets", "n_skipped"], rows)


def _truth_vector(truth_path, question_ids, index):
    truth = synthgen.load_question_truth(truth_path)
    missing = [qid for qid in question_ids if qid not in truth]
    if missing:
        raise click.UsageError(f"--truth is missing {len(missing)} question ids (e.g. {missing[0]})")
    return np.array([truth[qid][index] for qid in question_ids])


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="difficulty.tsv", show_default=True)
@click.option("--schemes", type=str, default="pvae,observed,majority,random", show_default=True)
@click.option("--samples", type=int, default=50, show_default=True,
              help="Posterior samples per imputation.")
@click.option("--truth", "truth_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="truth_questions.tsv for Spearman-vs-truth rows.")
@click.option("--spearman-out", type=click.Path(dir_okay=False), default=None)
@click.option("--meta", "meta_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="question_id,topics CSV for the topic ranking.")
@click.option("--topics-out", type=click.Path(dir_okay=False), default=None)
@common_options
@command_body
def difficulty(model_path, input_path, out_path, schemes, samples, truth_path,
               spearman_out, meta_path, topics_out, seed, threads):
    """Rank question difficulty from the model-completed matrix."""
    scheme_list = [s.strip() for s in schemes.split(",") if s.strip()]
    known = {"pvae", "observed", "majority", "random"}
    for s in scheme_list:
        if s not in known:
            raise click.UsageError(f"unknown scheme {s!r}; pick from {sorted(known)}")
    model, matrix, _ = _restore(model_path, input_path)
    reports = {}
    for s in scheme_list:
        if s == "pvae":
            reports[s] = analytics.difficulty_report(model, matrix, n_samples=samples, seed=seed)
        else:
            reports[s] = analytics.baseline_difficulty(matrix, s, seed=seed)
    if "pvae" in reports:
        main_report = reports["pvae"]
        _write_tsv(
            out_path,
            ["question_id", "easiness", "difficulty", "n_observed", "n_imputed"],
            (
                [qid, _fmt(e), _fmt(d), str(int(o)), str(int(im))]
                for qid, e, d, o, im in zip(
                    main_report.question_ids, main_report.easiness,
                    main_report.difficulty, main_report.n_observed, main_report.n_imputed,
                )
            ),
        )
    if truth_path:
        b_true = _truth_vector(truth_path, matrix.question_ids, 1)
        rows = []
        for s in scheme_list:
            rho = analytics.spearman(reports[s].difficulty, b_true)
            rows.append([s, _fmt(rho)])
            log.info("difficulty spearman vs truth (%s): %s", s, _fmt(rho))
        if spearman_out:
            _write_tsv(spearman_out, ["scheme", "spearman"], rows)
    if meta_path:
        if "pvae" not in reports:
            raise click.UsageError("topic ranking needs the pvae scheme")
        meta = data.load_question_meta(meta_path)
        ranked = analytics.topic_ranking(reports["pvae"], meta)
        if topics_out:
            _write_tsv(
                topics_out,
                ["rank", "topic", "mean_difficulty"],
                ([str(i + 1), topic, _fmt(score)] for i, (topic, score, _) in enumerate(ranked)),
            )


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="quality.tsv", show_default=True)
@click.option("--samples", type=int, default=500, show_default=True,
              help="Answer samples per question for the information score.")
@click.option("--truth", "truth_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--spearman-out", type=click.Path(dir_okay=False), default=None)
@common_options
@command_body
def quality(model_path, input_path, out_path, samples, truth_path, spearman_out, seed, threads):
    """Score question quality by posterior information content."""
    if samples < 1:
        raise click.UsageError("--samples must be >= 1")
    model, matrix, _ = _restore(model_path, input_path)
    report = analytics.quality_report(model, matrix, max_samples=samples, seed=seed)
    _write_tsv(
        out_path,
        ["question_id", "quality", "entropy", "n_samples"],
        (
            [qid, _fmt(s), _fmt(e), str(int(c))]
            for qid, s, e, c in zip(
                report.question_ids, report.scores, report.entropies, report.sample_counts
            )
        ),
    )
    if truth_path:
        a_true = _truth_vector(truth_path, matrix.question_ids, 0)
        ok = ~np.isnan(report.scores)
        random_scores = np.random.default_rng(seed).permutation(int(ok.sum())).astype(float)
        rows = [
            ["ours", _fmt(analytics.spearman(report.scores[ok], a_true[ok]))],
            ["entropy", _fmt(analytics.spearman(report.entropies[ok], a_true[ok]))],
            ["random", _fmt(analytics.spearman(random_scores, a_true[ok]))],
        ]
        for name, value in rows:
            log.info("quality spearman vs truth (%s): %s", name, value)
        if spearman_out:
            _write_tsv(spearman_out, ["method", "spearman"], rows)


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--strategies", type=str, default="ours,rand,sing", show_default=True)
@click.option("--runs", type=int, default=10, show_default=True)
@click.option("--steps", type=int, default=10, show_default=True)
@click.option("--students", "students_per_run", type=int, default=100, show_default=True)
@click.option("--target-fraction", type=float, default=0.1, show_default=True)
@click.option("--reward-samples", type=int, default=30, show_default=True)
@click.option("--impute-samples", type=int, default=50, show_default=True)
@click.option("--full-answers", "full_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Fully generated answer matrix; otherwise answers replay from --input.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default="strategies.tsv", show_default=True)
@click.option("--session-log", "session_path", type=click.Path(dir_okay=False), default=None,
              help="Write the first personalized session's log here.")
@common_options
@command_body
def select(model_path, input_path, strategies, runs, steps, students_per_run, target_fraction,
           reward_samples, impute_samples, full_path, out_path, session_path, seed, threads):
    """Compare sequential question-selection strategies on test students."""
    _check_range("target-fraction", target_fraction, 0.0, 1.0, True, True)
    if runs < 1 or steps < 1 or students_per_run < 1:
        raise click.UsageError("--runs, --steps, and --students must be >= 1")
    strategy_list = [s.strip() for s in strategies.split(",") if s.strip()]
    known = {"ours", "rand", "sing"}
    for s in strategy_list:
        if s not in known:
            raise click.UsageError(f"unknown strategy {s!r}; pick from {sorted(known)}")
    model, matrix, split = _restore(model_path, input_path)
    full = None
    if full_path:
        full_matrix = data.load_matrix(full_path)
        dense = full_matrix.to_dense()
        try:
            srows = [full_matrix.student_index(sid) for sid in matrix.student_ids]
            qcols = [full_matrix.question_index(qid) for qid in matrix.question_ids]
        except KeyError as exc:
            raise click.UsageError(f"--full-answers is missing id {exc}")
        block = dense[np.ix_(srows, qcols)]
        if np.any(np.isnan(block)):
            raise click.UsageError("--full-answers must cover every (student, question) cell")
        full = block.astype(np.int64)
    config = selection.StrategyConfig(
        steps=steps, reward_samples=reward_samples, impute_samples=impute_samples, seed=seed
    )
    result = selection.evaluate_strategies(
        model, matrix, split.test, config,
        runs=runs, target_fraction=target_fraction, strategies=tuple(strategy_list),
        full_answers=full, population=students_per_run,
        threads=threads or os.cpu_count() or 1,
        keep_sessions=bool(session_path),
    )
    rows = []
    for name in strategy_list:
        for k in range(steps):
            rows.append([name, str(k + 1), _fmt(result.mean_mae[name][k]),
                         _fmt(result.stderr_mae[name][k])])
        log.info("%s final-step mae: %.4f", name, result.mean_mae[name][-1])
    _write_tsv(out_path, ["strategy", "step", "mean_mae", "stderr"], rows)
    if session_path and result.sessions:
        first = result.sessions[strategy_list[0]][0]
        _write_tsv(
            session_path,
            ["step", "question_id", "revealed_value", "reward", "target_mae"],
            (
                [str(k + 1), matrix.question_ids[q], str(v), _fmt(r), _fmt(m)]
                for k, (q, (qq, v), r, m) in enumerate(
                    zip(first.chosen, first.conditioning, first.rewards, first.step_mae)
                )
            ),
        )


if __name__ == "__main__":
    main()
