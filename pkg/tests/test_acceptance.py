"""Acceptance suite: exact correctness properties plus qualitative-ordering
replication on synthetic 2PL ground truth at desk scale (2000 students,
300 questions, observation density 0.2, seeds 0/1/2).

Each criterion prints one PASS/FAIL line; run with ``pytest -s`` to see
them. Criteria that train models share one fitted model per seed.
"""

import math
import time

import numpy as np
import pytest

from conftest import TINY_DIMS, make_synthetic
from edumine.analytics import (
    baseline_difficulty,
    difficulty_report,
    quality_report,
    question_quality,
    spearman,
)
from edumine.baselines import (
    RaschModel,
    majority_predictor,
    random_predictor,
    rasch_predictor,
)
from edumine.data import hold_out_targets, load_matrix, save_matrix, split_students
from edumine.gaussian import DiagGaussian, gaussian_kl
from edumine.optim import AdamState, adam_update
from edumine.pvae import (
    PartialVAE,
    evaluate_imputation,
    load_checkpoint,
    pvae_predictor,
    save_checkpoint,
)
from edumine.selection import (
    StrategyConfig,
    evaluate_strategies,
    information_reward,
    matrix_oracle,
    run_session,
)
from edumine.synthgen import (
    ObservationModel,
    full_answer_matrix,
    generate_ground_truth,
    sample_answers,
)

N_STUDENTS = 2000
N_QUESTIONS = 300
DENSITY = 0.2
BANDWIDTH = 0.5
SEEDS = (0, 1, 2)

# Desk-scale training budget. The production defaults (50 epochs, batch
# 128, 1 ELBO sample) mirror a regime with orders of magnitude more data;
# at 2000x300 they leave the posterior calibration noticeably short of
# converged, so the acceptance runs take more optimizer steps with a
# lower-variance ELBO estimate. Learning rate and architecture stay at
# the defaults.
TRAIN = dict(epochs=300, elbo_samples=5, batch_size=64)

train_seconds: dict = {}


def _desk(seed, mode):
    truth = generate_ground_truth(N_STUDENTS, N_QUESTIONS, seed=seed)
    matrix, _ = sample_answers(truth, ObservationModel(mode, DENSITY, BANDWIDTH), seed=seed)
    split = split_students(matrix, (0.8, 0.1, 0.1), seed=seed)
    t0 = time.monotonic()
    model = PartialVAE(seed=seed, **TRAIN)
    model.fit(matrix.subset_students(split.train))
    train_seconds[(mode, seed)] = time.monotonic() - t0
    return truth, matrix, split, model


@pytest.fixture(scope="module")
def desk_mcar():
    return {seed: _desk(seed, "mcar") for seed in SEEDS}


@pytest.fixture(scope="module")
def desk_biased():
    return {seed: _desk(seed, "biased") for seed in SEEDS}


def _report(n, ok, detail):
    print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} - {detail}")


# ---------------------------------------------------------------------------


def test_criterion_1_correctness_suite():
    t0 = time.monotonic()
    failures = []

    # Gradient check on a 5x8 toy: every parameter element against
    # central finite differences.
    _, toy = make_synthetic(n=5, m=8, density=0.7, seed=3)
    toy_model = PartialVAE(latent_dim=3, embed_dim=3, feature_dim=4, hidden_dim=5,
                           epochs=2, batch_size=5, seed=1).fit(toy)
    sets = [toy.row(i) for i in range(5)]
    noise = np.random.default_rng(7).standard_normal((5, 3))
    _, grads = toy_model.elbo_gradients(sets, noise)
    worst = 0.0
    step = 1e-5
    for p in toy_model.params_.parameters():
        flat = p.value.reshape(-1)
        gflat = grads[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = toy_model.elbo_gradients(sets, noise)
            flat[i] = orig - step
            down, _ = toy_model.elbo_gradients(sets, noise)
            flat[i] = orig
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-8))
    if worst >= 1e-4:
        failures.append(f"gradient check rel err {worst:.2e}")

    # Encoder permutation invariance (canonical sorting makes it exact).
    _, mat = make_synthetic(n=40, m=20, density=0.6, seed=2)
    enc_model = PartialVAE(epochs=3, batch_size=20, seed=0, **TINY_DIMS).fit(mat)
    pairs = mat.pairs(0)
    rng = np.random.default_rng(0)
    base = enc_model.encode(pairs)
    for _ in range(10):
        g = enc_model.encode([pairs[i] for i in rng.permutation(len(pairs))])
        if np.max(np.abs(g.mean - base.mean)) > 1e-9 or np.max(np.abs(g.std - base.std)) > 1e-9:
            failures.append("encoder permutation invariance")
            break

    # Closed-form KL vs Monte Carlo with 1e5 samples.
    for trial in range(3):
        trng = np.random.default_rng(100 + trial)
        q = DiagGaussian(trng.normal(size=3), trng.uniform(0.3, 2.0, size=3))
        p = DiagGaussian(trng.normal(size=3), trng.uniform(0.3, 2.0, size=3))
        z = q.mean + q.std * trng.standard_normal((100_000, 3))

        def logpdf(g):
            return np.sum(-0.5 * ((z - g.mean) / g.std) ** 2 - np.log(g.std)
                          - 0.5 * math.log(2 * math.pi), axis=1)

        diffs = logpdf(q) - logpdf(p)
        se = diffs.std(ddof=1) / math.sqrt(diffs.size)
        if abs(gaussian_kl(q, p) - diffs.mean()) > 3 * se:
            failures.append("gaussian_kl Monte Carlo check")

    # Partial ELBO equals the full-row VAE ELBO on fully observed rows.
    m = enc_model.n_questions_
    full_vals = (np.random.default_rng(5).random(m) < 0.5).astype(float)
    full_row = list(zip(range(m), full_vals))
    pnoise = np.random.default_rng(6).standard_normal(enc_model.latent_dim)
    pp = enc_model.params_
    x = full_vals.reshape(-1, 1)
    s = np.concatenate([x, x * pp.q_embed.value, pp.q_bias.value], axis=1)
    h = np.tanh(s @ pp.enc_w1.value.T + pp.enc_b1.value) @ pp.enc_w2.value.T + pp.enc_b2.value
    f = (np.tanh(h.sum(0) @ pp.post_w1.value.T + pp.post_b1.value)
         @ pp.post_w2.value.T + pp.post_b2.value)
    k = enc_model.latent_dim
    mu, sigma = f[:k], np.logaddexp(0.0, f[k:]) + pp.sigma_floor
    z = mu + sigma * pnoise
    logits = (np.tanh(z @ pp.dec_w1.value.T + pp.dec_b1.value)
              @ pp.dec_w2.value.T + pp.dec_b2.value)
    loglik = -np.sum(full_vals * np.logaddexp(0.0, -logits)
                     + (1 - full_vals) * np.logaddexp(0.0, logits))
    kl = 0.5 * np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma))
    if abs(enc_model.elbo(full_row, noise=pnoise) - (loglik - kl)) > 1e-12:
        failures.append("partial ELBO == full ELBO")

    # Nonnegativity of the two information quantities on 100 random states.
    state_rng = np.random.default_rng(11)
    small_matrix = mat
    small_model = enc_model
    for trial in range(100):
        for p in small_model.params_.parameters():
            p.value[...] = state_rng.normal(scale=0.6, size=p.value.shape)
        small_model._cache = {}
        j = int(state_rng.integers(small_matrix.n_questions))
        r = question_quality(small_model, small_matrix, j, n_samples=5,
                             seed=int(state_rng.integers(1 << 30)))
        cond = [] if trial % 2 else [((j + 1) % small_matrix.n_questions, 1)]
        ir = information_reward(small_model, cond, j, n_samples=5,
                                seed=int(state_rng.integers(1 << 30)))
        if r < 0.0 or ir < 0.0:
            failures.append("nonnegativity of quality/reward")
            break

    # Determinism and round trips.
    value_a = np.ones(3)
    value_b = np.ones(3)
    st_a = AdamState(np.zeros(3), np.zeros(3))
    st_b = AdamState(np.zeros(3), np.zeros(3))
    g = np.array([0.3, -0.7, 0.001])
    for _ in range(10):
        adam_update(value_a, g, st_a)
        adam_update(value_b, g, st_b)
    if not np.array_equal(value_a, value_b):
        failures.append("adam bit reproducibility")

    twins = [PartialVAE(epochs=2, batch_size=16, seed=4, **TINY_DIMS).fit(mat) for _ in range(2)]
    for pa, pb in zip(twins[0].params_.parameters(), twins[1].params_.parameters()):
        if not np.array_equal(pa.value, pb.value):
            failures.append("training determinism")
            break

    import tempfile, os
    with tempfile.TemporaryDirectory() as tmp:
        ck = os.path.join(tmp, "m.npz")
        save_checkpoint(enc_model, ck)
        loaded = load_checkpoint(ck)
        for pa, pb in zip(enc_model.params_.parameters(), loaded.params_.parameters()):
            if not np.array_equal(pa.value, pb.value):
                failures.append("checkpoint round trip")
                break
        mpath = os.path.join(tmp, "m.tsv")
        save_matrix(mat, mpath)
        if load_matrix(mpath) != mat:
            failures.append("matrix serialization round trip")

    truth_small, mat_small = make_synthetic(n=40, m=20, density=0.6, seed=2)
    full_small = full_answer_matrix(truth_small, seed=2)
    _, targets = hold_out_targets(mat_small.pairs(0), 0.2, seed=0)
    cfg = StrategyConfig(steps=4, reward_samples=6, impute_samples=6, seed=8)
    s1 = run_session(enc_model, matrix_oracle(full_small, 0), targets, cfg)
    s2 = run_session(enc_model, matrix_oracle(full_small, 0), targets, cfg)
    if s1.chosen != s2.chosen or s1.step_mae != s2.step_mae:
        failures.append("session reproducibility")

    elapsed = time.monotonic() - t0
    if elapsed >= 60.0:
        failures.append(f"runtime {elapsed:.0f}s >= 60s")
    _report(1, not failures, f"runtime {elapsed:.1f}s"
            + (f"; failures: {failures}" if failures else ""))
    assert not failures, failures


def test_criterion_2_imputation_ordering(desk_mcar):
    t0 = time.monotonic()
    rows = {name: [] for name in ("pvae", "irt", "random", "majority")}
    for seed in SEEDS:
        truth, matrix, split, model = desk_mcar[seed]
        irt = RaschModel(seed=seed).fit(matrix, students=split.train)
        preds = {
            "pvae": pvae_predictor(model),
            "irt": rasch_predictor(irt),
            "random": random_predictor(),
            "majority": majority_predictor(matrix),
        }
        for name, pred in preds.items():
            rows[name].append(evaluate_imputation(matrix, split.test, 0.5, pred, seed=seed))
    acc = {n: np.mean([r.accuracy for r in rs]) for n, rs in rows.items()}
    mae = {n: np.mean([r.mae for r in rs]) for n, rs in rows.items()}
    elapsed = time.monotonic() - t0 + sum(train_seconds.get(("mcar", s), 0.0) for s in SEEDS)

    checks = {
        "pvae_acc >= irt_acc - 0.01": acc["pvae"] >= acc["irt"] - 0.01,
        "pvae_mae <= random_mae - 0.10": mae["pvae"] <= mae["random"] - 0.10,
        "pvae_acc >= majority_acc + 0.03": acc["pvae"] >= acc["majority"] + 0.03,
        "runtime < 600s": elapsed < 600.0,
    }
    detail = (f"acc pvae={acc['pvae']:.4f} irt={acc['irt']:.4f} majority={acc['majority']:.4f}; "
              f"mae pvae={mae['pvae']:.4f} random={mae['random']:.4f}; runtime {elapsed:.0f}s")
    _report(2, all(checks.values()), detail)
    assert all(checks.values()), {k: v for k, v in checks.items() if not v}


def test_criterion_3_difficulty_ordering(desk_biased):
    per_seed = []
    for seed in SEEDS:
        truth, matrix, split, model = desk_biased[seed]
        b = truth.difficulties
        rho = {
            "pvae": spearman(difficulty_report(model, matrix, seed=seed).difficulty, b),
            "observed": spearman(baseline_difficulty(matrix, "observed").difficulty, b),
            "majority": spearman(baseline_difficulty(matrix, "majority").difficulty, b),
            "random": spearman(baseline_difficulty(matrix, "random", seed=seed).difficulty, b),
        }
        per_seed.append(rho)

    def hold(cond):
        return sum(1 for rho in per_seed if cond(rho)) >= 2

    checks = {
        "pvae >= 0.85": hold(lambda r: r["pvae"] >= 0.85),
        "pvae > observed": hold(lambda r: r["pvae"] > r["observed"]),
        "observed > majority": hold(lambda r: r["observed"] > r["majority"]),
        "|random| <= 0.15": hold(lambda r: abs(r["random"]) <= 0.15),
    }
    detail = "; ".join(
        f"seed{seed} pvae={rho['pvae']:.3f} obs={rho['observed']:.3f} "
        f"maj={rho['majority']:.3f} rand={rho['random']:.3f}"
        for seed, rho in zip(SEEDS, per_seed)
    )
    _report(3, all(checks.values()), detail)
    assert all(checks.values()), {k: v for k, v in checks.items() if not v}


def test_criterion_4_quality_ordering(desk_mcar):
    per_seed = []
    for seed in SEEDS:
        truth, matrix, split, model = desk_mcar[seed]
        report = quality_report(model, matrix, max_samples=500, seed=seed)
        ok = ~np.isnan(report.scores)
        a = truth.discriminations[ok]
        rng = np.random.default_rng(seed)
        per_seed.append({
            "ours": spearman(report.scores[ok], a),
            "entropy": spearman(report.entropies[ok], a),
            "random": spearman(rng.permutation(int(ok.sum())).astype(float), a),
        })

    def hold(cond):
        return sum(1 for rho in per_seed if cond(rho)) >= 2

    checks = {
        "ours >= 0.5": hold(lambda r: r["ours"] >= 0.5),
        "ours > entropy": hold(lambda r: r["ours"] > r["entropy"]),
        "entropy > random": hold(lambda r: r["entropy"] > r["random"]),
    }
    detail = "; ".join(
        f"seed{seed} ours={rho['ours']:.3f} entropy={rho['entropy']:.3f} random={rho['random']:.3f}"
        for seed, rho in zip(SEEDS, per_seed)
    )
    _report(4, all(checks.values()), detail)
    assert all(checks.values()), {k: v for k, v in checks.items() if not v}


def test_criterion_5_strategy_comparison(desk_mcar):
    t0 = time.monotonic()
    truth, matrix, split, model = desk_mcar[0]
    full = full_answer_matrix(truth, seed=0)
    cfg = StrategyConfig(steps=10, reward_samples=30, impute_samples=50, seed=0)
    result = evaluate_strategies(
        model, matrix, split.test, cfg,
        runs=10, target_fraction=0.1, strategies=("ours", "rand", "sing"),
        full_answers=full, population=100,
    )
    ours = result.mean_mae["ours"]
    rand = result.mean_mae["rand"]
    sing = result.mean_mae["sing"]
    elapsed = time.monotonic() - t0

    beats_rand = [bool(ours[k] <= rand[k]) for k in range(1, 10)]
    non_increasing = [bool(ours[k + 1] <= ours[k] + 0.01) for k in range(9)]
    checks = {
        "ours <= rand at steps 2..10": all(beats_rand),
        "ours <= sing at step 10": bool(ours[9] <= sing[9]),
        "ours non-increasing (tol 0.01)": all(non_increasing),
        "runtime < 900s": elapsed < 900.0,
    }
    detail = (f"final mae ours={ours[9]:.4f} rand={rand[9]:.4f} sing={sing[9]:.4f}; "
              f"n={result.n_sessions} sessions/strategy; runtime {elapsed:.0f}s")
    _report(5, all(checks.values()), detail)
    assert all(checks.values()), {k: v for k, v in checks.items() if not v}


def test_criterion_6_personalization(desk_mcar):
    truth, matrix, split, model = desk_mcar[0]
    full = full_answer_matrix(truth, seed=0)
    order = sorted(split.test.tolist(), key=lambda i: truth.abilities[i])
    picks = [order[int(round(k * (len(order) - 1) / 9))] for k in range(10)]
    assert len({truth.abilities[i] for i in picks}) == 10

    sequences = []
    session_seeds = np.random.SeedSequence(0).generate_state(2 * len(picks))
    for rank, student in enumerate(picks):
        _, targets = hold_out_targets(
            matrix.pairs(student), 0.1, seed=int(session_seeds[2 * rank])
        )
        cfg = StrategyConfig(steps=10, reward_samples=30, impute_samples=50,
                             seed=int(session_seeds[2 * rank + 1]))
        session = run_session(model, matrix_oracle(full, student), targets, cfg, student=student)
        sequences.append(session.chosen)

    all_identical = all(seq == sequences[0] for seq in sequences)
    early = {q for seq in sequences for q in seq[:2]}
    checks = {
        "sequences not all identical": not all_identical,
        ">= 5 distinct questions at steps 1-2": len(early) >= 5,
    }
    detail = f"distinct early questions: {len(early)}; identical: {all_identical}"
    _report(6, all(checks.values()), detail)
    assert all(checks.values()), {k: v for k, v in checks.items() if not v}
