"""
Tests for synthetic data, recovery metrics and reports.
"""
import io
import itertools
import json
import math

import numpy as np
import pytest

from src.lra_ntd.evaluation import (
    CSV_COLUMNS,
    MSIR_CEILING_DB,
    REPORT_SCHEMA_VERSION,
    ExperimentReport,
    SolverRecord,
    SyntheticSpec,
    component_sirs,
    error_bound_diagnostic,
    fit_index,
    generate,
    kronecker_sparsity_predict,
    kronecker_zero_count,
    match_components,
    median_summary,
    msir,
    realized_snr_db,
    sparsity,
    trial_seed,
)
from src.lra_ntd.lra import TuckerModel, hosvd, reconstruct
from src.lra_ntd.ntd import SolverConfig, solve
from src.lra_ntd.tensor_core import ShapeError, frobenius_norm


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def test_generate_is_exact_and_deterministic():
    spec = SyntheticSpec(extents=(30, 20, 10), ranks=(3, 3, 3), factor_sparsity=0.5, core_sparsity=0.5, snr_db=20.0, seed=4)
    clean, truth, noisy = generate(spec)
    np.testing.assert_array_equal(clean, reconstruct(truth))
    for factor in truth.factors:
        assert sparsity(factor) == math.floor(0.5 * factor.size) / factor.size
        assert np.all(np.any(factor != 0, axis=0))
    assert sparsity(truth.core) == 13 / 27
    assert realized_snr_db(clean, noisy) == pytest.approx(20.0, abs=1e-9)

    again = generate(spec)
    np.testing.assert_array_equal(again[0], clean)
    np.testing.assert_array_equal(again[2], noisy)


def test_generate_without_noise_returns_clean_data():
    clean, truth, noisy = generate(SyntheticSpec(extents=(4, 5), ranks=(2, 2), seed=1))
    np.testing.assert_array_equal(noisy, clean)
    assert clean.min() >= 0 and truth.core.min() > 0
    assert realized_snr_db(clean, noisy) == math.inf


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(extents=(4, 4), ranks=(5, 2))
    with pytest.raises(ValueError):
        SyntheticSpec(extents=(4, 4), ranks=(2, 2), factor_sparsity=1.0)
    with pytest.raises(ValueError):
        SyntheticSpec(extents=(4, 4), ranks=(2, 2), snr_db=math.inf)
    with pytest.raises(ShapeError):
        SyntheticSpec(extents=(4, 4, 4), ranks=(2, 2))
    # one nonzero entry in a 2x2 factor always leaves a zero column
    with pytest.raises(ValueError):
        generate(SyntheticSpec(extents=(2, 2), ranks=(2, 2), factor_sparsity=0.75))


# ---------------------------------------------------------------------------
# Fit and component matching
# ---------------------------------------------------------------------------

def test_fit_index_reference_values():
    y = np.random.default_rng(0).random((3, 4, 5))
    assert fit_index(y, y) == 100.0
    assert fit_index(y, np.zeros_like(y)) == pytest.approx(0.0)
    assert fit_index(y, 2 * y) == pytest.approx(0.0)
    assert fit_index(y, -y) == pytest.approx(-100.0)
    with pytest.raises(ValueError):
        fit_index(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        fit_index(y, y[:2])


def random_truth(seed, extents=(8, 9, 10), ranks=(3, 3, 3)):
    rng = np.random.default_rng(seed)
    return TuckerModel(rng.random(ranks), [rng.random((i, r)) for i, r in zip(extents, ranks)])


@pytest.mark.parametrize("method", ["greedy", "optimal"])
def test_match_components_undoes_permutation_and_scaling(method):
    truth = random_truth(1)
    rng = np.random.default_rng(2)
    perms = [rng.permutation(3) for _ in range(3)]
    scaled = [a[:, p] * rng.uniform(0.5, 4.0, size=3) for a, p in zip(truth.factors, perms)]
    est = TuckerModel(truth.core.copy(), scaled)
    for found, p in zip(match_components(truth, est, method), perms):
        np.testing.assert_array_equal(found, np.argsort(p))
    assert msir(truth, est, method) > MSIR_CEILING_DB - 20.0


def test_matching_is_always_bijective():
    truth = random_truth(3)
    for seed in range(10):
        for perm in match_components(truth, random_truth(100 + seed)):
            np.testing.assert_array_equal(np.sort(perm), np.arange(3))


def test_matching_input_errors():
    with pytest.raises(ShapeError):
        match_components(random_truth(4), random_truth(5, ranks=(2, 3, 3)))
    with pytest.raises(ValueError):
        match_components(random_truth(4), random_truth(5), method="hungarian")


# ---------------------------------------------------------------------------
# mSIR
# ---------------------------------------------------------------------------

def test_msir_is_sign_invariant_and_capped():
    truth = random_truth(6)
    flipped = truth.copy()
    flipped.factors[1][:, 0] *= -1.0
    report = component_sirs(truth, flipped)
    assert all(np.all(v == MSIR_CEILING_DB) for v in report.values)
    assert report.mean_db == MSIR_CEILING_DB


def test_msir_of_a_rotated_component_is_twenty_db():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(50)
    s = (x - x.mean()) / x.std()
    u = rng.standard_normal(50)
    u -= u.mean()
    u -= (u @ s) / (s @ s) * s
    u /= u.std()
    cos = 0.995
    e = cos * s + math.sqrt(1 - cos ** 2) * u

    core = np.ones((1, 1))
    second = rng.random((6, 1))
    truth = TuckerModel(core, [s[:, None], second])
    est = TuckerModel(core, [e[:, None], second])
    report = component_sirs(truth, est)
    assert report.values[0][0] == pytest.approx(20.0, abs=1e-6)
    assert report.mean_db == pytest.approx((20.0 + MSIR_CEILING_DB) / 2, abs=1e-6)


def test_constant_components_are_excluded():
    truth = random_truth(8)
    truth.factors[0][:, 1] = 1.0
    report = component_sirs(truth, truth.copy())
    assert report.excluded == [(0, 1)]
    assert np.isnan(report.values[0][1])
    assert report.mean_db == MSIR_CEILING_DB

    constant = TuckerModel(np.ones((1,)), [np.ones((4, 1))])
    with pytest.raises(ValueError):
        msir(constant, constant.copy())


# ---------------------------------------------------------------------------
# Sparsity of Kronecker products
# ---------------------------------------------------------------------------

def test_sparsity_counts_exact_zeros():
    assert sparsity(np.array([0.0, 1.0, 0.0, 2.0])) == 0.5
    assert sparsity(np.ones((3, 3))) == 0.0


def test_kronecker_sparsity_over_every_small_pattern():
    for bits1 in itertools.product([0.0, 1.0], repeat=6):
        a1 = np.array(bits1).reshape(2, 3)
        for bits2 in itertools.product([0.0, 2.0], repeat=2):
            a2 = np.array(bits2).reshape(2, 1)
            k = np.kron(a1, a2)
            assert sparsity(k) == pytest.approx(kronecker_sparsity_predict(sparsity(a1), sparsity(a2)), abs=1e-12)
            z1, z2 = a1.size - np.count_nonzero(a1), a2.size - np.count_nonzero(a2)
            assert kronecker_zero_count(a1.shape, z1, a2.shape, z2) == k.size - np.count_nonzero(k)


def test_kronecker_sparsity_on_random_pairs():
    rng = np.random.default_rng(9)
    for _ in range(50):
        a1 = rng.random((int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        a2 = rng.random((int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        a1[rng.random(a1.shape) < rng.random()] = 0.0
        a2[rng.random(a2.shape) < rng.random()] = 0.0
        predicted = kronecker_sparsity_predict(sparsity(a1), sparsity(a2))
        assert sparsity(np.kron(a1, a2)) == pytest.approx(predicted, abs=1e-12)
    with pytest.raises(ValueError):
        kronecker_sparsity_predict(1.5, 0.0)
    with pytest.raises(ValueError):
        kronecker_zero_count((2, 2), 5, (1, 1), 0)


def binary_vectors(max_length):
    for length in range(1, max_length + 1):
        for bits in itertools.product([0.0, 1.0], repeat=length):
            yield np.array(bits)


def assert_kronecker_sparsity(a1, a2):
    k = np.kron(a1, a2)
    s1, s2, s = sparsity(a1), sparsity(a2), sparsity(k)
    z1, z2 = a1.size - np.count_nonzero(a1), a2.size - np.count_nonzero(a2)
    assert kronecker_zero_count(a1.shape, z1, a2.shape, z2) == k.size - np.count_nonzero(k)
    assert s == pytest.approx(kronecker_sparsity_predict(s1, s2), abs=1e-12)
    assert s >= max(s1, s2) - 1e-12


@pytest.mark.slow
def test_kronecker_sparsity_over_every_binary_vector_pair():
    vectors = list(binary_vectors(6))
    assert len(vectors) == 126
    for a1 in vectors:
        for a2 in vectors:
            assert_kronecker_sparsity(a1, a2)


@pytest.mark.slow
def test_kronecker_sparsity_on_many_generic_positive_pairs():
    rng = np.random.default_rng(13)
    for _ in range(1000):
        a1 = rng.uniform(0.1, 2.0, (int(rng.integers(1, 7)), int(rng.integers(1, 7))))
        a2 = rng.uniform(0.1, 2.0, (int(rng.integers(1, 7)), int(rng.integers(1, 7))))
        a1[rng.random(a1.shape) < rng.random()] = 0.0
        a2[rng.random(a2.shape) < rng.random()] = 0.0
        assert_kronecker_sparsity(a1, a2)


# ---------------------------------------------------------------------------
# Diagnostics, seeds and reports
# ---------------------------------------------------------------------------

def test_error_bound_collapses_without_compression_error():
    truth = random_truth(10)
    y = reconstruct(truth)
    lra = hosvd(y, (3, 3, 3))
    record = error_bound_diagnostic(y, lra, truth, truth)
    assert record.sigma < 1e-10 * frobenius_norm(y)
    assert record.eps_direct == record.err_lra
    assert record.slack == pytest.approx(2 * record.sigma)


def test_error_bound_collapses_when_both_paths_start_together():
    truth = random_truth(14)
    y = reconstruct(truth)
    lra = hosvd(y, (3, 3, 3))
    init = random_truth(15)
    cfg = dict(ntd_ranks=(3, 3, 3), algorithm="mu", outer_iters=30, tol=0.0)
    direct = solve(y, SolverConfig(use_lra=False, **cfg), init=init)
    accelerated = solve(lra, SolverConfig(use_lra=True, **cfg), init=init)
    record = error_bound_diagnostic(y, lra, accelerated.model, direct.model)
    assert record.sigma < 1e-10 * frobenius_norm(y)
    assert abs(record.err_lra - record.eps_direct) < 1e-8 * frobenius_norm(y)


def test_error_bound_slack_is_reported_for_noisy_data():
    for trial in range(10):
        spec = SyntheticSpec(extents=(8, 9, 10), ranks=(2, 2, 2), mean=1.0, snr_db=10.0, seed=trial_seed(16, trial))
        _, _, noisy = generate(spec)
        cfg = dict(ntd_ranks=(2, 2, 2), algorithm="hals", outer_iters=30, seed=trial)
        accelerated = solve(noisy, SolverConfig(use_lra=True, **cfg))
        direct = solve(noisy, SolverConfig(use_lra=False, **cfg))
        record = error_bound_diagnostic(noisy, accelerated.lra, accelerated.model, direct.model)
        assert record.sigma > 0
        assert math.isfinite(record.slack)


def test_trial_seeds_are_stable_and_distinct():
    seeds = [trial_seed(7, i) for i in range(20)]
    assert seeds == [trial_seed(7, i) for i in range(20)]
    assert len(set(seeds)) == 20
    assert trial_seed(8, 0) != trial_seed(7, 0)
    with pytest.raises(ValueError):
        trial_seed(-1, 0)


def make_record(trial=0, **overrides):
    values = dict(
        trial=trial, algorithm="hals", use_lra=True, fit=95.0, lra_ms=1.5, ntd_ms=10.0,
        iterations=12, termination="converged",
    )
    values.update(overrides)
    return SolverRecord(**values)


def test_solver_record_validation():
    assert make_record().elapsed_ms == 11.5
    with pytest.raises(ValueError):
        make_record(fit=100.5)
    with pytest.raises(ValueError):
        make_record(msir_db=math.nan)


def test_report_json_and_reproducible_timings():
    spec = SyntheticSpec(extents=(4, 5), ranks=(2, 2))
    report = ExperimentReport("noise-sweep", spec, [make_record(0, sweep_value=10.0), make_record(1, use_lra=False)])
    payload = json.loads(report.to_json())
    assert payload["schema_version"] == REPORT_SCHEMA_VERSION
    assert payload["spec"]["extents"] == [4, 5]
    assert payload["records"][0]["elapsed_ms"] == 11.5

    quiet = json.loads(report.to_json(reproducible=True))
    for record in quiet["records"]:
        assert record["lra_ms"] == record["ntd_ms"] == record["elapsed_ms"] == 0.0
    assert report.to_json(reproducible=True) == report.to_json(reproducible=True)


def test_report_csv_layout():
    report = ExperimentReport("sparsity-sweep", None, [make_record(0, sweep_value=0.5, msir_db=21.0)])
    stream = io.StringIO()
    report.write_csv(stream)
    lines = stream.getvalue().splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS)
    row = dict(zip(CSV_COLUMNS, lines[1].split(",")))
    assert row["schema_version"] == str(REPORT_SCHEMA_VERSION)
    assert row["use_lra"] == "1"
    assert row["sigma"] == ""
    assert float(row["msir_db"]) == 21.0


def test_median_summary_groups_by_sweep_point():
    records = [
        make_record(0, sweep_value=0.0, fit=90.0),
        make_record(1, sweep_value=0.0, fit=92.0),
        make_record(2, sweep_value=0.0, fit=97.0),
        make_record(0, sweep_value=0.5, fit=80.0, msir_db=12.0),
    ]
    summary = median_summary(records)
    assert [row["sweep_value"] for row in summary] == [0.0, 0.5]
    assert summary[0]["median_fit"] == 92.0 and summary[0]["trials"] == 3
    assert summary[0]["median_msir_db"] is None
    assert summary[1]["median_msir_db"] == 12.0


@pytest.mark.slow
def test_sparse_ground_truth_is_recovered_better_than_chance():
    spec = SyntheticSpec(extents=(20, 20, 20), ranks=(3, 3, 3), factor_sparsity=0.5, core_sparsity=0.5, seed=11)
    clean, truth, _ = generate(spec)
    result = solve(clean, SolverConfig(ntd_ranks=(3, 3, 3), algorithm="hals", outer_iters=500, seed=2))
    baseline = msir(truth, random_truth(12, extents=(20, 20, 20)))
    assert msir(truth, result.model) > baseline + 5.0


def median_recovery(algorithm, sparsity_level, trials=10):
    msirs, fits = [], []
    for trial in range(trials):
        spec = SyntheticSpec(
            extents=(30, 30, 30), ranks=(3, 3, 3), factor_sparsity=sparsity_level, core_sparsity=sparsity_level,
            snr_db=20.0, seed=trial_seed(17, trial),
        )
        clean, truth, noisy = generate(spec)
        result = solve(noisy, SolverConfig(ntd_ranks=(3, 3, 3), algorithm=algorithm, use_lra=True, seed=trial))
        msirs.append(msir(truth, result.model))
        fits.append(fit_index(clean, reconstruct(result.model)))
    return float(np.median(msirs)), float(np.median(fits))


@pytest.mark.slow
@pytest.mark.parametrize("algorithm", ["mu", "hals", "apg"])
def test_sparse_noisy_data_is_recovered_and_beats_dense_data(algorithm):
    sparse_msir, sparse_fit = median_recovery(algorithm, 0.5)
    dense_msir, _ = median_recovery(algorithm, 0.0)
    assert sparse_msir > 20.0
    assert sparse_fit > 95.0
    assert dense_msir < sparse_msir
