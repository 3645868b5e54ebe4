"""Acceptance suite: every exit criterion at its stated tolerance.

Each test prints one ``ACCEPTANCE n: PASS/FAIL`` line (run pytest with -s
to see them inline; they also appear in captured output).  Criteria 4 and
9 are asserted exactly as stated and are expected to fail: the effective
model that reproduces the single-read statistics cannot simultaneously
reach the quoted dual-step and fast-readout numbers.  They are marked
strict-xfail so a change in that situation is flagged.
"""
import dataclasses
import time

import numpy as np
import pytest

from ssro.analysis import (ClassifierConfig, exact_count_pmf, fidelity_report,
                           fit_flip_rate, optimize_threshold, scenario)
from ssro.model import (Nuclear, PhysicalParams, default_diagram,
                        odmr_spectrum)
from ssro.optics import (PumpTarget, calibrate_collection,
                         expected_cycle_photons, fit_pump_rates, propagate)
from ssro.protocol import (build_dual_step_readout, build_standard_readout,
                           parse_sequence, print_sequence)
from ssro.trajectory import calibrated_shot_model, simulate_batch
from ssro.analysis import estimate_peak_separation

N_SHOTS = 1_000_000
N_SHOTS_DUAL = 400_000


def verdict(criterion, ok, detail):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


@pytest.fixture(scope="module")
def params():
    return PhysicalParams()


@pytest.fixture(scope="module")
def protocol(params):
    return build_standard_readout(params)


@pytest.fixture(scope="module")
def model():
    return calibrated_shot_model()


@pytest.fixture(scope="module")
def bright_batch(model, protocol):
    start = time.perf_counter()
    batch = simulate_batch(model, protocol, Nuclear.UP, N_SHOTS, master_seed=2024)
    elapsed = time.perf_counter() - start
    return batch, elapsed


@pytest.fixture(scope="module")
def dark_batch(model, protocol):
    return simulate_batch(model, protocol, Nuclear.DOWN, N_SHOTS,
                          master_seed=2025)


@pytest.fixture(scope="module")
def dual_batches(model, params):
    proto = build_dual_step_readout(params)
    up = simulate_batch(model, proto, Nuclear.UP, N_SHOTS_DUAL, master_seed=2026)
    dn = simulate_batch(model, proto, Nuclear.DOWN, N_SHOTS_DUAL,
                        master_seed=2027)
    return up, dn


def test_criterion_1_mean_totals_and_runtime(bright_batch, dark_batch):
    batch, elapsed = bright_batch
    mean_bright = batch.total1.mean()
    mean_dark = dark_batch.total1.mean()
    ok = (abs(mean_bright - 6.24) <= 0.15
          and abs(mean_dark - 0.40) <= 0.05
          and elapsed <= 60.0)
    verdict(1, ok, f"mean bright {mean_bright:.3f} (6.24±0.15), "
                   f"mean dark {mean_dark:.3f} (0.40±0.05), "
                   f"runtime {elapsed:.1f}s (<=60s)")
    assert abs(mean_bright - 6.24) <= 0.15
    assert abs(mean_dark - 0.40) <= 0.05
    assert elapsed <= 60.0


def test_criterion_2_raw_fidelity(bright_batch, dark_batch):
    report = fidelity_report(bright_batch[0], dark_batch, mode="raw")
    fid = report.average_fidelity
    fn = report.misread_bright_as_dark
    fp = report.misread_dark_as_bright
    ok = (abs(fid - 0.8805) <= 0.02 and abs(fn - 0.191) <= 0.02
          and abs(fp - 0.048) <= 0.02)
    verdict(2, ok, f"raw fidelity {fid:.4f} (0.8805±0.02), "
                   f"rates {fn:.3f}/{fp:.3f} ((0.191, 0.048)±0.02)")
    assert abs(fid - 0.8805) <= 0.02
    assert abs(fn - 0.191) <= 0.02
    assert abs(fp - 0.048) <= 0.02


def test_criterion_3_conditional_fidelity(bright_batch, dark_batch):
    report = fidelity_report(bright_batch[0], dark_batch, mode="conditional")
    fid = report.average_fidelity
    fn = report.misread_bright_as_dark
    fp = report.misread_dark_as_bright
    ok = (abs(fid - 0.9815) <= 0.005 and abs(fn - 0.028) <= 0.005
          and abs(fp - 0.009) <= 0.005)
    verdict(3, ok, f"conditional fidelity {fid:.4f} (0.9815±0.005), "
                   f"rates {fn:.4f}/{fp:.4f} ((0.028, 0.009)±0.005)")
    assert abs(fid - 0.9815) <= 0.005
    assert abs(fn - 0.028) <= 0.005
    assert abs(fp - 0.009) <= 0.005


@pytest.mark.xfail(
    strict=True,
    reason="model-infeasible as specified: with the measured per-cycle flip "
           "probability of 7.7e-4 over 250 cycles, flips alone discard ~15 % "
           "of shots into the double-bright signature and early flips land "
           "in the wrong conclusive bucket, capping the dual-step subspace "
           "fidelity near 0.95 and the success efficiency near 0.85 even "
           "for an error-free register; with the charge/initialization "
           "errors required by the raw statistics the model predicts "
           "fidelity ~0.92 at efficiency ~0.79. See the decisions ledger.")
def test_criterion_4_dual_step(dual_batches):
    up, dn = dual_batches
    report = fidelity_report(up, dn, mode="dual_step")
    per = report.per_preparation
    fid = report.average_fidelity
    ok = (abs(fid - 0.995) <= 0.003
          and abs(report.success_efficiency - 0.898) <= 0.02
          and all(abs(per[k]["fidelity"] - 0.995) <= 0.003
                  and abs(per[k]["success_efficiency"] - 0.898) <= 0.02
                  for k in ("up", "down")))
    verdict(4, ok, f"dual fidelity {fid:.4f} (0.995±0.003), success "
                   f"{report.success_efficiency:.4f} (0.898±0.02), per-prep "
                   f"{per['up']['fidelity']:.4f}/{per['down']['fidelity']:.4f}")
    assert abs(fid - 0.995) <= 0.003
    assert abs(report.success_efficiency - 0.898) <= 0.02
    for k in ("up", "down"):
        assert abs(per[k]["fidelity"] - 0.995) <= 0.003
        assert abs(per[k]["success_efficiency"] - 0.898) <= 0.02


def test_criterion_5_flip_rate_recovery(model, params):
    proto = build_standard_readout(params, cycles=500)
    synthetic = dataclasses.replace(model, flip_db=0.0)
    batch = simulate_batch(synthetic, proto, Nuclear.UP, N_SHOTS,
                           master_seed=2028)
    fit = fit_flip_rate(batch.detect1, batch.n_shots)
    ok = 6.9e-4 <= fit.flip_rate <= 8.5e-4
    verdict(5, ok, f"recovered flip rate {fit.flip_rate:.3e} "
                   f"(target window [6.9e-4, 8.5e-4]), "
                   f"CI [{fit.ci68[0]:.2e}, {fit.ci68[1]:.2e}]")
    assert 6.9e-4 <= fit.flip_rate <= 8.5e-4


def _tv_against_oracle(m, protocol, prepared, seed):
    batch = simulate_batch(m, protocol, prepared, N_SHOTS, master_seed=seed)
    pmf = exact_count_pmf(m, protocol.cycles, prepared)
    emp = np.bincount(batch.total1, minlength=len(pmf)).astype(float)
    if len(emp) > len(pmf):
        pmf = np.pad(pmf, (0, len(emp) - len(pmf)))
    return 0.5 * np.abs(emp / batch.n_shots - pmf).sum()


def test_criterion_6_oracle_equivalence(model, protocol, bright_batch):
    # reuse the criterion-1 batch for the calibrated model
    batch, _ = bright_batch
    pmf = exact_count_pmf(model, protocol.cycles, Nuclear.UP)
    emp = np.bincount(batch.total1, minlength=len(pmf)).astype(float)
    if len(emp) > len(pmf):
        pmf = np.pad(pmf, (0, len(emp) - len(pmf)))
    tvs = [0.5 * np.abs(emp / batch.n_shots - pmf).sum()]

    gen = np.random.default_rng(77)
    for i in range(4):
        random_model = dataclasses.replace(
            model,
            lambda_bright=gen.uniform(0.01, 0.08),
            lambda_dark=gen.uniform(0.0, 0.004),
            flip_bd=gen.uniform(1e-4, 3e-3),
            flip_db=gen.uniform(0.0, 3e-4),
            nuclear_init_error=gen.uniform(0.0, 0.15),
            charge_error=gen.uniform(0.0, 0.2),
        )
        prepared = Nuclear.UP if i % 2 == 0 else Nuclear.DOWN
        tvs.append(_tv_against_oracle(random_model, protocol, prepared,
                                      seed=3000 + i))
    ok = max(tvs) < 0.005
    verdict(6, ok, "TV distances " + ", ".join(f"{tv:.5f}" for tv in tvs)
            + " (all < 0.005)")
    assert max(tvs) < 0.005


def test_criterion_7_pumping(params):
    optical = fit_pump_rates(PumpTarget(time_us=1.5, min_fidelity=0.985))
    optical = calibrate_collection(optical, target_photons=0.028,
                                   laser_window_us=1.5)
    curve = propagate(optical, 1.5)
    fid = curve.pump_fidelity(1.5)
    photons = expected_cycle_photons(optical, 1.5)
    ok = fid >= 0.985 and abs(photons - 0.028) <= 0.002
    verdict(7, ok, f"pump fidelity {fid:.4f} (>=0.985), window photons "
                   f"{photons:.4f} (0.028±0.002)")
    assert fid >= 0.985
    assert abs(photons - 0.028) <= 0.002


def test_criterion_8_odmr(params):
    step = 0.1
    grid = np.arange(-8.0, 8.0 + 1e-9, step)
    populations = (params.nuclear_init_fidelity,
                   1.0 - params.nuclear_init_fidelity)
    spec = odmr_spectrum(params, default_diagram(), populations, grid)
    major = spec[grid < 0].max()
    minor = spec[grid > 0].max()
    ratio = minor / major
    separation = estimate_peak_separation(grid, spec)
    ok = abs(ratio - 0.075) <= 0.01 and abs(separation - 8.0) <= step
    verdict(8, ok, f"peak ratio {ratio:.4f} (0.075±0.01), separation "
                   f"{separation:.3f} MHz (8.0±{step})")
    assert abs(ratio - 0.075) <= 0.01
    assert abs(separation - 8.0) <= step


@pytest.mark.xfail(
    strict=True,
    reason="model-infeasible as specified: at five-fold collection the "
           "per-shot flip probability still produces a false-negative floor "
           "of roughly twice the flip rate over the photons per cycle "
           "(~1 %), capping the threshold-optimized fidelity near 0.993 "
           "(conditional variant ~0.996) for a 0.2 ms budget. See the "
           "decisions ledger.")
def test_criterion_9_scenario(model, protocol):
    report = scenario(model, protocol, overrides={"lambda_bright_scale": 5},
                      duration_budget_ms=0.2)
    ok = report.optimized_fidelity >= 0.997
    verdict(9, ok, f"cycles {report.cycles}, optimized fidelity "
                   f"{report.optimized_fidelity:.4f} (>=0.997), conditional "
                   f"variant {report.conditional_fidelity:.4f}")
    assert report.optimized_fidelity >= 0.997


def test_criterion_10_property_suite(model, protocol, params):
    # consolidated spot checks of the module invariants (the full property
    # coverage lives in the per-module test files)
    checks = {}

    curve = propagate(calibrate_collection(
        fit_pump_rates(PumpTarget(1.5, 0.985)), 0.028, 1.5), 1.5)
    checks["population_conservation_1e-9"] = bool(
        np.abs(curve.populations.sum(axis=1) - 1.0).max() < 1e-9)

    text = print_sequence(build_dual_step_readout(params, cycles=3).readout)
    checks["parse_print_round_trip"] = parse_sequence(text).structurally_equal(
        build_dual_step_readout(params, cycles=3).readout)

    serial = simulate_batch(model, protocol, Nuclear.UP, 30_000,
                            master_seed=4242, n_workers=1)
    threaded = simulate_batch(model, protocol, Nuclear.UP, 30_000,
                              master_seed=4242, n_workers=4)
    checks["parallel_determinism"] = bool(
        np.array_equal(serial.total1, threaded.total1)
        and np.array_equal(serial.detect1, threaded.detect1))

    flat = np.full(12, 1.0 / 12)
    checks["threshold_tie_break_to_zero"] = optimize_threshold(flat, flat)[0] == 0

    pmfs = [exact_count_pmf(dataclasses.replace(model, flip_bd=f), 250,
                            Nuclear.UP) for f in (2e-4, 7.7e-4, 5e-3)]
    means = [(np.arange(len(p)) * p).sum() for p in pmfs]
    checks["flip_monotonicity"] = means[0] > means[1] > means[2]

    ok = all(checks.values())
    verdict(10, ok, ", ".join(f"{k}={'ok' if v else 'FAIL'}"
                              for k, v in checks.items()))
    assert all(checks.values()), checks
