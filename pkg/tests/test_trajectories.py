import dataclasses
import io
import json
import math

import numpy as np
import pytest
from scipy import stats

from heralded_cz.dynamics import (
    SystemParams,
    decay_generator,
    drive_generator,
    density_matrix,
    evolve_no_jump,
    lindblad_oracle,
    trace_distance,
)
from heralded_cz.hilbert import basis_state, build_space, project_vacuum
from heralded_cz.optics import jump_operators, reference_network
from heralded_cz.protocol import (
    AtomInputs,
    DetectionPattern,
    detect_coincidence,
    prepare_inputs,
    step1,
    success_probability,
)
from heralded_cz.trajectories import (
    EstimateWithError,
    estimate_heralding,
    herald_outcomes,
    make_rng,
    run_trajectory,
    sample_jump,
    unconditional_average,
    write_log,
)

P = SystemParams(omega=1.0, kappa=0.2, tau=1.3, t_detect=25.0)
SPACE = build_space(2, 4)
JUMPS = jump_operators(reference_network(), SPACE)


def test_rng_streams_are_reproducible():
    assert make_rng(5).random() == make_rng(5).random()
    assert make_rng(5).random() != make_rng(6).random()


def test_same_seed_same_record():
    a = run_trajectory(AtomInputs.uniform(), P, 17)
    b = run_trajectory(AtomInputs.uniform(), P, 17)
    assert a.to_json() == b.to_json()
    assert a.final_state.amplitudes.tobytes() == b.final_state.amplitudes.tobytes()


def test_waiting_time_is_exponential_for_one_photon():
    kappa = 0.5
    gen = decay_generator(SPACE, kappa)
    psi = basis_state(SPACE, ("sH", "gH", 1, 0, 0, 0))
    rng = make_rng(123)
    times = []
    for _ in range(10_000):
        t, _, _ = sample_jump(psi, JUMPS, gen, 1e3, rng)
        times.append(t)
    res = stats.kstest(times, "expon", args=(0, 1 / (2 * kappa)))
    assert res.pvalue > 0.01


@pytest.mark.parametrize("mode,expected", [
    (("sH", "gH", 1, 0, 0, 0), [0.25, 0.25, 0.25, 0.25]),
    (("gH", "sV", 0, 0, 0, 1), [0.5, 0.5, 0.0, 0.0]),
    (("gH", "sH", 0, 0, 1, 0), [0.0, 0.0, 0.5, 0.5]),
])
def test_detector_marginals(mode, expected):
    gen = decay_generator(SPACE, 1.0)
    psi = basis_state(SPACE, mode)
    rng = make_rng(7)
    counts = np.zeros(4)
    n = 4000
    for _ in range(n):
        _, j, _ = sample_jump(psi, JUMPS, gen, 1e3, rng)
        counts[j] += 1
    expected = np.array(expected)
    assert np.all(counts[expected == 0] == 0)
    live = expected > 0
    chi = stats.chisquare(counts[live], n * expected[live])
    assert chi.pvalue > 0.001


def test_survival_curve_with_drive_on():
    gen = drive_generator(SPACE, P.omega, P.kappa)
    psi = prepare_inputs(AtomInputs.uniform(), SPACE)
    horizon = 4.0
    rng = make_rng(99)
    n = 5000
    times = []
    for _ in range(n):
        res = sample_jump(psi, JUMPS, gen, horizon, rng)
        times.append(math.inf if res is None else res[0])
    times = np.array(times)
    for t in np.linspace(0.4, horizon, 10):
        exact = evolve_no_jump(psi, gen, t).norm_squared()
        emp = np.mean(times > t)
        band = 3 * math.sqrt(exact * (1 - exact) / n)
        assert abs(emp - exact) <= band


def test_no_decay_no_jump():
    gen = decay_generator(SPACE, 0.0)
    psi = basis_state(SPACE, ("sH", "gH", 1, 0, 0, 0))
    assert sample_jump(psi, JUMPS, gen, 10.0, make_rng(0)) is None


def test_record_structure():
    for seed in range(200):
        rec = run_trajectory(AtomInputs.uniform(), P, seed)
        times = [t for t, _ in rec.events]
        assert times == sorted(times)
        if not rec.survived_step1:
            assert len(rec.events) == 1 and rec.events[0][0] <= P.tau
            assert rec.heralded_pattern is None
        else:
            assert all(P.tau <= t <= P.tau + P.t_detect for t in times)
        json.loads(rec.to_json())


def test_every_herald_is_exact():
    seen = 0
    for seed in range(600):
        rec = run_trajectory(AtomInputs.uniform(), P, seed)
        if rec.heralded_pattern is not None:
            seen += 1
            assert rec.fidelity_cz == pytest.approx(1.0, abs=1e-10)
    assert seen > 50


def test_write_log_one_line_per_record():
    recs = [run_trajectory(AtomInputs.uniform(), P, s) for s in range(5)]
    buf = io.StringIO()
    write_log(recs, buf)
    lines = buf.getvalue().splitlines()
    assert [json.loads(x)["seed"] for x in lines] == list(range(5))


def test_estimate_requires_enough_samples():
    with pytest.raises(ValueError):
        estimate_heralding(AtomInputs.uniform(), P, 50)


def test_full_loss_never_heralds():
    est = estimate_heralding(AtomInputs.uniform(), dataclasses.replace(P, eta=1.0), 300)
    assert est.mean == 0.0


def test_empty_window_never_heralds():
    est = estimate_heralding(AtomInputs.uniform(), dataclasses.replace(P, t_detect=0.0), 300)
    assert est.mean == 0.0


def test_estimate_within_three_sigma():
    params = SystemParams(omega=1.5, kappa=0.5, tau=1.0, t_detect=4.0)
    est = estimate_heralding(AtomInputs(0.6, 0.8, 1, 0), params, 5000, base_seed=3)
    assert abs(est.mean - success_probability(params)) < 3 * est.stderr


def test_workers_do_not_change_results():
    a = herald_outcomes(AtomInputs.uniform(), P, 200, 40, jobs=1)
    b = herald_outcomes(AtomInputs.uniform(), P, 200, 40, jobs=2)
    assert a == b


def test_estimate_with_error_from_indicators():
    est = EstimateWithError.from_indicators(np.array([1, 0, 0, 1, 1, 0, 0, 0]))
    assert est.mean == 0.375
    assert est.stderr == pytest.approx(np.std([1, 0, 0, 1, 1, 0, 0, 0], ddof=1) / math.sqrt(8))


def test_unconditional_average_without_decay_is_pure():
    params = SystemParams(omega=0.8, kappa=0.0, tau=1.0, t_detect=1.0)
    inputs = AtomInputs(0.6, 0.8j, 1, 0)
    rho = unconditional_average(inputs, params, 1000, 1.0)
    psi = evolve_no_jump(prepare_inputs(inputs, SPACE), drive_generator(SPACE, 0.8, 0.0), 1.0)
    assert np.max(np.abs(rho - density_matrix(psi))) < 1e-10
    assert np.trace(rho).real == pytest.approx(1.0, abs=1e-10)


def test_unconditional_average_near_master_equation():
    horizon = P.tau / 2
    inputs = AtomInputs.uniform()
    oracle = lindblad_oracle(prepare_inputs(inputs, SPACE), P, horizon)
    rho = unconditional_average(inputs, P, 10_000, horizon, base_seed=500)
    assert np.trace(rho).real == pytest.approx(1.0, abs=1e-10)
    assert trace_distance(oracle, rho) < 5e-3


def test_doubling_samples_reduces_trace_distance():
    horizon = P.tau / 2
    inputs = AtomInputs.uniform()
    oracle = lindblad_oracle(prepare_inputs(inputs, SPACE), P, horizon)
    small, large = [], []
    for rep in range(5):
        base = 100_000 * (rep + 1)
        small.append(trace_distance(oracle, unconditional_average(inputs, P, 1000, horizon, base)))
        large.append(trace_distance(oracle, unconditional_average(inputs, P, 2000, horizon,
                                                                  base + 50_000)))
    assert np.mean(large) < np.mean(small)


@pytest.mark.slow
def test_heralded_average_matches_conditional_state():
    # parameters with a high per-pattern rate keep the run short
    params = SystemParams(omega=1.0, kappa=0.05, tau=math.pi / 2, t_detect=100.0)
    inputs = AtomInputs(0.6, 0.8, math.sqrt(0.5), 1j * math.sqrt(0.5))
    pattern = DetectionPattern.parse("D2,D3")
    dim = 16
    rho = np.zeros((dim, dim), dtype=complex)
    hits = 0
    seed = 0
    while hits < 10_000:
        rec = run_trajectory(inputs, params, seed)
        seed += 1
        if rec.heralded_pattern == pattern:
            atoms = project_vacuum(rec.final_state).normalized().amplitudes
            rho += np.outer(atoms, atoms.conj())
            hits += 1
    rho /= hits
    joint, _ = step1(inputs, params)
    target, _ = detect_coincidence(joint, pattern, params)
    fid = np.vdot(target.amplitudes, rho @ target.amplitudes).real
    assert fid >= 1 - 1e-6
