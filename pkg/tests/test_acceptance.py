"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Criteria 8 and 9 train desk-scale ensembles and take tens of minutes.
Criterion 10 (full scale) runs only when EKI_FULL_SCALE=1.
"""
import csv
import math
import os
import time

import numpy as np
import pytest

from eki_deeponet import cli
from eki_deeponet.adaptive_q import QController, QControllerConfig
from eki_deeponet.core import Ensemble, load_dataset
from eki_deeponet.datagen import (GpConfig, sample_gp, sensor_grid, solve_antiderivative, solve_pendulum,
                                  solve_reaction_diffusion)
from eki_deeponet.deeponet import DeepONetArch, default_arch, param_count
from eki_deeponet.eki import Batch, EkiConfig, kalman_update, train
from eki_deeponet.stopping import Stopper, StopperConfig, replay

from conftest import make_dataset
from oracles import explicit_update

# pinned tolerances
ORACLE_RTOL = 1e-10
ORACLE_INSTANCES = 100
ORACLE_SECONDS = 5.0
HAND_ATOL = 4 * np.finfo(float).eps
CONJ_J = 100_000
CONJ_MEAN, CONJ_VAR = 0.8, 0.2
CONJ_SE_MULT, CONJ_VAR_REL = 3.0, 0.05
CONJ_SECONDS = 10.0
PARAMS_1D, PARAMS_2D = 79232, 79360
PENDULUM_TOL, RD_TOL, SOLVER_SECONDS = 1e-8, 1e-3, 60.0
DESK_E, DESK_C, DESK_SECONDS = 0.05, 0.90, 15 * 60
SWEEP_SECONDS = 45 * 60
FULL_E, FULL_C = (0.005, 0.03), 0.95

DESK = dict(problem="antiderivative", m=50, n_train=200, n_q=50, n_stop=50, n_test=200,
            width=64, depth=3, J=1000, batch_train=200, batch_q=200, batch_stop=200, seed=0)


def record(log, number, ok, detail):
    log.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def _batch(y, r):
    y = np.atleast_1d(np.asarray(y, float))
    return Batch(np.zeros((y.size, 2), int), y, np.full(y.shape, float(r)) if np.ndim(r) == 0 else r)


def test_1_oracle_equivalence(acceptance_log):
    rng = np.random.default_rng(2024)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(ORACLE_INSTANCES):
        J, n, ny = rng.integers(2, 21), rng.integers(1, 16), rng.integers(1, 11)
        theta = rng.standard_normal((J, n))
        yhat = np.tanh(theta @ rng.standard_normal((n, ny)))
        y, r = rng.standard_normal(ny), rng.uniform(0.05, 2.0, ny)
        fast = kalman_update(Ensemble(theta), yhat, _batch(y, r), deterministic_noise=True).members
        ref = explicit_update(theta, yhat, y, r, np.zeros((J, ny)))
        worst = max(worst, float(np.max(np.abs(fast - ref)) / np.max(np.abs(ref))))
    seconds = time.perf_counter() - t0
    ok = worst <= ORACLE_RTOL and seconds < ORACLE_SECONDS
    record(acceptance_log, 1, ok, f"max rel diff {worst:.2e} (<= {ORACLE_RTOL:g}), {seconds:.2f} s")
    assert ok


def test_2_hand_example(acceptance_log):
    prior = Ensemble([[0.0], [2.0]])
    post = kalman_update(prior, prior.members, _batch(1.0, 1.0), deterministic_noise=True).members.ravel()
    err = float(np.max(np.abs(post - [2 / 3, 4 / 3])))
    ok = err <= HAND_ATOL
    record(acceptance_log, 2, ok, f"members {post.tolist()}, error {err:.1e}")
    assert ok


def test_3_conjugate_gaussian(acceptance_log):
    t0 = time.perf_counter()
    prior = Ensemble(np.random.default_rng(7).standard_normal((CONJ_J, 1)))
    post = kalman_update(prior, prior.members, _batch(1.0, 0.25), np.random.default_rng(8)).members.ravel()
    seconds = time.perf_counter() - t0
    se = math.sqrt(CONJ_VAR / CONJ_J)
    mean, var = float(post.mean()), float(post.var(ddof=1))
    ok = (abs(mean - CONJ_MEAN) <= CONJ_SE_MULT * se and abs(var - CONJ_VAR) <= CONJ_VAR_REL * CONJ_VAR
          and seconds < CONJ_SECONDS)
    record(acceptance_log, 3, ok, f"mean {mean:.5f} ({abs(mean - CONJ_MEAN) / se:.2f} SE), "
                                  f"var {var:.5f} ({abs(var / CONJ_VAR - 1):.2%}), {seconds:.2f} s")
    assert ok


def test_4_parameter_counts(acceptance_log):
    a, b = param_count(default_arch(100, 1)), param_count(default_arch(100, 2))
    ok = (a, b) == (PARAMS_1D, PARAMS_2D)
    record(acceptance_log, 4, ok, f"{a} and {b}")
    assert ok


def test_5_solvers(acceptance_log):
    t0 = time.perf_counter()
    x = sensor_grid(100)
    anti = float(np.max(np.abs(solve_antiderivative(2 * x) - x * x)))
    u = sample_gp(GpConfig(), np.random.default_rng(5), 4)
    pend = float(np.max(np.abs(solve_pendulum(u, h=1e-3) - solve_pendulum(u, h=5e-4))))
    rd = float(np.max(np.abs(solve_reaction_diffusion(u[0]) - solve_reaction_diffusion(u[0], dt=5e-4, n_x=199))))
    zero = bool(np.all(solve_reaction_diffusion(np.zeros(100)) == 0.0))
    seconds = time.perf_counter() - t0
    ok = anti <= 1e-14 and pend < PENDULUM_TOL and rd < RD_TOL and zero and seconds < SOLVER_SECONDS
    record(acceptance_log, 5, ok, f"antiderivative {anti:.1e}, pendulum halving {pend:.1e}, "
                                  f"RD refinement {rd:.1e}, RD zero exact {zero}, {seconds:.1f} s")
    assert ok


def test_6_adaptive_q(acceptance_log):
    cfg = QControllerConfig(alpha=0.05, tau=0.1, window=10)

    def final(values):
        ctl = QController(0.01, cfg)
        return [ctl.update(v) for v in values]

    up = final([-0.2] * 11)[-1] == 0.01 * 1.05
    down = final([0.2] * 11)[-1] == 0.01 * 0.95
    hold = final([0.05, -0.05] * 5 + [0.0])[-1] == 0.01
    warm = final([-5.0] * 10) == [0.01] * 10
    ok = up and down and hold and warm
    record(acceptance_log, 6, ok, f"up {up}, down {down}, hold {hold}, warm-up {warm}")
    assert ok


def test_7_stopping_determinism(acceptance_log):
    const_stop, _ = replay([4.2] * 300)
    expected = 10 + 100
    # a real training run with a short patience, replayed from its report
    cfg = StopperConfig(window=3, patience=8)
    ds = make_dataset(n=8, p=6, splits={"train": [0, 1, 2, 3], "q_learn": [4, 5], "stop": [6, 7]})
    arch = DeepONetArch((4, 6, 4), (1, 6, 4))
    _, report = train(ds, arch, EkiConfig(J=20, batch_train=10, batch_q=6, batch_stop=6, max_iterations=400),
                      stopper=Stopper(cfg))
    real_stop, _ = replay(report.raw_discrepancy, cfg)
    ok = const_stop == expected and report.stop_reason == "converged" and real_stop == report.iterations
    record(acceptance_log, 7, ok, f"constant sequence stops at {const_stop} (expected {expected}); "
                                  f"real run stopped at {report.iterations}, replay {real_stop}")
    assert ok


def _desk_config(tmp_path, **kw):
    return cli.resolve_config(None, dict(DESK, out=str(tmp_path), **kw))


def test_8_desk_end_to_end(acceptance_log, tmp_path):
    cfg = _desk_config(tmp_path, noise=0.01, run_name="desk")
    t0 = time.perf_counter()
    run = cli.cmd_generate(cfg)
    gen, test = load_dataset(run / "dataset" / "gen"), load_dataset(run / "dataset" / "test")
    ens, report = cli.train_run(cfg, gen, run)
    suite = cli.evaluate_run(cfg, ens, test, run)
    seconds = time.perf_counter() - t0
    e, q, c = suite.mean_e, suite.mean_q, suite.mean_c
    checks = {"e": e <= DESK_E, "c": c >= DESK_C, "q>=e": q >= e, "time": seconds <= DESK_SECONDS}
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(acceptance_log, 8, ok,
           f"e={e:.4f} (<= {DESK_E}) q={q:.4f} c={c:.4f} (>= {DESK_C}), {seconds:.0f} s on "
           f"{os.cpu_count()} core(s), {report.iterations} iterations, {report.stop_reason}, best "
           f"{report.best_iteration}" + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


def test_9_q_sweep_ordering(acceptance_log, tmp_path):
    cfg = _desk_config(tmp_path, noise=0.05, run_name="sweep")
    t0 = time.perf_counter()
    cli.cmd_generate(cfg)
    table = cli.cmd_q_sweep(cfg, sigma2=[1e-4, 1e-2])
    seconds = time.perf_counter() - t0
    rows = list(csv.DictReader(open(table)))
    by = {("adaptive" if r["mode"] == "adaptive" else float(r["sigma2"])): r for r in rows}
    q = {k: float(v["mean_q"]) for k, v in by.items()}
    c = {k: float(v["mean_c"]) for k, v in by.items()}
    checks = {"q order": q[1e-2] > q["adaptive"] > q[1e-4], "coverage": c[1e-4] < c["adaptive"],
              "time": seconds <= SWEEP_SECONDS}
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record(acceptance_log, 9, ok,
           f"mean_q 1e-2={q[1e-2]:.4f} adaptive={q['adaptive']:.4f} 1e-4={q[1e-4]:.4f}; coverage "
           f"1e-4={c[1e-4]:.3f} adaptive={c['adaptive']:.3f}; {seconds:.0f} s"
           + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


@pytest.mark.skipif(os.environ.get("EKI_FULL_SCALE") != "1", reason="full-scale run: set EKI_FULL_SCALE=1")
def test_10_full_scale(acceptance_log, tmp_path):
    cfg = cli.resolve_config(None, dict(problem="antiderivative", noise=0.01, out=str(tmp_path), run_name="full"))
    run = cli.cmd_generate(cfg)
    ens, report = cli.train_run(cfg, load_dataset(run / "dataset" / "gen"), run)
    suite = cli.evaluate_run(cfg, ens, load_dataset(run / "dataset" / "test"), run)
    ok = FULL_E[0] <= suite.mean_e <= FULL_E[1] and suite.mean_c >= FULL_C
    record(acceptance_log, 10, ok, f"e={suite.mean_e:.4f} in {FULL_E}, c={suite.mean_c:.4f} (>= {FULL_C})")
    assert ok


def test_10_reported_when_skipped(acceptance_log):
    if os.environ.get("EKI_FULL_SCALE") != "1":
        acceptance_log.append("criterion 10: SKIP  optional full-scale run (set EKI_FULL_SCALE=1)")
