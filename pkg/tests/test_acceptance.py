"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line; the lines are repeated in the pytest
terminal summary. The simulation check takes a couple of minutes on one core.
"""

import math
import os

import numpy as np
import pytest

from acceptance_log import report
from conftest import make_cohort, split
from oracles import bernoulli_loglik, grid_refine_argmax
from pooledlogit import glm
from pooledlogit.errors import Separation, SpecRejected, StrictModePrivacyViolation
from pooledlogit.glm import Design
from pooledlogit.model import LOG, ModelSpec, StudyMeta, power, term, validate_model_spec
from pooledlogit.pooling import CASE, CONTROL, AutoSizes, aggregate_centralized, build_plan, offsets_for_plan
from pooledlogit.protocol.audit import audit_transcript, unmasked_partials
from pooledlogit.securesum import EXACT, REAL, draw_mask, run_chain, to_fixed, unmask
from pooledlogit.simulate import SimConfig, run_replication
from sessions import centralized, same_fit, session

# -- 1. simulation table -------------------------------------------------------------

SIM_SEED = 12345  # chosen before the first run
ARMS = ("Unpooled", "g=2", "g=3", "g=4", "g=6")
# reference mean estimates and mean model-based SEs for this design (500 reps), by arm
REFERENCE = {
    "x": ((0.2499, 0.2500, 0.2500, 0.2504, 0.2502), (0.0245, 0.0253, 0.0262, 0.0272, 0.0293)),
    "log(z1)": ((-0.3004, -0.3007, -0.3009, -0.3013, -0.3022), (0.0175, 0.0184, 0.0193, 0.0203, 0.0224)),
    "z2": ((0.1507, 0.1508, 0.1513, 0.1504, 0.1514), (0.0243, 0.0251, 0.0259, 0.0268, 0.0288)),
    "x*z2": ((0.5002, 0.5006, 0.5003, 0.5016, 0.5005), (0.0225, 0.0237, 0.0250, 0.0264, 0.0294)),
}


@pytest.mark.slow
def test_simulation_table_is_reproduced():
    cfg = SimConfig(n_subjects=30000, n_reps=200, pool_sizes=(2, 3, 4, 6), seed=SIM_SEED)
    rep = run_replication(cfg, workers=os.cpu_count() or 1)
    misses = []
    for p, (estimates, ses) in REFERENCE.items():
        for arm, est, se in zip(ARMS, estimates, ses):
            s = rep.summaries[arm].params[p]
            if abs(s.mean_estimate - est) > 0.005:
                misses.append(f"{p} {arm} estimate {s.mean_estimate:.4f} vs {est}")
            if abs(s.mean_se - se) > 0.10 * se:
                misses.append(f"{p} {arm} SE {s.mean_se:.4f} vs {se}")
            if not 0.91 <= s.coverage <= 0.98:
                misses.append(f"{p} {arm} coverage {s.coverage:.3f}")
    failed = {a: len(rep.summaries[a].failures) for a in ARMS}
    ok = not misses and not any(failed.values())
    x = [rep.summaries[a].params["x"] for a in ARMS]
    detail = "x SE " + " ".join(f"{s.mean_se:.4f}" for s in x) + f"; failed fits {failed}"
    report(1, ok, detail + ("" if ok else "; " + "; ".join(misses)))
    assert ok, misses


# -- 2. unit pools ----------------------------------------------------------------------


def test_unit_pools_equal_standard_fit():
    spec = ModelSpec((term("x"), term("z1", LOG), term("z2"), term("x", times="z2")))
    worst_slope, worst_icpt, offsets_exact = 0.0, 0.0, True
    for seed in range(5):
        recs = make_cohort(150 + 50 * seed, seed=100 + seed)
        cases = [r.subject_id for r in recs if r.outcome]
        controls = [r.subject_id for r in recs if not r.outcome]
        plan = build_plan(StudyMeta(len(cases), len(controls)), cases, controls, 1, seed=seed, privacy=False)
        rows = aggregate_centralized(plan, recs, spec, mode=REAL)
        ratio = math.log(len(cases) / len(controls))
        offsets_exact &= all(r.offset == ratio for r in rows)
        pooled = glm.fit(glm.pooled_design(rows, spec))
        standard = glm.fit(glm.individual_design(recs, spec))
        worst_slope = max(worst_slope, float(np.max(np.abs(pooled.coefficients[1:] - standard.coefficients[1:]))))
        worst_icpt = max(worst_icpt, abs(pooled.coefficients[0] - (standard.coefficients[0] - ratio)))
    ok = offsets_exact and worst_slope <= 1e-8 and worst_icpt <= 1e-8
    report(2, ok, f"max slope diff {worst_slope:.1e}, intercept shift error {worst_icpt:.1e}, offsets exact: {offsets_exact}")
    assert ok


# -- 3. mixed-size plan ---------------------------------------------------------------


def test_mixed_size_plan():
    plan = build_plan(StudyMeta(100, 4321), [f"c{i}" for i in range(100)], [f"k{i}" for i in range(4321)], AutoSizes(3), seed=0)
    counts = plan.counts()
    got = (counts[(CASE, 3)], counts[(CASE, 4)], counts[(CONTROL, 3)], counts[(CONTROL, 4)], len(plan.leftovers))
    offsets = offsets_for_plan(plan)
    ok = got == (4, 22, 3, 1078, 0) and offsets == {3: math.log(4 / 3), 4: math.log(22 / 1078)}
    report(3, ok, f"case 3s/4s {got[0]}+{got[1]}, control 3s/4s {got[2]}+{got[3]}, leftovers {got[4]}, offsets {offsets}")
    assert ok


# -- 4. distributed equals centralized ------------------------------------------------------

SPEC = ModelSpec((term("x"), term("z1", LOG), term("z2"), term("x", times="z2")))


def _sessions(count=50):
    rng = np.random.default_rng(404)
    cohort = make_cohort(360, seed=31)
    for k in range(count):
        parts = int(rng.integers(1, 6))
        sizes = [2, 3, 4, AutoSizes(3)][k % 4]
        nodes = split(cohort, parts, seed=int(rng.integers(2**31)))
        nodes = {nid: recs for nid, recs in nodes.items() if recs}
        yield k, cohort, nodes, sizes, int(rng.integers(2**31))


@pytest.fixture(scope="module")
def partition_runs():
    runs = []
    for k, cohort, nodes, sizes, seed in _sessions():
        s = session(nodes, SPEC, sizes, seed, schedule="random" if k % 2 else "fifo", network_seed=k)
        runs.append((cohort, nodes, sizes, seed, s))
    return runs


def test_distributed_equals_centralized(partition_runs):
    mismatched = []
    node_counts = set()
    for k, (_, nodes, sizes, seed, s) in enumerate(partition_runs):
        node_counts.add(len(nodes))
        _, pooled_csv, fit = centralized(nodes, SPEC, sizes, seed)
        if s.coordinator.phase != "Done" or s.coordinator.pooled_csv() != pooled_csv or not same_fit(s.coordinator.fit, fit):
            mismatched.append(k)
    ok = not mismatched and len(partition_runs) >= 50
    report(4, ok, f"{len(partition_runs)} sessions over {sorted(node_counts)} nodes, mismatches {mismatched}")
    assert ok


# -- 5. secure summation round trip -----------------------------------------------------


def test_secure_summation_round_trip():
    rng = np.random.default_rng(55)
    exact_bad, worst_real = 0, 0.0
    for _ in range(10_000):
        k = int(rng.integers(1, 6))
        scale = float(rng.choice([1.0, 10.0, 100.0]))
        values = list(rng.normal(size=k) * scale)
        order = rng.permutation(k)
        values = [values[i] for i in order]

        local = [to_fixed(v) for v in values]
        masks = [draw_mask(rng, EXACT) for _ in range(k)]
        total, _ = run_chain(local, masks, EXACT)
        exact_bad += unmask(total, masks, EXACT) != sum(local)

        masks = [draw_mask(rng, REAL) for _ in range(k)]
        total, _ = run_chain(values, masks, REAL)
        truth = math.fsum(values)
        worst_real = max(worst_real, abs(unmask(total, masks, REAL) - truth) / max(abs(truth), 1.0))
    ok = exact_bad == 0 and worst_real <= 1e-9
    report(5, ok, f"10000 chains of 1-5 nodes: exact mismatches {exact_bad}, worst real relative error {worst_real:.2e}")
    assert ok


# -- 6. privacy audit -------------------------------------------------------------------


def test_privacy_audit(partition_runs):
    violations, coincidences, clear = [], 0, []
    for cohort, _, _, _, s in partition_runs:
        sizes = {p.pool_id: p.size_g for p in s.coordinator.plan.pools}
        audit = audit_transcript(s.network.transcript, cohort, sizes)
        violations += audit.violations
        coincidences += audit.coincidences
        clear += unmasked_partials(s.nodes.values())
    try:
        validate_model_spec(ModelSpec((term("x"), term("x", power(2)), term("x", power(3)))), g_min=3, strict=True)
        guard = False
    except StrictModePrivacyViolation:
        guard = True
    cubic = ModelSpec((term("x"), term("x", power(2)), term("x", power(3))))
    _, _, nodes, _, seed = next(_sessions(1))
    strict = session(nodes, cubic, 3, seed, strict=True)
    guard &= isinstance(strict.coordinator.error, SpecRejected)
    ok = not violations and not clear and guard
    report(6, ok, f"violations {len(violations)}, unmasked partials {len(clear)}, value coincidences {coincidences}, strict guard rejects cubic: {guard}")
    assert ok, violations[:5]


# -- 7. solver correctness ----------------------------------------------------------------


def _random_design(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(15, 60)), int(rng.integers(1, 4))
    X = np.column_stack([np.ones(n), rng.normal(size=(n, k))])
    beta = rng.normal(scale=0.7, size=k + 1)
    off = rng.normal(scale=0.5, size=n)
    y = (rng.random(n) < 1 / (1 + np.exp(-(X @ beta + off)))).astype(int)
    if y.all() or not y.any():
        y[0] = 1 - y[0]
    return Design(X, y, off, tuple(f"b{i}" for i in range(k + 1)))


def test_solver_correctness(glm12_rows):
    rows = [(y, (1.0, x), 0.0) for y, x in glm12_rows]
    oracle = grid_refine_argmax(rows)
    fit = glm.fit(Design(np.array([r[1] for r in rows]), np.array([r[0] for r in rows]), np.zeros(len(rows)), ("intercept", "x")))
    grid_err = float(np.max(np.abs(fit.coefficients - oracle)))

    worst_fd = 0.0
    for seed in range(20):
        d = _random_design(seed)
        beta = np.random.default_rng(seed).normal(size=d.X.shape[1])
        h = 1e-5
        fd = np.array([(glm.log_likelihood_at(d, beta + h * e) - glm.log_likelihood_at(d, beta - h * e)) / (2 * h) for e in np.eye(len(beta))])
        analytic = glm.score_at(d, beta)
        worst_fd = max(worst_fd, float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(analytic), np.max(np.abs(analytic))))))

    monotone, fitted = 0, 0
    for seed in range(100):
        try:
            res = glm.fit(_random_design(1000 + seed))
        except Separation:
            continue
        fitted += 1
        h = res.deviance_history
        monotone += all(b <= a + glm.DEV_RESOLUTION * (abs(a) + 1.0) for a, b in zip(h, h[1:]))
    ok = grid_err <= 1e-4 and worst_fd <= 1e-6 and monotone == fitted
    report(7, ok, f"grid oracle diff {grid_err:.1e}, worst score/FD relative diff {worst_fd:.1e}, monotone deviance {monotone}/{fitted} fits")
    assert ok


# -- 8. likelihood ratio test -------------------------------------------------------------


def test_likelihood_ratio_on_pooled_data(cohort):
    full_spec = ModelSpec((term("x"), term("z1", LOG), term("z2")))
    reduced_spec = ModelSpec((term("x"),))
    cases = [r.subject_id for r in cohort if r.outcome]
    controls = [r.subject_id for r in cohort if not r.outcome]
    plan = build_plan(StudyMeta(len(cases), len(controls)), cases, controls, 2, seed=6)
    full_rows = aggregate_centralized(plan, cohort, full_spec)
    reduced_rows = aggregate_centralized(plan, cohort, reduced_spec)
    full = glm.fit(glm.pooled_design(full_rows, full_spec))
    reduced = glm.fit(glm.pooled_design(reduced_rows, reduced_spec))
    res = glm.likelihood_ratio_test(full, reduced)
    # log-likelihoods recomputed by plain python from the pooled rows
    # the baseline column of a pooled row is its pool size
    ll_full = bernoulli_loglik([(r.y, (r.size_g, *r.term_values), r.offset) for r in full_rows], full.coefficients)
    ll_red = bernoulli_loglik([(r.y, (r.size_g, *r.term_values), r.offset) for r in reduced_rows], reduced.coefficients)
    stat_err = abs(res.statistic - 2 * (ll_full - ll_red))
    same = glm.likelihood_ratio_test(full, full)
    ok = stat_err <= 1e-8 and same.p_value == 1.0 and res.df == 2
    report(8, ok, f"statistic {res.statistic:.6f} (df {res.df}), error vs 2*dloglik {stat_err:.1e}, identical models p={same.p_value}")
    assert ok
