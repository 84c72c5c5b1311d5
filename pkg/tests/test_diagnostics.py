import numpy as np
import pytest
from hypothesis import given, strategies as st

from pdmm.diagnostics import (RateLedger, anchor_norms, averaging_certificate, build_certificate,
                              cyclic_gap_report, eval_augmented_pd_lagrangian, eval_p_function,
                              eval_primal_lagrangian, hinge_certificate, lemma4_lhs, lemma5_gap,
                              lemma6_bound_track, lemma7_gap, mse, primal_residual, dual_residual,
                              sync_gap_report, telescoped_constant, theorem2_feasibility_residual)
from pdmm.engine import IterateState, PenaltyConfig, Schedule, ScheduleKind, initial_state, run, scalar_penalty
from pdmm.problem import build_averaging_problem, build_hinge_pair_problem, path_topology, ring_topology


def random_state(p, rng, scale=2.0):
    s0 = initial_state(p)
    return IterateState(tuple(rng.normal(size=v.shape) * scale for v in s0.x),
                        {k: rng.normal(size=v.shape) * scale for k, v in s0.lam.items()})


def random_penalties(p, rng, excess=True):
    prim, dual = [], []
    for con in p.constraints:
        n = con.dim
        M = rng.normal(size=(n, n))
        P = M @ M.T + 0.3 * np.eye(n)
        D = np.linalg.inv(P)
        if excess:
            E = rng.normal(size=(n, n))
            D = D + E @ E.T * 0.5
        prim.append(P)
        dual.append((D + D.T) / 2)
    return PenaltyConfig(tuple(prim), tuple(dual))


@pytest.fixture
def path5():
    return build_averaging_problem([0.3, 1.7, -0.4, 2.2, 0.9], path_topology(5))


# hand values ----------------------------------------------------------------


def test_primal_lagrangian_examples():
    p = build_averaging_problem([0.0, 2.0], path_topology(2))
    assert eval_primal_lagrangian([[0.0], [2.0]], [[0.0]], p) == 0.0
    assert eval_primal_lagrangian([[1.0], [1.0]], [[0.0]], p) == pytest.approx(1.0)
    # feasible x: dual term vanishes for any delta
    assert eval_primal_lagrangian([[1.0], [1.0]], [[5.3]], p) == pytest.approx(1.0)


def test_augmented_lagrangian_examples():
    p = build_averaging_problem([0.0, 0.0], path_topology(2))
    cfg = scalar_penalty(1, 1, p)
    assert eval_augmented_pd_lagrangian([[0.0], [0.0]], initial_state(p).lam, p, cfg) == 0.0

    h = build_hinge_pair_problem()
    lam0 = initial_state(h).lam
    for gp in (1.0, 3.0):
        cfg = scalar_penalty(gp, 1, h)
        assert eval_augmented_pd_lagrangian([[0.0], [0.0]], lam0, h, cfg) == 0.0
        # residual 1, penalty 1/2 gamma_p on top of the unpenalized value
        base = eval_augmented_pd_lagrangian([[0.5], [-0.5]], lam0, h, scalar_penalty(1e-300, 1, h))
        val = eval_augmented_pd_lagrangian([[0.5], [-0.5]], lam0, h, cfg)
        assert val - base == pytest.approx(0.5 * gp)


def test_augmented_lagrangian_at_certificate(path5):
    cert = averaging_certificate(path5)
    s = cert.as_state()
    from pdmm.diagnostics import eval_pd_lagrangian
    cfg = scalar_penalty(2, 3, path5)
    assert eval_augmented_pd_lagrangian(s.x, s.lam, path5, cfg) == pytest.approx(
        eval_pd_lagrangian(s.x, s.lam, path5), abs=1e-12)


def test_p_function_examples(path5, grid4):
    for p in (path5, grid4):
        s = averaging_certificate(p).as_state()
        assert abs(eval_p_function(s.x, s.lam, p)) <= 1e-10
        t = p.meta["t"]
        assert eval_p_function([[v] for v in t], initial_state(p).lam, p) == pytest.approx(0.0, abs=1e-12)
    h = build_hinge_pair_problem()
    for level in (-1, -0.3, 0, 1):
        s = hinge_certificate(h, level).as_state()
        assert abs(eval_p_function(s.x, s.lam, h)) <= 1e-10


def test_mse_examples():
    assert mse(np.full(4, 0.3), 0.3) == 0.0
    assert mse(np.array([0.0, 2.0]), 1.0) == 1.0
    assert mse(np.zeros(7), 0.6) == pytest.approx(0.36)
    assert mse([np.array([0.0]), np.array([2.0])], 1.0) == 1.0


def test_residuals_zero_at_certificate(grid4):
    s = averaging_certificate(grid4).as_state()
    assert primal_residual(s, grid4) <= 1e-12
    assert dual_residual(s, grid4) == 0.0


# certificates ----------------------------------------------------------------


def test_certificates_pass_kkt(grid4):
    assert averaging_certificate(grid4).violations(grid4) == []
    h = build_hinge_pair_problem()
    assert hinge_certificate(h, 0.5).violations(h) == []


def test_certificate_rejects_non_optimal_point(path5):
    x = np.zeros((5, 1))
    cert = build_certificate(path5, x, [x[i] - path5.meta["t"][i] for i in range(5)])
    assert cert.violations(path5)


# sign property and saddle inequality -----------------------------------------


@pytest.mark.parametrize("fixture", ["path", "ring", "hinge"])
def test_saddle_gap_nonnegative(fixture):
    if fixture == "hinge":
        p = build_hinge_pair_problem()
        certs = [hinge_certificate(p, lv) for lv in (-1, 0, 0.7)]
    else:
        topo = path_topology(6) if fixture == "path" else ring_topology(6)
        p = build_averaging_problem(np.linspace(-1, 2, 6), topo)
        certs = [averaging_certificate(p)]
    rng = np.random.default_rng(0)
    for cert in certs:
        assert abs(lemma4_lhs(cert.as_state(), cert, p)) <= 1e-10
        worst = min(lemma4_lhs(random_state(p, rng), cert, p) for _ in range(1000))
        assert worst >= -1e-10


@pytest.mark.parametrize("fixture", ["path", "hinge"])
def test_saddle_inequality_spot_check(fixture):
    if fixture == "hinge":
        p = build_hinge_pair_problem()
        cert = hinge_certificate(p, 0.2)
    else:
        p = build_averaging_problem([0.1, 1.5, -0.6, 0.4], path_topology(4))
        cert = averaging_certificate(p)
    cfg = scalar_penalty(1.5, 1.0, p)
    s = cert.as_state()
    mid = eval_augmented_pd_lagrangian(s.x, s.lam, p, cfg)
    rng = np.random.default_rng(2)
    checked = 0
    for _ in range(1000):
        r = random_state(p, rng, scale=0.8)
        low = eval_augmented_pd_lagrangian(s.x, r.lam, p, cfg)
        if np.isfinite(low):
            checked += 1
            assert low <= mid + 1e-9
        assert mid <= eval_augmented_pd_lagrangian(r.x, s.lam, p, cfg) + 1e-9
    assert checked >= 100


# per-step inequalities ----------------------------------------------------------


def _cases():
    rng = np.random.default_rng(21)
    p = build_averaging_problem(rng.random(9), ring_topology(9))
    return p, rng


@pytest.mark.parametrize("gp, gd", [(1, 1), (2, 1), (0.5, 3), (4, 0.25)])
def test_sync_step_slack_scalar_penalties(gp, gd, grid4):
    cfg = scalar_penalty(gp, gd, grid4)
    cert = averaging_certificate(grid4)
    traj = run(initial_state(grid4, [[v] for v in grid4.meta["t"]]), grid4, cfg, Schedule(), 60)
    rep = sync_gap_report(traj, cert, grid4, cfg)
    assert rep.ok, rep.min_slack


def test_sync_step_slack_matrix_penalties():
    p, rng = _cases()
    cert = averaging_certificate(p)
    for _ in range(10):
        cfg = random_penalties(p, rng)
        traj = run(random_state(p, rng), p, cfg, Schedule(), 15)
        assert sync_gap_report(traj, cert, p, cfg).ok


def test_sync_step_slack_hinge():
    h = build_hinge_pair_problem()
    cert = hinge_certificate(h, 0.0)
    rng = np.random.default_rng(4)
    for gp, gd in [(1, 1), (1, 2), (3, 0.5)]:
        cfg = scalar_penalty(gp, gd, h)
        traj = run(random_state(h, rng), h, cfg, Schedule(), 40)
        assert sync_gap_report(traj, cert, h, cfg).ok


def test_segment_slack_cyclic():
    p, rng = _cases()
    cert = averaging_certificate(p)
    for _ in range(5):
        for cfg in (scalar_penalty(1, 1, p), scalar_penalty(2, 2, p), random_penalties(p, rng)):
            traj = run(random_state(p, rng), p, cfg, Schedule(ScheduleKind.CYCLIC), 9 * 12)
            rep = cyclic_gap_report(traj, cert, p, cfg)
            assert rep.slacks.size == 12 and rep.ok, rep.min_slack


def test_inequalities_at_certificate(path5):
    cert = averaging_certificate(path5)
    s = cert.as_state()
    cfg = scalar_penalty(2, 1, path5)
    assert lemma5_gap(s, s, cert, path5, cfg) >= -1e-12
    assert lemma7_gap(s, s, cert, path5, cfg) >= -1e-12
    assert abs(lemma4_lhs(s, cert, path5)) <= 1e-12


def test_excess_terms_vanish_with_exact_inverse(path5):
    cfg = scalar_penalty(2, 0.5, path5)
    assert all(np.all(d == 0) for d in cfg.excess_sqrt)


def test_gap_checks_require_condition(path5):
    cert = averaging_certificate(path5)
    s = cert.as_state()
    cfg = scalar_penalty(0.5, 0.5, path5)
    for fn in (lemma5_gap, lemma7_gap):
        with pytest.raises(ValueError):
            fn(s, s, cert, path5, cfg)


# boundedness and ergodic rate ---------------------------------------------------


def test_anchor_norms_bounded_by_initial_constant(grid4):
    cfg = scalar_penalty(1, 2, grid4)
    cert = averaging_certificate(grid4)
    s0 = initial_state(grid4)
    traj = run(s0, grid4, cfg, Schedule(), 300)
    track = lemma6_bound_track(traj, cert, grid4, cfg)
    assert np.all(np.isfinite(track))
    assert track.max() <= 2 * telescoped_constant(s0, cert, grid4, cfg) + 1e-12
    assert lemma6_bound_track([cert.as_state()] * 3, cert, grid4, cfg).max() == 0.0
    assert len(anchor_norms(s0, cert, grid4, cfg)) == 2 * len(grid4.topology.edges)


def test_two_node_anchor_bound():
    p = build_averaging_problem([0.0, 2.0], path_topology(2))
    cfg = scalar_penalty(1, 1, p)
    cert = averaging_certificate(p)
    s0 = initial_state(p)
    traj = run(s0, p, cfg, Schedule(), 50)
    track = lemma6_bound_track(traj, cert, p, cfg)
    assert track.max() <= track[0] + telescoped_constant(s0, cert, p, cfg) + 1e-12


@pytest.mark.parametrize("kind, segments", [(ScheduleKind.SYNCHRONOUS, False), (ScheduleKind.CYCLIC, True)])
def test_rate_ledger(kind, segments):
    p, rng = _cases()
    cert = averaging_certificate(p)
    cfg = random_penalties(p, rng)
    s0 = random_state(p, rng)
    ledger = RateLedger(s0, cert, p, cfg, segments)
    assert ledger.constant >= 0
    stride = p.node_count if segments else 1
    traj = run(s0, p, cfg, Schedule(kind), 80 * stride)
    for s in traj[stride::stride]:
        ledger.push(s)
        assert ledger.holds(), (ledger.count, ledger.scaled_gap(), ledger.constant)


def test_running_average_residual_decay(grid4):
    cfg = scalar_penalty(1, 1, grid4)
    traj = run(initial_state(grid4), grid4, cfg, Schedule(), 400)
    cert = averaging_certificate(grid4)
    ledger = RateLedger(traj[0], cert, grid4, cfg)
    worst = {}
    for k, s in enumerate(traj[1:], 1):
        ledger.push(s)
        if k in (10, 40, 160, 400):
            worst[k] = max(theorem2_feasibility_residual(ledger.average(), grid4, cfg).values())
    C = worst[10] * np.sqrt(10)
    for k, r in worst.items():
        assert r <= C / np.sqrt(k) + 1e-12
        assert k * r ** 2 <= 10 * worst[10] ** 2 + 1e-12
    assert worst[400] < worst[40] < worst[10]
    zero = theorem2_feasibility_residual(cert.as_state(), grid4, cfg)
    assert max(zero.values()) <= 1e-12


@given(seed=st.integers(0, 10_000))
def test_saddle_gap_along_random_trajectories(seed):
    rng = np.random.default_rng(seed)
    p = build_averaging_problem(rng.normal(size=4), path_topology(4))
    cfg = random_penalties(p, rng)
    cert = averaging_certificate(p)
    traj = run(random_state(p, rng), p, cfg, Schedule(ScheduleKind.RANDOM_NODE, seed), 12)
    assert min(lemma4_lhs(s, cert, p) for s in traj) >= -1e-10
