import dataclasses
import json
import math

import numpy as np
import pytest

from feiopt import admm, energy, oracle, problem
from feiopt.problem import InfeasibleInstanceError
from feiopt.scenario import load_config, paper_analog, random_instance

from conftest import device_doc, scenario_doc, server_doc

LN2 = math.log(2.0)


@pytest.fixture(scope="module")
def run_4x10():
    cfg = random_instance(21, sizes=[10, 10, 10, 10])
    return cfg, admm.run(cfg)


def grid_box(spec, step_units):
    """Every lattice point of one device's local set, in the spec's units."""
    top = min(spec.device_cap[0], spec.hi)
    g = np.arange(0.0, top + 1e-12, step_units)
    x1, x2 = np.meshgrid(g, g, indexing="ij")
    pts = np.column_stack([x1.ravel(), x2.ravel()])
    ok = (pts[:, 0] <= spec.u[0] + 1e-12) & (pts[:, 1] <= spec.u[1] + 1e-12)
    ok &= pts.sum(axis=1) <= min(spec.device_cap[0], spec.hi) + 1e-12
    ok &= pts.sum(axis=1) >= spec.lo - 1e-12
    return pts[ok]


# -- server_update -------------------------------------------------------------


def zero_cost_spec(spec):
    zeros = np.zeros(spec.size)
    return dataclasses.replace(spec, c=zeros, l=zeros)


def test_server_update_pure_projection():
    cfg = random_instance(8, sizes=[4], min_data_frac=0.5)
    spec = zero_cost_spec(admm.build_subproblems(cfg)[0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = rng.uniform(-0.5, 1.5, spec.size)
        th = rng.uniform(-0.3, 0.3, spec.size)
        x = admm.server_update(spec, w, th, 1.7)
        z2 = (w - th).reshape(-1, 2)
        ref = oracle._project_server(
            z2, np.ones_like(z2), spec.u.reshape(-1, 2), spec.device_cap, spec.lo, spec.hi
        ).reshape(-1)
        np.testing.assert_allclose(x, ref, atol=1e-10)


def test_server_update_penalty_dominant():
    cfg = random_instance(9, sizes=[3])
    spec = admm.build_subproblems(cfg)[0]
    interior = 0.25 * np.minimum(spec.u, np.repeat(spec.device_cap, 2)) + 1e-3
    interior *= min(1.0, 0.5 * spec.hi / interior.sum())
    for eta in (1e4, 1e6, 1e8):
        x = admm.server_update(spec, interior, np.zeros(spec.size), eta)
        bound = np.abs(spec.gradient(interior)).max() / eta
        assert np.max(np.abs(x - interior)) <= 1.01 * bound


def test_server_update_matches_two_dim_grid():
    doc = scenario_doc(
        [server_doc(0, [device_doc(0, cap_bits=60.0, rho=1.3, beta_bit=0.004)], data_cap_bits=60.0, compute_cap=5.0)],
        bw_ub=40.0,
        bw_lb=25.0,
        bits_per_sample=1.0,
        energy_budget=100.0,
    )
    cfg = load_config(doc)
    spec = admm.build_subproblems(cfg, scale=1.0)[0]
    w, th, eta = np.array([30.0, 10.0]), np.array([2.0, -1.0]), 0.01

    def value(x):
        x = np.atleast_2d(x)
        smooth = (spec.c * np.expm1(spec.k * x) + spec.l * x).sum(axis=1)
        return smooth + 0.5 * eta * ((x - w + th) ** 2).sum(axis=1)

    x = admm.server_update(spec, w, th, eta, check=True)
    pts = grid_box(spec, 1.0)
    vals = value(pts)
    best = vals.min()
    grad_bound = np.abs(spec.gradient(pts) + eta * (pts - w + th)).max(axis=0).sum()
    assert value(x)[0] <= best + 1e-9
    assert best - value(x)[0] <= grad_bound * 1.0


def test_server_update_empty_set_rejected():
    cfg = random_instance(1, sizes=[2])
    spec = dataclasses.replace(admm.build_subproblems(cfg)[0], lo=2.0, hi=1.0)
    with pytest.raises(InfeasibleInstanceError):
        admm.server_update(spec, np.zeros(4), np.zeros(4), 1.0)


def test_server_update_kkt_check_passes():
    cfg = random_instance(12, sizes=[5])
    spec = admm.build_subproblems(cfg)[0]
    rng = np.random.default_rng(2)
    for _ in range(20):
        w = rng.uniform(-1, 2, spec.size)
        admm.server_update(spec, w, np.zeros(spec.size), float(rng.uniform(0.01, 20)), check=True)


# -- coordinator pieces ----------------------------------------------------------


def test_project_energy_ball_interior():
    cfg = random_instance(3)
    z = np.full(2 * cfg.num_devices, 1.0)
    np.testing.assert_array_equal(admm.project_energy_ball(z, cfg), z)


def test_project_energy_ball_unit_example():
    ball = admm.EnergyBall(np.array([1.0]), np.array([LN2]), 1.0)
    assert admm.project_energy_ball(np.array([2.0]), ball)[0] == pytest.approx(1.0, abs=1e-9)


def test_project_energy_ball_bits_units():
    cfg = random_instance(4)
    caps = np.repeat([d.cap_bits for d in cfg.devices], 2)
    w = admm.project_energy_ball(caps, cfg)
    alloc_energy = energy.energy_vector(w, energy.link_arrays(cfg)).sum()
    assert abs(alloc_energy - cfg.energy_budget) <= 1e-8 * cfg.energy_budget


def test_project_energy_ball_rejects_bad_input():
    ball = admm.EnergyBall(np.ones(2), np.ones(2), 1.0)
    with pytest.raises(ValueError):
        admm.project_energy_ball(np.array([1.0, np.nan]), ball)
    with pytest.raises(ValueError):
        admm.project_energy_ball(np.ones(3), ball)


def test_dual_update_examples():
    th = np.array([0.5, -1.0])
    n = np.array([2.0, 3.0])
    np.testing.assert_array_equal(admm.dual_update(th, n, n), th)
    v = np.array([0.25, -0.75])
    np.testing.assert_array_equal(admm.dual_update(np.zeros(2), n + v, n), v)
    cur = th
    for i in range(1, 6):
        cur = admm.dual_update(cur, n + v, n)
        np.testing.assert_allclose(cur, th + i * v)
    with pytest.raises(ValueError):
        admm.dual_update(th, n, np.ones(3))


def test_residual_examples():
    n = np.array([1.0, 2.0, 3.0])
    p, d, _, _ = admm.residuals(n, n, n, np.zeros(3), 1.0)
    assert (p, d) == (0.0, 0.0)
    p, d, _, _ = admm.residuals(n + np.array([0.0, 1.0, 0.0]), n, n, np.zeros(3), 1.0)
    assert p == 1.0 and d == 0.0
    p, d, eps_p, eps_d = admm.residuals(n, n, n - 1.0, np.ones(3), 2.0, 1e-6, 1e-4)
    assert d == pytest.approx(2.0 * math.sqrt(3))
    assert eps_p == pytest.approx(1e-6 * math.sqrt(3) + 1e-4 * np.linalg.norm(n))
    assert eps_d == pytest.approx(1e-6 * math.sqrt(3) + 1e-4 * 2.0 * math.sqrt(3))


# -- full runs -----------------------------------------------------------------


def assert_feasible(res, cfg):
    assert problem.violations(res.allocation, cfg) == []
    assert res.energy <= cfg.energy_budget * (1 + 1e-6)


def test_single_device_matches_oracle():
    cfg = random_instance(0, sizes=[1])
    cfg = dataclasses.replace(cfg, energy_budget=1e6)
    res = admm.run(cfg)
    ref = oracle.solve_centralized(cfg)
    assert res.converged
    assert res.continuous_objective == pytest.approx(ref.objective, rel=1e-3)


def test_empty_budget_gives_zero_allocation():
    cfg = dataclasses.replace(random_instance(5), energy_budget=1e-12)
    res = admm.run(cfg)
    assert not res.allocation.ub_bits.any() and not res.allocation.lb_bits.any()
    mu = sum(s.compute_cap for s in cfg.servers) / cfg.num_servers
    assert res.objective == pytest.approx(mu, rel=1e-12)
    assert res.cost == 0.0


def test_four_by_ten_converges(run_4x10):
    cfg, res = run_4x10
    assert res.converged
    assert res.iterations <= 500
    assert_feasible(res, cfg)


def test_rounded_allocation_is_whole_bits(run_4x10):
    _, res = run_4x10
    vec = res.allocation.interleaved()
    np.testing.assert_array_equal(vec, np.round(vec))


def test_rounding_costs_little(run_4x10):
    _, res = run_4x10
    assert res.objective - res.continuous_objective <= 1e-3 * abs(res.continuous_objective) + 1e-6


def test_converged_iterate_close_to_oracle():
    for seed in (1, 2, 3):
        cfg = random_instance(seed)
        res = admm.run(cfg)
        ref = oracle.solve_centralized(cfg)
        last = res.history[-1]
        assert last.primal_residual <= last.eps_primal and last.dual_residual <= last.eps_dual
        assert abs(res.continuous_objective - ref.objective) <= 1e-3 * abs(ref.objective)


def test_lagrangian_does_not_increase():
    for seed in range(5):
        res = admm.run(random_instance(seed, sizes=[10, 10, 10, 10]))
        assert admm.lagrangian_increases(res.history) == []


def test_lagrangian_flags_synthetic_increase():
    states = [admm.AdmmState(i, np.zeros(1), np.zeros(1), np.zeros(1), 1.0, lagrangian=v) for i, v in enumerate([3, 2, 2.5, 1])]
    assert admm.lagrangian_increases(states) == [2]


def test_non_convergence_flagged():
    cfg = random_instance(21, sizes=[10, 10, 10, 10])
    res = admm.run(cfg, admm.AdmmOptions(max_iter=3))
    assert not res.converged
    assert res.iterations == 3
    assert any("without meeting" in w for w in res.warnings)
    assert_feasible(res, cfg)


def test_infeasible_floor_rejected_before_iterating():
    cfg = random_instance(2, min_data_frac=1.0)
    cfg = dataclasses.replace(cfg, energy_budget=1e-9)
    with pytest.raises(InfeasibleInstanceError):
        admm.run(cfg)


def test_invalid_eta():
    with pytest.raises(ValueError):
        admm.run(random_instance(0), admm.AdmmOptions(eta=0.0))


def test_cap_warning():
    doc = scenario_doc([server_doc(0, [device_doc(0)], compute_cap=0.001)], energy_budget=10.0)
    res = admm.run(load_config(doc))
    assert any("cap" in w for w in res.warnings)


def test_determinism_and_workers():
    cfg = random_instance(13, sizes=[3, 5, 2])
    a = admm.run(cfg)
    b = admm.run(cfg)
    c = admm.run(cfg, admm.AdmmOptions(workers=3))
    for other in (b, c):
        np.testing.assert_array_equal(a.allocation.interleaved(), other.allocation.interleaved())
        assert [m.to_dict() for m in a.trace] == [m.to_dict() for m in other.trace]


def test_modes_restrict_bands():
    cfg = random_instance(6)
    lb = admm.run(cfg.with_mode("lb-only")).allocation
    ub = admm.run(cfg.with_mode("ub-only")).allocation
    assert not lb.ub_bits.any()
    assert not ub.lb_bits.any()


def test_refine_reselects_training_parameters():
    cfg = paper_analog()
    res = admm.run(cfg)
    new_cfg, new_res = admm.refine(cfg, res, requirement=0.95, round_budget=50)
    # the 50-sample minibatch with 5 passes is the cheapest row meeting 95% at every size
    assert all((s.batch, s.passes) == (50, 5) for s in new_cfg.servers)
    assert_feasible(new_res, new_cfg)


# -- trace and audit -------------------------------------------------------------


def test_trace_round_trip(tmp_path, run_4x10):
    _, res = run_4x10
    path = tmp_path / "trace.jsonl"
    admm.write_trace(path, res.trace)
    back = admm.read_trace(path)
    assert [m.to_dict() for m in back] == [m.to_dict() for m in res.trace]
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"iter", "from", "to", "kind", "payload"}


def test_trace_structure(run_4x10):
    cfg, res = run_4x10
    kinds = {m.kind for m in res.trace}
    assert kinds == {"report_n", "feedback_w_theta", "device_alloc"}
    allocs = [m for m in res.trace if m.kind == "device_alloc"]
    assert len(allocs) == cfg.num_devices
    for m in allocs:
        d = int(m.receiver.split(":")[1])
        assert m.payload == {"ub_bits": [res.allocation.ub_bits[d]], "lb_bits": [res.allocation.lb_bits[d]]}


def test_audit_passes_on_runs(run_4x10):
    cfg, res = run_4x10
    report = admm.audit_trace(res.trace, cfg)
    assert report.passed, str(report)
    assert report.checked == len(res.trace)


def test_audit_rejects_channel_gain_field(run_4x10):
    cfg, res = run_4x10
    log = [m.to_dict() for m in res.trace]
    bad = dict(log[5])
    bad["payload"] = {**bad["payload"], "gain_ub": [1.0]}
    log.insert(7, bad)
    report = admm.audit_trace(log, cfg)
    assert not report.passed
    assert report.failures[0][0] == 7
    assert "message 7" in str(report) and "gain_ub" in str(report)


def test_audit_rejects_leaked_value(run_4x10):
    cfg, res = run_4x10
    log = [m.to_dict() for m in res.trace]
    leak = json.loads(json.dumps(log[0]))
    leak["payload"]["n"][0] = cfg.devices[0].gain_ub
    report = admm.audit_trace([leak], cfg)
    assert not report.passed and "private" in str(report)


def test_audit_cross_server_coverage(run_4x10):
    cfg, res = run_4x10
    for m in res.trace:
        if m.kind == "device_alloc":
            continue
        party = m.sender if m.kind == "report_n" else m.receiver
        k = int(party.split(":")[1])
        vec = m.payload["n"] if m.kind == "report_n" else m.payload["w"]
        assert len(vec) == 2 * cfg.servers[k].size
    wrong = admm.TraceMessage(1, "server:0", "coordinator", "report_n", {"n": [0.0] * (2 * cfg.servers[1].size + 2)})
    assert not admm.audit_trace([wrong], cfg).passed
    misrouted = admm.TraceMessage(1, "server:0", f"device:{cfg.servers[1].devices[0].id}", "device_alloc",
                                  {"ub_bits": [0.0], "lb_bits": [0.0]})
    assert "not served" in str(admm.audit_trace([misrouted], cfg))


@pytest.mark.parametrize(
    "msg",
    [
        {"iter": 0, "from": "coordinator", "to": "server:0", "kind": "report_n", "payload": {"n": [1.0]}},
        {"iter": 0, "from": "server:0", "to": "coordinator", "kind": "gossip", "payload": {"n": [1.0]}},
        {"iter": 0, "from": "server:0", "to": "coordinator", "kind": "report_n", "payload": {"n": ["x"]}},
        {"iter": 0, "from": "server:0", "to": "coordinator", "kind": "report_n", "payload": {"n": [1.0], "w": [1.0]}},
        {"iter": -1, "from": "server:0", "to": "coordinator", "kind": "report_n", "payload": {"n": [1.0]}},
        {"from": "server:0", "to": "coordinator", "kind": "report_n", "payload": {"n": [1.0]}},
    ],
)
def test_audit_schema_violations(msg):
    assert not admm.audit_trace([msg]).passed


def test_solve_modes_dominance():
    for seed in (15, 18):
        res = admm.solve_modes(random_instance(seed))
        assert list(res) == ["joint", "lb-only", "ub-only"]
        assert res["joint"].objective <= min(res["lb-only"].objective, res["ub-only"].objective)


def test_incumbent_only_used_when_better():
    cfg = random_instance(3)
    base = admm.run(cfg)
    worse = np.zeros(2 * cfg.num_devices)
    res = admm.run(cfg, admm.AdmmOptions(incumbents=(worse,)))
    np.testing.assert_array_equal(res.allocation.interleaved(), base.allocation.interleaved())
    infeasible = np.repeat([d.cap_bits for d in cfg.devices], 2) * 10
    res = admm.run(cfg, admm.AdmmOptions(incumbents=(infeasible,)))
    assert problem.violations(res.allocation, cfg) == []


def test_rounding_meets_pinned_floors():
    cfg = random_instance(4)
    servers = tuple(
        dataclasses.replace(s, min_data_bits=float(math.floor(problem.effective_cap(s, cfg)))) for s in cfg.servers
    )
    cfg = dataclasses.replace(cfg, servers=servers)
    res = admm.run(cfg)
    np.testing.assert_array_equal(res.allocation.server_totals(cfg), [s.min_data_bits for s in cfg.servers])
    assert res.energy <= cfg.energy_budget
