import numpy as np
import pytest

from bnb import enumerate_oracle, solve_miqp
from cache_handler import ParameterCache
from core_linalg import min_eigenvalue, psd_tolerance
from errors import ConvexityViolation, DegenerateInput, InfeasibleProblem
from generators import GenSpec, generate
from model import (Instance, SolverPoint, inequality_rows, objective, objective_lifted,
                   objective_perspective)
from qp import QpStatus
from settings_manager import SolveSettings
from reformulate import (CutPool, LiftParams, PerspectiveCut, PerspectiveParams, QcrParams,
                         bound_compare, build_lcr, build_pc, build_plain, build_qcr, improvement,
                         is_feasible_rho, lcr_params, lift_params_to_rho, recover_lift_params,
                         rho_from_sdp_q, rho_sdp_simple, rho_uniform_mineig, separate_perspective_cut,
                         select_rho, solve_sdp_a, solve_sdp_l, solve_sdp_q, solve_socp_relax,
                         split_paired_rows)


def _diagonal_instance(q):
    n = len(q)
    return Instance(Q=np.diag(q), c=-np.ones(n), h=0.1 * np.ones(n), A=np.zeros((0, n)), B=np.zeros((0, n)),
                    d=np.zeros(0), lb=np.full(n, 0.2), ub=np.full(n, 2.0), cardinality=1)


def _root_bound(model):
    rel = model.relax()
    assert rel.status is QpStatus.OPTIMAL
    return rel.bound


def _close(a, b, rel=1e-5):
    return abs(a - b) <= rel * (1.0 + abs(b))


# --- perspective cuts ---

def test_separation_returns_most_violated_cut():
    cut = separate_perspective_cut(1.0, 0.5, 0.5, 0.1, 3.0, phi_i=0.0, index=2)
    assert cut is not None and cut.index == 2
    assert cut.xbar == pytest.approx(1.0)
    assert cut.violation(0.5, 0.5, 0.0) > 0.0


def test_separation_skips_satisfied_and_degenerate_points():
    assert separate_perspective_cut(1.0, 0.5, 0.5, 0.1, 3.0, phi_i=0.5) is None
    assert separate_perspective_cut(0.0, 0.5, 0.5, 0.1, 3.0) is None
    assert separate_perspective_cut(1.0, 0.0, 0.0, 0.1, 3.0) is None


def test_separation_clamps_tangent_point():
    cut = separate_perspective_cut(1.0, 0.9, 0.1, 0.1, 3.0)
    assert cut.xbar == pytest.approx(3.0)


def test_cut_pool_deduplicates(small_mv):
    model = build_pc(small_mv, PerspectiveParams(rho=np.zeros(small_mv.n)))
    pool = CutPool(model.layout)
    assert pool.add(PerspectiveCut(index=0, xbar=0.3))
    assert not pool.add(PerspectiveCut(index=0, xbar=0.3 + 1e-12))
    assert pool.add(PerspectiveCut(index=1, xbar=0.3))
    G, g = pool.rows()
    assert G.shape == (2, model.num_vars) and len(pool) == 2
    np.testing.assert_array_equal(g, 0.0)


def test_pc_model_seeds_cuts_only_for_positive_rho(small_mv):
    rho = np.zeros(small_mv.n)
    rho[1] = 0.2
    model = build_pc(small_mv, PerspectiveParams(rho=rho))
    assert sorted((c.index, c.xbar) for c in model.cuts) == [(1, 0.05), (1, 0.6)]


# --- models ---

def test_split_paired_rows_detects_budget(small_mv):
    A, B, d = inequality_rows(small_mv)
    ineq, eq, partner = split_paired_rows(A, B, d)
    assert eq.tolist() == [0]
    assert partner[0] == 1 and partner[1] == 0
    assert ineq.tolist() == [2, 3]


def test_plain_relaxation_example_one(example1):
    assert _root_bound(build_plain(example1)) == pytest.approx(-4.0, abs=1e-6)


def test_fixing_zeroes_companions(small_mv):
    model = build_pc(small_mv, PerspectiveParams(rho=np.full(small_mv.n, 0.1)))
    fixed = model.fixing([0], [1])
    n = small_mv.n
    assert fixed == {n + 0: 0.0, 0: 0.0, 2 * n + 0: 0.0, n + 1: 1.0}


def test_zero_lift_reduces_to_plain(small_mv):
    zero = LiftParams(u=np.zeros(small_mv.n), v=np.zeros(small_mv.n))
    assert _root_bound(build_lcr(small_mv, zero)) == pytest.approx(_root_bound(build_plain(small_mv)), abs=1e-7)


def test_lcr_objective_matches_on_binary_points(small_mv, rng):
    n = small_mv.n
    lp = LiftParams(u=0.01 * rng.standard_normal(n), v=1.0 + rng.random(n))
    model = build_lcr(small_mv, lp)
    for _ in range(100):
        y = (rng.random(n) < 0.5).astype(float)
        x = y * rng.uniform(small_mv.lb, small_mv.ub)
        f = objective(small_mv, SolverPoint(x=x, y=y))
        assert model.objective_value(np.concatenate([x, y])) == pytest.approx(f, abs=1e-9 * (1.0 + abs(f)))


def test_indefinite_lift_rejected(small_mv):
    bad = LiftParams(u=np.zeros(small_mv.n), v=-np.ones(small_mv.n))
    with pytest.raises(ConvexityViolation):
        build_lcr(small_mv, bad)


# --- rho and lift parameters ---

def test_uniform_min_eigenvalue_rho():
    inst = _diagonal_instance([1.0, 3.0])
    np.testing.assert_allclose(rho_uniform_mineig(inst).rho, [1.0, 1.0], atol=1e-10)
    assert is_feasible_rho(inst, PerspectiveParams(rho=np.array([1.0, 3.0])))
    assert not is_feasible_rho(inst, PerspectiveParams(rho=np.array([1.5, 1.0])))
    assert not is_feasible_rho(inst, PerspectiveParams(rho=np.array([-1.0, 0.0])))


def test_diagonal_sdp_rho_recovers_diagonal(conic_settings):
    q = [0.5, 1.5, 2.5]
    rho = rho_sdp_simple(_diagonal_instance(q), conic_settings).rho
    np.testing.assert_allclose(rho, q, atol=1e-4)


def test_sdp_rho_dominates_uniform(small_mv, conic_settings):
    rho = rho_sdp_simple(small_mv, conic_settings)
    assert is_feasible_rho(small_mv, rho)
    assert rho.rho.sum() >= rho_uniform_mineig(small_mv).rho.sum() - 1e-5


def test_recover_lift_params():
    lp = recover_lift_params(PerspectiveParams(rho=np.array([1.0, 2.0])), [2.0, 0.0], [1.0, 0.0])
    np.testing.assert_allclose(lp.u, [-4.0, 0.0])
    np.testing.assert_allclose(lp.v, [4.0, 0.0])
    tiny = recover_lift_params(PerspectiveParams(rho=np.array([1.0])), [1e-12], [1e-11])
    np.testing.assert_array_equal(tiny.u, [0.0])


def test_recover_rejects_invalid_points():
    rho = PerspectiveParams(rho=np.array([1.0]))
    with pytest.raises(DegenerateInput):
        recover_lift_params(rho, [np.nan], [0.5])
    with pytest.raises(DegenerateInput):
        recover_lift_params(rho, [0.1], [-0.5])


def test_lift_to_rho():
    rho = lift_params_to_rho(LiftParams(u=np.array([-4.0, 1.0]), v=np.array([4.0, 0.0])))
    np.testing.assert_allclose(rho.rho, [1.0, 0.0])


def test_zero_rho_relaxation_equals_plain(small_mv, conic_settings):
    socp = solve_socp_relax(small_mv, PerspectiveParams(rho=np.zeros(small_mv.n)), conic_settings)
    assert _close(socp.value, _root_bound(build_plain(small_mv)))


def test_sdp_l_bound_equals_socp_at_its_rho(small_mv, conic_settings):
    result = solve_sdp_l(small_mv, conic_settings)
    assert not result.fallback
    assert is_feasible_rho(small_mv, result.rho)
    socp = solve_socp_relax(small_mv, result.rho, conic_settings)
    assert _close(result.tau, socp.value, rel=1e-4)


@pytest.mark.parametrize("fixture", ["small_mv", "small_ssp", "example1"])
def test_lcr_bound_equals_perspective_bound(fixture, request, conic_settings):
    inst = request.getfixturevalue(fixture)
    params = lcr_params(inst, conic_settings)
    bound_lcr = _root_bound(build_lcr(inst, params.lift))
    assert _close(bound_lcr, params.socp_value)


def test_recovered_rho_bounds_lift_pointwise(small_mv, conic_settings, rng):
    params = lcr_params(small_mv, conic_settings)
    raw = recover_lift_params(params.rho, params.x_star, params.y_star, small_mv.lb, small_mv.ub)
    rho_bar = lift_params_to_rho(raw)
    assert np.all(rho_bar.rho >= -1e-8)
    W = small_mv.Q - np.diag(rho_bar.rho)
    assert min_eigenvalue(W, method="lapack") >= -psd_tolerance(small_mv.Q)
    n = small_mv.n
    for _ in range(1000):
        y = rng.uniform(1e-3, 1.0, n)
        x = y * rng.uniform(small_mv.lb, small_mv.ub)
        p = SolverPoint(x=x, y=y)
        gap = objective_perspective(small_mv, p, rho_bar.rho) - objective_lifted(small_mv, p, raw.u, raw.v)
        assert gap >= -1e-8


def test_bound_chain_against_oracle(small_mv, conic_settings):
    _, opt = enumerate_oracle(small_mv)
    report = bound_compare(small_mv, conic_settings, opt=opt)
    assert report.failures == {}
    assert report.bound_plain <= report.bound_lcr + 1e-6
    assert report.bound_lcr <= opt + 1e-6
    assert report.tau_sdp_l == pytest.approx(report.bound_pr, abs=1e-4 * (1.0 + abs(report.bound_pr)))


def test_zero_rho_bound_report(small_mv, conic_settings):
    report = bound_compare(small_mv, conic_settings, rho_method="zero")
    assert _close(report.bound_pr, report.bound_plain)


def test_select_rho_rejects_unknown(small_mv):
    with pytest.raises(ValueError):
        select_rho(small_mv, "magic")


def test_pipeline_uses_cache(small_mv, conic_settings):
    cache = ParameterCache()
    first = lcr_params(small_mv, conic_settings, cache=cache)
    second = lcr_params(small_mv, conic_settings, cache=cache)
    assert first is second
    assert cache.hits == 1


def test_improvement_ratio():
    assert improvement(-1.0, -2.0, 0.0) == pytest.approx(0.5)
    assert improvement(None, -2.0, 0.0) is None
    assert improvement(-1.0, -1.0, -1.0) is None


# --- SDP_q / SDP_a ---

@pytest.mark.slow
def test_sdp_q_matches_sdp_l(small_mv, conic_settings):
    tau_l = solve_sdp_l(small_mv, conic_settings).tau
    lp, tau_q = solve_sdp_q(small_mv, conic_settings)
    assert tau_q == pytest.approx(tau_l, abs=1e-4 * (1.0 + abs(tau_l)))
    rho, _, _ = rho_from_sdp_q(small_mv, conic_settings)
    assert is_feasible_rho(small_mv, rho)


@pytest.mark.slow
def test_sdp_a_without_penalties_matches_sdp_q(small_mv, conic_settings):
    _, tau_q = solve_sdp_q(small_mv, conic_settings)
    params, tau_a = solve_sdp_a(small_mv, conic_settings, fix_t_zero=True)
    assert tau_a == pytest.approx(tau_q, abs=1e-4 * (1.0 + abs(tau_q)))
    np.testing.assert_allclose(params.t, 0.0, atol=1e-6)


@pytest.mark.slow
def test_qcr_bound_dominates_lcr_on_sections(sectioned_mv, conic_settings):
    _, opt = enumerate_oracle(sectioned_mv)
    report = bound_compare(sectioned_mv, conic_settings, opt=opt, qcr=True)
    assert report.failures == {}
    assert report.bound_qcr >= report.bound_lcr - 1e-4 * (1.0 + abs(report.bound_lcr))
    assert report.bound_qcr <= opt + 1e-5 * (1.0 + abs(opt))


def test_qcr_zero_penalties_reduce_to_lcr(sectioned_mv):
    _, _, d = inequality_rows(sectioned_mv, include_equality=False)
    n = sectioned_mv.n
    params = QcrParams(u=np.zeros(n), v=np.zeros(n), w=np.zeros(sectioned_mv.equality.rows), t=np.zeros(d.shape[0]))
    assert _root_bound(build_qcr(sectioned_mv, params)) == pytest.approx(
        _root_bound(build_plain(sectioned_mv)), abs=1e-6)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_bound_equality_sweep(seed, conic_settings):
    family = "mv" if seed % 2 else "ssp"
    inst = generate(GenSpec(family=family, n=6 + seed % 4, K=3, seed=100 + seed))
    _, opt = enumerate_oracle(inst)
    report = bound_compare(inst, conic_settings, opt=opt)
    assert report.failures == {}
    assert _close(report.bound_lcr, report.bound_pr)
    assert report.bound_plain <= report.bound_lcr + 1e-6
    assert report.bound_lcr <= opt + 1e-6 * (1.0 + abs(opt))


# --- gradient, cut and cut-loop invariants ---

@pytest.mark.parametrize("fixture", ["small_mv", "small_ssp", "example1"])
def test_tangent_lift_matches_perspective_gradient(fixture, request, conic_settings):
    inst = request.getfixturevalue(fixture)
    params = lcr_params(inst, conic_settings)
    rho = params.rho.rho
    x, y = params.x_star, params.y_star
    lp = recover_lift_params(params.rho, x, y)
    on = y > 1e-6

    grad_x_lift = 2.0 * inst.Q @ x + inst.c + lp.u * y - lp.u
    grad_y_lift = inst.h + lp.u * x + 2.0 * lp.v * y - lp.v
    safe_y = np.where(on, y, 1.0)
    grad_x_persp = 2.0 * (inst.Q - np.diag(rho)) @ x + inst.c + 2.0 * rho * x / safe_y
    grad_y_persp = inst.h - rho * x ** 2 / safe_y ** 2

    for lift, persp in ((grad_x_lift, grad_x_persp), (grad_y_lift, grad_y_persp)):
        np.testing.assert_allclose(lift[on], persp[on], atol=1e-6 * (1.0 + np.abs(persp[on]).max(initial=0.0)))


def test_cut_envelope_is_tight_at_unit_y(rng):
    a, b = 0.2, 3.0
    for x in rng.uniform(a, b, 200):
        cuts = [PerspectiveCut(index=0, xbar=xbar) for xbar in (a, x, b)]
        # violation + phi is the cut's right-hand side 2 xbar x - xbar^2 y
        envelope = max(c.violation(x, 1.0, 0.0) for c in cuts)
        assert envelope == pytest.approx(x * x, abs=1e-9)
        assert all(c.violation(x, 1.0, 0.0) <= x * x + 1e-12 for c in cuts)


def test_separation_never_cuts_nonpositive_rho():
    for rho in (0.0, -1e-12, -2.0):
        assert separate_perspective_cut(rho, 1.0, 0.5, 0.1, 3.0, phi_i=-5.0) is None


@pytest.mark.parametrize("fixture", ["small_mv", "small_ssp"])
def test_cut_rounds_never_lower_relaxation(fixture, request, conic_settings):
    inst = request.getfixturevalue(fixture)
    model = build_pc(inst, rho_sdp_simple(inst, conic_settings))
    previous = None
    for _ in range(10):
        rel = model.relax()
        assert rel.status is QpStatus.OPTIMAL
        if previous is not None:
            assert rel.bound >= previous - 1e-7 * (1.0 + abs(previous))
        previous = rel.bound
        if not model.separate(rel.z, ctol=1e-6, ytol=1e-9):
            break


def test_socp_reports_infeasible_instance(conic_settings):
    inst = generate(GenSpec(family="mv", n=4, K=1, seed=5))
    rho = rho_uniform_mineig(inst)
    with pytest.raises(InfeasibleProblem):
        solve_socp_relax(inst, rho, conic_settings)
    report = bound_compare(inst, conic_settings)
    assert report.bound_plain == np.inf
    assert report.bound_lcr == np.inf and report.bound_pr == np.inf


# --- full-size checks ---

@pytest.mark.slow
def test_zero_lift_holds_across_instances():
    rng = np.random.default_rng(7)
    for seed in range(20):
        family = "mv" if seed % 2 else "ssp"
        inst = generate(GenSpec(family=family, n=5 + seed % 4, K=3, seed=300 + seed))
        n = inst.n
        u, v = rng.standard_normal(n), rng.random(n)
        for _ in range(50):
            y = (rng.random(n) < 0.5).astype(float)
            x = y * rng.uniform(inst.lb, inst.ub)
            p = SolverPoint(x=x, y=y)
            f = objective(inst, p)
            assert objective_lifted(inst, p, u, v) == pytest.approx(f, abs=1e-9 * (1.0 + abs(f)))


@pytest.mark.slow
def test_recovered_rho_bounds_lift_on_many_points(small_mv, conic_settings):
    rng = np.random.default_rng(11)
    params = lcr_params(small_mv, conic_settings)
    raw = recover_lift_params(params.rho, params.x_star, params.y_star, small_mv.lb, small_mv.ub)
    rho_bar = lift_params_to_rho(raw)
    n = small_mv.n
    for _ in range(10_000):
        y = rng.uniform(1e-3, 1.0, n)
        x = y * rng.uniform(small_mv.lb, small_mv.ub)
        p = SolverPoint(x=x, y=y)
        gap = objective_perspective(small_mv, p, rho_bar.rho) - objective_lifted(small_mv, p, raw.u, raw.v)
        assert gap >= -1e-8


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(50))
def test_bound_equality_full_sweep(seed, conic_settings):
    family = "mv" if seed % 2 else "ssp"
    inst = generate(GenSpec(family=family, n=6 + seed % 10, K=3, seed=500 + seed))
    report = bound_compare(inst, conic_settings)
    if report.bound_plain == np.inf:
        return
    assert report.failures == {}
    assert _close(report.bound_lcr, report.bound_pr, rel=1e-4)
    assert report.bound_plain <= report.bound_lcr + 1e-6 * (1.0 + abs(report.bound_lcr))


@pytest.mark.slow
def test_qcr_improves_on_lcr_for_sectioned_portfolios(conic_settings):
    ratios = []
    for seed in range(10):
        inst = generate(GenSpec(family="mv", n=30, sections=10, seed=700 + seed))
        opt = solve_miqp(build_plain(inst), SolveSettings(rel_gap=1e-6))[1]
        report = bound_compare(inst, conic_settings, opt=opt, qcr=True)
        assert report.failures == {}
        assert report.bound_qcr >= report.bound_lcr - 1e-4 * (1.0 + abs(report.bound_lcr))
        ratio = improvement(report.bound_qcr, report.bound_lcr, opt)
        if ratio is not None:
            ratios.append(ratio)
    assert ratios
    assert np.mean(ratios) > 0.0
