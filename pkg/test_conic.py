import numpy as np
import pytest

from conic import (AffineRows, ConeSpec, ConicBuilder, ConicStatus, MatrixExpr, VariableLayout,
                   check_cone_membership, smat, solve_conic, svec, svec_size)
from errors import UnknownSymbol
from qp import QpProblem, solve_qp


def test_svec_preserves_inner_product(rng):
    a = rng.standard_normal((4, 4))
    b = rng.standard_normal((4, 4))
    a, b = a + a.T, b + b.T
    assert svec(a).shape == (svec_size(4),)
    assert svec(a) @ svec(b) == pytest.approx(np.sum(a * b))
    np.testing.assert_allclose(smat(svec(a), 4), a)


def test_cone_spec_validation():
    with pytest.raises(ValueError):
        ConeSpec(soc_dims=(1,))
    assert ConeSpec(zero_dim=1, nonneg_dim=2, soc_dims=(3,), psd_dims=(2,)).total_dim == 9


def test_layout_unknown_symbol():
    layout = VariableLayout()
    layout.add("x", 3)
    assert layout.span("x") == slice(0, 3)
    with pytest.raises(UnknownSymbol):
        layout.span("rho")
    with pytest.raises(ValueError):
        layout.add("x", 1)


def test_linear_program():
    b = ConicBuilder()
    x = b.variable("x", 2, nonneg=True)
    b.minimize(x, [1.0, 2.0])
    row = AffineRows(1)
    row.add_const(0, -1.0)
    row.add_terms([0, 0], x, 1.0)
    b.nonneg(row)
    problem = b.build()
    sol = solve_conic(problem)
    assert sol.status is ConicStatus.OPTIMAL
    assert sol.primal_obj == pytest.approx(1.0, abs=1e-5)
    np.testing.assert_allclose(sol.value("x"), [1.0, 0.0], atol=1e-4)
    assert check_cone_membership(problem, sol.slack, tol=1e-5)


def test_second_order_cone():
    b = ConicBuilder()
    t = b.variable("t", 1)
    b.minimize(t, 1.0)
    cone = AffineRows(3)
    cone.add_terms(0, t, 1.0)
    cone.const[1:] = [3.0, 4.0]
    b.soc(cone)
    sol = solve_conic(b.build())
    assert sol.status is ConicStatus.OPTIMAL
    assert sol.value("t")[0] == pytest.approx(5.0, abs=1e-5)


def test_smallest_eigenvalue_sdp():
    b = ConicBuilder()
    tau = b.variable("tau", 1)
    b.maximize(tau)
    M = MatrixExpr(2)
    M.const_block(0, 0, np.diag([1.0, 2.0]))
    M.term([0, 1], [0, 1], tau, -1.0)
    b.psd(M)
    problem = b.build()
    sol = solve_conic(problem)
    assert sol.status is ConicStatus.OPTIMAL
    assert sol.value("tau")[0] == pytest.approx(1.0, abs=1e-5)
    assert check_cone_membership(problem, sol.slack, tol=1e-6)


def _diagonal_sdp(q):
    """max sum r s.t. diag(q) - diag(r) is PSD, r >= 0; the optimum is r = q."""
    n = q.shape[0]
    b = ConicBuilder()
    r = b.variable("r", n, nonneg=True)
    b.maximize(r, 1.0)
    M = MatrixExpr(n)
    M.const_block(0, 0, np.diag(q))
    M.term(np.arange(n), np.arange(n), r, -1.0)
    b.psd(M)
    return solve_conic(b.build())


def test_diagonal_sdp_closed_form(rng):
    for _ in range(5):
        q = rng.uniform(0.5, 3.0, 3)
        sol = _diagonal_sdp(q)
        assert sol.usable(1e-6)
        assert -sol.primal_obj == pytest.approx(q.sum(), abs=1e-5 * (1.0 + q.sum()))


@pytest.mark.slow
def test_diagonal_sdp_recovers_each_entry(rng):
    for k in range(20):
        q = rng.uniform(0.5, 3.0, 2 + k % 5)
        sol = _diagonal_sdp(q)
        assert sol.usable(1e-6)
        np.testing.assert_allclose(sol.value("r"), q, atol=1e-5)


def test_infeasible_detected():
    b = ConicBuilder()
    x = b.variable("x", 1)
    b.minimize(x, 1.0)
    rows = AffineRows(2)
    rows.add_const(0, -1.0)
    rows.add_terms([0, 1], [x[0], x[0]], [1.0, -1.0])
    b.nonneg(rows)
    sol = solve_conic(b.build())
    assert sol.status is ConicStatus.INFEASIBLE
    assert not sol.usable(1e-6)


def test_unbounded_detected():
    b = ConicBuilder()
    x = b.variable("x", 1, nonneg=True)
    b.minimize(x, -1.0)
    sol = solve_conic(b.build())
    assert sol.status is ConicStatus.UNBOUNDED


def _qp_as_socp(H, q, G, g):
    """min 1/2 z'Hz + q'z s.t. Gz <= g via ||L'z||^2 <= theta in a rotated cone."""
    n = q.shape[0]
    L = np.linalg.cholesky(H)
    b = ConicBuilder()
    z = b.variable("z", n)
    theta = b.variable("theta", 1)
    b.minimize(theta, 0.5)
    b.minimize(z, q)
    rows = AffineRows(g.shape[0])
    rows.const = g.copy()
    rr, cc = np.nonzero(G)
    rows.add_terms(rr, z[cc], -G[rr, cc])
    b.nonneg(rows)
    epi = AffineRows(n + 2)
    epi.const[0], epi.const[1] = 0.5, -0.5
    epi.add_terms([0, 1], theta[0], 0.5)
    rr, cc = np.nonzero(L.T)
    epi.add_terms(2 + rr, z[cc], L.T[rr, cc])
    b.soc(epi)
    return b.build()


@pytest.mark.slow
def test_conic_and_qp_solvers_agree(rng):
    for _ in range(100):
        n, m = 4, 6
        C = rng.standard_normal((n, n))
        H = C.T @ C + 0.1 * np.eye(n)
        q = rng.standard_normal(n)
        G = rng.standard_normal((m, n))
        g = rng.uniform(0.5, 1.5, m)
        qp = solve_qp(QpProblem(hessian=H, linear=q, ineq_matrix=G, ineq_rhs=g))
        sol = solve_conic(_qp_as_socp(H, q, G, g))
        assert sol.usable(1e-6)
        assert sol.primal_obj == pytest.approx(qp.obj, abs=1e-5 * (1.0 + abs(qp.obj)))
