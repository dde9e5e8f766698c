import numpy as np
import pytest

from oraclebundle import bundle
from oraclebundle.bundle import DescentTestError, SolverParams
from oraclebundle.model import (
    AgentOracle,
    ConfigurationError,
    PolyhedralFunction,
    QueryResult,
)


class QuadraticOracle(AgentOracle):
    """f(x) = ||x - center||^2, analytic oracle."""

    def __init__(self, center):
        self.center = np.asarray(center, dtype=float)
        self.dim = self.center.shape[0]

    def query(self, xi):
        d = np.asarray(xi, dtype=float) - self.center
        return QueryResult(float(d @ d), 2.0 * d)


class AbsOracle(AgentOracle):
    dim = 1

    def query(self, xi):
        x = float(np.asarray(xi)[0])
        return QueryResult(abs(x), np.array([1.0 if x >= 0 else -1.0]))


def box_g(n, lo, hi, c=None):
    return PolyhedralFunction(n=n, c=np.zeros(n) if c is None else np.asarray(c),
                              d=0.0, lower=np.full(n, float(lo)),
                              upper=np.full(n, float(hi)))


class TestParams:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            SolverParams(eta=0.0)
        with pytest.raises(ConfigurationError):
            SolverParams(eps_abs=-1.0)
        with pytest.raises(ConfigurationError):
            SolverParams(memory=1)
        with pytest.raises(ConfigurationError):
            SolverParams(rho_override=-2.0)


class TestDescentTest:
    def test_accept_and_reject(self):
        assert bundle.descent_test(10.0, 9.0, 2.0, 0.5)        # 1.0 >= 1.0
        assert not bundle.descent_test(10.0, 9.9, 2.0, 0.5)    # 0.1 < 1.0
        assert bundle.descent_test(10.0, 9.0, 0.0, 0.5)        # zero prediction

    def test_negative_delta_raises(self):
        with pytest.raises(DescentTestError):
            bundle.descent_test(1.0, 0.5, -1e-3, 0.5)

    def test_tiny_negative_delta_tolerated(self):
        assert bundle.descent_test(1.0, 0.5, -1e-9, 0.5)


class TestStopping:
    def test_gap_abs(self):
        p = SolverParams(eps_abs=1e-3, eps_rel=1e-2)
        assert bundle.check_stop(5.0, 5.0 - 1e-4, p) == "gap_abs"

    def test_gap_rel_needs_same_sign(self):
        p = SolverParams(eps_abs=1e-6, eps_rel=1e-2)
        assert bundle.check_stop(-100.0, -100.5, p) == "gap_rel"
        assert bundle.check_stop(0.5, -0.5, p) == "none"

    def test_no_bound_no_stop(self):
        p = SolverParams()
        assert bundle.check_stop(1.0, -np.inf, p) == "none"


class TestDiscoveryRho:
    def test_geomean_of_recent(self):
        lams = [1e-9, 4.0, 1.0]  # first is below lambda_min and skipped
        rho = bundle.discovery_rho(lams, window=5)
        assert rho == pytest.approx(1.0 / 2.0)

    def test_window(self):
        rho = bundle.discovery_rho([100.0, 1.0, 1.0], window=2)
        assert rho == pytest.approx(1.0)

    def test_no_valid_duals(self):
        assert bundle.discovery_rho([0.0]) == 1.0


class TestToyProblems:
    def test_quadratic_on_shifted_box(self):
        # min (x-0)^2 with x in [1, 2]: optimum at x = 1, h* = 1
        res = bundle.solve(box_g(1, 1.0, 2.0), [QuadraticOracle([0.0])],
                           SolverParams(precondition=False, eps_abs=1e-4,
                                        eps_rel=1e-4))
        assert res.status in ("gap_abs", "gap_rel")
        assert res.h_best == pytest.approx(1.0, abs=5e-3)

    def test_abs_value(self):
        res = bundle.solve(box_g(1, -2.0, 2.0), [AbsOracle()],
                           SolverParams(precondition=False))
        assert res.h_best == pytest.approx(0.0, abs=2e-3)
        assert res.L_best <= res.h_best + 1e-9

    def test_consensus_quadratics(self):
        # x1 = x2 (through g), f = (x1+1)^2 + (x2-1)^2: optimum 2 at x = 0
        g = PolyhedralFunction(
            n=2, c=np.zeros(2), d=0.0,
            A_eq=[[1.0, -1.0]], b_eq=[0.0],
            lower=np.full(2, -5.0), upper=np.full(2, 5.0),
        )
        res = bundle.solve(g, [QuadraticOracle([-1.0]), QuadraticOracle([1.0])],
                           SolverParams(precondition=False, eps_abs=1e-4))
        assert res.h_best == pytest.approx(2.0, abs=5e-3)
        np.testing.assert_allclose(res.x_best, [0.0, 0.0], atol=0.05)

    def test_trace_invariants(self):
        res = bundle.solve(box_g(2, -3.0, 3.0), [QuadraticOracle([1.0, -1.0])],
                           SolverParams(precondition=False))
        hs = [r.h_xk for r in res.trace]
        assert all(b <= a + 1e-12 for a, b in zip(hs, hs[1:]))
        Ls = [r.L_best for r in res.trace if np.isfinite(r.L_best)]
        assert all(b >= a - 2e-8 for a, b in zip(Ls, Ls[1:]))
        assert all(r.delta >= -1e-8 * (1 + abs(r.h_xk)) for r in res.trace)

    def test_rho_override_skips_discovery(self):
        res = bundle.solve(box_g(1, -2.0, 2.0), [AbsOracle()],
                           SolverParams(precondition=False, rho_override=2.0))
        assert all(r.phase == "prox" for r in res.trace)
        assert all(r.rho_used in (2.0, 0.0) for r in res.trace)

    def test_finite_memory_still_converges(self):
        res = bundle.solve(box_g(2, -3.0, 3.0),
                           [QuadraticOracle([1.0, -1.0])],
                           SolverParams(precondition=False, memory=3))
        assert res.status in ("gap_abs", "gap_rel")

    def test_parallel_agents_match_serial(self):
        agents = [QuadraticOracle([-1.0]), QuadraticOracle([1.0])]
        g = box_g(2, -5.0, 5.0)
        r1 = bundle.solve(g, agents, SolverParams(precondition=False))
        r2 = bundle.solve(g, agents, SolverParams(precondition=False,
                                                  parallel_agents=2))
        assert r1.h_best == pytest.approx(r2.h_best, abs=1e-12)
        assert len(r1.trace) == len(r2.trace)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            bundle.solve(box_g(2, -1.0, 1.0), [AbsOracle()],
                         SolverParams(precondition=False))

    def test_bad_start_rejected(self):
        with pytest.raises(ConfigurationError):
            bundle.solve(box_g(1, -1.0, 1.0), [AbsOracle()],
                         SolverParams(precondition=False), x0=np.array([5.0]))

    def test_max_iters_status(self):
        res = bundle.solve(box_g(1, -2.0, 2.0), [AbsOracle()],
                           SolverParams(precondition=False, max_iters=2,
                                        eps_abs=1e-12, eps_rel=1e-12),
                           x0=np.array([1.7]))
        assert res.status == "max_iters"

    def test_dual_estimate_on_linear_toy(self):
        # f(x) = x, g = -2x on [0, 1]: x* = 1 and q* = f'(x*) = 1

        class LinearOracle(AgentOracle):
            dim = 1

            def query(self, xi):
                return QueryResult(float(xi[0]), np.array([1.0]))

        g = PolyhedralFunction(n=1, c=np.array([-2.0]), d=0.0,
                               lower=np.zeros(1), upper=np.ones(1))
        res = bundle.solve(g, [LinearOracle()], SolverParams(precondition=False))
        assert res.q_star[0] == pytest.approx(1.0, abs=1e-5)
