import numpy as np
import pytest

from oraclebundle import master
from oraclebundle.model import (
    ConfigurationError,
    Cut,
    Minorant,
    PolyhedralFunction,
)


def box_g(n, lo=-10.0, hi=10.0, c=None):
    return PolyhedralFunction(n=n, c=np.zeros(n) if c is None else np.asarray(c),
                              d=0.0, lower=np.full(n, lo), upper=np.full(n, hi))


def abs_minorant():
    """Model of |x| from its two extreme linearizations."""
    m = Minorant(0, 1, floor=0.0)
    m.add_cut(np.array([1.0]), 1.0, np.array([1.0]))
    m.add_cut(np.array([-1.0]), 1.0, np.array([-1.0]))
    return m


class TestLowerBound:
    def test_min_of_model(self):
        lb = master.solve_master(master.build_lower_bound([abs_minorant()], box_g(1)))
        assert lb.status == "optimal"
        assert lb.objective == pytest.approx(0.0, abs=1e-7)
        assert lb.x_tilde[0] == pytest.approx(0.0, abs=1e-6)

    def test_linear_part_of_g(self):
        # model |x|, g = 2x on [-10, 10]: minimum of |x| + 2x is at x = -10
        lb = master.solve_master(
            master.build_lower_bound([abs_minorant()], box_g(1, c=[2.0])))
        assert lb.objective == pytest.approx(10.0 - 20.0, abs=1e-6)

    def test_unbounded_model_rejected(self):
        m = Minorant(0, 1)  # no floor, no cuts
        with pytest.raises(ConfigurationError):
            master.build_lower_bound([m], box_g(1))


class TestProx:
    def test_hand_solution(self):
        # min |x| + (rho/2)(x - 2)^2 with rho = 1: optimum at x = 1
        ms = master.solve_master(
            master.build_prox([abs_minorant()], box_g(1), np.array([2.0]), 1.0))
        assert ms.status == "optimal"
        assert ms.x_tilde[0] == pytest.approx(1.0, abs=1e-6)
        assert ms.fhat_value == pytest.approx(1.0, abs=1e-6)

    def test_positive_rho_required(self):
        with pytest.raises(ConfigurationError):
            master.build_prox([abs_minorant()], box_g(1), np.array([0.0]), 0.0)

    def test_cut_duals_align_with_active_pieces(self):
        ms = master.solve_master(
            master.build_prox([abs_minorant()], box_g(1), np.array([2.0]), 1.0))
        duals = ms.cut_duals[0]
        assert duals.shape == (2,)
        # at x=1 only the +slope cut is active
        assert duals[0] == pytest.approx(1.0, abs=1e-5)
        assert duals[1] == pytest.approx(0.0, abs=1e-5)


class TestLevel:
    def test_projection_and_dual(self):
        # project x_k = 2 onto {x : model(x) <= 0.5} -> x = 0.5, lambda > 0
        ms = master.solve_master(
            master.build_level([abs_minorant()], box_g(1), np.array([2.0]), 0.5))
        assert ms.status == "optimal"
        assert ms.x_tilde[0] == pytest.approx(0.5, abs=1e-6)
        assert ms.level_dual > 1e-6

    def test_interior_level_inactive(self):
        # x_k already satisfies the level constraint: projection is x_k
        ms = master.solve_master(
            master.build_level([abs_minorant()], box_g(1), np.array([0.1]), 5.0))
        assert ms.x_tilde[0] == pytest.approx(0.1, abs=1e-6)
        assert ms.level_dual == pytest.approx(0.0, abs=1e-6)

    def test_level_prox_equivalence(self):
        mins = [abs_minorant()]
        g = box_g(1)
        ms = master.solve_master(master.build_level(mins, g, np.array([2.0]), 0.5))
        lam = ms.level_dual
        chk = master.solve_master(master.build_prox(mins, g, np.array([2.0]), 1.0 / lam))
        err = abs(chk.x_tilde[0] - ms.x_tilde[0])
        assert err <= 1e-5 * (1.0 + abs(ms.x_tilde[0]))


class TestAggregate:
    def test_aggregate_is_minorant_of_model(self):
        mins = [abs_minorant()]
        ms = master.solve_master(
            master.build_prox(mins, box_g(1), np.array([2.0]), 1.0))
        (agg,) = master.extract_aggregate_cuts(ms, mins, iteration=3)
        assert agg.origin == ("aggregate", 3)
        for x in np.linspace(-3, 3, 13):
            model = max(c(np.array([x])) for c in mins[0].all_cuts())
            model = max(model, mins[0].floor)
            assert agg(np.array([x])) <= model + 1e-7

    def test_aggregate_tight_at_x_tilde(self):
        mins = [abs_minorant()]
        ms = master.solve_master(
            master.build_prox(mins, box_g(1), np.array([2.0]), 1.0))
        (agg,) = master.extract_aggregate_cuts(ms, mins)
        assert agg(ms.x_tilde) == pytest.approx(ms.t[0], abs=1e-5)


class TestDualEstimate:
    def test_linear_agent_price(self):
        # f(x) = x (single cut with slope 1), g = -2x on [0, 1]:
        # optimum x* = 1, and the consensus dual recovers q* = 1
        m = Minorant(0, 1, floor=None if False else -100.0)
        m.add_cut(np.array([0.5]), 0.5, np.array([1.0]))
        g = PolyhedralFunction(n=1, c=np.array([-2.0]), d=0.0,
                               lower=np.zeros(1), upper=np.ones(1))
        q_star, ms = master.extract_dual_estimate([m], g)
        assert ms.status == "optimal"
        assert q_star[0] == pytest.approx(1.0, abs=1e-5)
