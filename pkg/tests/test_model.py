import numpy as np
import pytest
import scipy.sparse

from oraclebundle.model import (
    BlockStructure,
    ConfigurationError,
    Cut,
    DimensionError,
    Minorant,
    PolyhedralFunction,
    PolyhedralSet,
    QueryResult,
    relative_gap,
)


class TestBlockStructure:
    def test_split_and_offsets(self):
        bs = BlockStructure((2, 3, 1))
        assert bs.n == 6
        assert bs.offsets == (0, 2, 5, 6)
        parts = bs.split(np.arange(6.0))
        assert [p.tolist() for p in parts] == [[0, 1], [2, 3, 4], [5]]

    def test_rejects_bad_sizes(self):
        with pytest.raises(ConfigurationError):
            BlockStructure(())
        with pytest.raises(ConfigurationError):
            BlockStructure((2, 0))

    def test_split_wrong_length(self):
        with pytest.raises(DimensionError):
            BlockStructure((2, 2)).split(np.zeros(3))


class TestCut:
    def test_affine_evaluation(self):
        c = Cut(5.0, np.array([1.0, 0.0]), np.array([2.0, -1.0]))
        assert c(np.array([1.0, 0.0])) == 5.0
        assert c(np.array([2.0, 1.0])) == pytest.approx(5.0 + 2.0 - 1.0)

    def test_duplicate_detection(self):
        a = Cut(1.0, np.zeros(2), np.ones(2))
        b = Cut(1.0, np.zeros(2), np.ones(2))
        c = Cut(1.0 + 1e-6, np.zeros(2), np.ones(2))
        assert a.close_to(b)
        assert not a.close_to(c)

    def test_nonfinite_value_rejected(self):
        with pytest.raises(ValueError):
            Cut(np.inf, np.zeros(1), np.zeros(1))


class TestPolyhedralSet:
    def test_contains_box_and_rows(self):
        s = PolyhedralSet(2, A_eq=[[1.0, 1.0]], b_eq=[1.0],
                          A_in=[[1.0, 0.0]], b_in=[0.8],
                          lower=np.zeros(2), upper=np.ones(2))
        assert s.contains(np.array([0.5, 0.5]))
        assert not s.contains(np.array([0.9, 0.1]))   # inequality violated
        assert not s.contains(np.array([0.6, 0.6]))   # equality violated
        assert not s.contains(np.array([-0.1, 1.1]))  # box violated

    def test_accepts_sparse_matrices(self):
        s = PolyhedralSet(3, A_eq=scipy.sparse.identity(3), b_eq=np.ones(3))
        assert s.contains(np.ones(3))

    def test_tolerance_scales_with_rhs(self):
        s = PolyhedralSet(1, A_eq=[[1.0]], b_eq=[1e6])
        assert s.contains(np.array([1e6 + 1e-4]))


class TestMinorant:
    def test_floor_and_cuts(self):
        m = Minorant(0, 1, floor=-1.0)
        assert m.eval(np.array([3.0])) == -1.0
        m.add_cut(np.array([0.0]), 0.0, np.array([1.0]))
        assert m.eval(np.array([3.0])) == 3.0
        assert m.eval(np.array([-5.0])) == -1.0

    def test_known_domain_gives_inf(self):
        dom = PolyhedralSet(1, lower=np.zeros(1), upper=np.ones(1))
        m = Minorant(0, 1, floor=0.0, known_domain=dom)
        assert m.eval(np.array([0.5])) == 0.0
        assert m.eval(np.array([2.0])) == np.inf

    def test_duplicate_cut_skipped(self):
        m = Minorant(0, 1, floor=0.0)
        m.add_cut(np.zeros(1), 1.0, np.ones(1))
        m.add_cut(np.zeros(1), 1.0, np.ones(1))
        assert len(m.cuts) == 1

    def test_memory_compression(self):
        m = Minorant(0, 1, floor=0.0, memory=3)
        for k in range(5):
            m.add_cut(np.array([float(k)]), float(k), np.array([1.0]), iteration=k)
        agg = Cut(0.0, np.zeros(1), np.zeros(1), origin=("aggregate", 5))
        m.compress(agg)
        assert m.aggregate is agg
        # aggregate slot + memory-1 most recent oracle cuts
        assert len(m.all_cuts()) == 3
        assert m.cuts[-1].origin == ("oracle", 4)

    def test_memory_lower_bound(self):
        with pytest.raises(ConfigurationError):
            Minorant(0, 1, memory=1)


class TestPolyhedralFunction:
    def test_plain_linear_value(self):
        g = PolyhedralFunction(n=2, c=np.array([1.0, 2.0]), d=3.0,
                               lower=np.zeros(2), upper=np.ones(2))
        assert g.eval(np.array([1.0, 1.0])) == pytest.approx(6.0)
        assert g.eval(np.array([2.0, 0.0])) == np.inf

    def test_l1_via_auxiliaries(self):
        # g(x) = |x| modeled as min w s.t. x <= w, -x <= w, w >= 0
        g = PolyhedralFunction(
            n=1, c=np.array([0.0, 1.0]), d=0.0,
            A_in=np.array([[1.0, -1.0], [-1.0, -1.0]]), b_in=np.zeros(2),
            lower=np.array([-np.inf, 0.0]), upper=np.full(2, np.inf),
            n_aux=1,
        )
        assert g.eval(np.array([-2.5])) == pytest.approx(2.5, abs=1e-7)
        assert g.eval(np.array([0.0])) == pytest.approx(0.0, abs=1e-7)

    def test_dimension_checks(self):
        with pytest.raises(DimensionError):
            PolyhedralFunction(n=2, c=np.zeros(3))


class TestRelativeGap:
    def test_same_sign(self):
        assert relative_gap(-9.0, -10.0) == pytest.approx(1.0 / 9.0)
        assert relative_gap(10.0, 9.0) == pytest.approx(1.0 / 9.0)

    def test_sign_mismatch_is_inf(self):
        assert relative_gap(1.0, -1.0) == np.inf
        assert relative_gap(5.0, -np.inf) == np.inf

    def test_crossed_bounds_clamp(self):
        with pytest.warns(UserWarning):
            assert relative_gap(-10.0, -9.0) == 0.0


class TestQueryResult:
    def test_rejects_nonfinite_value(self):
        with pytest.raises(ValueError):
            QueryResult(np.nan, np.zeros(1))
