"""
Core data types for oracle-structured problems.

A problem is min h(x) = sum_i f_i(x_i) + g(x), where each block function
f_i is reachable only through a value/subgradient oracle and g is an
explicitly represented linear-plus-polyhedral function that couples the
blocks.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

# Tolerance for deciding whether a point satisfies polyhedral constraints.
# Master solutions are feasible only to solver accuracy, so indicator
# evaluations cannot use exact-zero tests.
RESIDUAL_TOL = 1e-9

# Two cuts whose data agree to this tolerance are considered duplicates.
DUPLICATE_TOL = 1e-12


class DimensionError(ValueError):
    """A vector or matrix has a size inconsistent with the problem."""


class ConfigurationError(ValueError):
    """Problem or solver configuration is invalid."""


@dataclass(frozen=True)
class BlockStructure:
    """Partition of the decision vector into per-agent blocks."""

    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise ConfigurationError("block structure needs at least one block")
        if any(s < 1 for s in sizes):
            raise ConfigurationError("block sizes must be >= 1")
        object.__setattr__(self, "sizes", sizes)

    @property
    def num_blocks(self):
        return len(self.sizes)

    @property
    def n(self):
        return sum(self.sizes)

    @property
    def offsets(self):
        off = [0]
        for s in self.sizes:
            off.append(off[-1] + s)
        return tuple(off)

    def block_slice(self, i):
        off = self.offsets
        return slice(off[i], off[i + 1])

    def split(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionError(f"expected vector of length {self.n}, got {x.shape}")
        return [x[self.block_slice(i)] for i in range(self.num_blocks)]


@dataclass(frozen=True)
class Cut:
    """One affine lower bound  value + q^T (x - point)  on a block function.

    ``origin`` is either ``("oracle", k)`` for a cut taken from an oracle
    query at iteration k, or ``("aggregate", k)`` for a dual-weighted
    combination installed during bundle compression.
    """

    base_value: float
    base_point: np.ndarray
    subgradient: np.ndarray
    origin: tuple = ("oracle", 0)

    def __post_init__(self):
        p = np.asarray(self.base_point, dtype=float)
        q = np.asarray(self.subgradient, dtype=float)
        if p.ndim != 1 or q.shape != p.shape:
            raise DimensionError("cut point and subgradient must be 1-d and equal length")
        if not math.isfinite(self.base_value):
            raise ValueError("cut value must be finite")
        object.__setattr__(self, "base_point", p)
        object.__setattr__(self, "subgradient", q)

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        return self.base_value + self.subgradient @ (xi - self.base_point)

    def close_to(self, other, tol=DUPLICATE_TOL):
        return (
            abs(self.base_value - other.base_value) <= tol
            and self.base_point.shape == other.base_point.shape
            and np.all(np.abs(self.base_point - other.base_point) <= tol)
            and np.all(np.abs(self.subgradient - other.subgradient) <= tol)
        )


@dataclass(frozen=True)
class PolyhedralSet:
    """A set {A_eq x = b_eq, A_in x <= b_in, lower <= x <= upper} on one block."""

    dim: int
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_in: np.ndarray = None
    b_in: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        n = int(self.dim)

        def mat(A, b, name):
            if A is None:
                return np.zeros((0, n)), np.zeros(0)
            if scipy.sparse.issparse(A):
                A = A.toarray()
            A = np.atleast_2d(np.asarray(A, dtype=float))
            b = np.atleast_1d(np.asarray(b, dtype=float))
            if A.shape[1] != n or b.shape != (A.shape[0],):
                raise DimensionError(f"{name} constraint dimensions inconsistent")
            return A, b

        A_eq, b_eq = mat(self.A_eq, self.b_eq, "equality")
        A_in, b_in = mat(self.A_in, self.b_in, "inequality")
        lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if lower.shape != (n,) or upper.shape != (n,):
            raise DimensionError("box bound dimensions inconsistent")
        object.__setattr__(self, "A_eq", A_eq)
        object.__setattr__(self, "b_eq", b_eq)
        object.__setattr__(self, "A_in", A_in)
        object.__setattr__(self, "b_in", b_in)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    def contains(self, x, tol=RESIDUAL_TOL):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionError(f"expected vector of length {self.dim}")
        scale_eq = 1.0 + (np.max(np.abs(self.b_eq)) if self.b_eq.size else 0.0)
        scale_in = 1.0 + (np.max(np.abs(self.b_in[np.isfinite(self.b_in)])) if self.b_in.size else 0.0)
        if self.A_eq.shape[0] and np.max(np.abs(self.A_eq @ x - self.b_eq)) > tol * scale_eq:
            return False
        if self.A_in.shape[0] and np.max(self.A_in @ x - self.b_in) > tol * scale_in:
            return False
        if np.any(x < self.lower - tol) or np.any(x > self.upper + tol):
            return False
        return True


class Minorant:
    """Max-of-affine lower model of one agent function.

    The model value is the maximum of a constant floor and all recorded
    cuts, and +inf outside ``known_domain`` (when given).  With finite
    memory m, at most m affine pieces are kept: one slot is reserved for
    an aggregate cut and the rest hold the most recent oracle cuts.
    """

    def __init__(self, block, dim, floor=-np.inf, known_domain=None, memory=None):
        if known_domain is not None and known_domain.dim != dim:
            raise DimensionError("known_domain dimension does not match block size")
        if memory is not None and memory < 2:
            raise ConfigurationError("finite memory must be >= 2 (aggregate + 1 oracle cut)")
        self.block = block
        self.dim = int(dim)
        self.floor = float(floor)
        self.known_domain = known_domain
        self.memory = memory
        self.cuts = []          # oracle cuts, oldest first
        self.aggregate = None   # at most one aggregate Cut

    def all_cuts(self):
        if self.aggregate is not None:
            return [self.aggregate] + self.cuts
        return list(self.cuts)

    def eval(self, xi):
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (self.dim,):
            raise DimensionError(f"expected vector of length {self.dim}, got {xi.shape}")
        if self.known_domain is not None and not self.known_domain.contains(xi):
            return np.inf
        best = self.floor
        for c in self.all_cuts():
            best = max(best, c(xi))
        return best

    def add_cut(self, x_tilde, value, q, iteration=0):
        """Record a new oracle cut, keeping the model tight at ``x_tilde``."""
        cut = Cut(float(value), x_tilde, q, origin=("oracle", iteration))
        if any(cut.close_to(c) for c in self.cuts):
            return self
        self.cuts.append(cut)
        if self.memory is not None and self.aggregate is not None:
            # Slot for the aggregate plus memory-1 oracle cuts; drop oldest.
            while len(self.cuts) > self.memory - 1:
                self.cuts.pop(0)
        return self

    def compress(self, aggregate):
        """Install an aggregate cut and trim old oracle cuts to fit memory."""
        if self.memory is None:
            return self
        if self.memory < 2:
            raise ConfigurationError("finite memory must be >= 2")
        self.aggregate = aggregate
        if len(self.cuts) > self.memory - 1:
            self.cuts = self.cuts[-(self.memory - 1):]
        return self


def minorant_eval(m, xi):
    return m.eval(xi)


def minorant_add_cut(m, x_tilde, value, q, iteration=0):
    return m.add_cut(x_tilde, value, q, iteration=iteration)


def minorant_compress(m, aggregate):
    return m.compress(aggregate)


@dataclass
class PolyhedralFunction:
    """Structured function g: a linear objective over a polyhedron.

    g(x) = c^T [x; w] + d over {A_eq [x;w] = b_eq, A_in [x;w] <= b_in,
    lower <= [x;w] <= upper}, and +inf when no feasible w exists.  The
    n_aux trailing columns are auxiliary modeling variables (used e.g.
    to express an l1 penalty with linear constraints); n_aux = 0 gives a
    plain polyhedral indicator-plus-linear function of x alone.
    """

    n: int
    c: np.ndarray
    d: float = 0.0
    A_eq: np.ndarray = None
    b_eq: np.ndarray = None
    A_in: np.ndarray = None
    b_in: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    n_aux: int = 0

    def __post_init__(self):
        nt = self.n + self.n_aux
        self.c = np.asarray(self.c, dtype=float)
        if self.c.shape != (nt,):
            raise DimensionError(f"objective vector must have length {nt}")
        self._set = PolyhedralSet(
            nt, self.A_eq, self.b_eq, self.A_in, self.b_in, self.lower, self.upper
        )
        self.A_eq = self._set.A_eq
        self.b_eq = self._set.b_eq
        self.A_in = self._set.A_in
        self.b_in = self._set.b_in
        self.lower = self._set.lower
        self.upper = self._set.upper
        both = np.isfinite(self.lower) & np.isfinite(self.upper)
        if np.any(self.lower[both] >= self.upper[both]):
            raise ConfigurationError("box bounds must satisfy lower < upper where both finite")

    @property
    def n_total(self):
        return self.n + self.n_aux

    def eval(self, x, w=None):
        """Value of g at x; solves the auxiliary LP when n_aux > 0 and w is absent."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionError(f"expected vector of length {self.n}, got {x.shape}")
        if self.n_aux == 0:
            if not self._set.contains(x):
                return np.inf
            return float(self.c @ x + self.d)
        if w is not None:
            z = np.concatenate([x, np.asarray(w, dtype=float)])
            if not self._set.contains(z):
                return np.inf
            return float(self.c @ z + self.d)
        from . import qp  # deferred import; qp builds on model types

        prob = qp.QpProblem(
            P=np.zeros((self.n_aux, self.n_aux)),
            q=self.c[self.n:],
            A_eq=self.A_eq[:, self.n:],
            b_eq=self.b_eq - self.A_eq[:, : self.n] @ x if self.A_eq.shape[0] else None,
            A_in=self.A_in[:, self.n:],
            b_in=self.b_in - self.A_in[:, : self.n] @ x if self.A_in.shape[0] else None,
            lower=self.lower[self.n:],
            upper=self.upper[self.n:],
        )
        if np.any(x < self.lower[: self.n] - RESIDUAL_TOL) or np.any(
            x > self.upper[: self.n] + RESIDUAL_TOL
        ):
            return np.inf
        sol = qp.qp_solve(prob)
        if sol.status != "optimal":
            return np.inf
        return float(self.c[: self.n] @ x + sol.objective + self.d)


def polyhedral_eval(g, x):
    return g.eval(x)


def relative_gap(h_val, L):
    """Online relative optimality gap from an upper bound and a lower bound.

    Defined as (h - L) / min(|h|, |L|) when h and L have the same sign,
    and +inf otherwise (the sign condition is what makes the denominator
    a valid bound on |h*|).
    """
    if not math.isfinite(L):
        return math.inf
    if h_val < L - RESIDUAL_TOL * (1.0 + abs(h_val)):
        import warnings

        warnings.warn(
            f"upper bound {h_val} below lower bound {L}; gap clamped to 0", stacklevel=2
        )
        return 0.0
    if h_val * L > 0:
        return (h_val - L) / min(abs(h_val), abs(L))
    return math.inf


class AgentOracle:
    """Interface contract for agent oracles.

    Implementations provide ``dim`` (block size) and ``query(xi)``
    returning a :class:`QueryResult`.  ``initial_minorant`` may return a
    starting lower model; the default is unbounded below (callers must
    then rely on a first cut).  A single agent is never queried
    concurrently, but distinct agents may be.
    """

    dim = 0

    def query(self, xi):
        raise NotImplementedError

    def initial_minorant(self, block=0, memory=None):
        return Minorant(block, self.dim, memory=memory)


@dataclass(frozen=True)
class QueryResult:
    value: float
    subgradient: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.subgradient, dtype=float)
        object.__setattr__(self, "subgradient", q)
        if not math.isfinite(self.value):
            raise ValueError("oracle value must be finite")
