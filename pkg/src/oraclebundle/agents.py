"""
Built-in agent oracles and seeded instance generators.

Most agents are defined by partial minimization: the agent value is the
optimum of an inner convex QP/LP over private variables coupled to the
public block, and the subgradient comes from the negated duals of the
coupling constraint.  Four instance families are provided: a serial
supply chain of trans-shipment components, grouped resource allocation,
multi-commodity network flow, and l1-regularized federated logistic
regression.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from . import qp
from .model import (
    AgentOracle,
    ConfigurationError,
    Minorant,
    PolyhedralFunction,
    PolyhedralSet,
    QueryResult,
)

log = logging.getLogger(__name__)

# Default penalty on slack variables; must dominate the price magnitudes
# of the instances that need them.
DEFAULT_SLACK_PENALTY = 1e3


@dataclass
class InnerProblem:
    """Inner convex QP of a partial-minimization agent.

    Private variables z with (1/2) z^T P z + q^T z, polyhedral
    constraints, and one coupling to the public block x:

    * ("eq", F):    F z = x, subgradient = -dual of these rows
    * ("in", G):    G z <= x, subgradient = -dual of these rows
    * ("box", idx): z[idx] <= x, subgradient = -upper box dual
    """

    P: object
    q: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray = None
    A_in: object = None
    b_in: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    coupling: tuple = None

    @property
    def nz(self):
        return np.asarray(self.q).shape[0]


class PartialMinAgent(AgentOracle):
    """Agent whose value/subgradient oracle solves an inner QP."""

    def __init__(self, inner, dim, name="agent", qp_tol=1e-8, floor=-np.inf,
                 known_domain=None):
        self.inner = inner
        self.dim = int(dim)
        self.name = name
        self.qp_tol = qp_tol
        self.floor = floor
        self.known_domain = known_domain

    def initial_minorant(self, block=0, memory=None):
        return Minorant(block, self.dim, floor=self.floor,
                        known_domain=self.known_domain, memory=memory)

    def _build(self, x):
        inner = self.inner
        kind, C = inner.coupling
        A_eq, b_eq = inner.A_eq, inner.b_eq
        A_in, b_in = inner.A_in, inner.b_in
        lower = (np.full(inner.nz, -np.inf) if inner.lower is None
                 else np.array(inner.lower, dtype=float))
        upper = (np.full(inner.nz, np.inf) if inner.upper is None
                 else np.array(inner.upper, dtype=float))
        if kind == "eq":
            rows0 = 0 if A_eq is None else np.atleast_2d(A_eq).shape[0] if not scipy.sparse.issparse(A_eq) else A_eq.shape[0]
            A_eq = C if A_eq is None else scipy.sparse.vstack(
                [scipy.sparse.csr_matrix(A_eq), scipy.sparse.csr_matrix(C)], format="csr")
            b_eq = x if b_eq is None else np.concatenate([b_eq, x])
            dual_rows = ("eq", slice(rows0, rows0 + self.dim))
        elif kind == "in":
            rows0 = 0 if A_in is None else (A_in.shape[0] if scipy.sparse.issparse(A_in) else np.atleast_2d(A_in).shape[0])
            A_in = C if A_in is None else scipy.sparse.vstack(
                [scipy.sparse.csr_matrix(A_in), scipy.sparse.csr_matrix(C)], format="csr")
            b_in = x if b_in is None else np.concatenate([b_in, x])
            dual_rows = ("in", slice(rows0, rows0 + self.dim))
        elif kind == "box":
            upper[C] = x
            dual_rows = ("box", C)
        else:
            raise ConfigurationError(f"unknown coupling kind {kind!r}")
        prob = qp.QpProblem(P=inner.P, q=inner.q, A_eq=A_eq, b_eq=b_eq,
                            A_in=A_in, b_in=b_in, lower=lower, upper=upper)
        return prob, dual_rows

    def query(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"{self.name}: expected block of length {self.dim}")
        prob, (kind, rows) = self._build(x)
        sol = qp.qp_solve(prob, tol=self.qp_tol)
        if sol.status == "max_iter":
            # badly scaled inner problems can stall a hair above the target
            # tolerance; one decade looser keeps the value error negligible
            # relative to the objective magnitude
            retry = qp.qp_solve(prob, tol=10.0 * self.qp_tol)
            if retry.status == "optimal":
                log.info("%s: inner problem solved at tolerance %.0e after "
                         "stalling at %.0e", self.name, 10.0 * self.qp_tol,
                         self.qp_tol)
                sol = retry
        if sol.status != "optimal":
            raise ValueError(
                f"{self.name}: inner problem status {sol.status} "
                f"(residuals {sol.residuals})"
            )
        if kind == "eq":
            grad = -sol.y_eq[rows]
        elif kind == "in":
            grad = -sol.y_in[rows]
        else:
            grad = -sol.y_box_upper[rows]
        # anchor the value at the Lagrangian rather than the primal
        # objective: with the dual-based slope this makes the reported
        # affine lower bound valid by weak duality even when the solve
        # carries a small duality gap, which keeps the certified lower
        # bound L below the true optimum
        return QueryResult(qp.lagrangian_value(prob, sol), grad)


def slack_wrap(agent, lambda_slack=DEFAULT_SLACK_PENALTY, slack_reg=1e-6):
    """Give an equality-coupled agent full domain via an l1 slack penalty.

    Replaces the coupling F z = x with F z - r_pos + r_neg = x and adds
    lambda_slack * 1^T (r_pos + r_neg) to the objective.  For x in the
    original domain and lambda_slack above the subgradient magnitudes,
    the slack stays at zero and the value is unchanged.

    A small quadratic term (slack_reg * lambda_slack / 2) * ||r||^2 keeps
    the inner problem strictly convex in the slacks; purely linear slacks
    make the penalty duals degenerate and the inner solves unstable.  The
    term vanishes with the slacks, so values on the original domain are
    unaffected.
    """
    inner = agent.inner
    kind, F = inner.coupling
    if kind != "eq":
        raise ConfigurationError("slack wrapper needs an equality-coupled agent")
    nz, m = inner.nz, agent.dim
    F = scipy.sparse.csr_matrix(F)
    I = scipy.sparse.identity(m, format="csr")
    coupling = scipy.sparse.hstack([F, -I, I], format="csr")

    def widen(A):
        if A is None:
            return None
        A = scipy.sparse.csr_matrix(A)
        return scipy.sparse.hstack(
            [A, scipy.sparse.csr_matrix((A.shape[0], 2 * m))], format="csr")

    P_slack = scipy.sparse.identity(2 * m, format="csr") * (slack_reg * lambda_slack)
    if inner.P is not None:
        P = scipy.sparse.block_diag(
            [scipy.sparse.csr_matrix(inner.P), P_slack], format="csr")
    else:
        P = scipy.sparse.block_diag(
            [scipy.sparse.csr_matrix((nz, nz)), P_slack], format="csr")
    lower = (np.full(nz, -np.inf) if inner.lower is None
             else np.asarray(inner.lower, dtype=float))
    upper = (np.full(nz, np.inf) if inner.upper is None
             else np.asarray(inner.upper, dtype=float))
    wrapped = InnerProblem(
        P=P,
        q=np.concatenate([np.asarray(inner.q, dtype=float),
                          np.full(2 * m, float(lambda_slack))]),
        A_eq=widen(inner.A_eq), b_eq=inner.b_eq,
        A_in=widen(inner.A_in), b_in=inner.b_in,
        lower=np.concatenate([lower, np.zeros(2 * m)]),
        upper=np.concatenate([upper, np.full(2 * m, np.inf)]),
        coupling=("eq", coupling),
    )
    return PartialMinAgent(wrapped, agent.dim, name=f"{agent.name}+slack",
                           qp_tol=agent.qp_tol, floor=agent.floor,
                           known_domain=agent.known_domain)


# ---------------------------------------------------------------------------
# trans-shipment agents (supply chain)

class TransshipmentAgent(PartialMinAgent):
    """One bipartite trans-shipment stage with quadratic edge costs.

    Public block x = (a, b): inflows a (length q) and outflows b
    (length p).  Private edge flows X (p x q) have cost
    D_jk X_jk + E_jk X_jk^2, capacities 0 <= X <= C, and an l1 slack on
    the coupling so the stage is finite wherever the network constraints
    place it.
    """

    def __init__(self, D_cost, E_cost, C_cap, lambda_slack=DEFAULT_SLACK_PENALTY,
                 name="transshipment", qp_tol=1e-8):
        D = np.asarray(D_cost, dtype=float)
        E = np.asarray(E_cost, dtype=float)
        C = np.asarray(C_cap, dtype=float)
        if D.shape != E.shape or D.shape != C.shape:
            raise ConfigurationError("cost and capacity matrices must share a shape")
        if np.any(D < 0) or np.any(E < 0) or np.any(C < 0):
            raise ConfigurationError("costs and capacities must be nonnegative")
        p, qdim = C.shape
        ne = p * qdim
        dim = qdim + p

        # column sums -> inflows, row sums -> outflows (X flattened row-major)
        cols = scipy.sparse.lil_matrix((qdim, ne))
        rows = scipy.sparse.lil_matrix((p, ne))
        for j in range(p):
            for k in range(qdim):
                cols[k, j * qdim + k] = 1.0
                rows[j, j * qdim + k] = 1.0
        F = scipy.sparse.vstack([cols.tocsr(), rows.tocsr()], format="csr")

        inner = InnerProblem(
            P=scipy.sparse.diags(2.0 * E.ravel()),
            q=D.ravel().copy(),
            lower=np.zeros(ne),
            upper=C.ravel().copy(),
            coupling=("eq", F),
        )
        balance = np.concatenate([np.ones(qdim), -np.ones(p)])
        domain = PolyhedralSet(dim, A_eq=balance[None, :], b_eq=[0.0])
        core = PartialMinAgent(inner, dim, name=name, qp_tol=qp_tol,
                               floor=0.0, known_domain=domain)
        wrapped = slack_wrap(core, lambda_slack)
        super().__init__(wrapped.inner, dim, name=name, qp_tol=qp_tol,
                         floor=0.0, known_domain=domain)
        self.D_cost, self.E_cost, self.C_cap = D, E, C
        self.lambda_slack = float(lambda_slack)

    @property
    def kind(self):
        return "transshipment"

    def payload(self):
        return {
            "D": self.D_cost.tolist(),
            "E": self.E_cost.tolist(),
            "C": self.C_cap.tolist(),
            "lambda_slack": self.lambda_slack,
        }


# ---------------------------------------------------------------------------
# single-commodity flow agents (multi-commodity flow)

class FlowAgent(PartialMinAgent):
    """Maximize one commodity's linear flow utility under reserved capacity.

    The public block is the capacity x reserved for this commodity; the
    inner LP routes flow z (0 <= z <= x) from source to sink subject to
    conservation, maximizing utility_slope * throughput.
    """

    def __init__(self, incidence, source, sink, utility_slope, floor=-np.inf,
                 name="flow", qp_tol=1e-8):
        A = scipy.sparse.csr_matrix(incidence)
        p, qdim = A.shape
        col_sums = np.asarray(A.sum(axis=0)).ravel()
        if np.max(np.abs(col_sums)) > 1e-12:
            raise ConfigurationError("incidence matrix columns must sum to zero")
        if utility_slope < 0:
            raise ConfigurationError("utility slope must be nonnegative")
        inject = np.zeros((p, 1))
        inject[source, 0] = 1.0
        inject[sink, 0] = -1.0
        inner = InnerProblem(
            P=None,
            q=np.concatenate([np.zeros(qdim), [-float(utility_slope)]]),
            A_eq=scipy.sparse.hstack([A, scipy.sparse.csr_matrix(inject)], format="csr"),
            b_eq=np.zeros(p),
            lower=np.zeros(qdim + 1),
            upper=np.full(qdim + 1, np.inf),
            coupling=("box", np.arange(qdim)),
        )
        super().__init__(inner, qdim, name=name, qp_tol=qp_tol, floor=floor)
        self.incidence = A
        self.source, self.sink = int(source), int(sink)
        self.utility_slope = float(utility_slope)

    @property
    def kind(self):
        return "flow"

    def payload(self):
        return {
            "incidence": self.incidence.toarray().tolist(),
            "source": self.source,
            "sink": self.sink,
            "utility_slope": self.utility_slope,
            "floor": self.floor,
        }


# ---------------------------------------------------------------------------
# grouped resource allocation agents

class ResourceAgent(PartialMinAgent):
    """Negative optimal group utility under a shared resource budget.

    Each participant has a concave piecewise-linear utility
    U(r) = min_t (slopes_t @ r + intercepts_t) with nonnegative slopes.
    The inner LP allocates the block budget x across participants; the
    subgradient is the negated vector of optimal resource prices.
    """

    def __init__(self, slopes, intercepts, floor=-np.inf, name="resource", qp_tol=1e-8):
        # slopes: (participants, pieces, n); intercepts: (participants, pieces)
        slopes = np.asarray(slopes, dtype=float)
        intercepts = np.asarray(intercepts, dtype=float)
        if slopes.ndim != 3 or intercepts.shape != slopes.shape[:2]:
            raise ConfigurationError("utility data shapes inconsistent")
        if np.any(slopes < 0):
            raise ConfigurationError("utility slopes must be nonnegative")
        N, T, n = slopes.shape
        nz = N * n + N  # allocations r_j then epigraph values y_j

        rows = []
        rhs = []
        for j in range(N):
            for t in range(T):
                row = np.zeros(nz)
                row[j * n:(j + 1) * n] = -slopes[j, t]
                row[N * n + j] = 1.0
                rows.append(row)
                rhs.append(intercepts[j, t])
        A_in = scipy.sparse.csr_matrix(np.asarray(rows))

        G = scipy.sparse.hstack(
            [scipy.sparse.hstack([scipy.sparse.identity(n)] * N),
             scipy.sparse.csr_matrix((n, N))], format="csr")
        inner = InnerProblem(
            P=None,
            q=np.concatenate([np.zeros(N * n), -np.ones(N)]),
            A_in=A_in,
            b_in=np.asarray(rhs),
            lower=np.concatenate([np.zeros(N * n), np.full(N, -np.inf)]),
            upper=np.full(nz, np.inf),
            coupling=("in", G),
        )
        super().__init__(inner, n, name=name, qp_tol=qp_tol, floor=floor)
        self.slopes, self.intercepts = slopes, intercepts

    @property
    def kind(self):
        return "resource"

    def payload(self):
        return {
            "slopes": self.slopes.tolist(),
            "intercepts": self.intercepts.tolist(),
            "floor": self.floor,
        }

    def group_utility(self, budget):
        """Total group utility with every participant given ``budget``."""
        vals = np.min(self.slopes @ np.asarray(budget, dtype=float)
                      + self.intercepts, axis=1)
        return float(vals.sum())


# ---------------------------------------------------------------------------
# federated logistic agents

class LogisticAgent(AgentOracle):
    """Sum of logistic losses over one location's data; analytic oracle."""

    def __init__(self, features, labels, name="logistic"):
        U = np.asarray(features, dtype=float)
        v = np.asarray(labels, dtype=float)
        if U.ndim != 2 or v.shape != (U.shape[0],):
            raise ConfigurationError("features must be (points, dim); labels (points,)")
        if not np.all(np.isin(v, (-1.0, 1.0))):
            raise ConfigurationError("labels must be -1 or +1")
        self.features = U
        self.labels = v
        self.dim = U.shape[1]
        self.name = name

    def initial_minorant(self, block=0, memory=None):
        # logistic losses are nonnegative
        return Minorant(block, self.dim, floor=0.0, memory=memory)

    def query(self, theta):
        theta = np.asarray(theta, dtype=float)
        margins = self.labels * (self.features @ theta)
        # log(1 + exp(-m)) computed overflow-safe
        value = float(np.sum(np.logaddexp(0.0, -margins)))
        sig = 0.5 * (1.0 + np.tanh(-0.5 * margins))  # sigmoid(-m), stable
        grad = -(self.labels * sig) @ self.features
        return QueryResult(value, grad)

    @property
    def kind(self):
        return "logistic"

    def payload(self):
        return {"features": self.features.tolist(), "labels": self.labels.tolist()}


# ---------------------------------------------------------------------------
# instance generators


@dataclass
class Instance:
    name: str
    agents: list
    g: PolyhedralFunction
    meta: dict = field(default_factory=dict)


def _agent_rng(seed, index):
    # independent substream per agent: changing M leaves other agents' data alone
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), int(index))))


SUPPLY_CHAIN_DIMS = ((20, 30), (30, 40), (40, 25), (25, 35), (35, 20))


def gen_supply_chain(seed, dims=SUPPLY_CHAIN_DIMS, lambda_slack=DEFAULT_SLACK_PENALTY):
    """Serial chain of trans-shipment stages with linear source/sink prices."""
    dims = tuple((int(a), int(b)) for a, b in dims)
    M = len(dims)
    for i in range(M - 1):
        if dims[i][1] != dims[i + 1][0]:
            raise ConfigurationError("stage output size must match next stage input")

    agents = []
    caps = []
    for i, (qdim, p) in enumerate(dims):
        rng = _agent_rng(seed, i)
        C = np.exp(rng.normal(0.0, 1.0, size=(p, qdim)))
        E = np.exp(rng.normal(0.07, 0.7, size=(p, qdim)))
        D = E / (2.0 * C)
        agents.append(TransshipmentAgent(D, E, C, lambda_slack=lambda_slack,
                                         name=f"stage{i}"))
        caps.append(C)

    rng_g = _agent_rng(seed, M)
    alpha = rng_g.uniform(8.0, 10.0, size=dims[0][0])
    beta = -rng_g.uniform(10.0, 12.0, size=dims[-1][1])

    sizes = [qdim + p for qdim, p in dims]
    offsets = np.cumsum([0] + sizes)
    n = offsets[-1]

    # upper bounds: max of total capacity feeding a flow and flowing out of it
    u = np.zeros(n)
    for i, (qdim, p) in enumerate(dims):
        a_sl = slice(offsets[i], offsets[i] + qdim)
        b_sl = slice(offsets[i] + qdim, offsets[i + 1])
        out_cap = caps[i].sum(axis=0)   # per input: capacity of edges it feeds
        in_cap = caps[i].sum(axis=1)    # per output: capacity of edges feeding it
        ua = out_cap.copy()
        if i > 0:
            ua = np.maximum(ua, caps[i - 1].sum(axis=1))
        ub = in_cap.copy()
        if i < M - 1:
            ub = np.maximum(ub, caps[i + 1].sum(axis=0))
        u[a_sl] = ua
        u[b_sl] = ub

    c = np.zeros(n)
    c[offsets[0]:offsets[0] + dims[0][0]] = alpha
    c[offsets[-1] - dims[-1][1]:offsets[-1]] = beta

    eq_rows = []
    eq_rhs = []
    # series conservation: outflows of stage i equal inflows of stage i+1
    for i in range(M - 1):
        p_i = dims[i][1]
        b_sl = slice(offsets[i] + dims[i][0], offsets[i + 1])
        a_sl = slice(offsets[i + 1], offsets[i + 1] + dims[i + 1][0])
        block = scipy.sparse.lil_matrix((p_i, n))
        block[:, b_sl] = scipy.sparse.identity(p_i)
        block[:, a_sl] = -scipy.sparse.identity(p_i)
        eq_rows.append(block.tocsr())
        eq_rhs.append(np.zeros(p_i))
    # per-stage flow balance (also carried by each agent's known domain)
    for i, (qdim, p) in enumerate(dims):
        row = scipy.sparse.lil_matrix((1, n))
        row[0, offsets[i]:offsets[i] + qdim] = 1.0
        row[0, offsets[i] + qdim:offsets[i + 1]] = -1.0
        eq_rows.append(row.tocsr())
        eq_rhs.append(np.zeros(1))

    g = PolyhedralFunction(
        n=n, c=c, d=0.0,
        A_eq=scipy.sparse.vstack(eq_rows, format="csr"),
        b_eq=np.concatenate(eq_rhs),
        lower=np.zeros(n),
        upper=u,
    )
    return Instance("supply-chain", agents, g,
                    meta={"seed": int(seed), "dims": dims, "lambda_slack": lambda_slack})


def gen_resource(seed, n=50, M=50, participants=10, pieces=5):
    """Grouped resource allocation with concave piecewise-linear utilities."""
    rng_g = _agent_rng(seed, M)
    R = np.exp(rng_g.normal(math.log(n / 10.0), 1.0, size=n))

    agents = []
    for i in range(M):
        rng = _agent_rng(seed, i)
        slopes = np.zeros((participants, pieces, n))
        intercepts = np.zeros((participants, pieces))
        for j in range(participants):
            nnz = rng.binomial(n, 0.1)
            support = rng.choice(n, size=max(nnz, 1), replace=False)
            w = np.zeros(n)
            w[support] = rng.uniform(0.0, 1.0, size=support.size)
            cap = rng.uniform(0.0, n / 10.0)
            # saturating concave profile: slopes taper from w to 0 while
            # intercepts rise to the cap
            levels = np.linspace(1.0, 0.0, pieces)
            for t, lv in enumerate(levels):
                slopes[j, t] = lv * w
                intercepts[j, t] = (1.0 - lv) * cap
        agent = ResourceAgent(slopes, intercepts, name=f"group{i}")
        agent.floor = -agent.group_utility(R)
        agents.append(agent)

    nt = n * M
    G = scipy.sparse.hstack([scipy.sparse.identity(n)] * M, format="csr")
    g = PolyhedralFunction(
        n=nt, c=np.zeros(nt), d=0.0,
        A_in=G, b_in=R,
        lower=np.zeros(nt),
        upper=np.tile(R, M),
    )
    return Instance("resource", agents, g,
                    meta={"seed": int(seed), "n": n, "M": M,
                          "participants": participants, "pieces": pieces,
                          "budget": R.tolist()})


def gen_mcf(seed, M=10, p=100, q=1000):
    """Multi-commodity flow: reserve edge capacity across M commodities."""
    if q < p:
        raise ConfigurationError("need at least p edges for the spanning cycle")
    rng_g = _agent_rng(seed, M)
    perm = rng_g.permutation(p)
    tails = list(perm)
    heads = list(np.roll(perm, -1))
    while len(tails) < q:
        u, v = rng_g.integers(0, p, size=2)
        if u == v:
            continue
        tails.append(int(u))
        heads.append(int(v))
    A = scipy.sparse.lil_matrix((p, q))
    for e, (u, v) in enumerate(zip(tails, heads)):
        A[u, e] = -1.0
        A[v, e] = 1.0
    A = A.tocsr()
    cap = rng_g.uniform(0.2, 2.0, size=q)
    out_cap_by_node = np.zeros(p)
    for e, u in enumerate(tails):
        out_cap_by_node[u] += cap[e]

    agents = []
    for i in range(M):
        rng = _agent_rng(seed, i)
        r, s = rng.integers(0, p, size=2)
        while s == r:
            s = rng.integers(0, p)
        b = rng.uniform(0.5, 1.5)
        floor = -b * out_cap_by_node[r]  # throughput is capped by source out-capacity
        agents.append(FlowAgent(A, int(r), int(s), b, floor=floor, name=f"commodity{i}"))

    nt = M * q
    share = scipy.sparse.hstack([scipy.sparse.identity(q)] * M, format="csr")
    g = PolyhedralFunction(
        n=nt, c=np.zeros(nt), d=0.0,
        A_eq=share, b_eq=cap,
        lower=np.zeros(nt),
        upper=np.tile(cap, M),
    )
    return Instance("mcf", agents, g,
                    meta={"seed": int(seed), "M": M, "p": p, "q": q,
                          "capacity": cap.tolist()})


def gen_federated(seed, d=500, M=10, n_i=1000, lambda_reg=5.0):
    """l1-regularized logistic regression over M data locations."""
    rng_g = _agent_rng(seed, M)
    mask = rng_g.random(d) < 0.1
    theta_true = np.where(mask, rng_g.normal(0.0, 1.0, size=d), 0.0)

    agents = []
    for i in range(M):
        rng = _agent_rng(seed, i)
        U = rng.normal(0.0, 1.0, size=(n_i, d))
        noise = rng.normal(0.0, 0.1, size=n_i)
        v = np.where(U @ theta_true + noise >= 0.0, 1.0, -1.0)
        agents.append(LogisticAgent(U, v, name=f"location{i}"))

    nt = M * d
    # consensus x_1 = ... = x_M plus lambda * ||x_1||_1 via auxiliaries w
    eq_rows = []
    for i in range(M - 1):
        block = scipy.sparse.lil_matrix((d, nt + d))
        block[:, i * d:(i + 1) * d] = scipy.sparse.identity(d)
        block[:, (i + 1) * d:(i + 2) * d] = -scipy.sparse.identity(d)
        eq_rows.append(block.tocsr())
    I = scipy.sparse.identity(d, format="csr")
    pad = scipy.sparse.csr_matrix((d, nt - d))
    in_rows = scipy.sparse.vstack(
        [scipy.sparse.hstack([I, pad, -I], format="csr"),
         scipy.sparse.hstack([-I, pad, -I], format="csr")], format="csr")
    c = np.concatenate([np.zeros(nt), np.full(d, float(lambda_reg))])
    lower = np.concatenate([np.full(nt, -np.inf), np.zeros(d)])
    g = PolyhedralFunction(
        n=nt, c=c, d=0.0,
        A_eq=scipy.sparse.vstack(eq_rows, format="csr") if eq_rows else None,
        b_eq=np.zeros((M - 1) * d) if M > 1 else None,
        A_in=in_rows, b_in=np.zeros(2 * d),
        lower=lower,
        upper=np.full(nt + d, np.inf),
        n_aux=d,
    )
    return Instance("federated", agents, g,
                    meta={"seed": int(seed), "d": d, "M": M, "n_i": n_i,
                          "lambda_reg": lambda_reg,
                          "theta_true_nnz": int(mask.sum())})
