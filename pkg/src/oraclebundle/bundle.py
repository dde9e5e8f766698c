"""
Top-level bundle-method driver.

Runs a discovery phase of level-projection steps to find a good proximal
parameter (rho = 1/lambda from the level-constraint dual), then switches
to fixed-rho proximal steps.  Each iteration solves a master QP, queries
every agent at the tentative point, applies the descent test, and
refines the per-agent minorants.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from . import master, qp
from .model import (
    BlockStructure,
    ConfigurationError,
    Minorant,
    relative_gap,
)

log = logging.getLogger(__name__)


class AgentQueryError(RuntimeError):
    """An agent returned a non-finite value at a point in dom g."""


class DescentTestError(RuntimeError):
    """Predicted decrease came out negative beyond QP tolerance."""


@dataclass
class SolverParams:
    eta: float = 0.01
    rho_override: float = None
    discovery_iters: int = 20
    rho_geomean_window: int = 5
    eps_abs: float = 1e-3
    eps_rel: float = 1e-2
    max_iters: int = 300
    memory: int = None          # None = infinite
    lb_period: int = 1
    lambda_min: float = 1e-6
    precondition: bool = True
    qp_tol: float = 1e-8
    parallel_agents: int = 1
    check_level_prox: bool = False

    def __post_init__(self):
        if not (0.0 < self.eta < 1.0):
            raise ConfigurationError("eta must lie in (0, 1)")
        for name in ("discovery_iters", "rho_geomean_window", "max_iters", "lb_period"):
            if getattr(self, name) < 1 and name != "discovery_iters":
                raise ConfigurationError(f"{name} must be >= 1")
        if self.discovery_iters < 0:
            raise ConfigurationError("discovery_iters must be >= 0")
        if self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.memory is not None and self.memory < 2:
            raise ConfigurationError("finite memory must be >= 2")
        if self.rho_override is not None and self.rho_override <= 0:
            raise ConfigurationError("rho_override must be positive")


@dataclass
class IterationRecord:
    k: int
    h_xk: float
    h_tilde: float
    L_best: float
    omega: float
    delta: float
    accepted: bool
    rho_used: float
    phase: str
    wall_ms: float


@dataclass
class SolveResult:
    x_best: np.ndarray
    h_best: float
    L_best: float
    omega_final: float
    q_star: np.ndarray
    status: str
    trace: list
    agent_queries: int = 0
    level_prox_errors: list = field(default_factory=list)


def descent_test(h_k, h_tilde, delta, eta):
    """Accept the tentative point iff actual decrease >= eta * predicted."""
    if delta < -1e-8 * (1.0 + abs(h_k)):
        raise DescentTestError(
            f"predicted decrease {delta:.3e} is negative beyond tolerance "
            f"(h_k={h_k:.6e}); master QP residuals are suspect"
        )
    return h_k - h_tilde >= eta * max(delta, 0.0)


def check_stop(h_k, L_best, params):
    """Gap-based stopping: 'gap_abs', 'gap_rel', or 'none'."""
    if not math.isfinite(L_best):
        return "none"
    gap = h_k - L_best
    if gap <= params.eps_abs:
        return "gap_abs"
    if h_k * L_best > 0 and gap <= params.eps_rel * min(abs(h_k), abs(L_best)):
        return "gap_rel"
    return "none"


def discovery_rho(lambda_history, window=5, lambda_min=1e-6):
    """Fixed rho for the main phase: inverted geometric mean of recent duals."""
    valid = [l for l in lambda_history if l > lambda_min]
    if not valid:
        log.warning("no usable level duals found during discovery; using rho = 1")
        return 1.0
    tail = valid[-window:]
    geomean = math.exp(sum(math.log(l) for l in tail) / len(tail))
    return 1.0 / geomean


def _query_all(agents, x_blocks, pool):
    def one(i):
        try:
            return agents[i].query(x_blocks[i])
        except ValueError as e:
            raise AgentQueryError(f"agent {i} failed at query point: {e}") from e

    if pool is None:
        return [one(i) for i in range(len(agents))]
    return list(pool.map(one, range(len(agents))))


def default_start(g, tol=1e-8):
    """A feasible starting point: projection of the box midpoint onto dom g.

    Returns (x0, g_value_at_x0).
    """
    n, na = g.n, g.n_aux
    mid = np.zeros(n)
    fin = np.isfinite(g.lower[:n]) & np.isfinite(g.upper[:n])
    mid[fin] = 0.5 * (g.lower[:n][fin] + g.upper[:n][fin])
    mid[np.isfinite(g.lower[:n]) & ~fin] = g.lower[:n][np.isfinite(g.lower[:n]) & ~fin]
    mid[np.isfinite(g.upper[:n]) & ~fin] = g.upper[:n][np.isfinite(g.upper[:n]) & ~fin]
    diag = np.concatenate([np.ones(n), np.full(na, 1e-6)])
    prob = qp.QpProblem(
        P=scipy.sparse.diags(diag),
        q=np.concatenate([-mid, np.zeros(na)]),
        A_eq=g.A_eq if g.A_eq.shape[0] else None,
        b_eq=g.b_eq if g.A_eq.shape[0] else None,
        A_in=g.A_in if g.A_in.shape[0] else None,
        b_in=g.b_in if g.A_in.shape[0] else None,
        lower=g.lower,
        upper=g.upper,
    )
    sol = qp.qp_solve(prob, tol=tol)
    if sol.status != "optimal":
        raise ConfigurationError(f"could not find a starting point in dom g ({sol.status})")
    x0 = sol.z[:n]
    g_val = g.eval(x0) if na else float(g.c @ x0 + g.d)
    if not math.isfinite(g_val):
        g_val = float(g.c[:n] @ x0 + g.c[n:] @ sol.z[n:] + g.d)
    return x0, g_val


def solve(g, agents, params=None, x0=None):
    """Run the bundle method on min sum_i f_i(x_i) + g(x)."""
    params = params or SolverParams()
    if params.precondition:
        from . import precond

        return precond.solve_scaled(g, agents, params, x0)

    blocks = BlockStructure(tuple(a.dim for a in agents))
    if blocks.n != g.n:
        raise ConfigurationError(
            f"agent block sizes sum to {blocks.n} but g has dimension {g.n}"
        )
    minorants = []
    for i, a in enumerate(agents):
        m = a.initial_minorant(block=i, memory=params.memory)
        minorants.append(m)

    if x0 is None:
        x_k, g_val0 = default_start(g, tol=params.qp_tol)
    else:
        x_k = np.asarray(x0, dtype=float)
        g_val0 = g.eval(x_k)
        if not math.isfinite(g_val0):
            raise ConfigurationError("supplied starting point is not in dom g")

    pool = (
        ThreadPoolExecutor(max_workers=params.parallel_agents)
        if params.parallel_agents > 1
        else None
    )
    n_queries = 0
    trace = []
    lp_errors = []
    try:
        results = _query_all(agents, blocks.split(x_k), pool)
        n_queries += len(agents)
        h_k = sum(r.value for r in results) + g_val0
        for m, xi, r in zip(minorants, blocks.split(x_k), results):
            m.add_cut(xi, r.value, r.subgradient, iteration=0)

        L_best = -np.inf
        lambda_history = []
        rho_fixed = params.rho_override
        status = "max_iters"

        for k in range(params.max_iters):
            t_start = time.perf_counter()
            discovery = rho_fixed is None and k < params.discovery_iters

            if discovery or k % params.lb_period == 0:
                lb = master.solve_master(
                    master.build_lower_bound(minorants, g), tol=params.qp_tol
                )
                if lb.status == "optimal":
                    # certify L with the weak-duality bound rather than
                    # the primal objective, which can overshoot the model
                    # minimum by the solver's convergence error
                    L_best = max(L_best, lb.dual_bound)
                elif lb.status == "unbounded":
                    log.warning("lower-bound problem unbounded; L = -inf")

            omega = relative_gap(h_k, L_best)
            stop = check_stop(h_k, L_best, params)
            if stop != "none":
                status = stop
                trace.append(IterationRecord(
                    k=k, h_xk=h_k, h_tilde=h_k, L_best=L_best, omega=omega,
                    delta=0.0, accepted=False, rho_used=0.0,
                    phase="discovery" if discovery else "prox",
                    wall_ms=(time.perf_counter() - t_start) * 1e3,
                ))
                break

            if discovery:
                phase = "discovery"
                ms = None
                eta_k = 0.5 * (h_k + L_best) if math.isfinite(L_best) else None
                if eta_k is not None and eta_k < h_k:
                    ms = master.solve_master(
                        master.build_level(minorants, g, x_k, eta_k), tol=params.qp_tol
                    )
                    if ms.status == "optimal" and (
                        ms.level_dual <= params.lambda_min
                        and np.allclose(ms.x_tilde, x_k, atol=1e-9)
                    ):
                        # model already below the level at x_k; tighten once
                        eta_k = 0.5 * (eta_k + L_best)
                        ms = master.solve_master(
                            master.build_level(minorants, g, x_k, eta_k),
                            tol=params.qp_tol,
                        )
                if ms is None or ms.status != "optimal":
                    # defensive fallback: plain prox step with current best rho
                    rho_used = (
                        1.0 / max(lambda_history[-1], params.lambda_min)
                        if lambda_history
                        else 1.0
                    )
                    ms = master.solve_master(
                        master.build_prox(minorants, g, x_k, rho_used),
                        tol=params.qp_tol,
                    )
                else:
                    lam = ms.level_dual
                    lambda_history.append(lam)
                    rho_used = 1.0 / max(lam, params.lambda_min)
                    if params.check_level_prox and lam > params.lambda_min:
                        # verify the level/prox equivalence on a refined
                        # pair: at the working tolerance the level dual's
                        # own error dominates the comparison
                        chk_tol = min(params.qp_tol, 1e-13)
                        lvl = master.solve_master(
                            master.build_level(minorants, g, x_k, eta_k),
                            tol=chk_tol,
                        )
                        lam_ref = max(lvl.level_dual, params.lambda_min)
                        chk = master.solve_master(
                            master.build_prox(minorants, g, x_k, 1.0 / lam_ref),
                            tol=chk_tol,
                        )
                        err = float(np.max(np.abs(chk.x_tilde - lvl.x_tilde)))
                        lp_errors.append(err / (1.0 + float(np.linalg.norm(lvl.x_tilde))))
            else:
                phase = "prox"
                if rho_fixed is None:
                    rho_fixed = discovery_rho(
                        lambda_history,
                        window=params.rho_geomean_window,
                        lambda_min=params.lambda_min,
                    )
                    log.info("discovery done after %d iters; rho fixed at %.4g", k, rho_fixed)
                rho_used = rho_fixed
                ms = master.solve_master(
                    master.build_prox(minorants, g, x_k, rho_used), tol=params.qp_tol
                )
                if ms.status != "optimal":
                    raise ConfigurationError(
                        f"proximal master problem returned status {ms.status}"
                    )

            x_tilde = ms.x_tilde
            results = _query_all(agents, blocks.split(x_tilde), pool)
            n_queries += len(agents)
            g_val = ms.fhat_value - float(ms.t.sum())
            h_tilde = sum(r.value for r in results) + g_val

            delta = h_k - (
                ms.fhat_value + 0.5 * rho_used * float(np.sum((x_tilde - x_k) ** 2))
            )
            accepted = descent_test(h_k, h_tilde, delta, params.eta)

            if params.memory is not None:
                aggs = master.extract_aggregate_cuts(ms, minorants, iteration=k)
                for m, a in zip(minorants, aggs):
                    m.compress(a)
            for m, xi, r in zip(minorants, blocks.split(x_tilde), results):
                m.add_cut(xi, r.value, r.subgradient, iteration=k + 1)

            trace.append(IterationRecord(
                k=k, h_xk=h_k, h_tilde=h_tilde, L_best=L_best, omega=omega,
                delta=delta, accepted=accepted, rho_used=rho_used, phase=phase,
                wall_ms=(time.perf_counter() - t_start) * 1e3,
            ))

            if accepted:
                x_k = x_tilde
                h_k = h_tilde
    finally:
        if pool is not None:
            pool.shutdown()

    q_star, _ = master.extract_dual_estimate(minorants, g, tol=params.qp_tol)
    return SolveResult(
        x_best=x_k,
        h_best=h_k,
        L_best=L_best,
        omega_final=relative_gap(h_k, L_best),
        q_star=q_star,
        status=status,
        trace=trace,
        agent_queries=n_queries,
        level_prox_errors=lp_errors,
    )
