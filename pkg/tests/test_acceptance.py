"""
End-to-end acceptance suite.

Each test prints exactly one PASS/FAIL line for its criterion.  The
20 benchmark runs (5 seeds x 4 example families at desk scale) are
executed once and shared across criteria.
"""

import logging
import time

import numpy as np
import pytest

from oraclebundle import agents as ag
from oraclebundle import bundle, master, qp
from oraclebundle.model import (
    AgentOracle,
    Minorant,
    PolyhedralFunction,
    QueryResult,
)
from oraclebundle.reference import reference_solve, true_gap

from test_qp import brute_force, random_problem

logging.getLogger("oraclebundle").setLevel(logging.ERROR)

SEEDS = (1, 2, 3, 4, 5)
BUDGET_ITERS = 150
BUDGET_SECONDS = 600.0

FAMILIES = {
    "supply-chain": lambda s: ag.gen_supply_chain(s),
    "mcf": lambda s: ag.gen_mcf(s, M=5, p=30, q=150),
    "resource": lambda s: ag.gen_resource(s, n=10, M=10),
    "federated": lambda s: ag.gen_federated(s, d=60, n_i=200),
}
REFERENCE_FAMILIES = ("supply-chain", "mcf", "resource")


def _report(name, ok, detail=""):
    print(f"\n{'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else ""))


@pytest.fixture(scope="module")
def runs():
    out = {}
    for fam, gen in FAMILIES.items():
        for seed in SEEDS:
            inst = gen(seed)
            t0 = time.perf_counter()
            res = bundle.solve(
                inst.g, inst.agents,
                bundle.SolverParams(max_iters=BUDGET_ITERS, check_level_prox=True),
            )
            out[fam, seed] = {
                "instance": inst,
                "result": res,
                "wall": time.perf_counter() - t0,
            }
    return out


@pytest.fixture(scope="module")
def references(runs):
    out = {}
    for fam in REFERENCE_FAMILIES:
        for seed in SEEDS:
            h_star, _ = reference_solve(runs[fam, seed]["instance"])
            out[fam, seed] = h_star
    return out


def test_convergence_budget(runs, references):
    failures = []
    for (fam, seed), r in runs.items():
        res, wall = r["result"], r["wall"]
        if res.status not in ("gap_abs", "gap_rel"):
            failures.append(f"{fam}/{seed}: status {res.status}")
        if len(res.trace) > BUDGET_ITERS or wall > BUDGET_SECONDS:
            failures.append(f"{fam}/{seed}: {len(res.trace)} iters, {wall:.0f}s")
        if res.omega_final > 1e-2 + 1e-12:
            failures.append(f"{fam}/{seed}: omega {res.omega_final:.4g}")
    for (fam, seed), h_star in references.items():
        res = runs[fam, seed]["result"]
        if not (res.L_best - 1e-6 <= h_star <= res.h_best + 1e-6):
            failures.append(f"{fam}/{seed}: sandwich broken "
                            f"L={res.L_best} h*={h_star} h={res.h_best}")
        if true_gap(res.h_best, h_star) > res.omega_final + 1e-12:
            failures.append(f"{fam}/{seed}: true gap exceeds online gap")
    ok = not failures
    _report("convergence budget (5 seeds x 4 examples, omega <= 1e-2, "
            "<=150 iters, <=10 min; true gap <= online gap)", ok,
            "; ".join(failures))
    assert ok, failures


def test_supply_chain_full_scale(runs):
    failures = []
    for seed in SEEDS:
        inst = runs["supply-chain", seed]["instance"]
        res = runs["supply-chain", seed]["result"]
        if inst.g.n != 300:
            failures.append(f"seed {seed}: n={inst.g.n}")
        if res.status not in ("gap_abs", "gap_rel") or len(res.trace) > 150:
            failures.append(f"seed {seed}: {res.status} in {len(res.trace)}")
    ok = not failures
    _report("supply chain at full scale (n=300): omega <= 1e-2 within 150 "
            "iterations", ok, "; ".join(failures))
    assert ok, failures


def test_descent_and_delta_suite(runs):
    failures = []
    for (fam, seed), r in runs.items():
        tr = r["result"].trace
        hs = [t.h_xk for t in tr]
        if any(b > a + 1e-12 for a, b in zip(hs, hs[1:])):
            failures.append(f"{fam}/{seed}: h_xk increased")
        if any(t.delta < -1e-8 * (1 + abs(t.h_xk)) for t in tr):
            failures.append(f"{fam}/{seed}: negative predicted decrease")
        Ls = [t.L_best for t in tr if np.isfinite(t.L_best)]
        if any(b < a - 2e-8 for a, b in zip(Ls, Ls[1:])):
            failures.append(f"{fam}/{seed}: L_best decreased")
    ok = not failures
    _report("descent & delta suite: h monotone, delta >= -1e-8*(1+|h|), "
            "L_best nondecreasing", ok, "; ".join(failures))
    assert ok, failures


def test_level_prox_equivalence(runs):
    worst = 0.0
    count = 0
    for r in runs.values():
        errs = r["result"].level_prox_errors
        count += len(errs)
        if errs:
            worst = max(worst, max(errs))
    ok = count > 0 and worst <= 1e-5
    _report("level/prox equivalence on discovery iterations "
            "(<= 1e-5 * (1+||x||))", ok,
            f"{count} checks, worst {worst:.2e}")
    assert ok


def test_qp_oracle_suite():
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(200):
        p = random_problem(rng)
        ref_obj, ref_z = brute_force(p)
        s = qp.qp_solve(p, tol=1e-9)
        scale = 1.0 + float(np.max(np.abs(ref_z)))
        prim_ok = (s.status == "optimal"
                   and np.max(np.abs(s.z - ref_z)) <= 1e-6 * scale
                   and abs(s.objective - ref_obj) <= 1e-6 * (1 + abs(ref_obj)))
        _, dual_res, comp = qp.kkt_residuals(p, s)
        dscale = 1.0 + float(np.max(np.abs(p.q)))
        dual_ok = dual_res <= 1e-6 * dscale and comp <= 1e-6 * dscale
        if not (prim_ok and dual_ok):
            bad += 1
    ok = bad == 0
    _report("QP oracle suite: 200 random QPs vs active-set enumeration "
            "(1e-6 primal and dual)", ok, f"{200 - bad}/200")
    assert ok


def _fd_check(agent, points, step=1e-5, tol=1e-3):
    worst = 0.0
    for x in points:
        base = agent.query(x)
        for j in range(agent.dim):
            e = np.zeros(agent.dim)
            e[j] = step
            fd = (agent.query(x + e).value - base.value) / step
            worst = max(worst, abs(fd - base.subgradient[j]))
    return worst


def _convexity_check(agent, sampler, pairs=50, slack=1e-6):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(pairs):
        x, y = sampler(rng), sampler(rng)
        rx = agent.query(x)
        vy = agent.query(y).value
        gap = (rx.value + rx.subgradient @ (y - x)) - vy
        worst = max(worst, gap / (1.0 + abs(vy)))
    return worst


def test_subgradient_suite():
    rng = np.random.default_rng(123)
    failures = []

    # trans-shipment stage (tight inner tolerance; generic unbalanced points)
    C = np.exp(rng.normal(0, 1, size=(3, 2)))
    E = np.exp(rng.normal(0.07, 0.7, size=(3, 2)))
    ts = ag.TransshipmentAgent(E / (2 * C), E, C, qp_tol=1e-11)
    pts = [rng.uniform(0.05, 0.6, ts.dim) for _ in range(10)]
    err = _fd_check(ts, pts)
    if err > 1e-3:
        failures.append(f"transshipment fd {err:.2e}")
    cx = _convexity_check(ts, lambda r: r.uniform(0.0, 0.8, ts.dim))
    if cx > 1e-6:
        failures.append(f"transshipment convexity {cx:.2e}")

    # commodity flow
    fl = ag.gen_mcf(1, M=2, p=6, q=10).agents[0]
    pts = [rng.uniform(0.05, 0.4, fl.dim) for _ in range(10)]
    err = _fd_check(fl, pts)
    if err > 1e-3:
        failures.append(f"flow fd {err:.2e}")
    cx = _convexity_check(fl, lambda r: r.uniform(0.0, 0.5, fl.dim))
    if cx > 1e-6:
        failures.append(f"flow convexity {cx:.2e}")

    # resource group
    rs = ag.gen_resource(1, n=4, M=2).agents[0]
    pts = [rng.uniform(0.05, 1.5, rs.dim) for _ in range(10)]
    err = _fd_check(rs, pts)
    if err > 1e-3:
        failures.append(f"resource fd {err:.2e}")
    cx = _convexity_check(rs, lambda r: r.uniform(0.0, 2.0, rs.dim))
    if cx > 1e-6:
        failures.append(f"resource convexity {cx:.2e}")

    # logistic location
    lg = ag.gen_federated(1, d=6, M=2, n_i=40).agents[0]
    pts = [rng.normal(0, 0.5, lg.dim) for _ in range(10)]
    err = _fd_check(lg, pts)
    if err > 1e-3:
        failures.append(f"logistic fd {err:.2e}")
    cx = _convexity_check(lg, lambda r: r.normal(0, 1.0, lg.dim))
    if cx > 1e-6:
        failures.append(f"logistic convexity {cx:.2e}")

    ok = not failures
    _report("subgradient suite: finite differences <= 1e-3 and convexity "
            "pairs <= 1e-6 for all agent families", ok, "; ".join(failures))
    assert ok, failures


def test_finite_memory(runs):
    base = runs["federated", 1]
    base_iters = len(base["result"].trace)
    detail = [f"inf:{base_iters}"]
    failures = []
    for m in (50, 30, 20):
        res = bundle.solve(base["instance"].g, base["instance"].agents,
                           bundle.SolverParams(max_iters=300, memory=m))
        it = len(res.trace)
        converged = res.status in ("gap_abs", "gap_rel")
        detail.append(f"m={m}:{it}{'' if converged else '!'}")
        if m >= 30 and (not converged or it > 2 * base_iters):
            failures.append(f"m={m}: {res.status} in {it} (budget {2 * base_iters})")
    ok = not failures
    _report("finite memory: federated m in {20,30,50,inf}; m >= 30 within "
            "2x the unlimited iteration count", ok, ", ".join(detail))
    assert ok, failures


def test_preconditioning(runs, references):
    from oraclebundle import precond

    base = runs["supply-chain", 1]
    h_star = references["supply-chain", 1]
    bound = 2.0 * (1e-3 + 1e-2 * abs(h_star))
    res_plain = bundle.solve(base["instance"].g, base["instance"].agents,
                             bundle.SolverParams(max_iters=150,
                                                 precondition=False))
    failures = []
    for label, res in (("scaled", base["result"]), ("unscaled", res_plain)):
        if abs(res.h_best - h_star) > bound:
            failures.append(f"{label}: |h-h*|={abs(res.h_best - h_star):.3g} "
                            f"> {bound:.3g}")

    # chain rule: exact value pass-through, subgradient scaling to 1e-12
    class Quad(AgentOracle):
        dim = 2

        def query(self, xi):
            d = np.asarray(xi) - np.array([0.3, -0.7])
            return QueryResult(float(d @ d), 2.0 * d)

    d_i = np.array([3.0, 0.25])
    wrapped = precond.wrap_oracle(Quad(), d_i)
    rng = np.random.default_rng(9)
    for _ in range(10):
        xbar = rng.normal(size=2)
        rw = wrapped.query(xbar)
        ro = Quad().query(d_i * xbar)
        if rw.value != ro.value:
            failures.append("chain rule value not exact")
        if np.max(np.abs(rw.subgradient - d_i * ro.subgradient)) > 1e-12:
            failures.append("chain rule subgradient beyond 1e-12")
    ok = not failures
    _report("preconditioning: scaled and unscaled runs both within "
            "2*(eps_abs + eps_rel*|h*|) of h*; chain rule exact", ok,
            "; ".join(failures))
    assert ok, failures


class _LinearOracle(AgentOracle):
    dim = 1

    def query(self, xi):
        return QueryResult(float(xi[0]), np.array([1.0]))


def _hull_weights(slopes, target):
    """Weights theta >= 0, sum 1, with slopes @ theta = target (least squares)."""
    S = np.asarray(slopes, dtype=float).T  # (dim, cuts)
    k = S.shape[1]
    prob = qp.QpProblem(
        P=S.T @ S + 1e-12 * np.eye(k),
        q=-S.T @ np.asarray(target, dtype=float),
        A_eq=np.ones((1, k)), b_eq=np.ones(1),
        lower=np.zeros(k), upper=np.full(k, np.inf),
    )
    sol = qp.qp_solve(prob, tol=1e-10)
    return sol.z, float(np.max(np.abs(S @ sol.z - target)))


def test_dual_estimate():
    failures = []

    # 1-d toy with analytic price: f(x) = x, g = -2x on [0, 1] -> q* = 1
    g = PolyhedralFunction(n=1, c=np.array([-2.0]), d=0.0,
                           lower=np.zeros(1), upper=np.ones(1))
    res = bundle.solve(g, [_LinearOracle()],
                       bundle.SolverParams(precondition=False))
    if abs(res.q_star[0] - 1.0) > 1e-5:
        failures.append(f"analytic price: q*={res.q_star[0]:.6f}")

    # consensus toy with curved agents: q* in the hull of recorded slopes
    g2 = PolyhedralFunction(n=2, c=np.zeros(2), d=0.0,
                            A_eq=[[1.0, -1.0]], b_eq=[0.0],
                            lower=np.full(2, -5.0), upper=np.full(2, 5.0))
    minorants = [Minorant(0, 1, floor=0.0), Minorant(1, 1, floor=0.0)]
    centers = (-1.0, 1.0)
    for i, c in enumerate(centers):
        for x in (-1.5, -0.4, 0.0, 0.4, 1.5):
            minorants[i].add_cut(np.array([x]), (x - c) ** 2,
                                 np.array([2.0 * (x - c)]))
    q_star, ms = master.extract_dual_estimate(minorants, g2)
    if ms.status != "optimal":
        failures.append(f"consensus dual solve {ms.status}")
    for i, m in enumerate(minorants):
        slopes = [c.subgradient for c in m.all_cuts()]
        theta, resid = _hull_weights(slopes, q_star[i:i + 1])
        if resid > 1e-5:
            failures.append(f"block {i}: q* {q_star[i]:.4f} outside slope hull")
        if np.min(theta) < -1e-8 or theta.sum() > 1 + 1e-8:
            failures.append(f"block {i}: invalid hull weights")
    ok = not failures
    _report("dual estimate: analytic price q*=1 recovered to 1e-5; q* in "
            "convex hull of recorded cut slopes", ok, "; ".join(failures))
    assert ok, failures
