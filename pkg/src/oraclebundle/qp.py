"""
Dense/sparse convex QP and LP solver with accurate dual recovery.

Primal-dual interior-point method with a Mehrotra-style predictor
corrector on the inequality and box complementarities; equalities stay
in the KKT system.  The bundle method needs trustworthy duals (the
level-constraint multiplier, aggregate-cut weights, agent subgradients),
which is why this is an interior-point method rather than a first-order
splitting scheme.

Problem form:

    minimize    (1/2) z^T P z + q^T z
    subject to  A_eq z = b_eq          (duals y_eq)
                A_in z <= b_in         (duals y_in >= 0)
                lower <= z <= upper    (duals y_box_lower/upper >= 0)
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse
import scipy.sparse.linalg

from .model import DimensionError

# Static regularization of the quasi-definite KKT matrix.
KKT_REG = 1e-9

MAX_ITERS = 200

# Divergence heuristics; master problems are feasible by construction so
# these paths are defensive only.
DIVERGE_NORM = 1e13
DIVERGE_STALL = 30


def _as_matrix(A, ncols):
    if A is None:
        return scipy.sparse.csr_matrix((0, ncols))
    if scipy.sparse.issparse(A):
        A = A.tocsr()
    else:
        A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != ncols:
        raise DimensionError(f"constraint matrix has {A.shape[1]} columns, expected {ncols}")
    return A


@dataclass
class QpProblem:
    P: object
    q: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray = None
    A_in: object = None
    b_in: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        n = self.q.shape[0]
        if self.P is None:
            self.P = scipy.sparse.csr_matrix((n, n))
        if scipy.sparse.issparse(self.P):
            self.P = (self.P + self.P.T) * 0.5
            self.P = self.P.tocsr()
        else:
            self.P = np.asarray(self.P, dtype=float)
            if self.P.shape != (n, n):
                raise DimensionError(f"P must be {n}x{n}")
            self.P = (self.P + self.P.T) * 0.5
        self.A_eq = _as_matrix(self.A_eq, n)
        self.A_in = _as_matrix(self.A_in, n)
        self.b_eq = (
            np.zeros(0) if self.b_eq is None else np.atleast_1d(np.asarray(self.b_eq, dtype=float))
        )
        self.b_in = (
            np.zeros(0) if self.b_in is None else np.atleast_1d(np.asarray(self.b_in, dtype=float))
        )
        if self.b_eq.shape[0] != self.A_eq.shape[0]:
            raise DimensionError("b_eq length does not match A_eq")
        if self.b_in.shape[0] != self.A_in.shape[0]:
            raise DimensionError("b_in length does not match A_in")
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise DimensionError("box bounds must have length n")

    @property
    def n(self):
        return self.q.shape[0]

    def objective(self, z):
        return float(0.5 * z @ (self.P @ z) + self.q @ z)


@dataclass
class QpSolution:
    status: str
    z: np.ndarray
    y_eq: np.ndarray
    y_in: np.ndarray
    y_box_lower: np.ndarray
    y_box_upper: np.ndarray
    objective: float
    residuals: tuple = (np.nan, np.nan, np.nan)
    iterations: int = 0


def kkt_residuals(p, s):
    """(primal, dual, complementarity) infinity-norm residuals of a solution."""
    z = s.z
    prim = 0.0
    if p.A_eq.shape[0]:
        prim = max(prim, float(np.max(np.abs(p.A_eq @ z - p.b_eq))))
    if p.A_in.shape[0]:
        prim = max(prim, float(np.max(np.maximum(p.A_in @ z - p.b_in, 0.0))))
    fl = np.isfinite(p.lower)
    fu = np.isfinite(p.upper)
    if fl.any():
        prim = max(prim, float(np.max(np.maximum(p.lower[fl] - z[fl], 0.0))))
    if fu.any():
        prim = max(prim, float(np.max(np.maximum(z[fu] - p.upper[fu], 0.0))))

    grad = p.P @ z + p.q
    if p.A_eq.shape[0]:
        grad = grad + p.A_eq.T @ s.y_eq
    if p.A_in.shape[0]:
        grad = grad + p.A_in.T @ s.y_in
    grad = grad - s.y_box_lower + s.y_box_upper
    dual = float(np.max(np.abs(grad))) if grad.size else 0.0

    comp = 0.0
    if p.A_in.shape[0]:
        comp = max(comp, float(np.max(np.abs(s.y_in * (p.b_in - p.A_in @ z)))))
    if fl.any():
        comp = max(comp, float(np.max(np.abs(s.y_box_lower[fl] * (z[fl] - p.lower[fl])))))
    if fu.any():
        comp = max(comp, float(np.max(np.abs(s.y_box_upper[fu] * (p.upper[fu] - z[fu])))))
    return prim, dual, comp


def _diag_of(P):
    """Diagonal of P as a vector if P is a diagonal matrix, else None."""
    if scipy.sparse.issparse(P):
        d = P.diagonal()
        if (P - scipy.sparse.diags(d)).nnz == 0:
            return np.asarray(d, dtype=float)
        return None
    d = np.diag(P)
    if np.count_nonzero(P) == np.count_nonzero(d) and np.allclose(P, np.diag(d)):
        return np.asarray(d, dtype=float)
    return None


class _KktFactor:
    """Factorization of the regularized condensed KKT matrix.

    Sparse problems use SuperLU; small dense ones use LAPACK LU.  The
    static regularization makes the matrix quasi-definite, so plain LU
    with one step of iterative refinement is accurate enough.
    """

    def __init__(self, p, sigma_box, w_ineq, use_sparse, allow_schur=True):
        n, me, mi = p.n, p.A_eq.shape[0], p.A_in.shape[0]
        self.n, self.me, self.mi = n, me, mi
        self.mode = None
        self.use_sparse = use_sparse
        if allow_schur and me and not mi and me <= n and _diag_of(p.P) is not None:
            # Diagonal Hessian: eliminate the variable block and factor the
            # dense Schur complement on the (much smaller) constraint block.
            d = _diag_of(p.P) + sigma_box + KKT_REG
            A = scipy.sparse.vstack(
                [scipy.sparse.csr_matrix(p.A_eq), scipy.sparse.csr_matrix(p.A_in)],
                format="csr") if (me and mi) else scipy.sparse.csr_matrix(
                    p.A_eq if me else p.A_in)
            E = np.concatenate([np.full(me, KKT_REG), w_ineq + KKT_REG])
            dinv = 1.0 / d
            S = (A.multiply(dinv[None, :]) @ A.T).toarray() + np.diag(E)
            try:
                self.cho = scipy.linalg.cho_factor(S)
                self.mode = "schur"
                self.dinv, self.A, self.E = dinv, A, E
                return
            except scipy.linalg.LinAlgError:
                pass  # fall through to the general factorization
        if use_sparse:
            P = scipy.sparse.csr_matrix(p.P) if not scipy.sparse.issparse(p.P) else p.P
            H = P + scipy.sparse.diags(sigma_box + KKT_REG)
            blocks = [
                [H, p.A_eq.T if me else None, p.A_in.T if mi else None],
                [p.A_eq if me else None,
                 -KKT_REG * scipy.sparse.identity(me) if me else None, None],
                [p.A_in if mi else None, None,
                 -scipy.sparse.diags(w_ineq + KKT_REG) if mi else None],
            ]
            if not me:
                blocks = [[blocks[0][0], blocks[0][2]], [blocks[2][0], blocks[2][2]]]
                if not mi:
                    blocks = [[H]]
            elif not mi:
                blocks = [[blocks[0][0], blocks[0][1]], [blocks[1][0], blocks[1][1]]]
            K = scipy.sparse.bmat(blocks, format="csc")
            self.K = K
            self.lu = scipy.sparse.linalg.splu(K)
        else:
            N = n + me + mi
            K = np.zeros((N, N))
            Pd = p.P.toarray() if scipy.sparse.issparse(p.P) else p.P
            K[:n, :n] = Pd + np.diag(sigma_box + KKT_REG)
            if me:
                Ae = p.A_eq.toarray() if scipy.sparse.issparse(p.A_eq) else p.A_eq
                K[:n, n:n + me] = Ae.T
                K[n:n + me, :n] = Ae
                K[n:n + me, n:n + me] = -KKT_REG * np.eye(me)
            if mi:
                Ai = p.A_in.toarray() if scipy.sparse.issparse(p.A_in) else p.A_in
                K[:n, n + me:] = Ai.T
                K[n + me:, :n] = Ai
                K[n + me:, n + me:] = -np.diag(w_ineq + KKT_REG)
            self.K = K
            self.lu = scipy.linalg.lu_factor(K)

    def _schur_apply(self, sol):
        dz, w = sol[:self.n], sol[self.n:]
        top = dz / self.dinv + self.A.T @ w
        bot = self.A @ dz - self.E * w
        return np.concatenate([top, bot])

    def _schur_solve(self, rhs):
        r1, r23 = rhs[:self.n], rhs[self.n:]
        w = scipy.linalg.cho_solve(self.cho, self.A @ (self.dinv * r1) - r23)
        dz = self.dinv * (r1 - self.A.T @ w)
        return np.concatenate([dz, w])

    def solve(self, rhs):
        if self.mode == "schur":
            sol = self._schur_solve(rhs)
            sol += self._schur_solve(rhs - self._schur_apply(sol))
            return sol
        if self.use_sparse:
            sol = self.lu.solve(rhs)
            # one refinement step against the regularized matrix
            sol += self.lu.solve(rhs - self.K @ sol)
        else:
            sol = scipy.linalg.lu_solve(self.lu, rhs)
            sol += scipy.linalg.lu_solve(self.lu, rhs - self.K @ sol)
        return sol


def _nnls_multipliers(p, z2, a_in, a_lo, a_up):
    """Sign-constrained multiplier recovery for a fixed primal point.

    With linearly dependent active rows the minimum-norm KKT multipliers
    can be negative even though a nonnegative choice exists; solve the
    stationarity system by nonnegative least squares instead.
    """
    n, me = p.n, p.A_eq.shape[0]
    grad0 = np.asarray(p.P @ z2 + p.q, dtype=float).ravel()
    cols = []
    if me:
        Ae = p.A_eq.toarray() if scipy.sparse.issparse(p.A_eq) else p.A_eq
        cols += [Ae.T, -Ae.T]
    if a_in.size:
        Ai = p.A_in[a_in]
        cols.append((Ai.toarray() if scipy.sparse.issparse(Ai) else Ai).T)
    if a_lo.size:
        E = np.zeros((n, a_lo.size))
        E[a_lo, np.arange(a_lo.size)] = -1.0
        cols.append(E)
    if a_up.size:
        E = np.zeros((n, a_up.size))
        E[a_up, np.arange(a_up.size)] = 1.0
        cols.append(E)
    if not cols:
        return None
    A = np.hstack(cols)
    try:
        theta, _ = scipy.optimize.nnls(A, -grad0)
    except (RuntimeError, ValueError):
        return None
    if np.max(np.abs(A @ theta + grad0)) > 1e-9 * (1.0 + np.max(np.abs(p.q))):
        return None
    off = 0
    y2 = np.zeros(me)
    if me:
        y2 = theta[:me] - theta[me:2 * me]
        off = 2 * me
    lam2 = np.zeros(p.A_in.shape[0])
    lam2[a_in] = theta[off:off + a_in.size]
    off += a_in.size
    wl2 = np.zeros(n)
    wl2[a_lo] = theta[off:off + a_lo.size]
    off += a_lo.size
    wu2 = np.zeros(n)
    wu2[a_up] = theta[off:off + a_up.size]
    return z2, y2, lam2, wl2, wu2


def _polish(p, z, y, lam, wl, wu, s, zl, zu, fl, fu):
    """Refine an interior-point solution by active-set refinement.

    Starting from the actives suggested by the duals, repeatedly solve
    the equality-constrained KKT system, drop constraints with negative
    multipliers, and add violated ones.  The result is accepted only if
    it is feasible with nonnegative duals and improves the KKT residuals.
    """
    n, me, mi = p.n, p.A_eq.shape[0], p.A_in.shape[0]
    act_in = set(np.where(lam > s)[0].tolist()) if mi else set()
    act_lo = set(np.where(fl & (wl > zl))[0].tolist())
    act_up = set(np.where(fu & (wu > zu))[0].tolist())
    Ai_s = scipy.sparse.csr_matrix(p.A_in) if mi else None
    Ps = scipy.sparse.csr_matrix(p.P) if not scipy.sparse.issparse(p.P) else p.P
    Pd = None

    best = None
    tabu = set()
    pinned = set()
    dropped = set()
    nnls_left = 1
    for _round in range(30):
        a_in = np.fromiter(sorted(act_in), dtype=int, count=len(act_in))
        a_lo = np.fromiter(sorted(act_lo), dtype=int, count=len(act_lo))
        a_up = np.fromiter(sorted(act_up), dtype=int, count=len(act_up))
        blocks, rhs_blocks, labels = [], [], []
        if me:
            blocks.append(scipy.sparse.csr_matrix(p.A_eq))
            rhs_blocks.append(p.b_eq)
            labels.extend(("eq", i) for i in range(me))
        if a_in.size:
            blocks.append(Ai_s[a_in])
            rhs_blocks.append(p.b_in[a_in])
            labels.extend(("in", int(k)) for k in a_in)
        if a_lo.size:
            blocks.append(scipy.sparse.csr_matrix(
                (np.ones(a_lo.size), (np.arange(a_lo.size), a_lo)),
                shape=(a_lo.size, n)))
            rhs_blocks.append(p.lower[a_lo])
            labels.extend(("lo", int(j)) for j in a_lo)
        if a_up.size:
            blocks.append(scipy.sparse.csr_matrix(
                (np.ones(a_up.size), (np.arange(a_up.size), a_up)),
                shape=(a_up.size, n)))
            rhs_blocks.append(p.upper[a_up])
            labels.extend(("up", int(j)) for j in a_up)
        if blocks:
            A_act = scipy.sparse.vstack(blocks, format="csr")
            b_act = np.concatenate(rhs_blocks)
        else:
            A_act = scipy.sparse.csr_matrix((0, n))
            b_act = np.zeros(0)

        m_act = A_act.shape[0]
        rhs = np.concatenate([-p.q, b_act])
        rhs_scale = 1.0 + np.max(np.abs(rhs))
        if n + m_act > 800:
            K = scipy.sparse.bmat(
                [[Ps + 1e-11 * scipy.sparse.identity(n), A_act.T],
                 [A_act, -1e-11 * scipy.sparse.identity(m_act)]], format="csc")
            try:
                lu = scipy.sparse.linalg.splu(K)
            except RuntimeError:
                break
            sol = lu.solve(rhs)
            for _ in range(2):
                sol += lu.solve(rhs - K @ sol)
            rvec = K @ sol - rhs
            resid = np.max(np.abs(rvec))
        else:
            if Pd is None:
                Pd = p.P.toarray() if scipy.sparse.issparse(p.P) else p.P
            Ad = A_act.toarray()
            K = np.block([[Pd, Ad.T], [Ad, np.zeros((m_act, m_act))]])
            try:
                sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            except np.linalg.LinAlgError:
                break
            rvec = K @ sol - rhs
            resid = np.max(np.abs(rvec))
        if resid > 1e-9 * rhs_scale:
            # inconsistent active set (degenerate face): drop the active
            # row carrying the largest residual, with a tabu list so a
            # row that returns as violated forces a different drop next
            r_rows = np.abs(rvec[n:])
            for j in np.argsort(-r_rows):
                kind, idx = labels[j]
                if (kind == "eq" or (kind, idx) in tabu
                        or r_rows[j] < 1e-12 * rhs_scale):
                    continue
                {"in": act_in, "lo": act_lo, "up": act_up}[kind].discard(idx)
                tabu.add((kind, idx))
                break
            else:
                break
            continue
        z2 = sol[:n]
        nu = sol[n:]
        y2 = nu[:me]
        mult = nu[me:]
        lam2 = np.zeros(mi)
        wl2 = np.zeros(n)
        wu2 = np.zeros(n)
        lam2[a_in] = mult[:a_in.size]
        wl2[a_lo] = -mult[a_in.size:a_in.size + a_lo.size]
        wu2[a_up] = mult[a_in.size + a_lo.size:]

        slack_tol = 1e-8 * (1.0 + float(np.max(np.abs(z2))))
        viol_in = (np.where((Ai_s @ z2 - p.b_in) > slack_tol)[0].tolist()
                   if mi else [])
        viol_lo = np.where(fl & (z2 < p.lower - slack_tol))[0].tolist()
        viol_up = np.where(fu & (z2 > p.upper + slack_tol))[0].tolist()
        neg_in = [k for k in a_in if lam2[k] < -slack_tol]
        neg_lo = [j for j in a_lo if wl2[j] < -slack_tol]
        neg_up = [j for j in a_up if wu2[j] < -slack_tol]

        # on degenerate faces multipliers may hover slightly negative no
        # matter how actives are exchanged; keep the round whose clamped
        # solution has the smallest overall KKT error instead of
        # insisting on a perfectly signed one
        if (nnls_left
                and not (viol_in or viol_lo or viol_up)
                and (neg_in or neg_lo or neg_up)):
            # dependent active rows: the minimum-norm multipliers can be
            # negative even when a valid nonnegative set exists
            nnls_left -= 1
            rec = _nnls_multipliers(p, z2, a_in, a_lo, a_up)
            if rec is not None:
                best = (0.0, rec)
                break
        cand = (z2, y2, np.maximum(lam2, 0.0), np.maximum(wl2, 0.0),
                np.maximum(wu2, 0.0))
        score = max(kkt_residuals(
            p, QpSolution("optimal", *cand, 0.0)))
        if best is None or score < best[0]:
            best = (score, cand)
        if not (viol_in or viol_lo or viol_up or neg_in or neg_lo or neg_up):
            break
        # restore feasibility first; dropping and adding simultaneously
        # cycles on degenerate active sets, so release only the single
        # most negative multiplier once all violations are resolved
        if viol_in or viol_lo or viol_up:
            act_in.update(viol_in)
            act_lo.update(viol_lo)
            act_up.update(viol_up)
            # a row that returns after being released was a bad drop
            # candidate: pin it so the next release tries an exchange
            # through a different row instead of cycling
            for kind, rows in (("in", viol_in), ("lo", viol_lo),
                               ("up", viol_up)):
                for idx in rows:
                    if (kind, idx) in dropped:
                        pinned.add((kind, idx))
        else:
            cands = sorted(
                [("in", k, lam2[k]) for k in neg_in]
                + [("lo", j, wl2[j]) for j in neg_lo]
                + [("up", j, wu2[j]) for j in neg_up],
                key=lambda t: t[2])
            for kind, idx, _ in cands:
                if (kind, idx) in pinned:
                    continue
                {"in": act_in, "lo": act_lo, "up": act_up}[kind].discard(idx)
                dropped.add((kind, idx))
                break
            else:
                break

    if best is None:
        return z, y, lam, wl, wu
    z2, y2, lam2, wl2, wu2 = best[1]
    before = kkt_residuals(p, QpSolution("optimal", z, y, lam, wl, wu, 0.0))
    after = kkt_residuals(p, QpSolution("optimal", z2, y2, lam2, wl2, wu2, 0.0))
    if max(after) <= max(max(before), 1e-12):
        return z2, y2, lam2, wl2, wu2
    return z, y, lam, wl, wu


def lagrangian_value(p, s):
    """Lagrangian of a solution: a weak-duality lower bound on the optimum.

    Evaluated at the returned primal-dual pair this differs from the dual
    function value only by terms of order (dual residual) * ||z||, so for a
    well-converged solve it certifies the optimum from below even when the
    primal objective carries a small positive duality gap.
    """
    z = s.z
    val = p.objective(z)
    if p.A_eq.shape[0]:
        val += float(s.y_eq @ (p.A_eq @ z - p.b_eq))
    if p.A_in.shape[0]:
        val += float(s.y_in @ (p.A_in @ z - p.b_in))
    fl = np.isfinite(p.lower)
    fu = np.isfinite(p.upper)
    if fl.any():
        val += float(s.y_box_lower[fl] @ (p.lower[fl] - z[fl]))
    if fu.any():
        val += float(s.y_box_upper[fu] @ (z[fu] - p.upper[fu]))
    return val


def qp_solve(p, tol=1e-8, max_iters=MAX_ITERS):
    """Solve a convex QP/LP; never raises on numerical failure, returns a status.

    Variables whose box has (near-)zero width are fixed and eliminated up
    front; interior-point iterations cannot keep such components strictly
    inside their bounds.  Their box duals are recovered from stationarity.
    """
    n = p.n
    scale = np.maximum(1.0, np.maximum(
        np.where(np.isfinite(p.lower), np.abs(p.lower), 0.0),
        np.where(np.isfinite(p.upper), np.abs(p.upper), 0.0)))
    width = p.upper - p.lower
    if np.any(width < -1e-7 * scale):
        zed = np.zeros(n)
        return QpSolution("infeasible", zed, np.zeros(p.A_eq.shape[0]),
                          np.zeros(p.A_in.shape[0]), np.zeros(n), np.zeros(n),
                          p.objective(zed))
    fixed = width <= 1e-8 * scale
    if fixed.any():
        sol = _solve_with_fixed(p, fixed, tol, max_iters)
    else:
        sol = _qp_solve_free(p, tol, max_iters)
    if sol.status == "max_iter":
        # boxes slightly wider than the fixing threshold still starve the
        # interior-point iteration; fixing them at the midpoint perturbs
        # the solution by at most half the width
        near = width <= 1e-6 * scale
        if near.any() and not np.array_equal(near, fixed):
            retry = _solve_with_fixed(p, near, tol, max_iters)
            if retry.status == "optimal":
                return retry
    return sol


def _solve_with_fixed(p, fixed, tol, max_iters):
    n = p.n
    free = ~fixed
    v = np.clip(0.5 * (p.lower[fixed] + p.upper[fixed]),
                np.minimum(p.lower[fixed], p.upper[fixed]),
                np.maximum(p.lower[fixed], p.upper[fixed]))
    fi = np.flatnonzero(fixed)
    fr = np.flatnonzero(free)

    def cols(A, idx):
        if scipy.sparse.issparse(A):
            return A.tocsc()[:, idx].tocsr()
        return A[:, idx]

    P_ff = cols(p.P, fr)
    P_ff = P_ff[fr] if not scipy.sparse.issparse(P_ff) else P_ff[fr]
    q_red = p.q[fr] + np.asarray(cols(p.P, fi)[fr] @ v).ravel()

    def reduce_rows(A, b):
        if A.shape[0] == 0:
            return A if not scipy.sparse.issparse(A) else A.tocsr(), b, np.zeros(0, dtype=bool)
        A_fr = cols(A, fr)
        b_new = b - np.asarray(cols(A, fi) @ v).ravel()
        if scipy.sparse.issparse(A_fr):
            rn = np.asarray(abs(A_fr).sum(axis=1)).ravel()
        else:
            rn = np.abs(A_fr).sum(axis=1)
        empty = rn <= 1e-14
        return A_fr, b_new, empty

    A_eq_r, b_eq_r, eq_empty = reduce_rows(p.A_eq, p.b_eq)
    A_in_r, b_in_r, in_empty = reduce_rows(p.A_in, p.b_in)

    res_scale = 1.0 + max(float(np.max(np.abs(p.b_eq))) if p.b_eq.size else 0.0,
                          float(np.max(np.abs(p.b_in))) if p.b_in.size else 0.0)

    def fail(status):
        zed = np.zeros(n)
        zed[fixed] = v
        return QpSolution(status, zed, np.zeros(p.A_eq.shape[0]),
                          np.zeros(p.A_in.shape[0]), np.zeros(n), np.zeros(n),
                          p.objective(zed))

    # constraint rows touching only fixed variables must already hold
    if eq_empty.any():
        if np.max(np.abs(b_eq_r[eq_empty])) > math.sqrt(tol) * res_scale:
            return fail("infeasible")
    if in_empty.any():
        if np.max(-b_in_r[in_empty]) > math.sqrt(tol) * res_scale:
            return fail("infeasible")

    keep_eq = ~eq_empty
    keep_in = ~in_empty
    red = QpProblem(
        P=P_ff, q=q_red,
        A_eq=A_eq_r[keep_eq] if A_eq_r.shape[0] else None,
        b_eq=b_eq_r[keep_eq] if A_eq_r.shape[0] else None,
        A_in=A_in_r[keep_in] if A_in_r.shape[0] else None,
        b_in=b_in_r[keep_in] if A_in_r.shape[0] else None,
        lower=p.lower[fr], upper=p.upper[fr],
    )
    if red.n == 0:
        sub = QpSolution("optimal", np.zeros(0), np.zeros(red.A_eq.shape[0]),
                         np.zeros(red.A_in.shape[0]), np.zeros(0), np.zeros(0), 0.0)
    else:
        sub = _qp_solve_free(red, tol, max_iters)

    z = np.zeros(n)
    z[fi] = v
    z[fr] = sub.z
    y_eq = np.zeros(p.A_eq.shape[0])
    y_eq[np.flatnonzero(keep_eq)] = sub.y_eq
    y_in = np.zeros(p.A_in.shape[0])
    y_in[np.flatnonzero(keep_in)] = sub.y_in
    wl = np.zeros(n)
    wu = np.zeros(n)
    wl[fr] = sub.y_box_lower
    wu[fr] = sub.y_box_upper
    grad = np.asarray(p.P @ z).ravel() + p.q
    if p.A_eq.shape[0]:
        grad = grad + np.asarray(p.A_eq.T @ y_eq).ravel()
    if p.A_in.shape[0]:
        grad = grad + np.asarray(p.A_in.T @ y_in).ravel()
    wl[fi] = np.maximum(grad[fi], 0.0)
    wu[fi] = np.maximum(-grad[fi], 0.0)
    out = QpSolution(sub.status, z, y_eq, y_in, wl, wu, p.objective(z),
                     iterations=sub.iterations)
    out.residuals = kkt_residuals(p, out)
    return out


def _row_scales(A, b):
    """Per-row equilibration factors: the row infinity norms."""
    if A.shape[0] == 0:
        return np.zeros(0)
    if scipy.sparse.issparse(A):
        rn = np.asarray(abs(A).max(axis=1).todense()).ravel()
    else:
        rn = np.max(np.abs(A), axis=1)
    return np.maximum(rn, 1e-10)


def _qp_solve_free(p, tol=1e-8, max_iters=MAX_ITERS):
    """Normalize the objective magnitude, then solve with row scaling.

    Steep penalty objectives (coefficients ~1e3) push the duals to the
    same magnitude and leave the interior-point iteration stalled orders
    of magnitude above its stopping test; dividing the objective by its
    largest coefficient restores O(1) duals.  The duals and objective are
    mapped back afterwards.
    """
    q_max = float(np.max(np.abs(p.q))) if p.n else 0.0
    if scipy.sparse.issparse(p.P):
        p_max = float(np.max(np.abs(p.P.data))) if p.P.nnz else 0.0
    else:
        p_max = float(np.max(np.abs(p.P))) if p.P.size else 0.0
    s_obj = max(q_max, p_max)
    if s_obj > 10.0:
        ps = QpProblem(P=p.P / s_obj, q=p.q / s_obj,
                       A_eq=p.A_eq if p.A_eq.shape[0] else None,
                       b_eq=p.b_eq if p.A_eq.shape[0] else None,
                       A_in=p.A_in if p.A_in.shape[0] else None,
                       b_in=p.b_in if p.A_in.shape[0] else None,
                       lower=p.lower, upper=p.upper)
        sol = _qp_solve_rows(ps, tol, max_iters)
        for attr in ("y_eq", "y_in", "y_box_lower", "y_box_upper"):
            setattr(sol, attr, getattr(sol, attr) * s_obj)
        sol.objective = p.objective(sol.z)
        sol.residuals = kkt_residuals(p, sol)
        return sol
    return _qp_solve_rows(p, tol, max_iters)


def _qp_solve_rows(p, tol=1e-8, max_iters=MAX_ITERS):
    """Equilibrate constraint rows, solve, and map the duals back.

    Master problems mix O(1) projection objectives with cut and level
    rows whose coefficients reach 1e4; without row scaling the interior
    point stopping test is far too loose for the small rows.
    """
    s_eq = _row_scales(p.A_eq, p.b_eq)
    s_in = _row_scales(p.A_in, p.b_in)
    need = (s_eq.size and (s_eq.max() > 10.0 or s_eq.min() < 0.1)) or (
        s_in.size and (s_in.max() > 10.0 or s_in.min() < 0.1))
    if not need:
        return _qp_solve_retry(p, tol, max_iters)

    def scale_rows(A, s):
        if A.shape[0] == 0:
            return None
        if scipy.sparse.issparse(A):
            return scipy.sparse.diags(1.0 / s) @ A
        return A / s[:, None]

    ps = QpProblem(
        P=p.P, q=p.q,
        A_eq=scale_rows(p.A_eq, s_eq), b_eq=p.b_eq / s_eq if s_eq.size else None,
        A_in=scale_rows(p.A_in, s_in), b_in=p.b_in / s_in if s_in.size else None,
        lower=p.lower, upper=p.upper,
    )
    sol = _qp_solve_retry(ps, tol, max_iters)
    sol.y_eq = sol.y_eq / s_eq if s_eq.size else sol.y_eq
    sol.y_in = sol.y_in / s_in if s_in.size else sol.y_in
    sol.objective = p.objective(sol.z)
    sol.residuals = kkt_residuals(p, sol)
    return sol


def _qp_solve_retry(p, tol=1e-8, max_iters=MAX_ITERS):
    sol = _qp_solve_core(p, tol, max_iters)
    if sol.status == "max_iter":
        # the Schur fast path can diverge on badly conditioned problems;
        # one retry with the full quasi-definite factorization
        retry = _qp_solve_core(p, tol, max_iters, allow_schur=False)
        if retry.status != "max_iter" or max(retry.residuals) < max(sol.residuals):
            return retry
    return sol


def _qp_solve_core(p, tol=1e-8, max_iters=MAX_ITERS, allow_schur=True):
    n, me, mi = p.n, p.A_eq.shape[0], p.A_in.shape[0]
    fl = np.isfinite(p.lower)
    fu = np.isfinite(p.upper)
    nl, nu = int(fl.sum()), int(fu.sum())
    n_comp = mi + nl + nu
    use_sparse = (
        scipy.sparse.issparse(p.P)
        or scipy.sparse.issparse(p.A_eq)
        or scipy.sparse.issparse(p.A_in)
        or n + me + mi > 600
    )

    data_scale = 1.0 + max(
        float(np.max(np.abs(p.q))) if n else 0.0,
        float(np.max(np.abs(p.b_eq))) if me else 0.0,
        float(np.max(np.abs(p.b_in))) if mi else 0.0,
    )

    def make_solution(status, z, y, lam, wl, wu, it):
        sol = QpSolution(
            status=status,
            z=z,
            y_eq=y,
            y_in=lam,
            y_box_lower=wl,
            y_box_upper=wu,
            objective=p.objective(z),
            iterations=it,
        )
        sol.residuals = kkt_residuals(p, sol)
        return sol

    if n_comp == 0:
        # Equality-constrained (or unconstrained) QP: a single KKT solve.
        fac = _KktFactor(p, np.zeros(n), np.zeros(0), use_sparse)
        rhs = np.concatenate([-p.q, p.b_eq])
        sol = fac.solve(rhs)
        z, y = sol[:n], sol[n:]
        out = make_solution("optimal", z, y, np.zeros(0), np.zeros(n), np.zeros(n), 1)
        if max(out.residuals[:2]) > math.sqrt(tol) * data_scale:
            out.status = "unbounded" if np.max(np.abs(z)) > DIVERGE_NORM else "max_iter"
        return out

    # Starting point: regularized KKT solve with unit scalings, then push
    # strictly inside the bounds / positive cone.
    fac0 = _KktFactor(p, np.where(fl | fu, 1.0, 0.0), np.ones(mi), use_sparse)
    rhs0 = np.concatenate([-p.q, p.b_eq, p.b_in])
    sol0 = fac0.solve(rhs0)
    z = sol0[:n].copy()
    y = sol0[n:n + me].copy()

    lo, up = p.lower, p.upper
    width = np.where(fl & fu, up - lo, np.inf)
    margin = np.minimum(1.0, 0.25 * width)
    z = np.where(fl, np.maximum(z, lo + margin * 0.5), z)
    z = np.where(fu, np.minimum(z, up - margin * 0.5), z)

    s = np.maximum(p.b_in - p.A_in @ z, 1.0) if mi else np.zeros(0)
    lam = np.ones(mi)
    wl = np.where(fl, 1.0, 0.0)
    wu = np.where(fu, 1.0, 0.0)

    zl = np.where(fl, z - lo, 1.0)  # placeholder 1.0 on non-finite entries
    zu = np.where(fu, up - z, 1.0)

    stall = 0
    best_prim = np.inf
    best_score = np.inf
    best_state = None
    for it in range(1, max_iters + 1):
        zl = np.where(fl, np.maximum(z - lo, 1e-14), 1.0)
        zu = np.where(fu, np.maximum(up - z, 1e-14), 1.0)

        r_d = p.P @ z + p.q - wl + wu
        if me:
            r_d = r_d + p.A_eq.T @ y
        if mi:
            r_d = r_d + p.A_in.T @ lam
        r_pe = p.A_eq @ z - p.b_eq if me else np.zeros(0)
        r_pi = p.A_in @ z + s - p.b_in if mi else np.zeros(0)

        mu = (
            (s @ lam if mi else 0.0)
            + (zl[fl] @ wl[fl] if nl else 0.0)
            + (zu[fu] @ wu[fu] if nu else 0.0)
        ) / n_comp

        prim = max(
            float(np.max(np.abs(r_pe))) if me else 0.0,
            float(np.max(np.maximum(p.A_in @ z - p.b_in, 0.0))) if mi else 0.0,
            float(np.max(np.maximum(lo[fl] - z[fl], 0.0))) if nl else 0.0,
            float(np.max(np.maximum(z[fu] - up[fu], 0.0))) if nu else 0.0,
        )
        dual = float(np.max(np.abs(r_d))) if n else 0.0
        score = max(prim, dual, mu)
        if score <= tol * data_scale:
            z, y, lam, wl, wu = _polish(p, z, y, lam, wl, wu, s, zl, zu, fl, fu)
            return make_solution("optimal", z, y, lam, wl, wu, it)
        if score < best_score:
            best_score = score
            best_state = (z.copy(), y.copy(), lam.copy(), wl.copy(), wu.copy(),
                          s.copy(), zl.copy(), zu.copy(), it)
        elif score > 1e6 * max(best_score, tol * data_scale):
            break  # endgame blow-up; rescue from the best iterate below

        if np.max(np.abs(z)) > DIVERGE_NORM:
            status = "unbounded" if prim <= math.sqrt(tol) * data_scale else "infeasible"
            return make_solution(status, z, y, lam, wl, wu, it)
        if prim > 0.999 * best_prim and prim > tol * data_scale and mu < tol:
            stall += 1
            if stall >= DIVERGE_STALL:
                return make_solution("infeasible", z, y, lam, wl, wu, it)
        else:
            stall = 0
        best_prim = min(best_prim, prim)

        sigma_box = np.zeros(n)
        sigma_box[fl] += wl[fl] / zl[fl]
        sigma_box[fu] += wu[fu] / zu[fu]
        sigma_box = np.minimum(sigma_box, 1e16)
        with np.errstate(over="ignore", divide="ignore"):
            w_ineq = np.minimum(s / np.maximum(lam, 1e-300), 1e16) if mi else np.zeros(0)
        try:
            # the Schur fast path loses dual accuracy once the barrier is
            # small; finish with the full quasi-definite factorization
            fac = _KktFactor(p, sigma_box, w_ineq, use_sparse,
                             allow_schur=allow_schur and mu > 1e3 * tol * data_scale)
        except (RuntimeError, ValueError):
            return make_solution("max_iter", z, y, lam, wl, wu, it)

        def solve_direction(comp_s, comp_l, comp_u):
            rd_mod = -r_d.copy()
            rd_mod[fl] += comp_l[fl] / zl[fl]
            rd_mod[fu] -= comp_u[fu] / zu[fu]
            ri_mod = -r_pi - comp_s / lam if mi else np.zeros(0)
            rhs = np.concatenate([rd_mod, -r_pe, ri_mod])
            d = fac.solve(rhs)
            dz = d[:n]
            dy = d[n:n + me]
            dlam = d[n + me:]
            ds = (comp_s - s * dlam) / lam if mi else np.zeros(0)
            dwl = np.zeros(n)
            dwu = np.zeros(n)
            dwl[fl] = (comp_l[fl] - wl[fl] * dz[fl]) / zl[fl]
            dwu[fu] = (comp_u[fu] + wu[fu] * dz[fu]) / zu[fu]
            return dz, dy, dlam, ds, dwl, dwu

        def max_step(v, dv, mask=None):
            if mask is not None:
                v, dv = v[mask], dv[mask]
            if v.size == 0:
                return 1.0
            neg = dv < 0
            if not neg.any():
                return 1.0
            return float(min(1.0, np.min(-v[neg] / dv[neg])))

        # predictor (affine scaling) direction
        comp_s = -s * lam if mi else np.zeros(0)
        comp_l = np.where(fl, -zl * wl, 0.0)
        comp_u = np.where(fu, -zu * wu, 0.0)
        dz, dy, dlam, ds, dwl, dwu = solve_direction(comp_s, comp_l, comp_u)

        ap = min(
            max_step(s, ds) if mi else 1.0,
            max_step(zl, dz, fl),
            max_step(zu, -dz, fu),
        )
        ad = min(
            max_step(lam, dlam) if mi else 1.0,
            max_step(wl, dwl, fl),
            max_step(wu, dwu, fu),
        )
        mu_aff = (
            ((s + ap * ds) @ (lam + ad * dlam) if mi else 0.0)
            + ((zl + ap * dz)[fl] @ (wl + ad * dwl)[fl] if nl else 0.0)
            + ((zu - ap * dz)[fu] @ (wu + ad * dwu)[fu] if nu else 0.0)
        ) / n_comp
        sigma = (max(mu_aff, 0.0) / max(mu, 1e-300)) ** 3

        # corrector direction
        comp_s = sigma * mu - s * lam - ds * dlam if mi else np.zeros(0)
        comp_l = np.where(fl, sigma * mu - zl * wl - dz * dwl, 0.0)
        comp_u = np.where(fu, sigma * mu - zu * wu + dz * dwu, 0.0)
        dz, dy, dlam, ds, dwl, dwu = solve_direction(comp_s, comp_l, comp_u)

        frac = max(0.99, 1.0 - 0.1 * mu)
        frac = min(frac, 0.9999)
        ap = frac * min(
            max_step(s, ds) if mi else 1.0,
            max_step(zl, dz, fl),
            max_step(zu, -dz, fu),
        )
        ad = frac * min(
            max_step(lam, dlam) if mi else 1.0,
            max_step(wl, dwl, fl),
            max_step(wu, dwu, fu),
        )

        def merit(zt, yt, lamt, wlt, wut, st):
            rd = np.asarray(p.P @ zt).ravel() + p.q - wlt + wut
            if me:
                rd = rd + p.A_eq.T @ yt
            if mi:
                rd = rd + p.A_in.T @ lamt
            prim_t = max(
                float(np.max(np.abs(p.A_eq @ zt - p.b_eq))) if me else 0.0,
                float(np.max(np.maximum(p.A_in @ zt - p.b_in, 0.0))) if mi else 0.0,
                float(np.max(np.maximum(lo[fl] - zt[fl], 0.0))) if nl else 0.0,
                float(np.max(np.maximum(zt[fu] - up[fu], 0.0))) if nu else 0.0,
            )
            zlt = np.where(fl, np.maximum(zt - lo, 0.0), 1.0)
            zut = np.where(fu, np.maximum(up - zt, 0.0), 1.0)
            mu_t = (
                (st @ lamt if mi else 0.0)
                + (zlt[fl] @ wlt[fl] if nl else 0.0)
                + (zut[fu] @ wut[fu] if nu else 0.0)
            ) / n_comp
            return max(prim_t, float(np.max(np.abs(rd))) if n else 0.0, mu_t)

        # step safeguard: near convergence a full Mehrotra step can blow
        # the iterate up; halve until the merit stops exploding.  Early
        # iterations legitimately trade residual growth for progress, so
        # only guard the endgame.
        guard = score <= 1e-3 * data_scale
        shrink = 1.0
        for attempt in range(6):
            zt = z + shrink * ap * dz
            yt = y + shrink * ad * dy
            st = s + shrink * ap * ds if mi else s
            lamt = lam + shrink * ad * dlam if mi else lam
            wlt = wl + shrink * ad * dwl
            wut = wu + shrink * ad * dwu
            if not guard or merit(zt, yt, lamt, wlt, wut, st) <= 1e6 * max(
                    score, tol * data_scale):
                break
            shrink *= 0.5
        z, y, wl, wu = zt, yt, wlt, wut
        if mi:
            s, lam = st, lamt

    # no convergence: fall back to the best iterate seen and try to polish
    # it onto the optimal active set
    if best_state is not None:
        z, y, lam, wl, wu, s, zl, zu, it_b = best_state
        z, y, lam, wl, wu = _polish(p, z, y, lam, wl, wu, s, zl, zu, fl, fu)
        out = make_solution("max_iter", z, y, lam, wl, wu, max_iters)
        # same measure as the in-loop stopping test: average complementarity
        zl_f = np.where(fl, np.maximum(z - lo, 0.0), 1.0)
        zu_f = np.where(fu, np.maximum(up - z, 0.0), 1.0)
        s_f = np.maximum(p.b_in - p.A_in @ z, 0.0) if mi else np.zeros(0)
        mu_f = (
            (s_f @ lam if mi else 0.0)
            + (zl_f[fl] @ wl[fl] if nl else 0.0)
            + (zu_f[fu] @ wu[fu] if nu else 0.0)
        ) / n_comp
        if max(out.residuals[0], out.residuals[1], mu_f) <= tol * data_scale:
            out.status = "optimal"
        return out
    return make_solution("max_iter", z, y, lam, wl, wu, max_iters)


def lp_feasible(A_eq=None, b_eq=None, A_in=None, b_in=None, lower=None, upper=None, n=None):
    """Phase-1 check that a polyhedron is nonempty (validates dom g != empty).

    Minimizes elastic infeasibility over the constraints; feasible iff
    the optimal elastic mass is <= 1e-7.
    """
    if n is None:
        for M in (A_eq, A_in):
            if M is not None:
                n = np.atleast_2d(np.asarray(M)).shape[1] if not scipy.sparse.issparse(M) else M.shape[1]
                break
        else:
            for v in (lower, upper):
                if v is not None:
                    n = np.asarray(v).shape[0]
                    break
    if n is None:
        return True
    Ae = _as_matrix(A_eq, n)
    Ai = _as_matrix(A_in, n)
    me, mi = Ae.shape[0], Ai.shape[0]
    if me == 0 and mi == 0:
        lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, float)
        up = np.full(n, np.inf) if upper is None else np.asarray(upper, float)
        return bool(np.all(lo <= up))

    # variables: (z, t_eq_pos, t_eq_neg, t_in), elastic objective 1^T t
    nt = n + 2 * me + mi
    q = np.concatenate([np.zeros(n), np.ones(2 * me + mi)])
    Ie = scipy.sparse.identity(me)
    Ze = scipy.sparse.csr_matrix((me, mi))
    A_eq_full = (
        scipy.sparse.hstack([scipy.sparse.csr_matrix(Ae), Ie, -Ie, Ze], format="csr")
        if me
        else None
    )
    b_eq_full = np.asarray(b_eq, float).ravel() if me else None
    A_in_full = (
        scipy.sparse.hstack(
            [scipy.sparse.csr_matrix(Ai),
             scipy.sparse.csr_matrix((mi, 2 * me)),
             -scipy.sparse.identity(mi)],
            format="csr",
        )
        if mi
        else None
    )
    b_in_full = np.asarray(b_in, float).ravel() if mi else None
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, float)
    up = np.full(n, np.inf) if upper is None else np.asarray(upper, float)
    lower_full = np.concatenate([lo, np.zeros(2 * me + mi)])
    upper_full = np.concatenate([up, np.full(2 * me + mi, np.inf)])
    prob = QpProblem(
        P=None, q=q, A_eq=A_eq_full, b_eq=b_eq_full, A_in=A_in_full, b_in=b_in_full,
        lower=lower_full, upper=upper_full,
    )
    sol = qp_solve(prob, tol=1e-9)
    if sol.status not in ("optimal", "max_iter"):
        return False
    return sol.objective <= 1e-7
