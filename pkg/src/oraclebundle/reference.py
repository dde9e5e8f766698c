"""
Monolithic reference solve.

For instances whose agents are partial-minimization agents (inner
QP/LP + coupling), the whole problem min sum_i f_i(x_i) + g(x) is one
explicit QP over [x; w; z_1; ...; z_M]: each agent contributes its inner
objective, constraints, and coupling rows.  Solving it with the internal
QP solver gives the true optimal value h*, used for true-gap reporting
and sandwich checks.  Instances with analytic (non-QP) agents, such as
logistic regression, are not representable and raise.
"""

import numpy as np
import scipy.sparse

from . import qp
from .agents import PartialMinAgent

_REFERENCE_TOL = 1e-9


class UnsupportedInstanceError(ValueError):
    """The instance has agents without a QP-representable inner problem."""


def reference_solve(instance, tol=_REFERENCE_TOL):
    """Optimal value h* of the assembled monolithic QP.

    Returns (h_star, x_star) where x_star is the public-variable part of
    the minimizer.
    """
    g = instance.g
    for a in instance.agents:
        if not isinstance(a, PartialMinAgent):
            raise UnsupportedInstanceError(
                f"agent {getattr(a, 'name', '?')} has no inner QP; "
                "bracket h* with [L_best, h_best] instead"
            )

    n, n_aux = g.n, g.n_aux
    sizes = [a.dim for a in instance.agents]
    x_off = np.cumsum([0] + sizes)
    nz = [a.inner.nz for a in instance.agents]
    z_off = np.cumsum([n + n_aux] + nz)
    nv = int(z_off[-1])

    q_vec = np.zeros(nv)
    q_vec[: n + n_aux] = g.c
    P_blocks = [scipy.sparse.csr_matrix((n + n_aux, n + n_aux))]
    lower = np.full(nv, -np.inf)
    upper = np.full(nv, np.inf)
    lower[: n + n_aux] = g.lower
    upper[: n + n_aux] = g.upper

    eq_rows, eq_rhs = [], []
    in_rows, in_rhs = [], []

    def embed(A, col0, width):
        A = scipy.sparse.csr_matrix(A)
        return scipy.sparse.hstack(
            [scipy.sparse.csr_matrix((A.shape[0], col0)), A,
             scipy.sparse.csr_matrix((A.shape[0], nv - col0 - width))],
            format="csr")

    if g.A_eq.shape[0]:
        eq_rows.append(embed(g.A_eq, 0, n + n_aux))
        eq_rhs.append(g.b_eq)
    if g.A_in.shape[0]:
        in_rows.append(embed(g.A_in, 0, n + n_aux))
        in_rhs.append(g.b_in)

    for i, a in enumerate(instance.agents):
        inner = a.inner
        c0, w = int(z_off[i]), inner.nz
        if inner.P is not None:
            P_blocks.append(scipy.sparse.csr_matrix(inner.P))
        else:
            P_blocks.append(scipy.sparse.csr_matrix((w, w)))
        q_vec[c0:c0 + w] = np.asarray(inner.q, dtype=float)
        if inner.lower is not None:
            lower[c0:c0 + w] = inner.lower
        if inner.upper is not None:
            upper[c0:c0 + w] = inner.upper
        if inner.A_eq is not None:
            eq_rows.append(embed(inner.A_eq, c0, w))
            eq_rhs.append(np.asarray(inner.b_eq, dtype=float))
        if inner.A_in is not None:
            in_rows.append(embed(inner.A_in, c0, w))
            in_rhs.append(np.asarray(inner.b_in, dtype=float))

        kind, C = inner.coupling
        xs = int(x_off[i])
        m = a.dim
        X = scipy.sparse.lil_matrix((m, nv))
        X[:, xs:xs + m] = -scipy.sparse.identity(m)
        if kind in ("eq", "in"):
            X[:, c0:c0 + w] = scipy.sparse.csr_matrix(C)
            if kind == "eq":
                eq_rows.append(X.tocsr())
                eq_rhs.append(np.zeros(m))
            else:
                in_rows.append(X.tocsr())
                in_rhs.append(np.zeros(m))
        elif kind == "box":
            idx = np.asarray(C, dtype=int)
            for r, j in enumerate(idx):
                X[r, c0 + j] = 1.0
            in_rows.append(X.tocsr())
            in_rhs.append(np.zeros(m))
        else:
            raise UnsupportedInstanceError(f"unknown coupling kind {kind!r}")

    prob = qp.QpProblem(
        P=scipy.sparse.block_diag(P_blocks, format="csr"),
        q=q_vec,
        A_eq=scipy.sparse.vstack(eq_rows, format="csr") if eq_rows else None,
        b_eq=np.concatenate(eq_rhs) if eq_rhs else None,
        A_in=scipy.sparse.vstack(in_rows, format="csr") if in_rows else None,
        b_in=np.concatenate(in_rhs) if in_rhs else None,
        lower=lower,
        upper=upper,
    )
    sol = qp.qp_solve(prob, tol=tol)
    if sol.status == "max_iter":
        sol = qp.qp_solve(prob, tol=10.0 * tol)
    if sol.status != "optimal":
        raise RuntimeError(
            f"reference problem returned status {sol.status} "
            f"(residuals {sol.residuals})"
        )
    h_star = float(sol.objective + g.d)
    return h_star, sol.z[:n].copy()


def true_gap(h_val, h_star):
    """True relative optimality gap (h(x) - h*) / |h*|."""
    if h_star == 0.0:
        return np.inf if h_val != h_star else 0.0
    return (h_val - h_star) / abs(h_star)
