"""
Diagonal preconditioning layer.

The solver works with the scaled variable xbar = D^-1 x where
D = diag(u - l) is built from the variable bounds, so every scaled
variable spans a unit range.  Agents and the structured function keep
their original spaces; this module is the thin interface between them:
query points are mapped out by D, subgradients mapped back as
qbar = D q, and function values pass through unchanged.
"""

import logging

import numpy as np

from .model import AgentOracle, ConfigurationError, Minorant, PolyhedralSet, PolyhedralFunction, QueryResult

log = logging.getLogger(__name__)


class DiagonalScaling:
    """Positive diagonal D together with its per-block slices."""

    def __init__(self, d, sizes):
        d = np.asarray(d, dtype=float)
        if np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise ConfigurationError("scaling entries must be positive and finite")
        self.d = d
        self.sizes = tuple(sizes)
        off = np.cumsum([0] + list(sizes))
        self.block_diags = [d[off[i]:off[i + 1]] for i in range(len(sizes))]


def scaling_from_bounds(lower, upper, sizes):
    """D = diag(u - l); components with an infinite bound get unit scaling."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    fin = np.isfinite(lower) & np.isfinite(upper)
    if np.any(lower[fin] >= upper[fin]):
        raise ConfigurationError("bounds must satisfy lower < upper componentwise")
    d = np.ones(lower.shape[0])
    d[fin] = upper[fin] - lower[fin]
    if not fin.all():
        log.warning(
            "%d variable(s) lack finite bounds; using unit scaling for them",
            int((~fin).sum()),
        )
    return DiagonalScaling(d, sizes)


def scale_structured(g, scaling):
    """gbar(xbar) = g(D xbar): column-scale constraints/objective, shrink the box."""
    d = scaling.d
    if d.shape[0] != g.n:
        raise ConfigurationError("scaling dimension does not match g")
    full = np.concatenate([d, np.ones(g.n_aux)])

    def colscale(A):
        if A.shape[0] == 0:
            return A
        return A * full[None, :] if not hasattr(A, "multiply") else A.multiply(full[None, :])

    return PolyhedralFunction(
        n=g.n,
        c=g.c * full,
        d=g.d,
        A_eq=colscale(g.A_eq) if g.A_eq.shape[0] else None,
        b_eq=g.b_eq if g.A_eq.shape[0] else None,
        A_in=colscale(g.A_in) if g.A_in.shape[0] else None,
        b_in=g.b_in if g.A_in.shape[0] else None,
        lower=g.lower / full,
        upper=g.upper / full,
        n_aux=g.n_aux,
    )


class ScaledOracle(AgentOracle):
    """Wrap an agent so the solver can query it in the scaled space."""

    def __init__(self, inner, d_i):
        self.inner = inner
        self.d_i = np.asarray(d_i, dtype=float)
        self.dim = inner.dim

    def query(self, xbar):
        res = self.inner.query(self.d_i * np.asarray(xbar, dtype=float))
        return QueryResult(res.value, self.d_i * res.subgradient)

    def initial_minorant(self, block=0, memory=None):
        m0 = self.inner.initial_minorant(block=block, memory=memory)
        dom = m0.known_domain
        if dom is not None:
            d = self.d_i
            dom = PolyhedralSet(
                dom.dim,
                A_eq=dom.A_eq * d[None, :] if dom.A_eq.shape[0] else None,
                b_eq=dom.b_eq if dom.A_eq.shape[0] else None,
                A_in=dom.A_in * d[None, :] if dom.A_in.shape[0] else None,
                b_in=dom.b_in if dom.A_in.shape[0] else None,
                lower=dom.lower / d,
                upper=dom.upper / d,
            )
        m = Minorant(block, self.dim, floor=m0.floor, known_domain=dom, memory=memory)
        for c in m0.cuts:
            m.add_cut(c.base_point / self.d_i, c.base_value, self.d_i * c.subgradient,
                      iteration=c.origin[1])
        return m


def wrap_oracle(agent, d_i):
    return ScaledOracle(agent, d_i)


def solve_scaled(g, agents, params, x0=None):
    """Solve in the scaled space and map the result back to original variables."""
    from . import bundle
    from dataclasses import replace

    sizes = tuple(a.dim for a in agents)
    scaling = scaling_from_bounds(g.lower[: g.n], g.upper[: g.n], sizes)
    g_bar = scale_structured(g, scaling)
    agents_bar = [wrap_oracle(a, db) for a, db in zip(agents, scaling.block_diags)]
    x0_bar = None if x0 is None else np.asarray(x0, dtype=float) / scaling.d
    inner = replace(params, precondition=False)
    res = bundle.solve(g_bar, agents_bar, inner, x0=x0_bar)
    res.x_best = scaling.d * res.x_best
    if res.q_star is not None:
        res.q_star = res.q_star / scaling.d
    return res
