"""
oraclebundle: a disaggregate bundle-method solver for oracle-structured
distributed convex optimization.

Problems have the form min h(x) = sum_i f_i(x_i) + g(x): each block
function f_i is accessible only through a value/subgradient oracle, and
g is an explicitly represented linear-plus-polyhedral coupling function.
"""

from .model import (
    AgentOracle,
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
from .bundle import SolveResult, SolverParams, solve
from .agents import (
    FlowAgent,
    Instance,
    InnerProblem,
    LogisticAgent,
    PartialMinAgent,
    ResourceAgent,
    TransshipmentAgent,
    gen_federated,
    gen_mcf,
    gen_resource,
    gen_supply_chain,
    slack_wrap,
)
from .serialize import SchemaError, load_instance, save_instance
from .reference import UnsupportedInstanceError, reference_solve

__all__ = [
    "AgentOracle",
    "BlockStructure",
    "ConfigurationError",
    "Cut",
    "DimensionError",
    "FlowAgent",
    "Instance",
    "InnerProblem",
    "LogisticAgent",
    "Minorant",
    "PartialMinAgent",
    "PolyhedralFunction",
    "PolyhedralSet",
    "QueryResult",
    "ResourceAgent",
    "SchemaError",
    "SolveResult",
    "SolverParams",
    "TransshipmentAgent",
    "UnsupportedInstanceError",
    "gen_federated",
    "gen_mcf",
    "gen_resource",
    "gen_supply_chain",
    "load_instance",
    "reference_solve",
    "relative_gap",
    "save_instance",
    "slack_wrap",
    "solve",
]
