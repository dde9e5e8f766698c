"""
Instance file format: JSON, schema version 1.

Layout:

    {
      "version": 1,
      "name": "<instance name>",
      "meta": { ... },
      "structured": {
        "n": int, "n_aux": int,
        "c": [...], "d": float,
        "Aeq": [[...]], "beq": [...],
        "Ain": [[...]], "bin": [...],
        "l": [...], "u": [...]
      },
      "agents": [ {"kind": "<tag>", "name": "...", <kind payload>}, ... ]
    }

Matrices are dense row-major nested lists.  Floats use Python's shortest
round-trip decimal representation, so save followed by load reproduces
every number bit-exactly; unbounded entries appear as the (non-strict
JSON) Infinity / -Infinity tokens.
"""

import json
import math

import numpy as np

from .agents import (
    FlowAgent,
    Instance,
    LogisticAgent,
    ResourceAgent,
    TransshipmentAgent,
)
from .model import PolyhedralFunction

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """An instance file violates the schema; the message names the field."""


def _structured_payload(g):
    return {
        "n": int(g.n),
        "n_aux": int(g.n_aux),
        "c": g.c.tolist(),
        "d": float(g.d),
        "Aeq": np.asarray(g.A_eq).tolist(),
        "beq": g.b_eq.tolist(),
        "Ain": np.asarray(g.A_in).tolist(),
        "bin": g.b_in.tolist(),
        "l": g.lower.tolist(),
        "u": g.upper.tolist(),
    }


def save_instance(instance, path):
    """Write an instance to ``path`` as schema-version-1 JSON."""
    for i, a in enumerate(instance.agents):
        if not hasattr(a, "kind") or not hasattr(a, "payload"):
            raise SchemaError(f"agents[{i}]: agent type is not serializable")
    doc = {
        "version": SCHEMA_VERSION,
        "name": instance.name,
        "meta": _jsonable(instance.meta),
        "structured": _structured_payload(instance.g),
        "agents": [
            {"kind": a.kind, "name": a.name, **_jsonable(a.payload())}
            for a in instance.agents
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def _jsonable(obj):
    """Recursively convert numpy containers to plain Python ones."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _require(mapping, key, where):
    if key not in mapping:
        raise SchemaError(f"{where}: missing required field '{key}'")
    return mapping[key]


def _floats(x, where):
    try:
        arr = np.asarray(x, dtype=float)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{where}: not a numeric array ({e})") from None
    return arr


def _load_structured(doc):
    s = _require(doc, "structured", "instance")
    if not isinstance(s, dict):
        raise SchemaError("structured: expected an object")
    n = _require(s, "n", "structured")
    n_aux = _require(s, "n_aux", "structured")
    Aeq = _floats(_require(s, "Aeq", "structured"), "structured.Aeq")
    Ain = _floats(_require(s, "Ain", "structured"), "structured.Ain")
    return PolyhedralFunction(
        n=int(n),
        c=_floats(_require(s, "c", "structured"), "structured.c"),
        d=float(_require(s, "d", "structured")),
        A_eq=Aeq if Aeq.size else None,
        b_eq=_floats(_require(s, "beq", "structured"), "structured.beq") if Aeq.size else None,
        A_in=Ain if Ain.size else None,
        b_in=_floats(_require(s, "bin", "structured"), "structured.bin") if Ain.size else None,
        lower=_floats(_require(s, "l", "structured"), "structured.l"),
        upper=_floats(_require(s, "u", "structured"), "structured.u"),
        n_aux=int(n_aux),
    )


def _load_agent(rec, i):
    where = f"agents[{i}]"
    if not isinstance(rec, dict):
        raise SchemaError(f"{where}: expected an object")
    kind = _require(rec, "kind", where)
    name = rec.get("name", f"agent{i}")
    if kind == "transshipment":
        return TransshipmentAgent(
            _floats(_require(rec, "D", where), f"{where}.D"),
            _floats(_require(rec, "E", where), f"{where}.E"),
            _floats(_require(rec, "C", where), f"{where}.C"),
            lambda_slack=float(_require(rec, "lambda_slack", where)),
            name=name,
        )
    if kind == "flow":
        return FlowAgent(
            _floats(_require(rec, "incidence", where), f"{where}.incidence"),
            int(_require(rec, "source", where)),
            int(_require(rec, "sink", where)),
            float(_require(rec, "utility_slope", where)),
            floor=float(_require(rec, "floor", where)),
            name=name,
        )
    if kind == "resource":
        return ResourceAgent(
            _floats(_require(rec, "slopes", where), f"{where}.slopes"),
            _floats(_require(rec, "intercepts", where), f"{where}.intercepts"),
            floor=float(_require(rec, "floor", where)),
            name=name,
        )
    if kind == "logistic":
        return LogisticAgent(
            _floats(_require(rec, "features", where), f"{where}.features"),
            _floats(_require(rec, "labels", where), f"{where}.labels"),
            name=name,
        )
    raise SchemaError(f"{where}: unknown agent kind {kind!r}")


def load_instance(path):
    """Load an instance from a schema-version-1 JSON file."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise SchemaError("instance: expected a top-level object")
    version = _require(doc, "version", "instance")
    if version != SCHEMA_VERSION:
        raise SchemaError(
            f"version: expected {SCHEMA_VERSION}, found {version!r}"
        )
    name = _require(doc, "name", "instance")
    agents_doc = _require(doc, "agents", "instance")
    if not isinstance(agents_doc, list) or not agents_doc:
        raise SchemaError("agents: expected a non-empty list")
    g = _load_structured(doc)
    agents = [_load_agent(rec, i) for i, rec in enumerate(agents_doc)]
    total = sum(a.dim for a in agents)
    if total != g.n:
        raise SchemaError(
            f"agents: block sizes sum to {total} but structured.n is {g.n}"
        )
    return Instance(name, agents, g, meta=doc.get("meta", {}))
