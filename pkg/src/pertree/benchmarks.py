"""Benchmark systems with interval-uncertain entries.

Each definition is the plain mapping accepted by
:func:`pertree.system.system_from_dict`, so it can be written to a JSON file
and fed to the command line unchanged.  Vertices are enumerated with the first
uncertain entry varying fastest; with that ordering the witness gains listed
in :data:`REFERENCE_GAINS` line up with the vertex labels.
"""
from __future__ import annotations

import copy

from .system import ConstraintPolytope, UncertainLinearSystem, constraints_from_dict, system_from_dict

EXAMPLES = {
    "example1": {
        "name": "example1",
        "A": [[[0.2, 1.8], 1.12], [[-0.35, 0.35], [0.1, 1.9]]],
        "B": [[1.0], [1.0]],
        "first_varies_fastest": True,
    },
    "example2": {
        "name": "example2",
        "A": [[[0.2, 1.8], 1.5], [1.22, [-0.2, 0.2]]],
        "B": [[1.0], [1.0]],
        "first_varies_fastest": True,
    },
    "example3": {
        "name": "example3",
        "A": [[[0.2, 1.75], 1.2], [[-0.6, 0.6], 0.1]],
        "B": [[1.0], [1.0]],
        "first_varies_fastest": True,
        "constraints": {
            "state_bounds": [[-1.5, 1.5], [-1.5, 1.5]],
            "input_bounds": [[-1.0, 1.0]],
        },
    },
}

# Published witness gains (row vectors); stage-1 gains indexed by vertex label.
REFERENCE_GAINS = {
    "example1": {"K": [[-0.8956, -1.103]]},
    "example2": {
        "K0": [[-1.3517, 0.3123]],
        "K1": [[[-1.3745, 0.9952]], [[-1.2372, 0.1555]], [[-1.3534, 0.8483]], [[-1.2460, 0.1952]]],
    },
}

# Published root-volume ratios against the tied baseline at period 20.
REFERENCE_RATIOS = {
    ("static", 2): 1.046,
    ("static", 4): 1.077,
    ("litpc", 2): 1.125,
    ("litpc", 4): 1.305,
}


def definition(name: str) -> dict:
    try:
        return copy.deepcopy(EXAMPLES[name])
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; choose from {sorted(EXAMPLES)}") from None


def example(name: str) -> tuple[UncertainLinearSystem, ConstraintPolytope | None]:
    d = definition(name)
    sys = system_from_dict(d)
    cons = None
    if "constraints" in d:
        cons = constraints_from_dict(d["constraints"], sys.n_x, sys.n_u)
    return sys, cons
