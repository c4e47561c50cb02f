"""Polytopic uncertain linear systems, constraint polytopes and realizations.

A system is described by its vertex list ``[(A_1, B_1), ..., (A_nd, B_nd)]``;
the true dynamics at every step is an (unknown) convex combination of the
vertices.  The vertex order is significant: it fixes the labelling of every
scenario tree built from the system.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SIMPLEX_TOL = 1e-12


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class UncertainLinearSystem:
    """``x+ = A x + B u`` with ``(A, B)`` in the convex hull of the vertices."""

    vertices: tuple[tuple[np.ndarray, np.ndarray], ...]
    name: str = ""

    def __init__(self, vertices: Sequence[tuple], name: str = ""):
        if len(vertices) < 1:
            raise ValueError("at least one vertex (A, B) is required")
        verts = []
        for k, (A, B) in enumerate(vertices):
            A = _as_matrix(A, f"A[{k}]")
            B = _as_matrix(B, f"B[{k}]")
            if A.shape[0] != A.shape[1]:
                raise ValueError(f"A[{k}] must be square, got {A.shape}")
            if B.shape[0] != A.shape[0]:
                raise ValueError(f"B[{k}] has {B.shape[0]} rows, expected {A.shape[0]}")
            A.setflags(write=False)
            B.setflags(write=False)
            verts.append((A, B))
        A0, B0 = verts[0]
        for k, (A, B) in enumerate(verts):
            if A.shape != A0.shape or B.shape != B0.shape:
                raise ValueError(f"vertex {k} has inconsistent dimensions")
        object.__setattr__(self, "vertices", tuple(verts))
        object.__setattr__(self, "name", name)

    @property
    def n_x(self) -> int:
        return self.vertices[0][0].shape[0]

    @property
    def n_u(self) -> int:
        return self.vertices[0][1].shape[1]

    @property
    def n_d(self) -> int:
        return len(self.vertices)

    @cached_property
    def A(self) -> np.ndarray:
        """Stacked vertex state matrices, shape ``(n_d, n_x, n_x)``."""
        out = np.stack([A for A, _ in self.vertices])
        out.setflags(write=False)
        return out

    @cached_property
    def B(self) -> np.ndarray:
        """Stacked vertex input matrices, shape ``(n_d, n_x, n_u)``."""
        out = np.stack([B for _, B in self.vertices])
        out.setflags(write=False)
        return out

    def closed_loop(self, K: np.ndarray) -> np.ndarray:
        """Vertex closed-loop matrices ``A_i + B_i K``, shape ``(n_d, n_x, n_x)``."""
        K = np.asarray(K, dtype=float)
        if K.shape != (self.n_u, self.n_x):
            raise ValueError(f"gain has shape {K.shape}, expected {(self.n_u, self.n_x)}")
        return self.A + self.B @ K

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "vertices": [{"A": A.tolist(), "B": B.tolist()} for A, B in self.vertices],
        }


@dataclass(frozen=True, eq=False)
class ConstraintPolytope:
    """Mixed state/input constraints ``F x + E u <= 1`` (all-ones right-hand side).

    Rows given with another right-hand side are divided by it on construction;
    non-positive bounds are rejected because the origin must be interior.
    """

    F: np.ndarray
    E: np.ndarray

    def __init__(self, F, E, rhs=None):
        F = _as_matrix(F, "F")
        E = _as_matrix(E, "E")
        if F.shape[0] != E.shape[0]:
            raise ValueError(f"F has {F.shape[0]} rows but E has {E.shape[0]}")
        if F.shape[0] == 0:
            raise ValueError("constraint polytope needs at least one row")
        if rhs is not None:
            rhs = np.asarray(rhs, dtype=float).reshape(-1)
            if rhs.shape[0] != F.shape[0]:
                raise ValueError("rhs length does not match the number of rows")
            if np.any(rhs <= 0):
                raise ValueError("constraint bounds must be strictly positive")
            F = F / rhs[:, None]
            E = E / rhs[:, None]
        F.setflags(write=False)
        E.setflags(write=False)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "E", E)

    @classmethod
    def from_box(cls, x_bounds: Sequence[Sequence[float]] | None,
                 u_bounds: Sequence[Sequence[float]] | None,
                 n_x: int | None = None, n_u: int | None = None) -> "ConstraintPolytope":
        """Rows for ``lo <= x_i <= hi`` and ``lo <= u_k <= hi``; infinite bounds are skipped."""
        x_bounds = list(x_bounds or [])
        u_bounds = list(u_bounds or [])
        n_x = len(x_bounds) if n_x is None else n_x
        n_u = len(u_bounds) if n_u is None else n_u
        rows_f, rows_e, rhs = [], [], []

        def add(idx, sign, bound, is_state):
            f = np.zeros(n_x)
            e = np.zeros(n_u)
            (f if is_state else e)[idx] = sign
            rows_f.append(f)
            rows_e.append(e)
            rhs.append(bound)

        for is_state, bounds in ((True, x_bounds), (False, u_bounds)):
            for idx, (lo, hi) in enumerate(bounds):
                if lo > hi:
                    raise ValueError(f"bound [{lo}, {hi}] has lo > hi")
                if np.isfinite(hi):
                    add(idx, 1.0, hi, is_state)
                if np.isfinite(lo):
                    add(idx, -1.0, -lo, is_state)
        return cls(np.array(rows_f).reshape(-1, n_x), np.array(rows_e).reshape(-1, n_u), rhs)

    @property
    def n_c(self) -> int:
        return self.F.shape[0]

    def rows(self, K: np.ndarray) -> np.ndarray:
        """Closed-loop constraint rows ``F + E K``."""
        return self.F + self.E @ np.asarray(K, dtype=float)

    def check_dims(self, sys: UncertainLinearSystem) -> None:
        if self.F.shape[1] != sys.n_x or self.E.shape[1] != sys.n_u:
            raise ValueError(
                f"constraints are for n_x={self.F.shape[1]}, n_u={self.E.shape[1]}; "
                f"system has n_x={sys.n_x}, n_u={sys.n_u}")

    def to_dict(self) -> dict:
        return {"F": self.F.tolist(), "E": self.E.tolist()}


@dataclass(frozen=True, eq=False)
class UncertaintyRealization:
    """A sequence of simplex weights, one row per time step."""

    alphas: np.ndarray = field(repr=False)

    def __post_init__(self):
        alphas = np.atleast_2d(np.asarray(self.alphas, dtype=float))
        check_simplex(alphas)
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)

    def __len__(self) -> int:
        return self.alphas.shape[0]

    @property
    def is_vertex_only(self) -> bool:
        return bool(np.all(np.isclose(self.alphas.max(axis=1), 1.0, atol=SIMPLEX_TOL, rtol=0)))

    def vertex_labels(self) -> np.ndarray:
        if not self.is_vertex_only:
            raise ValueError("realization is not vertex-only")
        return self.alphas.argmax(axis=1)


def check_simplex(alphas: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    alphas = np.atleast_2d(alphas)
    if np.any(alphas < -tol):
        raise ValueError("simplex weights must be non-negative")
    if np.any(np.abs(alphas.sum(axis=1) - 1.0) > tol):
        raise ValueError("simplex weights must sum to one")


def interpolate_dynamics(sys: UncertainLinearSystem, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A, B) = sum_i alpha_i (A_i, B_i)``."""
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if alpha.shape[0] != sys.n_d:
        raise ValueError(f"alpha has length {alpha.shape[0]}, system has {sys.n_d} vertices")
    check_simplex(alpha)
    return np.tensordot(alpha, sys.A, axes=1), np.tensordot(alpha, sys.B, axes=1)


def sample_realization(sys: UncertainLinearSystem, horizon: int, mode: str = "interior",
                       seed=None) -> UncertaintyRealization:
    """Draw ``horizon`` simplex weights.

    ``mode="vertices"`` gives one-hot weights (uniform vertex choice),
    ``mode="interior"`` gives strictly positive Dirichlet(1, ..., 1) draws.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = np.random.default_rng(seed)
    if mode in ("vertices", "vertices-only"):
        labels = rng.integers(0, sys.n_d, size=horizon)
        return UncertaintyRealization(np.eye(sys.n_d)[labels])
    if mode == "interior":
        if sys.n_d == 1:
            return UncertaintyRealization(np.ones((horizon, 1)))
        alphas = rng.dirichlet(np.ones(sys.n_d), size=horizon)
        # Dirichlet draws can underflow to exactly zero in rare cases.
        alphas = np.maximum(alphas, 1e-15)
        alphas /= alphas.sum(axis=1, keepdims=True)
        return UncertaintyRealization(alphas)
    raise ValueError(f"unknown realization mode {mode!r}")


def enumerate_vertex_sequences(n_d: int, horizon: int) -> Iterator[tuple[int, ...]]:
    """All ``n_d ** horizon`` vertex label sequences, in tree (leaf) order."""
    return itertools.product(range(n_d), repeat=horizon)


def interval_to_vertices(A, B, name: str = "",
                         first_varies_fastest: bool = False) -> UncertainLinearSystem:
    """Expand entrywise interval matrices into an explicit vertex list.

    Each entry of ``A`` and ``B`` is either a number or a ``[lo, hi]`` pair.
    Uncertain entries are taken row-major, ``A`` before ``B``; the vertex list
    is their Cartesian product of endpoints with the first uncertain entry
    varying slowest (set ``first_varies_fastest`` to reverse).  Degenerate
    intervals ``lo == hi`` count as fixed entries.  The number of vertices is
    ``2 ** (#uncertain entries)``.
    """
    mats = []
    uncertain = []  # (which, i, j, lo, hi)
    for which, M in enumerate((A, B)):
        rows = [list(r) if isinstance(r, (list, tuple)) else [r] for r in M]
        nominal = np.zeros((len(rows), len(rows[0])))
        for i, row in enumerate(rows):
            if len(row) != nominal.shape[1]:
                raise ValueError("ragged matrix rows")
            for j, entry in enumerate(row):
                if isinstance(entry, (list, tuple)):
                    if len(entry) != 2:
                        raise ValueError(f"interval entry must be [lo, hi], got {entry!r}")
                    lo, hi = float(entry[0]), float(entry[1])
                    if lo > hi:
                        raise ValueError(f"interval [{lo}, {hi}] has lo > hi")
                    nominal[i, j] = lo
                    if lo != hi:
                        uncertain.append((which, i, j, lo, hi))
                else:
                    nominal[i, j] = float(entry)
        mats.append(nominal)

    vertices = []
    for choice in itertools.product((0, 1), repeat=len(uncertain)):
        if first_varies_fastest:
            choice = choice[::-1]
        Av, Bv = mats[0].copy(), mats[1].copy()
        for k in range(len(uncertain)):
            which, i, j, lo, hi = uncertain[k]
            (Av if which == 0 else Bv)[i, j] = hi if choice[k] else lo
        vertices.append((Av, Bv))
    return UncertainLinearSystem(vertices, name=name)


# --- file ingestion -------------------------------------------------------

def _read_mapping(path: Path) -> dict:
    text = Path(path).read_text()
    suffix = Path(path).suffix.lower()
    if suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def system_from_dict(data: dict) -> UncertainLinearSystem:
    name = str(data.get("name", ""))
    if "vertices" in data:
        return UncertainLinearSystem([(v["A"], v["B"]) for v in data["vertices"]], name=name)
    if "A" in data and "B" in data:
        return interval_to_vertices(data["A"], data["B"], name=name,
                                    first_varies_fastest=bool(data.get("first_varies_fastest", False)))
    raise ValueError("system definition needs either 'vertices' or interval matrices 'A' and 'B'")


def constraints_from_dict(data: dict, n_x: int | None = None,
                          n_u: int | None = None) -> ConstraintPolytope:
    if "F" in data and "E" in data:
        return ConstraintPolytope(data["F"], data["E"], data.get("rhs"))
    if "state_bounds" in data or "input_bounds" in data:
        return ConstraintPolytope.from_box(data.get("state_bounds"), data.get("input_bounds"),
                                           n_x=n_x, n_u=n_u)
    raise ValueError("constraints need 'F'/'E' rows or 'state_bounds'/'input_bounds'")


def load_system(path) -> tuple[UncertainLinearSystem, ConstraintPolytope | None]:
    """Read a system definition (JSON or TOML); constraints are optional."""
    data = _read_mapping(Path(path))
    sys = system_from_dict(data)
    cons = None
    if "constraints" in data:
        cons = constraints_from_dict(data["constraints"], sys.n_x, sys.n_u)
        cons.check_dims(sys)
    return sys, cons


def load_constraints(path, sys: UncertainLinearSystem) -> ConstraintPolytope:
    data = _read_mapping(Path(path))
    if "constraints" in data:
        data = data["constraints"]
    cons = constraints_from_dict(data, sys.n_x, sys.n_u)
    cons.check_dims(sys)
    return cons
