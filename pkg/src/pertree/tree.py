"""Scenario trees of the vertex-switched closed loop.

Nodes are addressed by ``(t, j)`` with stage ``t in 0..N`` and ``j`` in
``0 .. n_d**t - 1`` (0-based).  Children are ordered canonically: child ``k``
of node ``(t, j)`` is ``(t + 1, n_d * j + k)`` and was produced by vertex
``k``.  Hence ``parent(j) = j // n_d`` and ``vertex_label(j) = j % n_d``.
The leaf ordering coincides with ``itertools.product(range(n_d), repeat=N)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .system import UncertainLinearSystem, UncertaintyRealization

DEFAULT_MAX_LEAVES = 2 ** 12


@dataclass(frozen=True)
class TreeIndex:
    n_d: int
    N: int

    def stage_size(self, t: int) -> int:
        if not 0 <= t <= self.N:
            raise IndexError(f"stage {t} outside 0..{self.N}")
        return self.n_d ** t

    @property
    def stage_sizes(self) -> list[int]:
        return [self.n_d ** t for t in range(self.N + 1)]

    def parent(self, j: int) -> int:
        return j // self.n_d

    def vertex_label(self, j: int) -> int:
        """Vertex that produced node ``j`` of a stage ``t >= 1``."""
        return j % self.n_d

    def children(self, j: int) -> range:
        return range(self.n_d * j, self.n_d * (j + 1))

    def count(self, first: int, last: int) -> int:
        """Number of nodes in stages ``first..last`` inclusive."""
        return sum(self.n_d ** t for t in range(first, last + 1))

    @property
    def n_edges(self) -> int:
        return self.count(1, self.N)

    @property
    def n_inner_nodes(self) -> int:
        """Nodes carrying a gain, stages ``0..N-1``."""
        return self.count(0, self.N - 1)

    @property
    def n_scenarios(self) -> int:
        return self.n_d ** self.N

    def nodes(self, first: int = 0, last: int | None = None):
        last = self.N if last is None else last
        for t in range(first, last + 1):
            for j in range(self.n_d ** t):
                yield t, j

    def edges(self):
        """Yield ``(t, parent_j, vertex, child_j)`` for every edge into stage ``t + 1``."""
        for t in range(self.N):
            for j in range(self.n_d ** t):
                for i in range(self.n_d):
                    yield t, j, i, self.n_d * j + i

    def scenario(self, leaf: int) -> tuple[int, ...]:
        """Vertex labels along the root-to-leaf path ending at ``(N, leaf)``."""
        if not 0 <= leaf < self.n_scenarios:
            raise IndexError(f"leaf {leaf} outside 0..{self.n_scenarios - 1}")
        labels = []
        for _ in range(self.N):
            labels.append(leaf % self.n_d)
            leaf //= self.n_d
        return tuple(reversed(labels))

    def leaf_of(self, scenario: Sequence[int]) -> int:
        j = 0
        for i in scenario:
            j = self.n_d * j + int(i)
        return j


def build_index(n_d: int, N: int, max_leaves: int | None = DEFAULT_MAX_LEAVES) -> TreeIndex:
    """Index for a length-``N`` tree with branching ``n_d``.

    ``max_leaves`` guards against accidental exponential blow-up; pass
    ``None`` to disable the check.
    """
    if n_d < 1 or N < 1:
        raise ValueError(f"need n_d >= 1 and N >= 1, got n_d={n_d}, N={N}")
    if max_leaves is not None and n_d ** N > max_leaves:
        raise ValueError(f"tree with n_d={n_d}, N={N} has {n_d ** N} leaves (cap {max_leaves})")
    return TreeIndex(n_d=n_d, N=N)


def stage_gains(gains, N: int, n_d: int, n_u: int, n_x: int) -> list[np.ndarray]:
    """Normalize a gain description to per-stage arrays of shape ``(m_t, n_u, n_x)``.

    Accepted forms: a single ``(n_u, n_x)`` matrix (broadcast to every node),
    an object with a ``gains`` attribute (a certificate), or a length-``N``
    sequence whose stage entries hold either one gain or ``n_d**t`` gains.
    Stage arrays with a single gain are kept at ``m_t = 1`` so that huge tied
    trees are never materialized.
    """
    if hasattr(gains, "gains"):
        gains = gains.gains
    arr = np.asarray(gains, dtype=float) if not isinstance(gains, (list, tuple)) else None
    if arr is not None and arr.ndim == 2:
        if arr.shape != (n_u, n_x):
            raise ValueError(f"gain has shape {arr.shape}, expected {(n_u, n_x)}")
        return [arr[None]] * N
    if len(gains) != N:
        raise ValueError(f"expected {N} stages of gains, got {len(gains)}")
    out = []
    for t, g in enumerate(gains):
        g = np.asarray(g, dtype=float)
        if g.ndim == 2:
            g = g[None]
        if g.shape[1:] != (n_u, n_x) or g.shape[0] not in (1, n_d ** t):
            raise ValueError(f"stage {t} gains have shape {g.shape}")
        out.append(g)
    return out


@dataclass(frozen=True, eq=False)
class SimulatedTree:
    index: TreeIndex
    states: tuple[np.ndarray, ...]   # stage t: (n_d**t, n_x), t = 0..N
    inputs: tuple[np.ndarray, ...]   # stage t: (n_d**t, n_u), t = 0..N-1

    @property
    def root(self) -> np.ndarray:
        return self.states[0][0]

    @property
    def leaves(self) -> np.ndarray:
        return self.states[-1]

    def residual(self, sys: UncertainLinearSystem) -> float:
        """Largest deviation of stored states from re-propagated vertex dynamics."""
        worst = 0.0
        for t in range(self.index.N):
            x, u = self.states[t], self.inputs[t]
            nxt = np.einsum("iab,jb->jia", sys.A, x) + np.einsum("iab,jb->jia", sys.B, u)
            nxt = nxt.reshape(-1, sys.n_x)
            worst = max(worst, float(np.max(np.abs(nxt - self.states[t + 1]))))
        return worst

    def to_dict(self) -> dict:
        idx = self.index
        stages = []
        for t in range(idx.N + 1):
            nodes = []
            for j in range(idx.stage_size(t)):
                node = {"j": j, "x": self.states[t][j].tolist()}
                if t < idx.N:
                    node["u"] = self.inputs[t][j].tolist()
                if t > 0:
                    node["parent"] = idx.parent(j)
                    node["vertex"] = idx.vertex_label(j)
                nodes.append(node)
            stages.append({"t": t, "nodes": nodes})
        return {"n_d": idx.n_d, "N": idx.N, "indexing": "0-based", "stages": stages}

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def simulate_tree(sys: UncertainLinearSystem, index: TreeIndex, root, gains) -> SimulatedTree:
    """Propagate the root through all vertex sequences with ``u = K(t, j) x``."""
    if index.n_d != sys.n_d:
        raise ValueError(f"index branches {index.n_d} ways, system has {sys.n_d} vertices")
    root = np.asarray(root, dtype=float).reshape(-1)
    if root.shape[0] != sys.n_x:
        raise ValueError(f"root has dimension {root.shape[0]}, expected {sys.n_x}")
    K = stage_gains(gains, index.N, sys.n_d, sys.n_u, sys.n_x)
    states = [root[None, :]]
    inputs = []
    for t in range(index.N):
        x = states[t]
        u = np.einsum("jab,jb->ja", np.broadcast_to(K[t], (x.shape[0],) + K[t].shape[1:]), x)
        inputs.append(u)
        # child (j, i) -> n_d * j + i, i.e. row-major over (parent, vertex)
        nxt = np.einsum("iab,jb->jia", sys.A, x) + np.einsum("iab,jb->jia", sys.B, u)
        states.append(nxt.reshape(-1, sys.n_x))
    return SimulatedTree(index=index, states=tuple(states), inputs=tuple(inputs))


def scenario_transition(sys: UncertainLinearSystem, gains, scenario: Sequence[int],
                        index: TreeIndex | None = None) -> np.ndarray:
    """Closed-loop transition matrix along one root-to-leaf path.

    Uses the recursion ``psi_{t+1} = (A_i + B_i K(t, parent)) psi_t``; the
    tree itself is never built, so this also works for tied gains on trees far
    beyond the enumeration cap.
    """
    N = len(scenario)
    if index is not None and index.N != N:
        raise ValueError("scenario length does not match the tree period")
    K = stage_gains(gains, N, sys.n_d, sys.n_u, sys.n_x)
    psi = np.eye(sys.n_x)
    j = 0
    for t, i in enumerate(scenario):
        i = int(i)
        if not 0 <= i < sys.n_d:
            raise ValueError(f"vertex label {i} out of range")
        Kt = K[t][0] if K[t].shape[0] == 1 else K[t][j]
        psi = (sys.A[i] + sys.B[i] @ Kt) @ psi
        j = sys.n_d * j + i
    return psi


def all_transitions(sys: UncertainLinearSystem, index: TreeIndex, gains) -> list[np.ndarray]:
    """Transition matrices ``psi_{0:t}`` for every node, stage by stage.

    Entry ``t`` has shape ``(n_d**t, n_x, n_x)``; the last entry holds the
    ``n_d**N`` scenario products in leaf order.
    """
    K = stage_gains(gains, index.N, sys.n_d, sys.n_u, sys.n_x)
    psis = [np.eye(sys.n_x)[None]]
    for t in range(index.N):
        prev = psis[-1]
        Kt = np.broadcast_to(K[t], (prev.shape[0],) + K[t].shape[1:])
        # closed-loop per (parent j, vertex i): A_i + B_i K_j
        acl = sys.A[None] + np.einsum("iab,jbc->jiac", sys.B, Kt)
        nxt = np.einsum("jiab,jbc->jiac", acl, prev)
        psis.append(nxt.reshape(-1, sys.n_x, sys.n_x))
    return psis


def propagate_beta(index: TreeIndex, realization: UncertaintyRealization) -> list[np.ndarray]:
    """Node weights ``beta_{t+1}[n_d j + i] = alpha_t[i] * beta_t[j]`` with ``beta_0 = 1``."""
    alphas = realization.alphas
    if alphas.shape[0] < index.N or alphas.shape[1] != index.n_d:
        raise ValueError("realization too short or of wrong width for this tree")
    betas = [np.ones(1)]
    for t in range(index.N):
        betas.append(np.outer(betas[-1], alphas[t]).reshape(-1))
    return betas
