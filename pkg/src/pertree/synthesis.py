"""Synthesis of static and tree-periodic controllers from block-LMI programs.

Three controller kinds share one program builder:

``static``
    one gain ``K = L G^{-1}`` with a Lyapunov matrix per tree node,
``litpc``
    a gain ``K(t, j) = L(t, j) S(t, j)^{-1}`` per tree node,
``baseline-tied``
    the litpc program with all variables of a stage tied together; its edge
    LMIs collapse to ``n_d`` per stage, so long periods stay cheap.

Unconstrained problems are homogeneous, so their verdict comes from a
normalized margin program: maximize ``tau`` subject to every strict block
``>= tau I`` and ``S <= I``.  The problem is feasible iff ``tau* > 0``; we
report feasible for ``tau* >= eps``, infeasible for ``tau* < eps / 100`` and
numerical failure in between.  The trace-regularized variant
(``min trace S_0`` with ``S_0 >= I``, blocks ``>= eps I``) is available via
``formulation="trace"``.

Constrained problems maximize ``log det S_0`` with the containment blocks
``[[H, F S + E L], [., S]] >= 0`` and ``diag(H) <= 1`` at every node.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .sdp import (
    MARGIN_VARIABLE,
    BlockLmi,
    ScalarBound,
    SdpProgram,
    SolveOptions,
    diag_entries,
    solve,
)
from .system import ConstraintPolytope, UncertainLinearSystem
from .tree import build_index

KINDS = ("static", "litpc", "baseline-tied")
DEFAULT_EPSILON = 1e-6
MAX_CONDITION = 1e10


@dataclass(eq=False)
class ControllerCertificate:
    """Gains and Lyapunov shape matrices returned by a synthesis program.

    ``gains[t]`` has shape ``(m_t, n_u, n_x)`` and ``S[t]`` shape
    ``(m_t, n_x, n_x)``, with ``m_t = 1`` when the stage is tied (always for
    static gains) and ``m_t = n_d**t`` otherwise.  ``P(t, j) = S(t, j)^{-1}``.
    """

    kind: str
    N: int
    n_d: int
    gains: list
    S: list
    epsilon: float
    margin: float | None = None
    objective: str = "margin"
    objective_value: float | None = None
    solver: str = ""
    constrained: bool = False
    G: np.ndarray | None = None
    H: list | None = None
    system_name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}")
        if len(self.gains) != self.N or len(self.S) != self.N:
            raise ValueError("gains and S need one entry per stage")
        self.gains = [np.asarray(g, dtype=float) for g in self.gains]
        self.S = [np.asarray(s, dtype=float) for s in self.S]
        if self.G is not None:
            self.G = np.asarray(self.G, dtype=float)
        if self.H is not None:
            self.H = [np.asarray(h, dtype=float) for h in self.H]

    @property
    def n_x(self) -> int:
        return self.S[0].shape[-1]

    @property
    def n_u(self) -> int:
        return self.gains[0].shape[1]

    @property
    def tied(self) -> bool:
        return self.kind == "baseline-tied"

    @staticmethod
    def _pick(stage: np.ndarray, j: int) -> np.ndarray:
        return stage[0] if stage.shape[0] == 1 else stage[j]

    def gain(self, t: int, j: int = 0) -> np.ndarray:
        return self._pick(self.gains[t], j)

    def shape_matrix(self, t: int, j: int = 0) -> np.ndarray:
        """``S(t, j)``; stage ``N`` wraps around to the root."""
        if t == self.N:
            t, j = 0, 0
        return self._pick(self.S[t], j)

    def lyapunov(self, t: int, j: int = 0) -> np.ndarray:
        return np.linalg.inv(self.shape_matrix(t, j))

    @property
    def K(self) -> np.ndarray:
        if self.kind != "static":
            raise AttributeError("only static certificates have a single gain")
        return self.gains[0][0]

    @property
    def S0(self) -> np.ndarray:
        return self.S[0][0]

    @property
    def P0(self) -> np.ndarray:
        return np.linalg.inv(self.S0)

    @property
    def n_gains(self) -> int:
        """Distinct gain matrices stored."""
        if self.kind == "static":
            return 1
        return sum(g.shape[0] for g in self.gains)

    def nodes(self):
        """Yield ``(t, j)`` for every stored node of stages ``0..N-1``."""
        for t, s in enumerate(self.S):
            for j in range(s.shape[0]):
                yield t, j

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "N": self.N,
            "n_d": self.n_d,
            "gains": [g.tolist() for g in self.gains],
            "S": [s.tolist() for s in self.S],
            "P": [np.linalg.inv(s).tolist() for s in self.S],
            "epsilon": self.epsilon,
            "margin": self.margin,
            "objective": self.objective,
            "objective_value": self.objective_value,
            "solver": self.solver,
            "constrained": self.constrained,
            "system_name": self.system_name,
            "meta": self.meta,
        }
        if self.G is not None:
            d["G"] = self.G.tolist()
        if self.H is not None:
            d["H"] = [h.tolist() for h in self.H]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerCertificate":
        return cls(
            kind=d["kind"], N=int(d["N"]), n_d=int(d["n_d"]),
            gains=[np.array(g, dtype=float) for g in d["gains"]],
            S=[np.array(s, dtype=float) for s in d["S"]],
            epsilon=float(d["epsilon"]), margin=d.get("margin"),
            objective=d.get("objective", ""), objective_value=d.get("objective_value"),
            solver=d.get("solver", ""), constrained=bool(d.get("constrained", False)),
            G=None if d.get("G") is None else np.array(d["G"], dtype=float),
            H=None if d.get("H") is None else [np.array(h, dtype=float) for h in d["H"]],
            system_name=d.get("system_name", ""), meta=dict(d.get("meta", {})),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ControllerCertificate":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


@dataclass(eq=False)
class EllipsoidFamily:
    """The sets ``{x : x' P(t, j) x <= 1}`` of a certificate."""

    certificate: ControllerCertificate

    def volume(self, t: int = 0, j: int = 0) -> float:
        S = self.certificate.shape_matrix(t, j)
        return unit_ball_volume(S.shape[0]) * math.sqrt(np.linalg.det(S))

    def support_slacks(self, cons: ConstraintPolytope) -> list[np.ndarray]:
        """``1 - r' S r`` for every row ``r`` of ``F + E K(t, j)``, as ``(m_t, n_c)`` per stage."""
        cert = self.certificate
        out = []
        for t in range(cert.N):
            m = max(cert.S[t].shape[0], cert.gains[t].shape[0])
            rows = []
            for j in range(m):
                R = cons.rows(cert.gain(t, j))
                S = cert.shape_matrix(t, j)
                rows.append(1.0 - np.einsum("ra,ab,rb->r", R, S, R))
            out.append(np.array(rows))
        return out

    def boundary(self, t: int = 0, j: int = 0, n_points: int = 256) -> np.ndarray:
        """Points ``S^{1/2} (cos th, sin th)`` on the boundary of a planar ellipse."""
        S = self.certificate.shape_matrix(t, j)
        if S.shape != (2, 2):
            raise ValueError("boundary export needs a two-dimensional state")
        w, V = np.linalg.eigh(S)
        root = V @ np.diag(np.sqrt(w)) @ V.T
        th = np.linspace(0.0, 2 * np.pi, n_points, endpoint=False)
        return (root @ np.vstack([np.cos(th), np.sin(th)])).T


@dataclass
class SynthesisResult:
    status: str                       # feasible | infeasible | numerical-failure
    certificate: ControllerCertificate | None = None
    margin: float | None = None
    backend: str = ""
    message: str = ""
    n_lmis: int = 0

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    @property
    def family(self) -> EllipsoidFamily | None:
        return None if self.certificate is None else EllipsoidFamily(self.certificate)


# --- program assembly -------------------------------------------------------

def _stage_sizes(kind: str, n_d: int, N: int) -> list[int]:
    if kind == "baseline-tied":
        return [1] * N
    idx = build_index(n_d, N)
    return idx.stage_sizes[:N]


def build_program(sys: UncertainLinearSystem, N: int, kind: str,
                  cons: ConstraintPolytope | None = None,
                  formulation: str = "margin", epsilon: float = DEFAULT_EPSILON) -> SdpProgram:
    """Assemble the synthesis program.

    ``formulation`` is ``"margin"`` or ``"trace"`` for unconstrained programs;
    a constrained program always maximizes ``log det S_0``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown controller kind {kind!r}")
    if N < 1:
        raise ValueError("period must be at least 1")
    nx, nu, nd = sys.n_x, sys.n_u, sys.n_d
    sizes = _stage_sizes(kind, nd, N)
    static = kind == "static"
    tied = kind == "baseline-tied"
    if cons is not None:
        cons.check_dims(sys)
        prog = SdpProgram(objective="maximize_logdet", objective_var="S_0_0", margin=epsilon)
    elif formulation == "margin":
        prog = SdpProgram(objective="maximize_margin", margin=MARGIN_VARIABLE)
    elif formulation == "trace":
        prog = SdpProgram(objective="minimize_trace", objective_var="S_0_0", margin=epsilon)
    else:
        raise ValueError(f"unknown formulation {formulation!r}")

    S = [[prog.add_variable(f"S_{t}_{j}", (nx, nx), symmetric=True, role="S") for j in range(m)]
         for t, m in enumerate(sizes)]
    if static:
        G = prog.add_variable("G", (nx, nx), role="G")
        Lg = prog.add_variable("L", (nu, nx), role="L")
    else:
        L = [[prog.add_variable(f"L_{t}_{j}", (nu, nx), role="L") for j in range(m)]
             for t, m in enumerate(sizes)]

    I = np.eye(nx)
    for t, m in enumerate(sizes):
        for j in range(m):
            Sp = S[t][j]
            prog.add_lmi(BlockLmi([[Sp]], name=f"pos t{t} j{j}"))
            if cons is None and formulation == "margin":
                prog.add_lmi(BlockLmi([[I - Sp]], sense="psd", name=f"scale t{t} j{j}"))
            top = G + G.T - Sp if static else Sp.expr
            for i, (A, B) in enumerate(sys.vertices):
                child = 0 if tied else nd * j + i
                Sc = S[0][0] if t + 1 == N else S[t + 1][child]
                off = A @ G + B @ Lg if static else A @ Sp + B @ L[t][j]
                prog.add_lmi(BlockLmi.schur(top, off, Sc, name=f"edge t{t} j{j} v{i}"))
            if cons is not None:
                H = prog.add_variable(f"H_{t}_{j}", (cons.n_c, cons.n_c), symmetric=True, role="H")
                if static:
                    Y = cons.F @ G + cons.E @ Lg
                else:
                    Y = cons.F @ Sp + cons.E @ L[t][j]
                prog.add_lmi(BlockLmi.schur(H, Y.T, top, sense="psd", name=f"contain t{t} j{j}"))
                prog.add_bound(ScalarBound(diag_entries(H), 1.0, name=f"diag H t{t} j{j}"))
    if cons is None and formulation == "trace":
        prog.add_lmi(BlockLmi([[S[0][0] - I]], sense="psd", name="normalize S0"))
    return prog


def _recover(sys, N, kind, cons, values, sizes, epsilon, margin, objective, objective_value,
             backend) -> tuple[ControllerCertificate | None, str]:
    S = [np.array([values[f"S_{t}_{j}"] for j in range(m)]) for t, m in enumerate(sizes)]
    for t, stage in enumerate(S):
        for j, s in enumerate(stage):
            c = np.linalg.cond(s)
            if not np.isfinite(c) or c > MAX_CONDITION:
                return None, f"S({t},{j}) has condition number {c:.3g}"
    G = None
    if kind == "static":
        G = values["G"]
        c = np.linalg.cond(G)
        if not np.isfinite(c) or c > MAX_CONDITION:
            return None, f"G has condition number {c:.3g}"
        K = values["L"] @ np.linalg.inv(G)
        gains = [K[None]] * N
    else:
        gains = [np.array([values[f"L_{t}_{j}"] @ np.linalg.inv(S[t][j]) for j in range(m)])
                 for t, m in enumerate(sizes)]
    H = None
    if cons is not None:
        H = [np.array([values[f"H_{t}_{j}"] for j in range(m)]) for t, m in enumerate(sizes)]
    cert = ControllerCertificate(
        kind=kind, N=N, n_d=sys.n_d, gains=gains, S=S, epsilon=epsilon, margin=margin,
        objective=objective, objective_value=objective_value, solver=backend,
        constrained=cons is not None, G=G, H=H, system_name=sys.name,
        meta={"cond_G": None if G is None else float(np.linalg.cond(G))},
    )
    return cert, ""


def synthesize(sys: UncertainLinearSystem, N: int, kind: str,
               cons: ConstraintPolytope | None = None, epsilon: float = DEFAULT_EPSILON,
               formulation: str = "margin", options: SolveOptions | None = None) -> SynthesisResult:
    """Build, solve and recover one certificate.

    Constraint rows are rescaled to unit maximum norm before solving, so the
    fixed strictness margin is relative to the constraint set's size; the
    shape matrices are scaled back afterwards (gains are scale-free).
    """
    sizes = _stage_sizes(kind, sys.n_d, N)
    rho = 1.0
    solve_cons = cons
    if cons is not None:
        cons.check_dims(sys)
        rho = float(np.max(np.linalg.norm(np.hstack([cons.F, cons.E]), axis=1)))
        solve_cons = ConstraintPolytope(cons.F / rho, cons.E / rho)
    attempt_eps = epsilon
    for _ in range(2):
        prog = build_program(sys, N, kind, solve_cons, formulation, attempt_eps)
        sol = solve(prog, options)
        if sol.status == "infeasible":
            return SynthesisResult("infeasible", backend=sol.backend, n_lmis=prog.n_lmis,
                                   message=f"backend status {sol.backend_status}")
        if not sol.ok:
            return SynthesisResult("numerical-failure", backend=sol.backend, n_lmis=prog.n_lmis,
                                   message=f"unverified solution, worst slack {sol.min_margin:.3g}")
        if prog.margin == MARGIN_VARIABLE:
            tau = sol.margin
            if tau < epsilon / 100:
                return SynthesisResult("infeasible", margin=tau, backend=sol.backend,
                                       n_lmis=prog.n_lmis, message=f"max margin {tau:.3g}")
            if tau < epsilon:
                return SynthesisResult("numerical-failure", margin=tau, backend=sol.backend,
                                       n_lmis=prog.n_lmis,
                                       message=f"max margin {tau:.3g} inconclusive")
            objective, margin = "margin", tau
        else:
            objective = "logdet" if cons is not None else "trace"
            margin = attempt_eps
        cert, why = _recover(sys, N, kind, cons, sol.values, sizes, epsilon, margin,
                             objective, sol.objective, sol.backend)
        if cert is not None and rho != 1.0:
            cert.S = [s / rho ** 2 for s in cert.S]
            if cert.G is not None:
                cert.G = cert.G / rho ** 2
            if cert.objective_value is not None:
                cert.objective_value -= 2 * sys.n_x * np.log(rho)
            cert.meta["row_scale"] = rho
        if cert is not None:
            return SynthesisResult("feasible", cert, margin=margin, backend=sol.backend,
                                   n_lmis=prog.n_lmis)
        if prog.margin == MARGIN_VARIABLE:
            break
        attempt_eps *= 10
    return SynthesisResult("numerical-failure", margin=None, backend=sol.backend,
                           n_lmis=prog.n_lmis, message=why)


def synth_static_unconstrained(sys, N, epsilon=DEFAULT_EPSILON, **kw) -> SynthesisResult:
    return synthesize(sys, N, "static", None, epsilon, **kw)


def synth_litpc_unconstrained(sys, N, epsilon=DEFAULT_EPSILON, **kw) -> SynthesisResult:
    return synthesize(sys, N, "litpc", None, epsilon, **kw)


def synth_static_constrained(sys, cons, N, epsilon=DEFAULT_EPSILON, **kw) -> SynthesisResult:
    return synthesize(sys, N, "static", cons, epsilon, **kw)


def synth_litpc_constrained(sys, cons, N, epsilon=DEFAULT_EPSILON, **kw) -> SynthesisResult:
    return synthesize(sys, N, "litpc", cons, epsilon, **kw)


def synth_baseline_tied(sys, cons, N, epsilon=DEFAULT_EPSILON, **kw) -> SynthesisResult:
    return synthesize(sys, N, "baseline-tied", cons, epsilon, **kw)


def search_period(sys: UncertainLinearSystem, kind: str, N_max: int,
                  cons: ConstraintPolytope | None = None, N_min: int = 1,
                  epsilon: float = DEFAULT_EPSILON, **kw) -> tuple[int | None, SynthesisResult]:
    """Increase the period from ``N_min`` until the program becomes feasible."""
    result = SynthesisResult("infeasible")
    for N in range(N_min, N_max + 1):
        result = synthesize(sys, N, kind, cons, epsilon, **kw)
        if result.feasible:
            return N, result
    return None, result


def volume_ratio(cert: ControllerCertificate, reference: ControllerCertificate) -> float:
    """``sqrt(det S_0 / det S_0_ref)``, the ratio of the root ellipsoid volumes."""
    _, a = np.linalg.slogdet(cert.S0)
    _, b = np.linalg.slogdet(reference.S0)
    return float(np.exp(0.5 * (a - b)))
