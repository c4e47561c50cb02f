"""Online execution of tree-periodic controllers.

At phase 0 the controller simulates the vertex tree from the measured state,
stores it and applies the root input.  At phase ``k != 0`` it writes the
measured state as a convex combination of the stored stage-``k`` nodes and
applies the same combination of their inputs.

Static and tied certificates short-cut the tree: their node gains are shared
per stage, so the interpolated input is ``K_k x`` exactly.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, nnls

from .synthesis import ControllerCertificate
from .system import UncertainLinearSystem, UncertaintyRealization, interpolate_dynamics
from .tree import SimulatedTree, build_index, simulate_tree

log = logging.getLogger(__name__)

INTERP_TOL = 1e-7


class InterpolationError(RuntimeError):
    """The measured state is not a convex combination of the stored nodes."""


@dataclass
class InterpolationWeights:
    beta: np.ndarray
    residual: float
    tol: float
    projected: bool = False

    @property
    def success(self) -> bool:
        return self.residual <= self.tol


def _lp_weights(X: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Simplex weights minimizing ``||x - X' beta||_inf`` (HiGHS dual simplex)."""
    m, n = X.shape
    # variables (beta_1..beta_m, s): minimize s, -s <= X' beta - x <= s
    c = np.zeros(m + 1)
    c[-1] = 1.0
    ones = np.ones((n, 1))
    A_ub = np.block([[X.T, -ones], [-X.T, -ones]])
    b_ub = np.concatenate([x, -x])
    A_eq = np.concatenate([np.ones(m), [0.0]])[None]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0],
                  bounds=[(0, None)] * (m + 1), method="highs-ds")
    if res.status != 0:
        raise InterpolationError(f"weight LP failed: {res.message}")
    return np.maximum(res.x[:m], 0.0)


def solve_weights(nodes, x, tol: float = INTERP_TOL) -> InterpolationWeights:
    """Simplex weights ``beta`` with ``sum_j beta_j nodes[j] = x``.

    A nonnegative least-squares solve of the equations stacked with a weighted
    row for ``sum beta = 1`` is tried first; when its residual misses the
    tolerance, a linear program minimizing the residual's max-norm over the
    simplex decides.  Both steps are deterministic.  The residual
    ``||x - nodes' beta||_2`` is compared to ``tol * (||x|| + 1)``; if the
    state lies outside the hull the weights give an approximate nearest hull
    point and ``success`` is false.
    """
    X = np.atleast_2d(np.asarray(nodes, dtype=float))
    x = np.asarray(x, dtype=float).reshape(-1)
    if X.shape[1] != x.shape[0]:
        raise ValueError(f"nodes have dimension {X.shape[1]}, state has {x.shape[0]}")
    bound = tol * (float(np.linalg.norm(x)) + 1.0)

    def finish(beta):
        s = beta.sum()
        beta = beta / s if s > 0 else np.full(X.shape[0], 1.0 / X.shape[0])
        return beta, float(np.linalg.norm(x - X.T @ beta))

    w = max(1.0, float(np.max(np.abs(X))), float(np.max(np.abs(x), initial=0.0)))
    M = np.vstack([X.T, w * np.ones((1, X.shape[0]))])
    try:
        beta, residual = finish(nnls(M, np.concatenate([x, [w]]), maxiter=50 * M.shape[1])[0])
    except RuntimeError:
        residual = np.inf
    if residual > bound:
        beta, residual = finish(_lp_weights(X, x))
    return InterpolationWeights(beta, residual, bound)


@dataclass
class StepInfo:
    t: int
    phase: int
    u: np.ndarray
    weights: InterpolationWeights | None = None

    @property
    def residual(self) -> float:
        return 0.0 if self.weights is None else self.weights.residual


@dataclass(eq=False)
class ControllerState:
    """Mutable controller memory: step counter and the stored tree.

    ``on_failure`` selects the policy for states outside the stored hull:
    ``"project"`` (apply the nearest hull combination, log a warning) or
    ``"raise"``.
    """

    certificate: ControllerCertificate
    sys: UncertainLinearSystem
    t: int = 0
    tree: SimulatedTree | None = None
    tol: float = INTERP_TOL
    on_failure: str = "project"
    failures: int = 0

    def __post_init__(self):
        cert = self.certificate
        if (cert.n_x, cert.n_u, cert.n_d) != (self.sys.n_x, self.sys.n_u, self.sys.n_d):
            raise ValueError("certificate does not match the system dimensions")
        if self.on_failure not in ("project", "raise"):
            raise ValueError(f"unknown failure policy {self.on_failure!r}")
        self._index = None
        if self.needs_tree:
            self._index = build_index(self.sys.n_d, cert.N)

    @property
    def N(self) -> int:
        return self.certificate.N

    @property
    def phase(self) -> int:
        return self.t % self.N

    @property
    def needs_tree(self) -> bool:
        return self.certificate.kind == "litpc"

    def step(self, x) -> StepInfo:
        return step(self, x)


def step(state: ControllerState, x) -> StepInfo:
    """Compute ``u_t`` for the measured ``x_t`` and advance the controller."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != state.sys.n_x:
        raise ValueError(f"state has dimension {x.shape[0]}, expected {state.sys.n_x}")
    k = state.phase
    cert = state.certificate
    info = StepInfo(t=state.t, phase=k, u=np.zeros(state.sys.n_u))
    if not state.needs_tree:
        info.u = cert.gain(k) @ x
    elif k == 0:
        state.tree = simulate_tree(state.sys, state._index, x, cert)
        info.u = state.tree.inputs[0][0].copy()
    else:
        if state.tree is None:
            raise RuntimeError("no stored tree; the controller must start at phase 0")
        weights = solve_weights(state.tree.states[k], x, state.tol)
        if not weights.success:
            state.failures += 1
            if state.on_failure == "raise":
                raise InterpolationError(
                    f"t={state.t}: state outside stored hull (residual {weights.residual:.3e})")
            weights.projected = True
            log.warning("t=%d: state outside stored hull (residual %.3e); using nearest hull point",
                        state.t, weights.residual)
        info.weights = weights
        info.u = weights.beta @ state.tree.inputs[k]
    state.t += 1
    return info


@dataclass(eq=False)
class Trajectory:
    x: np.ndarray                # (T + 1, n_x)
    u: np.ndarray                # (T, n_u)
    phase: np.ndarray            # (T,)
    residual: np.ndarray         # (T,), zero where no interpolation happened
    P0: np.ndarray
    N: int
    failures: int = 0
    projected: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.u.shape[0]

    def lyapunov_values(self) -> np.ndarray:
        return np.einsum("ta,ab,tb->t", self.x, self.P0, self.x)

    def period_values(self) -> np.ndarray:
        """``V(x_{mN})`` for ``m = 0, 1, ...`` up to the horizon."""
        return self.lyapunov_values()[:: self.N]

    def rows(self):
        V = self.lyapunov_values()
        for t in range(self.horizon + 1):
            last = t == self.horizon
            yield {
                "t": t,
                "phase": t % self.N,
                "x": self.x[t].tolist(),
                "u": None if last else self.u[t].tolist(),
                "V": float(V[t]),
                "residual": None if last else float(self.residual[t]),
            }

    def to_csv(self, path) -> None:
        n_x, n_u = self.x.shape[1], self.u.shape[1]
        header = (["t", "phase"] + [f"x{i}" for i in range(n_x)] + [f"u{i}" for i in range(n_u)]
                  + ["V", "residual"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.rows():
                u = r["u"] if r["u"] is not None else [None] * n_u
                values = r["x"] + u + [r["V"], r["residual"]]
                w.writerow([r["t"], r["phase"]] + ["" if v is None else repr(float(v)) for v in values])

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"N": self.N, "failures": self.failures, "projected": self.projected,
                       "meta": self.meta, "steps": list(self.rows())}, fh, indent=1)


def run_closed_loop(sys: UncertainLinearSystem, certificate: ControllerCertificate, x0,
                    realization: UncertaintyRealization, horizon: int | None = None,
                    tol: float = INTERP_TOL, on_failure: str = "project",
                    disturbance=None) -> Trajectory:
    """Simulate the plant under the runtime controller.

    The plant follows ``x+ = A(alpha_t) x + B(alpha_t) u`` with the realization's
    convex weights.  ``disturbance`` (optional, ``(horizon, n_x)``) is added to
    the state after each step, which takes the run outside the model.
    """
    horizon = len(realization) if horizon is None else int(horizon)
    if horizon > len(realization):
        raise ValueError(f"realization covers {len(realization)} steps, horizon is {horizon}")
    state = ControllerState(certificate, sys, tol=tol, on_failure=on_failure)
    xs = np.zeros((horizon + 1, sys.n_x))
    us = np.zeros((horizon, sys.n_u))
    phases = np.zeros(horizon, dtype=int)
    residuals = np.zeros(horizon)
    xs[0] = np.asarray(x0, dtype=float).reshape(-1)
    projected = 0
    for t in range(horizon):
        info = step(state, xs[t])
        us[t] = info.u
        phases[t] = info.phase
        residuals[t] = info.residual
        if info.weights is not None and info.weights.projected:
            projected += 1
        A, B = interpolate_dynamics(sys, realization.alphas[t])
        xs[t + 1] = A @ xs[t] + B @ info.u
        if disturbance is not None:
            xs[t + 1] += np.asarray(disturbance[t], dtype=float)
    return Trajectory(xs, us, phases, residuals, certificate.P0, certificate.N,
                      failures=state.failures, projected=projected)
