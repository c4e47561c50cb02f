"""Independent checks of synthesized controllers.

Nothing here trusts the synthesis programs: every verdict is recomputed from
the recovered gains and Lyapunov matrices with dense linear algebra.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .sdp import MARGIN_VARIABLE, BlockLmi, SdpProgram, SolveOptions, solve
from .synthesis import ControllerCertificate
from .system import ConstraintPolytope, UncertainLinearSystem
from .tree import all_transitions, build_index, stage_gains

MAX_ENUMERATION = 10 ** 6
RANK_RTOL = 1e-10
RANK_BAND = 10.0


class PreconditionError(ValueError):
    """Inputs violate the assumptions of a constructive routine."""


class AmbiguousRankError(ValueError):
    """A singular value sits too close to the rank threshold to branch safely."""


# --- finite-step Lyapunov function ------------------------------------------

@dataclass(eq=False)
class FslfCertificate:
    P0: np.ndarray
    N: int
    margins: np.ndarray          # eigmin(P0 - psi' P0 psi) per checked scenario
    scenarios: np.ndarray        # (n_checked, N) vertex labels, leaf order when exhaustive
    exhaustive: bool = True

    @property
    def valid(self) -> bool:
        return bool(np.all(self.margins > 0))

    @property
    def min_margin(self) -> float:
        return float(np.min(self.margins))

    @property
    def failing(self) -> list[tuple[int, ...]]:
        return [tuple(int(i) for i in s) for s in self.scenarios[self.margins <= 0]]

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "valid": self.valid,
            "exhaustive": self.exhaustive,
            "n_scenarios": int(self.margins.size),
            "min_margin": self.min_margin,
            "margins": self.margins.tolist(),
            "failing_scenarios": self.failing,
        }


def _sampled_transitions(sys, K, N, n_samples, rng):
    labels = rng.integers(0, sys.n_d, size=(n_samples, N))
    psi = np.broadcast_to(np.eye(sys.n_x), (n_samples, sys.n_x, sys.n_x)).copy()
    j = np.zeros(n_samples, dtype=np.int64)
    for t in range(N):
        Kt = K[t][0 if K[t].shape[0] == 1 else j]
        Kt = np.broadcast_to(Kt, (n_samples,) + K[t].shape[1:])
        i = labels[:, t]
        acl = sys.A[i] + np.einsum("nab,nbc->nac", sys.B[i], Kt)
        psi = np.einsum("nab,nbc->nac", acl, psi)
        j = sys.n_d * j + i
    return labels, psi


def fslf_margins(sys: UncertainLinearSystem, gains, N: int, P0,
                 max_scenarios: int = MAX_ENUMERATION, n_samples: int = 20000,
                 seed: int = 0) -> FslfCertificate:
    """``eigmin(P0 - psi' P0 psi)`` over the vertex scenarios of length ``N``.

    All ``n_d**N`` scenarios are enumerated when that is at most
    ``max_scenarios``; otherwise ``n_samples`` scenarios are drawn uniformly
    and the result is flagged as not exhaustive.
    """
    P0 = np.asarray(P0, dtype=float)
    K = stage_gains(gains, N, sys.n_d, sys.n_u, sys.n_x)
    total = sys.n_d ** N
    if total <= max_scenarios:
        psi = all_transitions(sys, build_index(sys.n_d, N, max_leaves=None), K)[-1]
        labels = np.array(np.unravel_index(np.arange(total), (sys.n_d,) * N)).T.reshape(total, N)
        exhaustive = True
    else:
        labels, psi = _sampled_transitions(sys, K, N, n_samples, np.random.default_rng(seed))
        exhaustive = False
    D = P0[None] - np.einsum("nba,bc,ncd->nad", psi, P0, psi)
    margins = np.linalg.eigvalsh(0.5 * (D + np.swapaxes(D, 1, 2)))[:, 0]
    return FslfCertificate(P0, N, margins, labels, exhaustive)


def verify_fslf(sys: UncertainLinearSystem, certificate: ControllerCertificate,
                **kw) -> FslfCertificate:
    """FSLF check of a certificate with its own ``P_0``."""
    _check_dims(sys, certificate)
    return fslf_margins(sys, certificate, certificate.N, certificate.P0, **kw)


def find_fslf(sys: UncertainLinearSystem, gains, N: int,
              options: SolveOptions | None = None) -> tuple[np.ndarray | None, float]:
    """Search a ``P0`` for fixed gains by maximizing the normalized FSLF margin.

    Returns ``(P0, tau)``; ``P0`` is ``None`` when the best margin is not positive.
    """
    psis = all_transitions(sys, build_index(sys.n_d, N), gains)[-1]
    prog = SdpProgram(objective="maximize_margin", margin=MARGIN_VARIABLE)
    P = prog.add_variable("P", (sys.n_x, sys.n_x), symmetric=True)
    prog.add_lmi(BlockLmi([[P]], name="pos"))
    prog.add_lmi(BlockLmi([[np.eye(sys.n_x) - P]], sense="psd", name="scale"))
    for k, psi in enumerate(psis):
        prog.add_lmi(BlockLmi([[P - psi.T @ P @ psi]], name=f"scenario {k}"))
    sol = solve(prog, options)
    if not sol.ok or sol.margin <= 0:
        return None, (sol.margin if sol.margin is not None else float("nan"))
    return sol.values["P"], sol.margin


# --- per-edge dense inequalities --------------------------------------------

@dataclass(eq=False)
class EdgeReport:
    margins: list            # stage t: (m_t, n_d) eigmin(P_p - Acl' P_c Acl)
    required: float

    @property
    def min_margin(self) -> float:
        return float(min(np.min(m) for m in self.margins))

    @property
    def n_edges(self) -> int:
        return int(sum(m.size for m in self.margins))

    @property
    def passed(self) -> bool:
        return self.min_margin >= self.required

    def failing(self) -> list[tuple[int, int, int]]:
        out = []
        for t, m in enumerate(self.margins):
            for j, i in zip(*np.nonzero(m < self.required)):
                out.append((t, int(j), int(i)))
        return out

    def to_dict(self) -> dict:
        return {"n_edges": self.n_edges, "required": self.required, "min_margin": self.min_margin,
                "passed": self.passed, "failing_edges": self.failing()}


def verify_edges(sys: UncertainLinearSystem, certificate: ControllerCertificate,
                 required: float = 0.0) -> EdgeReport:
    """Check ``P(t, j) - Acl' P(t+1, child) Acl > required`` on every edge.

    ``Acl = A_i + B_i K(t, j)`` and stage ``N`` maps back to ``P_0``.  Tied
    certificates have one node per stage, hence ``n_d`` edges per stage.
    """
    _check_dims(sys, certificate)
    cert = certificate
    nd = sys.n_d
    margins = []
    for t in range(cert.N):
        m = max(cert.S[t].shape[0], cert.gains[t].shape[0])
        Pp = np.linalg.inv(np.broadcast_to(cert.S[t], (m,) + cert.S[t].shape[1:]))
        K = np.broadcast_to(cert.gains[t], (m,) + cert.gains[t].shape[1:])
        if t + 1 == cert.N:
            Pc = np.broadcast_to(cert.P0, (m, nd, sys.n_x, sys.n_x))
        else:
            Snext = cert.S[t + 1]
            if Snext.shape[0] == 1:
                Pc = np.broadcast_to(np.linalg.inv(Snext[0]), (m, nd, sys.n_x, sys.n_x))
            else:
                Pc = np.linalg.inv(Snext).reshape(m, nd, sys.n_x, sys.n_x)
        acl = sys.A[None] + np.einsum("iab,jbc->jiac", sys.B, K)
        D = Pp[:, None] - np.einsum("jiba,jibc,jicd->jiad", acl, Pc, acl)
        margins.append(np.linalg.eigvalsh(0.5 * (D + np.swapaxes(D, -1, -2)))[..., 0])
    return EdgeReport(margins, required)


def verify_g_bound(certificate: ControllerCertificate) -> float:
    """Min eigenvalue of ``G' P G - (G' + G - S)`` over all nodes (static only)."""
    if certificate.G is None:
        raise ValueError("certificate carries no G matrix")
    G = certificate.G
    worst = np.inf
    for t, j in certificate.nodes():
        S = certificate.shape_matrix(t, j)
        D = G.T @ np.linalg.solve(S, G) - (G.T + G - S)
        worst = min(worst, float(np.linalg.eigvalsh(0.5 * (D + D.T))[0]))
    return worst


# --- ellipsoid geometry -----------------------------------------------------

def ellipsoid_in_polytope(P, rows) -> np.ndarray:
    """``1 - r' P^{-1} r`` for each row; nonnegative means ``{x'Px <= 1}`` lies in ``r'x <= 1``."""
    P = np.asarray(P, dtype=float)
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    try:
        C = np.linalg.cholesky(0.5 * (P + P.T))
    except np.linalg.LinAlgError:
        raise ValueError("shape matrix is not positive definite") from None
    Y = np.linalg.solve(C, rows.T)
    return 1.0 - np.sum(Y * Y, axis=0)


@dataclass(eq=False)
class ContainmentReport:
    slacks: list            # stage t: (m_t, n_c)

    @property
    def min_slack(self) -> float:
        return float(min(np.min(s) for s in self.slacks))

    def passed(self, tol: float = 1e-7) -> bool:
        return self.min_slack >= -tol

    def to_dict(self) -> dict:
        return {"min_slack": self.min_slack, "slacks": [s.tolist() for s in self.slacks]}


def verify_containment(certificate: ControllerCertificate, cons: ConstraintPolytope) -> ContainmentReport:
    """Support-function slacks of every node ellipsoid against ``F + E K(t, j)``."""
    cert = certificate
    out = []
    for t in range(cert.N):
        m = max(cert.S[t].shape[0], cert.gains[t].shape[0])
        out.append(np.array([ellipsoid_in_polytope(cert.lyapunov(t, j), cons.rows(cert.gain(t, j)))
                             for j in range(m)]))
    return ContainmentReport(out)


# --- matrix replacement -------------------------------------------------------

@dataclass(eq=False)
class ReplacementResult:
    Q: np.ndarray
    mu: float
    c: float | None
    rank: int


def _sym(M):
    return 0.5 * (M + M.T)


def matrix_replacement(P0, A, M_list, safety: float = 2.0) -> ReplacementResult:
    """Construct ``Q`` with ``Q > M_i`` for all ``i`` and ``P0 - A' Q A > 0``.

    Requires ``P0 > 0``, ``M_i >= 0`` and ``P0 - A' M_i A > 0``.  With an
    invertible square ``A``, ``Q = A^{-T} (P0 - mu I) A^{-1}``.  Otherwise
    ``Q = U diag(Q11, c I) U'`` from the SVD ``A = U1 S1 V1'``, where
    ``Q11 = S1^{-1}(V1'P0V1 - V1'P0V2 (V2'P0V2)^{-1} V2'P0V1 - mu I) S1^{-1}``
    and ``c`` is ``safety`` times the smallest admissible value.  ``mu`` is
    half the smallest eigenvalue of the reduced inequality.
    """
    P0 = _sym(np.asarray(P0, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Ms = [_sym(np.asarray(M, dtype=float)) for M in M_list]
    n = P0.shape[0]
    m = A.shape[0]
    if A.shape[1] != n or not Ms or any(M.shape != (m, m) for M in Ms):
        raise PreconditionError("inconsistent dimensions")
    scale = max(1.0, float(np.max(np.abs(P0))))
    if np.linalg.eigvalsh(P0)[0] <= 0:
        raise PreconditionError("P0 is not positive definite")
    for k, M in enumerate(Ms):
        if np.linalg.eigvalsh(M)[0] < -1e-12 * max(1.0, float(np.max(np.abs(M)))):
            raise PreconditionError(f"M_{k} is not positive semidefinite")
        if np.linalg.eigvalsh(_sym(P0 - A.T @ M @ A))[0] <= 0:
            raise PreconditionError(f"P0 - A' M_{k} A is not positive definite")

    U, sv, Vt = np.linalg.svd(A)
    V = Vt.T
    smax = float(sv[0]) if sv.size else 0.0
    thresh = RANK_RTOL * smax
    if smax > 0 and np.any((sv > thresh / RANK_BAND) & (sv < thresh * RANK_BAND)):
        raise AmbiguousRankError(f"singular values {sv} too close to the rank threshold {thresh:.3g}")
    r = int(np.sum(sv > thresh)) if smax > 0 else 0

    if r == n == m:
        mu = 0.5 * min(float(np.linalg.eigvalsh(_sym(P0 - A.T @ M @ A))[0]) for M in Ms)
        Ainv = np.linalg.inv(A)
        return ReplacementResult(_sym(Ainv.T @ (P0 - mu * np.eye(n)) @ Ainv), mu, None, r)

    U1, U2 = U[:, :r], U[:, r:]
    V1, V2 = V[:, :r], V[:, r:]
    S1 = np.diag(sv[:r])
    reduced = V1.T @ P0 @ V1
    if V2.shape[1]:
        reduced = reduced - V1.T @ P0 @ V2 @ np.linalg.solve(V2.T @ P0 @ V2, V2.T @ P0 @ V1)
    reduced = _sym(reduced)
    Q11 = np.zeros((0, 0))
    mu = 0.0
    if r:
        mu = 0.5 * min(float(np.linalg.eigvalsh(_sym(reduced - S1 @ U1.T @ M @ U1 @ S1))[0]) for M in Ms)
        S1inv = np.diag(1.0 / sv[:r])
        Q11 = _sym(S1inv @ (reduced - mu * np.eye(r)) @ S1inv)
    c = None
    if m - r:
        bound = 0.0
        for M in Ms:
            M11, M12, M22 = U1.T @ M @ U1, U1.T @ M @ U2, U2.T @ M @ U2
            T = M22 + M12.T @ np.linalg.solve(Q11 - M11, M12) if r else M22
            bound = max(bound, float(np.linalg.eigvalsh(_sym(T))[-1]))
        c = safety * bound if bound > 1e-12 * scale else 1.0
        Qbar = np.block([[Q11, np.zeros((r, m - r))], [np.zeros((m - r, r)), c * np.eye(m - r)]])
    else:
        Qbar = Q11
    return ReplacementResult(_sym(U @ Qbar @ U.T), mu, c, r)


# --- decay estimation ---------------------------------------------------------

@dataclass
class DecayEstimate:
    c: float
    lam: float
    residual: float
    n_points: int

    @property
    def valid(self) -> bool:
        return self.c >= 1 and 0 < self.lam < 1


def estimate_decay(trajectories, floor: float = 1e-12) -> DecayEstimate:
    """Fit ``||x_t|| <= c lam^t ||x_0||`` to one or more state trajectories.

    The data are the upper envelopes ``e_t = max_{s >= t} ||x_s|| / ||x_0||``,
    which remove the within-period wobble of finite-step decay.  ``lam``
    comes from a least-squares line through ``log e_t``; ``c`` is then the
    smallest constant making the bound hold on the data, clipped to at least
    1.  Points below ``floor`` (relative) are dropped as numerically zero.
    """
    if isinstance(trajectories, np.ndarray) and trajectories.ndim == 2:
        trajectories = [trajectories]
    ts, logs = [], []
    for X in trajectories:
        X = np.asarray(X, dtype=float)
        r = np.linalg.norm(X, axis=1)
        if r[0] == 0:
            continue
        rel = np.maximum.accumulate((r / r[0])[::-1])[::-1]
        keep = rel > floor
        ts.append(np.nonzero(keep)[0].astype(float))
        logs.append(np.log(rel[keep]))
    if not ts:
        raise ValueError("need at least one trajectory with a nonzero initial state")
    t = np.concatenate(ts)
    y = np.concatenate(logs)
    if np.ptp(t) == 0:
        raise ValueError("trajectories too short to fit a decay rate")
    slope, intercept = np.polyfit(t, y, 1)
    lam = float(np.exp(slope))
    fit = intercept + slope * t
    c = max(1.0, float(np.exp(np.max(y - slope * t))))
    return DecayEstimate(c=c, lam=lam, residual=float(np.sqrt(np.mean((y - fit) ** 2))),
                         n_points=int(t.size))


# --- combined report ------------------------------------------------------------

@dataclass(eq=False)
class VerificationReport:
    fslf: FslfCertificate
    edges: EdgeReport
    containment: ContainmentReport | None = None
    g_bound: float | None = None
    decay: DecayEstimate | None = None
    tol: float = 1e-7
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        ok = self.fslf.valid and self.edges.passed
        if self.containment is not None:
            ok = ok and self.containment.passed(self.tol)
        if self.g_bound is not None:
            ok = ok and self.g_bound >= -self.tol
        if self.decay is not None:
            ok = ok and self.decay.valid
        return bool(ok)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "fslf": self.fslf.to_dict(),
            "edges": self.edges.to_dict(),
            "containment": None if self.containment is None else self.containment.to_dict(),
            "g_bound": self.g_bound,
            "decay": None if self.decay is None else asdict(self.decay),
            **self.extra,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _check_dims(sys: UncertainLinearSystem, cert: ControllerCertificate) -> None:
    if cert.n_x != sys.n_x or cert.n_u != sys.n_u or cert.n_d != sys.n_d:
        raise ValueError(f"certificate is for n_x={cert.n_x}, n_u={cert.n_u}, n_d={cert.n_d}; "
                         f"system has n_x={sys.n_x}, n_u={sys.n_u}, n_d={sys.n_d}")


def verify_certificate(sys: UncertainLinearSystem, certificate: ControllerCertificate,
                       cons: ConstraintPolytope | None = None, edge_margin: float | None = None,
                       tol: float = 1e-7, **fslf_kw) -> VerificationReport:
    """FSLF enumeration, dense edge inequalities, containment and G bound."""
    _check_dims(sys, certificate)
    required = certificate.epsilon / 10 if edge_margin is None else edge_margin
    return VerificationReport(
        fslf=verify_fslf(sys, certificate, **fslf_kw),
        edges=verify_edges(sys, certificate, required),
        containment=None if cons is None else verify_containment(certificate, cons),
        g_bound=None if certificate.G is None else verify_g_bound(certificate),
        tol=tol,
    )
