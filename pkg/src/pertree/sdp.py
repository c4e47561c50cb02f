"""A small, solver-agnostic layer for block-LMI programs.

Programs are assembled from :class:`Variable` objects and affine matrix
expressions (:class:`Affine`), kept as plain data, and only translated to a
backend (cvxpy) inside :func:`solve`.  Keeping the program as data lets every
returned solution be re-checked numerically with :func:`check_solution`,
independently of what the backend reports.

Strict inequalities ``M > 0`` are encoded as ``M - margin * I >= 0``.  The
margin is either a fixed positive number or, for the normalized margin
programs used for feasibility verdicts, a scalar decision variable ``tau``
that is maximized.
"""
from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MARGIN_VARIABLE = "tau"
DEFAULT_TOL_FEAS = 1e-7
DEFAULT_BACKENDS = ("CLARABEL", "CVXOPT", "SCS")
MAX_ITERS_ENV = "PERTREE_MAX_ITERS"


class Variable:
    """A named matrix decision variable; symmetric ones carry ``n(n+1)/2`` coordinates."""

    __array_ufunc__ = None  # make ``ndarray @ Variable`` defer to __rmatmul__

    def __init__(self, name: str, shape: tuple[int, int], symmetric: bool = False, role: str = ""):
        shape = tuple(int(s) for s in shape)
        if len(shape) != 2 or min(shape) <= 0:
            raise ValueError(f"variable {name!r} needs a positive 2-D shape, got {shape}")
        if symmetric and shape[0] != shape[1]:
            raise ValueError(f"symmetric variable {name!r} must be square")
        self.name = name
        self.shape = shape
        self.symmetric = symmetric
        self.role = role

    @property
    def n_coords(self) -> int:
        n, m = self.shape
        return n * (n + 1) // 2 if self.symmetric else n * m

    def basis(self) -> Iterable[np.ndarray]:
        """Unit matrices spanning the variable's coordinates."""
        n, m = self.shape
        if self.symmetric:
            for i in range(n):
                for j in range(i, n):
                    E = np.zeros(self.shape)
                    E[i, j] = E[j, i] = 1.0
                    yield E
        else:
            for i in range(n):
                for j in range(m):
                    E = np.zeros(self.shape)
                    E[i, j] = 1.0
                    yield E

    @property
    def expr(self) -> "Affine":
        return Affine([(None, self, None, False)], np.zeros(self.shape))

    # arithmetic delegates to Affine
    def __add__(self, o): return self.expr + o
    def __radd__(self, o): return o + self.expr
    def __sub__(self, o): return self.expr - o
    def __rsub__(self, o): return o - self.expr
    def __neg__(self): return -self.expr
    def __mul__(self, o): return self.expr * o
    def __rmul__(self, o): return self.expr * o
    def __matmul__(self, o): return self.expr @ o
    def __rmatmul__(self, o): return o @ self.expr

    @property
    def T(self) -> "Affine":
        return self.expr.T

    def __repr__(self) -> str:
        kind = "sym" if self.symmetric else "mat"
        return f"Variable({self.name!r}, {self.shape}, {kind})"


Term = tuple  # (left | None, Variable, right | None, transposed)


def _as_affine(x, shape=None) -> "Affine":
    if isinstance(x, Affine):
        return x
    if isinstance(x, Variable):
        return x.expr
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0 and shape is not None:
        arr = np.full(shape, float(arr))
    if arr.ndim != 2:
        raise ValueError(f"constant of shape {arr.shape} is not a matrix")
    return Affine([], arr)


class Affine:
    """``const + sum_k L_k X_k R_k`` where ``X_k`` is a variable or its transpose."""

    __array_ufunc__ = None

    def __init__(self, terms: Sequence[Term], const: np.ndarray):
        self.terms = list(terms)
        self.const = np.asarray(const, dtype=float)

    @property
    def shape(self) -> tuple[int, int]:
        return self.const.shape

    @staticmethod
    def _term_shape(term) -> tuple[int, int]:
        L, var, R, tr = term
        r, c = var.shape[::-1] if tr else var.shape
        if L is not None:
            r = L.shape[0]
        if R is not None:
            c = R.shape[1]
        return r, c

    def variables(self) -> set[str]:
        return {t[1].name for t in self.terms}

    def __add__(self, other):
        other = _as_affine(other, self.shape)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} + {other.shape}")
        return Affine(self.terms + other.terms, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_as_affine(other, self.shape))

    def __rsub__(self, other):
        return _as_affine(other, self.shape) + (-self)

    def __mul__(self, scalar):
        s = float(scalar)
        terms = [((s * np.eye(self._term_shape(t)[0]) if t[0] is None else s * t[0]), t[1], t[2], t[3])
                 for t in self.terms]
        return Affine(terms, s * self.const)

    __rmul__ = __mul__

    def __matmul__(self, M):
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != self.shape[1]:
            raise ValueError(f"cannot multiply {self.shape} @ {M.shape}")
        terms = [(L, v, M if R is None else R @ M, tr) for (L, v, R, tr) in self.terms]
        return Affine(terms, self.const @ M)

    def __rmatmul__(self, M):
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[1] != self.shape[0]:
            raise ValueError(f"cannot multiply {M.shape} @ {self.shape}")
        terms = [(M if L is None else M @ L, v, R, tr) for (L, v, R, tr) in self.terms]
        return Affine(terms, M @ self.const)

    @property
    def T(self) -> "Affine":
        terms = [(None if R is None else R.T, v, None if L is None else L.T, not tr)
                 for (L, v, R, tr) in self.terms]
        return Affine(terms, self.const.T)

    def _apply(self, term, X):
        L, var, R, tr = term
        if tr:
            X = X.T
        if L is not None:
            X = L @ X
        if R is not None:
            X = X @ R
        return X

    def evaluate(self, values: dict) -> np.ndarray:
        out = self.const.copy()
        for term in self.terms:
            name = term[1].name
            if name not in values:
                raise ValueError(f"no value supplied for variable {name!r}")
            out = out + self._apply(term, np.asarray(values[name], dtype=float))
        return out

    def coefficient(self, var: Variable, X: np.ndarray) -> np.ndarray:
        """Linear part of the expression evaluated at ``var = X`` (others zero)."""
        out = np.zeros(self.shape)
        for term in self.terms:
            if term[1] is var:
                out = out + self._apply(term, X)
        return out

    def to_cvxpy(self, cvars: dict):
        import cvxpy as cp

        out = cp.Constant(self.const) if np.any(self.const) else None
        for term in self.terms:
            L, var, R, tr = term
            X = cvars[var.name]
            if tr:
                X = X.T
            if L is not None:
                X = L @ X
            if R is not None:
                X = X @ R
            out = X if out is None else out + X
        if out is None:
            out = cp.Constant(self.const)
        return out


def diag_entries(var: Variable) -> Affine:
    """Column vector of the diagonal of a square variable."""
    n = var.shape[0]
    terms = []
    for i in range(n):
        e = np.zeros((n, 1))
        e[i] = 1.0
        terms.append((e @ e.T, var, e, False))
    return Affine(terms, np.zeros((n, 1)))


@dataclass(eq=False)
class BlockLmi:
    """``blocks`` form a symmetric block matrix required to be PSD (``sense="psd"``)
    or to exceed the program margin (``sense="strict"``)."""

    blocks: list
    sense: str = "strict"
    name: str = ""

    def __post_init__(self):
        if self.sense not in ("strict", "psd"):
            raise ValueError(f"unknown LMI sense {self.sense!r}")
        self.blocks = [[_as_affine(b) for b in row] for row in self.blocks]
        heights = [row[0].shape[0] for row in self.blocks]
        widths = [b.shape[1] for b in self.blocks[0]]
        for r, row in enumerate(self.blocks):
            if len(row) != len(widths):
                raise ValueError(f"LMI {self.name!r}: ragged block layout")
            for c, b in enumerate(row):
                if b.shape != (heights[r], widths[c]):
                    raise ValueError(f"LMI {self.name!r}: block ({r},{c}) has shape {b.shape}")
        if sum(heights) != sum(widths):
            raise ValueError(f"LMI {self.name!r} is not square")

    @classmethod
    def schur(cls, X, Y, Z, sense: str = "strict", name: str = "") -> "BlockLmi":
        """The 2x2 layout ``[[X, Y^T], [Y, Z]]``."""
        Y = _as_affine(Y)
        return cls([[X, Y.T], [Y, Z]], sense=sense, name=name)

    @property
    def dim(self) -> int:
        return sum(row[0].shape[0] for row in self.blocks)

    def variables(self) -> set[str]:
        return set().union(*(b.variables() for row in self.blocks for b in row))

    def evaluate(self, values: dict) -> np.ndarray:
        M = np.block([[b.evaluate(values) for b in row] for row in self.blocks])
        return 0.5 * (M + M.T)

    def coefficient(self, var: Variable, X: np.ndarray) -> np.ndarray:
        M = np.block([[b.coefficient(var, X) for b in row] for row in self.blocks])
        return 0.5 * (M + M.T)

    def constant(self) -> np.ndarray:
        M = np.block([[b.const for b in row] for row in self.blocks])
        return 0.5 * (M + M.T)

    def to_cvxpy(self, cvars: dict):
        import cvxpy as cp

        M = cp.bmat([[b.to_cvxpy(cvars) for b in row] for row in self.blocks])
        return 0.5 * (M + M.T)


@dataclass(eq=False)
class ScalarBound:
    """Elementwise ``expr <= upper``."""

    expr: Affine
    upper: float | np.ndarray = 1.0
    name: str = ""

    def upper_array(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.upper, dtype=float), self.expr.shape)


@dataclass(eq=False)
class SdpProgram:
    """Variables, LMIs, scalar bounds and one objective.

    ``objective`` is one of ``"feasibility"``, ``"maximize_logdet"``,
    ``"minimize_trace"`` (both on ``objective_var``) or ``"maximize_margin"``.
    ``margin`` is the strictness shift for ``"strict"`` LMIs; it must be
    :data:`MARGIN_VARIABLE` exactly when maximizing the margin.
    """

    variables: dict = field(default_factory=dict)
    lmis: list = field(default_factory=list)
    bounds: list = field(default_factory=list)
    objective: str = "feasibility"
    objective_var: str | None = None
    margin: float | str = 1e-6

    def add_variable(self, name: str, shape, symmetric: bool = False, role: str = "") -> Variable:
        if name in self.variables or name == MARGIN_VARIABLE:
            raise ValueError(f"duplicate variable name {name!r}")
        var = Variable(name, shape, symmetric=symmetric, role=role)
        self.variables[name] = var
        return var

    def add_lmi(self, lmi: BlockLmi) -> BlockLmi:
        self.lmis.append(lmi)
        return lmi

    def add_bound(self, bound: ScalarBound) -> ScalarBound:
        self.bounds.append(bound)
        return bound

    def validate(self) -> None:
        known = set(self.variables)
        for c in self.lmis:
            missing = c.variables() - known
            if missing:
                raise ValueError(f"LMI {c.name!r} uses undeclared variables {sorted(missing)}")
        if self.objective not in ("feasibility", "maximize_logdet", "minimize_trace", "maximize_margin"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective in ("maximize_logdet", "minimize_trace"):
            var = self.variables.get(self.objective_var)
            if var is None or not var.symmetric:
                raise ValueError("log-det/trace objective needs a declared symmetric variable")
        if (self.margin == MARGIN_VARIABLE) != (self.objective == "maximize_margin"):
            raise ValueError("a variable margin goes together with the maximize_margin objective")
        if self.margin != MARGIN_VARIABLE and not float(self.margin) >= 0:
            raise ValueError("strictness margin must be non-negative")

    @property
    def n_lmis(self) -> int:
        return len(self.lmis)

    def with_margin(self, margin: float) -> "SdpProgram":
        """Shallow copy with another fixed strictness margin."""
        return SdpProgram(self.variables, self.lmis, self.bounds, self.objective,
                          self.objective_var, margin)


@dataclass
class ConstraintCheck:
    name: str
    kind: str           # "lmi-strict", "lmi-psd" or "bound"
    value: float        # min eigenvalue, or min slack for bounds
    required: float     # threshold the value is compared against
    passed: bool

    @property
    def slack(self) -> float:
        return self.value - self.required


@dataclass
class CheckReport:
    checks: list
    tol: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst(self) -> ConstraintCheck | None:
        return min(self.checks, key=lambda c: c.slack, default=None)

    @property
    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]


def check_solution(program: SdpProgram, values: dict, tol: float = DEFAULT_TOL_FEAS,
                   margin: float | None = None) -> CheckReport:
    """Eigenvalue check of every constraint at the given values.

    A strict LMI passes iff ``eigmin(M) - margin >= -tol``, a PSD LMI iff
    ``eigmin(M) >= -tol``, a bound iff its slack is ``>= -tol``.  With a
    variable margin, ``margin`` defaults to ``values["tau"]``.
    """
    missing = set(program.variables) - set(values)
    if missing:
        raise ValueError(f"missing values for variables {sorted(missing)}")
    if margin is None:
        margin = float(values[MARGIN_VARIABLE]) if program.margin == MARGIN_VARIABLE else float(program.margin)
    checks = []
    for k, lmi in enumerate(program.lmis):
        eig = float(np.linalg.eigvalsh(lmi.evaluate(values))[0])
        req = margin if lmi.sense == "strict" else 0.0
        checks.append(ConstraintCheck(lmi.name or f"lmi{k}", f"lmi-{lmi.sense}", eig, req,
                                      eig - req >= -tol))
    for k, b in enumerate(program.bounds):
        slack = float(np.min(b.upper_array() - b.expr.evaluate(values)))
        checks.append(ConstraintCheck(b.name or f"bound{k}", "bound", slack, 0.0, slack >= -tol))
    return CheckReport(checks, tol)


@dataclass
class SdpSolution:
    status: str                 # optimal | feasible | infeasible | numerical-failure
    values: dict
    objective: float | None
    margin: float | None        # strictness margin the values satisfy (tau for margin programs)
    worst_residual: float       # largest constraint violation found by re-checking, >= 0
    min_margin: float           # min over constraints of (eigmin - required)
    backend: str = ""
    backend_status: str = ""
    report: CheckReport | None = None

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


@dataclass
class SolveOptions:
    backends: tuple = DEFAULT_BACKENDS
    tol_feas: float = DEFAULT_TOL_FEAS
    max_iters: int | None = None
    verbose: bool = False

    def iteration_cap(self) -> int | None:
        if self.max_iters is not None:
            return self.max_iters
        env = os.environ.get(MAX_ITERS_ENV)
        return int(env) if env else None


def _backend_kwargs(backend: str, max_iters: int | None) -> dict:
    kw: dict = {}
    if backend == "CLARABEL":
        kw.update(tol_gap_abs=1e-9, tol_gap_rel=1e-9, tol_feas=1e-9)
        if max_iters:
            kw["max_iter"] = max_iters
    elif backend == "CVXOPT":
        kw.update(abstol=1e-9, reltol=1e-9, feastol=1e-9)
        if max_iters:
            kw["max_iters"] = max_iters
    elif backend == "SCS":
        kw.update(eps=1e-9)
        if max_iters:
            kw["max_iters"] = max_iters
    return kw


def _to_cvxpy(program: SdpProgram):
    import cvxpy as cp

    cvars = {name: cp.Variable(v.shape, symmetric=v.symmetric, name=name)
             for name, v in program.variables.items()}
    tau = cp.Variable(name=MARGIN_VARIABLE) if program.margin == MARGIN_VARIABLE else None
    margin = tau if tau is not None else float(program.margin)
    cons = []
    for lmi in program.lmis:
        M = lmi.to_cvxpy(cvars)
        if lmi.sense == "strict":
            cons.append(M - margin * np.eye(lmi.dim) >> 0)
        else:
            cons.append(M >> 0)
    for b in program.bounds:
        cons.append(b.expr.to_cvxpy(cvars) <= b.upper_array())
    if program.objective == "maximize_logdet":
        obj = cp.Maximize(cp.log_det(cvars[program.objective_var]))
    elif program.objective == "minimize_trace":
        obj = cp.Minimize(cp.trace(cvars[program.objective_var]))
    elif program.objective == "maximize_margin":
        obj = cp.Maximize(tau)
    else:
        obj = cp.Minimize(0)
    return cp.Problem(obj, cons), cvars, tau


def _run_backend(problem, cvars, tau, program: SdpProgram, backend: str, options: SolveOptions):
    """One backend attempt; returns (outcome, values, objective, backend_status)."""
    import cvxpy as cp

    try:
        with warnings.catch_warnings():
            # inaccurate statuses are handled by the eigenvalue re-check
            warnings.simplefilter("ignore", UserWarning)
            problem.solve(solver=backend, verbose=options.verbose,
                          **_backend_kwargs(backend, options.iteration_cap()))
    except cp.error.SolverError as err:
        log.debug("backend %s failed: %s", backend, err)
        return "failed", None, None, f"error: {err}"
    status = problem.status
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return "infeasible", None, None, status
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return "failed", None, None, str(status)
    values = {name: np.array(v.value, dtype=float) for name, v in cvars.items()}
    for name, v in program.variables.items():
        if v.symmetric:
            values[name] = 0.5 * (values[name] + values[name].T)
    if tau is not None:
        values[MARGIN_VARIABLE] = float(tau.value)
    return "solved", values, float(problem.value), status


def _available(options: SolveOptions) -> list[str]:
    import cvxpy as cp

    installed = set(cp.installed_solvers())
    chosen = [b for b in options.backends if b in installed]
    if not chosen:
        raise RuntimeError(f"none of the backends {options.backends} is installed")
    return chosen


def _failure(status, backend, bstatus) -> SdpSolution:
    return SdpSolution(status, {}, None, None, np.inf, -np.inf, backend, bstatus)


def solve(program: SdpProgram, options: SolveOptions | None = None) -> SdpSolution:
    """Solve and verify a program.

    Backends are tried in order until one returns a solution that passes the
    eigenvalue re-check.  ``infeasible`` is reported when a backend produces
    an infeasibility certificate, or when no backend yields a verified
    solution and the margin-relaxed program (margin / 100) is certified
    infeasible.  Otherwise an unverifiable result is ``numerical-failure``.
    """
    options = options or SolveOptions()
    program.validate()
    problem, cvars, tau = _to_cvxpy(program)
    best = None
    last = ("", "")
    for backend in _available(options):
        outcome, values, obj, bstatus = _run_backend(problem, cvars, tau, program, backend, options)
        last = (backend, bstatus)
        if outcome == "infeasible":
            return _failure("infeasible", backend, bstatus)
        if outcome != "solved":
            continue
        report = check_solution(program, values, options.tol_feas)
        margin = values[MARGIN_VARIABLE] if program.margin == MARGIN_VARIABLE else float(program.margin)
        worst = report.worst
        min_margin = worst.slack if worst is not None else np.inf
        if report.passed:
            status = "feasible" if program.objective == "feasibility" else "optimal"
            return SdpSolution(status, values, obj, margin, max(0.0, -min_margin), min_margin,
                               backend, bstatus, report)
        log.info("backend %s solution failed verification at %s (slack %.3e)",
                 backend, worst.name, worst.slack)
        if best is None or min_margin > best.min_margin:
            best = SdpSolution("numerical-failure", values, obj, margin, -min_margin, min_margin,
                               backend, bstatus, report)
    if program.margin != MARGIN_VARIABLE and float(program.margin) > 0:
        relaxed = program.with_margin(float(program.margin) / 100)
        r_problem, r_cvars, r_tau = _to_cvxpy(relaxed)
        for backend in _available(options):
            outcome, _, _, bstatus = _run_backend(r_problem, r_cvars, r_tau, relaxed, backend, options)
            if outcome == "infeasible":
                return _failure("infeasible", backend, f"relaxed: {bstatus}")
            if outcome == "solved":
                break
    return best if best is not None else _failure("numerical-failure", *last)


# --- SDPA export ------------------------------------------------------------

def to_sdpa(program: SdpProgram) -> str:
    """Render the program in SDPA sparse format.

    Coordinates are the variables' upper-triangle (symmetric) or full
    (general) entries, followed by ``tau`` for margin programs.  SDPA cannot
    express a log-det objective; such programs are written as feasibility
    problems with a comment saying so.
    """
    program.validate()
    coords: list[tuple[Variable | None, np.ndarray | None]] = []
    for var in program.variables.values():
        for E in var.basis():
            coords.append((var, E))
    variable_margin = program.margin == MARGIN_VARIABLE
    if variable_margin:
        coords.append((None, None))
    fixed_margin = 0.0 if variable_margin else float(program.margin)

    blocks = []  # (size, F0, [F_k]); negative size marks a diagonal block
    for lmi in program.lmis:
        n = lmi.dim
        req = fixed_margin if lmi.sense == "strict" else 0.0
        F0 = req * np.eye(n) - lmi.constant()
        Fs = []
        for var, E in coords:
            if var is None:
                Fs.append(-np.eye(n) if lmi.sense == "strict" else np.zeros((n, n)))
            elif var.name in lmi.variables():
                Fs.append(lmi.coefficient(var, E))
            else:
                Fs.append(None)
        blocks.append((n, F0, Fs))
    for b in program.bounds:
        m = int(np.prod(b.expr.shape))
        F0 = -(b.upper_array() - b.expr.const).reshape(-1)
        Fs = []
        for var, E in coords:
            if var is None or var.name not in b.expr.variables():
                Fs.append(None)
            else:
                Fs.append(-b.expr.coefficient(var, E).reshape(-1))
        blocks.append((-m, F0, Fs))

    c = np.zeros(len(coords))
    comments = []
    if program.objective == "minimize_trace":
        for k, (var, E) in enumerate(coords):
            if var is not None and var.name == program.objective_var:
                c[k] = np.trace(E)
    elif program.objective == "maximize_margin":
        c[-1] = -1.0
    elif program.objective == "maximize_logdet":
        comments.append(f'"log-det objective on {program.objective_var} dropped; feasibility only')

    lines = [f'"pertree program: {len(program.lmis)} LMIs, {len(program.bounds)} bounds']
    lines += comments
    lines.append(str(len(coords)))
    lines.append(str(len(blocks)))
    lines.append(" ".join(str(b[0]) for b in blocks))
    lines.append(" ".join(repr(float(v)) for v in c))

    def emit(mat_no, blk_no, M, size):
        if size < 0:
            for i, v in enumerate(M):
                if v != 0:
                    lines.append(f"{mat_no} {blk_no} {i + 1} {i + 1} {float(v)!r}")
            return
        for i in range(size):
            for j in range(i, size):
                if M[i, j] != 0:
                    lines.append(f"{mat_no} {blk_no} {i + 1} {j + 1} {float(M[i, j])!r}")

    for blk_no, (size, F0, Fs) in enumerate(blocks, start=1):
        emit(0, blk_no, F0, size)
        for k, F in enumerate(Fs, start=1):
            if F is not None:
                emit(k, blk_no, F, size)
    return "\n".join(lines) + "\n"
