import numpy as np
import pytest

from pertree.benchmarks import example
from pertree.synthesis import synthesize

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"\nacceptance {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


class CertificateLibrary:
    """Synthesize each (example, kind, N) once per session."""

    def __init__(self):
        self._results = {}
        self.systems = {name: example(name) for name in ("example1", "example2", "example3")}

    def store(self, key, result):
        self._results[key] = result

    def result(self, name, kind, N, constrained=None):
        sys, cons = self.systems[name]
        if constrained is None:
            constrained = cons is not None
        key = (name, kind, N, constrained)
        if key not in self._results:
            self._results[key] = synthesize(sys, N, kind, cons if constrained else None)
        return self._results[key]

    def certificate(self, *args, **kw):
        res = self.result(*args, **kw)
        assert res.feasible, f"{args} expected feasible, got {res.status}"
        return res.certificate


@pytest.fixture(scope="session")
def library():
    return CertificateLibrary()


@pytest.fixture(scope="session")
def ex1(library):
    return library.systems["example1"][0]


@pytest.fixture(scope="session")
def ex2(library):
    return library.systems["example2"][0]


@pytest.fixture(scope="session")
def ex3(library):
    return library.systems["example3"]


def random_instance(rng, n, m, rank, s):
    """(P0, A, Ms) satisfying the replacement preconditions."""
    U, _ = np.linalg.qr(rng.standard_normal((m, m)))
    V, _ = np.linalg.qr(rng.standard_normal((n, n)))
    sv = np.zeros((m, n))
    for i in range(rank):
        sv[i, i] = rng.uniform(0.5, 2.0)
    A = U @ sv @ V.T
    Ms = []
    for _ in range(s):
        R = rng.standard_normal((m, m))
        Ms.append(R @ R.T * rng.uniform(0.1, 2.0))
    R = rng.standard_normal((n, n))
    base = max((A.T @ M @ A for M in Ms), key=lambda X: np.linalg.eigvalsh(X)[-1])
    P0 = sum(A.T @ M @ A for M in Ms) + base + R @ R.T + 0.1 * np.eye(n)
    return P0, A, Ms


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
