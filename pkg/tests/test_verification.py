import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_instance
from pertree.runtime import run_closed_loop
from pertree.system import sample_realization
from pertree.verification import (
    AmbiguousRankError,
    PreconditionError,
    ellipsoid_in_polytope,
    estimate_decay,
    find_fslf,
    fslf_margins,
    matrix_replacement,
    verify_certificate,
    verify_containment,
    verify_edges,
    verify_fslf,
)


def check_replacement(P0, A, Ms, res):
    for M in Ms:
        assert np.linalg.eigvalsh(res.Q - M)[0] > 0
    assert np.linalg.eigvalsh(P0 - A.T @ res.Q @ A)[0] > 0


def test_ellipsoid_containment_examples():
    np.testing.assert_allclose(ellipsoid_in_polytope(np.eye(2), [[1.0, 0.0]]), [0.0], atol=1e-15)
    np.testing.assert_allclose(ellipsoid_in_polytope(4 * np.eye(2), [[1.0, 0.0], [0.0, -1.0]]),
                               [0.75, 0.75], atol=1e-15)
    with pytest.raises(ValueError):
        ellipsoid_in_polytope(-np.eye(2), [[1.0, 0.0]])


def test_replacement_with_zero_matrix():
    M = np.eye(2)
    res = matrix_replacement(np.eye(3), np.zeros((2, 3)), [M])
    assert res.rank == 0
    assert res.c == pytest.approx(2.0)
    check_replacement(np.eye(3), np.zeros((2, 3)), [M], res)


def test_full_rank_replacement_leaves_mu_identity(rng):
    P0, A, Ms = random_instance(rng, 4, 4, 4, 3)
    res = matrix_replacement(P0, A, Ms)
    assert res.rank == 4 and res.c is None
    check_replacement(P0, A, Ms, res)
    np.testing.assert_allclose(P0 - A.T @ res.Q @ A, res.mu * np.eye(4), atol=1e-8)


def test_rank_deficient_schur_complement_is_mu_identity(rng):
    P0, A, Ms = random_instance(rng, 4, 4, 2, 2)
    res = matrix_replacement(P0, A, Ms)
    assert res.rank == 2
    check_replacement(P0, A, Ms, res)
    _, _, Vt = np.linalg.svd(A)
    V = Vt.T
    D = V.T @ (P0 - A.T @ res.Q @ A) @ V
    schur = D[:2, :2] - D[:2, 2:] @ np.linalg.solve(D[2:, 2:], D[2:, :2])
    np.testing.assert_allclose(schur, res.mu * np.eye(2), atol=1e-8)


def test_replacement_errors(rng):
    P0, A, Ms = random_instance(rng, 3, 3, 3, 1)
    with pytest.raises(PreconditionError):
        matrix_replacement(-P0, A, Ms)
    with pytest.raises(PreconditionError):
        matrix_replacement(P0, A, [-np.eye(3)])
    with pytest.raises(PreconditionError):
        matrix_replacement(P0, A, [1e6 * np.eye(3)])
    with pytest.raises(PreconditionError):
        matrix_replacement(P0, A, [np.eye(2)])
    A_amb = np.diag([1.0, 1e-10, 0.0])
    with pytest.raises(AmbiguousRankError):
        matrix_replacement(np.eye(3) * 10, A_amb, [np.eye(3)])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(2, 5), st.integers(1, 3), st.integers(0, 2 ** 31 - 1),
       st.booleans())
def test_replacement_property(n, m, s, seed, deficient):
    rng = np.random.default_rng(seed)
    rank = rng.integers(0, min(n, m)) if deficient else min(n, m)
    P0, A, Ms = random_instance(rng, n, m, int(rank), s)
    res = matrix_replacement(P0, A, Ms)
    check_replacement(P0, A, Ms, res)


def test_decay_of_exact_geometric_sequence():
    X = np.array([[0.5 ** t, 0.0] for t in range(30)])
    est = estimate_decay(X)
    assert est.lam == pytest.approx(0.5, rel=1e-9)
    assert est.c == pytest.approx(1.0)
    assert est.valid
    assert not estimate_decay(np.ones((10, 2))).valid
    with pytest.raises(ValueError):
        estimate_decay(np.zeros((5, 2)))


def test_reference_fslf(library, ex2):
    cert = library.certificate("example2", "litpc", 2)
    f = verify_fslf(ex2, cert)
    assert f.exhaustive and f.margins.size == 16 and f.valid
    zero = [np.zeros((1, 1, 2)), np.zeros((4, 1, 2))]
    bad = fslf_margins(ex2, zero, 2, cert.P0)
    assert not bad.valid and bad.failing


def test_trivial_fslf_margin():
    from pertree.system import UncertainLinearSystem

    sys = UncertainLinearSystem([(0.5 * np.eye(2), np.zeros((2, 1)))])
    f = fslf_margins(sys, np.zeros((1, 2)), 1, np.eye(2))
    assert f.min_margin == pytest.approx(0.75)
    P0, tau = find_fslf(sys, np.zeros((1, 2)), 1)
    assert P0 is not None and tau > 0


def test_edges_and_containment_of_constrained_certificate(library, ex3):
    sys, cons = ex3
    cert = library.certificate("example3", "litpc", 4)
    edges = verify_edges(sys, cert, cert.epsilon / 10)
    assert edges.passed and edges.n_edges == (1 + 4 + 16 + 64) * 4
    assert verify_containment(cert, cons).passed()


def test_example1_closed_loop_decay(library, ex1):
    cert = library.certificate("example1", "static", 2)
    rng = np.random.default_rng(4)
    runs = []
    for k in range(100):
        x0 = rng.standard_normal(2)
        real = sample_realization(ex1, 40, "vertices", seed=k)
        runs.append(run_closed_loop(ex1, cert, x0, real).x)
    est = estimate_decay(runs)
    assert est.valid and est.lam < 1


def test_report_serialization(tmp_path, library, ex3):
    sys, cons = ex3
    cert = library.certificate("example3", "litpc", 2)
    rep = verify_certificate(sys, cert, cons)
    assert rep.passed
    path = tmp_path / "report.json"
    rep.save(path)
    data = json.loads(path.read_text())
    assert data["passed"] and data["fslf"]["n_scenarios"] == 16
    with pytest.raises(ValueError):
        verify_certificate(library.systems["example1"][0], cert)
