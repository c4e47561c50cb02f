import json

import numpy as np
import pytest

from pertree.synthesis import (
    ControllerCertificate,
    build_program,
    search_period,
    synthesize,
    volume_ratio,
)
from pertree.system import ConstraintPolytope, UncertainLinearSystem
from pertree.verification import verify_edges, verify_g_bound


def scalar_pair(a=1.1, b=1.0):
    return UncertainLinearSystem([(np.array([[a, 1.0], [0.0, 0.9]]), np.array([[0.0], [b]]))])


def test_zero_dynamics_are_feasible():
    sys = UncertainLinearSystem([(np.zeros((2, 2)), np.zeros((2, 1)))])
    for kind in ("static", "litpc", "baseline-tied"):
        res = synthesize(sys, 1, kind)
        assert res.feasible, kind


def test_single_vertex_litpc():
    res = synthesize(scalar_pair(), 2, "litpc")
    assert res.feasible
    assert res.certificate.n_gains == 2
    assert verify_edges(scalar_pair(), res.certificate).passed


def test_program_sizes(ex2):
    assert build_program(ex2, 2, "litpc").n_lmis >= 4 + 16
    static = build_program(ex2, 3, "static")
    assert sum(c.name.startswith("edge") for c in static.lmis) == 4 + 16 + 64
    tied = build_program(ex2, 3, "baseline-tied")
    assert sum(c.name.startswith("edge") for c in tied.lmis) == 3 * 4
    with pytest.raises(ValueError):
        build_program(ex2, 0, "litpc")
    with pytest.raises(ValueError):
        build_program(ex2, 2, "bogus")


def test_reference_verdicts(library):
    assert library.result("example1", "static", 2).feasible
    assert not library.result("example1", "static", 1).feasible
    assert library.result("example2", "litpc", 2).feasible
    assert not library.result("example2", "litpc", 1).feasible
    assert not library.result("example2", "static", 1).feasible


def test_example1_gain_is_near_reference(library):
    K = library.certificate("example1", "static", 2).K
    np.testing.assert_allclose(K, [[-0.8956, -1.103]], atol=0.02)


def test_constrained_volume_scales_homogeneously(ex3):
    sys, cons = ex3
    base = synthesize(sys, 2, "litpc", cons)
    assert base.feasible
    for s in (1e-6, 1e-3, 4.0):
        scaled = ConstraintPolytope(cons.F, cons.E, rhs=np.full(cons.n_c, s))
        res = synthesize(sys, 2, "litpc", scaled)
        assert res.feasible
        # 2-D ellipsoids: volume ratio s^2
        assert volume_ratio(res.certificate, base.certificate) == pytest.approx(s ** 2, rel=1e-3)


def test_certificate_json_round_trip(tmp_path, library):
    cert = library.certificate("example3", "litpc", 2)
    path = tmp_path / "cert.json"
    cert.save(path)
    back = ControllerCertificate.load(path)
    for a, b in zip(cert.gains, back.gains):
        assert np.array_equal(a, b)
    for a, b in zip(cert.S, back.S):
        assert np.array_equal(a, b)
    assert back.kind == cert.kind and back.N == cert.N and back.constrained
    assert json.loads(path.read_text())["kind"] == "litpc"


def test_static_slack_variable_bound(library):
    cert = library.certificate("example1", "static", 2)
    # G^T + G - S_0 > 0 is implied by the program
    assert verify_g_bound(cert) > 0


def test_period_nesting(library):
    assert library.result("example2", "litpc", 4, constrained=False).feasible
    assert library.result("example1", "static", 4, constrained=False).feasible


@pytest.mark.parametrize("N", [2, 4])
def test_litpc_dominates_tied_baseline(library, N):
    lit = library.certificate("example3", "litpc", N)
    tied = library.certificate("example3", "baseline-tied", N)
    assert volume_ratio(lit, tied) >= 1 - 1e-6


def test_single_vertex_litpc_equals_tied(tmp_path):
    sys = scalar_pair(1.05, 1.0)
    cons = ConstraintPolytope.from_box([(-1.0, 1.0), (-2.0, 2.0)], [(-0.5, 0.5)])
    a = synthesize(sys, 3, "litpc", cons)
    b = synthesize(sys, 3, "baseline-tied", cons)
    assert a.feasible and b.feasible
    assert volume_ratio(a.certificate, b.certificate) == pytest.approx(1.0, rel=1e-5)


def test_search_period(ex2):
    N, res = search_period(ex2, "litpc", 3)
    assert N == 2 and res.feasible
    N, res = search_period(ex2, "static", 2)
    assert N is None and not res.feasible


def test_family_boundaries(library, ex3):
    cert = library.certificate("example3", "litpc", 2)
    fam = library.result("example3", "litpc", 2).family
    pts = fam.boundary(1, 3, n_points=64)
    P = cert.lyapunov(1, 3)
    np.testing.assert_allclose(np.einsum("ka,ab,kb->k", pts, P, pts), 1.0, atol=1e-9)
    assert min(float(s.min()) for s in fam.support_slacks(ex3[1])) >= -1e-7
