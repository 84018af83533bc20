import math

import numpy as np
import pytest

from denn_svcca.bvp import (
    BOUNDARY,
    INTERIOR,
    BVPSpec,
    FDSolveError,
    GridField,
    TaggedPointSet,
    discrete_residual,
    fd_solve,
    grid_points,
    pointwise_loss,
    read_pgm,
    relative_l2_error,
    sample_test_set,
    sample_training_set,
    source_term,
    write_pgm,
)
from denn_svcca.net import DerivativeBundle

from oracles import manufactured_fd_errors


def test_source_peak():
    assert source_term([0.0, 0.0], BVPSpec()) == pytest.approx(-15.915494309189533, rel=1e-12)


def test_source_far_corner():
    expected = -math.exp(-2.0 / 0.02) / (2 * math.pi * 0.01)
    assert source_term([1.0, 1.0], BVPSpec()) == pytest.approx(expected, rel=1e-12)
    assert abs(expected) < 1e-40


def test_source_shifted_and_integral():
    spec = BVPSpec(x_source=0.4)
    assert source_term([0.4, 0.0], spec) == pytest.approx(-15.915494309189533)
    pts = grid_points(401, 401, spec.domain)
    h = 2 / 400
    # integrates to ~ -1: the Gaussian is well inside the square
    assert source_term(pts, spec).sum() * h * h == pytest.approx(-1.0, abs=1e-6)


def test_spec_validation():
    with pytest.raises(ValueError, match="outside"):
        BVPSpec(x_source=1.5)
    with pytest.raises(ValueError, match="positive"):
        BVPSpec(r=0)
    with pytest.raises(ValueError, match="eta"):
        BVPSpec(eta=-1)


def test_pointwise_loss():
    spec = BVPSpec()
    b = DerivativeBundle(0.3, np.zeros(2), np.array([1.0, 2.0]))
    s = float(source_term([0.0, 0.0], spec))
    assert pointwise_loss(b, [0.0, 0.0], INTERIOR, spec) == pytest.approx((3.0 - s) ** 2)
    assert pointwise_loss(b, [0.0, 0.0], INTERIOR, spec, "L1") == pytest.approx(abs(3.0 - s))
    assert pointwise_loss(b, [1.0, 0.0], BOUNDARY, BVPSpec(eta=2)) == pytest.approx(2 * 0.09)
    with pytest.raises(ValueError):
        pointwise_loss(b, [0.0, 0.0], "edge", spec)


def test_training_set_counts_and_placement():
    s = sample_training_set(0, BVPSpec(), 500, 70)
    assert s.counts() == {INTERIOR: 500, BOUNDARY: 280}
    assert len(s) == 780 and s.tags[:500] == [INTERIOR] * 500
    inner = s.interior_points
    assert np.all(np.abs(inner) < 1)
    b = s.boundary_points
    on_edge = np.isclose(np.abs(b[:, 0]), 1) | np.isclose(np.abs(b[:, 1]), 1)
    assert on_edge.all()
    assert np.all(np.abs(b) <= 1)


def test_edges_equally_populated():
    b = sample_training_set(3, BVPSpec(), 0, 1000).boundary_points
    assert (b[:, 1] == -1).sum() >= 1000 and (b[:, 0] == 1).sum() >= 1000
    assert len(b) == 4000


def test_sampling_is_reproducible():
    a = sample_training_set(np.random.default_rng(9), BVPSpec(), 100, 10)
    b = sample_training_set(np.random.default_rng(9), BVPSpec(), 100, 10)
    assert a == b


def test_test_set_scaled():
    s = sample_test_set(1, BVPSpec(), 100, 10, scale=10)
    assert s.counts() == {INTERIOR: 1000, BOUNDARY: 400}


def test_fd_second_order_convergence():
    errs = manufactured_fd_errors((33, 65, 129))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(3.5 <= r <= 4.5 for r in ratios), ratios


def test_fd_solve_residual_and_boundary():
    spec = BVPSpec(x_source=0.2)
    field = fd_solve(spec, 41)
    assert np.abs(discrete_residual(field, spec)).max() < 1e-9
    v = field.values
    assert np.all(v[0] == 0) and np.all(v[-1] == 0) and np.all(v[:, 0] == 0) and np.all(v[:, -1] == 0)
    # negative source: u is a positive bump peaking near the source
    j, i = np.unravel_index(np.argmax(v), v.shape)
    assert field.x[i] == pytest.approx(0.2, abs=0.06) and field.y[j] == pytest.approx(0.0, abs=0.06)


def test_fd_symmetry():
    v = fd_solve(BVPSpec(), 33).values
    np.testing.assert_allclose(v, v[::-1], atol=1e-13)
    np.testing.assert_allclose(v, v.T, atol=1e-13)


def test_fd_solve_rejects_tiny_grid():
    with pytest.raises(ValueError):
        fd_solve(BVPSpec(), 2)


def test_fd_solve_failure_is_reported():
    with pytest.raises(FDSolveError):
        fd_solve(BVPSpec(), 9, source=lambda p: np.full(len(p), np.nan))


def test_grid_field_text_round_trip(tmp_path):
    f = GridField(4, 3, (-1.0, 1.0, -0.5, 0.5), np.arange(12) / 7)
    f.write(tmp_path / "f.txt")
    g = GridField.read(tmp_path / "f.txt")
    assert g.domain == f.domain and np.array_equal(g.values, f.values)
    assert g.values[2, 0] == 8 / 7  # row j is y_j
    with pytest.raises(ValueError, match="declares"):
        GridField.from_text("2 2 0 1 0 1 1 2 3")


def test_pgm_round_trip(tmp_path):
    img = np.linspace(-2, 5, 30).reshape(5, 6)
    write_pgm(tmp_path / "a.pgm", img)
    pix, lo, hi = read_pgm(tmp_path / "a.pgm")
    assert (lo, hi) == (-2.0, 5.0)
    np.testing.assert_allclose(lo + pix / 255 * (hi - lo), img, atol=(hi - lo) / 255)
    assert pix.dtype == np.uint8 and pix.min() == 0 and pix.max() == 255


def test_relative_l2_error_of_exact_and_scaled():
    field = fd_solve(BVPSpec(), 17)
    lookup = {tuple(p): v for p, v in zip(field.nodes(), field.values.ravel())}
    assert relative_l2_error(lambda p: np.array([lookup[tuple(q)] for q in p]), field) == 0
    assert relative_l2_error(lambda p: 1.1 * np.array([lookup[tuple(q)] for q in p]), field) == pytest.approx(0.1)


def test_tagged_point_set_equality():
    a = TaggedPointSet([[0.1, 0.2]], [[1.0, 0.0]])
    assert a == TaggedPointSet([[0.1, 0.2]], [[1.0, 0.0]])
    assert a != TaggedPointSet([[0.1, 0.2]], [[1.0, 0.1]])
