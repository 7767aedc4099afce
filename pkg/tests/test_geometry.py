import numpy as np
import pytest

from deltiss.control.errors import GeometryError
from deltiss.control.geometry import (
    Box,
    Ellipsoid,
    Polytope,
    bound_certificate_matrix,
    sample_in,
    sample_on_boundary,
    sum_bound_oracle,
    support,
    tighten_halfspace,
)
from deltiss.control.sdp import check_psd


def _random_spd(rng, k):
    A = rng.standard_normal((k, k))
    return A @ A.T + 0.5 * np.eye(k)


def test_support_of_unit_ball_is_norm():
    E = Ellipsoid(np.eye(3))
    M = np.array([[1.0, 2.0, 0.0], [0.0, -1.0, 3.0]])
    a = np.array([0.5, -2.0])
    assert support(E, M, a) == pytest.approx(np.linalg.norm(M.T @ a), rel=1e-12)


def test_support_matches_sampled_maximum():
    rng = np.random.default_rng(3)
    E = Ellipsoid(_random_spd(rng, 3))
    M = rng.standard_normal((2, 3))
    a = rng.standard_normal(2)
    pts = sample_on_boundary(E, rng, 20_000)
    sampled = np.max(pts @ M.T @ a)
    exact = support(E, M, a)
    assert sampled <= exact * (1 + 1e-9)
    assert sampled >= 0.98 * exact


def test_support_includes_the_center():
    E = Ellipsoid(np.eye(2), center=[1.0, 2.0])
    assert support(E, np.eye(2), [1.0, 0.0]) == pytest.approx(2.0)


def test_tighten_halfspace_subtracts_every_image():
    E1 = Ellipsoid(np.eye(2) * 4.0)
    E2 = Ellipsoid(np.eye(1) * 100.0)
    g = np.array([1.0])
    images = [(np.array([[1.0, 0.0]]), E1), (np.array([[2.0]]), E2)]
    assert tighten_halfspace(g, 1.0, images) == pytest.approx(1.0 - 0.5 - 0.2)


def test_tighten_halfspace_shifts_by_a_center():
    centered = Ellipsoid(np.eye(1) * 4.0)
    shifted = centered.shifted([0.25])
    g = np.array([-1.0])
    assert tighten_halfspace(g, 1.0, [(np.eye(1), centered)]) == pytest.approx(0.5)
    assert tighten_halfspace(g, 1.0, [(np.eye(1), shifted)]) == pytest.approx(0.75)


def test_samples_stay_inside_and_on_boundary():
    rng = np.random.default_rng(0)
    E = Ellipsoid(_random_spd(rng, 4), center=rng.standard_normal(4))
    inside = sample_in(E, rng, 2000)
    assert np.all(E.levels(inside) <= 1.0 + 1e-12)
    boundary = sample_on_boundary(E, rng, 500)
    assert np.allclose(E.levels(boundary), 1.0, atol=1e-9)


def test_ellipsoid_rejects_bad_shapes():
    with pytest.raises(GeometryError):
        Ellipsoid(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(GeometryError):
        Ellipsoid(np.diag([1.0, -1.0]))
    with pytest.raises(GeometryError):
        Ellipsoid(np.eye(2), center=[0.0, 0.0, 0.0])


def test_scaled_ellipsoid_shrinks():
    E = Ellipsoid(np.eye(2))
    assert E.contains([0.9, 0.0])
    assert not E.scaled(4.0).contains([0.9, 0.0])


def test_polytope_box_membership_and_emptiness():
    P = Polytope.from_box([-1.0, -2.0], [1.0, 2.0])
    assert P.contains([0.5, -1.5])
    assert not P.contains([1.5, 0.0])
    assert P.contains([1.0 + 1e-9, 0.0], tol=1e-8)
    assert not P.is_empty()
    assert P.with_offsets([-0.5, 1.0, -0.5, 1.0]).is_empty()


def test_polytope_rejects_zero_rows():
    with pytest.raises(GeometryError):
        Polytope(np.array([[0.0, 0.0]]), np.array([1.0]))


def test_box_with_unbounded_channels():
    box = Box(np.array([1.0, np.inf]))
    assert box.active == (0,)
    assert box.contains([0.5, 1e6])
    assert not box.contains([1.5, 0.0])
    assert np.allclose(box.intersect(Box(np.array([2.0, 3.0]))).half_widths, [1.0, 3.0])


def test_certificate_matrix_implies_sampled_bound():
    rng = np.random.default_rng(11)
    for _ in range(20):
        k = int(rng.integers(1, 4))
        shapes = [_random_spd(rng, int(rng.integers(1, 4))) for _ in range(k)]
        maps = [rng.standard_normal((1, P.shape[0])) for P in shapes]
        # smallest bound the certificate accepts, plus a little room
        need = k * sum((G @ np.linalg.solve(P, G.T)).item() for P, G in zip(shapes, maps))
        bound = np.sqrt(need) * 1.001
        cert = bound_certificate_matrix(shapes, maps, bound)
        assert check_psd(cert)
        assert sum_bound_oracle([Ellipsoid(P) for P in shapes], maps, bound, rng, 10_000)


def test_oracle_detects_a_violated_bound():
    E = Ellipsoid(np.eye(2))
    assert not sum_bound_oracle([E], [np.array([[1.0, 0.0]])], 0.5)


@pytest.mark.slow
def test_certificate_soundness_on_many_instances():
    rng = np.random.default_rng(5)
    checked = 0
    while checked < 100:
        k = int(rng.integers(1, 4))
        shapes = [_random_spd(rng, int(rng.integers(1, 4))) for _ in range(k)]
        maps = [rng.standard_normal((1, P.shape[0])) for P in shapes]
        bound = float(rng.uniform(0.5, 5.0))
        if not check_psd(bound_certificate_matrix(shapes, maps, bound)):
            continue
        checked += 1
        assert sum_bound_oracle([Ellipsoid(P) for P in shapes], maps, bound, rng, 100_000)
