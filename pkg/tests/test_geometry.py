import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.errors import ArtifactError
from artifact.geometry import (
    DiscreteSet, adr_constants, gen_four_corners_cantor, gen_lipschitz_graph, gen_plane,
    gen_sphere, load_set, point_cloud_diameter, save_set, unit_ball_volume,
)


def brute_diameter(p):
    return max(np.linalg.norm(p[i] - p, axis=1).max() for i in range(len(p)))


def test_plane_unit_spacing_tiles_square():
    s = gen_plane(2, 1.0, 1.0)
    # cell-centred nodes: four unit cells tile [-1, 1]^2
    assert len(s) == 4
    assert np.all(s.weights == 1.0)
    assert s.total_mass() == 4.0


def test_plane_total_weight_is_area():
    assert gen_plane(2, 1.0, 0.5).total_mass() == pytest.approx(4.0, abs=1e-14)
    assert gen_plane(1, 2.0, 0.01).total_mass() == pytest.approx(4.0, rel=1e-12)


def test_plane_line_adr_constants_match_exact_length():
    s = gen_plane(1, 2.0, 0.01)
    lo, hi = adr_constants(s, 0.05, 1.0, samples=200, seed=1)
    # away from the ends H^1(line cap B(x,r)) = 2r; near the ends it drops to r
    assert 0.9 * 1.0 <= lo and hi <= 1.1 * 2.0
    interior = DiscreteSet(s.points, s.weights, 1, s.h)
    x = np.zeros(2)
    assert interior.ball_mass(x, 0.5) / 0.5 == pytest.approx(2.0, rel=0.05)


def test_plane_ball_ratio_is_unit_disc_area():
    s = gen_plane(2, 1.0, 0.01)
    for r in (0.1, 0.3):
        assert s.ball_mass(np.zeros(3), r) / r ** 2 == pytest.approx(unit_ball_volume(2), rel=0.1)


def test_invalid_plane_parameters():
    with pytest.raises(ArtifactError) as e:
        gen_plane(2, 1.0, 0.0)
    assert e.value.kind == "invalid-parameter"
    with pytest.raises(ArtifactError):
        gen_plane(2, -1.0, 0.1)


@pytest.mark.parametrize("radius", [1.0, 2.0])
def test_sphere_total_area(radius):
    s = gen_sphere(2, radius, 0.1)
    assert s.total_mass() == pytest.approx(4 * math.pi * radius ** 2, rel=1e-13)
    assert np.allclose(np.linalg.norm(s.points, axis=1), radius)


def test_sphere_rejects_other_dimensions():
    with pytest.raises(ArtifactError) as e:
        gen_sphere(3, 1.0, 0.1)
    assert e.value.kind == "unsupported-dimension"


def test_sphere_adr_against_cap_area():
    s = gen_sphere(2, 1.0, 0.05)
    lo, hi = adr_constants(s, 0.2, 1.0, samples=200, seed=3)
    assert lo > 0 and hi / lo < 4
    # spherical cap of chord radius r on the unit sphere has area pi r^2
    for r in (0.2, 0.5, 1.0):
        assert s.ball_mass(s.points[0], r) == pytest.approx(math.pi * r * r, rel=0.05)


def test_flat_graph_equals_plane():
    g = gen_lipschitz_graph(2, "sine", 0.0, 3.0, 1.0, 0.1)
    p = gen_plane(2, 1.0, 0.1)
    assert np.array_equal(g.weights, p.weights)
    assert np.array_equal(g.points, p.points)


@pytest.mark.parametrize("profile", ["sine", "sawtooth-ramp"])
def test_graph_weights_bounded(profile):
    h = 0.05
    g = gen_lipschitz_graph(2, profile, 0.25, 4.0, 1.0, h)
    assert np.all(g.weights >= h ** 2 - 1e-15)
    assert np.all(g.weights <= math.sqrt(2) * h ** 2 + 1e-15)


def test_graph_area_matches_fine_quadrature():
    a, w = 0.2, 3.0
    g = gen_lipschitz_graph(2, "sine", a, w, 1.0, 0.01)
    # independent oracle: tensor Gauss-Legendre on the analytic surface element
    x, wt = np.polynomial.legendre.leggauss(200)
    X, Y = np.meshgrid(x, x, indexing="ij")
    s = a / math.sqrt(2)
    elem = np.sqrt(1 + (s * w * np.cos(w * X)) ** 2 + (s * w * np.cos(w * Y)) ** 2)
    area = float(np.einsum("i,j,ij->", wt, wt, elem))
    assert g.total_mass() == pytest.approx(area, rel=0.005)


def test_graph_rejects_steep_profile():
    with pytest.raises(ArtifactError):
        gen_lipschitz_graph(2, "sine", 0.5, 3.0, 1.0, 0.1)


def test_cantor_first_generation():
    s = gen_four_corners_cantor(1)
    expect = np.array([[1, 1], [7, 1], [1, 7], [7, 7]]) / 8
    assert {tuple(p) for p in s.points} == {tuple(p) for p in expect}
    assert np.all(s.weights == 0.25)


@pytest.mark.parametrize("k", range(1, 7))
def test_cantor_total_weight(k):
    assert gen_four_corners_cantor(k).total_mass() == pytest.approx(1.0, abs=1e-12)
    assert len(gen_four_corners_cantor(k)) == 4 ** k


@pytest.mark.parametrize("k", [0, 9])
def test_cantor_generation_range(k):
    with pytest.raises(ArtifactError):
        gen_four_corners_cantor(k)


def test_cantor_adr_generation5():
    s = gen_four_corners_cantor(5)
    lo, hi = adr_constants(s, 4.0 ** -5, 1.0, samples=400, seed=0)
    assert lo > 0 and hi / lo < 16


@pytest.mark.parametrize("k", range(1, 5))
def test_cantor_generations_hausdorff_close(k):
    a, b = gen_four_corners_cantor(k).points, gen_four_corners_cantor(k + 1).points
    d_ab = np.linalg.norm(a[:, None] - b[None], axis=-1)
    assert max(d_ab.min(axis=0).max(), d_ab.min(axis=1).max()) <= 4.0 ** -k


def test_diameter_against_brute_force(rng):
    for s in (gen_sphere(2, 1.0, 0.3), gen_four_corners_cantor(3),
              gen_lipschitz_graph(2, "sine", 0.2, 3.0, 1.0, 0.2)):
        assert point_cloud_diameter(s.points) == pytest.approx(brute_diameter(s.points), rel=1e-12)
        assert s.diameter == pytest.approx(brute_diameter(s.points), rel=0.01)
    p = rng.normal(size=(300, 3))
    assert point_cloud_diameter(p) == pytest.approx(brute_diameter(p), rel=1e-12)


def test_single_point_is_below_resolution():
    s = DiscreteSet(np.zeros((1, 3)), np.ones(1), 2, 0.1)
    with pytest.raises(ArtifactError) as e:
        adr_constants(s, 1.0, 1.0)
    assert e.value.kind == "scale-below-resolution"


def test_scale_floor_enforced():
    s = gen_plane(2, 1.0, 0.1)
    with pytest.raises(ArtifactError) as e:
        adr_constants(s, 0.2, 1.0)
    assert e.value.kind == "scale-below-resolution"


@settings(max_examples=20, deadline=None)
@given(st.floats(0.2, 5.0))
def test_adr_scaling_covariance(scale):
    s = gen_lipschitz_graph(2, "sine", 0.2, 3.0, 1.0, 0.1)
    t = DiscreteSet(s.points * scale, s.weights * scale ** 2, 2, s.h * scale)
    a = adr_constants(s, 0.3, 1.0, samples=50, seed=7)
    b = adr_constants(t, 0.3 * scale, 1.0 * scale, samples=50, seed=7)
    assert a == pytest.approx(b, rel=1e-9)


def test_generators_deterministic():
    a = gen_lipschitz_graph(2, "sawtooth-ramp", 0.2, 3.0, 1.0, 0.1)
    b = gen_lipschitz_graph(2, "sawtooth-ramp", 0.2, 3.0, 1.0, 0.1)
    assert a.points.tobytes() == b.points.tobytes() and a.weights.tobytes() == b.weights.tobytes()


def test_set_file_round_trip(tmp_path):
    s = gen_sphere(2, 1.0, 0.3)
    f = tmp_path / "s.txt"
    save_set(s, f)
    head = f.read_text().splitlines()[0]
    assert head.startswith(f"dim=3 n=2 count={len(s)} ")
    assert "label=" in head
    t = load_set(f)
    assert np.array_equal(t.points, s.points) and np.array_equal(t.weights, s.weights)
    assert t.h == s.h and t.label == s.label
