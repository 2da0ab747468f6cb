import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.carleson import (
    CarlesonReport, CubeNodes, alpha_coefficients, check_pole, discrete_carleson_sup,
    green_carleson_sup, packing_measure, sample_balls, union_integral, ur_carleson_norm,
    ur_integrand, write_ball_csv, write_cube_csv,
)
from artifact.complement import whitney_cubes_in_ball, whitney_decompose
from artifact.dyadic import build_grid
from artifact.errors import ArtifactError
from artifact.geometry import gen_four_corners_cantor, gen_plane, gen_sphere
from artifact.sawtooth import FAT, SawtoothDomain, assign_wstar, sawtooth_region


@pytest.fixture(scope="module")
def line():
    E = gen_plane(1, 1.0, 1 / 16)
    W = whitney_decompose(E)
    g = build_grid(E, 0, 3)
    return E, W, g, assign_wstar(g, W, prefer=[0, 1])


@pytest.fixture(scope="module")
def cantor_w(cantor3):
    return cantor3, whitney_decompose(cantor3)


def exact_union_volume(lo, hi):
    d = lo.shape[1]
    cuts = [np.unique(np.concatenate([lo[:, a], hi[:, a]])) for a in range(d)]
    mids = [0.5 * (c[1:] + c[:-1]) for c in cuts]
    widths = [np.diff(c) for c in cuts]
    cm = np.stack([m.ravel() for m in np.meshgrid(*mids, indexing="ij")], axis=1)
    cw = np.prod(np.stack([w.ravel() for w in np.meshgrid(*widths, indexing="ij")], axis=1), axis=1)
    occ = np.zeros(len(cm), bool)
    for a, b in zip(lo, hi):
        occ |= np.all((cm > a) & (cm < b), axis=1)
    return cw[occ].sum()


def test_sphere_interior_integrand_vanishes():
    E = gen_sphere(2, 1.0, 0.1)
    W = whitney_decompose(E, k_deepest=1)
    lo, side, _ = whitney_cubes_in_ball(W, np.zeros(3), 0.95, 5)
    assert len(lo) > 10
    X = np.concatenate([lo + t * side[:, None] for t in (0.25, 0.75)])
    f = ur_integrand(E)
    vin = f(X)
    shell = np.array([[0, 0, 1.5], [1.3, 0.4, 0.2], [0.1, -1.6, 0.5]])
    assert vin.max() < 1e-4 * f(shell).max()


def test_ball_validation(cantor_w):
    E, W = cantor_w
    x = E.points[0]
    with pytest.raises(ArtifactError) as e:
        ur_carleson_norm(E, W, [(x, E.h)])
    assert e.value.kind == "scale-below-resolution"
    with pytest.raises(ArtifactError):
        ur_carleson_norm(E, W, [(x + 0.01, 0.2)])
    with pytest.raises(ArtifactError):
        ur_carleson_norm(E, W, [(x, 10.0)])


def test_report_invariants_and_convergence(cantor_w):
    E, W = cantor_w
    balls = sample_balls(E, 12, seed=3)
    r1 = ur_carleson_norm(E, W, balls, nodes_per_cube=1)
    r2 = ur_carleson_norm(E, W, balls, nodes_per_cube=2)
    assert np.all(r1.values >= 0) and r1.sup == r1.values.max()
    assert np.allclose(r2.values, r1.values, rtol=0.1)
    x, r = r1.argmax
    assert r1.values[[k for k, b in enumerate(balls) if b[1] == r][0]] == r1.sup


def test_sample_balls_range(cantor3):
    balls = sample_balls(cantor3, 200, seed=1)
    rad = np.array([r for _, r in balls])
    assert rad.min() >= 10 * cantor3.h and rad.max() <= cantor3.diameter / 2
    assert sample_balls(cantor3, 5, seed=9)[0][1] == sample_balls(cantor3, 5, seed=9)[0][1]


def test_monotone_in_integrand(cantor_w):
    E, W = cantor_w
    balls = sample_balls(E, 8, seed=4)
    f = ur_integrand(E)
    full = ur_carleson_norm(E, W, balls, 1)
    smaller = CubeNodes(W, 1, lambda X: f(X) * (0.5 + 0.5 * np.cos(X[:, 0]) ** 2))
    low = ur_carleson_norm(E, W, balls, 1, cache=smaller)
    assert np.all(low.values <= full.values + 1e-15)


def test_sampled_matches_tensor_quadrature(cantor_w):
    E, W = cantor_w
    balls = [(E.points[5], 0.3), (E.points[40], 0.6)]
    quad = ur_carleson_norm(E, W, balls, 3)
    mc = ur_carleson_norm(E, W, balls, samples=20000, seed=2)
    assert mc.stderr is not None
    assert np.all(np.abs(mc.values - quad.values) <= 4 * mc.stderr + 0.05 * quad.values)


def test_ball_relative_depth_reaches_small_balls():
    E = gen_plane(1, 1.0, 1 / 64)
    W = whitney_decompose(E, k_deepest=2)
    ball = [(E.points[10], 0.2)]
    assert ur_carleson_norm(E, W, ball, 1).values[0] == 0.0
    deep = ur_carleson_norm(E, W, ball, 1, depth=6)
    assert deep.values[0] > 0


def test_union_integral_volume(line):
    E, W, g, asg = line
    dom = SawtoothDomain("U", W, asg[2].cubes, FAT)
    cache = CubeNodes(W, 4, lambda X: np.ones(len(X)), FAT)
    lo, hi = dom.boxes()
    exact = exact_union_volume(lo, hi)
    assert abs(union_integral(dom, cache)[0] - exact) < 0.05 * exact


def test_alpha_zero_field_and_nonnegative(line):
    E, W, g, asg = line
    qs = list(g.by_level[2])[:4]
    zero = alpha_coefficients(asg, qs, None, lambda X: np.zeros((1, len(X))))
    assert np.all(zero.values == 0)
    ones = alpha_coefficients(asg, qs, None, lambda X: np.ones((1, len(X))))
    assert np.all(ones.values > 0) and np.all(ones.stderr == 0)
    stopped = alpha_coefficients(asg, qs, None, lambda X: np.ones((1, len(X))),
                                 stopped=[g[qs[0]].parent])
    assert stopped.values[0] == 0


def test_alpha_batch_stderr(line):
    E, W, g, asg = line
    q = int(g.by_level[2][0])
    rng = np.random.default_rng(0)
    noise = rng.normal(1.0, 0.1, 8)
    rep = alpha_coefficients(asg, [q], None, lambda X: np.outer(noise, np.ones(len(X))))
    base = alpha_coefficients(asg, [q], None, lambda X: np.ones((1, len(X))))
    assert math.isclose(rep.values[0], base.values[0] * noise.mean(), rel_tol=1e-12)
    assert math.isclose(rep.stderr[0], base.values[0] * noise.std(ddof=1) / math.sqrt(8), rel_tol=1e-9)


def test_pole_check(line):
    E, W, g, asg = line
    q0 = int(g.by_level[3][0])
    x0 = E.points[g[q0].center]
    with pytest.raises(ArtifactError):
        check_pole(asg, q0, x0 + np.array([0, 0.5]), kprime=100.0)
    assert check_pole(asg, q0, x0 + np.array([0, 100.0]), kprime=100.0) == 100.0


def brute_discrete_sup(grid, alphas, mass, q0):
    best = 0.0
    for q in grid.descendants(q0):
        below = [p for p in range(len(grid.cubes)) if grid.contains(q, p)]
        m = math.fsum(alphas.get(p, 0.0) for p in below)
        if m > 0:
            best = max(best, m / mass[q])
    return best


@pytest.mark.parametrize("seed", range(5))
def test_discrete_sup_brute(seed):
    E = gen_plane(1, 1.0, 1 / 8)
    g = build_grid(E, 0, 2, seed=seed)
    rng = np.random.default_rng(seed)
    alphas = {q: float(rng.exponential()) for q in range(len(g.cubes))}
    mass = np.array([len(c.members) / len(E.points) for c in g.cubes])
    for q0 in g.by_level[g.k_min]:
        assert discrete_carleson_sup(g, alphas, mass, int(q0)) == brute_discrete_sup(g, alphas, mass, int(q0))


def test_discrete_sup_single_and_zero():
    E = gen_plane(1, 1.0, 1 / 8)
    g = build_grid(E, 0, 2)
    mass = np.array([len(c.members) / len(E.points) for c in g.cubes])
    q0 = int(g.by_level[0][0])
    assert discrete_carleson_sup(g, {}, mass, q0) == 0.0
    leaf = int(g.by_level[2][-1])
    if not g.contains(q0, leaf):
        q0 = g.ancestor(leaf, 0)
    assert discrete_carleson_sup(g, {leaf: 2.0}, mass, q0) == 2.0 / mass[leaf]
    bad = mass.copy()
    bad[leaf] = 0.0
    with pytest.raises(ArtifactError) as e:
        discrete_carleson_sup(g, {leaf: 2.0}, bad, q0)
    assert e.value.kind == "measure-degenerate"


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=6, max_size=6), st.integers(1, 5))
def test_packing_measure_additive(vals, cut):
    alphas = dict(enumerate(vals))
    a, b = list(range(cut)), list(range(cut, 6))
    total = packing_measure(None, alphas, a + b)
    assert math.isclose(total, packing_measure(None, alphas, a) + packing_measure(None, alphas, b),
                        rel_tol=1e-12, abs_tol=1e-12)


def test_green_carleson_full_family_is_zero(line):
    E, W, g, asg = line
    q0 = int(g.by_level[1][0])
    omega = np.ones(len(g.cubes))
    rep = green_carleson_sup(asg, [q0], q0, None, lambda X: np.ones((1, len(X))), omega)
    assert rep.sup == 0.0


def test_green_carleson_zero_field_and_degenerate(line):
    E, W, g, asg = line
    q0 = int(g.by_level[1][0])
    omega = np.ones(len(g.cubes))
    rep = green_carleson_sup(asg, [], q0, None, lambda X: np.zeros((1, len(X))), omega)
    assert rep.sup == 0.0
    kids = [int(c) for c in g[q0].children]
    rep = green_carleson_sup(asg, [], q0, None, lambda X: np.ones((1, len(X))), omega, cubes=kids)
    assert np.all(rep.values > 0)
    omega[kids[0]] = 0.0
    with pytest.raises(ArtifactError) as e:
        green_carleson_sup(asg, [], q0, None, lambda X: np.ones((1, len(X))), omega, cubes=kids)
    assert e.value.kind == "measure-degenerate"


def test_green_carleson_sawtooth_restriction(line):
    E, W, g, asg = line
    q0 = int(g.by_level[1][0])
    omega = np.ones(len(g.cubes))
    one = lambda X: np.ones((1, len(X)))
    kids = [int(c) for c in g[q0].children]
    full = green_carleson_sup(asg, [], q0, None, one, omega, cubes=[q0])
    cut = green_carleson_sup(asg, kids, q0, None, one, omega, cubes=[q0])
    assert 0 < cut.values[0] < full.values[0]


def test_csv_outputs(tmp_path, cantor_w):
    E, W = cantor_w
    rep = ur_carleson_norm(E, W, sample_balls(E, 3, seed=0), 1)
    write_ball_csv(tmp_path / "b.csv", rep)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "ball_index,x1,x2,r,value" and len(lines) == 4
    write_cube_csv(tmp_path / "c.csv", CarlesonReport(np.array([1.5]), [7], 1, np.array([0.1])))
    assert (tmp_path / "c.csv").read_text().splitlines() == ["cube_id,alpha,stderr", "7,1.5,0.1"]


def test_alpha_images_vs_monte_carlo(line):
    from artifact.harmonic import GreenEvaluator, HalfSpace, WalkConfig, halfspace_green

    E, W, g, asg = line
    X0 = np.array([0.0, 3.0])
    q = int(g.by_level[2][1])
    upper = lambda X: X[:, 1] > 0.05
    mc = GreenEvaluator(HalfSpace(2), X0, WalkConfig(walks=20000, kill_distance=1e-3, seed=4))

    def g_mc(X):
        out = np.zeros((mc.B, len(X)))
        keep = upper(X)
        out[:, keep] = mc(X[keep])
        return out

    def g_exact(X):
        return np.where(upper(X), halfspace_green(X, X0, n=1), 0.0)[None, :]

    a = alpha_coefficients(asg, [q], X0, g_mc)
    b = alpha_coefficients(asg, [q], X0, g_exact)
    assert b.values[0] > 0
    assert abs(a.values[0] - b.values[0]) <= 2 * a.stderr[0]
