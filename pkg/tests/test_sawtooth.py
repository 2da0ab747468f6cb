import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.complement import whitney_decompose
from artifact.dyadic import build_grid
from artifact.errors import ArtifactError
from artifact.geometry import gen_plane
from artifact.sawtooth import (
    FAT_STAR, approx_domain, assign_wstar, box_union_faces, carleson_box, check_assignment,
    chain_component, cone_membership, dump_mesh, outer_ball_const, sawtooth_region,
    union_boundary_mesh, whitney_region,
)


@pytest.fixture(scope="module")
def line():
    E = gen_plane(1, 1.0, 1 / 16)
    W = whitney_decompose(E)
    g = build_grid(E, 0, 3)
    return E, W, g, assign_wstar(g, W, prefer=[0, 1])


def brute_touching(W):
    """Adjacency by comparing every pair of closed cubes."""
    gap = np.maximum(W.lo[:, None, :] - W.hi[None], W.lo[None] - W.hi[:, None, :]).max(axis=2)
    adj = gap <= 1e-15
    np.fill_diagonal(adj, False)
    return adj


def brute_union_area(lo, hi):
    """Perimeter/surface of a union of boxes by occupancy of the coordinate-compressed grid."""
    d = lo.shape[1]
    cuts = [np.unique(np.concatenate([lo[:, a], hi[:, a]])) for a in range(d)]
    mids = [0.5 * (c[1:] + c[:-1]) for c in cuts]
    mesh = np.meshgrid(*mids, indexing="ij")
    cm = np.stack([m.ravel() for m in mesh], axis=1)
    occ = np.zeros(len(cm), bool)
    for a, b in zip(lo, hi):
        occ |= np.all((cm > a) & (cm < b), axis=1)
    occ = np.pad(occ.reshape([len(m) for m in mids]), 1)
    # padded cells have zero width, so faces there contribute nothing
    widths = [np.pad(np.diff(c), 1) for c in cuts]
    total = 0.0
    for a in range(d):
        flip = np.diff(occ.astype(np.int8), axis=a) != 0
        w = np.ones([1] * d)
        for b in range(d):
            if b != a:
                shape = [1] * d
                shape[b] = len(widths[b])
                w = w * widths[b].reshape(shape)
        total += float(np.sum(np.where(flip, w, 0.0)))
    return total


def test_assignment_invariants(line):
    E, W, g, A = line
    rep = check_assignment(A)
    assert all(rep.values()), rep
    for q, reg in A.regions.items():
        assert len(reg.cubes) > 0


def test_assignment_unbounded_matches_component(line):
    E, W, g, _ = line
    A = assign_wstar(g, W, kstar=100, K0=math.inf, prefer=[0, 1])
    adj = brute_touching(W)
    for q in (0, len(g) - 1):
        reg = A[q]
        seen = {reg.x_cube}
        stack = [reg.x_cube]
        while stack:
            u = stack.pop()
            for v in np.flatnonzero(adj[u]):
                if v not in seen:
                    seen.add(int(v))
                    stack.append(int(v))
        assert sorted(seen) == reg.cubes.tolist()


def test_empty_region_detected(line):
    E, W, g, _ = line
    with pytest.raises(ArtifactError) as ei:
        assign_wstar(g, W, K0=1e-3)
    assert ei.value.kind == "empty-region"


def test_marked_cube_on_preferred_side(line):
    E, W, g, A = line
    for reg in A.regions.values():
        assert reg.X[1] > 0


def test_chain_component_matches_bfs(line):
    E, W, g, A = line
    adj = brute_touching(W)
    rng = np.random.default_rng(3)
    sub = np.sort(rng.choice(len(W), size=len(W) // 2, replace=False))
    start = int(sub[0])
    allowed = set(sub.tolist())
    seen, stack = {start}, [start]
    while stack:
        u = stack.pop()
        for v in np.flatnonzero(adj[u]):
            if int(v) in allowed and int(v) not in seen:
                seen.add(int(v))
                stack.append(int(v))
    assert chain_component(W, sub, start).tolist() == sorted(seen)


def test_carleson_box_leaf_and_monotone(line):
    E, W, g, A = line
    leaf = g.by_level[g.k_max][0]
    assert carleson_box(A, leaf).cubes.tolist() == A[leaf].cubes.tolist()
    for c in g.cubes:
        if c.parent is not None:
            small = set(carleson_box(A, c.id).cubes.tolist())
            big = set(carleson_box(A, c.parent).cubes.tolist())
            assert small <= big


def test_carleson_box_in_quarter_ball(line):
    E, W, g, A = line
    K = A.box_radius_const()
    assert K <= 40 * (A.K0 + A.kstar)
    for q in range(len(g)):
        T = carleson_box(A, q, "fat")
        lo, hi = W.fattened(T.cubes, 4.0)
        x = E.points[g[q].center]
        far = np.sqrt((np.maximum(np.abs(lo - x), np.abs(hi - x)) ** 2).sum(axis=1)).max()
        assert far <= K * g[q].length / 4 * (1 + 1e-12)


def test_sawtooth_identities(line):
    E, W, g, A = line
    for q in range(len(g)):
        T = carleson_box(A, q)
        assert sawtooth_region(A, [], q).cubes.tolist() == T.cubes.tolist()
        assert sawtooth_region(A, [q], q).empty
        kids = g[q].children
        if kids:
            assert sawtooth_region(A, kids, q).cubes.tolist() == A[q].cubes.tolist()


def test_sawtooth_rejects_overlap(line):
    E, W, g, A = line
    q = g.by_level[1][0]
    with pytest.raises(ArtifactError) as ei:
        sawtooth_region(A, [q, g[q].children[0]])
    assert ei.value.kind == "invalid-family"


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_sawtooth_monotone_in_family(line, data):
    E, W, g, A = line
    # grow a disjoint family F' from F by replacing members with ancestors
    lvl = g.k_max
    pool = g.by_level[lvl]
    F = sorted(set(data.draw(st.lists(st.sampled_from(pool), max_size=6))))
    up = data.draw(st.integers(0, lvl - g.k_min))
    Fp = g.maximal_cubes([g.ancestor(q, lvl - up) for q in F] + F)
    root = g.by_level[g.k_min][0]
    small = set(sawtooth_region(A, Fp, root).cubes.tolist())
    big = set(sawtooth_region(A, F, root).cubes.tolist())
    assert small <= big


def test_approx_domain_nested_and_root(line):
    E, W, g, A = line
    root = approx_domain(A, g.k_min + 1)
    assert root.cubes.tolist() == A.union(g.by_level[g.k_min]).tolist()
    prev = set()
    for N in range(g.k_min + 1, g.k_max + 2):
        if N - 1 + A.kstar > W.k_deepest:
            with pytest.raises(ArtifactError) as ei:
                approx_domain(A, N)
            assert ei.value.kind == "resolution-exceeded"
            break
        cur = set(approx_domain(A, N).cubes.tolist())
        assert prev <= cur
        prev = cur


def test_membership_matches_boxes(line, rng):
    E, W, g, A = line
    for dom in (carleson_box(A, 1), sawtooth_region(A, g[0].children[:1], 0, "fat"),
                whitney_region(A, 3, "fat*")):
        lo, hi = dom.boxes()
        X = rng.uniform(W.bbox[0], W.bbox[1], size=(10_000, 2))
        brute = np.zeros(len(X), bool)
        for a, b in zip(lo, hi):
            brute |= np.all((X > a) & (X < b), axis=1)
        assert np.array_equal(dom.contains(X), brute)


def test_cone_membership(line, rng):
    E, W, g, A = line
    x = 5
    for k in range(g.k_min, g.k_max + 1):
        q = g.cube_of(x, k)
        assert cone_membership(A, x, A[q].X)
    far = E.points[x] + np.array([0.0, 1e-3]) + np.array([2 * A.K0 * E.diameter + 1, 0])
    assert not cone_membership(A, x, far)
    X = rng.uniform(W.bbox[0], W.bbox[1], size=(3000, 2))
    qs = [g.cube_of(x, k) for k in range(g.k_min, g.k_max + 1)]
    cubes = np.unique(np.concatenate([A[q].cubes for q in qs]))
    c, s = W.center[cubes], W.side[cubes]
    inside = np.any(np.all(np.abs(X[:, None, :] - c[None]) < FAT_STAR * s[None, :, None] / 2, axis=2), axis=1)
    assert np.array_equal(cone_membership(A, x, X), inside)


@pytest.mark.parametrize("dim", [2, 3])
def test_box_union_area_matches_occupancy(dim):
    rng = np.random.default_rng(dim)
    for _ in range(20):
        k = rng.integers(1, 12)
        lo = rng.integers(0, 6, size=(k, dim)).astype(float)
        hi = lo + rng.integers(1, 4, size=(k, dim))
        partners = [np.array([j for j in range(k) if j != i]) for i in range(k)]
        flo, fhi, ax, sg, own = box_union_faces(lo, hi, partners)
        ext = fhi - flo
        ext[np.arange(len(ax)), ax] = 1
        area = float(np.prod(ext, axis=1).sum())
        assert area == pytest.approx(brute_union_area(lo, hi), rel=1e-12)


def test_whitney_union_mesh_area(line, rng):
    E, W, g, A = line
    for trial in range(5):
        seed = int(rng.integers(len(W)))
        sub = np.sort(np.unique(np.concatenate([[seed], W.neighbors(seed)[:5]])))
        for c in sub[:3]:
            sub = np.union1d(sub, W.neighbors(c))
        mesh = union_boundary_mesh(W, sub)
        lo, hi = W.fattened(sub)
        assert mesh.total_area() == pytest.approx(brute_union_area(lo, hi), rel=1e-9)
        assert set(np.unique(mesh.tags)) <= {"boundary", "interior"}
        assert math.fsum(mesh.areas[mesh.toward_set]) + math.fsum(mesh.areas[~mesh.toward_set]) == \
            pytest.approx(mesh.total_area(), rel=1e-12)


def test_whitney_union_mesh_area_3d(plane_whitney, rng):
    W = plane_whitney
    for trial in range(3):
        seed = int(rng.integers(len(W)))
        sub = np.union1d([seed], W.neighbors(seed))
        mesh = union_boundary_mesh(W, sub)
        lo, hi = W.fattened(sub)
        assert mesh.total_area() == pytest.approx(brute_union_area(lo, hi), rel=1e-9)


def test_mesh_nearest_exact(line, rng):
    E, W, g, A = line
    D = approx_domain(A, 2)
    mesh = D.boundary_mesh()
    X = rng.uniform(W.bbox[0], W.bbox[1], size=(400, 2))
    d, f, foot = mesh.nearest(X)
    gap = np.maximum(np.maximum(mesh.lo[None] - X[:, None], X[:, None] - mesh.hi[None]), 0)
    brute = np.sqrt((gap ** 2).sum(axis=2)).min(axis=1)
    assert np.array_equal(d, brute)
    assert np.allclose(np.linalg.norm(foot - X, axis=1), d)


def test_mesh_quadrature_weights(line):
    E, W, g, A = line
    mesh = approx_domain(A, 3).boundary_mesh()
    nodes, w, face = mesh.quadrature(2.0 ** -3 / 4)
    assert math.fsum(w) == pytest.approx(mesh.total_area(), rel=1e-12)
    assert np.all((nodes >= mesh.lo[face] - 1e-15) & (nodes <= mesh.hi[face] + 1e-15))


def test_halfspace_mesh_distance_band(line):
    E, W, g, A = line
    N = 3
    mesh = approx_domain(A, N).boundary_mesh()
    sel = mesh.toward_set
    c = mesh.centroids[sel]
    # stay away from the ends of the segment, where the region wraps around
    mid = np.abs(c[:, 0]) < 0.5
    d, _ = E.tree.query(c[mid])
    ratio = d / 2.0 ** -N
    assert ratio.max() / ratio.min() <= 200 ** 2
    assert ratio.max() <= 200 and ratio.min() >= 1 / 200


def test_outer_ball_contains_regions(line):
    E, W, g, A = line
    K = A.box_radius_const()
    Kp = outer_ball_const(A, 0)
    assert Kp >= 8 * K


def test_mesh_dump(line, tmp_path):
    E, W, g, A = line
    mesh = approx_domain(A, 1).boundary_mesh()
    p = tmp_path / "mesh.txt"
    dump_mesh(mesh, p)
    rows = p.read_text().splitlines()
    assert len(rows) == len(mesh)
    tok = rows[0].split()
    # corner (2) + one extent + normal (2) + area + tag
    assert len(tok) == 7 and tok[-1] in ("boundary", "interior")
