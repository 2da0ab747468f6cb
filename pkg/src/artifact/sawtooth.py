"""Whitney regions attached to dyadic cubes, Carleson boxes, sawtooth domains,
cones, and the approximating domains with their polyhedral boundary meshes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order
from scipy.spatial import cKDTree

from .complement import WhitneyDecomposition, _point_box_dist, box_distance
from .dyadic import DyadicGrid
from .errors import ArtifactError
from .geometry import DiscreteSet

FAT = 4.0
FAT_STAR = 5.0


@dataclass
class WhitneyRegion:
    """W*_Q: Whitney cube ids attached to grid cube ``q``; X lies in cube ``x_cube``."""
    q: int
    cubes: np.ndarray
    x_cube: int
    X: np.ndarray

    def boxes(self, decomp: WhitneyDecomposition, factor: float | None = None):
        return decomp.fattened(self.cubes, factor)


def _subset_set(dset: DiscreteSet, idx, radius: float) -> DiscreteSet:
    return DiscreteSet(dset.points[idx], dset.weights[idx], dset.boundary_dim,
                       dset.mesh_scale, diameter=2 * radius)


def _gather_rows(ptr: np.ndarray, rows: np.ndarray):
    """Flat positions of the CSR entries of ``rows`` and the row each came from."""
    cnt = ptr[rows + 1] - ptr[rows]
    owner = np.repeat(np.arange(len(rows)), cnt)
    offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    return np.repeat(ptr[rows], cnt) + offs, owner


def chain_component(decomp: WhitneyDecomposition, cubes: np.ndarray, start: int) -> np.ndarray:
    """Cubes of ``cubes`` reachable from ``start`` through touching pairs inside ``cubes``."""
    cubes = np.asarray(cubes, dtype=np.int64)
    loc = np.full(len(decomp), -1, dtype=np.int64)
    loc[cubes] = np.arange(len(cubes))
    pos, owner = _gather_rows(decomp.nbr_ptr, cubes)
    dst = loc[decomp.nbr_idx[pos]]
    keep = dst >= 0
    ptr = np.concatenate([[0], np.cumsum(np.bincount(owner[keep], minlength=len(cubes)))])
    g = csr_matrix((np.ones(int(keep.sum()), dtype=np.int8), dst[keep], ptr),
                   shape=(len(cubes), len(cubes)))
    # touching is symmetric, so the directed search already sees every edge
    reach = breadth_first_order(g, int(loc[start]), directed=True, return_predecessors=False)
    return np.sort(cubes[reach])


class Assignment:
    """The map Q -> W*_Q for one grid and one Whitney decomposition."""

    def __init__(self, grid: DyadicGrid, decomp: WhitneyDecomposition, kstar: int, K0: float,
                 regions: dict, prefer):
        self.grid = grid
        self.decomp = decomp
        self.kstar = kstar
        self.K0 = K0
        self.regions: dict[int, WhitneyRegion] = regions
        self.prefer = prefer
        self._K = None

    def __getitem__(self, q: int) -> WhitneyRegion:
        self.grid.check_id(q)
        return self.regions[int(q)]

    def union(self, qs) -> np.ndarray:
        qs = list(qs)
        if not qs:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate([self.regions[int(q)].cubes for q in qs]))

    def cone_cubes(self, x: int, top: int | None = None) -> np.ndarray:
        """Whitney cubes of W*_Q over every grid cube Q containing point x
        (only Q at level >= top when given: the cone truncated at that scale)."""
        g = self.grid
        if not 0 <= int(x) < len(g.set):
            raise ArtifactError("unknown-point", f"{x!r}")
        k0 = g.k_min if top is None else max(g.k_min, int(top))
        return self.union(g.cube_of(int(x), k) for k in range(k0, g.k_max + 1))

    def box_radius_const(self) -> float:
        """Smallest K with T_Q^fat inside the ball B(x_Q, K l(Q)/4), maximised over Q."""
        if self._K is None:
            self._K = max(carleson_box(self, q).containment_const() for q in range(len(self.grid)))
        return self._K


def assign_wstar(grid: DyadicGrid, decomp: WhitneyDecomposition, kstar: int = 2,
                 K0: float = 16.0, prefer=None) -> Assignment:
    """Attach to every grid cube Q the Whitney cubes of comparable size near Q.

    Candidates have |k_I - k(Q)| <= kstar and dist(I, Q) <= K0 l(Q). The marked
    cube holding X_Q is the candidate at the finest available level closest to
    the centre of Q, on the side of ``prefer`` (a direction vector) when given.
    W*_Q is the chain-connected component of the candidates containing it.
    """
    if grid.set is not decomp.set:
        raise ArtifactError("invalid-parameter", "grid and decomposition built on different sets")
    if kstar < 0 or not K0 > 0:
        raise ArtifactError("invalid-parameter", "need kstar >= 0 and K0 > 0")
    dset = grid.set
    pts = dset.points
    pref = None if prefer is None else np.asarray(prefer, float)
    level_trees = {}
    for k in decomp.levels:
        ids = np.flatnonzero(decomp.level == k)
        level_trees[int(k)] = (ids, cKDTree(decomp.center[ids]))
    regions = {}
    for Q in grid.cubes:
        ell = Q.length
        reach = K0 * ell
        xq = pts[Q.center]
        cand = []
        for k, (ids, tree) in level_trees.items():
            if abs(k - Q.level) > kstar:
                continue
            if math.isfinite(reach):
                r = reach + Q.outer_radius + math.sqrt(decomp.dim) * 2.0 ** -k / 2
                cand.append(ids[tree.query_ball_point(xq, r)])
            else:
                cand.append(ids)
        cand = np.sort(np.concatenate(cand)) if cand else np.zeros(0, dtype=np.int64)
        if math.isfinite(reach) and len(cand):
            cand = cand[decomp.dist[cand] <= reach]
            # the centre of Q is a member, so boxes within reach of it need no exact test
            near = _point_box_dist(xq, decomp.lo[cand], decomp.hi[cand]) <= reach
            unsure = cand[~near]
            if len(unsure):
                sub = _subset_set(dset, Q.members, Q.outer_radius)
                dq = box_distance(sub, decomp.lo[unsure], decomp.hi[unsure])
                cand = np.sort(np.concatenate([cand[near], unsure[dq <= reach]]))
        if len(cand) == 0:
            raise ArtifactError("empty-region", f"no Whitney cube near grid cube {Q.id}")
        x_cube = _pick_marked(decomp, cand, xq, pref)
        cubes = chain_component(decomp, cand, x_cube)
        regions[Q.id] = WhitneyRegion(Q.id, cubes, int(x_cube), decomp.center[x_cube].copy())
    return Assignment(grid, decomp, kstar, K0, regions, pref)


def _pick_marked(decomp, cand, xq, pref) -> int:
    finest = decomp.level[cand].max()
    pool = cand[decomp.level[cand] == finest]
    if pref is not None:
        side = (decomp.center[pool] - xq) @ pref > 0
        if side.any():
            pool = pool[side]
    d = np.linalg.norm(decomp.center[pool] - xq, axis=1)
    return int(pool[np.lexsort((pool, d))[0]])


def check_assignment(asg: Assignment) -> dict:
    """Verify the level window, the distance bound, and X_Q in a connected U_Q for every Q."""
    decomp, grid = asg.decomp, asg.grid
    levels_ok = dist_ok = marked_ok = connected_ok = True
    for q, reg in asg.regions.items():
        Q = grid[q]
        lv = decomp.level[reg.cubes]
        levels_ok &= bool(np.all(np.abs(lv - Q.level) <= asg.kstar))
        pts = grid.set.points[Q.members]
        # brute force: every member point against every box
        lo, hi = decomp.lo[reg.cubes], decomp.hi[reg.cubes]
        best = np.full(len(reg.cubes), np.inf)
        for i in range(0, len(pts), 256):
            p = pts[i:i + 256]
            gap = np.maximum(np.maximum(lo[:, None, :] - p[None], p[None] - hi[:, None, :]), 0)
            best = np.minimum(best, np.sqrt((gap ** 2).sum(axis=2)).min(axis=1))
        dist_ok &= bool(np.all(best <= asg.K0 * Q.length))
        marked_ok &= bool(reg.x_cube in set(reg.cubes.tolist())) and \
            bool(decomp.locate(reg.X)[0] == reg.x_cube)
        connected_ok &= len(chain_component(decomp, reg.cubes, reg.x_cube)) == len(reg.cubes)
    return dict(levels=levels_ok, distance=dist_ok, marked_inside=marked_ok,
                connected=connected_ok)


# ---------------------------------------------------------------- domains

@dataclass
class SawtoothDomain:
    """Union of boxes factor*I over a set of Whitney cubes.

    ``factor`` is 1+lambda for the plain regions, 4 for the fat variant and 5
    for fat*. Membership is the open union of those boxes.
    """
    kind: str
    decomp: WhitneyDecomposition
    cubes: np.ndarray
    factor: float
    grid_cubes: list = field(default_factory=list)
    q: int | None = None
    anchor: np.ndarray | None = None
    anchor_level: int = 0
    N: int | None = None
    _trees: dict | None = None
    _mesh: "BoundaryMesh | None" = None

    def __len__(self):
        return len(self.cubes)

    @property
    def empty(self) -> bool:
        return len(self.cubes) == 0

    def boxes(self):
        return self.decomp.fattened(self.cubes, self.factor)

    def _level_trees(self):
        if self._trees is None:
            self._trees = {}
            lv = self.decomp.level[self.cubes]
            for k in np.unique(lv):
                ids = self.cubes[lv == k]
                self._trees[int(k)] = (ids, cKDTree(self.decomp.center[ids]))
        return self._trees

    def contains(self, X) -> np.ndarray:
        """Open-union membership for each row of X."""
        Xs = np.atleast_2d(np.asarray(X, float))
        inside = np.zeros(len(Xs), bool)
        for k, (ids, tree) in self._level_trees().items():
            r = self.factor * 2.0 ** -k / 2
            d, _ = tree.query(Xs, k=1, p=np.inf)
            inside |= d < r
        return inside

    def with_factor(self, factor: float, kind: str | None = None) -> "SawtoothDomain":
        return SawtoothDomain(kind or self.kind, self.decomp, self.cubes, factor,
                              self.grid_cubes, self.q, self.anchor, self.anchor_level, self.N)

    def containment_const(self) -> float:
        """4 max |X - anchor| / l(Q) over the 4I boxes: the K with this region in B(anchor, K l/4)."""
        if self.anchor is None or self.q is None or self.empty:
            return 0.0
        lo, hi = self.decomp.fattened(self.cubes, FAT)
        far = np.maximum(np.abs(lo - self.anchor), np.abs(hi - self.anchor))
        ell = 2.0 ** -self.anchor_level
        return float(4 * np.sqrt((far ** 2).sum(axis=1)).max() / ell)

    def boundary_mesh(self) -> "BoundaryMesh":
        if self._mesh is None:
            self._mesh = union_boundary_mesh(self.decomp, self.cubes, self.factor)
        return self._mesh


def _domain(kind, asg: Assignment, qs, factor, q=None) -> SawtoothDomain:
    qs = sorted(int(x) for x in qs)
    dom = SawtoothDomain(kind, asg.decomp, asg.union(qs), factor, qs, q)
    if q is not None:
        dom.anchor = asg.grid.set.points[asg.grid[q].center].copy()
        dom.anchor_level = asg.grid[q].level
    return dom


def _factor(variant: str, lam: float) -> float:
    try:
        return {"plain": 1 + lam, "fat": FAT, "fat*": FAT_STAR}[variant]
    except KeyError:
        raise ArtifactError("invalid-parameter", f"unknown variant {variant!r}") from None


def whitney_region(asg: Assignment, q: int, variant: str = "plain") -> SawtoothDomain:
    asg.grid.check_id(q)
    return _domain("U_Q", asg, [q], _factor(variant, asg.decomp.lam), q)


def carleson_box(asg: Assignment, q: int, variant: str = "plain") -> SawtoothDomain:
    """T_Q: union of U_Q' over the grid cubes Q' inside Q."""
    asg.grid.check_id(q)
    kind = "T_Q" if variant == "plain" else f"T_Q^{variant}"
    return _domain(kind, asg, asg.grid.descendants(int(q)), _factor(variant, asg.decomp.lam), int(q))


def sawtooth_region(asg: Assignment, family, q: int | None = None,
                    variant: str = "plain") -> SawtoothDomain:
    """Omega_F (or Omega_{F,Q} with q given): union of U_Q' over cubes outside every member of F."""
    if q is not None:
        asg.grid.check_id(q)
    qs = asg.grid.sawtooth_cubes(family, root=q)
    kind = "Omega_F" if q is None else "Omega_FQ"
    if variant != "plain":
        kind += "^" + variant
    dom = _domain(kind, asg, qs, _factor(variant, asg.decomp.lam), q)
    return dom


def approx_domain(asg: Assignment, N: int, variant: str = "plain") -> SawtoothDomain:
    """Omega_N: union of U_Q over grid cubes with l(Q) >= 2^(1-N)."""
    g = asg.grid
    top = N - 1
    if top < g.k_min:
        raise ArtifactError("invalid-parameter", f"N={N} coarser than the grid root level")
    if top > g.k_max or top + asg.kstar > asg.decomp.k_deepest:
        raise ArtifactError("resolution-exceeded",
                            f"N={N} needs grid level {top} and Whitney level {top + asg.kstar}")
    qs = [c.id for c in g.cubes if c.level <= top]
    dom = _domain("Omega_N", asg, qs, _factor(variant, asg.decomp.lam))
    dom.N = N
    return dom


def cone_membership(asg: Assignment, x: int, X) -> bool | np.ndarray:
    """Whether X lies in the cone over set point x: the union of the 5I boxes of W*_Q, Q containing x."""
    cubes = asg.cone_cubes(x)
    dom = SawtoothDomain("cone", asg.decomp, cubes, FAT_STAR)
    X = np.asarray(X, float)
    out = dom.contains(X)
    return bool(out[0]) if X.ndim == 1 else out


# ---------------------------------------------------------------- boundary mesh

@dataclass
class BoundaryMesh:
    """Axis-aligned boundary rectangles of a union of boxes.

    Face f lies in the plane x[axis[f]] = lo[f, axis[f]] with outward normal
    sign[f] * e_axis. ``owner`` is the Whitney cube whose box carries the face.
    ``toward_set`` marks faces whose outward normal heads closer to the set.
    """
    lo: np.ndarray
    hi: np.ndarray
    axis: np.ndarray
    sign: np.ndarray
    owner: np.ndarray
    toward_set: np.ndarray
    _trees: list | None = None

    def __len__(self):
        return len(self.axis)

    @property
    def dim(self) -> int:
        return self.lo.shape[1]

    @property
    def normals(self) -> np.ndarray:
        nu = np.zeros((len(self), self.dim))
        nu[np.arange(len(self)), self.axis] = self.sign
        return nu

    @property
    def areas(self) -> np.ndarray:
        ext = self.hi - self.lo
        ext[np.arange(len(self)), self.axis] = 1.0
        return np.prod(ext, axis=1)

    @property
    def centroids(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def tags(self) -> np.ndarray:
        return np.where(self.toward_set, "boundary", "interior")

    def total_area(self) -> float:
        return math.fsum(self.areas)

    def quadrature(self, spacing: float):
        """Centroid rule on a subdivision of each face with cells no wider than ``spacing``.

        Returns (nodes, weights, face index per node).
        """
        if not spacing > 0:
            raise ArtifactError("invalid-parameter", "spacing must be positive")
        d = self.dim
        nodes, weights, face = [], [], []
        ext = self.hi - self.lo
        counts = np.maximum(1, np.ceil(ext / spacing - 1e-9)).astype(np.int64)
        counts[np.arange(len(self)), self.axis] = 1
        for key in np.unique(counts, axis=0):
            sel = np.flatnonzero(np.all(counts == key, axis=1))
            grids = np.meshgrid(*[(np.arange(m) + 0.5) / m for m in key], indexing="ij")
            frac = np.stack([g.ravel() for g in grids], axis=1)
            pts = self.lo[sel][:, None, :] + frac[None] * ext[sel][:, None, :]
            nodes.append(pts.reshape(-1, d))
            weights.append(np.repeat(self.areas[sel] / frac.shape[0], frac.shape[0]))
            face.append(np.repeat(sel, frac.shape[0]))
        if not nodes:
            return np.zeros((0, d)), np.zeros(0), np.zeros(0, dtype=np.int64)
        nodes, weights, face = np.concatenate(nodes), np.concatenate(weights), np.concatenate(face)
        order = np.lexsort((np.arange(len(face)), face))
        return nodes[order], weights[order], face[order]

    def _size_classes(self):
        if self._trees is None:
            hd = 0.5 * np.linalg.norm(self.hi - self.lo, axis=1)
            cls = np.floor(np.log2(np.maximum(hd, 1e-300))).astype(np.int64)
            self._trees = []
            for c in np.unique(cls):
                ids = np.flatnonzero(cls == c)
                self._trees.append((ids, float(hd[ids].max()), cKDTree(self.centroids[ids])))
        return self._trees

    def nearest(self, X):
        """Exact distance from each row of X to the mesh, with the nearest face and point."""
        Xs = np.atleast_2d(np.asarray(X, float))
        M = len(Xs)
        best = np.full(M, np.inf)
        arg = np.full(M, -1, dtype=np.int64)
        if len(self) == 0:
            return best, arg, Xs.copy()
        classes = self._size_classes()
        for ids, hd, tree in classes:
            d, j = tree.query(Xs, k=1)
            upper = d  # distance to a centroid bounds the distance to its face
            better = upper < best
            best[better] = upper[better]
            arg[better] = ids[j[better]]
        # refine: a face can beat the bound only if its centroid is within bound + half diagonal
        exact = _point_rect_dist(Xs, self.lo[arg], self.hi[arg])
        best = exact.copy()
        for ids, hd, tree in classes:
            lists = tree.query_ball_point(Xs, best + hd)
            cnt = np.fromiter((len(x) for x in lists), dtype=np.int64, count=M)
            if cnt.sum() == 0:
                continue
            flat = ids[np.fromiter((i for x in lists for i in x), dtype=np.int64, count=int(cnt.sum()))]
            own = np.repeat(np.arange(M), cnt)
            dd = _point_rect_dist(Xs[own], self.lo[flat], self.hi[flat])
            # stable ordering: lowest face id wins ties
            order = np.lexsort((flat, dd, own))
            own_s, dd_s, flat_s = own[order], dd[order], flat[order]
            first = np.concatenate([[True], own_s[1:] != own_s[:-1]])
            o, v, f = own_s[first], dd_s[first], flat_s[first]
            upd = (v < best[o]) | ((v == best[o]) & (f < arg[o]))
            best[o[upd]] = v[upd]
            arg[o[upd]] = f[upd]
        foot = np.clip(Xs, self.lo[arg], self.hi[arg])
        return best, arg, foot

    def distance(self, X) -> np.ndarray:
        return self.nearest(X)[0]


def _point_rect_dist(p, lo, hi):
    gap = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    return np.sqrt((gap * gap).sum(axis=-1))


def _rect_minus(flo, fhi, rlo, rhi):
    """Cells of the rectangle [flo, fhi] not covered by the open rectangles (rlo, rhi)."""
    if len(rlo):
        rlo = np.maximum(rlo, flo)
        rhi = np.minimum(rhi, fhi)
        ok = np.all(rhi > rlo, axis=1)
        rlo, rhi = rlo[ok], rhi[ok]
    if len(rlo) == 0:
        return flo[None], fhi[None]
    m = len(flo)
    cuts = [np.unique(np.concatenate([[flo[a], fhi[a]], rlo[:, a], rhi[:, a]])) for a in range(m)]
    mids = [0.5 * (c[1:] + c[:-1]) for c in cuts]
    grids = np.meshgrid(*mids, indexing="ij")
    cell_mid = np.stack([g.ravel() for g in grids], axis=1)
    covered = np.zeros(len(cell_mid), bool)
    for a, b in zip(rlo, rhi):
        covered |= np.all((cell_mid > a) & (cell_mid < b), axis=1)
    idx = np.meshgrid(*[np.arange(len(c) - 1) for c in cuts], indexing="ij")
    idx = np.stack([g.ravel() for g in idx], axis=1)[~covered]
    lo = np.stack([cuts[a][idx[:, a]] for a in range(m)], axis=1) if len(idx) else np.zeros((0, m))
    hi = np.stack([cuts[a][idx[:, a] + 1] for a in range(m)], axis=1) if len(idx) else np.zeros((0, m))
    return lo, hi


def box_union_faces(lo: np.ndarray, hi: np.ndarray, partners, process=None):
    """Boundary rectangles of the union of closed boxes [lo_i, hi_i].

    ``partners[i]`` lists every other box that can meet box i. A piece of a face
    of box i is removed where an open box covers it, where a partner has a
    coplanar face of opposite orientation, or where a lower-indexed partner has
    a coplanar face of the same orientation (so shared pieces are kept once).
    Returns (lo, hi, axis, sign, owner) of the pieces.
    """
    d = lo.shape[1]
    out_lo, out_hi, out_ax, out_sg, out_own = [], [], [], [], []
    todo = range(len(lo)) if process is None else process
    for i in todo:
        P = np.asarray(partners[i], dtype=np.int64)
        a, b = lo[i], hi[i]
        pl, ph = lo[P], hi[P]
        for ax in range(d):
            rest = [t for t in range(d) if t != ax]
            for sg in (-1, 1):
                p = b[ax] if sg > 0 else a[ax]
                if len(P):
                    cross = (pl[:, ax] < p) & (p < ph[:, ax])
                    same_face = (ph[:, ax] == p) if sg > 0 else (pl[:, ax] == p)
                    opp_face = (pl[:, ax] == p) if sg > 0 else (ph[:, ax] == p)
                    cut = cross | opp_face | (same_face & (P < i))
                    rl, rh = pl[cut][:, rest], ph[cut][:, rest]
                else:
                    rl = rh = np.zeros((0, d - 1))
                clo, chi = _rect_minus(a[rest], b[rest], rl, rh)
                if len(clo) == 0:
                    continue
                flo = np.empty((len(clo), d))
                fhi = np.empty((len(clo), d))
                flo[:, rest], fhi[:, rest] = clo, chi
                flo[:, ax] = fhi[:, ax] = p
                out_lo.append(flo)
                out_hi.append(fhi)
                out_ax.append(np.full(len(clo), ax))
                out_sg.append(np.full(len(clo), sg))
                out_own.append(np.full(len(clo), i))
    if not out_lo:
        z = np.zeros(0, dtype=np.int64)
        return np.zeros((0, d)), np.zeros((0, d)), z, z, z
    return (np.concatenate(out_lo), np.concatenate(out_hi), np.concatenate(out_ax),
            np.concatenate(out_sg), np.concatenate(out_own))


def union_boundary_mesh(decomp: WhitneyDecomposition, cubes, factor: float | None = None) -> BoundaryMesh:
    """Boundary mesh of the union of fattened Whitney cubes (I* meets J* only for touching I, J)."""
    f = 1 + decomp.lam if factor is None else factor
    if f > 1 + decomp.lam + 1e-12:
        raise ArtifactError("invalid-parameter", "meshes are built for the (1+lambda) fattening only")
    cubes = np.sort(np.asarray(cubes, dtype=np.int64))
    lo, hi = decomp.fattened(cubes, f)
    lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
    loc = np.full(len(decomp), -1, dtype=np.int64)
    loc[cubes] = np.arange(len(cubes))
    partners, process = [], []
    for li, c in enumerate(cubes):
        nb = loc[decomp.neighbors(c)]
        inside = nb[nb >= 0]
        partners.append(inside)
        # fully surrounded cubes contribute nothing: their box lies in the neighbours' interiors
        if len(inside) < len(decomp.neighbors(c)) or not decomp.complete[c]:
            process.append(li)
    flo, fhi, ax, sg, own = box_union_faces(lo, hi, partners, process)
    owner = cubes[own] if len(own) else own
    toward = _toward_set(decomp, flo, fhi, ax, sg, owner)
    return BoundaryMesh(flo, fhi, ax, sg, owner, toward)


def _toward_set(decomp, flo, fhi, ax, sg, owner):
    if len(ax) == 0:
        return np.zeros(0, bool)
    c = 0.5 * (flo + fhi)
    step = np.zeros_like(c)
    step[np.arange(len(ax)), ax] = sg * decomp.side[owner] / 4
    d_out, _ = decomp.set.tree.query(c + step)
    d_in, _ = decomp.set.tree.query(c - step)
    return d_out < d_in


def dump_mesh(mesh: BoundaryMesh, path) -> None:
    d = mesh.dim
    nu, area, tags = mesh.normals, mesh.areas, mesh.tags
    with open(path, "w") as fh:
        for f in range(len(mesh)):
            rest = [t for t in range(d) if t != mesh.axis[f]]
            ext = (mesh.hi[f] - mesh.lo[f])[rest]
            fh.write(" ".join(repr(float(v)) for v in mesh.lo[f]) + " "
                     + " ".join(repr(float(v)) for v in ext) + " "
                     + " ".join(repr(float(v)) for v in nu[f]) + f" {float(area[f])!r} {tags[f]}\n")


def outer_ball_const(asg: Assignment, q0: int, factor: float = 8.0, max_doublings: int = 8) -> float:
    """K' for B**_{Q0}: starts at factor*K and doubles until every U^fat*_{Q'} meeting a
    B*_Q with Q inside Q0 sits strictly inside B(x_{Q0}, K' l(Q0))."""
    g = asg.grid
    K = asg.box_radius_const()
    Q0 = g.check_id(q0)
    x0 = g.set.points[Q0.center]
    ell0 = Q0.length
    # the largest ball B*_Q for Q inside Q0 lies within B(x0, C l0 + K l0)
    reach = Q0.outer_radius + K * ell0
    lo5, hi5 = asg.decomp.fattened(np.arange(len(asg.decomp)), FAT_STAR)
    near = np.sqrt((np.maximum(np.maximum(lo5 - x0, x0 - hi5), 0) ** 2).sum(axis=1)) < reach
    Kp = factor * K
    for _ in range(max_doublings + 1):
        bad = False
        for q, reg in asg.regions.items():
            hit = near[reg.cubes]
            if not hit.any():
                continue
            far = np.maximum(np.abs(lo5[reg.cubes] - x0), np.abs(hi5[reg.cubes] - x0))
            if np.sqrt((far ** 2).sum(axis=1)).max() >= Kp * ell0:
                bad = True
                break
        if not bad:
            return Kp
        Kp *= 2
    raise ArtifactError("nonconvergence", "outer ball constant did not stabilise")
