"""Christ-type dyadic grids built from nested nets, and the dyadic maximal operator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ArtifactError
from .geometry import DiscreteSet, point_cloud_diameter


@dataclass
class DyadicCube:
    id: int
    level: int
    center: int
    members: np.ndarray
    parent: int | None = None
    children: list = field(default_factory=list)
    inner_radius: float = 0.0
    outer_const: float = 0.0

    @property
    def length(self) -> float:
        return 2.0 ** -self.level

    @property
    def outer_radius(self) -> float:
        return self.outer_const * self.length


class DyadicGrid:
    """Cube hierarchy on a DiscreteSet.

    ``labels[k - k_min]`` maps each point to the id of its level-k cube.
    """

    def __init__(self, dset: DiscreteSet, k_min: int, k_max: int, cubes, labels):
        self.set = dset
        self.k_min = k_min
        self.k_max = k_max
        self.cubes: list[DyadicCube] = cubes
        self.labels = labels
        self.by_level: dict[int, list[int]] = {k: [] for k in range(k_min, k_max + 1)}
        for c in cubes:
            self.by_level.setdefault(c.level, []).append(c.id)
        self._mass = None

    def __getitem__(self, cid: int) -> DyadicCube:
        return self.cubes[cid]

    def __len__(self):
        return len(self.cubes)

    def check_id(self, cid) -> DyadicCube:
        if not isinstance(cid, (int, np.integer)) or not 0 <= cid < len(self.cubes):
            raise ArtifactError("unknown-cube", f"{cid!r}")
        return self.cubes[int(cid)]

    @property
    def mass(self) -> np.ndarray:
        """sigma(Q) for every cube id."""
        if self._mass is None:
            w = self.set.weights
            self._mass = np.array([math.fsum(w[c.members]) for c in self.cubes])
        return self._mass

    def cube_of(self, point: int, level: int) -> int:
        return int(self.labels[level - self.k_min][point])

    def ancestor(self, cid: int, level: int) -> int:
        c = self.cubes[cid]
        if level > c.level:
            raise ArtifactError("invalid-parameter", "ancestor level finer than cube")
        return self.cube_of(c.center, level)

    def contains(self, big: int, small: int) -> bool:
        """True when cube ``small`` is a subset of cube ``big``."""
        b, s = self.cubes[big], self.cubes[small]
        return s.level >= b.level and self.cube_of(s.center, b.level) == big

    def descendants(self, cid: int) -> list[int]:
        """The discretized Carleson region below a cube, the cube itself included."""
        out, stack = [], [cid]
        while stack:
            q = stack.pop()
            out.append(q)
            stack.extend(self.cubes[q].children)
        return sorted(out)

    def maximal_cubes(self, family) -> list[int]:
        fam = sorted(set(int(q) for q in family))
        return [q for q in fam if not any(p != q and self.contains(p, q) for p in fam)]

    def check_disjoint_family(self, family) -> list[int]:
        fam = sorted(set(int(q) for q in family))
        for q in fam:
            self.check_id(q)
        for i, a in enumerate(fam):
            for b in fam[i + 1:]:
                if self.contains(a, b) or self.contains(b, a):
                    raise ArtifactError("invalid-family", f"cubes {a} and {b} overlap")
        return fam

    def sawtooth_cubes(self, family, root: int | None = None) -> list[int]:
        """Cubes not contained in any member of a pairwise disjoint family.

        With ``root`` given, only cubes inside the root are kept.
        """
        fam = self.check_disjoint_family(family)
        pool = self.descendants(root) if root is not None else range(len(self.cubes))
        return [q for q in pool if not any(self.contains(f, q) for f in fam)]

    def union_members(self, family) -> np.ndarray:
        if len(family) == 0:
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate([self.cubes[q].members for q in family]))


def _greedy_net(tree: cKDTree, order: np.ndarray, start: list[int], sep: float) -> list[int]:
    covered = np.zeros(tree.n, dtype=bool)
    net = list(start)
    r = sep * (1 - 1e-9)
    for c in net:
        covered[tree.query_ball_point(tree.data[c], r)] = True
    for p in order:
        if not covered[p]:
            net.append(int(p))
            covered[tree.query_ball_point(tree.data[p], r)] = True
    return net


def _nearest_lowest(points: np.ndarray, centers: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Index into ``centers`` of the nearest centre per query, ties to lowest point index."""
    kk = min(8, len(centers))
    ctree = cKDTree(points[centers])
    d, j = ctree.query(points[queries], k=kk)
    if kk == 1:
        return np.asarray(j).reshape(-1)
    d, j = np.atleast_2d(d), np.atleast_2d(j)
    dmin = d[:, :1]
    tie = d <= dmin * (1 + 1e-12) + 1e-300
    cand = np.where(tie, centers[j], np.iinfo(np.int64).max)
    best = cand.argmin(axis=1)
    return j[np.arange(len(queries)), best]


def build_grid(dset: DiscreteSet, k_min: int, k_max: int, seed: int = 0) -> DyadicGrid:
    """Nested 2^-k nets; cubes grow bottom-up from nearest-centre cells."""
    N = len(dset)
    if N == 0:
        raise ArtifactError("empty-input", "set has no points")
    if k_max < k_min:
        raise ArtifactError("invalid-parameter", "k_max < k_min")
    pts = dset.points
    tree = dset.tree
    order = np.random.default_rng(seed).permutation(N)

    nets = []
    prev: list[int] = []
    for k in range(k_min, k_max + 1):
        prev = _greedy_net(tree, order, prev, 2.0 ** -k)
        nets.append(np.array(prev, dtype=np.int64))

    # centre -> parent centre; old centres keep themselves
    parent_center = []
    for li in range(1, len(nets)):
        cur, coarse = nets[li], nets[li - 1]
        pc = np.empty(len(cur), dtype=np.int64)
        m = len(coarse)
        pc[:m] = coarse
        if len(cur) > m:
            pc[m:] = coarse[_nearest_lowest(pts, coarse, cur[m:])]
        parent_center.append(dict(zip(cur.tolist(), pc.tolist())))

    # finest level: each point to nearest finest centre
    fine = nets[-1]
    owner = fine[_nearest_lowest(pts, fine, np.arange(N))]
    owner[fine] = fine
    center_of = [None] * len(nets)
    center_of[-1] = owner
    for li in range(len(nets) - 2, -1, -1):
        mp = parent_center[li]
        keys = np.array(list(mp.keys()), dtype=np.int64)
        vals = np.array(list(mp.values()), dtype=np.int64)
        lut = np.full(N, -1, dtype=np.int64)
        lut[keys] = vals
        center_of[li] = lut[center_of[li + 1]]

    cubes: list[DyadicCube] = []
    labels = []
    for li, k in enumerate(range(k_min, k_max + 1)):
        centers = nets[li]
        cid = {}
        for c in centers:
            cid[int(c)] = len(cubes)
            cubes.append(DyadicCube(len(cubes), k, int(c), None, inner_radius=2.0 ** -k / 4))
        lut = np.full(N, -1, dtype=np.int64)
        lut[centers] = [cid[int(c)] for c in centers]
        lab = lut[center_of[li]]
        labels.append(lab)
        first = cid[int(centers[0])]
        order_pts = np.argsort(lab, kind="stable")
        bounds = np.concatenate([[0], np.cumsum(np.bincount(lab - first, minlength=len(centers)))])
        for q in range(first, len(cubes)):
            mem = order_pts[bounds[q - first]:bounds[q - first + 1]]
            c = cubes[q]
            c.members = mem
            dist = np.linalg.norm(pts[mem] - pts[c.center], axis=1).max() if len(mem) else 0.0
            c.outer_const = float(dist / c.length)
        if li > 0:
            plab = labels[li - 1]
            for q in range(first, len(cubes)):
                p = int(plab[cubes[q].center])
                cubes[q].parent = p
                cubes[p].children.append(q)
    return DyadicGrid(dset, k_min, k_max, cubes, labels)


@dataclass
class GridReport:
    partition: bool
    nesting: bool
    unique_ancestor: bool
    per_level: dict
    max_diam_ratio: float
    min_diam_ratio: float
    min_inner_coverage: float
    max_outer_const: float

    @property
    def structural_ok(self) -> bool:
        return self.partition and self.nesting and self.unique_ancestor


def verify_grid(grid: DyadicGrid) -> GridReport:
    """Check partition, nesting and unique ancestry from the member lists alone."""
    N = len(grid.set)
    pts = grid.set.points
    levels = sorted(grid.by_level)
    member_sets = [set(c.members.tolist()) for c in grid.cubes]
    # point -> cubes containing it, per level
    hits = {k: [[] for _ in range(N)] for k in levels}
    for c in grid.cubes:
        for p in c.members:
            hits[c.level][p].append(c.id)
    partition = all(len(hits[k][p]) == 1 for k in levels for p in range(N))

    nesting = True
    unique = True
    for c in grid.cubes:
        for k in levels:
            if k > c.level:
                continue
            touching = set()
            for p in c.members:
                touching.update(hits[k][p])
            if k == c.level:
                touching.discard(c.id)
                if touching:
                    nesting = False
                continue
            inside = [r for r in touching if member_sets[c.id] <= member_sets[r]]
            if len(inside) != len(touching):
                nesting = False
            if len(inside) != 1:
                unique = False

    per_level = {}
    tree = grid.set.tree
    for k in levels:
        dmax, dmin, cov, cmax = 0.0, np.inf, 1.0, 0.0
        ell = 2.0 ** -k
        for cid in grid.by_level[k]:
            c = grid.cubes[cid]
            mem = c.members
            if len(mem) > 1:
                d = point_cloud_diameter(pts[mem]) / ell
                dmax, dmin = max(dmax, d), min(dmin, d)
            if len(mem):
                cmax = max(cmax, float(np.linalg.norm(pts[mem] - pts[c.center], axis=1).max() / ell))
            ball = tree.query_ball_point(pts[c.center], c.inner_radius)
            if ball:
                frac = len(member_sets[cid].intersection(ball)) / len(ball)
                cov = min(cov, frac)
        per_level[k] = dict(max_diam_ratio=dmax, min_diam_ratio=dmin,
                            min_inner_coverage=cov, max_outer_const=cmax)
    vals = per_level.values()
    return GridReport(
        partition, nesting, unique, per_level,
        max((v["max_diam_ratio"] for v in vals), default=0.0),
        min((v["min_diam_ratio"] for v in vals), default=np.inf),
        min((v["min_inner_coverage"] for v in vals), default=1.0),
        max((v["max_outer_const"] for v in vals), default=0.0),
    )


def dyadic_maximal(grid: DyadicGrid, Q0: int, f) -> np.ndarray:
    """Local dyadic maximal function on the members of Q0 (in sorted member order)."""
    root = grid.check_id(Q0)
    f = np.asarray(f, float)
    w = grid.set.weights
    fw = f * w
    mem = root.members
    pos = np.full(len(w), -1, dtype=np.int64)
    pos[mem] = np.arange(len(mem))
    out = np.full(len(mem), -np.inf)
    # correctly rounded sums make the averages independent of summation order
    for q in grid.descendants(int(Q0)):
        m = grid.cubes[q].members
        avg = math.fsum(fw[m]) / math.fsum(w[m])
        idx = pos[m]
        out[idx] = np.maximum(out[idx], avg)
    return out


def dump_grid(grid: DyadicGrid, path) -> None:
    with open(path, "w") as fh:
        for c in grid.cubes:
            parent = -1 if c.parent is None else c.parent
            fh.write(f"{c.id} {c.level} {c.center} {parent} {len(c.children)} "
                     f"{len(c.members)} {c.inner_radius!r} {c.outer_const!r}\n")
