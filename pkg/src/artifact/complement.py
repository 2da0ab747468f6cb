"""Whitney decomposition of the complement of a discrete set, distance oracle,
corkscrew points and Harnack chains."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ArtifactError
from .geometry import DiscreteSet

DEFAULT_LAMBDA = 1.0 / 16


def _point_box_dist(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    gap = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    return np.sqrt((gap * gap).sum(axis=-1))


class _Buckets:
    """Points sorted into uniform cells with tight per-cell bounding boxes."""

    def __init__(self, pts: np.ndarray, g: float):
        keys = np.floor(pts / g).astype(np.int64)
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        self.order = np.argsort(inv, kind="stable")
        counts = np.bincount(inv)
        self.start = np.concatenate([[0], np.cumsum(counts)])
        srt = pts[self.order]
        self.count = counts
        self.cmin = np.minimum.reduceat(srt, self.start[:-1], axis=0)
        self.cmax = np.maximum.reduceat(srt, self.start[:-1], axis=0)
        self.chd = float(0.5 * np.linalg.norm(self.cmax - self.cmin, axis=1).max())
        self.tree = cKDTree(0.5 * (self.cmin + self.cmax))


def _buckets(dset: DiscreteSet) -> _Buckets:
    b = getattr(dset, "_buckets", None)
    if b is None:
        h = dset.mesh_scale if math.isfinite(dset.mesh_scale) else max(dset.diameter, 1.0)
        b = _Buckets(dset.points, 4 * h)
        dset._buckets = b
    return b


def box_distance(dset: DiscreteSet, lo, hi, max_pairs: int = 2_000_000) -> np.ndarray:
    """Exact distance from each closed box [lo, hi] to the point set.

    Upper bound from the nearest points to the box centre, then cells whose
    bounding box could beat it are scanned point by point.
    """
    lo = np.atleast_2d(np.asarray(lo, float))
    hi = np.atleast_2d(np.asarray(hi, float))
    pts = dset.points
    c = 0.5 * (lo + hi)
    hd = 0.5 * np.linalg.norm(hi - lo, axis=1)
    kk = min(4, len(pts))
    dc, ic = dset.tree.query(c, k=kk)
    dc, ic = dc.reshape(len(c), kk), ic.reshape(len(c), kk)
    out = _point_box_dist(pts[ic], lo[:, None, :], hi[:, None, :]).min(axis=1)
    # every point's box distance is at least |p - c| - hd
    need = np.flatnonzero((out > 0) & (dc[:, -1] - hd < out))
    if len(need) == 0:
        return out
    bk = _buckets(dset)
    step = max(1, len(need))
    i = 0
    while i < len(need):
        sel = need[i:i + step]
        lists = bk.tree.query_ball_point(c[sel], out[sel] + hd[sel] + bk.chd)
        counts = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(sel))
        total = int(counts.sum())
        if total > max_pairs and len(sel) > 1:
            step = max(1, len(sel) // 2)
            continue
        i += len(sel)
        if total == 0:
            continue
        cell = np.fromiter((j for x in lists for j in x), dtype=np.int64, count=total)
        owner = np.repeat(np.arange(len(sel)), counts)
        gap = np.maximum(np.maximum(bk.cmin[cell] - hi[sel][owner], lo[sel][owner] - bk.cmax[cell]), 0)
        lb = np.sqrt((gap * gap).sum(axis=1))
        keep = lb < out[sel][owner]
        cell, owner = cell[keep], owner[keep]
        if len(cell) == 0:
            continue
        n_in = bk.count[cell]
        own_p = np.repeat(owner, n_in)
        first = np.repeat(bk.start[cell], n_in)
        offs = np.arange(len(own_p)) - np.repeat(np.cumsum(n_in) - n_in, n_in)
        pidx = bk.order[first + offs]
        d = _point_box_dist(pts[pidx], lo[sel][own_p], hi[sel][own_p])
        best = np.full(len(sel), np.inf)
        np.minimum.at(best, own_p, d)
        out[sel] = np.minimum(out[sel], best)
    return out


def delta(obj, X, method: str = "tree") -> np.ndarray | float:
    """Distance from X (one point or an array of points) to the discrete set."""
    dset = obj.set if isinstance(obj, WhitneyDecomposition) else obj
    X = np.asarray(X, float)
    single = X.ndim == 1
    Xs = np.atleast_2d(X)
    if method == "tree":
        d, _ = dset.tree.query(Xs)
    elif method == "brute":
        d = np.empty(len(Xs))
        for i, x in enumerate(Xs):
            d[i] = np.sqrt(((dset.points - x) ** 2).sum(axis=1)).min()
    else:
        raise ArtifactError("invalid-parameter", f"unknown method {method!r}")
    return float(d[0]) if single else d


@dataclass
class WhitneyCube:
    id: int
    corner: np.ndarray
    side: float
    level: int
    neighbors: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return self.corner + self.side / 2


class WhitneyDecomposition:
    """Axis-aligned dyadic cubes tiling a box minus a collar of the set.

    Arrays: ``lo`` corners, ``side``, ``level``, ``dist`` = dist(I, E),
    ``dist4`` = dist(4I, E); neighbours (touching cubes) in CSR form.
    """

    def __init__(self, dset, lo, side, level, dist, dist4, bbox, k_deepest, lam):
        self.set = dset
        self.lo = lo
        self.side = side
        self.level = level
        self.dist = dist
        self.dist4 = dist4
        self.bbox = bbox
        self.k_deepest = k_deepest
        self.lam = lam
        self.dim = lo.shape[1]
        self.hi = lo + side[:, None]
        self.center = lo + side[:, None] / 2
        self._build_index()
        self.levels = np.unique(level)
        self._build_neighbors()
        self._ctree = None

    def __len__(self):
        return len(self.side)

    @property
    def diam(self) -> np.ndarray:
        return self.side * math.sqrt(self.dim)

    @property
    def center_tree(self) -> cKDTree:
        if self._ctree is None:
            self._ctree = cKDTree(self.center)
        return self._ctree

    def cube(self, i: int) -> WhitneyCube:
        return WhitneyCube(i, self.lo[i].copy(), float(self.side[i]), int(self.level[i]),
                           self.neighbors(i))

    def neighbors(self, i: int) -> np.ndarray:
        return self.nbr_idx[self.nbr_ptr[i]:self.nbr_ptr[i + 1]]

    def fattened(self, i, factor: float | None = None):
        """Corners of the concentric box with side factor*side (default 1+lambda)."""
        f = 1 + self.lam if factor is None else factor
        i = np.asarray(i)
        half = self.side[i] * f / 2
        c = self.center[i]
        return c - np.asarray(half)[..., None], c + np.asarray(half)[..., None]

    def _build_index(self):
        # per level: sorted integer codes of lattice positions
        self._index = {}
        for k in np.unique(self.level):
            ids = np.flatnonzero(self.level == k)
            keys = np.round(self.lo[ids] / self.side[ids][:, None]).astype(np.int64)
            base = keys.min(axis=0)
            dims = keys.max(axis=0) - base + 1
            codes = np.ravel_multi_index((keys - base).T, dims)
            order = np.argsort(codes)
            self._index[int(k)] = (base, dims, codes[order], ids[order])

    def locate(self, X) -> np.ndarray:
        """Id of the Whitney cube containing each point, -1 if none.

        A point on a shared face goes to the cube whose half-open box holds it.
        """
        Xs = np.atleast_2d(np.asarray(X, float))
        out = np.full(len(Xs), -1, dtype=np.int64)
        for k, (base, dims, codes, ids) in self._index.items():
            todo = np.flatnonzero(out < 0)
            if len(todo) == 0:
                break
            keys = np.floor(Xs[todo] * 2.0 ** k).astype(np.int64) - base
            inside = np.all((keys >= 0) & (keys < dims), axis=1)
            if not inside.any():
                continue
            c = np.ravel_multi_index(keys[inside].T, dims)
            pos = np.clip(np.searchsorted(codes, c), 0, len(codes) - 1)
            hit = codes[pos] == c
            tgt = todo[inside][hit]
            out[tgt] = ids[pos[hit]]
        return out

    def _pairs_within(self, radius, strict: bool = False):
        """Pairs (i < j) with L-inf centre distance <= radius(side_i, side_j).

        Searched level pair by level pair so that the radius is exact per pair.
        """
        trees = {}
        for k in self.levels:
            ids = np.flatnonzero(self.level == k)
            trees[int(k)] = (ids, cKDTree(self.center[ids]))
        A, B = [], []
        ks = sorted(trees)
        for x, ka in enumerate(ks):
            for kb in ks[x:]:
                ia, ta = trees[ka]
                ib, tb = trees[kb]
                r = radius(2.0 ** -ka, 2.0 ** -kb)
                rr = r * (1 - 1e-12) if strict else r * (1 + 1e-12)
                m = ta.sparse_distance_matrix(tb, rr, p=np.inf, output_type="ndarray")
                if len(m) == 0:
                    continue
                i, j = ia[m["i"]], ib[m["j"]]
                if strict:
                    keep = m["v"] < r * (1 - 1e-12)
                    i, j = i[keep], j[keep]
                A.append(np.minimum(i, j))
                B.append(np.maximum(i, j))
        if not A:
            z = np.zeros(0, dtype=np.int64)
            return z, z
        pa = np.unique(np.stack([np.concatenate(A), np.concatenate(B)], axis=1), axis=0)
        pa = pa[pa[:, 0] != pa[:, 1]]
        return pa[:, 0], pa[:, 1]

    def _build_neighbors(self):
        M = len(self.side)
        if M == 0:
            self.nbr_ptr = np.zeros(1, dtype=np.int64)
            self.nbr_idx = np.zeros(0, dtype=np.int64)
            self.complete = np.zeros(0, dtype=bool)
            return
        a, b = self._pairs_within(lambda sa, sb: (sa + sb) / 2)
        src = np.concatenate([a, b])
        dst = np.concatenate([b, a])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        self.nbr_idx = dst
        self.nbr_ptr = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=M))])
        # a cube is complete when its neighbours cover the shell of width side/4 around it
        grow = self.side / 4
        elo, ehi = self.lo - grow[:, None], self.hi + grow[:, None]
        ov = np.prod(np.clip(np.minimum(ehi[src], self.hi[dst]) - np.maximum(elo[src], self.lo[dst]),
                             0, None), axis=1)
        covered = np.bincount(src, weights=ov, minlength=M)
        shell = (1.5 * self.side) ** self.dim - self.side ** self.dim
        self.complete = covered >= shell * (1 - 1e-9)

    def components(self, subset=None) -> np.ndarray:
        """Connected-component label per cube through touching pairs (-1 outside subset)."""
        M = len(self)
        allowed = np.ones(M, bool)
        if subset is not None:
            allowed[:] = False
            allowed[np.asarray(subset, dtype=np.int64)] = True
        src = np.repeat(np.arange(M), np.diff(self.nbr_ptr))
        dst = self.nbr_idx
        keep = allowed[src] & allowed[dst]
        g = coo_matrix((np.ones(keep.sum()), (src[keep], dst[keep])), shape=(M, M))
        _, lab = connected_components(g, directed=False)
        lab = lab.astype(np.int64)
        lab[~allowed] = -1
        return lab


def _root_cells(blo, bhi):
    ext = float((bhi - blo).max())
    k = -int(math.floor(math.log2(ext)))
    s = 2.0 ** -k
    ilo = np.floor(blo / s).astype(np.int64)
    ihi = np.ceil(bhi / s).astype(np.int64)
    grids = np.meshgrid(*[np.arange(a, b) for a, b in zip(ilo, ihi)], indexing="ij")
    keys = np.stack([g.ravel() for g in grids], axis=1)
    return k, keys, (ilo * s, ihi * s)


def _accept_levels(dset, k, keys, k_deepest, clip=None):
    """Top-down dyadic refinement: a cell is accepted when dist(4I, E) >= 4 diam(I),
    otherwise split, down to level k_deepest. With clip=(x, r) only cells meeting
    the open ball B(x, r) are kept at each level."""
    d = keys.shape[1]
    out_lo, out_side, out_level, out_d, out_d4 = [], [], [], [], []
    rt = math.sqrt(d)
    child = np.array(np.meshgrid(*([[0, 1]] * d), indexing="ij")).reshape(d, -1).T
    while len(keys):
        s = 2.0 ** -k
        lo = keys * s
        hi = lo + s
        if clip is not None:
            near = _point_box_dist(clip[0], lo, hi) < clip[1]
            keys, lo, hi = keys[near], lo[near], hi[near]
            if not len(keys):
                break
        d4 = box_distance(dset, lo - 1.5 * s, hi + 1.5 * s)
        ok = d4 >= 4 * rt * s
        if ok.any():
            dI = box_distance(dset, lo[ok], hi[ok])
            out_lo.append(lo[ok])
            out_side.append(np.full(ok.sum(), s))
            out_level.append(np.full(ok.sum(), k))
            out_d.append(dI)
            out_d4.append(d4[ok])
        if k >= k_deepest:
            break
        bad = keys[~ok]
        keys = (2 * bad[:, None, :] + child[None, :, :]).reshape(-1, d)
        k += 1
    if out_lo:
        return (np.concatenate(out_lo), np.concatenate(out_side),
                np.concatenate(out_level).astype(np.int64), np.concatenate(out_d),
                np.concatenate(out_d4))
    z = np.zeros(0)
    return np.zeros((0, d)), z, z.astype(np.int64), z, z


def whitney_cubes_in_ball(decomp: WhitneyDecomposition, x, r: float, k_deepest: int):
    """(lo, side, level) of the Whitney cubes meeting B(x, r) when the same lattice and
    acceptance rule as ``decomp`` are refined to ``k_deepest`` (which may exceed
    decomp.k_deepest). Equals the cubes of decomp meeting the ball when the depths agree."""
    blo, bhi = getattr(decomp, "root_bbox", decomp.bbox)
    k, keys, _ = _root_cells(np.asarray(blo, float), np.asarray(bhi, float))
    x = np.asarray(x, float)
    lo, side, level, dist, _ = _accept_levels(decomp.set, k, keys, k_deepest, clip=(x, r))
    keep = dist <= 40 * math.sqrt(len(x)) * side
    return lo[keep], side[keep], level[keep]


def whitney_level_of(decomp: WhitneyDecomposition, X, k_deepest: int) -> np.ndarray:
    """Level of the Whitney cube containing each X when the lattice and acceptance rule
    of ``decomp`` are refined to ``k_deepest``; -1 outside the cubes (collar or bbox)."""
    blo, bhi = getattr(decomp, "root_bbox", decomp.bbox)
    k0, keys, snapped = _root_cells(np.asarray(blo, float), np.asarray(bhi, float))
    X = np.atleast_2d(np.asarray(X, float))
    d = X.shape[1]
    rt = math.sqrt(d)
    out = np.full(len(X), -1, np.int64)
    inside = np.all((X >= snapped[0]) & (X < snapped[1]), axis=1)
    todo = np.flatnonzero(inside)
    for k in range(k0, k_deepest + 1):
        if not len(todo):
            break
        s = 2.0 ** -k
        lo = np.floor(X[todo] / s) * s
        hi = lo + s
        ok = box_distance(decomp.set, lo - 1.5 * s, hi + 1.5 * s) >= 4 * rt * s
        if ok.any():
            acc = todo[ok]
            good = box_distance(decomp.set, lo[ok], hi[ok]) <= 40 * rt * s
            out[acc[good]] = k
        todo = todo[~ok]
    return out


def default_bbox(dset: DiscreteSet, pad: float = 2.0):
    lo = dset.points.min(axis=0) - pad * dset.diameter
    hi = dset.points.max(axis=0) + pad * dset.diameter
    return lo, hi


def whitney_decompose(dset: DiscreteSet, bbox=None, k_deepest: int | None = None,
                      lam: float = DEFAULT_LAMBDA) -> WhitneyDecomposition:
    if not (0 < lam < 1):
        raise ArtifactError("invalid-parameter", f"lambda={lam} must lie in (0, 1)")
    d = dset.ambient_dim
    emin, emax = dset.points.min(axis=0), dset.points.max(axis=0)
    need_lo, need_hi = emin - 2 * dset.diameter, emax + 2 * dset.diameter
    if bbox is None:
        bbox = (need_lo, need_hi)
    blo, bhi = (np.asarray(b, float) for b in bbox)
    if np.any(blo > need_lo + 1e-12) or np.any(bhi < need_hi - 1e-12):
        raise ArtifactError("invalid-parameter", "bbox must contain the 2*diameter neighbourhood")
    if k_deepest is None:
        k_deepest = int(math.ceil(-math.log2(dset.mesh_scale))) if math.isfinite(dset.mesh_scale) else 8
    k, keys, snapped = _root_cells(blo, bhi)
    if k > k_deepest:
        raise ArtifactError("invalid-parameter", "k_deepest coarser than the bounding box")
    lo, side, level, dist, dist4 = _accept_levels(dset, k, keys, k_deepest)
    rt = math.sqrt(d)
    keep = dist <= 40 * rt * side
    out = WhitneyDecomposition(dset, lo[keep], side[keep], level[keep].astype(np.int64),
                               dist[keep], dist4[keep], snapped, k_deepest, lam)
    out.root_bbox = (blo, bhi)
    return out


def check_whitney(decomp: WhitneyDecomposition, recompute: bool = True) -> dict:
    """Whitney inequalities, neighbour size ratios, and the fattening properties."""
    dset = decomp.set
    diam = decomp.diam
    if recompute:
        dist = box_distance(dset, decomp.lo, decomp.hi)
        lo4, hi4 = decomp.fattened(np.arange(len(decomp)), 4.0)
        dist4 = box_distance(dset, lo4, hi4)
    else:
        dist, dist4 = decomp.dist, decomp.dist4
    wh_ok = bool(np.all((4 * diam <= dist4) & (dist4 <= dist) & (dist <= 40 * diam)))
    src = np.repeat(np.arange(len(decomp)), np.diff(decomp.nbr_ptr))
    dst = decomp.nbr_idx
    ratios = np.unique(decomp.side[dst] / decomp.side[src]) if len(src) else np.zeros(0)
    iff_ok, tau_ok = check_fattening(decomp, decomp.lam, 0.75)
    return dict(whitney=wh_ok, neighbor_ratios=ratios.tolist(), fattening_iff_touching=iff_ok,
                tau_separation=tau_ok, count=len(decomp))


def check_fattening(decomp: WhitneyDecomposition, lam: float, tau: float):
    """(I* meets J* iff I touches J, tau*J misses I* for all distinct I, J)."""
    if len(decomp) == 0:
        return True, True
    ta, tb = decomp.nbr_idx, np.repeat(np.arange(len(decomp)), np.diff(decomp.nbr_ptr))
    touching = set(zip(np.minimum(ta, tb).tolist(), np.maximum(ta, tb).tolist()))
    ma, mb = decomp._pairs_within(lambda sa, sb: (1 + lam) * (sa + sb) / 2)
    meeting = set(zip(ma.tolist(), mb.tolist()))
    iff_ok = meeting == touching
    # tau*J meets I* iff the L-inf gap is below (tau*sJ + (1+lam)*sI)/2, both orders
    ok = True
    for f in (lambda sa, sb: (tau * sb + (1 + lam) * sa) / 2, lambda sa, sb: (tau * sa + (1 + lam) * sb) / 2):
        pa, pb = decomp._pairs_within(f, strict=True)
        if len(pa):
            ok = False
    return iff_ok, ok


def corkscrew_point(decomp: WhitneyDecomposition, x, r: float, cubes=None):
    """Interior point of B(x, r) far from the set, taken at a Whitney cube centre.

    Among Whitney cubes contained in B(x, r) (optionally restricted to ``cubes``)
    picks the centre X maximising c = min(delta(X), r - |X - x|) / r, so that
    B(X, c r) lies in B(x, r) minus the set. Returns (X, c, cube id).
    """
    x = np.asarray(x, float)
    if r <= 0:
        raise ArtifactError("invalid-parameter", "r must be positive")
    cand = np.array(decomp.center_tree.query_ball_point(x, r), dtype=np.int64)
    if cubes is not None and len(cand):
        cand = cand[np.isin(cand, np.asarray(cubes))]
    if len(cand):
        far = np.maximum(np.abs(x - decomp.lo[cand]), np.abs(x - decomp.hi[cand]))
        cand = cand[np.sqrt((far ** 2).sum(axis=1)) <= r * (1 + 1e-12)]
    if len(cand) == 0:
        raise ArtifactError("no-corkscrew", f"no Whitney cube inside B(x, {r})")
    X = decomp.center[cand]
    dX = delta(decomp.set, X)
    c = np.minimum(dX, r - np.linalg.norm(X - x, axis=1)) / r
    order = np.lexsort((cand, -decomp.side[cand], -c))
    best = cand[order[0]]
    return decomp.center[best].copy(), float(c[order[0]]), int(best)


@dataclass
class HarnackChain:
    cubes: list
    centers: np.ndarray
    radii: np.ndarray

    def __len__(self):
        return len(self.cubes)


def chain_balls(decomp: WhitneyDecomposition, path) -> HarnackChain:
    path = list(int(p) for p in path)
    # circumscribed ball of I*: touching cubes share a point, so consecutive balls meet
    radii = (1 + decomp.lam) * decomp.diam[path] / 2
    return HarnackChain(path, decomp.center[path].copy(), radii)


def harnack_chain(decomp: WhitneyDecomposition, X, Xp, max_balls: float = math.inf,
                  cubes=None) -> HarnackChain:
    """Fewest-hop chain of Whitney balls from X to X'."""
    a, b = decomp.locate(np.vstack([X, Xp]))
    if a < 0 or b < 0:
        raise ArtifactError("invalid-start", "endpoint not inside any Whitney cube")
    allowed = None
    if cubes is not None:
        allowed = np.zeros(len(decomp), bool)
        allowed[np.asarray(cubes, dtype=np.int64)] = True
        if not (allowed[a] and allowed[b]):
            raise ArtifactError("invalid-start", "endpoint outside the cube subset")
    prev = {int(a): -1}
    dq = deque([int(a)])
    while dq and b not in prev:
        u = dq.popleft()
        for v in decomp.neighbors(u):
            v = int(v)
            if v not in prev and (allowed is None or allowed[v]):
                prev[v] = u
                dq.append(v)
    if int(b) not in prev:
        raise ArtifactError("not-connected", "endpoints lie in different components")
    path = [int(b)]
    while prev[path[-1]] >= 0:
        path.append(prev[path[-1]])
    path.reverse()
    if len(path) > max_balls:
        raise ArtifactError("chain-too-long", f"{len(path)} balls > cap {max_balls}")
    return chain_balls(decomp, path)


def chain_sandwich(decomp: WhitneyDecomposition, chain: HarnackChain) -> float:
    """Smallest C with diam(B)/C <= dist(B, E) <= C diam(B) over the chain balls."""
    dist = delta(decomp.set, chain.centers) - chain.radii
    diam = 2 * chain.radii
    if np.any(dist <= 0):
        return math.inf
    return float(np.max(np.maximum(diam / dist, dist / diam)))


def dump_whitney(decomp: WhitneyDecomposition, path) -> None:
    with open(path, "w") as fh:
        for lo, s, k in zip(decomp.lo, decomp.side, decomp.level):
            fh.write(" ".join(repr(float(v)) for v in lo) + f" {float(s)!r} {int(k)}\n")
