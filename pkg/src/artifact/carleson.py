"""Carleson functionals: the square-function measure |grad^2 S1|^2 delta dX over
balls, the discrete coefficients alpha_Q with their packing measure, and the
Green-weighted Carleson box functional."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .complement import (WhitneyDecomposition, _point_box_dist, whitney_cubes_in_ball,
                         whitney_level_of)
from .errors import ArtifactError
from .geometry import DiscreteSet
from .potentials import hessian_sq_norm
from .sawtooth import FAT, Assignment, SawtoothDomain, carleson_box, outer_ball_const, sawtooth_region


@dataclass
class CarlesonReport:
    values: np.ndarray
    keys: list
    nodes_per_cube: int
    stderr: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def sup(self) -> float:
        return float(self.values.max()) if len(self.values) else 0.0

    @property
    def argmax(self):
        return self.keys[int(np.argmax(self.values))] if len(self.values) else None


def _offsets(m: int, d: int) -> np.ndarray:
    t = (np.arange(m) + 0.5) / m
    g = np.meshgrid(*([t] * d), indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


class CubeNodes:
    """Tensor midpoint nodes of boxes c + factor*(I - c), one row of m^d nodes per
    Whitney cube, with a lazily filled per-cube cache of integrand values."""

    def __init__(self, decomp: WhitneyDecomposition, m: int, fn: Callable, factor: float = 1.0):
        if m < 1:
            raise ArtifactError("invalid-parameter", "nodes_per_cube must be >= 1")
        self.decomp = decomp
        self.m = int(m)
        self.fn = fn
        self.factor = float(factor)
        self.off = _offsets(self.m, decomp.dim)
        self.vals: np.ndarray | None = None
        self.done = np.zeros(len(decomp), bool)
        self.vol = (self.factor * decomp.side) ** decomp.dim / len(self.off)

    def nodes(self, ids) -> np.ndarray:
        ids = np.asarray(ids, np.int64)
        s = self.factor * self.decomp.side[ids]
        lo = self.decomp.center[ids] - s[:, None] / 2
        return lo[:, None, :] + s[:, None, None] * self.off[None, :, :]

    def values(self, ids) -> np.ndarray:
        """(len(ids), m^d) node values, or (len(ids), m^d, B) when fn returns B
        batch estimates per node as a (B, len(X)) array."""
        ids = np.asarray(ids, np.int64)
        todo = np.unique(ids[~self.done[ids]])
        if len(todo):
            X = self.nodes(todo).reshape(-1, self.decomp.dim)
            v = np.asarray(self.fn(X), float)
            if v.ndim == 1:
                v = v[None, :]
            v = v.T.reshape(len(todo), len(self.off), -1)
            if self.vals is None:
                self.vals = np.zeros((len(self.decomp), len(self.off), v.shape[2]))
            self.vals[todo] = v
            self.done[todo] = True
        if self.vals is None:
            return np.zeros((0, len(self.off)))
        out = self.vals[ids]
        return out[..., 0] if out.shape[2] == 1 else out


def ur_integrand(dset: DiscreteSet) -> Callable:
    """X -> |grad^2 S1(X)|^2 delta(X); zero at nodes closer than 2h to the set,
    where the discrete potential stops tracking the continuum one."""
    floor = 2 * dset.h if math.isfinite(dset.h) else 0.0

    def fn(X):
        dist, _ = dset.tree.query(X)
        out = np.zeros(len(X))
        ok = dist >= floor
        if ok.any():
            out[ok] = hessian_sq_norm(dset, 1.0, X[ok], check=False) * dist[ok]
        return out
    return fn


class _LevelTrees:
    def __init__(self, decomp: WhitneyDecomposition):
        self.decomp = decomp
        self.levels = np.unique(decomp.level)
        self.ids = [np.flatnonzero(decomp.level == k) for k in self.levels]
        self.trees = [cKDTree(decomp.center[i]) for i in self.ids]

    def meeting_ball(self, x, r: float) -> np.ndarray:
        dec = self.decomp
        out = []
        for k, ids, tr in zip(self.levels, self.ids, self.trees):
            half = 0.5 * 2.0 ** -float(k) * math.sqrt(dec.dim)
            cand = ids[tr.query_ball_point(x, r + half)]
            if len(cand):
                lo = dec.lo[cand]
                hi = lo + dec.side[cand][:, None]
                out.append(cand[_point_box_dist(np.asarray(x, float), lo, hi) < r])
        return np.sort(np.concatenate(out)) if out else np.zeros(0, np.int64)


class _KeyedNodes:
    """Node values of locally generated Whitney cubes, cached by (level, lattice index)."""

    def __init__(self, m: int, d: int, fn: Callable):
        self.m = int(m)
        self.off = _offsets(self.m, d)
        self.fn = fn
        self.store: dict = {}

    def values(self, lo, side, level) -> np.ndarray:
        ints = np.round(lo / side[:, None]).astype(np.int64)
        keys = [row.tobytes() for row in np.column_stack([level, ints])]
        miss = [i for i, k in enumerate(keys) if k not in self.store]
        if miss:
            miss = np.array(miss)
            X = lo[miss][:, None, :] + side[miss][:, None, None] * self.off[None]
            v = np.asarray(self.fn(X.reshape(-1, lo.shape[1])), float).reshape(len(miss), -1)
            for i, row in zip(miss, v):
                self.store[keys[i]] = row
        return np.array([self.store[k] for k in keys]).reshape(len(keys), -1)


def sample_balls(dset: DiscreteSet, count: int = 64, r_min: float | None = None,
                 r_max: float | None = None, seed: int = 0) -> list:
    """Centres at random set points, radii log-uniform in [r_min, r_max]
    (default [10h, diameter/2])."""
    rng = np.random.default_rng(seed)
    r_min = 10 * dset.h if r_min is None else r_min
    r_max = dset.diameter / 2 if r_max is None else r_max
    if not (0 < r_min <= r_max):
        raise ArtifactError("invalid-parameter", f"bad radius range [{r_min}, {r_max}]")
    idx = rng.integers(0, len(dset.points), count)
    rad = np.exp(rng.uniform(math.log(r_min), math.log(r_max), count))
    return [(dset.points[i].copy(), float(r)) for i, r in zip(idx, rad)]


def ur_carleson_norm(dset: DiscreteSet, decomp: WhitneyDecomposition, balls,
                     nodes_per_cube: int = 2, depth: int | None = None,
                     samples: int | None = None, seed: int = 0, cache=None) -> CarlesonReport:
    """r^{-n} times the quadrature of |grad^2 S1|^2 delta over each ball, summed
    over the nodes inside the ball of every Whitney cube meeting it.

    depth=None uses the cubes of ``decomp``. An integer depth j refines the same
    lattice inside each ball down to cubes of side >= 2^{-j} r (rounded to the
    dyadic level), so every ball gets the same relative resolution and a bounded
    node count whatever its radius.

    samples=S replaces the tensor nodes by S seeded uniform points in each ball,
    each kept when it lies in a Whitney cube of the refined lattice; the value is
    then an unbiased estimate of the same sum and ``stderr`` is filled in.
    """
    if samples is not None:
        return _ur_sampled(dset, decomp, balls, depth, int(samples), seed)
    if cache is None:
        cache = (CubeNodes(decomp, nodes_per_cube, ur_integrand(dset)) if depth is None
                 else _KeyedNodes(nodes_per_cube, decomp.dim, ur_integrand(dset)))
    trees = _LevelTrees(decomp) if depth is None else None
    n = dset.boundary_dim
    vals = np.zeros(len(balls))
    for b, (x, r) in enumerate(balls):
        x = np.asarray(x, float)
        _check_ball(dset, x, r)
        if depth is None:
            ids = trees.meeting_ball(x, r)
            if not len(ids):
                continue
            v = cache.values(ids)
            X = cache.nodes(ids)
            vol = cache.vol[ids]
        else:
            kmax = int(math.ceil(-math.log2(r))) + int(depth)
            lo, side, level = whitney_cubes_in_ball(decomp, x, r, kmax)
            if not len(lo):
                continue
            v = cache.values(lo, side, level)
            X = lo[:, None, :] + side[:, None, None] * cache.off[None]
            vol = side ** decomp.dim / len(cache.off)
        inside = ((X - x) ** 2).sum(axis=2) < r * r
        vals[b] = math.fsum((v * inside * vol[:, None]).ravel()) / r ** n
    return CarlesonReport(vals, [(np.asarray(x, float), float(r)) for x, r in balls],
                          cache.m, extra={"k_deepest": decomp.k_deepest, "depth": depth})


def _check_ball(dset, x, r):
    if dset.tree.query(x)[0] > 1e-9 * max(dset.diameter, 1.0):
        raise ArtifactError("invalid-parameter", "ball centre is not a set point")
    if r > dset.diameter:
        raise ArtifactError("invalid-parameter", f"radius {r} exceeds the diameter")
    floor = 3 * dset.h if math.isfinite(dset.h) else 0.0
    if r < floor:
        raise ArtifactError("scale-below-resolution", f"radius {r} below 3h = {floor}")


def _unit_ball_samples(rng, count: int, d: int) -> np.ndarray:
    g = rng.standard_normal((count, d))
    g /= np.linalg.norm(g, axis=1)[:, None]
    return g * rng.uniform(size=count)[:, None] ** (1.0 / d)


def _ur_sampled(dset, decomp, balls, depth, samples, seed) -> CarlesonReport:
    if samples < 2:
        raise ArtifactError("invalid-parameter", "need at least 2 samples per ball")
    fn = ur_integrand(dset)
    n, d = dset.boundary_dim, decomp.dim
    vals = np.zeros(len(balls))
    errs = np.zeros(len(balls))
    vol_unit = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
    for b, (x, r) in enumerate(balls):
        x = np.asarray(x, float)
        _check_ball(dset, x, r)
        kmax = decomp.k_deepest if depth is None else int(math.ceil(-math.log2(r))) + int(depth)
        rng = np.random.default_rng([seed, b])
        X = x + r * _unit_ball_samples(rng, samples, d)
        f = np.zeros(samples)
        hit = whitney_level_of(decomp, X, kmax) >= 0
        if hit.any():
            f[hit] = fn(X[hit])
        scale = vol_unit * r ** d / r ** n
        vals[b] = scale * f.mean()
        errs[b] = scale * f.std(ddof=1) / math.sqrt(samples)
    return CarlesonReport(vals, [(np.asarray(x, float), float(r)) for x, r in balls], 0,
                          stderr=errs, extra={"k_deepest": decomp.k_deepest, "depth": depth,
                                              "samples": samples})


def write_ball_csv(path, report: CarlesonReport) -> None:
    d = len(report.keys[0][0]) if report.keys else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ball_index"] + [f"x{i + 1}" for i in range(d)] + ["r", "value"])
        for i, ((x, r), v) in enumerate(zip(report.keys, report.values)):
            w.writerow([i] + [repr(float(c)) for c in x] + [repr(r), repr(float(v))])


def write_cube_csv(path, report: CarlesonReport) -> None:
    err = report.stderr if report.stderr is not None else np.zeros(len(report.values))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cube_id", "alpha", "stderr"])
        for q, v, e in zip(report.keys, report.values, err):
            w.writerow([int(q), repr(float(v)), repr(float(e))])


# ---- Green-weighted functionals -------------------------------------------------

def hessian_field(dset: DiscreteSet) -> Callable:
    """X -> |grad^2 S1(X)|^2 (no standoff check: Whitney nodes are at distance >= 4 diam)."""
    return lambda X: hessian_sq_norm(dset, 1.0, X, check=False)


def green_weighted(dset: DiscreteSet, green: Callable) -> Callable:
    """X -> (B, len(X)) batch estimates of |grad^2 S1(X)|^2 G(X, X0)."""
    def fn(X):
        g = np.atleast_2d(np.asarray(green(X), float))
        return hessian_sq_norm(dset, 1.0, X, check=False)[None, :] * g
    return fn


def _cover_count(dom: SawtoothDomain, X) -> np.ndarray:
    """Number of the (open) boxes of dom containing each row of X."""
    cnt = np.zeros(len(X), np.int64)
    for k, (ids, tree) in dom._level_trees().items():
        r = dom.factor * 2.0 ** -k / 2
        cnt += tree.query_ball_point(X, r * (1 - 1e-12), p=np.inf, return_length=True)
    return cnt


def union_integral(dom: SawtoothDomain, cache: CubeNodes, mask: SawtoothDomain | None = None):
    """Quadrature of the cached field over the open union of dom's boxes (optionally
    intersected with ``mask``): each box contributes its tensor nodes, and a node
    covered by c boxes of the union gets weight vol/c. Returns the per-batch totals."""
    if abs(cache.factor - dom.factor) > 1e-12:
        raise ArtifactError("invalid-parameter", "cache and domain use different box factors")
    if dom.empty:
        return np.zeros(1)
    ids = dom.cubes
    v = cache.values(ids)
    if v.ndim == 2:
        v = v[..., None]
    X = cache.nodes(ids).reshape(-1, cache.decomp.dim)
    w = np.repeat(cache.vol[ids], len(cache.off)) / np.maximum(_cover_count(dom, X), 1)
    if mask is not None:
        w = w * (mask.contains(X) if not mask.empty else 0.0)
    v = v.reshape(len(X), -1)
    return np.array([math.fsum(w * v[:, b]) for b in range(v.shape[1])])


def _mean_err(batches: np.ndarray):
    if len(batches) < 2:
        return float(batches[0]), 0.0
    return float(batches.mean()), float(batches.std(ddof=1) / math.sqrt(len(batches)))


def check_pole(asg: Assignment, q0: int, X0, kprime: float | None = None) -> float:
    """Raise unless X0 lies outside B**_{Q0} = B(x_{Q0}, K' l(Q0)); returns K'."""
    kp = outer_ball_const(asg, q0) if kprime is None else float(kprime)
    Q0 = asg.grid.check_id(q0)
    x0 = asg.grid.set.points[Q0.center]
    if np.linalg.norm(np.asarray(X0, float) - x0) < kp * Q0.length:
        raise ArtifactError("invalid-parameter", "pole lies inside the outer ball of Q0")
    return kp


def alpha_coefficients(asg: Assignment, qs, X0, green: Callable, nodes: int = 1,
                       stopped=(), q0: int | None = None, kprime: float | None = None,
                       cache: CubeNodes | None = None) -> CarlesonReport:
    """alpha_Q = integral of |grad^2 S1|^2 G(., X0) over U_Q^fat for each Q in qs.

    ``green`` maps an (m, d) array to (B, m) independent batch estimates of G(X, X0)
    (B = 1 for an exact formula); stderr is the batch standard error. Cubes inside a
    member of ``stopped`` get alpha = 0. With q0 given, X0 must lie outside B**_{Q0}.
    """
    if q0 is not None:
        check_pole(asg, q0, X0, kprime)
    g = asg.grid
    if cache is None:
        cache = CubeNodes(asg.decomp, nodes, green_weighted(asg.decomp.set, green), FAT)
    stop = [int(f) for f in stopped]
    qs = [int(q) for q in qs]
    vals = np.zeros(len(qs))
    errs = np.zeros(len(qs))
    for i, q in enumerate(qs):
        g.check_id(q)
        if any(g.contains(f, q) for f in stop):
            continue
        dom = SawtoothDomain("U_Q^fat", asg.decomp, asg[q].cubes, FAT)
        vals[i], errs[i] = _mean_err(union_integral(dom, cache))
    return CarlesonReport(vals, qs, cache.m, stderr=errs)


def _masses(mu):
    mass = np.asarray(getattr(mu, "mass", mu), float)
    err = getattr(mu, "stderr", None)
    return mass, (np.zeros_like(mass) if err is None else np.asarray(err, float))


def packing_measure(grid, alphas: dict, family) -> float:
    """m(D') = sum of alpha_Q over Q in D' (correctly rounded)."""
    return math.fsum(float(alphas.get(int(q), 0.0)) for q in family)


def discrete_carleson_sup(grid, alphas, mu, q0: int) -> float:
    """sup over Q in D_{Q0} of m(D_Q)/mu(Q)."""
    if isinstance(alphas, CarlesonReport):
        alphas = dict(zip(alphas.keys, alphas.values))
    alphas = {int(k): float(v) for k, v in alphas.items()}
    mass, _ = _masses(mu)
    best = 0.0
    for q in grid.descendants(int(q0)):
        m = packing_measure(grid, alphas, grid.descendants(q))
        if m <= 0:
            continue
        if mass[q] <= 0:
            raise ArtifactError("measure-degenerate", f"mu(Q)=0 under positive packing mass at cube {q}")
        best = max(best, m / mass[q])
    return best


def green_carleson_sup(asg: Assignment, F1, q0: int, X0, green: Callable, omega,
                       nodes: int = 1, cache: CubeNodes | None = None,
                       cubes=None) -> CarlesonReport:
    """Over Q in D_{Q0} (or the given ``cubes``): (1/omega(Q)) times the integral of
    |grad^2 S1|^2 G(., X0) over T_Q^fat intersected with Omega_{F1}^fat."""
    g = asg.grid
    g.check_id(q0)
    if cache is None:
        cache = CubeNodes(asg.decomp, nodes, green_weighted(asg.decomp.set, green), FAT)
    saw = sawtooth_region(asg, list(F1), q=q0, variant="fat")
    mass, merr = _masses(omega)
    qs = [int(q) for q in (g.descendants(int(q0)) if cubes is None else cubes)]
    vals = np.zeros(len(qs))
    errs = np.zeros(len(qs))
    for i, q in enumerate(qs):
        if saw.empty:
            break
        box = carleson_box(asg, q, "fat")
        v, e = _mean_err(union_integral(box, cache, mask=saw))
        if v == 0.0:
            continue
        if mass[q] <= 0 or mass[q] <= 2 * merr[q]:
            raise ArtifactError("measure-degenerate", f"harmonic measure of cube {q} consistent with 0")
        vals[i] = v / mass[q]
        rel = math.hypot(e / v if v else 0.0, merr[q] / mass[q])
        errs[i] = abs(vals[i]) * rel
    return CarlesonReport(vals, qs, cache.m, stderr=errs)
