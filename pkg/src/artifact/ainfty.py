"""Measures on dyadic cubes, stopping-time projections, and dyadic A-infinity
diagnostics. Arithmetic is generic: with fractions.Fraction masses every
operation here is exact."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .dyadic import DyadicGrid, dyadic_maximal
from .errors import ArtifactError


def _sum(xs):
    xs = list(xs)
    if not xs:
        return 0
    if any(isinstance(x, Fraction) for x in xs):
        return sum(xs, Fraction(0))
    return math.fsum(xs)


class CubeMeasure:
    """mass[q] for every cube q of a grid; mass(Q) equals the sum over the children."""

    def __init__(self, grid: DyadicGrid, mass, stderr=None, check: bool = True):
        self.grid = grid
        self.mass = list(mass)
        if len(self.mass) != len(grid):
            raise ArtifactError("invalid-measure", "one mass per cube required")
        if any(m < 0 for m in self.mass):
            raise ArtifactError("invalid-measure", "negative mass")
        self.stderr = None if stderr is None else np.asarray(stderr, float)
        if check:
            self.check_additive()

    def __getitem__(self, q):
        return self.mass[int(q)]

    def check_additive(self, rtol: float = 1e-10) -> None:
        for c in self.grid.cubes:
            if not c.children:
                continue
            s = _sum(self.mass[k] for k in c.children)
            m = self.mass[c.id]
            if isinstance(s, Fraction) or isinstance(m, Fraction):
                bad = s != m
            else:
                bad = abs(s - m) > rtol * max(abs(m), abs(s), 1e-300)
            if bad:
                raise ArtifactError("invalid-measure", f"mass of cube {c.id} is not the sum of its children")

    def of(self, cubes):
        """Mass of a union of cubes (overlaps counted once)."""
        return _sum(self.mass[q] for q in self.grid.maximal_cubes(cubes))

    def as_array(self) -> np.ndarray:
        return np.array([float(m) for m in self.mass])


def leaves_below(grid: DyadicGrid, q: int) -> list[int]:
    return [p for p in grid.descendants(int(q)) if not grid.cubes[p].children]


def from_leaves(grid: DyadicGrid, leaf_mass: dict) -> CubeMeasure:
    """Cube measure from masses on the childless cubes, summed up the tree."""
    mass = [None] * len(grid)
    for k in sorted(grid.by_level, reverse=True):
        for q in grid.by_level[k]:
            c = grid.cubes[q]
            mass[q] = _sum(mass[j] for j in c.children) if c.children else leaf_mass.get(q, 0)
    return CubeMeasure(grid, mass, check=False)


def restrict_to_cubes(grid: DyadicGrid, point_mass, stderr_walks: int | None = None) -> CubeMeasure:
    """Cube measure from masses on the set points (each cube: correctly rounded sum over
    its members). With ``stderr_walks`` the masses are hit fractions from that many
    walks and each cube gets the binomial standard error."""
    pm = np.asarray(point_mass, float)
    if len(pm) != len(grid.set.points):
        raise ArtifactError("invalid-measure", "one mass per set point required")
    if np.any(pm < 0):
        raise ArtifactError("invalid-measure", "negative mass")
    mass = [math.fsum(pm[c.members]) for c in grid.cubes]
    err = None
    if stderr_walks is not None:
        p = np.clip(np.array(mass), 0, 1)
        err = np.sqrt(p * (1 - p) / stderr_walks)
    return CubeMeasure(grid, mass, err)


def sigma_measure(grid: DyadicGrid) -> CubeMeasure:
    return restrict_to_cubes(grid, grid.set.weights)


def hits_to_points(dset, feet) -> np.ndarray:
    """Fraction of kill feet whose nearest set point is each point."""
    _, idx = dset.tree.query(np.atleast_2d(feet))
    return np.bincount(idx, minlength=len(dset.points)) / max(len(idx), 1)


# ---- projections ----------------------------------------------------------------

def _meet(grid, a: int, b: int):
    if grid.contains(b, a):
        return a
    if grid.contains(a, b):
        return b
    return None


def project(grid: DyadicGrid, F, mu: CubeMeasure, nu: CubeMeasure, A) -> float:
    """P_F^nu mu(A) = mu(A minus the union of F) + sum_j nu(A cap Q_j)/nu(Q_j) mu(Q_j),
    for A a union of cubes, computed in the cube algebra."""
    fam = grid.check_disjoint_family(F)
    A = grid.maximal_cubes(A)
    outside = []
    for a in A:
        if any(grid.contains(f, a) for f in fam):
            continue
        inner = [f for f in fam if grid.contains(a, f)]
        outside.append(mu[a] - _sum(mu[f] for f in inner))
    total = [_sum(outside)]
    for f in fam:
        parts = [p for p in (_meet(grid, a, f) for a in A) if p is not None]
        if not parts:
            continue
        if nu[f] == 0:
            if mu[f] > 0:
                raise ArtifactError("measure-degenerate", f"nu vanishes on stopped cube {f} with mu > 0")
            continue
        total.append(_sum(nu[p] for p in parts) / nu[f] * mu[f])
    return _sum(total)


def projected(grid: DyadicGrid, F, mu: CubeMeasure, nu: CubeMeasure) -> CubeMeasure:
    """The measure P_F^nu mu as a cube measure."""
    return CubeMeasure(grid, [project(grid, F, mu, nu, [q]) for q in range(len(grid))], check=False)


# ---- stopping families -----------------------------------------------------------

@dataclass
class StoppingResult:
    family: list
    bad_points: np.ndarray
    contact_fraction: float
    witnesses: dict = field(default_factory=dict)


def stopping_family(grid: DyadicGrid, q0: int, values, M: float) -> StoppingResult:
    """O0 = {x in Q0 : dyadic maximal function of values > M}; F0 its maximal cubes."""
    root = grid.check_id(q0)
    values = np.asarray(values, float)
    if np.any(values < 0):
        raise ArtifactError("invalid-parameter", "values must be nonnegative")
    mem = root.members
    mx = dyadic_maximal(grid, q0, values)
    bad = mem[mx > M]
    w = grid.set.weights
    cand = []
    for k in sorted(grid.by_level):
        for q in grid.by_level[k]:
            if not grid.contains(int(q0), q):
                continue
            if any(grid.contains(f, q) for f in cand):
                continue
            m = grid.cubes[q].members
            if math.fsum(values[m] * w[m]) / math.fsum(w[m]) > M:
                cand.append(q)
    fam = sorted(cand)
    covered = np.sort(grid.union_members(fam)) if fam else np.zeros(0, np.int64)
    if not np.array_equal(covered, np.sort(bad)):
        raise ArtifactError("internal-invariant", "stopping family does not cover the bad set exactly")
    good = np.setdiff1d(mem, bad)
    contact = math.fsum(w[good]) / math.fsum(w[mem])
    wit = {}
    for q in grid.sawtooth_cubes(fam, root=int(q0)):
        wit[q] = np.setdiff1d(grid.cubes[q].members, bad)
    return StoppingResult(fam, bad, contact, wit)


def chebyshev_fit(Ms, contact) -> dict:
    """Fit 1 - contact = C / M^2 by least squares. Returns the fitted C, the relative
    residual (0 when every bad fraction is 0), and the envelope C making the bound
    contact >= 1 - C/M^2 hold at every M."""
    x = 1.0 / np.asarray(Ms, float) ** 2
    y = 1.0 - np.asarray(contact, float)
    C = float(x @ y / (x @ x))
    ny = float(np.linalg.norm(y))
    res = float(np.linalg.norm(y - C * x)) / ny if ny > 0 else 0.0
    return {"C": C, "residual": res, "C_envelope": float(np.max(y / x))}


def augment_family(grid: DyadicGrid, q0: int, F0, radius: float, Nfrak: int = 4,
                   tau: float = 8.0) -> list:
    """F1 = F0 plus the maximal cubes Q with Q disjoint from Q0 whose N-fold ancestor
    meets tau * B(x_{Q0}, radius), where radius is the B** radius of Q0."""
    if Nfrak < 1 or tau < 1:
        raise ArtifactError("invalid-parameter", "Nfrak >= 1 and tau >= 1 required")
    Q0 = grid.check_id(q0)
    x0 = grid.set.points[Q0.center]
    R = tau * radius
    pts = grid.set.points
    near = np.sqrt(((pts - x0) ** 2).sum(axis=1)) < R
    ext = []
    for q, c in enumerate(grid.cubes):
        if grid.contains(int(q0), q) or grid.contains(q, int(q0)):
            continue
        anc = grid.ancestor(q, max(grid.k_min, c.level - Nfrak))
        if near[grid.cubes[anc].members].any():
            ext.append(q)
    F1 = sorted(set(int(f) for f in F0) | set(grid.maximal_cubes(ext)))
    try:
        grid.check_disjoint_family(F1)
    except ArtifactError as e:
        raise ArtifactError("internal-invariant", f"augmented family overlaps: {e}") from None
    return F1


# ---- A-infinity diagnostics ---------------------------------------------------------

THETAS = (1.0, 0.5, 0.25)


@dataclass
class AinftyReport:
    constants: dict
    theta_fit: float | None
    C_fit: float
    worst_pair: tuple | None
    samples: int
    rows: list = field(default_factory=list)


def _random_union(grid, q, rng):
    """A nonempty union of cubes at one random level strictly below q (None for leaves)."""
    lv = grid.cubes[q].level
    levels = [k for k in grid.by_level if k > lv]
    if not levels:
        return None
    k = int(rng.choice(levels))
    cubes = [p for p in grid.descendants(q) if grid.cubes[p].level == k]
    take = rng.random(len(cubes)) < rng.uniform(0.05, 0.95)
    if not take.any():
        take[rng.integers(len(cubes))] = True
    return [cubes[i] for i in np.flatnonzero(take)]


def ainfty_dyadic_test(mu: CubeMeasure, nu: CubeMeasure, q0: int, subsets_per_cube: int = 8,
                       seed: int = 0) -> AinftyReport:
    """Envelope constants C_theta = max mu(F)/mu(Q) / (nu(F)/nu(Q))^theta over sampled
    cubes Q inside Q0 and cube unions F inside Q."""
    g = mu.grid
    if float(mu[q0]) <= 0 or float(nu[q0]) <= 0:
        raise ArtifactError("measure-degenerate", "measures must be positive on Q0")
    rng = np.random.default_rng(seed)
    pts = []
    for q in g.descendants(int(q0)):
        mq, nq = float(mu[q]), float(nu[q])
        if mq <= 0:
            continue
        for _ in range(subsets_per_cube):
            F = _random_union(g, q, rng)
            if F is None:
                break
            a = float(mu.of(F)) / mq
            b = float(nu.of(F)) / nq if nq > 0 else math.inf
            pts.append((q, tuple(F), a, b))
    consts, worst = {}, {}
    for th in THETAS:
        best, arg = 0.0, None
        for p in pts:
            q, F, a, b = p
            if a == 0:
                v = 0.0
            elif b == 0 or not math.isfinite(b):
                v = math.inf
            else:
                v = a / b ** th
            if arg is None or v > best:
                best, arg = v, p
        consts[th], worst[th] = best, arg
    fit = next((th for th in THETAS if math.isfinite(consts[th])), None)
    rows = [("ainfty", int(q0), th, consts[th]) for th in THETAS]
    return AinftyReport(consts, fit, consts[fit] if fit is not None else math.inf,
                        worst[fit] if fit is not None else None, len(pts), rows)


def dyadic_doubling(mu: CubeMeasure, q0: int) -> float:
    """min over Q in D_{Q0} with mu(Q) > 0 of min_child mu(child)/mu(Q) (1 when no Q has children)."""
    g = mu.grid
    best = 1.0
    for q in g.descendants(int(q0)):
        kids = g[q].children
        m = float(mu[q])
        if kids and m > 0:
            best = min(best, min(float(mu[c]) for c in kids) / m)
    return best


def _large_union(grid, q0, nu, eta0, rng):
    """Q0 minus a random set of cubes at one level, removed while nu(removed) < eta0 nu(Q0)."""
    lv = grid.cubes[q0].level
    levels = [k for k in grid.by_level if k > lv]
    if not levels:
        return [q0]
    k = int(rng.choice(levels))
    cubes = [p for p in grid.descendants(q0) if grid.cubes[p].level == k]
    order = rng.permutation(len(cubes))
    stop = rng.integers(0, len(cubes) + 1)
    budget = eta0 * float(nu[q0])
    removed, used = set(), 0.0
    for i in order[:stop]:
        m = float(nu[cubes[i]])
        if used + m >= budget:
            continue
        removed.add(i)
        used += m
    return [cubes[i] for i in range(len(cubes)) if i not in removed]


def bennewitz_lewis_test(mu: CubeMeasure, nu: CubeMeasure, q0: int, eta0: float,
                         samples: int = 200, seed: int = 0, floor: float = 0.0):
    """(c0_observed, pass): min mu(A)/mu(Q0) over sampled cube unions A in Q0 with
    nu(A) > (1 - eta0) nu(Q0)."""
    if not 0 < eta0 < 1:
        raise ArtifactError("invalid-parameter", "eta0 must lie in (0, 1)")
    g = mu.grid
    if float(mu[q0]) <= 0 or float(nu[q0]) <= 0:
        raise ArtifactError("measure-degenerate", "measures must be positive on Q0")
    rng = np.random.default_rng(seed)
    thr = (1 - eta0) * float(nu[q0])
    c0 = math.inf
    for _ in range(samples):
        A = _large_union(g, int(q0), nu, eta0, rng)
        if float(nu.of(A)) <= thr:
            continue
        c0 = min(c0, float(mu.of(A)) / float(mu[q0]))
    if not math.isfinite(c0):
        raise ArtifactError("inconclusive", "no sampled set met the nu threshold")
    return c0, (c0 > floor) if floor == 0 else (c0 >= floor)


def _sawtooth_mass(grid, alphas, F, q):
    return _sum(alphas.get(p, 0.0) for p in grid.sawtooth_cubes(F, root=q))


def small_packing(grid, q0, alphas: dict, omega0: CubeMeasure, F, gamma: float) -> bool:
    """m(D_{F,Q'})/omega0(Q') <= gamma for every Q' in D_{F,Q0}."""
    for q in grid.sawtooth_cubes(F, root=int(q0)):
        m = float(_sawtooth_mass(grid, alphas, F, q))
        w = float(omega0[q])
        if m > gamma * w or (w == 0 and m > 0):
            return False
    return True


def extrapolation_check(grid: DyadicGrid, q0: int, alphas: dict, omega0: CubeMeasure,
                        sigma: CubeMeasure, gamma: float, families, eps=(0.5, 0.25),
                        samples: int = 200, seed: int = 0) -> dict:
    """Instance check: among families F obeying the small-packing hypothesis,
    omega0-ratio >= eps must force a P_F^{omega0} sigma ratio >= 1/C_eps (hypothesis);
    then sigma-ratio >= 1/C0 on the same samples (conclusion)."""
    if any(v < 0 for v in alphas.values()):
        raise ArtifactError("invalid-measure", "alpha masses must be nonnegative")
    rng = np.random.default_rng(seed)
    used, rejected = [], []
    for F in families:
        (used if small_packing(grid, q0, alphas, omega0, F, gamma) else rejected).append(list(F))
    probes = []
    for _ in range(samples):
        q = int(rng.choice(grid.descendants(int(q0))))
        F = _random_union(grid, q, rng)
        if F is not None:
            probes.append((q, F))
    C_eps = {e: 1.0 for e in eps}
    C0 = {e: 1.0 for e in eps}
    for F in used:
        Ps = projected(grid, F, sigma, omega0)
        for q, E in probes:
            if float(omega0[q]) <= 0:
                continue
            r = float(omega0.of(E)) / float(omega0[q])
            for e in eps:
                if r < e:
                    continue
                ps = float(Ps.of(E)) / float(Ps[q]) if float(Ps[q]) > 0 else 0.0
                C_eps[e] = max(C_eps[e], 1 / ps if ps > 0 else math.inf)
                s = float(sigma.of(E)) / float(sigma[q]) if float(sigma[q]) > 0 else 0.0
                C0[e] = max(C0[e], 1 / s if s > 0 else math.inf)
    if any(not math.isfinite(v) for v in C_eps.values()):
        status = "hypothesis-failure"
    elif any(not math.isfinite(v) for v in C0.values()):
        status = "conclusion-failure"
    else:
        status = "pass"
    return {"status": status, "gamma": gamma, "C_eps": C_eps, "C0": C0,
            "families_used": len(used), "families_rejected": len(rejected), "probes": len(probes)}


# ---- output ------------------------------------------------------------------------

def write_tests_csv(path, rows) -> None:
    """rows of (test, Q_id, param, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test", "Q_id", "param", "value"])
        for t, q, p, v in rows:
            w.writerow([t, int(q), repr(float(p)), repr(float(v))])


def write_family(path, family) -> None:
    with open(path, "w") as fh:
        for q in sorted(int(f) for f in family):
            fh.write(f"{q}\n")
