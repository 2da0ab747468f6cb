"""Harmonic measure and Green function by walk-on-spheres, with Bourgain, CFMS
and doubling diagnostics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ArtifactError
from .potentials import fundamental
from .sawtooth import SawtoothDomain

JUMP = 0.95


@dataclass(frozen=True)
class WalkConfig:
    walks: int = 10_000
    kill_distance: float = 1e-3
    max_steps: int = 10_000
    seed: int = 0
    batch: int = 1000

    def __post_init__(self):
        if self.walks < 1 or self.batch < 1:
            raise ArtifactError("invalid-parameter", "walks and batch must be >= 1")
        if not self.kill_distance > 0:
            raise ArtifactError("invalid-parameter", "kill_distance must be positive")
        if self.max_steps < 1:
            raise ArtifactError("invalid-parameter", "max_steps must be >= 1")

    @property
    def batches(self) -> int:
        return -(-self.walks // self.batch)


@dataclass
class HarmonicEstimate:
    value: float
    stderr: float
    walks_used: int
    faces: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    hits: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


# ---- domains ---------------------------------------------------------------

class HalfSpace:
    """{x_d > 0} in R^d; the boundary is one face (id 0)."""

    def __init__(self, d: int = 3):
        self.dim = d
        self.n = d - 1

    def contains(self, X) -> np.ndarray:
        return np.atleast_2d(X)[:, -1] > 0

    def nearest(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        foot = X.copy()
        foot[:, -1] = 0.0
        return np.abs(X[:, -1]), np.zeros(len(X), np.int64), foot

    def reflect(self, X) -> np.ndarray:
        Y = np.array(X, float)
        Y[..., -1] *= -1
        return Y


class MeshDomain:
    """A bounded sawtooth domain: open union of its boxes, distances from the exact
    boundary face mesh."""

    def __init__(self, dom: SawtoothDomain):
        if dom.empty:
            raise ArtifactError("invalid-parameter", "empty domain")
        self.sawtooth = dom
        self.mesh = dom.boundary_mesh()
        self.dim = dom.decomp.dim
        self.n = self.dim - 1

    def contains(self, X) -> np.ndarray:
        return self.sawtooth.contains(X)

    def nearest(self, X):
        return self.mesh.nearest(X)


# ---- walks -----------------------------------------------------------------

@dataclass
class Walks:
    """Kill records of cfg.walks walks from X: boundary foot, face and batch label.
    ``ok`` is False for walks that ran out of steps."""
    start: np.ndarray
    feet: np.ndarray
    faces: np.ndarray
    batch: np.ndarray
    ok: np.ndarray
    steps: np.ndarray
    cfg: WalkConfig

    @property
    def used(self) -> int:
        return int(self.ok.sum())


def _directions(rng, m: int, d: int) -> np.ndarray:
    g = rng.standard_normal((m, d))
    return g / np.linalg.norm(g, axis=1)[:, None]


def run_walks(domain, X, cfg: WalkConfig) -> Walks:
    """Walk-on-spheres from X. Each batch of cfg.batch walks draws from its own
    stream seeded by (cfg.seed, batch index)."""
    X = np.asarray(X, float).ravel()
    if len(X) != domain.dim:
        raise ArtifactError("invalid-parameter", "start point has the wrong dimension")
    dist0 = domain.nearest(X[None])[0][0]
    if not domain.contains(X[None])[0] or dist0 <= cfg.kill_distance:
        raise ArtifactError("invalid-start", "start point outside the domain or within the kill distance")
    W = cfg.walks
    feet = np.zeros((W, domain.dim))
    faces = np.full(W, -1, np.int64)
    ok = np.zeros(W, bool)
    steps = np.zeros(W, np.int64)
    batch = np.arange(W) // cfg.batch
    for b in range(cfg.batches):
        rng = np.random.default_rng([cfg.seed, b])
        idx = np.arange(b * cfg.batch, min(W, (b + 1) * cfg.batch))
        P = np.repeat(X[None], len(idx), axis=0)
        live = np.arange(len(idx))
        for step in range(cfg.max_steps):
            dist, face, foot = domain.nearest(P[live])
            kill = dist <= cfg.kill_distance
            if kill.any():
                k = idx[live[kill]]
                feet[k] = foot[kill]
                faces[k] = face[kill]
                ok[k] = True
                steps[k] = step
            live = live[~kill]
            if not len(live):
                break
            P[live] += (JUMP * dist[~kill])[:, None] * _directions(rng, len(live), domain.dim)
        steps[idx[live]] = cfg.max_steps
    if (~ok).sum() > 0.01 * W:
        raise ArtifactError("nonconvergence", f"{int((~ok).sum())} of {W} walks exceeded max_steps")
    return Walks(X, feet, faces, batch, ok, steps, cfg)


def _hits(w: Walks):
    f, c = np.unique(w.faces[w.ok], return_counts=True)
    return f, c


def measure_from_walks(w: Walks, target: Callable | None) -> HarmonicEstimate:
    """Fraction of (completed) walks whose kill foot satisfies ``target`` (None: all)."""
    used = w.used
    if used == 0:
        raise ArtifactError("nonconvergence", "no walk completed")
    hit = np.ones(used, bool) if target is None else np.asarray(target(w.feet[w.ok]), bool)
    p = math.fsum(hit.astype(float)) / used
    f, c = _hits(w)
    return HarmonicEstimate(p, math.sqrt(p * (1 - p) / used), used, f, c)


def wos_harmonic_measure(domain, X, target: Callable | None, cfg: WalkConfig) -> HarmonicEstimate:
    return measure_from_walks(run_walks(domain, X, cfg), target)


def surface_ball(x, r: float) -> Callable:
    """Predicate |z - x| < r on boundary points."""
    x = np.asarray(x, float)
    return lambda Z: np.sqrt(((np.atleast_2d(Z) - x) ** 2).sum(axis=1)) < r


# ---- Green function -----------------------------------------------------------

def _energy(X, Z, n: int, chunk: int = 4_000_000) -> np.ndarray:
    """(len(Z), len(X)) values E(X_j - Z_i), in chunks."""
    X = np.atleast_2d(X)
    out = np.empty((len(Z), len(X)))
    step = max(1, chunk // max(len(Z), 1))
    for a in range(0, len(X), step):
        D = X[None, a:a + step, :] - Z[:, None, :]
        out[:, a:a + step] = fundamental(D.reshape(-1, X.shape[1]), n).reshape(len(Z), -1)
    return out


class GreenEvaluator:
    """G(X, X0) for many X from one set of walks launched at the pole X0:
    G(X, X0) = G(X0, X) = E(X - X0) - mean_i E(X - z_i) over kill feet z_i.
    Calling returns one estimate per batch of walks, shape (B, len(X)); points
    closer than ``excise`` to the pole get 0 (the ball around the pole is cut out)."""

    def __init__(self, domain, X0, cfg: WalkConfig, walks: Walks | None = None,
                 excise: float = 0.0):
        if excise < 0:
            raise ArtifactError("invalid-parameter", "excise radius must be >= 0")
        self.excise = float(excise)
        self.domain = domain
        self.pole = np.asarray(X0, float).ravel()
        self.walks = run_walks(domain, self.pole, cfg) if walks is None else walks
        self.n = domain.n
        ok = self.walks.ok
        self.z = self.walks.feet[ok]
        self.labels = self.walks.batch[ok]
        self.B = int(self.labels.max()) + 1 if len(self.labels) else 0
        self.counts = np.bincount(self.labels, minlength=self.B)
        if self.B == 0 or np.any(self.counts == 0):
            raise ArtifactError("nonconvergence", "a walk batch has no completed walks")

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        r = np.linalg.norm(X - self.pole, axis=1)
        cut = r < self.excise
        if np.any(r[~cut] < self.walks.cfg.kill_distance):
            raise ArtifactError("points-too-close", "evaluation point within the kill distance of the pole")
        out = np.zeros((self.B, len(X)))
        if cut.all():
            return out
        Xk = X[~cut]
        E = _energy(Xk, self.z, self.n)
        sums = np.zeros((self.B, len(Xk)))
        np.add.at(sums, self.labels, E)
        mean = sums / self.counts[:, None]
        out[:, ~cut] = fundamental(Xk - self.pole, self.n)[None, :] - mean
        return out

    def estimate(self, X):
        """(value, stderr) per point using all walks (stderr from the walk spread)."""
        X = np.atleast_2d(np.asarray(X, float))
        E = _energy(X, self.z, self.n)
        val = fundamental(X - self.pole, self.n) - E.mean(axis=0)
        err = E.std(axis=0, ddof=1) / math.sqrt(len(self.z))
        return val, err


def green_function(domain, X, Y, cfg: WalkConfig) -> HarmonicEstimate:
    """G(X, Y) with walks launched from Y."""
    X = np.asarray(X, float).ravel()
    Y = np.asarray(Y, float).ravel()
    if np.linalg.norm(X - Y) < cfg.kill_distance:
        raise ArtifactError("points-too-close", "|X - Y| below the kill distance")
    if domain.nearest(X[None])[0][0] <= cfg.kill_distance or not domain.contains(X[None])[0]:
        raise ArtifactError("invalid-start", "X outside the domain or within the kill distance")
    g = GreenEvaluator(domain, Y, cfg)
    v, e = g.estimate(X[None])
    f, c = _hits(g.walks)
    return HarmonicEstimate(float(v[0]), float(e[0]), g.walks.used, f, c)


def halfspace_green(X, Y, n: int = 2) -> np.ndarray:
    """Method of images in {x_d > 0}."""
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    Yb = Y.copy()
    Yb[:, -1] *= -1
    return fundamental(X - Y, n) - fundamental(X - Yb, n)


def halfspace_disk_measure(height: float, r: float) -> float:
    """omega^{(0,...,0,height)} of the disk {|y| < r} on the boundary of R^3_+."""
    return 1.0 - height / math.hypot(height, r)


# ---- diagnostics --------------------------------------------------------------

@dataclass
class CheckReport:
    name: str
    values: np.ndarray
    stderr: np.ndarray
    samples: list
    threshold: float | None = None
    inconclusive: list = field(default_factory=list)

    @property
    def min(self) -> float:
        return float(self.values.min()) if len(self.values) else math.nan

    @property
    def max(self) -> float:
        return float(self.values.max()) if len(self.values) else math.nan

    @property
    def spread(self) -> float:
        return self.max / self.min if len(self.values) and self.min > 0 else math.inf

    @property
    def argmin(self):
        return self.samples[int(np.argmin(self.values))] if len(self.values) else None


def check_bourgain(domain, samples, cfg: WalkConfig, c: float = 0.1) -> CheckReport:
    """min over samples (x, r, Y) of omega^Y(Delta(x, r)) with Y in B(x, c r).

    Samples given as (x, r) get Y = x - c r nu when the domain has a face mesh
    (nu the outward normal of the face nearest x) or Y = x + c r e_d otherwise."""
    vals, errs, used = [], [], []
    for s in samples:
        x, r = np.asarray(s[0], float), float(s[1])
        if r < 10 * cfg.kill_distance:
            continue
        Y = np.asarray(s[2], float) if len(s) > 2 else _inward(domain, x, c * r)
        if np.linalg.norm(Y - x) > c * r * (1 + 1e-9):
            raise ArtifactError("invalid-parameter", "pole outside B(x, c r)")
        est = wos_harmonic_measure(domain, Y, surface_ball(x, r), cfg)
        vals.append(est.value)
        errs.append(est.stderr)
        used.append((x, r, Y))
    if not used:
        raise ArtifactError("scale-below-resolution", "every sample radius is below 10 kill distances")
    return CheckReport("bourgain", np.array(vals), np.array(errs), used)


def _inward(domain, x, t: float) -> np.ndarray:
    if isinstance(domain, MeshDomain):
        _, face, _ = domain.mesh.nearest(x[None])
        return x - t * domain.mesh.normals[face[0]]
    e = np.zeros(domain.dim)
    e[-1] = 1.0
    return x + t * e


def check_doubling(domain, X, balls, cfg: WalkConfig, walks: Walks | None = None) -> CheckReport:
    """omega^X(Delta(x, 2r)) / omega^X(Delta(x, r)) per ball, all from one walk set;
    balls with X inside B(x, 4r) are rejected."""
    w = run_walks(domain, X, cfg) if walks is None else walks
    X = np.asarray(X, float)
    vals, errs, used, skip = [], [], [], []
    Z = w.feet[w.ok]
    for x, r in balls:
        x = np.asarray(x, float)
        if np.linalg.norm(X - x) < 4 * r:
            raise ArtifactError("invalid-parameter", "pole inside 4B")
        d = np.sqrt(((Z - x) ** 2).sum(axis=1))
        a, b = int((d < r).sum()), int((d < 2 * r).sum())
        if a == 0:
            skip.append((x, r))
            continue
        ratio = b / a
        vals.append(ratio)
        errs.append(ratio * math.sqrt(max(1.0 / a - 1.0 / b, 0.0)))
        used.append((x, r))
    return CheckReport("doubling", np.array(vals), np.array(errs), used, inconclusive=skip)


def _surface_measure(domain, x, r: float) -> float:
    if isinstance(domain, MeshDomain):
        nodes, wts, _ = domain.mesh.quadrature(r / 8)
        return math.fsum(wts[np.sqrt(((nodes - x) ** 2).sum(axis=1)) < r])
    return math.pi ** (domain.n / 2) / math.gamma(domain.n / 2 + 1) * r ** domain.n


def check_cfms(domain, X, balls, cfg: WalkConfig, c: float = 0.5, bound: float = 100.0,
               max_rel_err: float = 0.5, green: GreenEvaluator | None = None) -> CheckReport:
    """rho = [omega^X(Delta)/sigma(Delta)] / [G(X_Delta, X)/r] per surface ball, with
    X_Delta the inward point at depth c r. omega and G come from one walk set from X.
    Balls whose relative error exceeds max_rel_err are listed as inconclusive."""
    g = GreenEvaluator(domain, X, cfg) if green is None else green
    X = np.asarray(X, float)
    Z = g.z
    vals, errs, used, skip = [], [], [], []
    for x, r in balls:
        x = np.asarray(x, float)
        if np.linalg.norm(X - x) < 4 * r:
            raise ArtifactError("invalid-parameter", "pole inside 4B")
        hits = int((np.sqrt(((Z - x) ** 2).sum(axis=1)) < r).sum())
        Xd = _inward(domain, x, c * r)
        G, Ge = g.estimate(Xd[None])
        if hits == 0 or G[0] <= 0:
            skip.append((x, r))
            continue
        om = hits / len(Z)
        sig = _surface_measure(domain, x, r)
        rho = (om / sig) / (G[0] / r)
        rel = math.hypot(math.sqrt((1 - om) / hits), Ge[0] / G[0])
        if rel > max_rel_err:
            skip.append((x, r))
            continue
        vals.append(rho)
        errs.append(rho * rel)
        used.append((x, r))
    return CheckReport("cfms", np.array(vals), np.array(errs), used, threshold=bound, inconclusive=skip)


def place_pole(domain: MeshDomain, x0, radius: float, direction=None) -> np.ndarray:
    """Interior point of the domain farthest from x0 within B(x0, radius), among the
    centres of the domain's boxes (the corkscrew choice for a large surface ball).
    With ``direction`` only centres on that side of x0 are candidates."""
    dom = domain.sawtooth
    C = dom.decomp.center[dom.cubes]
    x0 = np.asarray(x0, float)
    dist = np.linalg.norm(C - x0, axis=1)
    depth = domain.mesh.distance(C)
    score = np.minimum(depth, radius - dist)
    if direction is not None:
        score = np.where((C - x0) @ np.asarray(direction, float) > 0, score, -np.inf)
    i = int(np.lexsort((dom.cubes, -score))[0])
    return C[i].copy()


# ---- output ------------------------------------------------------------------

def write_hits_csv(path, est: HarmonicEstimate) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["face_id", "hits"])
        for f, c in zip(est.faces, est.hits):
            w.writerow([int(f), int(c)])


def write_estimates_csv(path, rows) -> None:
    """rows of (tag, value, stderr, walks)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tag", "value", "stderr", "walks"])
        for tag, v, e, n in rows:
            w.writerow([tag, repr(float(v)), repr(float(e)), int(n)])
