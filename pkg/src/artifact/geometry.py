"""Discretized Ahlfors-David regular sets as weighted point clouds.

A set is stored as points in R^{n+1} with positive quadrature weights that
stand in for n-dimensional Hausdorff measure restricted to the set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, cKDTree
from scipy.special import gamma

from .errors import ArtifactError


@dataclass
class DiscreteSet:
    points: np.ndarray
    weights: np.ndarray
    boundary_dim: int
    mesh_scale: float
    label: str = ""
    diameter: float = field(default=-1.0)

    def __post_init__(self):
        self.points = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        self.weights = np.ascontiguousarray(np.asarray(self.weights, dtype=float))
        if self.points.ndim != 2 or self.points.shape[1] != self.boundary_dim + 1:
            raise ArtifactError("invalid-parameter", "points must have shape (N, n+1)")
        if len(self.weights) != len(self.points):
            raise ArtifactError("invalid-parameter", "one weight per point")
        if np.any(self.weights <= 0):
            raise ArtifactError("invalid-parameter", "weights must be positive")
        if self.diameter < 0:
            self.diameter = point_cloud_diameter(self.points)
        self._tree = None

    @property
    def ambient_dim(self) -> int:
        return self.boundary_dim + 1

    @property
    def n(self) -> int:
        return self.boundary_dim

    @property
    def h(self) -> float:
        return self.mesh_scale

    def __len__(self):
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def ball_mass(self, x, r: float) -> float:
        """Weight inside the closed ball B(x, r)."""
        idx = self.tree.query_ball_point(np.asarray(x, float), r)
        return float(self.weights[idx].sum()) if idx else 0.0


def point_cloud_diameter(points: np.ndarray) -> float:
    """Exact max pairwise distance.

    Reduces to the affine hull, takes the convex hull there, and scans hull
    vertices pairwise.
    """
    pts = np.asarray(points, float)
    if len(pts) < 2:
        return 0.0
    c = pts - pts.mean(axis=0)
    _, s, vt = np.linalg.svd(c, full_matrices=False)
    rank = int(np.sum(s > 1e-12 * max(s[0], 1e-300)))
    if rank == 0:
        return 0.0
    proj = c @ vt[:rank].T
    if rank == 1:
        return float(proj.max() - proj.min())
    if len(pts) > 64:
        try:
            cand = pts[ConvexHull(proj).vertices]
        except Exception:
            cand = pts
    else:
        cand = pts
    best = 0.0
    for i in range(0, len(cand), 512):
        d = np.linalg.norm(cand[i:i + 512, None, :] - cand[None, :, :], axis=-1)
        best = max(best, float(d.max()))
    return best


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / gamma(n / 2 + 1)


def _centered_grid(n: int, halfwidth: float, h: float) -> np.ndarray:
    # cell-centred nodes so that the weights h^n tile the square exactly
    m = max(1, int(round(2 * halfwidth / h)))
    axis = (np.arange(m) - (m - 1) / 2.0) * h
    mesh = np.meshgrid(*([axis] * n), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def gen_plane(n: int, halfwidth: float, h: float) -> DiscreteSet:
    if h <= 0 or halfwidth <= 0:
        raise ArtifactError("invalid-parameter", "h and halfwidth must be positive")
    if n not in (1, 2, 3):
        raise ArtifactError("unsupported-dimension", f"n={n}")
    x = _centered_grid(n, halfwidth, h)
    pts = np.hstack([x, np.zeros((len(x), 1))])
    w = np.full(len(x), h ** n)
    return DiscreteSet(pts, w, n, h, label=f"plane n={n} halfwidth={halfwidth} h={h}")


def gen_sphere(n: int, radius: float, h: float) -> DiscreteSet:
    if n != 2:
        raise ArtifactError("unsupported-dimension", f"sphere only for n=2, got {n}")
    if h <= 0 or radius <= 0:
        raise ArtifactError("invalid-parameter", "h and radius must be positive")
    area = 4 * math.pi * radius ** 2
    N = max(2, int(math.ceil(area / h ** 2)))
    # Fibonacci lattice
    i = np.arange(N) + 0.5
    z = 1 - 2 * i / N
    phi = math.pi * (1 + math.sqrt(5)) * i
    rho = np.sqrt(1 - z * z)
    pts = radius * np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    w = np.full(N, area / N)
    return DiscreteSet(pts, w, 2, h, label=f"sphere radius={radius} h={h}",
                       diameter=2 * radius)


def _profile(name: str, amplitude: float, frequency: float, x: np.ndarray):
    """Height and gradient of a named graph profile; Lipschitz constant a*w."""
    n = x.shape[1]
    t = frequency * x
    s = amplitude / math.sqrt(n)
    if name == "sine":
        return s * np.sin(t).sum(axis=1), s * frequency * np.cos(t)
    if name == "sawtooth-ramp":
        # triangle wave with slopes +-1
        return s * np.arcsin(np.sin(t)).sum(axis=1), s * frequency * np.sign(np.cos(t))
    raise ArtifactError("invalid-parameter", f"unknown profile {name!r}")


def gen_lipschitz_graph(n: int, profile: str, amplitude: float, frequency: float,
                        halfwidth: float, h: float) -> DiscreteSet:
    if h <= 0 or halfwidth <= 0:
        raise ArtifactError("invalid-parameter", "h and halfwidth must be positive")
    if n not in (1, 2):
        raise ArtifactError("unsupported-dimension", f"n={n}")
    if abs(amplitude * frequency) > 1 + 1e-12:
        raise ArtifactError("invalid-parameter", "Lipschitz constant exceeds 1")
    x = _centered_grid(n, halfwidth, h)
    phi, grad = _profile(profile, amplitude, frequency, x)
    w = h ** n * np.sqrt(1 + (grad ** 2).sum(axis=1))
    pts = np.hstack([x, phi[:, None]])
    return DiscreteSet(pts, w, n, h,
                       label=f"graph {profile} a={amplitude} freq={frequency} n={n} h={h}")


def four_corners_squares(generation: int) -> np.ndarray:
    """Lower-left corners of the generation-k squares (side 4^-k)."""
    corners = np.zeros((1, 2))
    offsets = np.array([[0, 0], [3, 0], [0, 3], [3, 3]], float)
    for k in range(1, generation + 1):
        corners = (corners[:, None, :] + offsets[None, :, :] * 4.0 ** -k).reshape(-1, 2)
    return corners


def gen_four_corners_cantor(generation: int) -> DiscreteSet:
    if not (1 <= generation <= 8):
        raise ArtifactError("invalid-parameter", "generation must be in 1..8")
    side = 4.0 ** -generation
    pts = four_corners_squares(generation) + side / 2
    w = np.full(len(pts), side)
    # 3h equals the square side, the finest scale the discrete measure resolves
    return DiscreteSet(pts, w, 1, side / 3, label=f"four-corners generation={generation}",
                       diameter=math.sqrt(2) * (1 - side))


def adr_constants(dset: DiscreteSet, scale_min: float, scale_max: float,
                  samples: int = 256, seed: int = 0) -> tuple[float, float]:
    """Min and max of sigma(B(x,r))/r^n over random centres and log-uniform radii."""
    h = dset.mesh_scale if len(dset) > 1 else math.inf
    if scale_min < 3 * h * (1 - 1e-12):
        raise ArtifactError("scale-below-resolution", f"scale_min={scale_min} < 3h={3 * h}")
    if scale_max > dset.diameter * (1 + 1e-12) or scale_max < scale_min:
        raise ArtifactError("invalid-parameter", "need scale_min <= scale_max <= diameter")
    rng = np.random.default_rng(seed)
    centers = rng.integers(0, len(dset), size=samples)
    radii = np.exp(rng.uniform(math.log(scale_min), math.log(scale_max), size=samples))
    n = dset.boundary_dim
    ratios = np.empty(samples)
    for j in range(samples):
        ratios[j] = dset.ball_mass(dset.points[centers[j]], radii[j]) / radii[j] ** n
    return float(ratios.min()), float(ratios.max())


def save_set(dset: DiscreteSet, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"dim={dset.ambient_dim} n={dset.boundary_dim} count={len(dset)} "
                 f"h={dset.mesh_scale!r} label={dset.label}\n")
        for p, w in zip(dset.points, dset.weights):
            fh.write(" ".join(repr(float(v)) for v in p) + f" {float(w)!r}\n")


def load_set(path) -> DiscreteSet:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        head, _, label = header.partition(" label=")
        meta = dict(tok.split("=", 1) for tok in head.split())
        data = np.loadtxt(fh, ndmin=2)
    dim, n, count = int(meta["dim"]), int(meta["n"]), int(meta["count"])
    if data.shape != (count, dim + 1):
        raise ArtifactError("invalid-input", "set file body does not match header")
    h = float(meta["h"]) if "h" in meta else math.inf
    return DiscreteSet(data[:, :dim], data[:, dim], n, h, label=label)
