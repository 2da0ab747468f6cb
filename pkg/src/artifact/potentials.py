"""Truncated Riesz transforms, the single layer potential with its first and
second derivatives, operator norms in L^2(sigma), and the nontangential maximum."""
from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.special import gamma

from .errors import ArtifactError, NearSetWarning
from .geometry import DiscreteSet

_CHUNK_ENTRIES = 4_000_000


def sphere_area(n: int) -> float:
    """Surface measure of the unit sphere in R^{n+1}."""
    return 2 * math.pi ** ((n + 1) / 2) / gamma((n + 1) / 2)


def layer_constant(n: int) -> float:
    """c_n with c_n |X|^{1-n} the fundamental solution in R^{n+1} (n >= 2)."""
    if n < 2:
        raise ArtifactError("unsupported-dimension", "c_n needs n >= 2; n = 1 uses the log kernel")
    return 1.0 / ((n - 1) * sphere_area(n))


def fundamental(X: np.ndarray, n: int) -> np.ndarray:
    """E(X) = c_n |X|^{1-n}; for n = 1 the planar kernel -log|X| / (2 pi)."""
    r = np.linalg.norm(X, axis=-1)
    if n == 1:
        return -np.log(r) / (2 * math.pi)
    return layer_constant(n) * r ** (1 - n)


def _rows(M: int, N: int):
    step = max(1, _CHUNK_ENTRIES // max(N, 1))
    for i in range(0, M, step):
        yield slice(i, min(M, i + step))


def _smooth_cut(r, eps):
    s = np.clip(r / eps - 1.0, 0.0, 1.0)
    return s * s * (3 - 2 * s)


def riesz_truncated(dset: DiscreteSet, f, eps: float, targets=None,
                    truncation: str = "sharp") -> np.ndarray:
    """Sum over |x - y_j| > eps of (x - y_j)/|x - y_j|^{n+1} f_j w_j at each target.

    ``truncation="smooth"`` swaps the sharp cut for a C^1 ramp between eps and 2 eps.
    """
    if eps < 0:
        raise ArtifactError("invalid-parameter", "eps must be nonnegative")
    Y = dset.points
    T = Y if targets is None else np.atleast_2d(np.asarray(targets, float))
    fw = np.asarray(f, float) * dset.weights
    n = dset.boundary_dim
    out = np.zeros((len(T), dset.ambient_dim))
    for sl in _rows(len(T), len(Y)):
        D = T[sl, None, :] - Y[None, :, :]
        r = np.sqrt((D * D).sum(axis=2))
        with np.errstate(divide="ignore"):
            k = np.where(r > eps, r ** -(n + 1.0), 0.0)
        if truncation == "smooth":
            k = k * _smooth_cut(r, eps) if eps > 0 else k
        elif truncation != "sharp":
            raise ArtifactError("invalid-parameter", f"unknown truncation {truncation!r}")
        out[sl] = np.einsum("mnd,mn->md", D, k * fw[None, :])
    return out


class RieszOperator:
    """B_c = W^{1/2} K_c W^{1/2} for each coordinate c, with K_c[i, j] = (x_i - x_j)_c / |x_i - x_j|^{n+1}
    over |x_i - x_j| > eps. Each B_c is antisymmetric, and the L^2(sigma) norm of
    the truncated transform is the spectral norm of the stacked B.

    Coordinates along which the set is flat give B_c = 0 and are dropped.
    Matrices are kept dense when they fit in ``max_bytes``.
    """

    def __init__(self, dset: DiscreteSet, eps: float, max_bytes: float = 2.0e9):
        self.set = dset
        self.eps = eps
        P = dset.points
        self.sw = np.sqrt(dset.weights)
        self.comps = [c for c in range(dset.ambient_dim) if np.ptp(P[:, c]) > 0]
        N = len(P)
        self.dense = None
        if N * N * 8 * max(1, len(self.comps)) <= max_bytes:
            self.dense = [np.empty((N, N)) for _ in self.comps]
            for sl, blocks in self._blocks():
                for mat, blk in zip(self.dense, blocks):
                    mat[sl] = blk

    def _blocks(self):
        P = self.set.points
        n = self.set.boundary_dim
        for sl in _rows(len(P), len(P)):
            D = P[sl, None, :] - P[None, :, :]
            r = np.sqrt((D * D).sum(axis=2))
            with np.errstate(divide="ignore"):
                k = np.where(r > self.eps, r ** -(n + 1.0), 0.0)
            k *= self.sw[sl, None] * self.sw[None, :]
            yield sl, [D[:, :, c] * k for c in self.comps]

    def apply(self, v: np.ndarray) -> list:
        """[B_c v for each kept coordinate c]."""
        if self.dense is not None:
            return [m @ v for m in self.dense]
        out = [np.empty(len(v)) for _ in self.comps]
        for sl, blocks in self._blocks():
            for o, b in zip(out, blocks):
                o[sl] = b @ v
        return out

    def normal_apply(self, v: np.ndarray) -> np.ndarray:
        """B^T B v = -sum_c B_c B_c v, using antisymmetry."""
        if not self.comps:
            return np.zeros_like(v)
        first = self.apply(v)
        if self.dense is not None:
            return -sum(m @ u for m, u in zip(self.dense, first))
        acc = np.zeros_like(v)
        for sl, blocks in self._blocks():
            for b, u in zip(blocks, first):
                acc[sl] -= b @ u
        return acc


def operator_norm(op: RieszOperator, iters: int = 200, tol: float = 1e-8, seed: int = 0) -> float:
    """Power iteration on B^T B from a seeded Gaussian start."""
    if iters < 1:
        raise ArtifactError("invalid-parameter", "iters must be >= 1")
    N = len(op.set)
    v = np.random.default_rng(seed).standard_normal(N)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = op.normal_apply(v)
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        if lam > 0 and abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return math.sqrt(max(lam, 0.0))


def riesz_sup_norm(dset: DiscreteSet, eps_list, iters: int = 200, seed: int = 0,
                   tol: float = 1e-8, max_bytes: float = 2.0e9):
    """Max over eps of the L^2(sigma) norm of the eps-truncated transform.

    Returns (estimate, attaining eps, per-eps list).
    """
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ArtifactError("invalid-parameter", "empty eps list")
    if iters < 1:
        raise ArtifactError("invalid-parameter", "iters must be >= 1")
    for e in eps_list:
        if e < 0 or e > dset.diameter:
            raise ArtifactError("invalid-parameter", f"eps={e} outside [0, diameter]")
    norms = []
    for e in eps_list:
        norms.append(operator_norm(RieszOperator(dset, e, max_bytes), iters, tol, seed))
    best = int(np.argmax(norms))
    return norms[best], eps_list[best], norms


def _check_fw(dset, f):
    f = np.asarray(f, float)
    if f.ndim == 0:
        f = np.full(len(dset), float(f))
    return f * dset.weights


def _near(dset: DiscreteSet, X: np.ndarray):
    d, _ = dset.tree.query(X)
    return d


def single_layer(dset: DiscreteSet, f, X) -> np.ndarray | float:
    """S f(X) = sum_j E(X - y_j) f_j w_j. Warns when X comes within 2h of the set."""
    Xs = np.atleast_2d(np.asarray(X, float))
    fw = _check_fw(dset, f)
    n = dset.boundary_dim
    if math.isfinite(dset.mesh_scale) and np.any(_near(dset, Xs) < 2 * dset.mesh_scale):
        warnings.warn("single layer evaluated within 2h of the set", NearSetWarning, stacklevel=2)
    out = np.empty(len(Xs))
    Y = dset.points
    for sl in _rows(len(Xs), len(Y)):
        out[sl] = fundamental(Xs[sl, None, :] - Y[None], n) @ fw
    return float(out[0]) if np.ndim(X) == 1 else out


def _standoff(dset: DiscreteSet, Xs):
    if math.isfinite(dset.mesh_scale) and np.any(_near(dset, Xs) < 3 * dset.mesh_scale * (1 - 1e-12)):
        raise ArtifactError("standoff-violation", "derivatives need delta(X) >= 3h")


def grad_single_layer(dset: DiscreteSet, f, X, check: bool = True) -> np.ndarray:
    """grad S f(X) = -(1/omega_n) sum_j (X - y_j)/|X - y_j|^{n+1} f_j w_j."""
    Xs = np.atleast_2d(np.asarray(X, float))
    if check:
        _standoff(dset, Xs)
    fw = _check_fw(dset, f)
    n = dset.boundary_dim
    Y = dset.points
    out = np.empty_like(Xs)
    for sl in _rows(len(Xs), len(Y)):
        D = Xs[sl, None, :] - Y[None]
        r2 = (D * D).sum(axis=2)
        k = r2 ** (-(n + 1) / 2) * fw[None, :]
        out[sl] = -np.einsum("mnd,mn->md", D, k) / sphere_area(n)
    return out[0] if np.ndim(X) == 1 else out


def hessian_single_layer(dset: DiscreteSet, f, X, check: bool = True) -> np.ndarray:
    """Second derivatives of S f:
    -(1/omega_n) sum_j [I/|Z|^{n+1} - (n+1) Z Z^T/|Z|^{n+3}] f_j w_j with Z = X - y_j."""
    Xs = np.atleast_2d(np.asarray(X, float))
    if check:
        _standoff(dset, Xs)
    fw = _check_fw(dset, f)
    n = dset.boundary_dim
    d = dset.ambient_dim
    Y = dset.points
    out = np.empty((len(Xs), d, d))
    for sl in _rows(len(Xs), len(Y) * d):
        D = Xs[sl, None, :] - Y[None]
        r2 = (D * D).sum(axis=2)
        a = r2 ** (-(n + 1) / 2) * fw[None, :]
        b = (n + 1) * a / r2
        H = np.matmul((D * b[..., None]).transpose(0, 2, 1), D)
        H = np.eye(d)[None] * a.sum(axis=1)[:, None, None] - H
        out[sl] = -H / sphere_area(n)
    return out[0] if np.ndim(X) == 1 else out


def hessian_sq_norm(dset: DiscreteSet, f, X, check: bool = True) -> np.ndarray:
    """|grad^2 S f(X)|^2 (Frobenius) at each row of X.

    With a_j = |Z_j|^{-n-1} f_j w_j and b_j = (n+1) a_j/|Z_j|^2, the Hessian is
    -(1/omega_n)(A I - S) where A = sum a_j and S = sum b_j Z_j Z_j^T. The sums
    over j become matrix products against polynomial moments of the sources
    after centring each chunk.
    """
    Xs = np.atleast_2d(np.asarray(X, float))
    if check:
        _standoff(dset, Xs)
    fw = _check_fw(dset, f)
    n = dset.boundary_dim
    d = dset.ambient_dim
    Y0 = dset.points
    iu = np.triu_indices(d)
    mult = np.where(iu[0] == iu[1], 1.0, 2.0)
    out = np.empty(len(Xs))
    for sl in _rows(len(Xs), len(Y0)):
        c = Xs[sl].mean(axis=0)
        X = Xs[sl] - c
        Y = Y0 - c
        r2 = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2 * X @ Y.T
        np.maximum(r2, 1e-300, out=r2)
        inv = 1.0 / r2
        a = inv ** ((n + 1) // 2) * (np.sqrt(inv) if (n + 1) % 2 else 1.0)
        b = a * inv
        A = a @ fw
        B = b * fw[None, :]
        # moments: sum b, sum b Y_k, sum b Y_k Y_l
        s0 = B.sum(axis=1)
        s1 = B @ Y
        s2 = B @ (Y[:, iu[0]] * Y[:, iu[1]])
        S = (n + 1) * (X[:, iu[0]] * X[:, iu[1]] * s0[:, None]
                       - X[:, iu[0]] * s1[:, iu[1]] - X[:, iu[1]] * s1[:, iu[0]] + s2)
        diag = iu[0] == iu[1]
        trS = S[:, diag].sum(axis=1)
        frob = (S * S * mult).sum(axis=1)
        out[sl] = (d * A * A - 2 * A * trS + frob) / sphere_area(n) ** 2
    return out


def box_nodes(lo: np.ndarray, hi: np.ndarray, m: int, closed: bool = False) -> np.ndarray:
    """Tensor nodes, m per axis, for each box; shape (boxes, m^d, d).

    Midpoint nodes by default; ``closed`` spreads them evenly from edge to edge
    (the centre alone when m = 1), which suits maxima attained on the boundary.
    """
    lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
    d = lo.shape[1]
    if closed and m > 1:
        t = np.linspace(0.0, 1.0, m)
    else:
        t = (np.arange(m) + 0.5) / m
    grids = np.meshgrid(*([t] * d), indexing="ij")
    frac = np.stack([g.ravel() for g in grids], axis=1)
    return lo[:, None, :] + frac[None] * (hi - lo)[:, None, :]


class ConeMaximum:
    """Per-Whitney-cube maxima of |u| over the nodes of the 5I boxes, cached, so that
    N_* u(x) is a max over the cubes of the cone over x. With ``top`` set, the cone
    keeps only grid cubes at level >= top (the local maximal function below that scale).

    Nodes run edge to edge: fields growing toward the set peak on the box faces.
    """

    def __init__(self, asg, u, sampling: int = 2, top: int | None = None):
        if sampling < 1:
            raise ArtifactError("invalid-parameter", "sampling must be >= 1")
        self.asg = asg
        self.u = u
        self.m = sampling
        self.top = top
        self.cache = np.full(len(asg.decomp), np.nan)

    def _fill(self, cubes):
        todo = cubes[np.isnan(self.cache[cubes])]
        if len(todo) == 0:
            return
        lo, hi = self.asg.decomp.fattened(todo, 5.0)
        nodes = box_nodes(lo, hi, self.m, closed=True)
        vals = np.asarray(self.u(nodes.reshape(-1, nodes.shape[-1])), float)
        if vals.ndim > 1:
            vals = np.linalg.norm(vals, axis=1)
        self.cache[todo] = np.abs(vals).reshape(len(todo), -1).max(axis=1)

    def __call__(self, x: int) -> float:
        cubes = self.asg.cone_cubes(x, self.top)
        if len(cubes) == 0:
            raise ArtifactError("unknown-point", f"no cube contains point {x}")
        self._fill(cubes)
        return float(self.cache[cubes].max())

    def all_points(self, points=None) -> np.ndarray:
        pts = range(len(self.asg.grid.set)) if points is None else points
        return np.array([self(int(x)) for x in pts])


def nontangential_max(asg, u, x: int, sampling: int = 2) -> float:
    """N_* u(x): max of |u| over tensor nodes of every U^{fat*}_Q with x in Q."""
    return ConeMaximum(asg, u, sampling)(x)


def write_field_csv(path, X, V) -> None:
    X = np.atleast_2d(np.asarray(X, float))
    V = np.asarray(V, float).reshape(len(X), -1)
    d = X.shape[1]
    head = [f"x{i + 1}" for i in range(d)] + [f"v{i + 1}" for i in range(V.shape[1])]
    with open(path, "w") as fh:
        fh.write(",".join(head) + "\n")
        for x, v in zip(X, V):
            fh.write(",".join(repr(float(a)) for a in np.concatenate([x, v])) + "\n")
