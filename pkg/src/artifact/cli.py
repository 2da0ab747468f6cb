"""Batch runner: flat key=value configs, one command per stage, deterministic CSVs."""
from __future__ import annotations

import csv
import hashlib
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import click
import numpy as np
import scipy

from . import ainfty as A
from .carleson import (
    alpha_coefficients, discrete_carleson_sup, sample_balls, ur_carleson_norm,
    write_ball_csv, write_cube_csv,
)
from .complement import DEFAULT_LAMBDA, check_whitney, default_bbox, dump_whitney, whitney_decompose
from .dyadic import build_grid, dump_grid, verify_grid
from .errors import ArtifactError
from .geometry import gen_four_corners_cantor, gen_lipschitz_graph, gen_plane, gen_sphere, save_set
from .harmonic import (
    GreenEvaluator, MeshDomain, WalkConfig, place_pole, run_walks, write_hits_csv,
    measure_from_walks,
)
from .potentials import ConeMaximum, grad_single_layer, riesz_sup_norm
from .sawtooth import (
    approx_domain, assign_wstar, check_assignment, dump_mesh, outer_ball_const,
    sawtooth_region,
)

VERSION = "0.1.0"
OUT_ENV = "ARTIFACT_OUT"


@dataclass
class ExperimentConfig:
    set: str = "graph"
    n: int = 2
    halfwidth: float = 1.0
    h: float = 0.125
    profile: str = "sine"
    amplitude: float = 0.2
    frequency: float = 3.0
    radius: float = 1.0
    generation: int = 3
    k_min: int = 0
    k_max: int = 3
    grid_seed: int = 0
    bbox_pad: float = 2.0
    k_deepest: int = 5
    lam: float = DEFAULT_LAMBDA
    kstar: int = 2
    K0: float = 4.0
    N: int = 3
    prefer: str = "auto"
    eps: str = "auto"
    power_iters: int = 200
    ur_balls: int = 64
    ur_nodes: int = 2
    walks: int = 4000
    kill_factor: float = 0.125
    max_steps: int = 10000
    walk_seed: int = 0
    batch: int = 500
    pole_radius: float = 2.0
    cone_top: int = 1
    M_mult: float = 2.0
    M_sweep: str = "2,4,8,16"
    nfrak: int = 4
    tau: float = 8.0
    gamma: str = "0.01,0.1,1"
    subsets: int = 32
    eta0: float = 0.1
    bl_samples: int = 400
    ainfty_seed: int = 0
    out: str = "out"

    def validate(self) -> "ExperimentConfig":
        if self.set not in ("plane", "sphere", "graph", "cantor"):
            raise ArtifactError("invalid-parameter", f"set={self.set!r}")
        if not 0 < self.lam < 1:
            raise ArtifactError("invalid-parameter", f"lam={self.lam} must lie in (0, 1)")
        if self.h <= 0 or self.halfwidth <= 0:
            raise ArtifactError("invalid-parameter", "h and halfwidth must be positive")
        if self.k_max < self.k_min:
            raise ArtifactError("invalid-parameter", "k_max < k_min")
        if self.bbox_pad < 2:
            raise ArtifactError("invalid-parameter", "bbox_pad must be >= 2")
        if not 0 < self.eta0 < 1:
            raise ArtifactError("invalid-parameter", "eta0 must lie in (0, 1)")
        _floats(self.M_sweep, "M_sweep")
        _floats(self.gamma, "gamma")
        if self.eps != "auto" and not _floats(self.eps, "eps"):
            raise ArtifactError("invalid-parameter", "empty eps list")
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_pairs(cls, pairs: dict) -> "ExperimentConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in pairs.items():
            if k not in types:
                raise ArtifactError("invalid-parameter", f"unknown config key {k!r}")
            try:
                kw[k] = {"int": int, "float": float}.get(types[k], str)(v)
            except ValueError:
                raise ArtifactError("invalid-parameter", f"{k}={v!r}") from None
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str, overrides: dict | None = None) -> "ExperimentConfig":
        pairs = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, sep, v = line.partition("=")
            if not sep:
                raise ArtifactError("invalid-input", f"config line without '=': {line!r}")
            pairs[k.strip()] = v.strip()
        pairs.update(overrides or {})
        return cls.from_pairs(pairs)

    def digest(self) -> str:
        body = "".join(l + "\n" for l in self.to_text().splitlines() if not l.startswith("out="))
        return hashlib.sha256(body.encode()).hexdigest()

    @property
    def kill_distance(self) -> float:
        return 2.0 ** -self.N * self.kill_factor

    def walk_config(self) -> WalkConfig:
        return WalkConfig(walks=self.walks, kill_distance=self.kill_distance,
                          max_steps=self.max_steps, seed=self.walk_seed, batch=self.batch)


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ArtifactError("invalid-parameter", f"{name}={text!r}") from None


# ---- stage helpers ---------------------------------------------------------------

def make_set(cfg: ExperimentConfig):
    if cfg.set == "plane":
        return gen_plane(cfg.n, cfg.halfwidth, cfg.h)
    if cfg.set == "sphere":
        return gen_sphere(cfg.n, cfg.radius, cfg.h)
    if cfg.set == "graph":
        return gen_lipschitz_graph(cfg.n, cfg.profile, cfg.amplitude, cfg.frequency,
                                   cfg.halfwidth, cfg.h)
    return gen_four_corners_cantor(cfg.generation)


def make_whitney(cfg, E):
    return whitney_decompose(E, bbox=default_bbox(E, cfg.bbox_pad), k_deepest=cfg.k_deepest,
                             lam=cfg.lam)


def eps_list(cfg, E) -> list[float]:
    if cfg.eps != "auto":
        return _floats(cfg.eps, "eps")
    return [m * E.h for m in (3, 6, 12, 24) if m * E.h <= E.diameter]


def prefer_vector(cfg, E):
    if cfg.prefer == "auto":
        return None if cfg.set != "graph" else [0.0] * E.n + [1.0]
    if cfg.prefer in ("", "none"):
        return None
    return _floats(cfg.prefer, "prefer")


def central_root(grid) -> int:
    """The coarsest cube whose centre point is nearest the centroid of the set."""
    pts = grid.set.points
    c = pts.mean(axis=0)
    roots = grid.by_level[grid.k_min]
    return min(roots, key=lambda q: (float(np.linalg.norm(pts[grid[q].center] - c)), q))


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def write_manifest(out: Path, cfg: ExperimentConfig, command: str) -> None:
    (out / "config.txt").write_text(cfg.to_text())
    (out / "run-manifest.txt").write_text(
        f"command={command}\nconfig_sha256={cfg.digest()}\nartifact={VERSION}\n"
        f"numpy={np.__version__}\nscipy={scipy.__version__}\n")


class Stage:
    """Context manager tagging errors with the stage that raised them."""

    def __init__(self, name: str, log=None):
        self.name, self.log = name, log

    def __enter__(self):
        if self.log:
            self.log(f"stage {self.name}")
        return self

    def __exit__(self, et, e, tb):
        if isinstance(e, ArtifactError) and not getattr(e, "stage", None):
            err = ArtifactError(e.kind, f"stage {self.name}: {e}")
            err.stage = self.name
            raise err from e
        return False


# ---- stages ------------------------------------------------------------------------

def run_riesz(cfg, E, out: Path):
    eps = eps_list(cfg, E)
    best, at, norms = riesz_sup_norm(E, eps, iters=cfg.power_iters, seed=cfg.grid_seed)
    _write_rows(out / "riesz.csv", ["eps", "norm"], zip(eps, norms))
    return best, at


def run_ur(cfg, E, W, out: Path):
    balls = sample_balls(E, cfg.ur_balls, seed=cfg.grid_seed)
    rep = ur_carleson_norm(E, W, balls, nodes_per_cube=cfg.ur_nodes)
    write_ball_csv(out / "ur.csv", rep)
    return rep.sup


def run_pipeline(cfg: ExperimentConfig, out: Path, log=None) -> dict:
    """Every stage on one configured set; one CSV per stage plus summary.csv."""
    cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, "pipeline")
    res = {}
    with Stage("gen", log):
        E = make_set(cfg)
        save_set(E, out / "set.txt")
    with Stage("riesz", log):
        res["riesz_sup"], _ = run_riesz(cfg, E, out)
    with Stage("whitney", log):
        W = make_whitney(cfg, E)
    with Stage("ur", log):
        res["ur_sup"] = run_ur(cfg, E, W, out)
    if E.n < 2:
        note = "harmonic stages need boundary dimension n >= 2; stopped after riesz and ur"
        (out / "note.txt").write_text(note + "\n")
        res["note"] = note
        _write_summary(out, res)
        return res
    with Stage("grid", log):
        g = build_grid(E, cfg.k_min, cfg.k_max, seed=cfg.grid_seed)
        asg = assign_wstar(g, W, kstar=cfg.kstar, K0=cfg.K0, prefer=prefer_vector(cfg, E))
    q0 = central_root(g)
    Q0 = g[q0]
    x0 = E.points[Q0.center]
    res["q0"] = q0

    with Stage("nontangential", log):
        f = (np.linalg.norm(E.points - x0, axis=1) < 2 * Q0.outer_radius).astype(float)
        field = lambda X: grad_single_layer(E, f, X, check=False)
        cone = ConeMaximum(asg, field, top=cfg.cone_top)
        mem = np.sort(Q0.members)
        vals = np.zeros(len(E))
        vals[mem] = cone.all_points(mem)
        _write_rows(out / "nstar.csv", ["point", "value"], zip(mem, vals[mem]))
        med = float(np.median(vals[mem]))

    with Stage("stopping", log):
        sweep = [m * med for m in _floats(cfg.M_sweep, "M_sweep")]
        contact = [A.stopping_family(g, q0, vals, M).contact_fraction for M in sweep]
        fit = A.chebyshev_fit(sweep, contact)
        _write_rows(out / "stopping.csv", ["M", "contact_fraction"], zip(sweep, contact))
        M = cfg.M_mult * med
        st = A.stopping_family(g, q0, vals, M)
        res.update(M=M, contact_fraction=st.contact_fraction, sweep=sweep, sweep_contact=contact,
                   chebyshev=fit)
        A.write_family(out / "F0.txt", st.family)

    with Stage("augment", log):
        kp = outer_ball_const(asg, q0)
        R = kp * Q0.length
        nfrak, tau, rows = cfg.nfrak, cfg.tau, []
        # Nfrak and tau double until the local term stays below M (at most three times)
        for _ in range(4):
            F1 = A.augment_family(g, q0, st.family, R, Nfrak=nfrak, tau=tau)
            saw = sawtooth_region(asg, F1, variant="fat*")
            lo, hi = asg.decomp.fattened(saw.cubes, 5.0)
            C = 0.5 * (lo + hi)
            C = C[np.linalg.norm(C - x0, axis=1) < R]
            local = float(np.linalg.norm(field(C), axis=1).max()) if len(C) else 0.0
            rows.append((nfrak, tau, len(C), local, M, local / M))
            if local <= M:
                break
            nfrak, tau = 2 * nfrak, 2 * tau
        A.write_family(out / "F1.txt", F1)
        res.update(kprime=kp, local_term_ratio=local / M, nfrak=nfrak, tau=tau)
        _write_rows(out / "local_term.csv", ["nfrak", "tau", "nodes", "max_grad", "M", "ratio"], rows)

    with Stage("harmonic", log):
        D = MeshDomain(approx_domain(asg, cfg.N))
        dump_mesh(D.mesh, out / "omega_N_mesh.txt")
        X0 = place_pole(D, x0, cfg.pole_radius * Q0.length, direction=prefer_vector(cfg, E))
        wcfg = cfg.walk_config()
        walks = run_walks(D, X0, wcfg)
        write_hits_csv(out / "hits.csv", measure_from_walks(walks, None))
        omega = A.restrict_to_cubes(g, A.hits_to_points(E, walks.feet), stderr_walks=walks.used)
        _write_rows(out / "omega.csv", ["cube_id", "mass", "stderr"],
                    [(q, omega[q], omega.stderr[q]) for q in range(len(g))])
        cut = float(D.mesh.distance(X0[None])[0]) / 2
        res.update(pole=X0, pole_cutout=cut)

    with Stage("alpha", log):
        green = GreenEvaluator(D, X0, wcfg, walks=walks, excise=cut)
        rep = alpha_coefficients(asg, g.descendants(q0), X0, green, nodes=1)
        write_cube_csv(out / "alpha.csv", rep)
        alphas = {int(k): float(v) for k, v in zip(rep.keys, rep.values)}
        res["carleson_sup"] = discrete_carleson_sup(g, alphas, omega, q0)
        res["carleson_sup_over_M2"] = res["carleson_sup"] / M ** 2

    with Stage("ainfty", log):
        sigma = A.sigma_measure(g)
        omega0 = A.projected(g, F1, omega, sigma)
        _write_rows(out / "omega0.csv", ["cube_id", "mass"],
                    [(q, float(omega0[q])) for q in range(len(g))])
        ai = A.ainfty_dyadic_test(omega0, sigma, q0, subsets_per_cube=cfg.subsets, seed=cfg.ainfty_seed)
        c0, ok = A.bennewitz_lewis_test(omega0, sigma, q0, cfg.eta0, samples=cfg.bl_samples,
                                        seed=cfg.ainfty_seed)
        dbl = A.dyadic_doubling(omega0, q0)
        rows = list(ai.rows) + [("bennewitz_lewis", q0, cfg.eta0, c0), ("dyadic_doubling", q0, 0.0, dbl)]
        A.write_tests_csv(out / "ainfty.csv", rows)
        res.update(ainfty=ai.constants, ainfty_samples=ai.samples, ainfty_C=ai.constants[0.25],
                   bl_c0=c0, bl_pass=ok, omega0_doubling=dbl)

    with Stage("extrapolation", log):
        # Monte Carlo noise can push an alpha slightly below zero; the packing measure needs >= 0
        clipped = {q: max(v, 0.0) for q, v in alphas.items()}
        res["alpha_clipped"] = sum(v < 0 for v in alphas.values())
        fams = [[], list(st.family)] + [[c] for c in Q0.children]
        ex_rows = []
        for gm in _floats(cfg.gamma, "gamma"):
            ex = A.extrapolation_check(g, q0, clipped, omega0, sigma, gm, fams, seed=cfg.ainfty_seed)
            ex_rows.append((gm, ex["status"], ex["families_used"], ex["families_rejected"],
                            max(ex["C_eps"].values()), max(ex["C0"].values())))
        _write_rows(out / "extrapolation.csv",
                    ["gamma", "status", "families_used", "families_rejected", "C_eps_max", "C0_max"],
                    ex_rows)
        res["extrapolation"] = ex_rows
    _write_summary(out, res)
    return res


SUMMARY = ("riesz_sup", "ur_sup", "contact_fraction", "carleson_sup_over_M2", "ainfty_C", "bl_c0")


def _write_summary(out: Path, res: dict) -> None:
    keys = [k for k in SUMMARY if k in res]
    _write_rows(out / "summary.csv", keys, [[float(res[k]) for k in keys]])


# ---- command line --------------------------------------------------------------------

def _options(f):
    for fd in reversed(fields(ExperimentConfig)):
        typ = {"int": int, "float": float}.get(fd.type, str)
        f = click.option(f"--{fd.name.replace('_', '-')}", fd.name, type=typ, default=None,
                         help=f"default {fd.default}")(f)
    return click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                        default=None, help="flat key=value file")(f)


def _load(config_path, overrides) -> tuple[ExperimentConfig, Path]:
    text = Path(config_path).read_text() if config_path else ""
    ov = {k: str(v) for k, v in overrides.items() if v is not None}
    cfg = ExperimentConfig.from_text(text, ov).validate()
    out = Path(os.environ.get(OUT_ENV) or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _run(name, body):
    def cmd(config_path, **kw):
        try:
            cfg, out = _load(config_path, kw)
            write_manifest(out, cfg, name)
            line = body(cfg, out)
        except ArtifactError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)
        click.echo(line)
    cmd.__name__ = name
    return main.command(name)(_options(cmd))


@click.group()
def main():
    """Uniform-rectifiability experiments on discrete sets."""


def _gen(cfg, out):
    E = make_set(cfg)
    save_set(E, out / "set.txt")
    return f"gen points={len(E)} dim={E.ambient_dim} n={E.n} h={E.h!r} diameter={E.diameter!r}"


def _grid(cfg, out):
    g = build_grid(make_set(cfg), cfg.k_min, cfg.k_max, seed=cfg.grid_seed)
    dump_grid(g, out / "grid.txt")
    r = verify_grid(g)
    _write_rows(out / "grid_report.csv", ["property", "value"], [
        ("partition", r.partition), ("nesting", r.nesting), ("unique_ancestor", r.unique_ancestor),
        ("max_diam_ratio", r.max_diam_ratio), ("min_inner_coverage", r.min_inner_coverage),
        ("max_outer_const", r.max_outer_const)])
    return (f"grid cubes={len(g)} partition={r.partition} nesting={r.nesting} "
            f"unique_ancestor={r.unique_ancestor} outer_const={r.max_outer_const!r}")


def _whitney(cfg, out):
    W = make_whitney(cfg, make_set(cfg))
    dump_whitney(W, out / "whitney.txt")
    r = check_whitney(W, recompute=False)
    return f"whitney cubes={r['count']} whitney_ok={r['whitney']} fattening_ok={r['fattening_iff_touching']}"


def _sawtooth(cfg, out):
    E = make_set(cfg)
    g = build_grid(E, cfg.k_min, cfg.k_max, seed=cfg.grid_seed)
    asg = assign_wstar(g, make_whitney(cfg, E), kstar=cfg.kstar, K0=cfg.K0, prefer=prefer_vector(cfg, E))
    r = check_assignment(asg)
    dom = approx_domain(asg, cfg.N)
    mesh = dom.boundary_mesh()
    dump_mesh(mesh, out / "omega_N_mesh.txt")
    _write_rows(out / "assignment.csv", ["property", "value"], sorted(r.items()))
    return " ".join(f"{k}={v}" for k, v in sorted(r.items())) + f" omega_N_faces={len(mesh)}"


def _riesz(cfg, out):
    best, at = run_riesz(cfg, make_set(cfg), out)
    return f"riesz sup={best!r} at eps={at!r}"


def _ur(cfg, out):
    E = make_set(cfg)
    return f"ur sup={run_ur(cfg, E, make_whitney(cfg, E), out)!r}"


def _hm(cfg, out):
    E = make_set(cfg)
    if E.n < 2:
        raise ArtifactError("unsupported-dimension", "harmonic measure runs need n >= 2")
    g = build_grid(E, cfg.k_min, cfg.k_max, seed=cfg.grid_seed)
    asg = assign_wstar(g, make_whitney(cfg, E), kstar=cfg.kstar, K0=cfg.K0, prefer=prefer_vector(cfg, E))
    Q0 = g[central_root(g)]
    D = MeshDomain(approx_domain(asg, cfg.N))
    X0 = place_pole(D, E.points[Q0.center], cfg.pole_radius * Q0.length, direction=prefer_vector(cfg, E))
    walks = run_walks(D, X0, cfg.walk_config())
    write_hits_csv(out / "hits.csv", measure_from_walks(walks, None))
    om = A.restrict_to_cubes(g, A.hits_to_points(E, walks.feet), stderr_walks=walks.used)
    _write_rows(out / "omega.csv", ["cube_id", "mass", "stderr"],
                [(q, om[q], om.stderr[q]) for q in range(len(g))])
    return f"hm walks={walks.used} pole={' '.join(repr(float(v)) for v in X0)} omega_Q0={om[Q0.id]!r}"


def _pipeline(cfg, out):
    res = run_pipeline(cfg, out, log=lambda m: click.echo(m, err=True))
    if "note" in res:
        return f"pipeline riesz_sup={res['riesz_sup']!r} ur_sup={res['ur_sup']!r} note: {res['note']}"
    return "pipeline " + " ".join(f"{k}={float(res[k])!r}" for k in SUMMARY)


for _name, _body in [("gen", _gen), ("grid", _grid), ("whitney", _whitney), ("sawtooth", _sawtooth),
                     ("riesz", _riesz), ("ur", _ur), ("hm", _hm), ("pipeline", _pipeline)]:
    _run(_name, _body)


if __name__ == "__main__":
    main()
