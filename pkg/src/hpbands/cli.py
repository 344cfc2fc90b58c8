"""Command-line driver: ``hpbands {bands,adapt,converge,optimize}``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys

import numpy as np

from .config import KEYS, load_config, make_config, write_manifest
from .errors import ConfigError, HPBandsError

log = logging.getLogger("hpbands")

SYMMETRY_POINTS = {
    "G": (0.0, 0.0, 0.0),
    "X": (1.0, 0.0, 0.0),
    "M": (1.0, 1.0, 0.0),
    "R": (1.0, 1.0, 1.0),
    "T": (0.0, 1.0, 1.0),
    "Z": (0.0, 0.0, 1.0),
}
PATHS = {1: "GXMRTZGM", 2: "GXMRG"}


def band_path(model, a=1.0, points_per_segment=10):
    """(s, labels, k) along the model's high-symmetry path; s is the cumulative length."""
    names = PATHS[model]
    if points_per_segment <= 0:
        return np.zeros(0), [], np.zeros((0, 3))
    scale = math.pi / a
    ks, labels = [], []
    for i in range(len(names) - 1):
        p, q = np.array(SYMMETRY_POINTS[names[i]]), np.array(SYMMETRY_POINTS[names[i + 1]])
        for j in range(points_per_segment):
            ks.append(scale * (p + (q - p) * j / points_per_segment))
            labels.append(names[i] if j == 0 else "")
    ks.append(scale * np.array(SYMMETRY_POINTS[names[-1]]))
    labels.append(names[-1])
    ks = np.array(ks)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ks, axis=0), axis=1))])
    return s, labels, ks


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def build_oracle(cfg):
    from .geometry import DesignParams, Shape, build_cell
    from .oracle import CountingOracle, make_oracle

    cell = None
    if cfg.oracle == "pwe":
        # explicit shapes (in units of a) replace the model preset
        try:
            shapes = [Shape.from_dict(d, cfg.a) for d in cfg.shapes] if cfg.shapes else None
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed shape entry: {exc}") from exc
        cell = build_cell(DesignParams(cfg.model, tuple(cfg.theta), cfg.a), shapes=shapes,
                          eps_inclusion=cfg.eps_inclusion, eps_background=cfg.eps_background)
    inner = make_oracle(cfg.oracle, cell, cfg.modes_per_axis, cfg.ell + 2, cfg.fd_step, cfg.gradient,
                        a=cfg.a, cutoff=cfg.cutoff)
    return CountingOracle(inner)


def build_mesh(cfg):
    from .bzmesh import build_initial_mesh

    return build_initial_mesh(cfg.domain, cfg.a, cfg.box_lo, cfg.box_hi)


def cmd_bands(cfg):
    from .oracle import eval_many

    oracle = build_oracle(cfg)
    model = cfg.model if cfg.oracle == "pwe" else 2
    s, labels, ks = band_path(model, cfg.a, cfg.points_per_segment)
    L = cfg.n_path_bands
    rows = []
    if len(ks):
        for si, lab, k, smp in zip(s, labels, ks, eval_many(oracle, ks, L, False, cfg.workers)):
            rows.append([float(si), lab, *map(float, k), *np.sqrt(np.maximum(smp.values[:L], 0.0)).tolist()])
    write_csv(os.path.join(cfg.out, "bands.csv"),
              ["s", "label", "kx", "ky", "kz", *[f"omega_{i + 1}" for i in range(L)]], rows)
    return {"n_points": len(rows)}


def cmd_adapt(cfg):
    from .adapt import HISTORY_HEADER, AdaptConfig, adapt_loop
    from .gapopt import objective_phi
    from .hpinterp import assign_degrees, build_interpolant

    oracle = build_oracle(cfg)
    mesh = build_mesh(cfg)
    acfg = AdaptConfig(ell=cfg.ell, kappa=cfg.kappa, tol2=cfg.tol2, n_max=cfg.n_max, workers=cfg.workers,
                       record_timings=cfg.record_timings)
    res = adapt_loop(mesh, oracle, acfg,
                     on_loop=lambda r, *_: log.info("loop %d: %d tets, %d marked", r.loop, r.n_tets, r.n_marked))
    degrees = assign_degrees(mesh, res.flagged, cfg.mu, cfg.degree_cap)
    interp = build_interpolant(mesh, degrees, oracle, (cfg.ell, cfg.ell + 1), cfg.workers)
    write_csv(os.path.join(cfg.out, "history.csv"), HISTORY_HEADER, res.history_rows())
    write_csv(os.path.join(cfg.out, "degrees.csv"), ["tet", "layer", "flagged", "degree"],
              [[t, mesh.layer(t), int(t in set(res.flagged)), degrees.n_T[t]] for t in mesh.live()])
    mesh.save(os.path.join(cfg.out, "mesh.json"))
    interp.save(os.path.join(cfg.out, "interpolant.json"))
    gap = objective_phi(interp, cfg.ell, n_eval=cfg.n_eval, seed=cfg.seed)
    summary = {"n_tets": mesh.n_live, "n_points": interp.n_points, "n_oracle_calls": oracle.calls,
               "phi": gap.phi, "min_upper": gap.min_upper, "max_lower": gap.max_lower}
    _write_summary(os.path.join(cfg.out, "summary.txt"), summary)
    return summary


def cmd_converge(cfg):
    from .bench import RECORD_HEADER, StudyConfig, convergence_study, record_slope

    oracle = build_oracle(cfg)
    scfg = StudyConfig(ell=cfg.ell, n_loops=cfg.n_loops, kappa=cfg.kappa, mu=cfg.mu, tol2=cfg.tol2,
                       degree_cap=cfg.degree_cap, n_eval=cfg.n_eval, seed=cfg.seed, workers=cfg.workers,
                       record_timings=cfg.record_timings)
    recs = convergence_study(lambda: build_mesh(cfg), oracle, scfg)
    rows = [r for rec in recs.values() for r in rec.rows()]
    write_csv(os.path.join(cfg.out, "convergence.csv"), RECORD_HEADER, rows)
    summary = {}
    for name, rec in recs.items():
        try:
            summary[f"slope_{name}"] = record_slope(rec)
        except HPBandsError as exc:
            summary[f"slope_{name}"] = f"unavailable ({exc})"
    summary["target_adaptive"] = -1.0
    summary["target_uniform"] = -1.0 / 3.0
    _write_summary(os.path.join(cfg.out, "summary.txt"), summary)
    return summary


def cmd_optimize(cfg):
    from .gapopt import SYNTHETIC_BOUNDS, SYNTHETIC_START, ModelObjective, bo_loop, synthetic_2d, trace_header

    if cfg.objective == "synthetic":
        fun, start, bounds, feasible, accept, width = synthetic_2d, SYNTHETIC_START, SYNTHETIC_BOUNDS, None, None, 2
    else:
        obj = ModelObjective(cfg.model, cfg.ell, tuple(cfg.bo_free), tuple(cfg.theta) if cfg.theta else None,
                             cfg.a, cfg.modes_per_axis, cfg.gradient, cfg.n_max, cfg.kappa, cfg.mu,
                             cfg.degree_cap, cfg.n_eval, cfg.seed, cfg.workers)
        fun, start, bounds = obj, obj.start(), obj.bounds(cfg.bo_lower)
        feasible, accept, width = obj.feasible, obj.cell_ok, 4

    def report(e):
        log.info("iter %d: phi=%.6g", e.iter, e.phi)

    res = bo_loop(fun, start, bounds, cfg.bo_n_max, cfg.seed, feasible, cfg.paper_stopping,
                  record_timings=cfg.record_timings, on_eval=report, accept=accept)
    if cfg.objective == "model":
        for e in res.trace:
            e.theta = obj.full_theta(e.theta)
        best = obj.full_theta(res.best_theta)
    else:
        best = res.best_theta
    write_csv(os.path.join(cfg.out, "trace.csv"), trace_header(width), res.rows(width))
    summary = {"best_theta": list(best), "best_phi": res.best_phi, "n_evaluations": len(res.trace),
               "stopped_by_guard": res.stopped_by_guard}
    _write_summary(os.path.join(cfg.out, "best.txt"), summary)
    return summary


def _write_summary(path, d):
    with open(path, "w") as fh:
        for k, v in d.items():
            fh.write(f"{k}: {v!r}\n" if isinstance(v, float) else f"{k}: {v}\n")


COMMAND_FUNCS = {"bands": cmd_bands, "adapt": cmd_adapt, "converge": cmd_converge, "optimize": cmd_optimize}


def parser():
    p = argparse.ArgumentParser(prog="hpbands", description="Adaptive hp sampling of photonic band functions.")
    p.add_argument("command", choices=sorted(COMMAND_FUNCS))
    p.add_argument("--config", help="flat JSON config or a manifest from an earlier run")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="parallel oracle evaluations (default: all cores)")
    p.add_argument("--paper-stopping", action="store_true", default=None,
                   help="stop optimization at the first point not better than the start")
    p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                   help="override any config key, e.g. --set n_max=4")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args):
    import json

    out = {"command": args.command, "out": args.out, "seed": args.seed, "workers": args.workers,
           "paper_stopping": args.paper_stopping}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep or key not in KEYS:
            raise ConfigError(f"bad --set entry {item!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        file_values = load_config(args.config) if args.config else {}
        cfg = make_config(file_values, _overrides(args))
        os.makedirs(cfg.out, exist_ok=True)
        write_manifest(cfg, os.path.join(cfg.out, "manifest.json"))
        summary = COMMAND_FUNCS[cfg.command](cfg)
    except HPBandsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    for k, v in summary.items():
        print(f"{k}: {v}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
