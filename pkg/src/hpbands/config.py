"""Flat run configuration: defaults, JSON loading, validation and the run manifest."""

from __future__ import annotations

import json
import math
import os
import platform
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError

COMMANDS = ("bands", "adapt", "converge", "optimize")
DOMAINS = ("ibz_sc_full_sym", "ibz_sc_xy_sym", "box")


@dataclass
class RunConfig:
    command: str = "adapt"
    out: str = "out"
    # oracle
    oracle: str = "empty_lattice"
    model: int = 1
    theta: list = None
    shapes: list = None
    a: float = 1.0
    modes_per_axis: int = 7
    gradient: str = "fd"
    fd_step: float = None
    cutoff: int = 3
    eps_inclusion: float = 13.0
    eps_background: float = 1.0
    # domain
    domain: str = None
    box_lo: list = None
    box_hi: list = None
    # adaptive sampling and interpolation
    ell: int = 1
    kappa: float = 2.0 * math.sqrt(2.0)
    tol2: float = None
    n_max: int = 8
    mu: float = 1.0
    degree_cap: int = 8
    # band path
    n_path_bands: int = 6
    points_per_segment: int = 10
    # accuracy study
    n_loops: int = 8
    n_eval: int = 2000
    seed: int = 0
    # optimization
    objective: str = "model"
    bo_n_max: int = 20
    bo_free: list = None
    bo_lower: float = 0.02
    paper_stopping: bool = False
    # execution
    workers: int = None
    record_timings: bool = False

    def resolved(self):
        """Copy with defaults that depend on other keys filled in."""
        d = asdict(self)
        if d["domain"] is None:
            if d["oracle"] == "empty_lattice":
                d["domain"] = "ibz_sc_full_sym"
            else:
                d["domain"] = "ibz_sc_xy_sym" if d["model"] == 1 else "ibz_sc_full_sym"
        if d["workers"] is None:
            d["workers"] = os.cpu_count() or 1
        if d["bo_free"] is None:
            d["bo_free"] = [0, 1] if d["model"] == 1 else [0, 1, 2, 3]
        if d["theta"] is None and d["oracle"] == "pwe":
            from .geometry import DesignParams

            d["theta"] = list(DesignParams.literature(d["model"], d["a"]).theta)
        cfg = RunConfig(**d)
        cfg.validate()
        return cfg

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"command must be one of {COMMANDS}")
        if self.oracle not in ("empty_lattice", "pwe"):
            raise ConfigError("oracle must be 'empty_lattice' or 'pwe'")
        if self.model not in (1, 2):
            raise ConfigError("model must be 1 or 2")
        if self.domain is not None and self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}")
        if self.domain == "box" and (self.box_lo is None or self.box_hi is None):
            raise ConfigError("a box domain needs box_lo and box_hi")
        if not self.a > 0:
            raise ConfigError("a must be positive")
        if self.modes_per_axis < 3 or self.modes_per_axis % 2 == 0:
            raise ConfigError("modes_per_axis must be odd and >= 3")
        if self.cutoff < 1:
            raise ConfigError("cutoff must be >= 1")
        if self.ell < 1:
            raise ConfigError("ell must be >= 1")
        if not self.kappa > 0:
            raise ConfigError("kappa must be positive")
        if self.tol2 is not None and not self.tol2 > 0:
            raise ConfigError("tol2 must be positive")
        for key in ("n_max", "n_loops", "points_per_segment"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        if not self.mu > 0:
            raise ConfigError("mu must be positive")
        if not 2 <= self.degree_cap <= 8:
            raise ConfigError("degree_cap must lie in [2, 8]")
        if self.n_eval < 1 or self.bo_n_max < 1 or self.n_path_bands < 1:
            raise ConfigError("n_eval, bo_n_max and n_path_bands must be >= 1")
        if self.objective not in ("model", "synthetic"):
            raise ConfigError("objective must be 'model' or 'synthetic'")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.theta is not None and len(self.theta) != 4:
            raise ConfigError("theta must have four entries")
        if self.shapes is not None and (not isinstance(self.shapes, list)
                                        or not all(isinstance(d, dict) for d in self.shapes)):
            raise ConfigError("shapes must be a list of shape objects")
        return self


KEYS = tuple(f.name for f in fields(RunConfig))


def load_config(path):
    """Read a flat JSON config, or the ``config`` block of a manifest."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if isinstance(d, dict) and "config" in d and isinstance(d["config"], dict):
        d = d["config"]
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(d) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return d


def make_config(file_values=None, overrides=None):
    d = dict(file_values or {})
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**d).resolved()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def versions():
    import numpy
    import scipy

    from . import __version__

    return {"hpbands": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(cfg: RunConfig, path):
    with open(path, "w") as fh:
        json.dump({"command": cfg.command, "config": asdict(cfg), "seeds": {"bench": cfg.seed, "bo": cfg.seed},
                   "versions": versions()}, fh, indent=2, sort_keys=True)
