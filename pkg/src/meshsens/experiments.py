"""Experiment drivers behind the command line.

Each ``run_*`` function takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentResult` holding CSV rows, a JSON-able summary, and the list
of failed checks.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .bounds import UNIT_SQUARE_POINCARE, bound_inputs, verify_bounds
from .femcore import coefficients_from_spec, h1_error_vs_exact, h1_seminorm, solve_bvp
from .mesh import SimplicialMesh, build_structured_mesh, mesh_quality, read_mesh
from .quadrature import DEFAULT_DEGREE
from .sensitivity import observed_orders, solve_sensitivity, validate_material_derivative
from .velocity import VelocityField, field_from_spec, random_field, sample_nodal_velocity

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "load_config",
    "split_seed",
    "run_convergence",
    "run_table_smooth",
    "run_table_random",
    "run_validate",
    "mesh_info",
    "COMMAND_DEFAULTS",
    "RATE_WINDOW",
    "MIN_ORDER",
]

RATE_WINDOW = (0.85, 1.15)
MIN_ORDER = 0.9

COMMAND_DEFAULTS = {
    "convergence": {"mesh": {"structured": [10, 20, 40, 80]}},
    "table-smooth": {
        "mesh": {"structured": [40, 80]},
        "velocity": {"kind": "analytic", "name": "paper-smooth"},
        "t_values": [1e-6, 1e-5, 1e-4, 1e-3, 1e-2],
    },
    "table-random": {
        "mesh": {"structured": [40, 80]},
        "velocity": {"kind": "random", "seed": 0},
        "t_values": [1e-6, 1e-5, 1e-4, 1e-3],
        "repeats": 20,
    },
    "validate": {
        "mesh": {"structured": [20]},
        "velocity": {"kind": "analytic", "name": "paper-smooth"},
        "t_values": [1e-4, 1e-3, 1e-2],
    },
    "mesh-info": {"mesh": {"structured": [40]}},
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mesh: dict = field(default_factory=lambda: {"structured": [40]})
    problem: object = "paper-example"
    velocity: dict = field(default_factory=lambda: {"kind": "analytic", "name": "paper-smooth"})
    t_values: list = field(default_factory=lambda: [1e-6, 1e-5, 1e-4, 1e-3, 1e-2])
    repeats: int = 20
    outputs: str = "out"
    solver: dict = field(default_factory=dict)
    quadrature_degree: int = DEFAULT_DEGREE
    c_omega: float = UNIT_SQUARE_POINCARE
    central: bool = False
    threads: int = 1

    def __post_init__(self):
        ts = [float(t) for t in self.t_values]
        if not ts or any(t <= 0 for t in ts):
            raise ConfigError("t_values must be nonempty and strictly positive")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("t_values must be sorted strictly ascending")
        self.t_values = ts
        if int(self.repeats) < 1:
            raise ConfigError("repeats must be at least 1")
        self.repeats = int(self.repeats)
        if not isinstance(self.mesh, dict) or not ({"structured", "file"} & set(self.mesh)):
            raise ConfigError('mesh must be {"structured": N or [N, ...]} or {"file": path}')
        if self.c_omega <= 0:
            raise ConfigError("c_omega must be positive")
        if int(self.threads) < 1:
            raise ConfigError("threads must be at least 1")

    @classmethod
    def from_dict(cls, data: dict, command: Optional[str] = None) -> "ExperimentConfig":
        merged = dict(COMMAND_DEFAULTS.get(command, {}))
        merged.update(data)
        if "C_omega" in merged:
            merged["c_omega"] = merged.pop("C_omega")
        if "quadrature" in merged:
            merged["quadrature_degree"] = int(merged.pop("quadrature")["degree"])
        known = set(cls.__dataclass_fields__)
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**merged)

    def meshes(self) -> list[tuple[str, SimplicialMesh]]:
        if "file" in self.mesh:
            path = self.mesh["file"]
            return [(Path(path).name, read_mesh(path))]
        ns = self.mesh["structured"]
        ns = [ns] if isinstance(ns, int) else list(ns)
        return [(str(n), build_structured_mesh(n)) for n in ns]

    def structured_sizes(self) -> list[int]:
        if "structured" not in self.mesh:
            raise ConfigError("this command needs structured meshes")
        ns = self.mesh["structured"]
        return [ns] if isinstance(ns, int) else [int(n) for n in ns]


def load_config(path, command: Optional[str] = None, **overrides) -> ExperimentConfig:
    data = {}
    if path is not None:
        data = json.loads(Path(path).read_text())
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data, command)


def split_seed(master: int, i: int) -> int:
    """Seed of repeat ``i``: ``master XOR i`` on 64 bits."""
    return (int(master) ^ int(i)) & (2**64 - 1)


@dataclass
class ExperimentResult:
    command: str
    header: list
    rows: list
    summary: dict
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        for row in self.rows:
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def write(self, outdir) -> tuple[Path, Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        stem = self.command.replace("-", "_")
        csv_path = outdir / f"{stem}.csv"
        json_path = outdir / f"{stem}_summary.json"
        csv_path.write_text(self.csv_text())
        summary = dict(self.summary, failures=self.failures, ok=self.ok)
        json_path.write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
        return csv_path, json_path


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --- convergence -----------------------------------------------------------


def run_convergence(cfg: ExperimentConfig) -> ExperimentResult:
    co = coefficients_from_spec(cfg.problem)
    if co.exact_grad is None:
        raise ConfigError("convergence study needs a problem with a known exact solution")
    ns = sorted(cfg.structured_sizes())

    def cell(n):
        mesh = build_structured_mesh(n)
        u = solve_bvp(mesh, co, degree=cfg.quadrature_degree, **cfg.solver)
        q = mesh_quality(mesh)
        return n, q.max_diameter, h1_error_vs_exact(u, co.exact_grad, cfg.quadrature_degree), q

    results = _map(cell, ns, cfg.threads)
    rows, failures = [], []
    prev = None
    for n, h, err, q in results:
        rate = math.nan if prev is None else math.log(prev[1] / err) / math.log(n / prev[0])
        if prev is not None and not (RATE_WINDOW[0] <= rate <= RATE_WINDOW[1]):
            failures.append(f"H1 rate {rate:.3f} between N={prev[0]} and N={n} outside {RATE_WINDOW}")
        rows.append([n, h, err, rate, q.max_aspect, q.min_height])
        prev = (n, err)
    return ExperimentResult(
        "convergence",
        ["N", "h", "h1_error", "rate", "max_aspect", "min_height"],
        rows,
        {"problem": co.name, "rate_window": list(RATE_WINDOW)},
        failures,
    )


# --- sensitivity tables ----------------------------------------------------


def _sensitivity_cell(mesh, co, vf, cfg, ts):
    u, lin = solve_bvp(mesh, co, degree=cfg.quadrature_degree, return_solver=True, **cfg.solver)
    v = sample_nodal_velocity(mesh, vf)
    udot = solve_sensitivity(mesh, co, u, v, solver=lin, degree=cfg.quadrature_degree)
    recs = validate_material_derivative(
        mesh, co, u, v, ts, udot=udot, central=cfg.central,
        degree=cfg.quadrature_degree, solver_kw=cfg.solver,
    )
    inputs = bound_inputs(mesh, co, vf, v, c_omega=cfg.c_omega, degree=cfg.quadrature_degree)
    report = verify_bounds(mesh, co, vf, udot, v, inputs=inputs)
    stability = h1_seminorm(u) <= cfg.c_omega * inputs.f_l2 / co.a0
    return recs, report, stability


def _bound_failures(label, report, stability):
    out = []
    if not report.nonsmooth_ok:
        out.append(f"{label}: nonsmooth bound violated ({report.measured:.4g} > {report.nonsmooth_rhs:.4g})")
    if report.smooth_ok is False:
        out.append(f"{label}: smooth bound violated ({report.measured:.4g} > {report.smooth_rhs:.4g})")
    if not stability:
        out.append(f"{label}: stability ||grad u_h|| <= C_Omega ||f|| / a0 violated")
    return out


def run_table_smooth(cfg: ExperimentConfig) -> ExperimentResult:
    co = coefficients_from_spec(cfg.problem)
    vf = field_from_spec(cfg.velocity)
    if not vf.smooth:
        raise ConfigError("table-smooth needs an analytic field with a gradient norm")
    meshes = cfg.meshes()
    results = _map(lambda nm: _sensitivity_cell(nm[1], co, vf, cfg, cfg.t_values), meshes, cfg.threads)
    rows, failures, bounds = [], [], {}
    for (label, _), (recs, report, stab) in zip(meshes, results):
        for r in recs:
            status = "ok" if r.ok else "inverted"
            rows.append([label, r.t, r.change_norm, r.analytic_norm, r.t * r.analytic_norm, r.fd_norm, status])
        bounds[label] = report.as_dict()
        failures += _bound_failures(f"N={label}", report, stab)
    return ExperimentResult(
        "table-smooth",
        ["N", "t", "change_norm", "derivative_norm", "t_times_derivative_norm", "fd_norm", "status"],
        rows,
        {"problem": co.name, "velocity": vf.name, "bounds": bounds,
         "norms_estimated": vf.norms_estimated},
        failures,
    )


def run_table_random(cfg: ExperimentConfig) -> ExperimentResult:
    co = coefficients_from_spec(cfg.problem)
    if cfg.velocity.get("kind") != "random":
        raise ConfigError("table-random needs a random velocity spec")
    master = int(cfg.velocity.get("seed", 0))
    meshes = cfg.meshes()
    cells = [(label, mesh, i) for label, mesh in meshes for i in range(cfg.repeats)]

    def cell(c):
        label, mesh, i = c
        vf = random_field(split_seed(master, i), mesh.dim)
        return _sensitivity_cell(mesh, co, vf, cfg, cfg.t_values)

    results = _map(cell, cells, cfg.threads)
    rows, failures, bounds = [], [], {}
    for label, _ in meshes:
        runs = [(c, r) for c, r in zip(cells, results) if c[0] == label]
        bounds[label] = {
            "max_ratio_nonsmooth": max(r[1].measured / r[1].nonsmooth_rhs for _, r in runs),
            "all_satisfied": all(r[1].satisfied for _, r in runs),
        }
        for (c, (recs, report, stab)) in runs:
            failures += _bound_failures(f"N={label} repeat={c[2]}", report, stab)
        for j, t in enumerate(cfg.t_values):
            vals = np.array([r[0][j].change_norm for _, r in runs])
            dnorm = np.array([r[0][j].analytic_norm for _, r in runs])
            inverted = int(np.isnan(vals).sum())
            good = vals[~np.isnan(vals)]
            stats = (good.mean(), good.min(), good.max(), good.std()) if len(good) else (math.nan,) * 4
            rows.append([label, t, *map(float, stats), float(dnorm.mean()),
                         float(t * dnorm.mean()), len(good), inverted])
    return ExperimentResult(
        "table-random",
        ["N", "t", "mean_change_norm", "min_change_norm", "max_change_norm", "std_change_norm",
         "mean_derivative_norm", "t_times_mean_derivative_norm", "runs", "inverted"],
        rows,
        {"problem": co.name, "master_seed": master, "repeats": cfg.repeats, "bounds": bounds},
        failures,
    )


def run_validate(cfg: ExperimentConfig) -> ExperimentResult:
    co = coefficients_from_spec(cfg.problem)
    vf = field_from_spec(cfg.velocity)
    meshes = cfg.meshes()
    results = _map(lambda nm: _sensitivity_cell(nm[1], co, vf, cfg, cfg.t_values), meshes, cfg.threads)
    rows, failures, bounds = [], [], {}
    for (label, _), (recs, report, stab) in zip(meshes, results):
        good = [r for r in recs if r.ok]
        ts = [r.t for r in good]
        errs = [r.discrepancy for r in good]
        if all(e == 0.0 for e in errs):
            orders = [math.nan] * max(len(errs) - 1, 0)
        else:
            orders = observed_orders(ts, errs)
            for (t0, t1), p in zip(zip(ts, ts[1:]), orders):
                if not p >= MIN_ORDER:
                    failures.append(f"N={label}: observed order {p:.3f} between t={t0:g} and t={t1:g} below {MIN_ORDER}")
        for r in recs:
            if not r.ok:
                failures.append(f"N={label}: t={r.t:g} skipped ({r.note})")
        order_of = {r.t: math.nan for r in recs}
        for t1, p in zip(ts[1:], orders):
            order_of[t1] = p
        for r in recs:
            rows.append([label, r.t, r.change_norm, r.fd_norm, r.analytic_norm, r.discrepancy, order_of[r.t]])
        bounds[label] = report.as_dict()
        failures += _bound_failures(f"N={label}", report, stab)
    return ExperimentResult(
        "validate",
        ["N", "t", "change_norm", "fd_norm", "analytic_norm", "discrepancy", "observed_order"],
        rows,
        {"problem": co.name, "velocity": vf.name or cfg.velocity, "bounds": bounds,
         "min_order": MIN_ORDER, "central": cfg.central},
        failures,
    )


def mesh_info(cfg: ExperimentConfig) -> ExperimentResult:
    rows = []
    for label, mesh in cfg.meshes():
        q = mesh_quality(mesh)
        rows.append([label, mesh.dim, mesh.n_vertices, mesh.n_elements, int(mesh.boundary.sum()),
                     float(mesh.geometry.volume.sum()), q.max_aspect, q.min_height, q.max_diameter])
    return ExperimentResult(
        "mesh-info",
        ["mesh", "dim", "vertices", "elements", "boundary_vertices", "volume",
         "max_aspect", "min_height", "max_diameter"],
        rows,
        {},
        [],
    )


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MESHSENS_THREADS", "1")))
    except ValueError:
        return 1
