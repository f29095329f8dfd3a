"""Command-line entry point.

Every command reads an optional INI configuration (see ``docs/config.md``),
validates it completely, loads all input files and only then computes.
Outputs are buffered and written once the computation has finished, so a
configuration or input error never leaves files behind.  A JSON run manifest
is written for successful runs and for compute failures.

Exit codes: 0 success, 2 configuration or input error, 3 compute error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__, analytic, fileio
from .errors import (
    EEGOCError,
    InputError,
    LocationError,
    ParameterError,
    UnsupportedFeatureError,
    UsageError,
)
from .fem import ConductivityMap, ElectrodeSet, nodal_volumes, read_electrodes, write_electrodes
from .mesh import (
    BoundaryTag,
    build_shell_mesh,
    extract_cortex,
    load_msh,
    project_to_boundary,
    read_dump,
    write_dump,
)
from .pipeline import (
    assemble_problem,
    build_lead_field_oracle,
    convergence_study,
    default_gamma,
    pearson,
    reconstruct,
    reduced_gradient,
    smooth_test_field,
    sweep_epsilon,
)
from .systems import build_qrm, solve

EXIT_OK, EXIT_CONFIG, EXIT_COMPUTE = 0, 2, 3
OUT_ENV = "EEGOC_OUT"
MAX_SEED = 2**64 - 1


class ConfigError(EEGOCError):
    """The configuration is malformed or inconsistent."""


# --------------------------------------------------------------------------
# configuration schema
# --------------------------------------------------------------------------

def _float(s):
    return float(s)


def _floats(s):
    return [float(x) for x in s.replace(",", " ").split()]


def _ints(s):
    return [int(x) for x in s.replace(",", " ").split()]


def _mapping(conv):
    def parse(s):
        out = {}
        for item in s.replace(",", " ").split():
            k, sep, v = item.partition(":")
            if not sep:
                raise ValueError(f"expected key:value, got {item!r}")
            out[int(k)] = conv(v)
        return out
    return parse


def _choice(*options):
    def parse(s):
        s = s.strip().lower()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return parse


SCHEMA = {
    "run": {"out": (str, None)},
    "mesh": {
        "source": (_choice("shell", "msh", "dump"), "shell"),
        "r_inner": (_float, 0.7),
        "r_outer": (_float, 1.0),
        "level": (int, 0),
        "base_subdivisions": (int, 3),
        "base_layers": (int, 1),
        "max_elements": (int, 2_000_000),
        "path": (str, None),
        "tags": (_mapping(str), None),
    },
    "conductivity": {
        "sigma": (_float, 1.0),
        "regions": (_mapping(float), None),
    },
    "electrodes": {
        "source": (_choice("hemisphere", "file"), "hemisphere"),
        "count": (int, 198),
        "path": (str, None),
    },
    "data": {
        "source": (_choice("synthetic", "file"), "synthetic"),
        "path": (str, None),
        "noise": (_float, 0.0),
        "seed": (int, 0),
        "l_max": (int, 25),
        "half_width": (_float, 10.0),
        "arm_length": (_float, 35.0),
        "rolloff": (_float, 2.0),
        "weighting": (_choice("electrodes", "inverse_std"), "electrodes"),
    },
    "solver": {
        "epsilon": (_float, 1e-9),
        "epsilons": (_floats, None),
        "gamma": (_float, None),
        "method": (_choice("direct", "iterative"), "direct"),
        "tol": (_float, 1e-10),
    },
    "oracle": {
        "cap": (int, 2000),
        "epsilons": (_floats, [1e-6, 1e-8, 1e-10]),
    },
    "qrm": {
        "epsilon": (_float, 1e-8),
        "delta": (_float, 1e-8),
        "g_d": (_choice("synthetic", "constant"), "synthetic"),
        "constant": (_float, 1.0),
    },
    "convergence": {
        "levels": (_ints, [0, 1, 2]),
        "base_subdivisions": (int, 3),
        "kkt_epsilon": (_float, None),
        "kkt_levels": (_ints, None),
        "kkt_base_subdivisions": (int, 2),
    },
}
PATH_KEYS = {("mesh", "path"), ("electrodes", "path"), ("data", "path")}


@dataclass
class RunConfig:
    """Validated configuration: ``values[section][key]`` plus run-level flags."""

    values: dict
    out: Path
    seed: int
    threads: int
    source: Path | None = None
    inputs: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.values[section]

    def canonical(self):
        out = {}
        for sec, keys in self.values.items():
            out[sec] = {k: (str(v) if isinstance(v, Path) else v) for k, v in keys.items()}
        return out


def load_config(path=None, *, out=None, seed=None, threads=1):
    parser = configparser.ConfigParser(interpolation=None)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        base = path.resolve().parent
    values = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {k: default for k, (_, default) in keys.items()}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key '{key}' in [{sec}]")
            conv = SCHEMA[sec][key][0]
            try:
                val = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}") from None
            if (sec, key) in PATH_KEYS:
                val = (base / val).resolve()
            values[sec][key] = val
    if seed is not None:
        values["data"]["seed"] = seed
    if not 0 <= values["data"]["seed"] <= MAX_SEED:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    out_dir = out or os.environ.get(OUT_ENV) or values["run"]["out"] or "eegoc-out"
    out_dir = Path(out_dir)
    if not out_dir.is_absolute() and out is None and os.environ.get(OUT_ENV) is None \
            and values["run"]["out"]:
        out_dir = base / out_dir
    cfg = RunConfig(values, out_dir.resolve(), values["data"]["seed"], threads, path)
    _check_values(cfg)
    return cfg


def _check_values(cfg):
    m, d, s = cfg["mesh"], cfg["data"], cfg["solver"]
    if m["source"] == "shell":
        if not 0 < m["r_inner"] < m["r_outer"]:
            raise ConfigError("mesh radii must satisfy 0 < r_inner < r_outer")
        if m["level"] < 0 or m["base_subdivisions"] < 0 or m["base_layers"] < 1:
            raise ConfigError("mesh level and subdivisions must be non-negative, base_layers >= 1")
    elif m["path"] is None:
        raise ConfigError(f"mesh source '{m['source']}' needs a path")
    if m["source"] == "msh" and not m["tags"]:
        raise ConfigError("an MSH mesh needs a tag table, e.g. tags = 1:scalp, 2:cortex")
    if m["tags"]:
        for v in m["tags"].values():
            if v.upper() not in BoundaryTag.__members__:
                raise ConfigError(f"unknown boundary tag {v!r}")
    if not cfg["conductivity"]["sigma"] > 0:
        raise ConfigError("sigma must be positive")
    regions = cfg["conductivity"]["regions"]
    if regions and not all(v > 0 for v in regions.values()):
        raise ConfigError("region conductivities must be positive")
    if cfg["electrodes"]["source"] == "file" and cfg["electrodes"]["path"] is None:
        raise ConfigError("electrode source 'file' needs a path")
    if cfg["electrodes"]["count"] < 1:
        raise ConfigError("electrode count must be positive")
    if d["source"] == "file" and d["path"] is None:
        raise ConfigError("data source 'file' needs a path")
    if d["source"] == "synthetic" and m["source"] != "shell":
        raise ConfigError("synthetic data needs the built-in shell mesh")
    if d["noise"] < 0:
        raise ConfigError("noise level must be non-negative")
    if d["l_max"] < 0:
        raise ConfigError("l_max must be non-negative")
    if not s["epsilon"] > 0:
        raise ConfigError("epsilon must be positive")
    if s["epsilons"] is not None:
        eps = s["epsilons"]
        if not eps:
            raise ConfigError("epsilons is empty")
        if any(not e > 0 for e in eps) or len(set(eps)) != len(eps):
            raise ConfigError("epsilons must be positive and distinct")
    if s["gamma"] is not None and s["gamma"] < 0:
        raise ConfigError("gamma must be non-negative")
    if not s["tol"] > 0:
        raise ConfigError("tol must be positive")
    if any(not e > 0 for e in cfg["oracle"]["epsilons"]) or not cfg["oracle"]["epsilons"]:
        raise ConfigError("oracle epsilons must be positive")
    if len(cfg["convergence"]["levels"]) < 3:
        raise ConfigError("convergence needs at least three levels")


# --------------------------------------------------------------------------
# shared setup
# --------------------------------------------------------------------------

def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require_file(cfg, path, what):
    if not Path(path).is_file():
        raise InputError(f"{what} file not found: {path}")
    cfg.inputs[str(path)] = _sha256(path)


def _load_inputs(cfg, need_electrodes=False, need_data=False):
    """Read every input file named by the config before any compute starts."""
    loaded = {}
    m = cfg["mesh"]
    if m["source"] == "msh":
        _require_file(cfg, m["path"], "mesh")
        loaded["mesh"] = load_msh(m["path"], m["tags"])
    elif m["source"] == "dump":
        _require_file(cfg, m["path"], "mesh")
        loaded["mesh"] = read_dump(m["path"])
    if need_electrodes and cfg["electrodes"]["source"] == "file":
        _require_file(cfg, cfg["electrodes"]["path"], "electrode")
        loaded["electrodes"] = read_electrodes(cfg["electrodes"]["path"])
    if need_data and cfg["data"]["source"] == "file":
        _require_file(cfg, cfg["data"]["path"], "data")
        loaded["data"] = fileio.read_data(cfg["data"]["path"])
    return loaded


def _mesh(cfg, loaded, level=None):
    if "mesh" in loaded:
        return loaded["mesh"]
    m = cfg["mesh"]
    return build_shell_mesh(m["r_inner"], m["r_outer"], m["level"] if level is None else level,
                            base_subdivisions=m["base_subdivisions"], base_layers=m["base_layers"],
                            max_elements=m["max_elements"])


def _conductivity(cfg, mesh):
    c = cfg["conductivity"]
    if c["regions"]:
        cond = ConductivityMap(c["regions"])
        cond.per_tet(mesh)
        return cond
    return ConductivityMap.uniform(mesh, c["sigma"])


def _field(cfg):
    d, m = cfg["data"], cfg["mesh"]
    cross = analytic.CrossSpec(d["half_width"], d["arm_length"], d["rolloff"])
    return analytic.fit_shell_field(lambda p: analytic.cross_pattern(p, cross), d["l_max"],
                                    m["r_inner"], m["r_outer"])


def _electrodes(cfg, loaded, mesh):
    if "electrodes" in loaded:
        return loaded["electrodes"]
    layout = analytic.electrode_layout_hemisphere(cfg["electrodes"]["count"], cfg["mesh"]["r_outer"])
    pos = project_to_boundary(layout.positions, mesh, BoundaryTag.SCALP)
    return ElectrodeSet(pos, layout.weights)


@dataclass
class Problem:
    mesh: object
    cond: object
    electrodes: ElectrodeSet
    d: np.ndarray
    s: np.ndarray
    field: object = None

    def truth(self, points):
        if self.field is None:
            return None
        return analytic.eval_field(self.field, points, check=False)


def _problem(cfg, loaded):
    mesh = _mesh(cfg, loaded)
    cond = _conductivity(cfg, mesh)
    electrodes = _electrodes(cfg, loaded, mesh)
    fld = None
    if "data" in loaded:
        d, s = loaded["data"]
        if len(d) != electrodes.count:
            raise InputError(f"data file has {len(d)} values for {electrodes.count} electrodes")
    else:
        fld = _field(cfg)
        clean = analytic.eval_field(fld, electrodes.positions, check=False)
        d, s = analytic.add_noise(clean, analytic.NoiseSpec(cfg["data"]["noise"], cfg.seed))
    if cfg["data"]["weighting"] == "inverse_std":
        if not np.all(s > 0):
            raise InputError("inverse_std weighting needs strictly positive std values")
        electrodes = electrodes.with_weights(1.0 / s)
    return Problem(mesh, cond, electrodes, d, s, fld)


def _eps_tag(eps):
    return "eps_" + repr(float(eps))


# --------------------------------------------------------------------------
# output buffering and manifest
# --------------------------------------------------------------------------

class Outputs:
    """Deferred file writes, committed together at the end of a command."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self._pending = []

    def add(self, name, writer, *args, **kwargs):
        self._pending.append((name, writer, args, kwargs))

    def names(self):
        return [name for name, *_ in self._pending]

    def commit(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        for name, writer, args, kwargs in self._pending:
            writer(self.dir / name, *args, **kwargs)


def _text_writer(path, text):
    Path(path).write_text(text)


def _versions():
    return {"eegoc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _manifest(cfg, command, status, metrics, outputs, timings, error=None):
    man = {
        "command": command,
        "status": status,
        "config": cfg.canonical(),
        "config_file": None if cfg.source is None else str(cfg.source),
        "inputs": dict(sorted(cfg.inputs.items())),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "versions": _versions(),
        "metrics": metrics,
        "outputs": sorted(outputs),
        "timings": timings,
    }
    if error is not None:
        man["error"] = error
    return man


def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_mesh_shell(cfg, out, metrics):
    if cfg["mesh"]["source"] != "shell":
        raise ConfigError("mesh-shell needs mesh source 'shell'")
    mesh = _mesh(cfg, {})
    metrics.update(n_tets=mesh.n_tets, n_nodes=mesh.n_nodes, h=mesh.max_edge_length(),
                   volume=mesh.volume())
    out.add("mesh.dump", lambda path: write_dump(mesh, path))
    out.add("mesh.vtk", fileio.write_vtk_volume, mesh)
    print(f"shell mesh: {mesh.n_tets} tets, {mesh.n_nodes} nodes, h = {mesh.max_edge_length():.4g}")


def cmd_synth(cfg, out, metrics):
    if cfg["data"]["source"] != "synthetic":
        raise ConfigError("synth needs data source 'synthetic'")
    loaded = _load_inputs(cfg, need_electrodes=True)
    p = _problem(cfg, loaded)
    blocks = assemble_problem(p.mesh, p.cond, p.electrodes)
    truth = p.truth(blocks.surface.points)
    metrics.update(n_electrodes=p.electrodes.count, n_tets=p.mesh.n_tets,
                   noise=cfg["data"]["noise"], data_norm=float(np.linalg.norm(p.d)))
    out.add("mesh.dump", lambda path: write_dump(p.mesh, path))
    out.add("electrodes.txt", lambda path: write_electrodes(p.electrodes, path))
    out.add("data.txt", fileio.write_data, p.d, p.s)
    out.add("truth_cortex.field", fileio.write_field, truth, "u_cortex")
    out.add("truth_cortex.vtk", fileio.write_vtk_surface, blocks.surface, {"u_true": truth})


def _solve_all(cfg, p, epsilons, threads):
    s_cfg = cfg["solver"]
    blocks = assemble_problem(p.mesh, p.cond, p.electrodes)
    s = p.s if np.all(p.s > 0) else None
    curve = sweep_epsilon(blocks, p.d, epsilons, s=s, gamma=s_cfg["gamma"],
                          method=s_cfg["method"], tol=s_cfg["tol"], threads=threads)
    return blocks, curve


def _emit_reconstructions(cfg, out, metrics, p, blocks, curve):
    truth = p.truth(blocks.surface.points)
    rows = []
    for res in curve.results:
        tag = _eps_tag(res.epsilon)
        trace = blocks.cortex_trace(res.u)
        row = {"epsilon": res.epsilon, "gamma": res.gamma, "residual_norm": res.residual_norm,
               "rmse": res.rmse, "stationarity": list(res.stationarity),
               "solver": {"method": res.report.method, "relative_residual": res.report.relative_residual,
                          "iterations": res.report.iterations}}
        if truth is not None:
            row["pearson"] = pearson(trace, truth)
        rows.append(row)
        surf_data = {"f": res.f, "u": trace}
        if truth is not None:
            surf_data["u_true"] = truth
        out.add(f"u_{tag}.vtk", fileio.write_vtk_volume, p.mesh, {"u": res.u})
        out.add(f"f_{tag}.vtk", fileio.write_vtk_surface, blocks.surface, surf_data)
        out.add(f"u_{tag}.field", fileio.write_field, res.u, "u")
        out.add(f"f_{tag}.field", fileio.write_field, res.f, "f")
    out.add("curve.csv", _text_writer, curve.to_csv())
    metrics["runs"] = rows
    metrics["crosses_one"] = curve.crosses() if np.any(np.isfinite(curve.rmses)) else None
    metrics["first_below_one"] = curve.first_below()


def cmd_reconstruct(cfg, out, metrics, *, require_list=False):
    s_cfg = cfg["solver"]
    if require_list and not s_cfg["epsilons"]:
        raise ConfigError("sweep needs [solver] epsilons")
    epsilons = s_cfg["epsilons"] or [s_cfg["epsilon"]]
    loaded = _load_inputs(cfg, need_electrodes=True, need_data=True)
    p = _problem(cfg, loaded)
    blocks, curve = _solve_all(cfg, p, epsilons, cfg.threads)
    _emit_reconstructions(cfg, out, metrics, p, blocks, curve)
    for row in metrics["runs"]:
        extra = f"  pearson {row['pearson']:.4f}" if "pearson" in row else ""
        e = "" if row["rmse"] is None else f"  rmse {row['rmse']:.4g}"
        print(f"eps {row['epsilon']:.3g}: residual {row['residual_norm']:.4e}{e}{extra}")


def cmd_sweep(cfg, out, metrics):
    cmd_reconstruct(cfg, out, metrics, require_list=True)


def cmd_oracle(cfg, out, metrics):
    loaded = _load_inputs(cfg, need_electrodes=True, need_data=True)
    p = _problem(cfg, loaded)
    blocks = assemble_problem(p.mesh, p.cond, p.electrodes)
    oracle = build_lead_field_oracle(None, None, None, cap=cfg["oracle"]["cap"], blocks=blocks)
    vol = nodal_volumes(blocks.mesh)
    rows = []
    for eps in cfg["oracle"]["epsilons"]:
        gamma = default_gamma(blocks.A_core) if cfg["solver"]["gamma"] is None else cfg["solver"]["gamma"]
        res = reconstruct(None, None, None, p.d, eps, gamma=gamma, blocks=blocks,
                          method=cfg["solver"]["method"], tol=cfg["solver"]["tol"])
        f_o, c_o = oracle.tikhonov(p.d, eps, gamma)
        scale = np.linalg.norm(f_o)
        diff = 0.0 if scale == 0 and not np.any(res.f) else float(np.linalg.norm(res.f - f_o) / scale)
        # the constant of u at the KKT solution, in the oracle's gauge
        c = float(res.u @ vol / vol.sum())
        grad = reduced_gradient(blocks, res.f, c, p.d, eps, gamma)
        gscale = np.linalg.norm(np.concatenate([oracle.L.T @ (blocks.electrodes.weights * p.d),
                                                [oracle.const @ (blocks.electrodes.weights * p.d)]]))
        lam_o = oracle.adjoint(res.u, p.d)
        lscale = np.linalg.norm(lam_o)
        rows.append({
            "epsilon": eps,
            "gamma": gamma,
            "relative_f_difference": diff,
            "reduced_gradient_norm": float(np.linalg.norm(grad)),
            "relative_reduced_gradient": float(np.linalg.norm(grad) / gscale) if gscale else 0.0,
            "relative_adjoint_difference": float(np.linalg.norm(res.lam - lam_o) / lscale) if lscale else 0.0,
            "stationarity": list(res.stationarity),
        })
    metrics["oracle"] = rows
    lines = ["epsilon  rel_f_diff  rel_reduced_gradient  rel_adjoint_diff"]
    for r in rows:
        lines.append(f"{r['epsilon']:.3g}  {r['relative_f_difference']:.3e}  "
                     f"{r['relative_reduced_gradient']:.3e}  {r['relative_adjoint_difference']:.3e}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    out.add("oracle_report.txt", _text_writer, text)


def cmd_qrm(cfg, out, metrics):
    q = cfg["qrm"]
    if q["g_d"] == "synthetic" and cfg["mesh"]["source"] != "shell":
        raise ConfigError("synthetic g_D needs the built-in shell mesh")
    loaded = _load_inputs(cfg)
    mesh = _mesh(cfg, loaded)
    cond = _conductivity(cfg, mesh)
    scalp = mesh.boundary_nodes(BoundaryTag.SCALP)
    fld = None
    if q["g_d"] == "synthetic":
        fld = _field(cfg)
        g = analytic.eval_field(fld, mesh.vertices[scalp], check=False)
    else:
        g = np.full(len(scalp), q["constant"])
    system = build_qrm(mesh, cond, g, q["epsilon"], q["delta"])
    x, report = solve(system, tol=cfg["solver"]["tol"], method=cfg["solver"]["method"])
    u, lam = system.expand(x)
    cortex = mesh.boundary_nodes(BoundaryTag.CORTEX)
    surf = extract_cortex(mesh)
    trace = u[surf.surf_to_vol]
    metrics.update(epsilon=q["epsilon"], delta=q["delta"], relative_residual=report.relative_residual,
                   variational_residuals=list(system.variational_residuals(x)),
                   n_cortex_nodes=len(cortex))
    data = {"u_qrm": trace}
    if fld is not None:
        truth = analytic.eval_field(fld, surf.points, check=False)
        metrics["pearson"] = pearson(trace, truth)
        data["u_true"] = truth
        print(f"QRM cortical trace: pearson {metrics['pearson']:.4f}")
    out.add("qrm_cortex.field", fileio.write_field, trace, "u_cortex")
    out.add("qrm_cortex.vtk", fileio.write_vtk_surface, surf, data)
    out.add("qrm_u.vtk", fileio.write_vtk_volume, mesh, {"u": u, "lambda": lam})


def cmd_convergence(cfg, out, metrics):
    c, m = cfg["convergence"], cfg["mesh"]
    if m["source"] != "shell":
        raise ConfigError("convergence needs the built-in shell mesh")
    fld = smooth_test_field(m["r_inner"], m["r_outer"])
    table = convergence_study(c["levels"], fld, sigma=cfg["conductivity"]["sigma"],
                              kkt_epsilon=c["kkt_epsilon"], kkt_levels=c["kkt_levels"],
                              n_electrodes=cfg["electrodes"]["count"],
                              base_subdivisions=c["base_subdivisions"],
                              kkt_base_subdivisions=c["kkt_base_subdivisions"])
    metrics.update(h=table.h, n_tets=table.n_tets, h1_errors=table.h1_errors,
                   l2_errors=table.l2_errors, h1_rate=_finite(table.h1_rate),
                   l2_rate=_finite(table.l2_rate))
    if table.kkt_errors:
        metrics.update(kkt_h=table.kkt_h, kkt_errors=table.kkt_errors,
                       kkt_rate=_finite(table.kkt_rate),
                       stationarity=[list(s) for s in table.stationarity])
    text = "\n".join(table.lines()) + "\n"
    print(text, end="")
    csv_lines = ["level,h,n_tets,h1_error,l2_error"]
    csv_lines += [f"{lv},{h:.17g},{n},{a:.17g},{b:.17g}" for lv, h, n, a, b in
                  zip(table.levels, table.h, table.n_tets, table.h1_errors, table.l2_errors)]
    out.add("convergence.txt", _text_writer, text)
    out.add("convergence.csv", _text_writer, "\n".join(csv_lines) + "\n")


COMMANDS = {
    "mesh-shell": (cmd_mesh_shell, "build the spherical-shell mesh"),
    "synth": (cmd_synth, "synthesize electrode data from the analytic shell field"),
    "reconstruct": (cmd_reconstruct, "reconstruct cortical activity for one or more epsilons"),
    "sweep": (cmd_sweep, "epsilon sweep (requires [solver] epsilons)"),
    "oracle": (cmd_oracle, "compare the KKT solution with the dense lead-field oracle"),
    "qrm": (cmd_qrm, "quasi-reversibility baseline from a scalp Dirichlet trace"),
    "convergence": (cmd_convergence, "h-convergence study on nested shell meshes"),
}

CONFIG_ERRORS = (ConfigError, InputError, ParameterError, UsageError, UnsupportedFeatureError,
                 LocationError)


def _error_record(exc, code):
    return {"type": type(exc).__name__, "message": str(exc), "exit_code": code}


def build_parser():
    parser = argparse.ArgumentParser(prog="eegoc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"eegoc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="INI configuration file")
        p.add_argument("--out", type=Path, help="output directory (overrides the config and $EEGOC_OUT)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for sweeps")
        p.add_argument("--seed", type=int, help="noise seed (unsigned 64-bit)")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed, threads=args.threads)
    except CONFIG_ERRORS as exc:
        print(json.dumps({"error": _error_record(exc, EXIT_CONFIG)}), file=sys.stderr)
        return EXIT_CONFIG

    out = Outputs(cfg.out)
    metrics = {}
    t0 = time.perf_counter()
    try:
        func(cfg, out, metrics)
    except CONFIG_ERRORS as exc:
        print(json.dumps({"error": _error_record(exc, EXIT_CONFIG)}), file=sys.stderr)
        return EXIT_CONFIG
    except (EEGOCError, ArithmeticError, MemoryError, np.linalg.LinAlgError, RuntimeError) as exc:
        record = _error_record(exc, EXIT_COMPUTE)
        timings = {"total_seconds": time.perf_counter() - t0}
        cfg.out.mkdir(parents=True, exist_ok=True)
        fileio.write_json(cfg.out / "manifest.json",
                          _manifest(cfg, args.command, "error", metrics, [], timings, record))
        print(json.dumps({"error": record}), file=sys.stderr)
        return EXIT_COMPUTE
    timings = {"total_seconds": time.perf_counter() - t0}
    names = out.names()
    out.add("manifest.json", fileio.write_json,
            _manifest(cfg, args.command, "ok", metrics, names, timings))
    out.commit()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
