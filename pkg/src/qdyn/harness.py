"""Configuration-driven orchestration of audits, spectra and experiments.

A run is a single JSON document with four blocks (surface, potentials,
grid, run) plus a command.  Parsing fills defaults and rejects unknown or
out-of-range keys naming the offending path; the canonical echo of the
config is embedded in every result bundle so experiments are reproducible
byte-for-byte from their own output.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import AuditFailure, ConfigError, ParameterError
from .evolution import (
    PropagatorConfig,
    convergence_experiment,
    propagate,
    _auto_step,
    default_initial_state,
    loglog_slope,
)
from .fields import build_potentials, gauge_transform, hypothesis_audit
from .geometry import make_chart, shape_operator
from .operators import (
    GridSpec,
    assemble_effective,
    assemble_kinetic_bound,
    assemble_scaled,
    dump_operator,
    lowest_eigenvalues,
)

__all__ = ["RunConfig", "ResultBundle", "run", "spectrum", "emit", "COMMANDS"]

COMMANDS = ("geometry-audit", "gauge-check", "spectrum", "evolve",
            "converge", "hypothesis-audit")

_DEFAULTS = {
    "surface": {"kind": "torus", "R": 2.0, "r": 1.0, "eps": 0.1},
    "potentials": {
        "W": {"kind": "y2", "c": 0.1},
        "A": {"tangential": {"kind": "zero", "a": 0.3, "a1": 0.0, "a2": 0.0},
              "normal": {"kind": "zero", "c": 0.5, "c0": 1.0}},
        "V": {"kind": "zero", "v0": 0.2},
    },
    "grid": {"N1": 24, "N2": 24, "Ny": 96, "Y": 8.0},
    "run": {"seed": 42, "lambdas": [4.0, 8.0, 16.0, 32.0], "lambda": 8.0,
            "T": 1.0, "n_samples": 200, "step_tol": 1e-10, "krylov_dim": 160,
            "eps_leak": 0.0, "operator": "H_O", "k": 6, "dt": 0.0,
            "dump_operator": False},
}

_REQUIRED = ("surface", "potentials")


def _merge(defaults, user, path):
    if not isinstance(user, dict):
        raise ConfigError(f"config key '{path}' must be a mapping")
    out = {}
    for key, dval in defaults.items():
        if key in user:
            uval = user[key]
            if isinstance(dval, dict):
                out[key] = _merge(dval, uval, f"{path}.{key}" if path else key)
            elif isinstance(dval, bool):
                if not isinstance(uval, bool):
                    raise ConfigError(f"config key '{path}.{key}' must be boolean")
                out[key] = uval
            elif isinstance(dval, list):
                out[key] = [float(v) for v in uval]
            elif isinstance(dval, float):
                out[key] = float(uval)
            elif isinstance(dval, int):
                out[key] = int(uval)
            else:
                out[key] = str(uval)
        else:
            out[key] = json.loads(json.dumps(dval))
    for key in user:
        if key not in defaults:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key '{where}'")
    return out


@dataclass
class RunConfig:
    """Validated, canonicalized configuration."""

    data: dict

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        missing = [k for k in _REQUIRED if k not in raw]
        if missing:
            raise ConfigError(
                "config is missing required blocks: " + ", ".join(missing)
                + " (required: surface, potentials; optional: grid, run)")
        data = _merge(_DEFAULTS, raw, "")
        g = data["grid"]
        if g["N1"] % 2 or g["N2"] % 2 or g["N1"] <= 0 or g["N2"] <= 0:
            raise ConfigError("grid.N1 and grid.N2 must be positive even integers")
        if g["Ny"] <= 2 or g["Y"] <= 0:
            raise ConfigError("grid.Ny must exceed 2 and grid.Y must be positive")
        r = data["run"]
        if not r["lambdas"] or min(r["lambdas"]) < 1.0:
            raise ConfigError("run.lambdas must be a nonempty list of values >= 1")
        if r["T"] <= 0:
            raise ConfigError("run.T must be positive")
        if not 1 <= r["k"] <= 12:
            raise ConfigError("run.k must lie in 1..12")
        if r["operator"] not in ("H_sigma", "H_O", "L0", "L_lambda"):
            raise ConfigError("run.operator must be one of H_sigma, H_O, L0, L_lambda")
        return cls(data=data)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON ({path}:{exc.lineno}): {exc.msg}")
        return cls.from_dict(raw)

    def canonical(self):
        return json.loads(json.dumps(self.data, sort_keys=True))

    def chart(self):
        s = self.data["surface"]
        return make_chart(s["kind"], R=s["R"], r=s["r"], eps=s["eps"])

    def potentials(self):
        p = self.data["potentials"]
        return build_potentials(p["W"], p["A"], p["V"])

    def grid_spec(self, lam):
        g = self.data["grid"]
        return GridSpec(n1=int(g["N1"]), n2=int(g["N2"]), ny=int(g["Ny"]),
                        Y=g["Y"], lam=float(lam))


@dataclass
class ResultBundle:
    """Command output: canonical config echo, tables, pass flags, timing."""

    command: str
    config: dict
    tables: dict = field(default_factory=dict)   # name -> csv text
    summary: dict = field(default_factory=dict)
    passed: bool = True
    wall_time: float = 0.0


def _csv(header, rows):
    lines = [header]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (int, np.integer)):
                cells.append(str(int(v)))
            else:
                cells.append(repr(float(v)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# command implementations


def _geometry_audit(cfg):
    chart = cfg.chart()
    n = 48
    x1 = np.linspace(0.0, chart.periods[0], n, endpoint=False)
    x2 = np.linspace(0.0, chart.periods[1], n, endpoint=False)
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    c = shape_operator(chart, (X1, X2))
    rows = np.column_stack([
        X1.ravel(), X2.ravel(), c.kappa1.ravel(), c.kappa2.ravel(),
        c.s.ravel(), c.h.ravel(), c.K.ravel(),
    ])
    table = _csv("x1,x2,kappa1,kappa2,s,h,K", rows)
    id_k = float(np.max(np.abs(c.K + 0.25 * (c.kappa1 - c.kappa2) ** 2)))
    trL = 2.0 * c.h
    trL2 = np.einsum("...ij,...ji->...", c.L_mat, c.L_mat)
    id_tr = float(np.max(np.abs(trL**2 - trL2 - 2.0 * c.s)))
    summary = {
        "reach_bound": chart.tube().reach_bound,
        "max_K_identity_defect": id_k,
        "max_trace_identity_defect": id_tr,
        "pass": bool(id_k <= 1e-10 and id_tr <= 1e-12),
    }
    return {"geometry": table}, summary


def _gauge_check(cfg):
    chart = cfg.chart()
    pots = cfg.potentials()
    gauge = gauge_transform(pots)
    n = 16
    x1 = np.linspace(0.0, chart.periods[0], n, endpoint=False)
    x2 = np.linspace(0.0, chart.periods[1], n, endpoint=False)
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    reach = chart.tube().reach_bound
    ymax = 0.8 * (reach if np.isfinite(reach) else 1.0)
    ys = np.linspace(-ymax, ymax, 9)
    h = 1e-5 * ymax
    scale = 1.0
    worst_dy = 0.0
    worst_surface = 0.0
    for y in ys:
        dgam = (gauge.gamma(X1, X2, y + h) - gauge.gamma(X1, X2, y - h)) / (2 * h)
        a3 = np.asarray(pots.A3(X1, X2, y), float)
        scale = max(scale, float(np.max(np.abs(a3))) if a3.size else 1.0)
        worst_dy = max(worst_dy, float(np.max(np.abs(dgam - a3))))
    g0 = gauge.gamma(X1, X2, 0.0)
    ah0 = gauge.A_H_prime(X1, X2, 0.0) - pots.A_H(X1, X2, 0.0)
    worst_surface = max(float(np.max(np.abs(g0))), float(np.max(np.abs(ah0))))
    summary = {
        "max_dgamma_dy_minus_A3": worst_dy,
        "max_surface_defect": worst_surface,
        "pass": bool(worst_dy <= 1e-8 * scale and worst_surface <= 1e-12),
    }
    return {}, summary


def _hypothesis_audit(cfg):
    chart = cfg.chart()
    pots = cfg.potentials()
    audit = hypothesis_audit(pots, chart)
    return {}, audit.as_json()


def _spectrum(cfg):
    chart = cfg.chart()
    pots = cfg.potentials()
    data = cfg.data["run"]
    lam = float(data["lambda"])
    grid = cfg.grid_spec(lam).bind(chart)
    audit = hypothesis_audit(pots, chart)
    hs, ho, l0 = assemble_effective(chart, pots, grid, audit=audit)
    op = {"H_sigma": hs, "H_O": ho, "L0": l0}.get(data["operator"])
    if op is None:
        raise ConfigError("run.operator for spectrum must be H_sigma, H_O or L0")
    vals, residuals = lowest_eigenvalues(op, int(data["k"]), seed=int(data["seed"]))
    rows = [(i, vals[i], residuals[i]) for i in range(len(vals))]
    table = _csv("index,eigenvalue,residual", rows)
    summary = {
        "operator": data["operator"],
        "lambda": lam,
        "eigenvalues": [float(v) for v in vals],
        "max_residual": float(np.max(residuals)),
        "pass": bool(np.max(residuals) <= 1e-8),
    }
    tables = {"spectrum": table}
    if data["dump_operator"]:
        summary["dump"] = "operator.txt"
    return tables, summary, (op if data["dump_operator"] else None)


def _evolve(cfg):
    chart = cfg.chart()
    pots = cfg.potentials()
    data = cfg.data["run"]
    audit = hypothesis_audit(pots, chart)
    if not audit.passed:
        raise AuditFailure(
            "hypothesis audit failed: hypothesis " + ", ".join(audit.violated()),
            hypothesis=",".join(audit.violated()))
    lam = float(data["lambda"])
    grid = cfg.grid_spec(lam).bind(chart)
    gauge = gauge_transform(pots)
    hs, ho, l0 = assemble_effective(chart, pots, grid, audit=audit)
    if data["operator"] in ("L_lambda",):
        op = assemble_scaled(chart, pots, grid, gauge=gauge, audit=audit)
    elif data["operator"] in ("L0",):
        op = l0
    else:
        raise ConfigError("run.operator for evolve must be L_lambda or L0")
    psi0 = default_initial_state(grid, ho)
    bp = assemble_kinetic_bound(chart, grid)
    reach = chart.tube().reach_bound
    eps = data["eps_leak"] or 0.3 * (reach if np.isfinite(reach) else 1.0)
    u = grid.scaled_heights()
    confine = lam**2 * np.broadcast_to(np.asarray(
        pots.W(grid.X1[..., None], grid.X2[..., None], u[None, None, :]),
        float), grid.shape)
    T = float(data["T"])
    stride = T / int(data["n_samples"])
    rng = np.random.default_rng(int(data["seed"]))
    if data["dt"]:
        dt = float(data["dt"])
        nsub = max(1, int(round(stride / dt)))
        width = None
    else:
        dt, nsub, width = _auto_step(op, stride, int(data["krylov_dim"]), rng)
    pcfg = PropagatorConfig(dt=dt, T=T, krylov_dim=int(data["krylov_dim"]),
                            step_tol=float(data["step_tol"]), sample_stride=nsub)
    traj = propagate(op, psi0, pcfg, leak_eps=eps, b_plus=bp,
                     confine_field=confine, width_hint=width)
    rows = list(zip(traj.times, traj.norms, traj.energies, traj.leaks,
                    traj.bs, traj.confines))
    table = _csv("t,norm,energy,leak_mass,b,confine", rows)
    summary = {
        "operator": data["operator"],
        "lambda": lam,
        "norm_drift": traj.norm_drift,
        "energy_drift": traj.energy_drift,
        "sup_b": float(np.max(traj.bs)),
        "sup_confine": float(np.max(traj.confines)),
        "leak_at_T": float(traj.leaks[-1]),
        "pass": bool(traj.norm_drift <= 1e-8 and traj.energy_drift <= 1e-8),
    }
    return {"trajectory": table}, summary


def _converge(cfg):
    chart = cfg.chart()
    pots = cfg.potentials()
    data = cfg.data["run"]
    audit = hypothesis_audit(pots, chart)
    if not audit.passed:
        raise AuditFailure(
            "hypothesis audit failed: hypothesis " + ", ".join(audit.violated()),
            hypothesis=",".join(audit.violated()))
    reach = chart.tube().reach_bound
    eps = data["eps_leak"] or 0.3 * (reach if np.isfinite(reach) else 1.0)
    table = convergence_experiment(
        chart, pots, data["lambdas"], T=float(data["T"]),
        grid_spec=cfg.grid_spec(1.0), n_samples=int(data["n_samples"]),
        step_tol=float(data["step_tol"]), krylov_dim=int(data["krylov_dim"]),
        seed=int(data["seed"]), eps_leak=eps, audit=audit)
    summary = {
        "slope": table.slope,
        "band": table.band,
        "leak_slope": table.leak_slope,
        "monotone": bool(table.monotone),
        "sup_b_ratio": (max(r.sup_b for r in table.rows)
                        / min(r.sup_b for r in table.rows)),
        "sup_confine_ratio": (max(r.sup_confine for r in table.rows)
                              / min(r.sup_confine for r in table.rows)),
        "pass": bool(table.monotone and table.slope is not None
                     and table.slope <= -0.5),
    }
    return {"convergence": table.to_csv()}, summary


def run(config):
    """Dispatch a validated config to its command pipeline."""
    if isinstance(config, dict):
        command = config.get("command")
        body = {k: v for k, v in config.items() if k != "command"}
        cfg = RunConfig.from_dict(body)
    else:
        raise ConfigError("run() expects a dict with a 'command' key")
    if command not in COMMANDS:
        raise ConfigError(
            f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    start = time.perf_counter()
    dump_target = None
    if command == "geometry-audit":
        tables, summary = _geometry_audit(cfg)
    elif command == "gauge-check":
        tables, summary = _gauge_check(cfg)
    elif command == "hypothesis-audit":
        tables, summary = _hypothesis_audit(cfg)
    elif command == "spectrum":
        tables, summary, dump_target = _spectrum(cfg)
    elif command == "evolve":
        tables, summary = _evolve(cfg)
    else:
        tables, summary = _converge(cfg)
    bundle = ResultBundle(
        command=command,
        config=cfg.canonical(),
        tables=tables,
        summary=summary,
        passed=bool(summary.get("pass", True)),
        wall_time=time.perf_counter() - start,
    )
    if dump_target is not None:
        bundle.summary["_dump_op"] = True
        bundle._dump_op = dump_target
    return bundle


def spectrum(config):
    """Lowest-k eigenvalue table for the configured operator."""
    config = dict(config)
    config["command"] = "spectrum"
    return run(config)


def emit(bundle, out_dir, overwrite=False):
    """Write bundle artifacts: one CSV per table plus a JSON summary."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, text in bundle.tables.items():
        path = os.path.join(out_dir, f"{bundle.command}_{name}.csv")
        if os.path.exists(path) and not overwrite:
            raise ConfigError(f"refusing to overwrite {path} (pass overwrite)")
        try:
            with open(path, "w") as fh:
                fh.write(text)
        except OSError as exc:
            raise ConfigError(f"cannot write {path}: {exc}")
        paths.append(path)
    op = getattr(bundle, "_dump_op", None)
    if op is not None:
        path = os.path.join(out_dir, "operator.txt")
        if os.path.exists(path) and not overwrite:
            raise ConfigError(f"refusing to overwrite {path} (pass overwrite)")
        dump_operator(op, path)
        paths.append(path)
    summary = {
        "command": bundle.command,
        "pass": bundle.passed,
        "wall_time_s": bundle.wall_time,
        "config": bundle.config,
        "tables": [os.path.basename(p) for p in paths],
    }
    summary.update({k: v for k, v in bundle.summary.items()
                    if not k.startswith("_")})
    jpath = os.path.join(out_dir, f"{bundle.command}_summary.json")
    if os.path.exists(jpath) and not overwrite:
        raise ConfigError(f"refusing to overwrite {jpath} (pass overwrite)")
    try:
        with open(jpath, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise ConfigError(f"cannot write {jpath}: {exc}")
    paths.append(jpath)
    return paths
