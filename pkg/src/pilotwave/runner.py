"""Scenario files, experiment orchestration and run outputs.

A scenario file is plain text made of ``[section]`` headers and
``key = value`` lines.  Values are integers, reals, strings or bracketed
real lists; ``#`` starts a comment.  Every key must be known to the schema
below, so typos fail loudly.
"""
from __future__ import annotations

import csv
import json
import math
import platform
import re
import time
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .ensemble import (
    cell_average,
    cell_edges,
    coarse_grain,
    evolve_paths,
    h_function,
    histogram_density,
    sample,
    total_variation,
)
from .errors import ParseError, PilotWaveError, ValidationError
from .guidance import Flag, integrate_batch, integrate_trajectory, newton_residual
from .measurement import (
    CouplingSpec,
    branch_prepared,
    branch_velocity,
    branch_weights,
    branch_windows,
    check_separation,
    coupling_handle,
    joint_equilibrium,
    measure_ensemble,
    overlap_fidelity,
    packet_support,
    probe_occupancy,
    run_quantum_measurement,
    run_subquantum_measurement,
    track_trajectory,
    full_basis,
)
from .propagate import EigenmodeEvolution, EvolutionHandle, SplitStepEvolution
from .qstate import (
    Grid,
    ModeExpansion,
    PotentialSpec,
    WaveField,
    box_modes,
    density,
    gaussian_packet,
    normalize,
    plane_wave_modes,
    project,
    synthesize,
)
from .snapshot import write_snapshot

EXPERIMENTS = (
    "evolve",
    "trajectories",
    "relax",
    "born-branches",
    "momentum-split",
    "kinetic-energy-pointer",
    "double-slit",
    "two-packet",
    "subquantum-track",
    "occupancy",
)

REQUIRED = object()
MEASURES = ("born-branches", "momentum-split", "kinetic-energy-pointer")

# section -> key -> (kind, default); kinds: int, real, str, list
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "scenario": {
        "name": ("str", REQUIRED),
        "experiment": ("str", REQUIRED),
        "description": ("str", ""),
        "seed": ("int", 0),
        "snapshots": ("list", []),
    },
    "grid": {
        "npoints": ("list", [64]),
        "lo": ("list", [0.0]),
        "hi": ("list", [math.pi]),
        "boundary": ("str", "box"),
        "masses": ("list", [1.0]),
    },
    "state": {
        "kind": ("str", "modes"),
        "basis": ("str", "box-sine"),
        "modes": ("list", [1]),
        "amplitudes": ("list", [1.0]),
        "phases": ("list", []),
        "phase_seed": ("int", -1),
        "eigenvalues": ("list", []),
        "centers": ("list", []),
        "widths": ("list", []),
        "momenta": ("list", []),
    },
    "dynamics": {
        "engine": ("str", "eigenmode"),
        "potential": ("str", "auto"),
        "potential_parameters": ("list", []),
        "dt_field": ("real", 1e-3),
        "kappa": ("int", 4),
    },
    "numerics": {
        "n": ("int", 1000),
        "tol": ("real", 1e-8),
        "t_final": ("real", 1.0),
        "checkpoints": ("int", 5),
        "cells": ("list", [32]),
        "max_steps": ("int", 200_000),
        "reference_tol": ("real", 1e-10),
        "reference_samples": ("int", 4001),
    },
    "coupling": {
        "a": ("real", 1.0),
        "tau": ("real", 1.0),
        "pointer_sigma": ("real", 1.0),
        "pointer_dist": ("str", "equilibrium"),
        "width": ("real", 0.0),
        "observable": ("str", "kinetic"),
    },
    "experiment": {
        "start": ("list", []),
        "pointer_start": ("real", 0.0),
        "initial": ("str", "equilibrium"),
        "initial_modes": ("list", [1]),
        "branch": ("int", 0),
        "t_after": ("real", 1.0),
        "tracked": ("int", 20),
        "probes": ("int", 10),
        "repetitions": ("int", 100),
        "actual_packet": ("int", 1),
        "upper": ("int", 1000),
        "far_lo": ("real", -20.0),
        "far_hi": ("real", 20.0),
        "far_cells": ("int", 40),
        "velocity_samples": ("int", 1000),
        "tv_bound": ("real", 0.0),
        "scaling_decades": ("list", [1e-1, 1e-2, 1e-3, 1e-4]),
    },
}


# --------------------------------------------------------------------------
# parsing

_SECTION = re.compile(r"^\[([A-Za-z_][\w-]*)\]$")
_PAIR = re.compile(r"^([A-Za-z_][\w-]*)\s*=\s*(.*)$")
_INT = re.compile(r"^[+-]?\d+$")


def _number(text: str, line: int):
    if _INT.match(text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", line) from None


def _value(text: str, line: int):
    text = text.strip()
    if not text:
        raise ParseError("empty value", line)
    if text.startswith("["):
        if not text.endswith("]"):
            raise ParseError("unterminated list", line)
        body = text[1:-1].strip()
        if not body:
            return []
        return [_number(t.strip(), line) for t in body.split(",")]
    if text[0] in "\"'":
        if len(text) < 2 or text[-1] != text[0]:
            raise ParseError("unterminated string", line)
        return text[1:-1]
    if _INT.match(text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text


def parse_document(text: str) -> dict[str, dict[str, tuple[Any, int]]]:
    """Raw ``{section: {key: (value, line)}}`` without schema checks."""
    doc: dict[str, dict[str, tuple[Any, int]]] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            section = m.group(1)
            if section in doc:
                raise ParseError(f"duplicate section [{section}]", no)
            doc[section] = {}
            continue
        m = _PAIR.match(line)
        if not m:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", no)
        if section is None:
            raise ParseError("key outside of any section", no)
        key = m.group(1)
        if key in doc[section]:
            raise ParseError(f"duplicate key {key!r}", no)
        doc[section][key] = (_value(m.group(2), no), no)
    return doc


def _coerce(kind: str, value, key: str):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{key} must be an integer", key)
        return value
    if kind == "real":
        if not isinstance(value, (int, float)):
            raise ValidationError(f"{key} must be a real number", key)
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ValidationError(f"{key} must be a string", key)
        return value
    if kind == "list":
        if isinstance(value, (int, float)):
            return [value]
        if not isinstance(value, list):
            raise ValidationError(f"{key} must be a bracketed list", key)
        return value
    raise AssertionError(kind)


@dataclass
class Scenario:
    name: str
    experiment: str
    seed: int
    settings: dict[str, dict[str, Any]]
    description: str = ""
    snapshots: list[float] = field(default_factory=list)
    output: Path | None = None
    source: str | None = None

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.settings[section]

    @property
    def grid(self) -> Grid:
        g = self["grid"]
        n = [int(v) for v in g["npoints"]]
        return Grid.make(n, g["lo"], g["hi"], g["boundary"])

    @property
    def masses(self) -> tuple[float, ...]:
        m = [float(v) for v in self["grid"]["masses"]]
        nd = len(self["grid"]["npoints"])
        return tuple(m * nd if len(m) == 1 else m)

    @property
    def coupling(self) -> CouplingSpec:
        c = self["coupling"]
        return CouplingSpec(c["a"], c["tau"], c["pointer_sigma"], c["pointer_dist"], c["width"] or None)


def parse_scenario(text: str, source: str | None = None) -> Scenario:
    """Parse and validate a scenario document."""
    doc = parse_document(text)
    settings: dict[str, dict[str, Any]] = {}
    for section, keys in doc.items():
        if section not in SCHEMA:
            raise ValidationError(f"unknown section [{section}]", section)
        for key in keys:
            if key not in SCHEMA[section]:
                raise ValidationError(f"unknown key {key!r} in [{section}]", key)
    for section, schema in SCHEMA.items():
        given = doc.get(section, {})
        out = {}
        for key, (kind, default) in schema.items():
            if key in given:
                out[key] = _coerce(kind, given[key][0], key)
            elif default is REQUIRED:
                raise ValidationError(f"missing required key {key!r} in [{section}]", key)
            else:
                out[key] = list(default) if isinstance(default, list) else default
        settings[section] = out
    sc = settings["scenario"]
    s = Scenario(sc["name"], sc["experiment"], sc["seed"], settings, sc["description"],
                 [float(t) for t in sc["snapshots"]], source=source)
    validate(s)
    return s


def _need(cond: bool, key: str, message: str):
    if not cond:
        raise ValidationError(f"{key}: {message}", key)


def validate(s: Scenario) -> None:
    """Range and consistency checks that depend on the experiment kind."""
    _need(s.experiment in EXPERIMENTS, "experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    _need(bool(re.match(r"^[\w.-]+$", s.name)), "name", "use letters, digits, '.', '_' or '-'")
    g = s["grid"]
    nd = len(g["npoints"])
    _need(1 <= nd <= 2, "npoints", "one or two system axes")
    for key in ("lo", "hi"):
        _need(len(g[key]) == nd, key, f"needs {nd} values")
    _need(g["boundary"] in ("box", "periodic"), "boundary", "box or periodic")
    _need(len(g["masses"]) in (1, nd), "masses", f"one value or {nd}")
    _need(all(m > 0 for m in g["masses"]), "masses", "must be positive")
    try:
        s.grid
    except PilotWaveError as exc:
        raise ValidationError(str(exc), "npoints") from exc
    st = s["state"]
    _need(st["kind"] in ("modes", "packets"), "kind", "modes or packets")
    if st["kind"] == "modes":
        _need(st["basis"] in ("box-sine", "plane-wave"), "basis", "box-sine or plane-wave")
        want = "box" if st["basis"] == "box-sine" else "periodic"
        _need(g["boundary"] == want, "basis", f"{st['basis']} needs a {want} grid")
        _need(len(st["modes"]) % nd == 0 and len(st["modes"]) > 0, "modes", f"a multiple of {nd} integers")
        m = len(st["modes"]) // nd
        _need(len(st["amplitudes"]) in (1, m), "amplitudes", f"one value or {m}")
        _need(len(st["phases"]) in (0, 1, m), "phases", f"empty, one value or {m}")
        _need(not st["eigenvalues"] or len(st["eigenvalues"]) == m, "eigenvalues", f"{m} values")
    else:
        _need(len(st["centers"]) > 0 and len(st["centers"]) % nd == 0, "centers", f"a multiple of {nd} values")
        k = len(st["centers"])
        _need(len(st["widths"]) == k, "widths", f"{k} values")
        _need(all(w > 0 for w in st["widths"]), "widths", "must be positive")
        _need(len(st["momenta"]) in (0, k), "momenta", f"empty or {k} values")
        npk = k // nd
        _need(len(st["amplitudes"]) in (1, npk), "amplitudes", f"one value or {npk}")
        _need(len(st["phases"]) in (0, 1, npk), "phases", f"empty, one value or {npk}")
    dy = s["dynamics"]
    _need(dy["engine"] in ("eigenmode", "splitstep"), "engine", "eigenmode or splitstep")
    _need(dy["dt_field"] > 0, "dt_field", "must be positive")
    _need(dy["kappa"] >= 1, "kappa", "must be >= 1")
    if dy["engine"] == "splitstep":
        _need(g["boundary"] == "periodic", "engine", "splitstep needs a periodic grid")
    nu = s["numerics"]
    _need(nu["n"] >= 1, "n", "must be >= 1")
    _need(0 < nu["tol"] < 1, "tol", "must lie in (0, 1)")
    _need(nu["t_final"] > 0, "t_final", "must be positive")
    _need(nu["checkpoints"] >= 1, "checkpoints", "must be >= 1")
    _need(len(nu["cells"]) in (1, nd) and all(c >= 1 for c in nu["cells"]), "cells", f"one or {nd} positive counts")
    _need(nu["max_steps"] >= 100, "max_steps", "must be >= 100")
    _need(nu["reference_samples"] >= 5, "reference_samples", "must be >= 5")
    c = s["coupling"]
    for key in ("a", "tau", "pointer_sigma"):
        _need(c[key] > 0, key, "must be positive")
    _need(c["pointer_dist"] in ("equilibrium", "narrow-nonequilibrium"), "pointer_dist",
          "equilibrium or narrow-nonequilibrium")
    _need(c["observable"] in ("kinetic", "momentum"), "observable", "kinetic or momentum")
    if c["pointer_dist"] == "narrow-nonequilibrium":
        _need(0 <= c["width"] <= c["pointer_sigma"] / 100, "width", "must not exceed pointer_sigma/100")
    ex = s["experiment"]
    _need(ex["initial"] in ("equilibrium", "branch", "modes"), "initial", "equilibrium, branch or modes")
    _need(ex["repetitions"] >= 1, "repetitions", "must be >= 1")
    _need(ex["probes"] >= 1, "probes", "must be >= 1")
    _need(all(t >= 0 for t in s.snapshots), "snapshots", "times must be >= 0")
    if s.experiment in ("born-branches", "momentum-split", "kinetic-energy-pointer"):
        _need(nd == 1 and st["kind"] == "modes", "kind", "measurements couple a 1-D mode expansion")
    if s.experiment == "momentum-split":
        _need(st["basis"] == "plane-wave", "basis", "momentum coupling needs plane-wave modes")
    if s.experiment in ("two-packet", "occupancy"):
        _need(nd == 1 and st["kind"] == "packets" and len(st["centers"]) >= 2, "centers",
              "needs at least two 1-D packets")
    if s.experiment == "relax":
        _need(len(ex["initial_modes"]) == nd, "initial_modes", f"{nd} quantum numbers")


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        canned = canned_path(str(path))
        if canned is None:
            raise FileNotFoundError(f"no scenario file or canned scenario named {path}")
        path = canned
    return parse_scenario(path.read_text(encoding="utf-8"), str(path))


def canned_dir() -> Path:
    return Path(str(resources.files("pilotwave") / "scenarios"))


def catalog() -> list[tuple[str, str, str]]:
    """``(name, experiment, description)`` for every canned scenario."""
    out = []
    for p in sorted(canned_dir().glob("*.ini")):
        s = parse_scenario(p.read_text(encoding="utf-8"), str(p))
        out.append((p.stem, s.experiment, s.description))
    return out


def canned_path(name: str) -> Path | None:
    p = canned_dir() / f"{name.removesuffix('.ini')}.ini"
    return p if p.exists() else None


# --------------------------------------------------------------------------
# state preparation


def _phases(st: dict, count: int) -> np.ndarray:
    if st["phase_seed"] >= 0:
        rng = np.random.default_rng(st["phase_seed"])
        return 2 * np.pi * rng.random(count)
    ph = st["phases"]
    if not ph:
        return np.zeros(count)
    return np.broadcast_to(np.asarray(ph, dtype=float), (count,)).copy()


def build_modes(s: Scenario) -> ModeExpansion:
    st = s["state"]
    grid = s.grid
    qn = np.asarray(st["modes"], dtype=int).reshape(-1, grid.ndim)
    amp = np.broadcast_to(np.asarray(st["amplitudes"], dtype=float), (len(qn),))
    c = amp * np.exp(1j * _phases(st, len(qn)))
    ev = np.asarray(st["eigenvalues"], dtype=float) if st["eigenvalues"] else None
    if st["basis"] == "box-sine":
        return box_modes(grid, qn, c, s.masses, ev)
    if ev is None and s["coupling"]["observable"] == "kinetic" and s.experiment in MEASURES:
        ev = plane_wave_modes(grid, qn, c, s.masses).energies
    return plane_wave_modes(grid, qn, c, s.masses, ev)


def build_packets(s: Scenario) -> WaveField:
    st = s["state"]
    grid = s.grid
    nd = grid.ndim
    centers = np.asarray(st["centers"], dtype=float).reshape(-1, nd)
    widths = np.asarray(st["widths"], dtype=float).reshape(-1, nd)
    momenta = (np.asarray(st["momenta"], dtype=float).reshape(-1, nd) if st["momenta"]
               else np.zeros_like(centers))
    amp = np.broadcast_to(np.asarray(st["amplitudes"], dtype=float), (len(centers),))
    ph = _phases(st, len(centers))
    mesh = grid.mesh()
    psi = np.zeros(grid.shape, dtype=complex)
    for j in range(len(centers)):
        term = amp[j] * np.exp(1j * ph[j]) * np.ones(grid.shape, dtype=complex)
        for k in range(nd):
            term = term * gaussian_packet(mesh[k], centers[j, k], widths[j, k], momenta[j, k])
        psi += term
    return normalize(WaveField(grid, psi, s.masses))


def packet_list(s: Scenario) -> list[tuple[float, float]]:
    st = s["state"]
    return list(zip(st["centers"], st["widths"]))


def build_potential(s: Scenario) -> PotentialSpec:
    dy = s["dynamics"]
    kind = dy["potential"]
    if kind == "auto":
        kind = "box-wall" if s["grid"]["boundary"] == "box" else "free"
    return PotentialSpec(kind, tuple(dy["potential_parameters"]))


def build_evolution(s: Scenario) -> EvolutionHandle:
    dy = s["dynamics"]
    pot = build_potential(s)
    if dy["engine"] == "eigenmode":
        if s["state"]["kind"] == "modes":
            return EigenmodeEvolution(build_modes(s), pot)
        field0 = build_packets(s)
        basis = "box-sine" if s["grid"]["boundary"] == "box" else "plane-wave"
        template = box_modes if basis == "box-sine" else plane_wave_modes
        probe = template(s.grid, np.ones((1, s.grid.ndim), dtype=int), [1.0], s.masses)
        full = full_basis(probe)
        c = project(field0, full)
        return EigenmodeEvolution(full.with_coefficients(c / np.linalg.norm(c)), pot)
    field0 = synthesize(build_modes(s)) if s["state"]["kind"] == "modes" else build_packets(s)
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        return SplitStepEvolution(field0, pot, dy["dt_field"], dy["kappa"])


# --------------------------------------------------------------------------
# outputs


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    return repr(float(v))


class Outputs:
    """Collects files, metrics and assertions for one run."""

    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.assertions: dict[str, dict[str, Any]] = {}
        self.metrics: dict[str, Any] = {}

    def csv(self, name: str, header: list[str], rows) -> Path:
        path = self.root / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.files.append(name)
        return path

    def snapshot(self, field0: WaveField) -> Path:
        name = f"snapshot_t{field0.time:.6g}.pwf"
        write_snapshot(field0, self.root / name)
        self.files.append(name)
        return self.root / name

    def check(self, name: str, passed: bool, value=None, bound=None):
        self.assertions[name] = {"passed": bool(passed), "value": _jsonable(value), "bound": _jsonable(bound)}

    def metric(self, name: str, value):
        self.metrics[name] = _jsonable(value)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return float(v) if math.isfinite(v) else str(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def _ensemble_rows(points, times, flags):
    n, K, d = points.shape
    for i in range(n):
        for k in range(K):
            yield [i, times[k], *points[i, k], int(flags[i, k])]


def _qcols(d: int, pointer: bool = False) -> list[str]:
    cols = [f"q{k + 1}" for k in range(d - (1 if pointer else 0))]
    return cols + (["y"] if pointer else [])


# --------------------------------------------------------------------------
# experiments


def _checkpoints(s: Scenario) -> np.ndarray:
    nu = s["numerics"]
    return np.linspace(0.0, nu["t_final"], nu["checkpoints"] + 1)


def _snapshots(s: Scenario, ev: EvolutionHandle, out: Outputs):
    for t in s.snapshots:
        out.snapshot(ev.field(t))


def _cells(s: Scenario) -> list[np.ndarray]:
    g = s.grid
    return cell_edges(g.lo, g.hi, s["numerics"]["cells"])


def _binomial_ok(fr, p, n) -> tuple[bool, float]:
    sig = np.sqrt(np.asarray(p) * (1 - np.asarray(p)) / n)
    dev = np.abs(np.asarray(fr) - np.asarray(p))
    return bool(np.all(dev <= 3 * sig + 1e-15)), float(np.max(dev / np.maximum(sig, 1e-300)))


def run_evolve(s: Scenario, out: Outputs, workers: int):
    ev = build_evolution(s)
    times = _checkpoints(s)
    rows, drift = [], 0.0
    for t in times:
        f = ev.field(t)
        rho = density(f)
        norm = float(np.sum(rho) * f.grid.cell_volume)
        means = [float(np.sum(rho * m) * f.grid.cell_volume) for m in f.grid.mesh()]
        drift = max(drift, abs(norm - 1.0))
        rows.append([t, norm, *means])
    out.csv("evolve.csv", ["t", "norm", *[f"mean_q{k + 1}" for k in range(s.grid.ndim)]], rows)
    out.check("norm_conserved", drift < 1e-8, drift, 1e-8)
    _snapshots(s, ev, out)
    if not s.snapshots:
        out.snapshot(ev.field(times[-1]))


def run_trajectories(s: Scenario, out: Outputs, workers: int):
    ev = build_evolution(s)
    nu, ex = s["numerics"], s["experiment"]
    g = s.grid
    times = _checkpoints(s)
    ens = sample(density(ev.field(0.0)), g, nu["n"], s.seed, "equilibrium")
    pts, fl, mf = evolve_paths(ens, ev, times[1:], nu["tol"], workers, max_steps=nu["max_steps"])
    allpts = np.concatenate([ens.points[:, None, :], pts], axis=1)
    allfl = np.concatenate([np.zeros((len(ens), 1), dtype=np.int64), fl], axis=1)
    out.csv("ensemble.csv", ["member_id", "t", *_qcols(g.ndim), "flag"], _ensemble_rows(allpts, times, allfl))
    edges = _cells(s)
    k = int(np.prod([len(e) - 1 for e in edges]))
    valid = (mf & Flag.STUCK) == 0
    bound = ex["tv_bound"] or 2 * math.sqrt(k / max(valid.sum(), 1))
    tvs = []
    for i, t in enumerate(times):
        P = histogram_density(allpts[valid, i], edges)
        D = cell_average(ev, t, edges)
        vol = np.prod([e[1] - e[0] for e in edges])
        tvs.append(total_variation(P * vol, D * vol))
    out.metric("total_variation", tvs)
    out.metric("flagged_members", int((~valid).sum()))
    out.check("equivariance", max(tvs) < bound, max(tvs), bound)
    if g.ndim == 1:
        order = np.argsort(allpts[:, 0, 0])
        x = allpts[order][valid[order]][:, :, 0]
        if g.boundary[0] == "periodic":
            ok = True  # ordering on a circle is only defined up to rotation
        else:
            ok = bool(np.all(np.diff(x, axis=0) > 0))
        out.check("non_crossing", ok, int(np.sum(np.diff(x, axis=0) <= 0)), 0)
    if isinstance(ev, EigenmodeEvolution):
        start = ex["start"] or [lo + 0.3 * L for lo, L in zip(g.lo, g.lengths)]
        t_eval = np.linspace(0.0, nu["t_final"], nu["reference_samples"])
        traj = integrate_trajectory(ev, start, 0.0, nu["t_final"], nu["reference_tol"], t_eval=t_eval)
        out.csv("trajectory.csv", ["t", *_qcols(g.ndim), "flag"],
                ([t, *q, int(f)] for t, q, f in zip(traj.times, traj.points, traj.flags)))
        res = newton_residual(traj, ev)
        out.metric("newton_residual_max_relative", res.max_relative)
        out.check("newton_residual", res.max_relative < 1e-3, res.max_relative, 1e-3)
    _snapshots(s, ev, out)


def run_relax(s: Scenario, out: Outputs, workers: int):
    ev = build_evolution(s)
    nu, ex = s["numerics"], s["experiment"]
    g = s.grid
    ground = box_modes(g, [ex["initial_modes"]], [1.0], s.masses) if g.boundary[0] == "box" else \
        plane_wave_modes(g, [ex["initial_modes"]], [1.0], s.masses)
    ens = sample(density(synthesize(ground)), g, nu["n"], s.seed, "mode-density")
    times = _checkpoints(s)
    pts, fl, mf = evolve_paths(ens, ev, times[1:], nu["tol"], workers, max_steps=nu["max_steps"])
    valid = (mf & Flag.STUCK) == 0
    edges = _cells(s)
    rows, H = [], []
    for i, t in enumerate(times):
        p = ens.points if i == 0 else pts[:, i - 1]
        cg = coarse_grain(p[valid], ev, t, edges)
        H.append(h_function(cg))
        rows.append([t, H[-1], cg.n_effective])
    out.csv("h_series.csv", ["t", "H", "n_effective"], rows)
    H = np.asarray(H)
    # largest rise above the lowest value seen so far, against a band of 10% of H(0)
    band = 0.1 * H[0]
    worst = float(np.max(H[1:] - np.minimum.accumulate(H)[:-1], initial=0.0))
    out.metric("H", H)
    out.metric("flagged_members", int((~valid).sum()))
    out.check("h_non_increasing", worst <= band, worst, band)
    out.check("h_halved", H[-1] <= 0.5 * H[0], H[-1] / H[0], 0.5)
    _snapshots(s, ev, out)


def _measurement_rows(final_y, system, coupling, windows, mf):
    w = branch_weights(system)
    for i, y in enumerate(final_y):
        hit = np.nonzero((y >= windows[:, 0]) & (y < windows[:, 1]))[0]
        idx = int(hit[0]) if len(hit) and not mf[i] & Flag.STUCK else None
        dist = 1.0 - w[idx] if idx is not None else 1.0
        yield [i, -1 if idx is None else idx, y, y / coupling.strength, dist]


def run_born_branches(s: Scenario, out: Outputs, workers: int):
    system = build_modes(s)
    cp = s.coupling
    obs = s["coupling"]["observable"]
    nu, ex = s["numerics"], s["experiment"]
    check_separation(system, cp)
    weights = branch_weights(system)
    if ex["initial"] == "branch":
        ens = branch_prepared(system, cp, ex["branch"], nu["n"], s.seed, obs, nu["tol"])
    else:
        ens = joint_equilibrium(system, cp, nu["n"], s.seed, obs)
    fr, un, y, mf = measure_ensemble(system, cp, ens, obs, nu["tol"], workers)
    windows = branch_windows(system, cp)
    out.csv("measurement.csv", ["run_id", "outcome_index", "pointer_reading", "inferred_value", "wave_disturbance"],
            _measurement_rows(y, system, cp, windows, mf))
    out.metric("fractions", fr)
    out.metric("born_weights", weights)
    out.metric("unassigned", un)
    n_valid = int(np.sum((mf & Flag.STUCK) == 0))
    if ex["initial"] == "branch":
        b = ex["branch"]
        out.check("branch_fraction", fr[b] >= 0.99, fr[b], 0.99)
        ok, z = _binomial_ok(fr, weights, n_valid)
        out.check("departs_from_born", not ok, z, 3.0)
    else:
        ok, z = _binomial_ok(fr, weights, n_valid)
        out.check("born_fractions", ok, z, 3.0)


def run_momentum_split(s: Scenario, out: Outputs, workers: int):
    system = build_modes(s)
    cp = s.coupling
    nu, ex = s["numerics"], s["experiment"]
    check_separation(system, cp)
    ens = joint_equilibrium(system, cp, nu["n"], s.seed, "momentum")
    fr, un, y, mf = measure_ensemble(system, cp, ens, "momentum", nu["tol"], workers)
    windows = branch_windows(system, cp)
    weights = branch_weights(system)
    out.csv("measurement.csv", ["run_id", "outcome_index", "pointer_reading", "inferred_value", "wave_disturbance"],
            _measurement_rows(y, system, cp, windows, mf))
    ok, z = _binomial_ok(fr, weights, int(np.sum((mf & Flag.STUCK) == 0)))
    out.metric("fractions", fr)
    out.check("born_fractions", ok, z, 3.0)
    # post-measurement motion of a few members
    vals = np.unique(np.round(system.eigenvalues, 10))
    m = s.masses[0]
    handle = coupling_handle(system, cp, "momentum")
    t1 = cp.tau + ex["t_after"]
    times = np.linspace(cp.tau, t1, 51)
    sel = ens.points[: ex["tracked"]]
    res = integrate_batch(handle, sel, 0.0, np.concatenate([[cp.tau / 2], times]), nu["reference_tol"])
    worst, sign_ok, excl = 0.0, True, 0.0
    L = s.grid.lengths[0]
    rows = []
    for i in range(len(sel)):
        path = res.points[i, 1:]
        x = np.unwrap(path[:, 0], period=L)
        slope = np.polyfit(times, x, 1)[0]
        yb = path[0, 1]
        hit = np.nonzero((yb >= windows[:, 0]) & (yb < windows[:, 1]))[0]
        if not len(hit):
            sign_ok = False
            continue
        expect = vals[hit[0]] / m
        worst = max(worst, abs(slope - expect) / abs(expect))
        sign_ok &= bool(np.sign(slope) == np.sign(expect))
        vb = branch_velocity(system, cp, int(hit[0]), path[1:], times[1:], "momentum")
        vf, _ = handle.velocity_field(path[1:], times[1:])
        excl = max(excl, float(np.max(np.abs(vb - vf))))
        rows.append([i, int(hit[0]), yb, slope, expect])
    out.csv("post_measurement.csv", ["run_id", "outcome_index", "pointer_reading", "slope", "expected"], rows)
    out.check("momentum_slope", worst < 1e-3, worst, 1e-3)
    out.check("slope_sign", sign_ok, sign_ok, True)
    out.check("branch_exclusivity", excl < 1e-8, excl, 1e-8)


def run_kinetic_pointer(s: Scenario, out: Outputs, workers: int):
    system = build_modes(s)
    cp = s.coupling
    nu, ex = s["numerics"], s["experiment"]
    g = s.grid
    ev = EigenmodeEvolution(system)
    # the state alone: velocity vanishes wherever psi does not
    x = g.lo[0] + (np.arange(ex["velocity_samples"]) + 0.5) / ex["velocity_samples"] * g.lengths[0]
    v, rho = ev.velocity_field(x[:, None], 0.37 * nu["t_final"])
    keep = rho > 1e-6 * ev.density_scale()
    vmax = float(np.max(np.abs(v[keep]))) if keep.any() else 0.0
    out.check("particle_at_rest", vmax < 1e-8, vmax, 1e-8)
    start = ex["start"][0] if ex["start"] else g.lo[0] + 0.3 * g.lengths[0]
    y0 = ex["pointer_start"]
    rec = run_quantum_measurement(system, cp, start, y0, s["coupling"]["observable"], 0.0, nu["reference_tol"],
                                  samples=nu["reference_samples"])
    E = float(system.eigenvalues[0])
    disp = rec.pointer_reading - y0
    expect = cp.strength * E
    rel = abs(disp - expect) / abs(expect)
    xs = rec.path.points[:, 0]
    moved = float(np.max(np.abs(xs - start)))
    vx = np.gradient(xs, rec.path.times)
    ke = 0.5 * s.masses[0] * vx**2
    out.csv("trajectory.csv", ["t", "q1", "y", "flag"],
            ([t, *q, int(f)] for t, q, f in zip(rec.path.times, rec.path.points, rec.path.flags)))
    out.csv("measurement.csv", ["run_id", "outcome_index", "pointer_reading", "inferred_value", "wave_disturbance"],
            [[0, rec.outcome_index, rec.pointer_reading, rec.inferred_value, rec.wave_disturbance]])
    out.metric("energy", E)
    out.metric("kinetic_energy_max", float(ke.max()))
    out.check("pointer_reads_energy", rel < 0.01, rel, 0.01)
    out.check("particle_displacement", moved < 1e-6, moved, 1e-6)


def run_double_slit(s: Scenario, out: Outputs, workers: int):
    ev = build_evolution(s)
    nu, ex = s["numerics"], s["experiment"]
    g = s.grid
    rho0 = density(ev.field(0.0))
    Y = g.mesh()[1]
    times = _checkpoints(s)
    upper = sample(rho0 * (Y > 0), g, ex["upper"], s.seed, "upper-aperture")
    pts, fl, mf = evolve_paths(upper, ev, times[1:], nu["tol"], workers, max_steps=nu["max_steps"])
    allpts = np.concatenate([upper.points[:, None, :], pts], axis=1)
    allfl = np.concatenate([np.zeros((len(upper), 1), dtype=np.int64), fl], axis=1)
    out.csv("ensemble.csv", ["member_id", "t", *_qcols(2), "flag"], _ensemble_rows(allpts, times, allfl))
    stayed = float(np.mean(np.all(allpts[:, :, 1] > 0, axis=1)))
    out.check("upper_slit_stays_upper", stayed == 1.0, stayed, 1.0)
    ens = sample(rho0, g, nu["n"], s.seed + 1, "equilibrium")
    fpts, _, fmf = evolve_paths(ens, ev, [times[-1]], nu["tol"], workers, max_steps=nu["max_steps"])
    valid = (fmf & Flag.STUCK) == 0
    yf = fpts[valid, -1, 1]
    edges = np.linspace(ex["far_lo"], ex["far_hi"], ex["far_cells"] + 1)
    P = np.histogram(yf, edges)[0] / max(len(yf), 1)
    # |psi|^2 marginal in y, averaged over each cell by 8-point midpoint sampling
    sub = 8
    xs = g.axis(0)
    w = edges[1] - edges[0]
    offs = (np.arange(sub) + 0.5) / sub * w
    yq = (edges[:-1, None] + offs[None, :]).ravel()
    pts_q = np.stack(np.meshgrid(xs, yq, indexing="ij"), axis=-1).reshape(-1, 2)
    psi = ev.evaluate(pts_q, times[-1], [(0, 0)])[(0, 0)]
    marg = (np.abs(psi) ** 2).reshape(len(xs), -1).sum(axis=0) * g.spacing[0]
    D = marg.reshape(-1, sub).mean(axis=1) * w
    tv = total_variation(P, D / D.sum())
    out.csv("far_field.csv", ["y_lo", "y_hi", "P", "D"], ([a, b, p, d] for a, b, p, d in
                                                       zip(edges[:-1], edges[1:], P, D)))
    out.metric("far_field_mass", float(D.sum()))
    out.check("fringe_total_variation", tv < 0.08, tv, 0.08)
    _snapshots(s, ev, out)


def _measure_rows(records, with_estimate: bool):
    for i, r in enumerate(records):
        row = [i, -1 if r.outcome_index is None else r.outcome_index, r.pointer_reading, r.inferred_value,
               r.wave_disturbance]
        if with_estimate:
            row.append(r.trajectory_estimate[0] if r.trajectory_estimate is not None else None)
        yield row


MEAS_COLS = ["run_id", "outcome_index", "pointer_reading", "inferred_value", "wave_disturbance"]


def run_two_packet(s: Scenario, out: Outputs, workers: int):
    f = build_packets(s)
    ex = s["experiment"]
    cp = s.coupling
    packets = packet_list(s)
    g = s.grid
    x = g.axis(0)
    rho = density(f)
    lobes = []
    for c, w in packets:
        lo, hi = packet_support(c, w)
        lobes.append(float(np.sum(rho * ((x >= lo) & (x <= hi))) * g.cell_volume))
    out.metric("lobe_weights", lobes)
    k = ex["actual_packet"]
    c, w = packets[k]
    start = ex["start"][0] if ex["start"] else c + 0.3 * w
    rng = np.random.default_rng(np.random.SeedSequence(entropy=s.seed))
    recs = [run_subquantum_measurement(f, start, cp, rng) for _ in range(ex["repetitions"])]
    out.csv("measurement.csv", MEAS_COLS + ["estimate"], _measure_rows(recs, True))
    lo, hi = packet_support(c, w)
    inside = all(lo <= r.inferred_value <= hi for r in recs)
    fid = 1.0 - max(r.wave_disturbance for r in recs)
    out.check("estimate_in_actual_packet", inside, [r.inferred_value for r in recs[:3]], [lo, hi])
    out.check("wave_undisturbed", fid >= 1 - 1e-6, fid, 1 - 1e-6)


def run_subquantum_track(s: Scenario, out: Outputs, workers: int):
    ev = build_evolution(s)
    nu, ex = s["numerics"], s["experiment"]
    cp = s.coupling
    g = s.grid
    dx = float(g.spacing[0])
    f0 = ev.field(0.0)
    start = ex["start"][0] if ex["start"] else g.lo[0] + 0.3 * g.lengths[0]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=s.seed))
    rec = run_subquantum_measurement(f0, start, cp, rng)
    err = abs(rec.inferred_value - start)
    out.check("position_estimate", err <= 2 * dx, err, 2 * dx)
    out.check("wave_fidelity", 1 - rec.wave_disturbance >= 0.999, 1 - rec.wave_disturbance, 0.999)
    # disturbance against coupling strength at fixed w / (a tau)
    scales = np.asarray(ex["scaling_decades"], dtype=float)
    dist = []
    for at in scales:
        c2 = CouplingSpec(at / cp.tau, cp.tau, cp.pointer_sigma, "narrow-nonequilibrium",
                          min(dx * at, cp.pointer_sigma / 100))
        dist.append(overlap_fidelity(f0, c2))
    dist = 1.0 - np.asarray(dist)
    slope = float(np.polyfit(np.log10(scales), np.log10(dist), 1)[0])
    out.metric("disturbance_vs_strength", {"a_tau": scales.tolist(), "disturbance": dist.tolist()})
    out.check("disturbance_vanishes", slope >= 1.0, slope, 1.0)
    probes = np.linspace(0.0, nu["t_final"], ex["probes"] + 1)[1:]
    tr = track_trajectory(ev, [start], probes, cp, s.seed, nu["reference_tol"])
    out.csv("tracking.csv", ["t", "estimate", "actual", "reference", "wave_disturbance"],
            ([t, e[0], a[0], r[0], d] for t, e, a, r, d in
             zip(tr.times, tr.estimates, tr.actual, tr.reference, tr.disturbances)))
    out.csv("measurement.csv", MEAS_COLS + ["estimate"], _measure_rows([rec], True))
    out.check("tracking_rms", tr.rms_error < 5 * dx, tr.rms_error, 5 * dx)
    _snapshots(s, ev, out)


def run_occupancy(s: Scenario, out: Outputs, workers: int):
    f = build_packets(s)
    ex = s["experiment"]
    cp = s.coupling
    packets = packet_list(s)
    k = ex["actual_packet"]
    c, w = packets[k]
    start = ex["start"][0] if ex["start"] else c + 0.3 * w
    other = [i for i in range(len(packets)) if i != k][0]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=s.seed))
    recs = []
    for _ in range(ex["repetitions"]):
        for target in (k, other):
            r = probe_occupancy(f, packets, target, start, cp, rng)
            recs.append((target, r))
    out.csv("measurement.csv", ["run_id", "probed_packet", "outcome_index", "pointer_reading", "inferred_value",
                                "wave_disturbance"],
            ([i, t, r.outcome_index, r.pointer_reading, r.inferred_value, r.wave_disturbance]
             for i, (t, r) in enumerate(recs)))
    occ = [r.outcome_index for t, r in recs if t == k]
    emp = [r.outcome_index for t, r in recs if t == other]
    out.metric("occupied_agreement", sum(occ) / len(occ))
    out.metric("empty_agreement", 1 - sum(emp) / len(emp))
    out.check("probe_occupied_packet", all(o == 1 for o in occ), sum(occ), len(occ))
    out.check("probe_empty_packet", all(o == 0 for o in emp), len(emp) - sum(emp), len(emp))


RUNNERS: dict[str, Callable[[Scenario, Outputs, int], None]] = {
    "evolve": run_evolve,
    "trajectories": run_trajectories,
    "relax": run_relax,
    "born-branches": run_born_branches,
    "momentum-split": run_momentum_split,
    "kinetic-energy-pointer": run_kinetic_pointer,
    "double-slit": run_double_slit,
    "two-packet": run_two_packet,
    "subquantum-track": run_subquantum_track,
    "occupancy": run_occupancy,
}


@dataclass
class RunReport:
    scenario: str
    out_dir: Path
    assertions: dict[str, dict[str, Any]]
    metrics: dict[str, Any]
    elapsed: float

    @property
    def passed(self) -> bool:
        return all(a["passed"] for a in self.assertions.values())

    @property
    def exit_status(self) -> int:
        return 0 if self.passed else 1


def run_scenario(s: Scenario, out_root=None, workers: int = 1, log: Callable[[str], None] | None = None) -> RunReport:
    """Run one scenario, write its outputs and manifest, and report assertions."""
    root = Path(out_root) if out_root is not None else (s.output or Path("runs"))
    out = Outputs(root / s.name)
    t0 = time.perf_counter()
    try:
        RUNNERS[s.experiment](s, out, workers)
    except (PilotWaveError, ValueError) as exc:
        exc.args = (f"scenario {s.name!r}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        raise
    elapsed = time.perf_counter() - t0
    manifest = {
        "scenario": s.name,
        "experiment": s.experiment,
        "source": s.source,
        "seed": s.seed,
        "workers": workers,
        "settings": _jsonable_settings(s.settings),
        "versions": _versions(),
        "files": out.files,
        "metrics": out.metrics,
        "assertions": out.assertions,
        "passed": all(a["passed"] for a in out.assertions.values()),
        "timings": {"elapsed_s": elapsed},
    }
    (out.root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    if log:
        for name, a in out.assertions.items():
            log(f"{'PASS' if a['passed'] else 'FAIL'} {name}: {a['value']} (bound {a['bound']})")
        log(f"{s.name}: {elapsed:.1f} s, outputs in {out.root}")
    return RunReport(s.name, out.root, out.assertions, out.metrics, elapsed)


def _jsonable_settings(settings):
    return {sec: {k: _jsonable(v) for k, v in kv.items()} for sec, kv in settings.items()}


def _versions() -> dict[str, str]:
    import numba
    import scipy

    return {
        "pilotwave": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }
