"""Pointer measurements: branching outcomes, weak position readouts and occupancy probes.

A pointer coordinate y with packet g0 is coupled to a system observable
omega through H = a * omega * p_y, switched on for a duration tau.  Two
kinds of experiment are built on the handles in ``propagate``:

* quantum measurements, where the pointer starts in |g0|^2 and the
  branches g0(y - a omega_n tau) separate;
* subquantum measurements, where the pointer starts from a distribution
  much narrower than g0, so a weak coupling reveals the configuration
  without appreciably changing the joint wave.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ensemble import EnsembleState, evolve_paths, outcome_fractions, sample
from .errors import BranchOverlap, PacketOverlap, ResolutionTooCoarse
from .guidance import Flag, Trajectory, integrate_batch, integrate_trajectory
from .propagate import (
    EigenmodeEvolution,
    EvolutionHandle,
    ModeCoupling,
    MultiplicativeCoupling,
    SplitStepEvolution,
    TimeReversed,
)
from .qstate import (
    Grid,
    ModeExpansion,
    WaveField,
    box_modes,
    gaussian_packet,
    normalize,
    plane_wave_modes,
    project,
)

POINTER_DISTS = ("equilibrium", "narrow-nonequilibrium")
SEPARATION = 6.0  # branch gaps must exceed this many pointer widths


@dataclass(frozen=True)
class CouplingSpec:
    """Pointer coupling H = a * omega * p_y acting for a time ``tau``.

    ``width`` is the spread of the narrow nonequilibrium pointer
    distribution (uniform on [-width/2, width/2]); it defaults to
    ``pointer_sigma / 1000``.
    """

    a: float
    tau: float
    pointer_sigma: float
    pointer_dist: str = "equilibrium"
    width: float | None = None
    pointer_mass: float = 1.0

    def __post_init__(self):
        for name in ("a", "tau", "pointer_sigma", "pointer_mass"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.pointer_dist not in POINTER_DISTS:
            raise ValueError(f"pointer_dist must be one of {POINTER_DISTS}")
        if self.pointer_dist == "narrow-nonequilibrium":
            w = self.pointer_sigma / 1e3 if self.width is None else float(self.width)
            if not 0 < w <= self.pointer_sigma / 100:
                raise ValueError("a narrow pointer needs 0 < width <= pointer_sigma / 100")
            object.__setattr__(self, "width", w)

    @property
    def strength(self) -> float:
        return self.a * self.tau

    def draw_pointer(self, rng: np.random.Generator, size=None):
        if self.pointer_dist == "equilibrium":
            return rng.normal(0.0, self.pointer_sigma, size)
        return rng.uniform(-self.width / 2, self.width / 2, size)


@dataclass
class MeasurementRecord:
    outcome_index: int | None
    pointer_reading: float
    inferred_value: float
    wave_disturbance: float
    trajectory_estimate: np.ndarray | None = None
    path: Trajectory | None = field(default=None, repr=False)

    def __post_init__(self):
        self.wave_disturbance = float(min(max(self.wave_disturbance, 0.0), 1.0))


# --------------------------------------------------------------------------
# quantum measurement (branching)


def distinct_values(system: ModeExpansion, decimals: int = 10) -> np.ndarray:
    """Sorted distinct eigenvalues of the measured observable."""
    return np.unique(np.round(system.eigenvalues, decimals))


def branch_gap(system: ModeExpansion, coupling: CouplingSpec) -> float:
    vals = distinct_values(system)
    if len(vals) < 2:
        return np.inf
    return coupling.strength * float(np.min(np.diff(vals)))


def check_separation(system: ModeExpansion, coupling: CouplingSpec) -> None:
    gap = branch_gap(system, coupling)
    if not gap > SEPARATION * coupling.pointer_sigma:
        raise BranchOverlap(
            f"branch gap {gap:.4g} does not exceed {SEPARATION:g} pointer widths ({coupling.pointer_sigma:g})"
        )


def branch_windows(system: ModeExpansion, coupling: CouplingSpec) -> np.ndarray:
    """Pointer window per distinct eigenvalue: centre a*omega*tau, half-width gap/2."""
    vals = distinct_values(system)
    gap = branch_gap(system, coupling)
    half = gap / 2 if np.isfinite(gap) else SEPARATION * coupling.pointer_sigma
    centres = coupling.strength * vals
    return np.stack([centres - half, centres + half], axis=1)


def branch_modes(system: ModeExpansion, index: int) -> np.ndarray:
    """Indices of the modes belonging to distinct eigenvalue ``index``."""
    vals = distinct_values(system)
    return np.nonzero(np.isclose(np.round(system.eigenvalues, 10), vals[index], rtol=0, atol=1e-9))[0]


def branch_weights(system: ModeExpansion) -> np.ndarray:
    """Born weights sum |c_n|^2 over each distinct eigenvalue."""
    return np.array([np.sum(np.abs(system.coefficients[branch_modes(system, i)]) ** 2)
                     for i in range(len(distinct_values(system)))])


def restrict(system: ModeExpansion, modes: Sequence[int]) -> ModeExpansion:
    """The normalised component of ``system`` on a subset of its modes."""
    modes = np.asarray(modes)
    c = system.coefficients[modes]
    c = c / np.sqrt(np.sum(np.abs(c) ** 2))
    return ModeExpansion(system.basis, c, system.eigenvalues[modes], system.energies[modes], system.grid,
                         system.masses, system.quantum_numbers[modes])


def coupling_handle(system: ModeExpansion, coupling: CouplingSpec, observable: str = "kinetic") -> ModeCoupling:
    return ModeCoupling(system, observable, coupling.a, coupling.tau, coupling.pointer_sigma,
                        pointer_mass=coupling.pointer_mass)


def run_quantum_measurement(system: ModeExpansion, coupling: CouplingSpec, q0: float, pointer_y0: float,
                            observable: str = "kinetic", t_after: float = 0.0, tol: float = 1e-9,
                            samples: int = 201) -> MeasurementRecord:
    """Couple, integrate the joint path (x, y) and read the branch containing y(tau).

    The path runs to ``tau + t_after`` so the post-measurement motion can be
    inspected.  The effective system wave afterwards is the occupied branch,
    so the disturbance is one minus that branch's Born weight.
    """
    check_separation(system, coupling)
    handle = coupling_handle(system, coupling, observable)
    t1 = coupling.tau + max(t_after, 0.0)
    times = np.linspace(0.0, t1, samples)
    if t_after > 0 and not np.any(np.isclose(times, coupling.tau)):
        times = np.sort(np.append(times, coupling.tau))
    path = integrate_trajectory(handle, [q0, pointer_y0], 0.0, t1, tol, t_eval=times)
    y_tau = float(path.points[np.argmin(np.abs(path.times - coupling.tau)), 1])
    windows = branch_windows(system, coupling)
    hit = np.nonzero((y_tau >= windows[:, 0]) & (y_tau < windows[:, 1]))[0]
    outcome = int(hit[0]) if len(hit) else None
    weight = branch_weights(system)[outcome] if outcome is not None else 0.0
    return MeasurementRecord(outcome, y_tau, y_tau / coupling.strength, 1.0 - weight, None, path)


def joint_equilibrium(system: ModeExpansion, coupling: CouplingSpec, n: int, seed: int,
                      observable: str = "kinetic") -> EnsembleState:
    """n joint configurations drawn from |psi(x) g0(y)|^2."""
    handle = coupling_handle(system, coupling, observable)
    joint = handle.field(0.0)
    return sample(np.abs(joint.amplitudes) ** 2, joint.grid, n, seed, provenance="joint-equilibrium")


def branch_prepared(system: ModeExpansion, coupling: CouplingSpec, branch: int, n: int, seed: int,
                    observable: str = "kinetic", tol: float = 1e-8) -> EnsembleState:
    """Nonequilibrium start whose members all end in one branch.

    Members are drawn from |Psi(tau)|^2 restricted to the branch window and
    carried back to t = 0 along the guidance flow, so P0 differs from
    |Psi(0)|^2 while every member is routed into ``branch``.
    """
    handle = coupling_handle(system, coupling, observable)
    joint = handle.field(coupling.tau)
    windows = branch_windows(system, coupling)
    lo, hi = windows[branch]
    y = joint.grid.axis(1)
    dens = np.abs(joint.amplitudes) ** 2 * ((y >= lo) & (y < hi))[None, :]
    late = sample(dens, joint.grid, n, seed, provenance=f"branch-{branch}")
    back = TimeReversed(handle, coupling.tau)
    pts, _, mf = evolve_paths(late, back, [coupling.tau], tol)
    return EnsembleState(pts[:, -1], 0.0, int(seed), f"branch-{branch}-pullback:n={n}", mf)


def measure_ensemble(system: ModeExpansion, coupling: CouplingSpec, ensemble: EnsembleState,
                     observable: str = "kinetic", tol: float = 1e-8, workers: int = 1):
    """Evolve joint members through the coupling and histogram the branches.

    Returns ``(fractions, unassigned, pointer_readings, member_flags)``.
    """
    check_separation(system, coupling)
    handle = coupling_handle(system, coupling, observable)
    pts, _, mf = evolve_paths(ensemble, handle, [coupling.tau], tol, workers)
    final = pts[:, -1]
    fr, un = outcome_fractions(final, branch_windows(system, coupling), axis=1, flags=mf)
    return fr, un, final[:, 1], mf


def branch_velocity(system: ModeExpansion, coupling: CouplingSpec, branch: int, points, t,
                    observable: str = "kinetic") -> np.ndarray:
    """Velocity computed from one branch alone, as if the others were absent."""
    part = restrict(system, branch_modes(system, branch))
    v, _ = coupling_handle(part, coupling, observable).velocity_field(points, t)
    return v


# --------------------------------------------------------------------------
# subquantum measurement


def overlap_fidelity(system_field: WaveField, coupling: CouplingSpec, omega=None) -> float:
    """|<psi0 g0 | psi0 g0(y - a omega tau)>|^2 for a Gaussian pointer.

    The pointer overlap of a shift s is exp(-s^2 / (8 sigma^2)), so the
    fidelity is a |psi0|^2-weighted average of that factor, squared.
    """
    g = system_field.grid
    x = g.points()
    w = x[:, 0] if omega is None else omega(x[:, 0])
    rho = np.abs(system_field.amplitudes.ravel()) ** 2
    s = coupling.strength * w
    ov = np.sum(rho * np.exp(-(s**2) / (8 * coupling.pointer_sigma**2))) * g.cell_volume
    return float(ov**2)


def run_subquantum_measurement(system_field: WaveField, x_actual: float, coupling: CouplingSpec,
                               rng: np.random.Generator | int = 0, resolution: float | None = None,
                               tol: float = 1e-12) -> MeasurementRecord:
    """Weak position readout with a narrow pointer.

    The joint wave psi0(x) g0(y - a x t) is carried for the duration tau
    with the system Hamiltonian suppressed.  The estimate is y(tau)/(a tau).
    """
    if coupling.pointer_dist != "narrow-nonequilibrium":
        raise ValueError("a subquantum measurement needs a narrow-nonequilibrium pointer")
    if system_field.grid.ndim != 1:
        raise ValueError("subquantum readout couples a 1-D system")
    dx = float(system_field.grid.spacing[0]) if resolution is None else float(resolution)
    if coupling.strength * dx < coupling.width * (1 - 1e-9):
        raise ResolutionTooCoarse(
            f"a*tau*dx = {coupling.strength * dx:.3g} is below the pointer width {coupling.width:.3g}"
        )
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    y0 = float(coupling.draw_pointer(rng))
    handle = position_handle(system_field, coupling)
    path = integrate_trajectory(handle, [x_actual, y0], 0.0, coupling.tau, tol, t_eval=[0.0, coupling.tau])
    y = float(path.points[-1, 1])
    est = y / coupling.strength
    dist = 1.0 - overlap_fidelity(system_field, coupling)
    return MeasurementRecord(None, y, est, dist, np.array([est]), path)


def position_handle(system_field: WaveField, coupling: CouplingSpec, omega=None) -> MultiplicativeCoupling:
    a_tau = coupling.strength
    if omega is None:
        omega = _identity
    x = system_field.grid.axis(0)
    w = omega(x)
    lo = min(0.0, a_tau * w.min()) - 12 * coupling.pointer_sigma
    hi = max(0.0, a_tau * w.max()) + 12 * coupling.pointer_sigma
    pg = Grid.make(256, lo, hi, "periodic")
    return MultiplicativeCoupling(system_field, omega, coupling.a, coupling.tau, coupling.pointer_sigma, pg,
                                  coupling.pointer_mass)


def _identity(x):
    return np.asarray(x, dtype=float)


@dataclass
class TrackingResult:
    times: np.ndarray
    estimates: np.ndarray
    actual: np.ndarray
    reference: np.ndarray
    disturbances: np.ndarray

    @property
    def errors(self) -> np.ndarray:
        return self.estimates - self.reference

    @property
    def rms_error(self) -> float:
        return float(np.sqrt(np.mean(np.sum(self.errors**2, axis=1))))


def _conditioned(evolution: EvolutionHandle, t: float, readings: np.ndarray, coupling: CouplingSpec) -> EvolutionHandle:
    """Handle restarted from the system wave conditioned on the pointer readings."""
    f = evolution.field(t)
    g = f.grid
    factor = np.ones(g.shape)
    for k, xk in enumerate(g.mesh()):
        factor = factor * gaussian_packet(readings[k] - coupling.strength * xk, 0.0, coupling.pointer_sigma).real
    cond = normalize(f.with_amplitudes(f.amplitudes * factor, time=t))
    if isinstance(evolution, SplitStepEvolution):
        return SplitStepEvolution(cond, evolution.potential, evolution.dt_field, evolution.kappa, evolution.refine)
    if isinstance(evolution, EigenmodeEvolution) and evolution.modes.basis != "custom-tabulated":
        full = full_basis(evolution.modes)
        c = project(cond, full) * np.exp(1j * full.energies * t)
        return EigenmodeEvolution(full.with_coefficients(c / np.linalg.norm(c)), evolution.potential)
    raise TypeError("tracking with back-action needs an eigenmode or split-step handle")


def full_basis(modes: ModeExpansion) -> ModeExpansion:
    """Every mode the grid resolves, for re-expanding a conditioned wave."""
    g = modes.grid
    if modes.basis == "box-sine":
        ranges = [np.arange(1, n) for n in g.npoints]
    else:
        ranges = [np.arange(-n // 2 + 1, n // 2) for n in g.npoints]
    qn = np.stack([m.ravel() for m in np.meshgrid(*ranges, indexing="ij")], axis=1)
    c = np.zeros(len(qn), dtype=complex)
    c[0] = 1.0
    maker = box_modes if modes.basis == "box-sine" else plane_wave_modes
    return maker(g, qn, c, modes.masses)


def track_trajectory(evolution: EvolutionHandle, q0, probe_times: Sequence[float], coupling: CouplingSpec,
                     seed: int = 0, tol: float = 1e-9, back_action: bool = True) -> TrackingResult:
    """Repeated weak readouts of one configuration along its path.

    Each probe uses a fresh narrow pointer per axis.  With ``back_action``
    the system wave is conditioned on every reading before the path
    continues; the undisturbed path is integrated as the reference.
    """
    if coupling.pointer_dist != "narrow-nonequilibrium":
        raise ValueError("tracking needs a narrow-nonequilibrium pointer")
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    d = len(q0)
    dx = float(np.min(evolution.grid.spacing))
    if coupling.strength * dx < coupling.width * (1 - 1e-9):
        raise ResolutionTooCoarse("pointer width exceeds a*tau times the grid spacing")
    probe_times = np.asarray(probe_times, dtype=float)
    t0 = evolution.t0
    ref = integrate_batch(evolution, q0[None, :], t0, probe_times, tol)
    if ref.member_flags[0] & Flag.STUCK:
        raise RuntimeError("reference path is stuck at a node")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed)))
    handle = evolution
    q = q0.copy()
    t = t0
    est = np.empty((len(probe_times), d))
    actual = np.empty((len(probe_times), d))
    dist = np.empty(len(probe_times))
    for i, tp in enumerate(probe_times):
        if tp > t:
            q = integrate_batch(handle, q[None, :], t, [tp], tol).points[0, -1]
            t = tp
        y = coupling.draw_pointer(rng, d) + coupling.strength * q
        est[i] = y / coupling.strength
        actual[i] = q
        f = handle.field(t)
        fid = 1.0
        if d == 1:
            fid = overlap_fidelity(f, coupling)
        dist[i] = 1.0 - fid
        if back_action:
            handle = _conditioned(handle, t, y, coupling)
    return TrackingResult(probe_times, est, actual, ref.points[0], dist)


# --------------------------------------------------------------------------
# occupancy probe


def smoothed_indicator(lo: float, hi: float, width: float):
    def omega(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * (np.tanh((x - lo) / width) - np.tanh((x - hi) / width))

    return omega


def packet_support(center: float, sigma: float) -> tuple[float, float]:
    return center - 3 * sigma, center + 3 * sigma


def probe_occupancy(two_packet_field: WaveField, packets: Sequence[tuple[float, float]], probe_target: int,
                    q_actual: float, coupling: CouplingSpec, rng: np.random.Generator | int = 0,
                    tol: float = 1e-10) -> MeasurementRecord:
    """Coarse position measurement asking whether packet ``probe_target`` is occupied.

    ``packets`` lists ``(center, sigma)`` per packet.  The probed observable
    is the indicator of the target packet's support, smoothed over two grid
    spacings.  The record's outcome is 1 for occupied and 0 for unoccupied;
    the pointer threshold sits halfway between the two branch centres.
    """
    packets = [(float(c), float(s)) for c, s in packets]
    for i in range(len(packets)):
        for j in range(i + 1, len(packets)):
            (c1, s1), (c2, s2) = packets[i], packets[j]
            if not abs(c1 - c2) > SEPARATION * max(s1, s2):
                raise PacketOverlap(f"packets {i} and {j} are not separated by {SEPARATION:g} widths")
    inside = [i for i, (c, s) in enumerate(packets) if packet_support(c, s)[0] <= q_actual <= packet_support(c, s)[1]]
    if len(inside) != 1:
        raise ValueError("the actual configuration must lie in exactly one packet")
    if not coupling.strength > SEPARATION * coupling.pointer_sigma:
        raise BranchOverlap("occupancy pointer shift a*tau must exceed six pointer widths")
    lo, hi = packet_support(*packets[probe_target])
    omega = smoothed_indicator(lo, hi, 2 * float(two_packet_field.grid.spacing[0]))
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    y0 = float(coupling.draw_pointer(rng))
    handle = position_handle(two_packet_field, coupling, omega)
    path = integrate_trajectory(handle, [q_actual, y0], 0.0, coupling.tau, tol, t_eval=[0.0, coupling.tau])
    y = float(path.points[-1, 1])
    occupied = y >= coupling.strength / 2
    x = two_packet_field.grid.axis(0)
    weight = float(np.sum(np.abs(two_packet_field.amplitudes) ** 2 * (omega(x) > 0.5)) * two_packet_field.grid.cell_volume)
    # the occupied branch keeps the probed packet, the empty one the rest
    dist = 1.0 - (weight if occupied else 1.0 - weight)
    return MeasurementRecord(int(occupied), y, y / coupling.strength, dist, None, path)


def occupancy_probe(two_packet_field: WaveField, packets: Sequence[tuple[float, float]], probe_target: int,
                    q_actual: float, coupling: CouplingSpec, rng: np.random.Generator | int = 0,
                    tol: float = 1e-10) -> str:
    """``"occupied"`` or ``"unoccupied"`` for the probed packet."""
    rec = probe_occupancy(two_packet_field, packets, probe_target, q_actual, coupling, rng, tol)
    return "occupied" if rec.outcome_index == 1 else "unoccupied"
