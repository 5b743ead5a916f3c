"""Time evolution engines for the pilot wave.

Three engines share one evaluation surface (``EvolutionHandle``):

* ``EigenmodeEvolution`` rotates mode coefficients exactly,
* ``SplitStepEvolution`` steps a gridded field with Strang splitting,
* ``ModeCoupling`` / ``MultiplicativeCoupling`` realise the impulsive
  pointer coupling H = a * omega * p_y in closed form.

Handles evaluate psi and its partial derivatives at arbitrary points, which is
all the guidance layer needs.
"""
from __future__ import annotations

import warnings
from collections import OrderedDict
from typing import Callable, Sequence

import numpy as np
import scipy.fft

from .errors import BasisMismatch, BoundaryUnsupported, CFLWarning, PointerOverflow
from .qstate import (
    Grid,
    ModeExpansion,
    PotentialSpec,
    SpectralInterpolant,
    WaveField,
    _wavenumbers,
    basis_1d,
    gaussian_packet,
    synthesize,
)


def evolve_modes(modes: ModeExpansion, t: float) -> ModeExpansion:
    return modes.with_coefficients(modes.coefficients * np.exp(-1j * modes.energies * t))


def _kinetic_symbol(grid: Grid, masses) -> np.ndarray:
    T = np.zeros(grid.shape)
    for k in range(grid.ndim):
        shape = [1] * grid.ndim
        shape[k] = -1
        kk = _wavenumbers(grid, k)
        T = T + (kk**2 / (2 * masses[k])).reshape(shape)
    return T


def max_kinetic_phase(grid: Grid, masses, dt: float) -> float:
    return float(sum((np.pi / grid.spacing[k]) ** 2 / (2 * masses[k]) for k in range(grid.ndim)) * abs(dt))


def _strang(psi, vphase_half, kphase):
    psi = vphase_half * psi
    psi = scipy.fft.ifftn(kphase * scipy.fft.fftn(psi))
    return vphase_half * psi


def evolve_splitstep(field: WaveField, potential: PotentialSpec, dt: float, steps: int) -> WaveField:
    """Advance by ``steps`` Strang steps of size ``dt`` (negative dt runs backwards)."""
    grid = field.grid
    if any(b != "periodic" for b in grid.boundary):
        raise BoundaryUnsupported("split-step needs a periodic grid; use the eigenmode engine for boxes")
    phase = max_kinetic_phase(grid, field.masses, dt)
    if phase > np.pi / 4:
        warnings.warn(
            f"kinetic phase {phase:.3g} rad per step at the Nyquist mode exceeds pi/4", CFLWarning, stacklevel=2
        )
    V = potential.tabulate(grid, field.masses)
    vh = np.exp(-0.5j * V * dt)
    kp = np.exp(-1j * _kinetic_symbol(grid, field.masses) * dt)
    psi = np.array(field.amplitudes)
    for _ in range(int(steps)):
        psi = _strang(psi, vh, kp)
    return field.with_amplitudes(psi, field.time + steps * dt)


class EvolutionHandle:
    """Evaluation surface shared by all engines.

    ``shared_time`` handles want every point of one call at the same time;
    the integrator then steps an ensemble in lockstep.
    """

    engine = "base"
    shared_time = False

    grid: Grid
    masses: tuple[float, ...]
    potential: PotentialSpec
    t0: float = 0.0

    @property
    def ndim(self) -> int:
        return self.grid.ndim

    def evaluate(self, points, t, orders_list: Sequence[tuple[int, ...]]) -> dict:
        raise NotImplementedError

    def field(self, t: float) -> WaveField:
        raise NotImplementedError

    def kernel(self):
        """``(code, params)`` for the compiled integrator, or None."""
        return None

    def density_scale(self) -> float:
        """Reference max |psi|^2 used for the node threshold."""
        return float(np.max(np.abs(self.field(self.t0).amplitudes) ** 2))

    def velocity_field(self, points, t):
        """De Broglie velocity j/|psi|^2 and |psi|^2 at each point."""
        points = np.atleast_2d(points)
        d = self.ndim
        unit = [tuple(int(i == k) for i in range(d)) for k in range(d)]
        ev = self.evaluate(points, t, [(0,) * d] + unit)
        psi = ev[(0,) * d]
        rho = np.abs(psi) ** 2
        v = np.empty(points.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            for k in range(d):
                v[:, k] = np.imag(np.conj(psi) * ev[unit[k]]) / (self.masses[k] * rho)
        return v, rho


class EigenmodeEvolution(EvolutionHandle):
    engine = "eigenmode"

    def __init__(self, modes: ModeExpansion, potential: PotentialSpec | None = None, t0: float = 0.0):
        if modes.basis == "custom-tabulated":
            self.shared_time = True
            self._interp: OrderedDict = OrderedDict()
        self.modes = modes
        self.grid = modes.grid
        self.masses = modes.masses
        default = "box-wall" if modes.basis == "box-sine" else "free"
        self.potential = potential or PotentialSpec(default)
        self.t0 = float(t0)

    def field(self, t: float) -> WaveField:
        return synthesize(self.modes, t)

    def kernel(self):
        m = self.modes
        if m.basis == "custom-tabulated":
            return None
        g = m.grid
        kind = 0 if m.basis == "box-sine" else 1
        return 0, (m.coefficients, m.energies, m.eigenvalues, m.quantum_numbers.astype(np.int64), kind,
                   np.asarray(g.lo, float), np.asarray(g.lengths, float), np.asarray(m.masses, float),
                   0.0, 0.0, 0.0, 0)

    def density_scale(self) -> float:
        return float(np.max(np.abs(self.field(self.t0).amplitudes) ** 2))

    def evaluate(self, points, t, orders_list):
        if self.modes.basis != "custom-tabulated":
            return self.modes.evaluate(points, t, orders_list)
        t = float(np.asarray(t).ravel()[0])
        if t not in self._interp:
            self._interp[t] = SpectralInterpolant(self.field(t).amplitudes, self.grid)
            if len(self._interp) > 16:
                self._interp.popitem(last=False)
        si = self._interp[t]
        return {tuple(o): si(points, o) for o in orders_list}


class SplitStepEvolution(EvolutionHandle):
    """Split-step field on a lattice of times ``t0 + j*dt_field``.

    Off-lattice times are reached by one extra fractional Strang step from
    the nearest earlier lattice field, never by interpolating in time.
    """

    engine = "splitstep"
    shared_time = True

    def __init__(self, field: WaveField, potential: PotentialSpec, dt_field: float, kappa: int = 4,
                 refine: int = 2, cache_size: int = 8):
        if any(b != "periodic" for b in field.grid.boundary):
            raise BoundaryUnsupported("split-step needs a periodic grid")
        if dt_field <= 0:
            raise ValueError("dt_field must be positive")
        self.grid = field.grid
        self.masses = field.masses
        self.potential = potential
        self.t0 = field.time
        self.dt_field = float(dt_field)
        self.kappa = int(kappa)
        self.refine = refine
        phase = max_kinetic_phase(self.grid, self.masses, dt_field)
        if phase > np.pi / 4:
            warnings.warn(f"kinetic phase {phase:.3g} rad per step exceeds pi/4", CFLWarning, stacklevel=2)
        self._V = potential.tabulate(self.grid, self.masses)
        self._T = _kinetic_symbol(self.grid, self.masses)
        self._vh = np.exp(-0.5j * self._V * self.dt_field)
        self._kp = np.exp(-1j * self._T * self.dt_field)
        self._lattice: OrderedDict[int, np.ndarray] = OrderedDict({0: np.array(field.amplitudes)})
        self._cache_size = cache_size
        self._interp: OrderedDict[float, SpectralInterpolant] = OrderedDict()
        self._scale = float(np.max(np.abs(field.amplitudes) ** 2))

    @property
    def time_quantum(self) -> float:
        return self.dt_field / self.kappa

    def _lattice_field(self, j: int) -> np.ndarray:
        if j in self._lattice:
            self._lattice.move_to_end(j)
            return self._lattice[j]
        start = max(k for k in self._lattice if k <= j)
        psi = self._lattice[start]
        for _ in range(j - start):
            psi = _strang(psi, self._vh, self._kp)
        self._lattice[j] = psi
        while len(self._lattice) > self._cache_size:
            # never drop the initial field
            oldest = next(k for k in self._lattice if k != 0)
            del self._lattice[oldest]
        return psi

    def _amplitudes(self, t: float) -> np.ndarray:
        s = (t - self.t0) / self.dt_field
        if s < -1e-12:
            raise ValueError("split-step handle only evaluates forward of its start time")
        j = int(np.floor(s + 1e-9))
        psi = self._lattice_field(j)
        frac = t - (self.t0 + j * self.dt_field)
        if abs(frac) > 1e-13 * max(1.0, abs(t)):
            psi = _strang(psi, np.exp(-0.5j * self._V * frac), np.exp(-1j * self._T * frac))
        return psi

    def field(self, t: float) -> WaveField:
        return WaveField(self.grid, self._amplitudes(t), self.masses, t)

    def density_scale(self) -> float:
        return self._scale

    def _interpolant(self, t: float) -> SpectralInterpolant:
        if t not in self._interp:
            self._interp[t] = SpectralInterpolant(self._amplitudes(t), self.grid, self.refine)
            if len(self._interp) > 16:
                self._interp.popitem(last=False)
        return self._interp[t]

    def evaluate(self, points, t, orders_list):
        points = np.atleast_2d(points)
        t = np.asarray(t, dtype=float)
        if t.ndim == 0 or np.all(t == t.flat[0]):
            si = self._interpolant(float(t.flat[0]))
            return {tuple(o): si(points, o) for o in orders_list}
        out = {tuple(o): np.empty(len(points), dtype=complex) for o in orders_list}
        for tu in np.unique(t):
            sel = t == tu
            si = self._interpolant(float(tu))
            for o in orders_list:
                out[tuple(o)][sel] = si(points[sel], o)
        return out


# --------------------------------------------------------------------------
# impulsive pointer coupling


def _gauss_derivs(y, sigma, order):
    """Derivatives of the real Gaussian amplitude with position std sigma."""
    g = gaussian_packet(y, 0.0, sigma).real
    u = y / (2 * sigma**2)
    if order == 0:
        return g
    if order == 1:
        return -u * g
    if order == 2:
        return (u**2 - 1 / (2 * sigma**2)) * g
    if order == 3:
        return (-(u**3) + 3 * u / (2 * sigma**2)) * g
    raise ValueError("pointer derivative order > 3 not supported")


def _pointer_support(pointer: WaveField, rel: float = 1e-12):
    rho = np.abs(pointer.amplitudes) ** 2
    idx = np.nonzero(rho > rel * rho.max())[0]
    y = pointer.grid.axis(0)
    return y[idx[0]], y[idx[-1]]


def evolve_coupling(system: ModeExpansion, pointer: WaveField, a: float, t: float) -> WaveField:
    """Joint field sum_n c_n phi_n(x) g0(y - a omega_n t) on the system x pointer grid.

    The pointer packet is shifted spectrally, so any tabulated g0 works.
    """
    if system.grid.ndim != 1 or pointer.grid.ndim != 1:
        raise BasisMismatch("coupling joins a 1-D system to a 1-D pointer")
    pg = pointer.grid
    if pg.boundary[0] != "periodic":
        raise BoundaryUnsupported("pointer grid must be periodic")
    lo_s, hi_s = _pointer_support(pointer)
    shifts = a * system.eigenvalues * t
    if np.any(lo_s + shifts < pg.lo[0]) or np.any(hi_s + shifts > pg.hi[0]):
        raise PointerOverflow("a shifted pointer packet leaves the pointer grid")
    k = _wavenumbers(pg, 0)
    gspec = np.fft.fft(pointer.amplitudes)
    shifted = np.fft.ifft(gspec[None, :] * np.exp(-1j * np.outer(shifts, k)), axis=1)
    phi = system.basis_on_grid()
    joint = np.einsum("n,nx,ny->xy", system.coefficients, phi, shifted)
    grid = system.grid.product(pg)
    return WaveField(grid, joint, system.masses + pointer.masses, t)


class ModeCoupling(EvolutionHandle):
    """Joint (x, y) evolution under H = a * omega * p_y for t <= tau.

    ``observable`` selects the operator diagonal in the system modes:

    * ``"momentum"``: omega = p_x (plane-wave modes),
    * ``"kinetic"``: omega = p_x^2 / 2m (box or plane-wave modes).

    For t > tau the coupling is off: the system evolves under its own
    kinetic Hamiltonian and the pointer is frozen.
    """

    engine = "coupling"

    def __init__(self, system: ModeExpansion, observable: str, a: float, tau: float, pointer_sigma: float,
                 pointer_grid: Grid | None = None, pointer_mass: float = 1.0):
        if system.grid.ndim != 1:
            raise BasisMismatch("coupled system must be one-dimensional")
        if system.basis == "custom-tabulated":
            raise BasisMismatch("coupling needs an analytic basis")
        if observable not in ("momentum", "kinetic"):
            raise ValueError(f"unsupported coupled observable {observable!r}")
        if observable == "momentum" and system.basis != "plane-wave":
            raise BasisMismatch("momentum coupling needs plane-wave modes")
        if observable == "kinetic":
            expected = system.energies
        else:
            expected = 2 * np.pi * system.quantum_numbers[:, 0] / system.grid.lengths[0]
        if not np.allclose(system.eigenvalues, expected, rtol=1e-9, atol=1e-12):
            raise BasisMismatch(f"mode eigenvalues are not the {observable} values the coupling shifts by")
        self.system = system
        self.observable = observable
        self.a = float(a)
        self.tau = float(tau)
        self.sigma = float(pointer_sigma)
        if pointer_grid is None:
            shifts = self.a * system.eigenvalues * self.tau
            lo = min(shifts.min(), 0) - 12 * self.sigma
            hi = max(shifts.max(), 0) + 12 * self.sigma
            pointer_grid = Grid.make(256, lo, hi, "periodic")
        self.pointer_grid = pointer_grid
        self.grid = system.grid.product(pointer_grid)
        self.masses = system.masses + (float(pointer_mass),)
        self.potential = PotentialSpec("box-wall" if system.basis == "box-sine" else "free")
        self.t0 = 0.0

    def kernel(self):
        m = self.system
        g = m.grid
        kind = 0 if m.basis == "box-sine" else 1
        obs = 0 if self.observable == "momentum" else 1
        return 1, (m.coefficients, m.energies, m.eigenvalues, m.quantum_numbers.astype(np.int64), kind,
                   np.asarray(g.lo, float), np.asarray(g.lengths, float), np.asarray(self.masses, float),
                   self.a, self.tau, self.sigma, obs)

    def pointer_field(self) -> WaveField:
        y = self.pointer_grid.axis(0)
        return WaveField(self.pointer_grid, gaussian_packet(y, 0.0, self.sigma), (self.masses[1],))

    def field(self, t: float) -> WaveField:
        u = min(t, self.tau)
        s = max(t - self.tau, 0.0)
        sys_t = evolve_modes(self.system, s)
        out = evolve_coupling(sys_t, self.pointer_field(), self.a, u)
        return WaveField(out.grid, out.amplitudes, self.masses, t)

    def density_scale(self) -> float:
        x = self.system.grid.axis(0)
        phi = np.abs(synthesize(self.system).amplitudes) ** 2
        return float(phi.max() * (2 * np.pi * self.sigma**2) ** -0.5) if len(x) else 1.0

    def evaluate(self, points, t, orders_list):
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape)
        u = np.minimum(t, self.tau)
        s = np.maximum(t - self.tau, 0.0)
        sysm = self.system
        g = sysm.grid
        qn = sysm.quantum_numbers[:, 0]
        phase = sysm.coefficients[:, None] * np.exp(-1j * np.outer(sysm.energies, s))
        yshift = y[None, :] - self.a * np.outer(sysm.eigenvalues, u)
        out = {}
        for orders in orders_list:
            dx, dy = orders
            phi = basis_1d(sysm.basis, qn, x, g.lo[0], g.lengths[0], dx)
            out[tuple(orders)] = np.sum(phase * phi * _gauss_derivs(yshift, self.sigma, dy), axis=0)
        return out

    def velocity_field(self, points, t):
        points = np.atleast_2d(points)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(points),))
        ev = self.evaluate(points, t, [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0)])
        psi, px, py, pxy, pxx = (ev[k] for k in [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0)])
        rho = np.abs(psi) ** 2
        a, m = self.a, self.masses[0]
        cpsi = np.conj(psi)
        if self.observable == "momentum":
            jx = a * np.imag(cpsi * py)
            jy = a * np.imag(cpsi * px)
        else:
            jx = a / (2 * m) * (np.real(np.conj(py) * px) - np.real(cpsi * pxy))
            jy = -a / (2 * m) * np.real(cpsi * pxx)
        after = t > self.tau
        jx = np.where(after, np.imag(cpsi * px) / m, jx)
        jy = np.where(after, 0.0, jy)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.stack([jx / rho, jy / rho], axis=1)
        return v, rho


class MultiplicativeCoupling(EvolutionHandle):
    """Joint evolution psi0(x) g0(y - a omega(x) t) for a multiplicative observable.

    ``omega`` maps system positions to observable values (x itself for a
    position measurement, a smoothed indicator for an occupancy probe).  The
    coupling current is j_x = 0, j_y = a omega(x) |psi|^2.  After ``tau``
    the joint wave is frozen.
    """

    engine = "coupling"

    def __init__(self, system: WaveField, omega: Callable[[np.ndarray], np.ndarray], a: float, tau: float,
                 pointer_sigma: float, pointer_grid: Grid | None = None, pointer_mass: float = 1.0):
        if system.grid.ndim != 1:
            raise BasisMismatch("coupled system must be one-dimensional")
        self.system = system
        self.omega = omega
        self.a = float(a)
        self.tau = float(tau)
        self.sigma = float(pointer_sigma)
        if pointer_grid is None:
            w = omega(system.grid.axis(0))
            span = self.a * self.tau * np.array([w.min(), w.max(), 0.0])
            pointer_grid = Grid.make(256, span.min() - 12 * self.sigma, span.max() + 12 * self.sigma, "periodic")
        self.pointer_grid = pointer_grid
        self.grid = system.grid.product(pointer_grid)
        self.masses = system.masses + (float(pointer_mass),)
        self.potential = PotentialSpec("free")
        self.t0 = 0.0
        self._interp = SpectralInterpolant(system.amplitudes, system.grid)

    def field(self, t: float) -> WaveField:
        u = min(max(t, 0.0), self.tau)
        x = self.system.grid.axis(0)
        y = self.pointer_grid.axis(0)
        shift = self.a * self.omega(x) * u
        joint = self.system.amplitudes[:, None] * gaussian_packet(y[None, :] - shift[:, None], 0.0, self.sigma)
        return WaveField(self.grid, joint, self.masses, t)

    def density_scale(self) -> float:
        return float(np.max(np.abs(self.system.amplitudes) ** 2) * (2 * np.pi * self.sigma**2) ** -0.5)

    def evaluate(self, points, t, orders_list):
        points = np.atleast_2d(points)
        x, y = points[:, 0], points[:, 1]
        u = np.clip(np.broadcast_to(np.asarray(t, dtype=float), x.shape), 0.0, self.tau)
        out = {}
        for orders in orders_list:
            if orders[0] != 0:
                raise ValueError("system derivatives of a multiplicative coupling are not needed")
            psi = self._interp(points[:, :1], (0,))
            out[tuple(orders)] = psi * _gauss_derivs(y - self.a * self.omega(x) * u, self.sigma, orders[1])
        return out

    def velocity_field(self, points, t):
        points = np.atleast_2d(points)
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(points),))
        psi = self.evaluate(points, t, [(0, 0)])[(0, 0)]
        rho = np.abs(psi) ** 2
        active = (t >= 0) & (t < self.tau)
        vy = np.where(active, self.a * self.omega(points[:, 0]), 0.0)
        return np.stack([np.zeros(len(points)), vy], axis=1), rho


class TimeReversed(EvolutionHandle):
    """Runs a handle backwards: velocity(q, s) = -v(q, t_end - s)."""

    def __init__(self, inner: EvolutionHandle, t_end: float):
        self.inner = inner
        self.t_end = float(t_end)
        self.grid = inner.grid
        self.masses = inner.masses
        self.potential = inner.potential
        self.shared_time = inner.shared_time
        self.engine = inner.engine
        self.t0 = 0.0

    def density_scale(self):
        return self.inner.density_scale()

    def kernel(self):
        return self.inner.kernel()

    def field(self, t):
        return self.inner.field(self.t_end - t)

    def evaluate(self, points, t, orders_list):
        return self.inner.evaluate(points, self.t_end - np.asarray(t, dtype=float), orders_list)

    def velocity_field(self, points, t):
        v, rho = self.inner.velocity_field(points, self.t_end - np.asarray(t, dtype=float))
        return -v, rho
