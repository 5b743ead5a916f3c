"""Grids, wave fields, densities, currents and eigenmode synthesis.

Units are hbar = 1 with an explicit mass per configuration axis.  A box axis
samples ``x_j = lo + j*dx`` for ``j = 0..N-1`` with ``dx = (hi-lo)/N``; the
walls sit at ``lo`` (sampled, amplitude zero) and ``hi`` (implied).  A
periodic axis samples the same points and wraps at ``hi``.

Derivatives are spectral: plain FFT on periodic axes, and FFT of the odd
extension (a sine series) on box axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
import scipy.fft

from .errors import BasisMismatch, GridError, ZeroNorm

BOUNDARIES = ("periodic", "box")


def _as_tuple(value, ndim, cast):
    if np.ndim(value) == 0:
        return (cast(value),) * ndim
    out = tuple(cast(v) for v in value)
    if len(out) != ndim:
        raise GridError(f"expected {ndim} per-axis values, got {len(out)}")
    return out


@dataclass(frozen=True)
class Grid:
    npoints: tuple[int, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    boundary: tuple[str, ...]

    def __post_init__(self):
        if not 1 <= len(self.npoints) <= 3:
            raise GridError("grid must have 1 to 3 axes")
        if not (len(self.lo) == len(self.hi) == len(self.boundary) == len(self.npoints)):
            raise GridError("per-axis fields disagree in length")
        for n, lo, hi, b in zip(self.npoints, self.lo, self.hi, self.boundary):
            if n < 8 or n & (n - 1):
                raise GridError(f"npoints must be a power of two >= 8, got {n}")
            if not hi > lo:
                raise GridError(f"need hi > lo, got [{lo}, {hi}]")
            if b not in BOUNDARIES:
                raise GridError(f"unknown boundary {b!r}")

    @classmethod
    def make(cls, npoints, lo, hi, boundary="periodic") -> "Grid":
        ndim = 1 if np.ndim(npoints) == 0 else len(npoints)
        return cls(
            _as_tuple(npoints, ndim, int),
            _as_tuple(lo, ndim, float),
            _as_tuple(hi, ndim, float),
            _as_tuple(boundary, ndim, str),
        )

    @property
    def ndim(self) -> int:
        return len(self.npoints)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.npoints

    @property
    def lengths(self) -> np.ndarray:
        return np.subtract(self.hi, self.lo)

    @property
    def spacing(self) -> np.ndarray:
        return self.lengths / np.asarray(self.npoints)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis(self, k: int) -> np.ndarray:
        return self.lo[k] + self.spacing[k] * np.arange(self.npoints[k])

    def axes(self) -> list[np.ndarray]:
        return [self.axis(k) for k in range(self.ndim)]

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def points(self) -> np.ndarray:
        """All grid points as a ``(size, ndim)`` array in row-major order."""
        return np.stack([m.ravel() for m in self.mesh()], axis=-1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        ok = np.ones(len(points), dtype=bool)
        for k in range(self.ndim):
            if self.boundary[k] == "box":
                ok &= (points[:, k] >= self.lo[k]) & (points[:, k] <= self.hi[k])
        return ok

    def wrap(self, points: np.ndarray) -> np.ndarray:
        """Map periodic coordinates back into ``[lo, hi)``."""
        points = np.array(points, dtype=float, copy=True)
        for k in range(self.ndim):
            if self.boundary[k] == "periodic":
                L = self.hi[k] - self.lo[k]
                points[..., k] = self.lo[k] + np.mod(points[..., k] - self.lo[k], L)
        return points

    def product(self, other: "Grid") -> "Grid":
        return Grid(
            self.npoints + other.npoints,
            self.lo + other.lo,
            self.hi + other.hi,
            self.boundary + other.boundary,
        )


@dataclass(frozen=True, eq=False)
class WaveField:
    grid: Grid
    amplitudes: np.ndarray
    masses: tuple[float, ...]
    time: float = 0.0

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.size != int(np.prod(self.grid.npoints)):
            raise GridError("amplitude count does not match the grid")
        amps = amps.reshape(self.grid.shape)
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)
        masses = _as_tuple(self.masses, self.grid.ndim, float)
        if any(m <= 0 for m in masses):
            raise GridError("masses must be positive")
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "time", float(self.time))

    def with_amplitudes(self, amplitudes, time=None) -> "WaveField":
        return WaveField(self.grid, amplitudes, self.masses, self.time if time is None else time)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amplitudes) ** 2) * self.grid.cell_volume))

    def inner(self, other: "WaveField") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes) * self.grid.cell_volume)


def normalize(field: WaveField) -> WaveField:
    norm = field.norm()
    if not norm >= 1e-300:
        raise ZeroNorm(f"field norm {norm!r} is too small to normalize")
    return field.with_amplitudes(field.amplitudes / norm)


def density(field: WaveField) -> np.ndarray:
    return np.abs(field.amplitudes) ** 2


# --------------------------------------------------------------------------
# spectral machinery


def _extend(a: np.ndarray, axis: int, boundary: str) -> np.ndarray:
    """Odd extension along a box axis (length N -> 2N); identity if periodic."""
    if boundary == "periodic":
        return a
    f = np.moveaxis(a, axis, 0)
    ext = np.concatenate([f, np.zeros_like(f[:1]), -f[:0:-1]], axis=0)
    return np.moveaxis(ext, 0, axis)


def _wavenumbers(grid: Grid, axis: int) -> np.ndarray:
    n = grid.npoints[axis] * (2 if grid.boundary[axis] == "box" else 1)
    return 2 * np.pi * np.fft.fftfreq(n, d=grid.spacing[axis])


def _diff_symbol(k: np.ndarray, order: int) -> np.ndarray:
    sym = (1j * k) ** order
    if order % 2 == 1:
        sym[len(k) // 2] = 0.0
    return sym


def spectral_derivative(values: np.ndarray, grid: Grid, orders: Sequence[int]) -> np.ndarray:
    """Mixed partial derivative of gridded values, per-axis orders."""
    ext = np.asarray(values, dtype=complex)
    for k, b in enumerate(grid.boundary):
        ext = _extend(ext, k, b)
    spec = scipy.fft.fftn(ext)
    for k, order in enumerate(orders):
        if order:
            shape = [1] * grid.ndim
            shape[k] = -1
            spec = spec * _diff_symbol(_wavenumbers(grid, k), order).reshape(shape)
    out = scipy.fft.ifftn(spec)
    return out[tuple(slice(0, n) for n in grid.npoints)]


def gradient(field: WaveField) -> np.ndarray:
    g = field.grid
    return np.stack(
        [spectral_derivative(field.amplitudes, g, [int(i == k) for i in range(g.ndim)]) for k in range(g.ndim)]
    )


def current(field: WaveField) -> np.ndarray:
    """Probability current j_k = Im(psi* d_k psi) / m_k, shape (ndim, *grid.shape)."""
    grad = gradient(field)
    psi_c = np.conj(field.amplitudes)
    return np.stack([np.imag(psi_c * grad[k]) / field.masses[k] for k in range(field.grid.ndim)])


class SpectralInterpolant:
    """Off-grid evaluation of a gridded field and its derivatives.

    One-dimensional fields are evaluated from the full trigonometric (or sine)
    series.  Higher-dimensional fields are refined by spectral zero padding
    and then read with a quintic periodic B-spline, which keeps the cost per
    point independent of the grid size.
    """

    def __init__(self, values: np.ndarray, grid: Grid, refine: int = 2):
        self.grid = grid
        self.refine = int(refine)
        ext = np.asarray(values, dtype=complex).reshape(grid.shape)
        for k, b in enumerate(grid.boundary):
            ext = _extend(ext, k, b)
        self._ext_shape = ext.shape
        self._spec = scipy.fft.fftn(ext)
        self._cache: dict[tuple[int, ...], np.ndarray] = {}
        self._pad = None

    def _series_1d(self, s: np.ndarray, order: int) -> np.ndarray:
        (M,) = self._ext_shape
        dx = self.grid.spacing[0]
        k = 2 * np.pi * np.fft.fftfreq(M, d=dx)
        coef = self._spec / M
        # split the Nyquist term symmetrically so the interpolant is real for real data
        nyq = M // 2
        k = np.append(k, -k[nyq])
        coef = np.append(coef, 0.5 * coef[nyq])
        coef[nyq] *= 0.5
        coef = coef * (1j * k) ** order
        out = np.empty(len(s), dtype=complex)
        chunk = max(1, 2_000_000 // len(k))
        for start in range(0, len(s), chunk):
            ss = s[start : start + chunk]
            out[start : start + chunk] = np.exp(1j * np.outer(ss, k)) @ coef
        return out

    def _padded(self) -> np.ndarray:
        """Zero-padded spectrum, divided by the periodic quintic B-spline symbol.

        The inverse transform of this array is directly the spline
        coefficient grid, so no separate prefilter pass is needed.
        """
        if self._pad is not None:
            return self._pad
        spec = self._spec
        for k in range(self.grid.ndim):
            M = self._ext_shape[k]
            spec = np.moveaxis(spec, k, 0)
            padded = np.zeros((M * self.refine,) + spec.shape[1:], dtype=complex)
            h = M // 2
            padded[:h] = spec[:h]
            padded[-h + 1 :] = spec[h + 1 :]
            # split the Nyquist bin
            padded[h] = 0.5 * spec[h]
            padded[-h] = 0.5 * spec[h]
            theta = 2 * np.pi * np.fft.fftfreq(len(padded))
            symbol = (66 + 52 * np.cos(theta) + 2 * np.cos(2 * theta)) / 120
            padded /= symbol.reshape((-1,) + (1,) * (padded.ndim - 1))
            spec = np.moveaxis(padded, 0, k)
        self._pad = spec * self.refine**self.grid.ndim
        return self._pad

    def _refined(self, orders: tuple[int, ...]) -> np.ndarray:
        if orders in self._cache:
            return self._cache[orders]
        spec = self._padded()
        for k, order in enumerate(orders):
            if order:
                n = spec.shape[k]
                kk = 2 * np.pi * np.fft.fftfreq(n, d=self.grid.spacing[k] / self.refine)
                shape = [1] * self.grid.ndim
                shape[k] = -1
                spec = spec * ((1j * kk) ** order).reshape(shape)
        coef = scipy.fft.ifftn(spec, overwrite_x=spec is not self._pad)
        self._cache[orders] = coef
        return coef

    def __call__(self, points: np.ndarray, orders: Sequence[int] | None = None) -> np.ndarray:
        grid = self.grid
        points = np.atleast_2d(np.asarray(points, dtype=float))
        orders = tuple(orders) if orders is not None else (0,) * grid.ndim
        if grid.ndim == 1:
            return self._series_1d(points[:, 0] - grid.lo[0], orders[0])
        coef = self._refined(orders)
        coords = np.stack(
            [(points[:, k] - grid.lo[k]) / (grid.spacing[k] / self.refine) for k in range(grid.ndim)]
        )
        kw = dict(order=5, mode="grid-wrap", prefilter=False)
        return ndimage.map_coordinates(coef, coords, **kw)


# --------------------------------------------------------------------------
# eigenmodes

BASES = ("box-sine", "plane-wave", "custom-tabulated")


def basis_1d(kind: str, n: np.ndarray, x: np.ndarray, lo: float, L: float, order: int = 0) -> np.ndarray:
    """1-D basis function (and derivative) for quantum numbers ``n`` at ``x``.

    Returns an array of shape ``(len(n), len(x))``.
    """
    n = np.asarray(n)[:, None]
    x = np.asarray(x, dtype=float)[None, :]
    if kind == "box-sine":
        k = n * np.pi / L
        return np.sqrt(2.0 / L) * k**order * np.sin(k * (x - lo) + order * np.pi / 2)
    if kind == "plane-wave":
        k = 2 * np.pi * n / L
        return (1j * k) ** order * np.exp(1j * k * x) / np.sqrt(L)
    raise BasisMismatch(f"no analytic form for basis {kind!r}")


def mode_energies(kind: str, quantum_numbers: np.ndarray, grid: Grid, masses) -> np.ndarray:
    qn = np.atleast_2d(quantum_numbers)
    L = grid.lengths
    if kind == "box-sine":
        k = qn * np.pi / L
    else:
        k = 2 * np.pi * qn / L
    return np.sum(k**2 / (2 * np.asarray(masses)), axis=1)


@dataclass(frozen=True, eq=False)
class ModeExpansion:
    """Coefficients over an orthonormal eigenbasis.

    ``quantum_numbers`` has one row per mode (box: n >= 1 per axis; plane
    wave: signed integer wave index per axis).  A custom-tabulated basis
    instead carries ``tabulated`` with shape ``(M, *grid.shape)``.
    """

    basis: str
    coefficients: np.ndarray
    eigenvalues: np.ndarray
    energies: np.ndarray
    grid: Grid
    masses: tuple[float, ...]
    quantum_numbers: np.ndarray | None = None
    tabulated: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.basis not in BASES:
            raise BasisMismatch(f"unknown basis {self.basis!r}")
        c = np.asarray(self.coefficients, dtype=complex).ravel()
        w = np.asarray(self.eigenvalues, dtype=float).ravel()
        e = np.asarray(self.energies, dtype=float).ravel()
        if not len(c) == len(w) == len(e):
            raise BasisMismatch("coefficients, eigenvalues and energies differ in length")
        if abs(np.sum(np.abs(c) ** 2) - 1.0) > 1e-9:
            raise ValueError("mode coefficients must satisfy sum |c_n|^2 = 1")
        object.__setattr__(self, "coefficients", c)
        object.__setattr__(self, "eigenvalues", w)
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "masses", _as_tuple(self.masses, self.grid.ndim, float))
        if self.basis == "custom-tabulated":
            tab = np.asarray(self.tabulated, dtype=complex)
            if tab.shape != (len(c),) + self.grid.shape:
                raise BasisMismatch("tabulated basis shape does not match grid and mode count")
            object.__setattr__(self, "tabulated", tab)
        else:
            qn = np.atleast_2d(np.asarray(self.quantum_numbers, dtype=int))
            if qn.shape != (len(c), self.grid.ndim):
                raise BasisMismatch("quantum_numbers must have shape (modes, ndim)")
            want = "box" if self.basis == "box-sine" else "periodic"
            if any(b != want for b in self.grid.boundary):
                raise BasisMismatch(f"{self.basis} basis needs {want} boundaries on every axis")
            if self.basis == "box-sine" and np.any(qn < 1):
                raise BasisMismatch("box quantum numbers start at 1")
            object.__setattr__(self, "quantum_numbers", qn)

    def __len__(self):
        return len(self.coefficients)

    def with_coefficients(self, coefficients) -> "ModeExpansion":
        return ModeExpansion(
            self.basis, coefficients, self.eigenvalues, self.energies, self.grid,
            self.masses, self.quantum_numbers, self.tabulated,
        )

    def basis_on_grid(self) -> np.ndarray:
        """Basis functions tabulated on the grid, shape ``(M, *grid.shape)``."""
        if self.basis == "custom-tabulated":
            return self.tabulated
        g = self.grid
        out = np.ones((len(self),) + g.shape, dtype=complex)
        for k in range(g.ndim):
            table = basis_1d(self.basis, self.quantum_numbers[:, k], g.axis(k), g.lo[k], g.lengths[k])
            shape = [len(self)] + [1] * g.ndim
            shape[k + 1] = -1
            out = out * table.reshape(shape)
        return out

    def evaluate(self, points: np.ndarray, t, orders_list: Sequence[tuple[int, ...]]) -> dict:
        """Psi and requested partial derivatives at off-grid points.

        ``t`` may be a scalar or one time per point.  Returns a dict keyed by
        the per-axis derivative orders.
        """
        if self.basis == "custom-tabulated":
            raise BasisMismatch("custom-tabulated modes are evaluated through a SpectralInterpolant")
        points = np.atleast_2d(points)
        g = self.grid
        t = np.asarray(t, dtype=float)
        phase = self.coefficients[:, None] * np.exp(-1j * np.outer(self.energies, np.atleast_1d(t)))
        # per-axis tables for each distinct derivative order needed
        tables: dict[tuple[int, int], np.ndarray] = {}
        for orders in orders_list:
            for k, d in enumerate(orders):
                if (k, d) not in tables:
                    uniq, inv = np.unique(self.quantum_numbers[:, k], return_inverse=True)
                    tab = basis_1d(self.basis, uniq, points[:, k], g.lo[k], g.lengths[k], d)
                    tables[(k, d)] = tab[inv]
        out = {}
        for orders in orders_list:
            prod = phase
            for k, d in enumerate(orders):
                prod = prod * tables[(k, d)]
            out[tuple(orders)] = prod.sum(axis=0)
        return out


def box_modes(grid: Grid, quantum_numbers, coefficients, masses, eigenvalues=None) -> ModeExpansion:
    """Box eigenmodes; eigenvalues default to the mode energies."""
    qn = np.atleast_2d(np.asarray(quantum_numbers, dtype=int))
    if qn.shape[0] == 1 and grid.ndim == 1 and qn.shape[1] != 1:
        qn = qn.T
    c = np.asarray(coefficients, dtype=complex)
    c = c / np.sqrt(np.sum(np.abs(c) ** 2))
    masses = _as_tuple(masses, grid.ndim, float)
    energies = mode_energies("box-sine", qn, grid, masses)
    return ModeExpansion("box-sine", c, energies if eigenvalues is None else eigenvalues,
                         energies, grid, masses, qn)


def plane_wave_modes(grid: Grid, wave_indices, coefficients, masses, eigenvalues=None) -> ModeExpansion:
    """Plane waves exp(i k x)/sqrt(L) with k = 2 pi n / L; eigenvalues default to k along axis 0."""
    qn = np.atleast_2d(np.asarray(wave_indices, dtype=int))
    if qn.shape[0] == 1 and grid.ndim == 1 and qn.shape[1] != 1:
        qn = qn.T
    c = np.asarray(coefficients, dtype=complex)
    c = c / np.sqrt(np.sum(np.abs(c) ** 2))
    masses = _as_tuple(masses, grid.ndim, float)
    energies = mode_energies("plane-wave", qn, grid, masses)
    if eigenvalues is None:
        eigenvalues = 2 * np.pi * qn[:, 0] / grid.lengths[0]
    return ModeExpansion("plane-wave", c, eigenvalues, energies, grid, masses, qn)


def orthonormality_error(modes: ModeExpansion) -> float:
    """Max deviation of the discrete Gram matrix from the identity."""
    b = modes.basis_on_grid().reshape(len(modes), -1)
    gram = (np.conj(b) @ b.T) * modes.grid.cell_volume
    return float(np.max(np.abs(gram - np.eye(len(modes)))))


def synthesize(modes: ModeExpansion, t: float = 0.0, grid: Grid | None = None) -> WaveField:
    """Psi(q, t) = sum_n c_n exp(-i E_n t) phi_n(q) tabulated on the grid."""
    if grid is not None and grid != modes.grid:
        raise BasisMismatch("requested grid differs from the expansion's grid")
    c = modes.coefficients * np.exp(-1j * modes.energies * t)
    amps = np.tensordot(c, modes.basis_on_grid(), axes=1)
    return WaveField(modes.grid, amps, modes.masses, t)


def project(field: WaveField, modes: ModeExpansion) -> np.ndarray:
    """Discrete inner products <phi_n | field>."""
    b = modes.basis_on_grid().reshape(len(modes), -1)
    return (np.conj(b) @ field.amplitudes.ravel()) * field.grid.cell_volume


def gaussian_packet(x, center: float, sigma: float, momentum: float = 0.0) -> np.ndarray:
    """Normalized 1-D Gaussian with position standard deviation ``sigma``."""
    x = np.asarray(x, dtype=float)
    return (2 * np.pi * sigma**2) ** -0.25 * np.exp(-((x - center) ** 2) / (4 * sigma**2) + 1j * momentum * x)


# --------------------------------------------------------------------------
# potentials

POTENTIAL_KINDS = ("free", "harmonic", "box-wall", "barrier-with-slits", "tabulated")


@dataclass(frozen=True)
class PotentialSpec:
    """External potential V.

    Parameters per kind:

    * ``free``: none.
    * ``harmonic``: ``[omega, center_1, ..., center_d]`` (centers default 0);
      V = sum_k m_k omega^2 (x_k - c_k)^2 / 2.
    * ``box-wall``: none; zero inside, walls enforced by the box boundary.
    * ``barrier-with-slits``: ``[x_barrier, thickness, height, slit_1, slit_2,
      slit_width]`` on a 2-D grid; a wall along axis 1 at axis-0 position
      ``x_barrier`` with two openings centred at ``slit_1`` and ``slit_2``.
    * ``tabulated``: the row-major table itself.
    """

    kind: str
    parameters: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "parameters", tuple(float(p) for p in self.parameters))
        p = self.parameters
        if self.kind not in POTENTIAL_KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "harmonic" and (not p or p[0] <= 0):
            raise ValueError("harmonic potential needs a positive frequency")
        if self.kind == "barrier-with-slits":
            if len(p) != 6:
                raise ValueError("barrier-with-slits needs 6 parameters")
            _, thick, height, s1, s2, width = p
            if thick <= 0 or height < 0 or width <= 0:
                raise ValueError("barrier thickness and slit width must be positive")
            if width >= abs(s2 - s1):
                raise ValueError("slit width must be smaller than the slit separation")
        if self.kind in ("free", "box-wall") and p:
            raise ValueError(f"{self.kind} potential takes no parameters")

    def value(self, points: np.ndarray, masses) -> np.ndarray:
        points = np.atleast_2d(points)
        p = self.parameters
        if self.kind in ("free", "box-wall"):
            return np.zeros(len(points))
        if self.kind == "harmonic":
            omega = p[0]
            centers = np.zeros(points.shape[1])
            centers[: len(p) - 1] = p[1:]
            return 0.5 * np.sum(np.asarray(masses) * omega**2 * (points - centers) ** 2, axis=1)
        if self.kind == "barrier-with-slits":
            xb, thick, height, s1, s2, width = p
            in_wall = np.abs(points[:, 0] - xb) <= thick / 2
            in_slit = (np.abs(points[:, 1] - s1) < width / 2) | (np.abs(points[:, 1] - s2) < width / 2)
            return np.where(in_wall & ~in_slit, height, 0.0)
        raise ValueError("tabulated potentials are only defined on their grid")

    def gradient(self, points: np.ndarray, masses) -> np.ndarray:
        points = np.atleast_2d(points)
        if self.kind in ("free", "box-wall"):
            return np.zeros_like(points, dtype=float)
        if self.kind == "harmonic":
            p = self.parameters
            centers = np.zeros(points.shape[1])
            centers[: len(p) - 1] = p[1:]
            return np.asarray(masses) * p[0] ** 2 * (points - centers)
        raise ValueError(f"no pointwise gradient for {self.kind} potential")

    def tabulate(self, grid: Grid, masses) -> np.ndarray:
        if self.kind == "tabulated":
            table = np.asarray(self.parameters, dtype=float)
            if table.size != int(np.prod(grid.shape)):
                raise ValueError("tabulated potential does not match the grid")
            return table.reshape(grid.shape)
        return self.value(grid.points(), masses).reshape(grid.shape)
