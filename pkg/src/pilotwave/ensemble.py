"""Ensembles of configurations: sampling, evolution, coarse-graining and statistics."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BadDensity, OverlapError, SupportMismatch
from .guidance import Flag, integrate_batch
from .propagate import EvolutionHandle
from .qstate import Grid, WaveField

CHUNK = 4096
# lockstep handles pay per time step, not per member, so they batch wider
SHARED_CHUNK = 65536


def member_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for member ``index``, derived by counter from the master seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),)))


@dataclass
class EnsembleState:
    points: np.ndarray
    time: float
    seed: int
    provenance: str
    flags: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.flags is None:
            self.flags = np.zeros(len(self.points), dtype=np.int64)

    def __len__(self):
        return len(self.points)

    @property
    def valid(self) -> np.ndarray:
        return (self.flags & Flag.STUCK) == 0


def sample(density: np.ndarray, grid: Grid, n: int, seed: int, provenance: str = "gridded") -> EnsembleState:
    """Draw ``n`` points from a gridded density.

    Inverse CDF over the flattened cell index, then uniform jitter inside the
    cell centred on the drawn grid point.
    """
    dens = np.asarray(density, dtype=float).reshape(grid.shape)
    if np.any(dens < 0) or not np.all(np.isfinite(dens)):
        raise BadDensity("density has negative or non-finite entries")
    mass = dens.ravel() * grid.cell_volume
    total = mass.sum()
    if not total > 0:
        raise BadDensity("density has zero total mass")
    cdf = np.cumsum(mass)
    cdf /= cdf[-1]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed)))
    u = rng.random(n)
    flat = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
    cell = np.stack(np.unravel_index(flat, grid.shape), axis=1)
    jitter = rng.random((n, grid.ndim)) - 0.5
    pts = np.asarray(grid.lo) + (cell + jitter) * grid.spacing
    pts = grid.wrap(pts)
    for k in range(grid.ndim):
        if grid.boundary[k] == "box":
            pts[:, k] = np.clip(pts[:, k], grid.lo[k], grid.hi[k])
    return EnsembleState(pts, 0.0, int(seed), f"{provenance}:n={n}")


def _evolve_chunk(args):
    evolution, points, t0, times, tol, kw = args
    res = integrate_batch(evolution, points, t0, times, tol, **kw)
    return res.points, res.flags, res.member_flags


def evolve_paths(ens: EnsembleState, evolution: EvolutionHandle, times: Sequence[float], tol: float = 1e-8,
                 workers: int = 1, chunk: int | None = None, **kw):
    """Member paths at the requested times.

    Returns ``(points, flags, member_flags)`` with points of shape
    ``(n, len(times), d)``.  Members are integrated in fixed-size chunks, so
    the output does not depend on ``workers``.  Extra keywords go to
    ``integrate_batch``.
    """
    times = np.asarray(times, dtype=float)
    if chunk is None:
        chunk = SHARED_CHUNK if evolution.shared_time else CHUNK
    jobs = [(evolution, ens.points[i : i + chunk], ens.time, times, tol, kw) for i in range(0, len(ens), chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_evolve_chunk, jobs))
    else:
        parts = [_evolve_chunk(j) for j in jobs]
    pts = np.concatenate([p[0] for p in parts])
    fl = np.concatenate([p[1] for p in parts])
    mf = np.concatenate([p[2] for p in parts]) | ens.flags
    return pts, fl, mf


def evolve_ensemble(ens: EnsembleState, evolution: EvolutionHandle, t1: float, tol: float = 1e-8,
                    workers: int = 1) -> EnsembleState:
    pts, _, mf = evolve_paths(ens, evolution, [t1], tol, workers)
    return EnsembleState(pts[:, -1], t1, ens.seed, ens.provenance, mf)


# --------------------------------------------------------------------------
# coarse graining


@dataclass
class CoarseGrain:
    edges: list[np.ndarray]
    P: np.ndarray
    D: np.ndarray
    n_effective: int = 0

    @property
    def cell_volume(self) -> float:
        return float(np.prod([e[1] - e[0] for e in self.edges]))

    @property
    def p_cells(self) -> np.ndarray:
        return self.P * self.cell_volume

    @property
    def d_cells(self) -> np.ndarray:
        return self.D * self.cell_volume


def cell_edges(lo, hi, ncells) -> list[np.ndarray]:
    lo, hi = np.atleast_1d(lo), np.atleast_1d(hi)
    ncells = np.broadcast_to(np.atleast_1d(ncells), lo.shape)
    return [np.linspace(a, b, int(c) + 1) for a, b, c in zip(lo, hi, ncells)]


def histogram_density(points: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    """Empirical density per cell, normalised over the points inside the cells."""
    points = np.atleast_2d(points)
    counts, _ = np.histogramdd(points, bins=edges)
    vol = np.prod([e[1] - e[0] for e in edges])
    return counts / (max(len(points), 1) * vol)


def cell_average(evolution: EvolutionHandle, t: float, edges: list[np.ndarray], sub: int = 8) -> np.ndarray:
    """Cell averages of |psi_t|^2 by a ``sub``-point midpoint rule per axis."""
    d = len(edges)
    axes = []
    for e in edges:
        w = e[1] - e[0]
        offs = (np.arange(sub) + 0.5) / sub * w
        axes.append((e[:-1, None] + offs[None, :]).ravel())
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    rho = np.empty(len(pts))
    step = 200_000
    for i in range(0, len(pts), step):
        psi = evolution.evaluate(pts[i : i + step], t, [(0,) * d])[(0,) * d]
        rho[i : i + step] = np.abs(psi) ** 2
    shape = []
    for e in edges:
        shape += [len(e) - 1, sub]
    rho = rho.reshape(shape)
    return rho.mean(axis=tuple(range(1, 2 * d, 2)))


def coarse_grain(points, evolution: EvolutionHandle, t: float, edges: list[np.ndarray], sub: int = 8) -> CoarseGrain:
    P = histogram_density(points, edges)
    D = cell_average(evolution, t, edges, sub)
    return CoarseGrain(edges, P, D, len(np.atleast_2d(points)))


def h_function(cg: CoarseGrain) -> float:
    """Coarse-grained relative entropy sum P ln(P/D) dV over occupied cells."""
    occupied = cg.P > 0
    if np.any(occupied & ~(cg.D > 0)):
        raise SupportMismatch("occupied cell where the coarse-grained |psi|^2 vanishes")
    P, D = cg.P[occupied], cg.D[occupied]
    return float(np.sum(P * np.log(P / D)) * cg.cell_volume)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


def outcome_fractions(joint_points, windows: Sequence[tuple[float, float]], axis: int = -1,
                      flags=None) -> tuple[np.ndarray, float]:
    """Fraction of members whose pointer coordinate lands in each window.

    Flagged (stuck) members are excluded.  Returns ``(fractions, unassigned)``.
    """
    win = np.asarray(windows, dtype=float)
    order = np.argsort(win[:, 0])
    w = win[order]
    if np.any(w[1:, 0] < w[:-1, 1]):
        raise OverlapError("branch windows intersect")
    pts = np.atleast_2d(joint_points)
    if flags is not None:
        pts = pts[(np.asarray(flags) & Flag.STUCK) == 0]
    y = pts[:, axis]
    n = max(len(y), 1)
    fr = np.array([np.count_nonzero((y >= a) & (y < b)) for a, b in win]) / n
    return fr, 1.0 - fr.sum()


def assign_branch(y: np.ndarray, windows) -> np.ndarray:
    """Window index per value, -1 when unassigned."""
    out = np.full(len(y), -1)
    for i, (a, b) in enumerate(windows):
        out[(y >= a) & (y < b)] = i
    return out


# --------------------------------------------------------------------------
# Wigner function


def wigner(field: WaveField):
    """Pure-state Wigner function W(q, p) on the field's grid.

    W(q,p) = (1/2pi) int dz exp(i p z) psi(q - z/2) psi*(q + z/2), with the
    half-grid shifts obtained by spectral refinement.  Momenta are spaced
    2 pi / L.  Returns ``(q, p, W)`` with W of shape ``(len(q), len(p))``.
    """
    g = field.grid
    if g.ndim != 1 or g.boundary[0] != "periodic":
        raise ValueError("wigner needs a 1-D periodic field")
    N = g.npoints[0]
    dx = g.spacing[0]
    spec = np.fft.fft(field.amplitudes)
    pad = np.zeros(2 * N, dtype=complex)
    h = N // 2
    pad[:h] = spec[:h]
    pad[-h + 1 :] = spec[h + 1 :]
    pad[h] = pad[-h] = 0.5 * spec[h]
    fine = np.fft.ifft(pad) * 2  # samples at spacing dx/2
    j = np.arange(N)[:, None]
    k = np.arange(-h, h)[None, :]
    corr = fine[(2 * j - k) % (2 * N)] * np.conj(fine[(2 * j + k) % (2 * N)])
    # sum_k exp(i p_l k dx) corr[j, k], p_l = 2 pi l / L
    shifted = np.fft.ifftshift(corr, axes=1)  # column 0 is k = 0
    W = np.fft.fftshift(np.fft.ifft(shifted, axis=1), axes=1) * N * dx / (2 * np.pi)
    p = 2 * np.pi / g.lengths[0] * np.arange(-h, h)
    return g.axis(0), p, W.real


def momentum_density(field: WaveField):
    """|phi(p)|^2 on p = 2 pi l / L, matching the Wigner momentum grid."""
    g = field.grid
    N = g.npoints[0]
    x = g.axis(0)
    p = 2 * np.pi / g.lengths[0] * np.arange(-N // 2, N // 2)
    phi = np.exp(-1j * np.outer(p, x)) @ field.amplitudes * g.spacing[0] / np.sqrt(2 * np.pi)
    return p, np.abs(phi) ** 2
