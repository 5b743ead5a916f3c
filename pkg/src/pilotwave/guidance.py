"""Guidance velocity, trajectory integration and the second-order consistency check."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntFlag

import numpy as np

from .errors import NodeProximity, StuckAtNode
from . import _kernels
from .propagate import EvolutionHandle, TimeReversed
from .qstate import PotentialSpec

NODE_EPS = 1e-12


class Flag(IntFlag):
    NONE = 0
    NODE_GRAZED = 1
    STEP_CLAMPED = 2
    STUCK = 4


# Dormand-Prince 5(4)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4
ORDER = 5


@dataclass
class Trajectory:
    times: np.ndarray
    points: np.ndarray
    flags: np.ndarray
    accepted: int = 0
    rejected: int = 0
    tol: float = 1e-8
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float).reshape(len(self.times), -1)
        self.flags = np.asarray(self.flags, dtype=np.int64)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def flagged(self) -> np.ndarray:
        return (self.flags & (Flag.NODE_GRAZED | Flag.STEP_CLAMPED | Flag.STUCK)) != 0


@dataclass
class BatchResult:
    times: np.ndarray           # (K,)
    points: np.ndarray          # (M, K, d)
    flags: np.ndarray           # (M, K)
    member_flags: np.ndarray    # (M,)  union over the path
    accepted: np.ndarray
    rejected: np.ndarray


def velocity(evolution: EvolutionHandle, point, t: float, node_eps: float = NODE_EPS) -> np.ndarray:
    """De Broglie velocity j/|psi|^2 at one configuration point."""
    point = np.atleast_2d(np.asarray(point, dtype=float))
    v, rho = evolution.velocity_field(point, t)
    if not rho[0] >= node_eps * evolution.density_scale():
        raise NodeProximity(f"|psi|^2 = {rho[0]:.3e} at {point[0]} is below the node threshold")
    return v[0]


def _unwrap(points: np.ndarray, grid, axis_len_axis: int = 0) -> np.ndarray:
    """Remove periodic jumps along the time axis ``axis_len_axis``."""
    out = np.array(points, dtype=float, copy=True)
    for k in range(grid.ndim):
        if grid.boundary[k] == "periodic":
            L = grid.lengths[k]
            out[..., k] = np.unwrap(out[..., k], period=L, axis=axis_len_axis)
    return out


def integrate_batch(evolution: EvolutionHandle, q0, t0: float, t_out, tol: float = 1e-8, *,
                    h0: float | None = None, node_eps: float = NODE_EPS, max_node_retries: int = 30,
                    max_clamped: int = 2000, max_steps: int = 200_000) -> BatchResult:
    """Integrate q' = v(q, t) for many members, each with its own adaptive step.

    Members never interact: a member's path depends only on its own start,
    so results do not depend on how an ensemble is split into batches.
    Handles with ``shared_time`` are stepped in lockstep (one step size for
    the whole batch), and steps are multiples of the handle's time quantum.

    A member that needs more than ``max_steps`` attempted steps (typically one
    circling a moving node at tiny radius) is frozen and flagged STUCK.
    """
    q = np.array(np.atleast_2d(q0), dtype=float)
    M, d = q.shape
    t_out = np.atleast_1d(np.asarray(t_out, dtype=float))
    if np.any(np.diff(t_out) <= 0) or t_out[0] < t0:
        raise ValueError("output times must be increasing and not before t0")
    K = len(t_out)
    grid = evolution.grid
    shared = evolution.shared_time
    quantum = getattr(evolution, "time_quantum", None) if shared else None
    scale = evolution.density_scale()
    rho_floor = node_eps * scale
    span = t_out[-1] - t0
    dt_min = max(span, 1.0) * 1e-9
    dx_min = float(np.min(grid.spacing))
    v_cap = dx_min / max(dt_min * 1e3, 1e-12)

    kern = evolution.kernel()
    if kern is not None:
        code, params = kern
        out = np.empty((M, K, d))
        flags = np.zeros((M, K), dtype=np.int64)
        path_flags = np.zeros(M, dtype=np.int64)
        n_acc = np.zeros(M, dtype=np.int64)
        n_rej = np.zeros(M, dtype=np.int64)
        periodic = np.array([b == "periodic" for b in grid.boundary])
        rev = isinstance(evolution, TimeReversed)
        t_end = evolution.t_end if rev else 0.0
        _kernels.integrate_members(
            code, params, q, float(t0), t_out, float(tol), rho_floor, dt_min, dx_min, v_cap,
            max_node_retries, max_clamped, int(max_steps), periodic, np.asarray(grid.lo, float), np.asarray(grid.lengths, float),
            rev, t_end, out, flags, path_flags, n_acc, n_rej,
        )
        return BatchResult(t_out, out, flags, path_flags, n_acc, n_rej)

    out = np.empty((M, K, d))
    flags = np.zeros((M, K), dtype=np.int64)
    path_flags = np.zeros(M, dtype=np.int64)
    t = np.full(M, float(t0))
    nxt = np.zeros(M, dtype=int)
    # record outputs that coincide with t0
    while True:
        hit = (nxt < K) & (np.abs(t_out[np.minimum(nxt, K - 1)] - t) <= 1e-12 * max(1.0, abs(t0)))
        if not hit.any():
            break
        out[hit, nxt[hit]] = q[hit]
        nxt[hit] += 1
    active = nxt < K

    k1, rho0 = evolution.velocity_field(q, t)
    bad0 = ~(rho0 >= rho_floor) | ~np.all(np.isfinite(k1), axis=1)
    k1[bad0] = 0.0
    path_flags[bad0] |= Flag.NODE_GRAZED
    if h0 is None:
        speed = np.max(np.abs(k1), axis=1) + 1e-12
        h0 = np.minimum(0.01 * span, (tol ** (1 / ORDER)) * dx_min / speed)
        h0 = np.maximum(h0, dt_min)
    h = np.broadcast_to(np.asarray(h0, dtype=float), (M,)).copy()
    if shared:
        h[:] = h.min()
    errold = np.full(M, 1e-4)
    retries = np.zeros(M, dtype=int)
    clamped_run = np.zeros(M, dtype=int)
    n_acc = np.zeros(M, dtype=int)
    n_rej = np.zeros(M, dtype=int)
    cur_flag = np.zeros(M, dtype=np.int64)

    while active.any():
        idx = np.nonzero(active)[0]
        tt = t[idx]
        target = t_out[nxt[idx]]
        hh = np.minimum(h[idx], target - tt)
        if quantum:
            hq = np.maximum(np.floor(hh / quantum + 1e-9), 1.0) * quantum
            hh = np.where(hh < quantum * (1 - 1e-9), hh, hq)
            hh = np.minimum(hh, target - tt)
        if shared:
            hh[:] = hh.min()
        qq = q[idx]
        ks = [k1[idx]]
        node = np.zeros(len(idx), dtype=bool)
        for s in range(1, 7):
            y = qq + hh[:, None] * sum(a * k for a, k in zip(_A[s], ks) if a != 0.0)
            v, rho = evolution.velocity_field(y, tt + _C[s] * hh)
            bad = ~(rho >= rho_floor) | ~np.all(np.isfinite(v), axis=1)
            node |= bad
            v[bad] = 0.0
            ks.append(v)
        y5 = qq + hh[:, None] * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err = hh[:, None] * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        errn = np.max(np.abs(err), axis=1) / tol
        errn = np.where(np.isfinite(errn), errn, np.inf)

        ok = (errn <= 1.0) & ~node
        if shared:
            ok[:] = bool(np.all(errn[~node] <= 1.0)) and not node.any()
        # node handling: retry with halved steps, then a clamped Euler step
        clamp = node & (retries[idx] >= max_node_retries)
        if shared and clamp.any():
            ok_others = bool(np.all(errn[~node] <= 1.0))
            clamp = node if ok_others else np.zeros_like(node)
            ok = ~node & ok_others

        acc = idx[ok]
        if len(acc):
            q[acc] = grid.wrap(y5[ok]) if any(b == "periodic" for b in grid.boundary) else y5[ok]
            t[acc] = tt[ok] + hh[ok]
            k1[acc] = ks[6][ok]
            n_acc[acc] += 1
            fac = 0.9 * np.maximum(errn[ok], 1e-10) ** (-0.7 / ORDER) * errold[acc] ** (0.4 / ORDER)
            fac = np.clip(fac, 0.2, 5.0)
            # a step cut short at an output time must not shrink the next one
            h_prev = h[acc]
            truncated = hh[ok] < h_prev * (1 - 1e-12)
            h[acc] = np.where(truncated, np.maximum(h_prev, hh[ok] * fac), hh[ok] * fac)
            errold[acc] = np.maximum(errn[ok], 1e-4)
            retries[acc] = 0
            clamped_run[acc] = 0
        cl = idx[clamp]
        if len(cl):
            v0 = k1[cl]
            sp = np.linalg.norm(v0, axis=1)
            v0 = np.where((sp > v_cap)[:, None], v0 * (v_cap / np.maximum(sp, 1e-300))[:, None], v0)
            hc = np.maximum(hh[clamp], np.minimum(dt_min * 1e3, target[clamp] - tt[clamp]))
            qn = qq[clamp] + hc[:, None] * v0
            q[cl] = grid.wrap(qn)
            t[cl] = tt[clamp] + hc
            vn, rn = evolution.velocity_field(q[cl], t[cl])
            badn = ~(rn >= rho_floor) | ~np.all(np.isfinite(vn), axis=1)
            vn[badn] = 0.0
            k1[cl] = vn
            cur_flag[cl] |= Flag.NODE_GRAZED | Flag.STEP_CLAMPED
            path_flags[cl] |= Flag.NODE_GRAZED | Flag.STEP_CLAMPED
            retries[cl] = 0
            clamped_run[cl] += 1
            h[cl] = np.maximum(hc, dt_min) * 2
        rej = ~ok & ~clamp
        rj = idx[rej]
        if len(rj):
            n_rej[rj] += 1
            nodal = node[rej]
            with np.errstate(divide="ignore"):
                shrink = np.where(nodal, 0.5, np.clip(0.9 * errn[rej] ** (-1.0 / ORDER), 0.1, 0.9))
            h[rj] = hh[rej] * shrink
            retries[rj] += nodal
            if np.any(nodal):
                cur_flag[rj[nodal]] |= Flag.NODE_GRAZED
                path_flags[rj[nodal]] |= Flag.NODE_GRAZED
            if quantum:
                h[rj] = np.maximum(h[rj], quantum)
        if shared:
            h[idx] = h[idx].min()

        # record outputs reached this iteration
        moved = idx[ok | clamp]
        if len(moved):
            reached = np.abs(t[moved] - t_out[nxt[moved]]) <= 1e-12 * np.maximum(1.0, np.abs(t[moved]))
            r = moved[reached]
            t[r] = t_out[nxt[r]]
            out[r, nxt[r]] = q[r]
            flags[r, nxt[r]] = cur_flag[r]
            cur_flag[r] = 0
            nxt[r] += 1
        stuck = (clamped_run > max_clamped) | (n_acc + n_rej > max_steps)
        if stuck.any():
            for m in np.nonzero(stuck & active)[0]:
                out[m, nxt[m]:] = q[m]
                flags[m, nxt[m]:] = Flag.STUCK | Flag.NODE_GRAZED
                path_flags[m] |= Flag.STUCK
                nxt[m] = K
            clamped_run[stuck] = 0
        active = nxt < K
    return BatchResult(t_out, out, flags, path_flags, n_acc, n_rej)


def integrate_trajectory(evolution: EvolutionHandle, q0, t0: float, t1: float, tol: float = 1e-8,
                         t_eval=None, **kw) -> Trajectory:
    """Adaptive Dormand-Prince 5(4) path from ``q0`` over ``[t0, t1]``.

    Without ``t_eval`` the path is reported at 201 evenly spaced times.
    Raises ``StuckAtNode`` if the node safeguard keeps firing.
    """
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    if not evolution.grid.contains(q0[None, :])[0]:
        raise ValueError(f"start point {q0} lies outside the grid domain")
    if t_eval is None:
        t_eval = np.linspace(t0, t1, 201)
    res = integrate_batch(evolution, q0[None, :], t0, t_eval, tol, **kw)
    if res.member_flags[0] & Flag.STUCK:
        raise StuckAtNode(f"trajectory from {q0} stuck at a node")
    return Trajectory(res.times, res.points[0], res.flags[0], int(res.accepted[0]), int(res.rejected[0]), tol)


# --------------------------------------------------------------------------
# quantum potential


def _unit(d, *axes):
    o = [0] * d
    for a in axes:
        o[a] += 1
    return tuple(o)


def _density_derivatives(ev, d, third=False):
    """rho, rho_i, rho_ii, rho_ik and (optionally) rho_iik from psi derivatives."""
    psi = ev[_unit(d)]
    cp = np.conj(psi)
    rho = np.abs(psi) ** 2
    r1 = {i: 2 * np.real(cp * ev[_unit(d, i)]) for i in range(d)}
    r2 = {}
    for i in range(d):
        for k in range(d):
            r2[(i, k)] = 2 * np.real(np.conj(ev[_unit(d, k)]) * ev[_unit(d, i)] + cp * ev[_unit(d, i, k)])
    r3 = {}
    if third:
        for i in range(d):
            for k in range(d):
                r3[(i, k)] = (2 * np.real(np.conj(ev[_unit(d, k)]) * ev[_unit(d, i, i)] + cp * ev[_unit(d, i, i, k)])
                              + 4 * np.real(np.conj(ev[_unit(d, i)]) * ev[_unit(d, i, k)]))
    return rho, r1, r2, r3


def _orders_needed(d, third):
    orders = {_unit(d)}
    for i in range(d):
        orders.add(_unit(d, i))
        for k in range(d):
            orders.add(_unit(d, i, k))
            if third:
                orders.add(_unit(d, i, i, k))
    return sorted(orders)


def quantum_potential_field(evolution: EvolutionHandle, points, t):
    """Q = -sum_i (1/2m_i) d_i^2 |psi| / |psi| and |psi|^2 at each point."""
    points = np.atleast_2d(points)
    d = points.shape[1]
    ev = evolution.evaluate(points, t, _orders_needed(d, False))
    rho, r1, r2, _ = _density_derivatives(ev, d)
    Q = np.zeros(len(points))
    for i in range(d):
        Q -= (r2[(i, i)] / (2 * rho) - r1[i] ** 2 / (4 * rho**2)) / (2 * evolution.masses[i])
    return Q, rho


def quantum_potential(evolution: EvolutionHandle, point, t: float, node_eps: float = NODE_EPS) -> float:
    Q, rho = quantum_potential_field(evolution, np.atleast_2d(point), t)
    if not rho[0] >= node_eps * evolution.density_scale():
        raise NodeProximity("quantum potential requested at a node")
    return float(Q[0])


def quantum_force_field(evolution: EvolutionHandle, points, t):
    """Gradient of Q, shape (P, d), from spectral third derivatives of psi."""
    points = np.atleast_2d(points)
    d = points.shape[1]
    ev = evolution.evaluate(points, t, _orders_needed(d, True))
    rho, r1, r2, r3 = _density_derivatives(ev, d, third=True)
    grad = np.zeros(points.shape)
    for k in range(d):
        for i in range(d):
            dk = (r3[(i, k)] / (2 * rho) - r2[(i, i)] * r1[k] / (2 * rho**2)
                  - r1[i] * r2[(i, k)] / (2 * rho**2) + r1[i] ** 2 * r1[k] / (2 * rho**3))
            grad[:, k] -= dk / (2 * evolution.masses[i])
    return grad, rho


@dataclass
class NewtonResidual:
    times: np.ndarray
    residual: np.ndarray
    force: np.ndarray
    excluded: np.ndarray

    @property
    def max_relative(self) -> float:
        keep = ~self.excluded
        return float(np.max(self.residual[keep]) / np.max(self.force[keep]))


def newton_residual(traj: Trajectory, evolution: EvolutionHandle, potential: PotentialSpec | None = None,
                    ) -> NewtonResidual:
    """Residual |m q'' + grad(V + Q)| along a trajectory.

    q'' comes from fourth-order centred differences on uniformly spaced
    samples; a non-uniform trajectory is re-integrated on a uniform grid of
    the same length first.
    """
    potential = potential or evolution.potential
    times = traj.times
    dt = np.diff(times)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        uniform = np.linspace(times[0], times[-1], len(times))
        traj = integrate_trajectory(evolution, traj.points[0], times[0], times[-1], traj.tol, t_eval=uniform)
        times, dt = traj.times, np.diff(traj.times)
    h = dt[0]
    q = _unwrap(traj.points, evolution.grid)
    acc = (-q[:-4] + 16 * q[1:-3] - 30 * q[2:-2] + 16 * q[3:-1] - q[4:]) / (12 * h**2)
    mid = q[2:-2]
    tm = times[2:-2]
    masses = np.asarray(evolution.masses)
    gq, rho = quantum_force_field(evolution, evolution.grid.wrap(mid), tm)
    gv = potential.gradient(mid, masses) if potential.kind not in ("tabulated",) else np.zeros_like(mid)
    force = gq + gv
    res = np.linalg.norm(masses * acc + force, axis=1)
    fl = traj.flagged
    excluded = np.zeros(len(tm), dtype=bool)
    for s in range(5):
        excluded |= fl[s : s + len(tm)]
    excluded |= ~(rho >= NODE_EPS * evolution.density_scale())
    return NewtonResidual(tm, res, np.linalg.norm(force, axis=1), excluded)
