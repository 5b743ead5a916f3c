import math
import warnings

import numpy as np
import pytest

from pilotwave.errors import BasisMismatch, BoundaryUnsupported, CFLWarning, PointerOverflow
from pilotwave.propagate import (
    EigenmodeEvolution,
    ModeCoupling,
    SplitStepEvolution,
    TimeReversed,
    evolve_coupling,
    evolve_modes,
    evolve_splitstep,
)
from pilotwave.qstate import (
    Grid,
    PotentialSpec,
    WaveField,
    box_modes,
    gaussian_packet,
    plane_wave_modes,
    synthesize,
)

LINE = Grid.make(512, -30.0, 30.0)


def free_gaussian(x, t, x0, sigma, k, m=1.0):
    """Closed-form free evolution of gaussian_packet(x, x0, sigma, k)."""
    s = sigma * (1 + 1j * t / (2 * m * sigma**2))
    xc = x - x0 - k * t / m
    return ((2 * np.pi) ** -0.25 / np.sqrt(s) * np.exp(-xc**2 / (4 * sigma * s))
            * np.exp(1j * k * (x - x0) - 1j * k**2 * t / (2 * m)) * np.exp(1j * k * x0))


@pytest.mark.filterwarnings("ignore::pilotwave.errors.CFLWarning")  # smooth packets never reach Nyquist
def test_free_gaussian_closed_form_is_reproduced_by_splitstep():
    x = LINE.axis(0)
    f = WaveField(LINE, gaussian_packet(x, -5.0, 1.0, 2.0), 1.0)
    out = evolve_splitstep(f, PotentialSpec("free"), 0.01, 300)
    exact = free_gaussian(x, 3.0, -5.0, 1.0, 2.0)
    assert np.max(np.abs(out.amplitudes - exact)) < 1e-10


@pytest.mark.filterwarnings("ignore::pilotwave.errors.CFLWarning")  # smooth packets never reach Nyquist
def test_splitstep_handle_off_lattice_time():
    x = LINE.axis(0)
    f = WaveField(LINE, gaussian_packet(x, 0.0, 1.2, -1.0), 1.0)
    h = SplitStepEvolution(f, PotentialSpec("free"), 0.01)
    for t in (0.0, 0.5, 1.237):
        assert np.max(np.abs(h.field(t).amplitudes - free_gaussian(x, t, 0.0, 1.2, -1.0))) < 1e-10


@pytest.mark.filterwarnings("ignore::pilotwave.errors.CFLWarning")  # smooth packets never reach Nyquist
def test_harmonic_centroid_follows_classical_orbit():
    g = Grid.make(256, -12.0, 12.0)
    x = g.axis(0)
    f = WaveField(g, gaussian_packet(x, 2.0, 1 / math.sqrt(2)), 1.0)
    h = SplitStepEvolution(f, PotentialSpec("harmonic", (1.0,)), 0.005)
    for t in (0.4, 1.3, 2.0):
        rho = np.abs(h.field(t).amplitudes) ** 2
        mean = np.sum(rho * x) * g.spacing[0]
        assert mean == pytest.approx(2.0 * math.cos(t), abs=1e-4)


def test_cfl_warning_for_coarse_step():
    f = WaveField(LINE, gaussian_packet(LINE.axis(0), 0, 1), 1.0)
    with pytest.warns(CFLWarning):
        SplitStepEvolution(f, PotentialSpec("free"), 1.0)


def test_splitstep_needs_periodic_grid():
    g = Grid.make(64, 0, 1, "box")
    with pytest.raises(BoundaryUnsupported):
        SplitStepEvolution(WaveField(g, np.ones(64), 1.0), PotentialSpec("free"), 0.01)


def test_eigenmode_phase_rotation_is_exact():
    g = Grid.make(64, 0, math.pi, "box")
    m = box_modes(g, [1, 3], [1, 1j], 1.0)
    h = EigenmodeEvolution(m)
    t = 123.456
    c = evolve_modes(m, t).coefficients
    assert np.allclose(c, m.coefficients * np.exp(-1j * m.energies * t), atol=1e-13)
    assert np.allclose(h.field(t).amplitudes, synthesize(m, t).amplitudes)


def test_time_reversed_velocity_flips_sign():
    g = Grid.make(64, 0, math.pi, "box")
    h = EigenmodeEvolution(box_modes(g, [1, 2], [1, 1], 1.0))
    r = TimeReversed(h, 2.0)
    pts = np.array([[0.7], [1.9]])
    v, _ = h.velocity_field(pts, 1.5)
    w, _ = r.velocity_field(pts, 0.5)
    assert np.allclose(w, -v)


def test_coupled_field_is_shifted_pointer_sum():
    g = Grid.make(32, 0, math.pi, "box")
    m = box_modes(g, [1, 2], [0.6, 0.8], 1.0)
    h = ModeCoupling(m, "kinetic", 1.0, 2.0, 0.5)
    f = h.field(1.3)
    x = g.axis(0)
    y = h.pointer_grid.axis(0)
    expect = sum(
        c * math.sqrt(2 / math.pi) * np.sin(n * x)[:, None] * gaussian_packet(y - E * 1.3, 0, 0.5)[None, :]
        for c, n, E in zip(m.coefficients, (1, 2), m.energies)
    )
    assert np.allclose(f.amplitudes, expect, atol=1e-10)


def test_pointer_overflow():
    g = Grid.make(32, 0, math.pi, "box")
    m = box_modes(g, [1, 2], [0.6, 0.8], 1.0)
    yg = Grid.make(64, -3, 3)
    ptr = WaveField(yg, gaussian_packet(yg.axis(0), 0, 0.3), 1.0)
    with pytest.raises(PointerOverflow):
        evolve_coupling(m, ptr, 1.0, 5.0)


@pytest.mark.parametrize("observable, basis", [("kinetic", "box"), ("momentum", "ring"), ("kinetic", "ring")])
def test_coupling_current_satisfies_continuity(observable, basis):
    # d rho/dt + div j = 0, checked with centred differences at scattered points
    if basis == "box":
        g = Grid.make(32, 0, math.pi, "box")
        m = box_modes(g, [1, 2], [0.6, 0.8j], 1.0)
    else:
        g = Grid.make(32, -math.pi, math.pi)
        m = plane_wave_modes(g, [1, -2], [0.6, 0.8j], 1.0)
        if observable == "kinetic":
            m = plane_wave_modes(g, [1, -2], [0.6, 0.8j], 1.0, eigenvalues=m.energies)
    h = ModeCoupling(m, observable, 0.7, 3.0, 0.6)
    rng = np.random.default_rng(5)
    pts = np.column_stack([rng.uniform(0.3, 2.8, 20), rng.uniform(-1.0, 2.0, 20)])
    t, e = 1.1, 1e-4
    rho = lambda p, s: np.abs(h.evaluate(p, s, [(0, 0)])[(0, 0)]) ** 2

    def j(p):
        v, r = h.velocity_field(p, t)
        return v * r[:, None]

    drho = (rho(pts, t + e) - rho(pts, t - e)) / (2 * e)
    div = sum((j(pts + e * np.eye(2)[k])[:, k] - j(pts - e * np.eye(2)[k])[:, k]) / (2 * e) for k in range(2))
    assert np.max(np.abs(drho + div)) < 1e-6


def test_coupling_rejects_eigenvalues_of_another_observable():
    g = Grid.make(32, -math.pi, math.pi)
    with pytest.raises(BasisMismatch):
        ModeCoupling(plane_wave_modes(g, [1, -2], [1, 1], 1.0), "kinetic", 1.0, 1.0, 0.5)


def test_coupling_after_tau_freezes_pointer():
    g = Grid.make(32, 0, math.pi, "box")
    h = ModeCoupling(box_modes(g, [1, 2], [0.6, 0.8], 1.0), "kinetic", 1.0, 2.0, 0.5)
    v, _ = h.velocity_field(np.array([[1.0, 1.2], [2.0, 0.3]]), 2.5)
    assert np.all(v[:, 1] == 0.0)


def test_eigenmode_velocity_matches_high_precision():
    # mpmath: Im(psi* psi')/|psi|^2 for 0.6 phi_1 + 0.8i phi_2 at x = 1.234, t = 0.7
    g = Grid.make(64, 0, math.pi, "box")
    h = EigenmodeEvolution(box_modes(g, [1, 2], [0.6, 0.8j], 1.0))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        v, _ = h.velocity_field(np.array([[1.234]]), 0.7)
    assert v[0, 0] == pytest.approx(-0.37886808964354791043, abs=1e-12)
