import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pilotwave.errors import BranchOverlap, PacketOverlap, ResolutionTooCoarse
from pilotwave.measurement import (
    CouplingSpec,
    branch_prepared,
    branch_velocity,
    branch_weights,
    branch_windows,
    coupling_handle,
    joint_equilibrium,
    measure_ensemble,
    occupancy_probe,
    overlap_fidelity,
    run_quantum_measurement,
    run_subquantum_measurement,
    track_trajectory,
)
from pilotwave.propagate import EigenmodeEvolution
from pilotwave.qstate import Grid, WaveField, box_modes, gaussian_packet, normalize, plane_wave_modes

BOX = Grid.make(64, 0.0, math.pi, "box")
RING = Grid.make(64, -math.pi, math.pi)
LINE = Grid.make(256, -10.0, 10.0)
BORN = box_modes(BOX, [1, 2], [0.6, 0.8j], 1.0)
KICK = CouplingSpec(1.0, 6.0, 1.0)


def narrow(a_tau, dx, sigma=1.0):
    return CouplingSpec(a_tau, 1.0, sigma, "narrow-nonequilibrium", width=dx * a_tau)


def packet(center=2.0, sigma=0.7):
    return WaveField(LINE, gaussian_packet(LINE.axis(0), center, sigma), 1.0)


def two_packets():
    x = LINE.axis(0)
    return normalize(WaveField(LINE, gaussian_packet(x, -4, 0.5) + gaussian_packet(x, 4, 0.5), 1.0))


def test_coupling_spec_validation():
    with pytest.raises(ValueError):
        CouplingSpec(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        CouplingSpec(1.0, 1.0, 1.0, "narrow-nonequilibrium", width=0.02)
    assert CouplingSpec(1.0, 1.0, 2.0, "narrow-nonequilibrium").width == pytest.approx(2e-3)


def test_branch_windows_are_centred_on_shifted_eigenvalues():
    w = branch_windows(BORN, KICK)
    centres = w.mean(axis=1)
    assert centres == pytest.approx(6.0 * BORN.energies)
    assert branch_weights(BORN) == pytest.approx([0.36, 0.64])


def test_overlapping_branches_are_refused():
    with pytest.raises(BranchOverlap):
        run_quantum_measurement(BORN, CouplingSpec(1.0, 1.0, 1.0), 1.0, 0.0)


def test_equilibrium_fractions_follow_born_weights():
    n = 4000
    ens = joint_equilibrium(BORN, KICK, n, 21)
    fr, un, _, mf = measure_ensemble(BORN, KICK, ens)
    assert un == 0.0
    sigma = math.sqrt(0.36 * 0.64 / n)
    assert abs(fr[0] - 0.36) < 3 * sigma


def test_branch_prepared_ensemble_lands_in_its_branch():
    ens = branch_prepared(BORN, KICK, 1, 400, 5)
    fr, _, _, _ = measure_ensemble(BORN, KICK, ens)
    assert fr[1] >= 0.99


def test_single_run_reports_outcome_and_disturbance():
    r = run_quantum_measurement(BORN, KICK, 1.0, 0.3)
    assert r.outcome_index in (0, 1)
    assert r.inferred_value == pytest.approx(r.pointer_reading / 6.0)
    assert r.wave_disturbance == pytest.approx(1 - branch_weights(BORN)[r.outcome_index])


def test_kinetic_pointer_reads_energy_while_particle_rests():
    m = plane_wave_modes(RING, [2, -2], [1, 1], 1.0, eigenvalues=[2.0, 2.0])
    r = run_quantum_measurement(m, CouplingSpec(0.5, 4.0, 0.5), 0.3, 0.1)
    assert r.pointer_reading == pytest.approx(0.1 + 0.5 * 2.0 * 4.0, rel=1e-9)
    assert np.ptp(r.path.points[:, 0]) < 1e-12


@pytest.mark.parametrize("y0, sign", [(0.2, 1), (-0.3, -1)])
def test_momentum_branch_sets_the_slope(y0, sign):
    m = plane_wave_modes(RING, [2, -2], [1, 1], 1.0)
    cp = CouplingSpec(1.0, 4.0, 0.5)
    r = run_quantum_measurement(m, cp, 0.3, y0, observable="momentum", t_after=2.0)
    sel = r.path.times > cp.tau + 0.2
    slope = np.polyfit(r.path.times[sel], np.unwrap(r.path.points[sel, 0], period=2 * math.pi), 1)[0]
    assert slope == pytest.approx(sign * 2.0, rel=1e-6)
    # the empty branch no longer steers the particle
    pts, ts = r.path.points[sel], r.path.times[sel]
    vb = branch_velocity(m, cp, r.outcome_index, pts, ts, "momentum")
    vf, _ = coupling_handle(m, cp, "momentum").velocity_field(pts, ts)
    assert np.max(np.abs(vb - vf)) < 1e-8


def test_overlap_fidelity_closed_form_for_gaussian():
    # weighted average of exp(-b x^2) over N(c, s^2), squared
    c, s = 2.0, 0.7
    cp = CouplingSpec(0.3, 1.0, 1.0)
    b = 0.3**2 / 8
    expect = (math.exp(-b * c**2 / (1 + 2 * b * s**2)) / math.sqrt(1 + 2 * b * s**2)) ** 2
    assert overlap_fidelity(packet(c, s), cp) == pytest.approx(expect, rel=1e-10)


@settings(deadline=None, max_examples=15)
@given(st.floats(-6.0, 6.0), st.integers(0, 10_000))
def test_subquantum_estimate_error_is_bounded_by_pointer_width(x, seed):
    dx = LINE.spacing[0]
    cp = narrow(1e-3, dx)
    r = run_subquantum_measurement(packet(0.0, 3.0), x, cp, seed)
    assert abs(r.inferred_value - x) <= cp.width / (2 * cp.strength) + 1e-9


def test_subquantum_resolution_check():
    with pytest.raises(ResolutionTooCoarse):
        run_subquantum_measurement(packet(), 2.0, narrow(1e-3, 2 * LINE.spacing[0]), 0)


def test_disturbance_falls_with_coupling_strength():
    dx = LINE.spacing[0]
    scales = np.array([1e-1, 1e-2, 1e-3, 1e-4])
    d = [run_subquantum_measurement(packet(), 2.0, narrow(s, dx), 0).wave_disturbance for s in scales]
    slope = np.polyfit(np.log10(scales), np.log10(d), 1)[0]
    assert slope == pytest.approx(2.0, abs=0.01)


def test_tracking_a_stationary_state_returns_the_start():
    h = EigenmodeEvolution(box_modes(BOX, [2], [1], 1.0))
    cp = narrow(1e-3, BOX.spacing[0])
    tr = track_trajectory(h, [1.0], np.linspace(0.5, 5.0, 6), cp, seed=1)
    assert np.all(np.abs(tr.estimates[:, 0] - 1.0) <= cp.width / cp.strength)


@pytest.mark.parametrize("actual, target, verdict", [
    (4.1, 0, "unoccupied"), (4.1, 1, "occupied"), (-3.9, 0, "occupied"), (-3.9, 1, "unoccupied"),
])
def test_occupancy_verdicts(actual, target, verdict):
    f = two_packets()
    cp = CouplingSpec(1.0, 20.0, 1.0)
    assert occupancy_probe(f, [(-4, 0.5), (4, 0.5)], target, actual, cp, rng=7) == verdict


def test_occupancy_needs_disjoint_packets():
    with pytest.raises(PacketOverlap):
        occupancy_probe(two_packets(), [(-1, 0.5), (1, 0.5)], 0, 1.0, CouplingSpec(1.0, 20.0, 1.0))
