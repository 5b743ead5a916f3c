import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pilotwave.errors import StuckAtNode
from pilotwave.guidance import (
    Flag,
    integrate_batch,
    integrate_trajectory,
    newton_residual,
    quantum_potential,
    velocity,
)
from pilotwave.propagate import EigenmodeEvolution, SplitStepEvolution
from pilotwave.qstate import Grid, PotentialSpec, WaveField, box_modes, gaussian_packet, plane_wave_modes

BOX = Grid.make(64, 0.0, math.pi, "box")
TWO_MODE = EigenmodeEvolution(box_modes(BOX, [1, 2], [1, 1], 1.0))


class NoKernel(EigenmodeEvolution):
    """Same field, forced onto the vectorised integrator."""

    def kernel(self):
        return None


def test_plane_wave_velocity_is_k_over_m():
    g = Grid.make(32, -math.pi, math.pi)
    h = EigenmodeEvolution(plane_wave_modes(g, [3], [1], 1.5))
    assert velocity(h, [0.4], 0.3)[0] == pytest.approx(2.0, abs=1e-12)


def test_trajectory_matches_high_precision_ode():
    # mpmath Taylor integration of the same equation from x = 1 at 25 digits
    traj = integrate_trajectory(TWO_MODE, [1.0], 0.0, 3.0, 1e-11, t_eval=[0.5, 1.5, 3.0])
    assert traj.points[:, 0] == pytest.approx([1.08187846668699822, 2.09565289740512061, 1.8785124096181272],
                                              abs=1e-8)


def test_vectorised_path_agrees_with_compiled_kernel():
    starts = np.array([[0.4], [1.0], [2.5]])
    a = integrate_batch(TWO_MODE, starts, 0.0, [1.0, 2.0], 1e-10)
    b = integrate_batch(NoKernel(TWO_MODE.modes), starts, 0.0, [1.0, 2.0], 1e-10)
    assert np.allclose(a.points, b.points, atol=1e-8)


@pytest.mark.filterwarnings("ignore::pilotwave.errors.CFLWarning")
def test_free_gaussian_trajectory_scales_with_width():
    # x(t) = x_c(t) + (x0 - c) sigma_t / sigma for a free Gaussian
    g = Grid.make(512, -30.0, 30.0)
    sigma, k = 1.0, 1.5
    f = WaveField(g, gaussian_packet(g.axis(0), -2.0, sigma, k), 1.0)
    h = SplitStepEvolution(f, PotentialSpec("free"), 0.01)
    t = 2.0
    sigma_t = sigma * math.sqrt(1 + (t / (2 * sigma**2)) ** 2)
    for x0 in (-2.8, -2.0, -1.1):
        traj = integrate_trajectory(h, [x0], 0.0, t, 1e-10, t_eval=[t])
        assert traj.points[-1, 0] == pytest.approx(-2.0 + k * t + (x0 + 2.0) * sigma_t / sigma, abs=1e-6)


def test_quantum_potential_matches_high_precision():
    h = EigenmodeEvolution(box_modes(BOX, [1, 2], [0.6, 0.8j], 1.0))
    assert quantum_potential(h, [1.234], 0.7) == pytest.approx(1.127536191463777916, rel=1e-8)


def test_newton_residual_small_on_two_mode_box():
    t_eval = np.linspace(0.0, 2.0, 2001)
    traj = integrate_trajectory(TWO_MODE, [0.9], 0.0, 2.0, 1e-11, t_eval=t_eval)
    assert newton_residual(traj, TWO_MODE).max_relative < 1e-4


def test_start_on_a_node_is_flagged_not_fatal():
    # sin x + sin 2x vanishes at x = 2 pi / 3 at t = 0
    res = integrate_batch(TWO_MODE, np.array([[2 * math.pi / 3], [1.0]]), 0.0, [0.5], 1e-9)
    assert res.member_flags[0] & Flag.NODE_GRAZED
    assert res.member_flags[1] == 0
    assert np.all(np.isfinite(res.points))


def test_step_budget_marks_member_stuck():
    res = integrate_batch(TWO_MODE, np.array([[1.0]]), 0.0, [50.0], 1e-12, max_steps=100)
    assert res.member_flags[0] & Flag.STUCK
    with pytest.raises(StuckAtNode):
        integrate_trajectory(TWO_MODE, [1.0], 0.0, 50.0, 1e-12, max_steps=100)


def test_stationary_state_does_not_move():
    h = EigenmodeEvolution(box_modes(BOX, [3], [1], 1.0))
    traj = integrate_trajectory(h, [0.5], 0.0, 10.0)
    assert np.ptp(traj.points) == 0.0


def test_box_trajectory_stays_inside():
    res = integrate_batch(TWO_MODE, np.linspace(0.05, 3.09, 50)[:, None], 0.0, np.linspace(0.1, 8, 40), 1e-8)
    assert np.all((res.points > 0) & (res.points < math.pi))


@settings(deadline=None, max_examples=20)
@given(st.lists(st.floats(0.05, 3.09), min_size=2, max_size=8, unique=True))
def test_one_dimensional_paths_never_cross(starts):
    starts = np.sort(np.asarray(starts))
    starts = starts[np.diff(np.concatenate([[-1.0], starts])) > 1e-3][:, None]
    res = integrate_batch(TWO_MODE, starts, 0.0, np.linspace(0.25, 4.0, 16), 1e-9)
    assert np.all(np.diff(res.points[:, :, 0], axis=0) > 0)


def test_results_do_not_depend_on_batch_split():
    starts = np.linspace(0.2, 2.9, 12)[:, None]
    whole = integrate_batch(TWO_MODE, starts, 0.0, [1.0, 3.0], 1e-9).points
    parts = np.concatenate([integrate_batch(TWO_MODE, starts[i : i + 5], 0.0, [1.0, 3.0], 1e-9).points
                            for i in range(0, 12, 5)])
    assert np.array_equal(whole, parts)
