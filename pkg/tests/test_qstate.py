import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pilotwave.errors import BasisMismatch, GridError, ZeroNorm
from pilotwave.qstate import (
    Grid,
    PotentialSpec,
    SpectralInterpolant,
    WaveField,
    box_modes,
    current,
    density,
    gaussian_packet,
    normalize,
    orthonormality_error,
    plane_wave_modes,
    project,
    spectral_derivative,
    synthesize,
)

BOX = Grid.make(64, 0.0, math.pi, "box")
RING = Grid.make(64, -math.pi, math.pi, "periodic")


def test_grid_rejects_bad_sizes():
    with pytest.raises(GridError):
        Grid.make(48, 0, 1)
    with pytest.raises(GridError):
        Grid.make(4, 0, 1)
    with pytest.raises(GridError):
        Grid.make(16, 1, 0)


def test_grid_product_and_spacing():
    g = BOX.product(RING)
    assert g.ndim == 2
    assert g.shape == (64, 64)
    assert g.spacing[0] == pytest.approx(math.pi / 64)
    assert g.boundary == ("box", "periodic")


def test_two_mode_value_matches_high_precision_sum():
    # 40-digit mpmath evaluation of 0.6 phi_1 + 0.8i phi_2 at x = 1.234, t = 0.7
    m = box_modes(BOX, [1, 2], [0.6, 0.8j], 1.0)
    psi = m.evaluate(np.array([[1.234]]), 0.7, [(0,)])[(0,)][0]
    assert psi.real == pytest.approx(0.81682273256901813733, abs=1e-14)
    assert psi.imag == pytest.approx(-0.087256487525205929779, abs=1e-14)


@pytest.mark.parametrize("grid, maker, qn", [
    (BOX, box_modes, [1, 2, 3, 7]),
    (RING, plane_wave_modes, [-3, 0, 2, 5]),
])
def test_bases_are_orthonormal(grid, maker, qn):
    m = maker(grid, qn, np.ones(len(qn)), 1.0)
    assert orthonormality_error(m) < 1e-12


def test_project_inverts_synthesize():
    m = box_modes(BOX, [1, 2, 5], [0.3, 0.5j, -0.2], 1.0)
    c = project(synthesize(m, 0.9), m)
    expect = m.coefficients * np.exp(-1j * m.energies * 0.9)
    assert np.allclose(c, expect, atol=1e-12)


def test_mode_coefficients_must_be_normalized():
    m = box_modes(BOX, [1], [1.0], 1.0)
    with pytest.raises(ValueError):
        m.with_coefficients([2.0])


def test_box_basis_needs_box_grid():
    with pytest.raises(BasisMismatch):
        box_modes(RING, [1], [1.0], 1.0)


def test_normalize_refuses_zero_field():
    with pytest.raises(ZeroNorm):
        normalize(WaveField(RING, np.zeros(64), 1.0))


def test_gaussian_packet_is_normalized():
    g = Grid.make(256, -10, 10)
    f = WaveField(g, gaussian_packet(g.axis(0), 1.0, 0.7, 3.0), 1.0)
    assert f.norm() == pytest.approx(1.0, abs=1e-12)


@given(st.integers(1, 20), st.sampled_from(["box", "periodic"]))
def test_spectral_derivative_of_trig_mode(n, boundary):
    g = Grid.make(64, 0.0, math.pi, boundary)
    x = g.axis(0)
    if boundary == "box":
        f, df = np.sin(n * x), n * np.cos(n * x)
    else:
        f, df = np.exp(2j * n * x), 2j * n * np.exp(2j * n * x)
    assert np.allclose(spectral_derivative(f, g, [1]), df, atol=1e-9 * n)


def test_current_of_plane_wave():
    m = plane_wave_modes(RING, [3], [1.0], 2.0)
    f = synthesize(m)
    j = current(f)
    assert np.allclose(j[0] / density(f), 3 / 2.0)


@settings(deadline=None, max_examples=25)
@given(st.floats(-math.pi, math.pi, allow_nan=False), st.floats(-math.pi, math.pi, allow_nan=False))
def test_interpolant_2d_against_exact_modes(x, y):
    g = Grid.make((32, 32), (-math.pi, -math.pi), (math.pi, math.pi))
    m = plane_wave_modes(g, [[1, 2], [-3, 1], [2, -2]], [0.5, 0.6j, -0.4], 1.0)
    f = synthesize(m)
    ip = SpectralInterpolant(f.amplitudes, g)
    pts = np.array([[x, y]])
    for orders in [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0)]:
        exact = m.evaluate(pts, 0.0, [orders])[orders]
        assert abs(ip(pts, orders)[0] - exact[0]) < 2e-4 * (1 + abs(exact[0]))


def test_interpolant_1d_is_exact_for_resolved_sine_series():
    m = box_modes(BOX, [1, 2, 9], [0.2, 0.5, 0.8j], 1.0)
    f = synthesize(m)
    ip = SpectralInterpolant(f.amplitudes, BOX)
    pts = np.linspace(0.01, math.pi - 0.01, 37)[:, None]
    for orders in [(0,), (1,), (2,)]:
        assert np.allclose(ip(pts, orders), m.evaluate(pts, 0.0, [orders])[orders], atol=1e-10)


def test_harmonic_potential_and_gradient():
    v = PotentialSpec("harmonic", (2.0,))
    pts = np.array([[0.5], [-1.0]])
    assert np.allclose(v.value(pts, (1.0,)), 0.5 * 4.0 * pts[:, 0] ** 2)
    assert np.allclose(v.gradient(pts, (1.0,))[:, 0], 4.0 * pts[:, 0])


def test_unknown_potential_kind():
    with pytest.raises(ValueError):
        PotentialSpec("moat", ())
