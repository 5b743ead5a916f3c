import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pilotwave.ensemble import (
    CoarseGrain,
    EnsembleState,
    assign_branch,
    cell_average,
    cell_edges,
    coarse_grain,
    evolve_paths,
    h_function,
    histogram_density,
    momentum_density,
    outcome_fractions,
    sample,
    total_variation,
    wigner,
)
from pilotwave.errors import BadDensity, OverlapError, SupportMismatch
from pilotwave.guidance import Flag
from pilotwave.propagate import EigenmodeEvolution
from pilotwave.qstate import Grid, WaveField, box_modes, density, gaussian_packet, normalize

BOX = Grid.make(64, 0.0, math.pi, "box")
GROUND = EigenmodeEvolution(box_modes(BOX, [1], [1], 1.0))
TWO_MODE = EigenmodeEvolution(box_modes(BOX, [1, 2], [1, 1], 1.0))
RING = Grid.make(256, -12.0, 12.0)


def test_sample_is_reproducible_and_seed_sensitive():
    rho = density(GROUND.field(0.0))
    a = sample(rho, BOX, 500, 3).points
    assert np.array_equal(a, sample(rho, BOX, 500, 3).points)
    assert not np.array_equal(a, sample(rho, BOX, 500, 4).points)


def test_sample_rejects_negative_density():
    with pytest.raises(BadDensity):
        sample(-np.ones(64), BOX, 10, 0)
    with pytest.raises(BadDensity):
        sample(np.zeros(64), BOX, 10, 0)


def test_sample_follows_the_density():
    rho = density(GROUND.field(0.0))
    pts = sample(rho, BOX, 200_000, 1).points
    edges = cell_edges(0.0, math.pi, 16)
    P = histogram_density(pts, edges)
    D = cell_average(GROUND, 0.0, edges)
    assert total_variation(P * (math.pi / 16), D * (math.pi / 16)) < 0.01


def test_cell_average_matches_closed_form_integral():
    # (2/pi) sin^2 x averaged over [a, b]
    edges = cell_edges(0.0, math.pi, 32)
    a, b = edges[0][:-1], edges[0][1:]
    F = lambda x: x / 2 - np.sin(2 * x) / 4
    exact = (2 / math.pi) * (F(b) - F(a)) / (b - a)
    # midpoint rule with 8 sub-points: error ~ h^2 f'' / 24
    assert np.max(np.abs(cell_average(GROUND, 0.0, edges) - exact)) < 2e-5


def test_h_function_is_zero_at_equilibrium_and_positive_otherwise():
    edges = cell_edges(0.0, math.pi, 8)
    D = cell_average(GROUND, 0.0, edges)
    assert h_function(CoarseGrain(edges, D, D)) == pytest.approx(0.0, abs=1e-14)
    P = np.ones(8) / math.pi
    assert h_function(CoarseGrain(edges, P, D)) > 0


def test_h_function_support_mismatch():
    edges = cell_edges(0.0, 1.0, 2)
    with pytest.raises(SupportMismatch):
        h_function(CoarseGrain(edges, np.array([1.0, 1.0]), np.array([2.0, 0.0])))


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_total_variation_is_a_bounded_metric(p, q):
    p, q = np.asarray(p), np.asarray(q)
    if p.sum() == 0 or q.sum() == 0:
        return
    p, q = p / p.sum(), q / q.sum()
    tv = total_variation(p, q)
    assert 0 <= tv <= 1 + 1e-12
    assert tv == pytest.approx(total_variation(q, p))


def test_equilibrium_is_preserved_by_the_flow():
    ens = sample(density(TWO_MODE.field(0.0)), BOX, 20_000, 8)
    pts, _, mf = evolve_paths(ens, TWO_MODE, [1.7], 1e-8)
    edges = cell_edges(0.0, math.pi, 16)
    cg = coarse_grain(pts[mf == 0, -1], TWO_MODE, 1.7, edges)
    assert total_variation(cg.p_cells, cg.d_cells) < 0.02


def test_paths_do_not_depend_on_chunking():
    ens = sample(density(TWO_MODE.field(0.0)), BOX, 50, 2)
    a = evolve_paths(ens, TWO_MODE, [0.5, 1.0], 1e-8)[0]
    b = evolve_paths(ens, TWO_MODE, [0.5, 1.0], 1e-8, chunk=7)[0]
    assert np.array_equal(a, b)


def test_paths_do_not_depend_on_workers():
    ens = sample(density(TWO_MODE.field(0.0)), BOX, 40, 2)
    a = evolve_paths(ens, TWO_MODE, [0.5], 1e-8, chunk=10)[0]
    b = evolve_paths(ens, TWO_MODE, [0.5], 1e-8, chunk=10, workers=2)[0]
    assert np.array_equal(a, b)


def test_outcome_fractions_and_assignment():
    y = np.array([[0.0, -1.0], [0.0, 0.5], [0.0, 1.5], [0.0, 3.0]])
    fr, un = outcome_fractions(y, [(-2, 0), (0, 2)])
    assert fr.tolist() == [0.25, 0.5]
    assert un == pytest.approx(0.25)
    assert assign_branch(y[:, 1], [(-2, 0), (0, 2)]).tolist() == [0, 1, 1, -1]
    fr, _ = outcome_fractions(y, [(-2, 0), (0, 2)], flags=[Flag.STUCK, 0, 0, 0])
    assert fr.tolist() == pytest.approx([0.0, 2 / 3])
    with pytest.raises(OverlapError):
        outcome_fractions(y, [(-2, 1), (0, 2)])


def test_ensemble_state_valid_mask():
    e = EnsembleState(np.zeros((3, 1)), 0.0, 0, "test", np.array([0, Flag.STUCK, Flag.NODE_GRAZED]))
    assert e.valid.tolist() == [True, False, True]


# Wigner diagnostics

def gaussian(center=0.0, sigma=1 / math.sqrt(2), k=0.0):
    return WaveField(RING, gaussian_packet(RING.axis(0), center, sigma, k), 1.0)


def test_wigner_gaussian_peak_is_one_over_pi():
    q, p, W = wigner(gaussian())
    assert W.max() == pytest.approx(1 / math.pi, abs=1e-6)
    i, j = np.unravel_index(np.argmax(W), W.shape)
    assert q[i] == pytest.approx(0.0, abs=1e-12) and p[j] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("center, k", [(0.0, 0.0), (1.3, 2.0)])
def test_wigner_marginals(center, k):
    f = gaussian(center, 0.8, k)
    q, p, W = wigner(f)
    dp = p[1] - p[0]
    dq = RING.spacing[0]
    assert np.max(np.abs(W.sum(axis=1) * dp - density(f))) < 1e-6
    _, phi2 = momentum_density(f)
    assert np.max(np.abs(W.sum(axis=0) * dq - phi2)) < 1e-6


def test_cat_state_fringes_alternate_at_the_midpoint():
    g = Grid.make(512, -32.0, 32.0)
    x = g.axis(0)
    sigma = 0.7
    cat = normalize(WaveField(g, gaussian_packet(x, -4, sigma) + gaussian_packet(x, 4, sigma), 1.0))
    q, p, W = wigner(cat)
    keep = np.abs(p) < 2.0
    row = W[np.argmin(np.abs(q)), keep]
    # at q = 0 the interference term is exp(-2 sigma^2 p^2) cos(8 p) / pi
    expect = np.exp(-2 * sigma**2 * p[keep] ** 2) * np.cos(8 * p[keep]) / math.pi
    assert np.max(np.abs(row - expect)) < 1e-6
    assert row.max() > 0 and row.min() < 0
