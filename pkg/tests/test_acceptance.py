"""End-to-end acceptance criteria at their stated tolerances.

Each test prints one PASS/FAIL line; the lines are repeated in the terminal
summary.  Scenario-backed criteria run the canned scenario files through
``run_scenario`` exactly as the CLI would.
"""
import math
import time

import numpy as np
import pytest

from pilotwave.ensemble import momentum_density, wigner
from pilotwave.guidance import Flag, integrate_batch
from pilotwave.propagate import EigenmodeEvolution
from pilotwave.qstate import Grid, WaveField, box_modes, density, gaussian_packet, normalize
from pilotwave.runner import load_scenario, run_scenario

pytestmark = pytest.mark.slow

_RUNS: dict = {}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")

    def get(name):
        if name not in _RUNS:
            _RUNS[name] = run_scenario(load_scenario(name), root)
        return _RUNS[name]

    return get


def verdict(log, number, title, checks):
    """Print and record one line per criterion, then assert every check."""
    ok = all(passed for passed, _ in checks)
    detail = "; ".join(text for _, text in checks)
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}: {detail}"
    print(line)
    log.append(line)
    assert ok, line


def check(report, name, fmt="{:.4g}"):
    a = report.assertions[name]
    value = a["value"]
    text = fmt.format(value) if isinstance(value, (bool, int, float)) else str(value)
    return a["passed"], text if "=" in fmt else f"{name}={text}"


def test_born_rule_fractions(runs, criterion_log):
    rep = runs("born-branches")
    fr = rep.metrics["fractions"]
    verdict(criterion_log, 1, "Born-rule fractions", [
        check(rep, "born_fractions", "deviation={:.2f} sigma"),
        (True, f"fractions=({fr[0]:.4f}, {fr[1]:.4f}) vs (0.36, 0.64)"),
        (rep.elapsed < 120, f"runtime={rep.elapsed:.1f}s<120s"),
    ])


def test_equivariance(runs, criterion_log):
    rep = runs("trajectories")
    tv = rep.metrics["total_variation"]
    verdict(criterion_log, 2, "equivariance", [
        (len(tv) == 6 and max(tv) < 0.05, f"max TV over {len(tv)} times={max(tv):.4f}<0.05"),
        (rep.elapsed < 180, f"runtime={rep.elapsed:.1f}s<180s"),
    ])


def test_nonequilibrium_violation(runs, criterion_log):
    rep = runs("born-nonequilibrium")
    verdict(criterion_log, 3, "nonequilibrium violation", [
        check(rep, "branch_fraction", "branch-0 fraction={:.4f}"),
        check(rep, "departs_from_born", "distance from Born={:.1f} sigma"),
        (rep.elapsed < 120, f"runtime={rep.elapsed:.1f}s<120s"),
    ])


def test_relaxation(runs, criterion_log):
    rep = runs("relax")
    H = rep.metrics["H"]
    verdict(criterion_log, 4, "relaxation", [
        (len(H) == 11, f"{len(H) - 1} checkpoints"),
        check(rep, "h_non_increasing", "largest rise={:.4f}"),
        check(rep, "h_halved", "H(T)/H(0)={:.3f}"),
        (rep.elapsed < 300, f"runtime={rep.elapsed:.1f}s<300s"),
    ])


def test_particle_at_rest(runs, criterion_log):
    rep = runs("kinetic-energy-pointer")
    verdict(criterion_log, 5, "particle at rest", [
        check(rep, "particle_at_rest", "max|v|={:.2e}"),
        check(rep, "pointer_reads_energy", "rel. error={:.2e}"),
        check(rep, "particle_displacement", "particle displacement={:.2e}"),
    ])


def test_momentum_acquisition(runs, criterion_log):
    rep = runs("momentum-split")
    verdict(criterion_log, 6, "momentum acquisition", [
        check(rep, "momentum_slope", "rel. error={:.2e}"),
        check(rep, "slope_sign", "sign matches branch={}"),
        check(rep, "born_fractions", "deviation={:.2f} sigma"),
    ])


def test_double_slit(runs, criterion_log):
    rep = runs("double-slit")
    verdict(criterion_log, 7, "double slit", [
        check(rep, "upper_slit_stays_upper", "upper half-plane={:.0%}"),
        check(rep, "fringe_total_variation", "TV={:.4f}<0.08"),
        (rep.elapsed < 300, f"runtime={rep.elapsed:.1f}s<300s"),
    ])


def test_subquantum_measurement(runs, criterion_log):
    rep = runs("subquantum-track")
    verdict(criterion_log, 8, "subquantum measurement", [
        check(rep, "position_estimate", "error={:.4f}<=2dx"),
        check(rep, "wave_fidelity", "fidelity={:.7f}"),
        check(rep, "tracking_rms", "RMS={:.4f}<5dx"),
    ])


def test_occupancy_probe(runs, criterion_log):
    rep = runs("occupancy")
    verdict(criterion_log, 9, "occupancy probe", [
        check(rep, "probe_occupied_packet", "occupied={}/100"),
        check(rep, "probe_empty_packet", "unoccupied={}/100"),
    ])


def test_bohm_consistency(runs, criterion_log):
    rep = runs("trajectories")
    verdict(criterion_log, 10, "second-order consistency", [
        check(rep, "newton_residual", "max rel. residual={:.2e}<1e-3"),
    ])


def test_non_crossing(criterion_log):
    g = Grid.make(64, 0.0, math.pi, "box")
    h = EigenmodeEvolution(box_modes(g, [1, 2, 3], [1.0, 0.8j, 0.5], 1.0))
    starts = np.linspace(0.01, math.pi - 0.01, 1000)[:, None]
    times = np.linspace(0.05, 6.0, 120)
    t0 = time.perf_counter()
    res = integrate_batch(h, starts, 0.0, times, 1e-10)
    valid = (res.member_flags & Flag.STUCK) == 0
    x = res.points[valid, :, 0]
    gaps = np.diff(x, axis=0)
    verdict(criterion_log, 11, "non-crossing", [
        (bool(np.all(gaps > 0)), f"{valid.sum()} ordered paths, {len(times)} common times, "
                                 f"min gap={gaps.min():.2e}"),
        (True, f"runtime={time.perf_counter() - t0:.1f}s"),
    ])


def test_wigner_diagnostics(criterion_log):
    g = Grid.make(512, -32.0, 32.0)
    x = g.axis(0)
    ground = WaveField(g, gaussian_packet(x, 0.0, 1 / math.sqrt(2)), 1.0)
    _, _, W = wigner(ground)
    peak = abs(W.max() - 1 / math.pi)
    f = WaveField(g, gaussian_packet(x, 1.3, 0.8, 2.0), 1.0)
    q, p, Wf = wigner(f)
    pos = np.max(np.abs(Wf.sum(axis=1) * (p[1] - p[0]) - density(f)))
    mom = np.max(np.abs(Wf.sum(axis=0) * g.spacing[0] - momentum_density(f)[1]))
    cat = normalize(WaveField(g, gaussian_packet(x, -4, 0.7) + gaussian_packet(x, 4, 0.7), 1.0))
    qc, pc, Wc = wigner(cat)
    row = Wc[np.argmin(np.abs(qc)), np.abs(pc) < 1.0]
    flips = int(np.sum(np.diff(np.sign(row[np.abs(row) > 1e-3])) != 0))
    verdict(criterion_log, 12, "Wigner diagnostics", [
        (peak < 1e-6, f"|W_max - 1/pi|={peak:.1e}"),
        (pos < 1e-6, f"position marginal={pos:.1e}"),
        (mom < 1e-6, f"momentum marginal={mom:.1e}"),
        (flips >= 2, f"cat midpoint sign changes={flips}"),
    ])
