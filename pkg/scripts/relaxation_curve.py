"""Coarse-grained H over time for the 16-mode box at several cell sizes.

Coarser cells relax faster and sit lower; the default scenario uses 32 x 32.
"""
import sys

import numpy as np

from pilotwave.ensemble import cell_edges, coarse_grain, evolve_paths, h_function, sample
from pilotwave.guidance import Flag
from pilotwave.qstate import box_modes, density, synthesize
from pilotwave.runner import build_evolution, load_scenario

n = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
s = load_scenario("relax")
ev = build_evolution(s)
g = s.grid
nu = s["numerics"]
start = sample(density(synthesize(box_modes(g, [[1, 1]], [1.0], s.masses))), g, n, s.seed)
times = np.linspace(0.0, nu["t_final"], nu["checkpoints"] + 1)
pts, _, mf = evolve_paths(start, ev, times[1:], nu["tol"], max_steps=nu["max_steps"])
valid = (mf & Flag.STUCK) == 0
print(f"{n} members, {int((~valid).sum())} flagged stuck")
print("t       " + "  ".join(f"{c:>2}x{c:<2}  " for c in (8, 16, 32)))
for i, t in enumerate(times):
    p = start.points if i == 0 else pts[:, i - 1]
    hs = [h_function(coarse_grain(p[valid], ev, t, cell_edges(g.lo, g.hi, c))) for c in (8, 16, 32)]
    print(f"{t:6.3f}  " + "  ".join(f"{h:7.4f}" for h in hs))
