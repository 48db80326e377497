"""From three probability curves to scored candidate proposals.

A hand-made probability sequence stands in for a trained network.  The
script picks candidate boundaries, pairs them under duration limits and
prints the 32-value boundary-sensitive feature of the best pair.
"""

import numpy as np

from bsn.pgm import DurationBounds, candidate_boundaries, construct_bsp, generate_candidate_proposals
from bsn.tem import ProbabilitySequences

t = np.arange(60)
bump = lambda c, w: np.exp(-0.5 * ((t - c) / w) ** 2)  # noqa: E731

# one action between 15 and 35, and a weaker one between 42 and 52
p_start = 0.05 + 0.9 * bump(15, 1.0) + 0.4 * bump(42, 1.0)
p_end = 0.05 + 0.9 * bump(35, 1.0) + 0.5 * bump(52, 1.0)
p_action = 0.05 + 0.9 * ((t >= 15) & (t <= 35)) + 0.5 * ((t >= 42) & (t <= 52))
probs = ProbabilitySequences(p_start=p_start, p_end=p_end, p_action=p_action)

bounds = candidate_boundaries(probs.p_start, probs.p_end, threshold=0.9)
print("start candidates:", [i for i, _ in bounds.starts])
print("end candidates:  ", [i for i, _ in bounds.ends])

props = generate_candidate_proposals(bounds, DurationBounds(5, 30))
for p in props:
    print(f"  [{p.t_s:4.0f}, {p.t_e:4.0f}]  p_s*p_e = {p.p_start * p.p_end:.3f}")

best = max(props, key=lambda p: p.p_start * p.p_end)
bsp = construct_bsp(probs.p_action, best)
np.set_printoptions(precision=2, suppress=True)
print("BSP start region :", bsp[:8])
print("BSP centre region:", bsp[8:24])
print("BSP end region   :", bsp[24:])
