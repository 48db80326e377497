"""Soft-NMS keeps every proposal and decays overlapping ones; greedy NMS drops them."""

from bsn.pgm import Proposal
from bsn.postproc import NmsConfig, greedy_nms, soft_nms

props = [
    Proposal(10.0, 30.0, p_fused=0.90),
    Proposal(11.0, 31.0, p_fused=0.85),  # near duplicate of the first
    Proposal(10.0, 24.0, p_fused=0.60),
    Proposal(40.0, 55.0, p_fused=0.50),  # a separate action
]

print("soft (gaussian, threshold 0.65, epsilon 0.75)")
for p in soft_nms(props, NmsConfig()):
    print(f"  [{p.t_s:.0f}, {p.t_e:.0f}]  {p.p_fused:.3f} -> {p.score:.3f}")

print("greedy (threshold 0.65)")
for p in greedy_nms(props, NmsConfig(mode="greedy")):
    print(f"  [{p.t_s:.0f}, {p.t_e:.0f}]  {p.score:.3f}")
