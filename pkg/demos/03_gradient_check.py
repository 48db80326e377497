"""Backprop against central differences for a small boundary network.

ReLU kinks make naive finite differences unreliable, so the checker
shrinks its step whenever a perturbation flips a unit on or off.
"""

import numpy as np

from bsn.nn import conv_stack, grad_check
from bsn.tem import TemLossConfig, assign_tem_targets, tem_loss

length, dim = 24, 4
rng = np.random.default_rng(0)
x = rng.normal(size=(1, length, dim))
targets = assign_tem_targets([(4.0, 12.0), (15.0, 21.0)], length)
cfg = TemLossConfig(window=length)


def loss(pred):
    res = tem_loss(pred[0], targets, cfg)
    return res.total, res.grad[None]


for seed in range(5):
    stack = conv_stack(dim, [(8, 3, "relu"), (8, 3, "relu"), (3, 1, "sigmoid")], seed=seed)
    print(f"seed {seed}: max relative error {grad_check(stack, x, loss):.2e}")
