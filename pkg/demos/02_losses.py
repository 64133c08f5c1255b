"""The loss terms on small hand-made tensors.

Run: python3 demos/02_losses.py
"""

import math

import torch

from ricasso.losses import (
    LossConfig,
    aala_factor,
    adjusted_softmax,
    cbcl_loss,
    cls_loss,
    dual_entropy_weight,
    energy_score,
    rcl_loss,
    recalibrated_margins,
)

# Energy: lower means the network is more certain the input belongs to some class.
logits = torch.tensor([[10.0, 0.0, 0.0], [0.5, 0.4, 0.3]])
energy = energy_score(logits, tau=1.0)
print("energies:", energy.tolist())

# The batch-softmax of energies turns into factors in (1, 2]; the uncertain row
# (higher energy) gets the larger factor, so its prior margin is amplified more.
factors = aala_factor(energy)
print("AALA factors:", factors.tolist(), "sum of (f - 1):", float((factors - 1).sum()))

priors = torch.tensor([[0.9, 0.09, 0.01]])
margins = recalibrated_margins(priors, factors.unsqueeze(1))
print("margins, row 2:", margins[1, 0].tolist())
print("adjusted softmax, row 2:", adjusted_softmax(logits[1], margins[1, 0]).tolist())

# Soft cross-entropy against a two-hot target, with and without AALA.
target = torch.tensor([[0.0, 0.5, 0.5], [0.5, 0.5, 0.0]])
for aala in (False, True):
    cfg = LossConfig(aala_enabled=aala)
    print(f"cls loss (aala={aala}):", float(cls_loss(logits.unsqueeze(1), target, priors, cfg)))

# Dual-entropy weight: zero for a confident correct prediction, large for a confused one.
print("omega confident:", float(dual_entropy_weight([1.0, 0.0], [1.0, 0.0])))
print("omega confused:", float(dual_entropy_weight([0.7, 0.3], [0.0, 1.0])))

# CBCL with unit gammas is tanh((d+ - d-) / 2): bounded in (-1, 1).
cfg = LossConfig()
for dp, dm in [(0.0, 0.0), (1.0, 2.0), (4.0, 0.5)]:
    print(f"cbcl({dp}, {dm}) = {float(cbcl_loss(dp, dm, cfg)):+.6f}   tanh = {math.tanh((dp - dm) / 2):+.6f}")

# RCL: projections are treated as constants, so only the predictions get a gradient.
h = torch.randn(2, 4, requires_grad=True)
u = torch.randn(2, 4, requires_grad=True)
loss = rcl_loss(h[:1], h[1:], u[:1], u[1:])
loss.backward()
print("rcl:", loss.item(), "| grad on projections:", h.grad, "| grad on predictions nonzero:", bool(u.grad.abs().sum() > 0))
