"""Detector scores and the evaluation metrics.

Run: python3 demos/03_ood_metrics.py
"""

import numpy as np
import torch

from ricasso.metrics import ScoreSet, auroc, energy_ood_score, fpr_at_tpr, msp_score, odin_score

# Score polarity is "higher = more in-distribution" for every detector.
logits = np.array([[6.0, 0.0, 0.0], [0.2, 0.1, 0.0]])
print("MSP:", msp_score(logits))
print("negated energy:", energy_ood_score(logits))

# AUROC counts ID-over-OOD wins, ties as one half.
print("AUROC worked example:", auroc(ScoreSet([3, 1, 2], [2, 0])))

# FPR95: threshold at the largest score that keeps 95% of ID samples, then count OOD above it.
rng = np.random.default_rng(0)
id_scores, ood_scores = rng.normal(2.0, 1.0, 2000), rng.normal(0.0, 1.0, 2000)
s = ScoreSet(id_scores, ood_scores, "energy")
print(f"Gaussian shift of 2: AUROC {auroc(s):.4f}, FPR95 {fpr_at_tpr(s):.4f}")

# ODIN: temperature scaling plus one signed input-gradient step, on a tiny linear model.
model = torch.nn.Linear(4, 3).double()
x = torch.randn(5, 4, dtype=torch.float64)
print("ODIN (T=1000, eps=0.0014):", odin_score(model, x))
print("ODIN with T=1, eps=0 equals MSP:", np.allclose(odin_score(model, x, 1.0, 0.0), msp_score(model(x))))
