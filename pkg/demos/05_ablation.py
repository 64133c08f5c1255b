"""The (NOD, RCL, AALA, CBCL) toggle grid on a small task.

Run: python3 demos/05_ablation.py   (under a minute)
Equivalent command: ricasso ablate --config configs/desk.yaml
"""

from ricasso.config import RunConfig
from ricasso.harness import ABLATION_GRID, run_ablation_grid
from ricasso.report import format_table

base = RunConfig().replace(optim={"epochs": 10})
result = run_ablation_grid(base, ABLATION_GRID)
print(format_table(result.rows))

# A disabled term is absent from every step's breakdown, not merely small.
for row, rec in zip(result.rows, result.records):
    if not row["CBCL"]:
        assert all(step["cbcl"] is None for step in rec.steps)
print("disabled components never appear in the per-step breakdown")
