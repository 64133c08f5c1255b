"""Train on the synthetic long-tailed task, then evaluate and write a report bundle.

Run: python3 demos/04_train_and_evaluate.py   (about ten seconds)
Equivalent commands:
    ricasso train --config configs/desk.yaml --out runs
    ricasso eval --checkpoint runs/<run>/checkpoint.pt --ood synthetic:blobs --ood synthetic:noise
"""

import tempfile
from pathlib import Path

from ricasso.cli import cmd_eval, cmd_report
from ricasso.config import RunConfig
from ricasso.harness import train

out = Path(tempfile.mkdtemp(prefix="ricasso-demo-"))
cfg = RunConfig(output_dir=str(out)).replace(optim={"epochs": 10})
record = train(cfg, echo=print)
print("checkpoint:", record.checkpoint_path)

bundle = cmd_eval(record.checkpoint_path, ["synthetic:blobs", "synthetic:noise"], detector="energy")
print("figures:", sorted(p.name for p in bundle.figures.values() if p.suffix == ".png"))

cmd_report(record.run_dir)
print("bundle written under", out)
