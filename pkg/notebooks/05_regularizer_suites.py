"""
Guiding weight sweep and the proximal alternative
=================================================

Runs the lambda grid, then compares the best lambda against a proximal term
on identical splits.  Reduced rounds and data so it finishes in a few
minutes; the full-size numbers come from the default ExperimentConfig.
"""
from dataclasses import replace
from pathlib import Path

from fdglab import harness as H

out = Path("notebook_runs")
base = replace(H.ExperimentConfig(), rounds=6, n_per_domain=200, seeds=[0], output_dir=str(out))

sweep = H.lambda_sweep(base)
for s in sweep:
    print(f"lambda={s.weight:<5g}", " ".join(f"{a:6.2f}" for a in s.per_domain), f"avg {s.avg:.2f}")
lam = H.best_lambda(sweep)
print("best lambda:", lam)

for s in H.fedprox_comparison(base, mu_grid=(0.01, 0.1), lam=lam):
    print(f"{s.arm:28s} avg {s.avg:6.2f}  data {s.data_hash[:10]}")

print((out / "sweep.csv").read_text())
