"""
Cost arithmetic and feature export
==================================

Parameter-count costs for the supported methods, then pooled features of a
saved dataset from a freshly built model.
"""
from pathlib import Path

import numpy as np

from fdglab import domains as D
from fdglab import harness as H
from fdglab.model import ModelSpec, build_model, save_checkpoint

spec = ModelSpec()
R = build_model(spec, 0).num_params()
print(f"R = {R} parameters for the default model")
for method in H.COST_METHODS:
    print(H.format_cost(H.cost_model(method, R, 3, 4, spec.feature_dim)), end="")

work = Path("notebook_runs")
work.mkdir(exist_ok=True)
model = build_model(spec, 0)
save_checkpoint(model, work / "init.bin")
data = D.generate_domain(D.load_preset()[1], 20, 4, 16, seed=0)
D.save_domain(data, work / "domain1.bin")

text = H.export_features(work / "init.bin", work / "domain1.bin", work / "features.csv")
header, *rows = text.splitlines()
print(header[:60], "...")
feats = np.array([[float(v) for v in r.split(",")[:-2]] for r in rows])
print("feature matrix", feats.shape, "mean", round(float(feats.mean()), 4))
