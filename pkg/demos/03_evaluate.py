"""Score a checkpoint on a manifest with the mapped-RMSE protocol.

Predictions are mapped to the subjective scale with a monotone cubic, then
errors inside each condition's 95% interval are forgiven (RMSE*).  Groups in
the manifest get their own mapping, as with separate listening tests.
"""
import argparse

import numpy as np

from siamese_sqa import metrics, training
from siamese_sqa.manifest import read_manifest

ap = argparse.ArgumentParser()
ap.add_argument("manifest")
ap.add_argument("checkpoint")
args = ap.parse_args()

model = training.ModelParams.load(args.checkpoint)
report = metrics.evaluate(read_manifest(args.manifest), model)
print(report.to_text())
c = np.asarray(report.coefficients)
print("global mapping: y = " + " + ".join(f"{v:.3g} x^{i}" for i, v in enumerate(c)))
