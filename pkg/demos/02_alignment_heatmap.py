"""Show how hard attention aligns a degraded signal to its reference.

Two cases: a 100 ms delay, where the path is a clean diagonal shifted by ten
steps, and a zeroed span, where the steps inside the gap grab whatever
reference row happens to score best.  Both score matrices are written as
PPM heatmaps with the chosen path in red.
"""
import argparse
from pathlib import Path

import numpy as np

from siamese_sqa import alignment, degrade, encoder, training
from siamese_sqa.cli import write_heatmap
from siamese_sqa.config import ModelConfig

ap = argparse.ArgumentParser()
ap.add_argument("--checkpoint", help="trained model; a seeded untrained one is used otherwise")
ap.add_argument("--out", default="demo_out")
args = ap.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

if args.checkpoint:
    model = training.ModelParams.load(args.checkpoint)
else:
    model = training.ModelParams.initialize(ModelConfig(variant="LM", seed=0))


def feats(x):
    return encoder.encode(x, model.params, model.buffers, model.config.encoder, model.config.dsp).features


ref = degrade.synth_speech(2.0, seed=200)
cases = {
    "delay": degrade.DegradationSpec(delay_ms=100.0),
    "timeclip": degrade.DegradationSpec(timeclip=[(0.8, 0.15)]),
}
for name, spec in cases.items():
    deg = degrade.apply_degradation(ref, spec)
    res, _ = alignment.align_hard(feats(deg), feats(ref), alignment.L1)
    offset = res.path - np.arange(len(res.path))
    values, counts = np.unique(offset, return_counts=True)
    print(f"{name:9s} modal offset {values[counts.argmax()]:+d} steps, "
          f"{counts.max() / len(offset):.0%} of steps on it")
    write_heatmap(out / f"align_{name}.ppm", res.scores, res.path)
    print(f"          heatmap written to {out / f'align_{name}.ppm'}")
