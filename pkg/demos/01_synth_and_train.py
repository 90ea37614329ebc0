"""Build a small synthetic corpus and train a full-reference model on it.

Writes clean references, degraded copies with pseudo-MOS labels, and a
checkpoint under ./demo_out.  Pass --full for the acceptance-scale run
(500 + 100 one-second pairs, about half an hour for LM on one CPU).
"""
import argparse
import logging
from pathlib import Path

from siamese_sqa import degrade, metrics, training
from siamese_sqa.config import ModelConfig, TrainConfig
from siamese_sqa.manifest import read_manifest

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="demo_out")
ap.add_argument("--variant", default="LM")
ap.add_argument("--full", action="store_true")
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

root = Path(args.out)
n_pre, n_fine, n_test = (500, 100, 100) if args.full else (60, 20, 30)
degrade.write_clean_corpus(root / "clean_train", 50 if args.full else 10, seed=1, duration_s=1.0)
degrade.write_clean_corpus(root / "clean_test", 20 if args.full else 5, seed=2, duration_s=1.0)
pre = degrade.build_corpus(root / "clean_train", n_pre, seed=11, out_dir=root / "pretrain")
fine = degrade.build_corpus(root / "clean_train", n_fine, seed=12, out_dir=root / "finetune")
test = degrade.build_corpus(root / "clean_test", n_test, seed=13, out_dir=root / "test")

cfg = ModelConfig(variant=args.variant)
model = training.ModelParams.initialize(cfg)
stats = training.two_phase_train(model, training.load_samples(read_manifest(pre), cfg),
                                 training.load_samples(read_manifest(fine), cfg), TrainConfig())
for s in stats:
    phase = "finetune" if s.epoch >= 1000 else "pretrain"
    print(f"{phase} epoch {s.epoch % 1000}: mean loss {s.mean_loss:.3f}, mean grad norm {s.mean_grad_norm:.2f}")
model.save(root / f"{args.variant}.ckpt")

report = metrics.evaluate(read_manifest(test), model)
print(report.to_text())
