"""Command-line entry point: ``python -m siamese_sqa <command>``.

Commands: synth-data, train, predict, align, evaluate, gradcheck.  Runtime
failures print a JSON error object to stderr and exit with status 1; bad
flags exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import alignment, degrade, metrics, training
from .audio_io import load_wav
from .config import CONFIG_ENV, VARIANTS, config_hash, load_config, tiny_model_config, with_overrides
from .errors import QualityModelError

log = logging.getLogger("siamese_sqa")


def _run_config(args):
    cfg = load_config(args.config)
    return with_overrides(
        cfg,
        model__variant=getattr(args, "variant", None),
        model__seed=args.seed,
        train__seed=args.seed,
        train__epochs=getattr(args, "epochs", None),
        train__finetune_epochs=getattr(args, "finetune_epochs", None),
        train__learning_rate=getattr(args, "lr", None),
    )


def _model(args):
    """Checkpoint if given, otherwise a freshly seeded model from the config."""
    if getattr(args, "checkpoint", None):
        return training.ModelParams.load(args.checkpoint)
    rc = _run_config(args)
    return training.ModelParams.initialize(rc.model, rc)


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


# --------------------------------------------------------------------------

def cmd_synth_data(args):
    out = Path(args.out)
    clean = out / "clean"
    degrade.write_clean_corpus(clean, args.n_clean, seed=args.seed or 0, duration_s=args.duration)
    manifest = degrade.build_corpus(clean, args.n_conditions, seed=args.seed or 0,
                                    out_dir=out / "degraded", group=args.group)
    meta = {"n_clean": args.n_clean, "n_conditions": args.n_conditions, "duration_s": args.duration,
            "seed": args.seed or 0, "group": args.group}
    meta["config_hash"] = config_hash(meta)
    manifest.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(manifest)
    return 0


def cmd_train(args):
    from .manifest import read_manifest

    rc = _run_config(args)
    if args.init:
        model = training.ModelParams.load(args.init)
        model.run_config = rc if rc.model == model.config else model.run_config
    else:
        model = training.ModelParams.initialize(rc.model, rc)
    pretrain = training.load_samples(read_manifest(args.manifest), model.config)
    finetune = training.load_samples(read_manifest(args.finetune_manifest), model.config) \
        if args.finetune_manifest else []
    log_fh = open(args.progress_log, "w", newline="") if args.progress_log else None
    writer = None
    if log_fh:
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(["step", "loss", "grad_norm"])

    def progress(step, value, norm):
        if writer:
            writer.writerow([step, f"{value:.8g}", f"{norm:.8g}"])
        if step % 50 == 0:
            log.info("step %d loss %.4f grad_norm %.3f", step, value, norm)

    try:
        stats = training.two_phase_train(model, pretrain, finetune, rc.train, progress)
    finally:
        if log_fh:
            log_fh.close()
    model.save(args.out)
    print(json.dumps({"checkpoint": str(args.out), "config_hash": model.config_hash, "step": model.step,
                      "epoch_loss": [s.mean_loss for s in stats]}))
    return 0


def cmd_predict(args):
    model = _model(args)
    deg = load_wav(args.deg)
    ref = load_wav(args.ref) if args.ref else None
    if ref is None and not model.config.single_ended:
        raise QualityModelError(f"variant {model.config.variant} needs --ref")
    fwd = training.forward_full(ref, deg, model, "eval")
    out = {"mos": fwd.mos_clamped, "mos_raw": float(fwd.mos), "variant": model.config.variant,
           "config_hash": model.config_hash}
    if args.debug_dump:
        dump = {"fused": fwd.fused, "attention": fwd.attention, "deg_features": fwd.deg.features}
        if fwd.alignment is not None:
            w = model.config.encoder.feature_dim
            dump.update(path=fwd.alignment.path, scores=fwd.alignment.scores, diff_block=fwd.fused[:, 2 * w:])
        np.savez(args.debug_dump, **dump)
        out["debug_dump"] = str(args.debug_dump)
    print(json.dumps(out))
    return 0


def write_heatmap(path, scores, route=None):
    """Binary PPM (P6) of the score matrix; degraded steps run down the rows.

    Higher scores are brighter; the chosen path is drawn in red.
    """
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = s.min(), s.max()
    gray = np.zeros_like(s) if hi == lo else (s - lo) / (hi - lo)
    img = np.repeat((gray * 255).round().astype(np.uint8)[..., None], 3, axis=2)
    if route is not None:
        img[np.arange(len(route)), np.asarray(route)] = (255, 0, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def cmd_align(args):
    model = _model(args)
    cfg = model.config
    method = args.method or cfg.score_method or alignment.L1
    f_ref = training.enc_mod.encode(load_wav(args.ref), model.params, model.buffers, cfg.encoder, cfg.dsp)
    f_deg = training.enc_mod.encode(load_wav(args.deg), model.params, model.buffers, cfg.encoder, cfg.dsp)
    result, _ = alignment.align_hard(f_deg, f_ref, method)
    rows = np.arange(len(result.path))
    best = result.scores[rows, result.path]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["deg_step", "chosen_ref_index", "score"])
        for i, (j, sc) in enumerate(zip(result.path, best)):
            w.writerow([i, int(j), f"{sc:.8g}"])
    if args.matrix:
        np.savetxt(args.matrix, result.scores, delimiter=",", fmt="%.8g")
    if args.heatmap:
        write_heatmap(args.heatmap, result.scores, result.path)
    offsets = result.path - rows
    vals, counts = np.unique(offsets, return_counts=True)
    print(json.dumps({"method": method, "steps": int(len(rows)), "ref_steps": int(result.n_ref),
                      "modal_offset": int(vals[np.argmax(counts)]), "config_hash": model.config_hash}))
    return 0


def cmd_evaluate(args):
    from .manifest import read_manifest

    rows = read_manifest(args.manifest)
    rc = _run_config(args)
    per_group = rc.metrics.per_group_mapping if args.per_group is None else args.per_group
    ci = rc.metrics.default_ci95 if args.ci95 is None else args.ci95
    if args.checkpoint:
        model = training.ModelParams.load(args.checkpoint)
        report = metrics.evaluate(rows, model, ci, per_group)
    else:
        if any(r.predicted is None for r in rows):
            raise QualityModelError("manifest has no mos_predicted column; pass --checkpoint")
        groups = [r.group for r in rows]
        report = metrics.evaluate_predictions(
            [r.predicted for r in rows], [r.mos for r in rows],
            [ci if r.ci95 is None else r.ci95 for r in rows],
            groups if len(set(groups)) > 1 else None, per_group)
        report.config_hash = rc.hash()
    meta = Path(args.manifest).with_suffix(".meta.json")
    out = report.to_dict()
    if meta.exists():
        out["manifest_hash"] = json.loads(meta.read_text()).get("config_hash")
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(report.to_text())
    return 0


def cmd_gradcheck(args):
    if args.full:
        rc = _run_config(args)
        model = training.ModelParams.initialize(with_overrides(rc, model__dtype="float64").model)
    else:
        model = training.ModelParams.initialize(tiny_model_config(args.variant or "LL", args.seed or 0))
    ref, deg = gradcheck_signals(0.4, args.seed or 0)
    report = training.grad_check(model, ref, deg, eps=args.eps, max_entries=args.max_entries,
                                 seed=args.seed or 0)
    worst = max(report.values())
    _write_json({"variant": model.config.variant, "eps": args.eps, "tolerance": args.tol,
                 "max_relative_error": worst, "per_tensor": report, "passed": worst <= args.tol}, args.out)
    if worst > args.tol:
        raise QualityModelError(f"max relative error {worst:.3g} exceeds {args.tol}")
    return 0


def gradcheck_signals(duration=0.4, seed=0):
    """Reference and a delayed, noisier degraded copy for gradient checks."""
    clean = degrade.synth_speech(duration, seed=seed)
    ref = degrade.apply_degradation(clean, degrade.DegradationSpec(noise_snr_db=30.0, seed=seed))
    deg = degrade.apply_degradation(ref, degrade.DegradationSpec(delay_ms=30.0, noise_snr_db=10.0, seed=seed + 1))
    return ref, deg


# --------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"JSON/TOML run config (default: ${CONFIG_ENV})")
    common.add_argument("--seed", type=int, help="overrides model and training seeds")
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="siamese-sqa", description="Siamese full-reference speech quality model")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="write a synthetic degraded corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-clean", type=int, default=20)
    s.add_argument("--n-conditions", type=int, default=100)
    s.add_argument("--duration", type=float, default=2.0)
    s.add_argument("--group")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", parents=[common], help="two-phase training")
    s.add_argument("--manifest", required=True)
    s.add_argument("--finetune-manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="start from this checkpoint")
    s.add_argument("--variant", choices=sorted(VARIANTS))
    s.add_argument("--epochs", type=int)
    s.add_argument("--finetune-epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--progress-log", help="CSV of step, loss, grad_norm")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="predict the MOS of one pair")
    s.add_argument("--deg", required=True)
    s.add_argument("--ref")
    s.add_argument("--checkpoint")
    s.add_argument("--variant", choices=sorted(VARIANTS))
    s.add_argument("--debug-dump", help="write intermediate tensors to this .npz")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("align", parents=[common], help="dump the hard-attention alignment")
    s.add_argument("--ref", required=True)
    s.add_argument("--deg", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--variant", choices=sorted(VARIANTS))
    s.add_argument("--method", choices=[alignment.L1, alignment.DOT])
    s.add_argument("--out", required=True, help="path CSV")
    s.add_argument("--matrix", help="score matrix CSV")
    s.add_argument("--heatmap", help="score matrix image (PPM)")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("evaluate", parents=[common], help="Pearson r, RMSE and RMSE* on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint", help="without it the manifest's mos_predicted column is scored")
    s.add_argument("--out", help="JSON report")
    s.add_argument("--ci95", type=float, help="default ci95 for rows without one")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--per-group", dest="per_group", action="store_true", default=None)
    g.add_argument("--global-mapping", dest="per_group", action="store_false")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--variant", choices=sorted(VARIANTS))
    s.add_argument("--full", action="store_true", help="full-size model (use --max-entries)")
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--max-entries", type=int)
    s.add_argument("--out", help="JSON report")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (QualityModelError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
