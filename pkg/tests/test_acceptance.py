"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

The lines are collected in ``RESULTS`` and repeated in the terminal summary
(see conftest.py), so they show up even when output is captured.
"""
import json
import time

import numpy as np
import pytest

from oracles import attention_pool_loop, fuse_loop, rmse_star_loop, score_dot_loop, score_l1_loop
from siamese_sqa import alignment as al
from siamese_sqa import degrade as dg
from siamese_sqa import encoder as enc
from siamese_sqa import fusion_head as fh
from siamese_sqa import metrics as mt
from siamese_sqa import training
from siamese_sqa.audio_io import load_wav, save_wav
from siamese_sqa.cli import gradcheck_signals, main
from siamese_sqa.config import VARIANTS, ModelConfig, TrainConfig, tiny_model_config
from siamese_sqa.dsp import active_steps
from siamese_sqa.manifest import read_manifest
from siamese_sqa.training import ModelParams

RESULTS = []

# corpus sizes for the learning check; 1 s clips keep both models inside the time limit
N_PRETRAIN, N_FINETUNE, N_TEST = 500, 100, 100
CLIP_S = 1.0


def report(name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return passed


def features(model, x):
    return enc.encode(x, model.params, model.buffers, model.config.encoder, model.config.dsp)


# --------------------------------------------------------------------------
# shared trained models

@pytest.fixture(scope="session")
def learning_run(tmp_path_factory):
    """Synthetic corpus plus LM and SM models trained in two phases."""
    t0 = time.time()
    root = tmp_path_factory.mktemp("learning")
    dg.write_clean_corpus(root / "clean_train", 50, seed=1, duration_s=CLIP_S)
    dg.write_clean_corpus(root / "clean_test", 20, seed=2, duration_s=CLIP_S)
    pre = read_manifest(dg.build_corpus(root / "clean_train", N_PRETRAIN, seed=11, out_dir=root / "p1"))
    fine = read_manifest(dg.build_corpus(root / "clean_train", N_FINETUNE, seed=12, out_dir=root / "p2"))
    test = read_manifest(dg.build_corpus(root / "clean_test", N_TEST, seed=13, out_dir=root / "test"))
    out = {}
    for variant in ("LM", "SM"):
        cfg = ModelConfig(variant=variant)
        model = ModelParams.initialize(cfg)
        training.two_phase_train(model, training.load_samples(pre, cfg), training.load_samples(fine, cfg),
                                 TrainConfig())
        out[variant] = (model, mt.evaluate(test, model))
    out["seconds"] = time.time() - t0
    return out


# --------------------------------------------------------------------------

def test_gradient_correctness():
    t0 = time.time()
    worst = {}
    for variant in sorted(VARIANTS):
        ref, deg = gradcheck_signals(0.4, 0)
        rep = training.grad_check(ModelParams.initialize(tiny_model_config(variant)), ref, deg, eps=1e-4)
        worst[variant] = max(rep.values())
        blocks = len(rep)
    elapsed = time.time() - t0
    ok = max(worst.values()) <= 1e-3 and elapsed <= 300
    detail = ", ".join(f"{v} {e:.1e}" for v, e in worst.items())
    assert report("gradient correctness", ok,
                  f"max rel. error per variant ({blocks}+ blocks each) {detail}; {elapsed:.0f} s (limit 300 s)")


def test_siamese_contract(tmp_path):
    x = dg.synth_speech(2.0, seed=31)
    save_wav(x, tmp_path / "a.wav")
    save_wav(x, tmp_path / "b.wav")
    a, b = load_wav(tmp_path / "a.wav"), load_wav(tmp_path / "b.wav")
    model = ModelParams.initialize(ModelConfig(variant="LM"))
    same = np.array_equal(features(model, a).features, features(model, b).features)
    other = dg.synth_speech(2.0, seed=32)
    deg = dg.apply_degradation(x, dg.DegradationSpec(noise_snr_db=10, seed=1))
    invariant = True
    for variant in ("SM", "SL"):
        m = ModelParams.initialize(ModelConfig(variant=variant))
        preds = {training.forward_full(r, deg, m).mos for r in (x, other, None)}
        invariant &= len(preds) == 1
    assert report("siamese contract", same and invariant,
                  f"identical inputs encode bitwise equal: {same}; SM/SL invariant to reference: {invariant}")


def _delay_recovery(model, n_signals=20, ks=(5, 10, 30)):
    rates = {}
    refs = [dg.synth_speech(2.0, seed=100 + s) for s in range(n_signals)]
    ref_feats = [features(model, r) for r in refs]
    for k in ks:
        hits = total = 0
        for ref, fr in zip(refs, ref_feats):
            deg = dg.apply_degradation(ref, dg.DegradationSpec(delay_ms=10.0 * k))
            res, _ = al.align_hard(features(model, deg), fr, al.L1)
            steps = np.arange(len(res.path))
            sel = active_steps(deg) & (steps >= k)
            hits += int(np.sum(res.path[sel] == steps[sel] - k))
            total += int(sel.sum())
        rates[k] = hits / total
    return rates


def test_alignment_delay_recovery(learning_run):
    t0 = time.time()
    untrained = _delay_recovery(ModelParams.initialize(ModelConfig(variant="LM", seed=0)))
    trained = _delay_recovery(learning_run["LM"][0])
    elapsed = time.time() - t0
    ok = min(untrained.values()) >= 0.95 and min(trained.values()) >= 0.95 and elapsed <= 120
    fmt = lambda r: " ".join(f"k={k}:{v:.3f}" for k, v in r.items())  # noqa: E731
    assert report("alignment delay recovery", ok,
                  f"untrained {fmt(untrained)}; trained {fmt(trained)}; {elapsed:.0f} s (limit 120 s)")


def test_alignment_timeclip_failure_mode():
    model = ModelParams.initialize(ModelConfig(variant="LM", seed=0))
    start, dur = 0.8, 0.15
    a0, a1 = int(round(start * 48000)), int(round((start + dur) * 48000))
    lines, ok = [], True
    for seed in range(5):
        ref = dg.synth_speech(2.0, seed=200 + seed)
        deg = dg.apply_degradation(ref, dg.DegradationSpec(timeclip=[(start, dur)]))
        res, _ = al.align_hard(features(model, deg), features(model, ref), al.L1)
        steps = np.arange(len(res.path))
        # the center frame of segment i spans samples [480 (i+7), 480 (i+7) + 960)
        lo = (steps + 7) * 480
        hi = lo + 960
        inside = (lo >= a0) & (hi <= a1)
        unclipped = (hi <= a0) | (lo >= a1)
        sel = unclipped & active_steps(ref)
        deviating = int(np.sum(res.path[inside] != steps[inside]))
        identity = float(np.mean(res.path[sel] == steps[sel]))
        ok &= deviating >= 1 and identity >= 0.9
        lines.append(f"{deviating}/{inside.sum()} clipped steps off-diagonal, {identity:.2f} identity")
    assert report("time-clip failure mode", ok, "; ".join(lines))


def test_unit_equivalence():
    rng = np.random.default_rng(2024)
    worst = {"score_l1": 0.0, "score_dot": 0.0, "attention": 0.0, "fusion": 0.0, "rmse_star": 0.0}
    for _ in range(100):
        s, h = rng.normal(size=40), rng.normal(size=40)
        worst["score_l1"] = max(worst["score_l1"], abs(al.score_l1(s, h) - score_l1_loop(s, h)))
        worst["score_dot"] = max(worst["score_dot"], abs(al.score_dot(s, h) - score_dot_loop(s, h)))
        n = int(rng.integers(1, 12))
        G = rng.normal(size=(n, 16))
        params = {"head.attn.w": rng.normal(size=16), "head.attn.b": np.asarray(rng.normal())}
        g_a, a = fh.attention_pool(G, params)
        want_g, want_a = attention_pool_loop(G, params["head.attn.w"], float(params["head.attn.b"]))
        worst["attention"] = max(worst["attention"], np.abs(g_a - want_g).max(), np.abs(a - want_a).max())
        d, r = rng.normal(size=(n, 40)), rng.normal(size=(n, 40))
        worst["fusion"] = max(worst["fusion"], np.abs(fh.fuse(d, r) - fuse_loop(d, r)).max())
        k = int(rng.integers(5, 30))
        m, subj, ci = rng.uniform(1, 5, k), rng.uniform(1, 5, k), rng.uniform(0, 0.5, k)
        worst["rmse_star"] = max(worst["rmse_star"], abs(mt.rmse_star(m, subj, ci) - rmse_star_loop(m, subj, ci)))
    ok = max(worst.values()) <= 1e-10
    assert report("unit equivalence", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (limit 1e-10)")


def test_learning_sanity(learning_run):
    lm, sm = learning_run["LM"][1], learning_run["SM"][1]
    secs = learning_run["seconds"]
    ok = lm.pearson_r >= 0.85 and lm.rmse_star <= 0.35 and lm.rmse_star <= sm.rmse_star and secs <= 3600
    assert report("learning sanity", ok,
                  f"LM r={lm.pearson_r:.3f} RMSE*={lm.rmse_star:.3f}; SM r={sm.pearson_r:.3f} "
                  f"RMSE*={sm.rmse_star:.3f}; {secs / 60:.1f} min (limit 60)")


def test_metrics_protocol():
    pred = np.array([1.4, 2.1, 2.6, 3.3, 3.9, 4.4])
    subj = np.array([1.2, 2.5, 2.4, 3.6, 3.7, 4.6])
    ci = np.array([0.10, 0.20, 0.15, 0.05, 0.30, 0.12])
    c = mt.fit_monotone_poly3(pred, subj)
    mapped = mt.apply_mapping(c, pred)
    formula = abs(mt.rmse_star(mapped, subj, ci) - rmse_star_loop(mapped, subj, ci)) <= 1e-12
    rank = np.array_equal(np.argsort(pred, kind="stable"), np.argsort(mapped, kind="stable"))
    within = mt.rmse_star(subj + 0.5 * ci * np.array([1, -1, 1, -1, 1, -1]), subj, ci) == 0.0
    assert report("metrics protocol", formula and rank and within,
                  f"formula match {formula}, rank order kept {rank}, within-CI gives 0 {within}")


def test_determinism(tmp_path, capsys):
    cfg = {"model": {"variant": "LM", "dtype": "float64", "head_hidden": 4,
                     "dsp": {"n_mels": 8, "seg_len": 5},
                     "encoder": {"channels": [3, 4], "pool_after": [1], "fc_dim": 4, "lstm_hidden": 3}},
           "train": {"epochs": 1, "finetune_epochs": 1}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        main(["synth-data", "--out", str(d), "--n-clean", "2", "--n-conditions", "6", "--duration", "0.6",
              "--seed", "9"])
        man = d / "degraded/manifest.csv"
        main(["train", "--config", str(tmp_path / "cfg.json"), "--manifest", str(man),
              "--finetune-manifest", str(man), "--out", str(d / "m.ckpt"), "--seed", "9"])
        main(["evaluate", "--manifest", str(man), "--checkpoint", str(d / "m.ckpt"), "--out", str(d / "r.json")])
        digests.append([(d / p).read_bytes() for p in ("degraded/manifest.csv", "m.ckpt", "r.json")])
    capsys.readouterr()
    same = [x == y for x, y in zip(*digests)]
    assert report("determinism", all(same),
                  f"manifest {same[0]}, checkpoint {same[1]}, report {same[2]} identical across two runs")
