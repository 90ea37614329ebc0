import csv
import json

import numpy as np
import pytest

from siamese_sqa import degrade
from siamese_sqa.audio_io import save_wav
from siamese_sqa.cli import main
from siamese_sqa.config import RunConfig, tiny_model_config
from siamese_sqa.dsp import active_steps


@pytest.fixture(scope="module")
def wavs(tmp_path_factory):
    d = tmp_path_factory.mktemp("wavs")
    x = degrade.synth_speech(1.5, seed=4)
    save_wav(x, d / "ref.wav")
    save_wav(degrade.apply_degradation(x, degrade.DegradationSpec(delay_ms=100)), d / "delayed.wav")
    return d


def test_synth_data_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["synth-data", "--out", str(tmp_path / name), "--n-clean", "1", "--n-conditions", "3",
                     "--duration", "1.0", "--seed", "3"]) == 0
    a = (tmp_path / "a/degraded/manifest.csv").read_bytes()
    assert a == (tmp_path / "b/degraded/manifest.csv").read_bytes()
    meta = json.loads((tmp_path / "a/degraded/manifest.meta.json").read_text())
    assert "config_hash" in meta
    assert len(a.decode().strip().splitlines()) == 4


def test_predict_self_pair_debug_dump(wavs, tmp_path, capsys):
    dump = tmp_path / "dump.npz"
    assert main(["predict", "--deg", str(wavs / "ref.wav"), "--ref", str(wavs / "ref.wav"),
                 "--variant", "LL", "--debug-dump", str(dump)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 1.0 <= out["mos"] <= 5.0 and out["variant"] == "LL"
    assert not np.load(dump)["diff_block"].any()


def test_align_recovers_100ms_delay(wavs, tmp_path, capsys):
    path_csv, matrix, heat = tmp_path / "path.csv", tmp_path / "m.csv", tmp_path / "h.ppm"
    assert main(["align", "--ref", str(wavs / "ref.wav"), "--deg", str(wavs / "delayed.wav"),
                 "--out", str(path_csv), "--matrix", str(matrix), "--heatmap", str(heat)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["modal_offset"] == -10
    with open(path_csv) as fh:
        rows = list(csv.DictReader(fh))
    path = np.array([int(r["chosen_ref_index"]) for r in rows])
    from siamese_sqa.audio_io import load_wav
    act = active_steps(load_wav(wavs / "delayed.wav"))
    steps = np.arange(len(path))
    sel = act & (steps >= 10)
    assert np.mean(path[sel] == steps[sel] - 10) >= 0.95
    scores = np.loadtxt(matrix, delimiter=",")
    assert scores.shape == (len(path), summary["ref_steps"])
    assert heat.read_bytes().startswith(b"P6\n%d %d\n255\n" % (scores.shape[1], scores.shape[0]))


def test_evaluate_perfect_manifest(tmp_path, capsys):
    rows = ["ref_path,deg_path,mos,mos_predicted"]
    for i, m in enumerate([1.2, 2.0, 2.9, 3.3, 4.1, 4.6]):
        rows.append(f"r{i}.wav,d{i}.wav,{m},{m}")
    (tmp_path / "m.csv").write_text("\n".join(rows) + "\n")
    assert main(["evaluate", "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path / "r.json")]) == 0
    text = capsys.readouterr().out
    assert "0.00" in text.splitlines()[-1]
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["rmse_star"] == 0.0 and report["config_hash"] == RunConfig().hash()


def test_train_predict_evaluate_round(tmp_path, capsys):
    cfg = {"model": {**RunConfig(model=tiny_model_config("LM")).to_dict()["model"]},
           "train": {"epochs": 1, "finetune_epochs": 0}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["synth-data", "--out", str(tmp_path / "data"), "--n-clean", "2", "--n-conditions", "6",
                 "--duration", "0.5"]) == 0
    manifest = tmp_path / "data/degraded/manifest.csv"
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--manifest", str(manifest),
                 "--out", str(ckpt), "--progress-log", str(tmp_path / "log.csv")]) == 0
    log = (tmp_path / "log.csv").read_text().splitlines()
    assert log[0] == "step,loss,grad_norm" and len(log) == 7
    capsys.readouterr()
    assert main(["evaluate", "--manifest", str(manifest), "--checkpoint", str(ckpt)]) == 0
    assert "overall" in capsys.readouterr().out


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--variant", "LM", "--max-entries", "3", "--out", str(tmp_path / "g.json")]) == 0
    report = json.loads((tmp_path / "g.json").read_text())
    assert report["passed"] and report["max_relative_error"] <= 1e-3


def test_error_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["predict", "--bogus"])
    assert exc.value.code == 2
    capsys.readouterr()
    assert main(["predict", "--deg", str(tmp_path / "missing.wav"), "--variant", "SM"]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "IoError" and err["command"] == "predict"
