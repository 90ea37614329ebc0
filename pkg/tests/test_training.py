import numpy as np
import pytest

from siamese_sqa import alignment, encoder, fusion_head, training
from siamese_sqa.config import ModelConfig, TrainConfig, tiny_model_config
from siamese_sqa.errors import StateError, TrainingError
from siamese_sqa.training import ModelParams, Sample


def test_loss_values():
    assert training.loss(3.5, 3.5) == 0.0
    assert training.loss(3.0, 4.0) == 1.0
    for m, t in ((3.0, 4.0), (1.2, 4.7), (4.4, 2.0)):
        fd = (training.loss(m + 1e-6, t) - training.loss(m - 1e-6, t)) / 2e-6
        assert training.loss_grad(m, t) == pytest.approx(fd, rel=1e-6)


def test_self_pair_has_zero_difference_block(speech_2s):
    model = ModelParams.initialize(ModelConfig(variant="LM"))
    fwd = training.forward_full(speech_2s, speech_2s, model)
    assert not fwd.fused[:, 80:].any()
    assert fwd.mos == training.forward_full(speech_2s, speech_2s, model).mos


def test_single_ended_ignores_reference(short_pair):
    ref, deg = short_pair
    model = ModelParams.initialize(ModelConfig(variant="SM"))
    a = training.predict(ref, deg, model)
    assert a == training.predict(None, deg, model) == training.predict(deg, deg, model)


def test_backward_needs_train_pass(short_pair):
    ref, deg = short_pair
    model = ModelParams.initialize(tiny_model_config())
    with pytest.raises(StateError):
        training.backward_full(1.0, training.forward_full(ref, deg, model), model)


def test_zero_learning_rate_keeps_params(short_pair):
    ref, deg = short_pair
    model = ModelParams.initialize(tiny_model_config("LM"))
    before = {k: v.copy() for k, v in model.params.items()}
    sample = Sample("x", training.signal_segments(ref, model.config), training.signal_segments(deg, model.config), 2.0)
    cfg = TrainConfig(learning_rate=0.0)
    training.train_epoch([sample, sample], model, cfg)
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_non_finite_loss_raises(short_pair):
    ref, deg = short_pair
    model = ModelParams.initialize(tiny_model_config("LM"))
    sample = Sample("nan", ref, deg, float("nan"))
    with pytest.raises(TrainingError):
        training.train_step(model, sample, training.Adam(), TrainConfig())


def _tiny_samples(cfg, n):
    from siamese_sqa import degrade
    out = []
    for i in range(n):
        ref = degrade.synth_speech(0.3, seed=20 + i)
        spec = degrade.DegradationSpec(noise_snr_db=5.0 + 10 * i, seed=i)
        deg = degrade.apply_degradation(ref, spec)
        out.append(Sample(str(i), training.signal_segments(ref, cfg), training.signal_segments(deg, cfg),
                          degrade.pseudo_mos(ref, deg, spec)))
    return out


def test_overfit_single_sample():
    cfg = ModelConfig(variant="LM", dtype="float64", head_hidden=32)
    model = ModelParams.initialize(cfg)
    sample = _tiny_samples(cfg, 1)[0]
    sample.mos = 1.8
    initial = training.loss(training.forward_full(sample.ref, sample.deg, model, "train").mos, sample.mos)
    opt = training.Adam(1e-3)
    for _ in range(200):
        training.train_step(model, sample, opt, TrainConfig())
    final = training.loss(training.forward_full(sample.ref, sample.deg, model, "train").mos, sample.mos)
    assert final < 1e-3 * initial


def test_epoch_stats_deterministic():
    cfg = tiny_model_config("LL")
    runs = []
    for _ in range(2):
        model = ModelParams.initialize(cfg)
        stats = training.two_phase_train(model, _tiny_samples(cfg, 3), _tiny_samples(cfg, 2),
                                         TrainConfig(epochs=1, finetune_epochs=1, seed=5))
        runs.append((stats, {k: v.copy() for k, v in model.params.items()}))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_adam_matches_closed_form_first_step():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -3.0])}
    training.Adam(0.1).update(p, g)
    # first bias-corrected step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"], [1.0 - 0.1, -2.0 + 0.1], atol=1e-7)


def test_clip_grads():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert training.clip_grads(g, 1.0) == 5.0
    assert training.global_norm(g) == pytest.approx(1.0)


@pytest.mark.parametrize("variant", ["LM", "DM", "SM"])
def test_grad_check_other_variants(short_pair, variant):
    ref, deg = short_pair
    model = ModelParams.initialize(tiny_model_config(variant))
    report = training.grad_check(model, ref, deg, max_entries=6)
    assert max(report.values()) <= 1e-3, report


def test_grad_check_full_config_sampled(short_pair):
    ref, deg = short_pair
    model = ModelParams.initialize(ModelConfig(variant="LL", dtype="float64"))
    report = training.grad_check(model, ref, deg, max_entries=2)
    assert "head.attn.w" in report and "head.attn.b" in report
    assert max(report.values()) <= 1e-3, report


def test_per_path_gradients_sum(short_pair):
    """Each encoder gradient is the sum of the two siamese paths' finite differences."""
    ref, deg = short_pair
    model = ModelParams.initialize(tiny_model_config("LL"))
    cfg = model.config
    r = training.signal_segments(ref, cfg)
    d = training.signal_segments(deg, cfg)
    target = 1.0
    start = {k: v.copy() for k, v in model.buffers.items()}
    _, grads, fwd = training.loss_and_grads(model, r, d, target)
    path = fwd.alignment.path
    g_deg, g_ref = training.frozen_gates(fwd)

    def loss_two(p_deg, p_ref):
        fd = encoder.encode_segments(d, p_deg, {k: v.copy() for k, v in start.items()}, cfg.encoder, "train", g_deg)
        fr = encoder.encode_segments(r, p_ref, {k: v.copy() for k, v in start.items()}, cfg.encoder, "train", g_ref)
        fused = fusion_head.fuse(fd, alignment.gather(fr, path))
        return training.loss(fusion_head.head_forward(fused, model.params, cfg.head)[0], target)

    eps = 1e-5
    rng = np.random.default_rng(0)
    for name in ("enc.conv0.W", "enc.bn1.gamma", "enc.fc.W", "enc.lstm.fwd.Wh"):
        for fi in rng.choice(model.params[name].size, 3, replace=False):
            idx = np.unravel_index(fi, model.params[name].shape)
            parts = []
            for which in ("deg", "ref"):
                vals = []
                for sgn in (1, -1):
                    p = {k: v.copy() for k, v in model.params.items()}
                    p[name][idx] += sgn * eps
                    vals.append(loss_two(p, model.params) if which == "deg" else loss_two(model.params, p))
                parts.append((vals[0] - vals[1]) / (2 * eps))
            assert grads[name][idx] == pytest.approx(sum(parts), rel=1e-4, abs=1e-8)


def test_pretrain_rate_schedule():
    cfg = TrainConfig(learning_rate=1e-3, finetune_learning_rate=1e-4)
    rates = [training.pretrain_rate(cfg, i, 50) for i in range(50)]
    assert rates[0] == pytest.approx(1e-3) and rates[-1] == pytest.approx(1e-4)
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert rates[25] == pytest.approx(1e-4 + 0.9e-3 * 0.5 * (1 + np.cos(np.pi * 25 / 49)))
    flat = TrainConfig(learning_rate=1e-3, lr_schedule="constant")
    assert {training.pretrain_rate(flat, i, 50) for i in range(50)} == {1e-3}
    with pytest.raises(ValueError):
        training.pretrain_rate(TrainConfig(lr_schedule="step"), 0, 10)
