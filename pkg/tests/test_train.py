import math

import numpy as np
import pytest

import convssm.train as train_mod
from convssm.layer import init_params
from convssm.train import (
    Checkpoint,
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    compare_with_convrnn,
    load_checkpoint,
    parse_kv,
    rollout_metrics,
    save_checkpoint,
    train,
)


def tiny(**kw):
    base = dict(P=4, U=2, size=6, blob=3, length=8, context=4, horizon=4, samples=8,
                test_samples=4, eval_samples=4, steps=6, warmup=2, eval_every=0,
                log_every=1, checkpoint_every=0, threads=1)
    base.update(kw)
    return TrainConfig(**base)


def test_parse_kv_comments_and_blanks():
    text = "# header\nsteps = 10\n\nlr=0.5  # inline\nfreeze = lambda, dt\n"
    assert parse_kv(text) == {"steps": "10", "lr": "0.5", "freeze": "lambda, dt"}


@pytest.mark.parametrize("text", ["steps 10", " = 4"])
def test_parse_kv_errors(text):
    with pytest.raises(ConfigError):
        parse_kv(text)


def test_config_text_round_trip():
    cfg = tiny(lr=0.0125, freeze="b", loss="l1_l2")
    assert TrainConfig.from_text(cfg.to_text()) == cfg


def test_default_config_matches_desk_scale_experiment():
    cfg = TrainConfig()
    spec = cfg.model_spec()
    assert (spec.layers, spec.P, spec.U, spec.precision, spec.cell) == (2, 32, 16, "f32", "convs5")
    assert (cfg.size, cfg.length, cfg.steps, cfg.context, cfg.horizon) == (16, 40, 2000, 20, 20)


@pytest.mark.parametrize("text,match", [
    ("bogus = 1", "unknown config keys"),
    ("steps = many", "steps"),
    ("context = 30\nhorizon = 20", "must fit"),
    ("freeze = everything", "freeze group"),
    ("batch = 0", "batch"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        TrainConfig.from_text(text)


def test_zero_steps_reports_the_initial_model():
    cfg = tiny(steps=0)
    result = train(cfg)
    spec = cfg.model_spec()
    _, test = train_mod.generate(cfg.data_config())
    test = test.astype(spec.real_dtype)
    ref = rollout_metrics(init_params(spec, cfg.seed), spec, test[:, :cfg.eval_samples],
                          cfg.context, cfg.horizon)
    assert result.opt.step == 0
    assert result.final["rollout_mse"] == ref["rollout_mse"]
    assert result.final["copy_last_mse"] == ref["copy_last_mse"]


def test_resume_reproduces_uninterrupted_run_bitwise(tmp_path):
    cfg = tiny(steps=6, checkpoint_every=3)
    full = train(cfg)
    part = train(cfg, tmp_path / "a", stop_at=3)
    ckpt = load_checkpoint(part.checkpoint)
    assert ckpt.step == 3
    # the very next step matches, and so does the rest of the run
    nxt = train(cfg, resume=ckpt, stop_at=4)
    ref = train(cfg, stop_at=4)
    assert all(np.array_equal(nxt.params[k], ref.params[k]) for k in ref.params)
    rest = train(cfg, resume=ckpt)
    assert all(np.array_equal(rest.params[k], full.params[k]) for k in full.params)
    assert all(np.array_equal(rest.opt.m[k], full.opt.m[k]) for k in full.opt.m)


def test_training_reduces_loss():
    cfg = tiny(steps=30, lr=1e-2, log_every=1)
    res = train(cfg)
    losses = [r["loss"] for r in res.log if r["kind"] == "train"]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_outputs_written(tmp_path):
    cfg = tiny(steps=4, eval_every=2, checkpoint_every=2)
    res = train(cfg, tmp_path)
    assert (tmp_path / "checkpoint.cssm").exists() and (tmp_path / "metrics.ldjson").exists()
    kinds = [r["kind"] for r in res.log]
    assert kinds.count("eval") == 2  # one interval eval plus the final one
    ck = load_checkpoint(tmp_path / "checkpoint.cssm")
    assert ck.config == cfg and ck.step == 4
    assert all(np.array_equal(ck.params[k], res.params[k]) for k in res.params)


def test_checkpoint_manifest_names_model_fields(tmp_path):
    cfg = tiny()
    ck = Checkpoint(cfg, init_params(cfg.model_spec(), 0), train_mod.AdamState())
    path = save_checkpoint(tmp_path / "c.cssm", ck)
    arrays = train_mod.container.load(path)
    model = train_mod._entry_text(arrays["manifest.model"])
    assert '"P": 4' in model and '"layers": 2' in model
    assert not (tmp_path / "c.cssm.tmp").exists()


def test_nonfinite_loss_aborts_with_last_checkpoint(tmp_path, monkeypatch):
    real = train_mod.loss_and_grads
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        value, grads = real(*args, **kw)
        return (math.nan if calls["n"] == 4 else value), grads

    monkeypatch.setattr(train_mod, "loss_and_grads", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(tiny(steps=6, checkpoint_every=2), tmp_path)
    assert info.value.step == 3
    assert load_checkpoint(info.value.checkpoint).step == 2


def test_divergence_before_any_checkpoint(monkeypatch):
    monkeypatch.setattr(train_mod, "loss_and_grads", lambda *a, **k: (math.inf, {}))
    with pytest.raises(TrainingDiverged, match="no checkpoint"):
        train(tiny())


def test_frozen_groups_keep_their_values():
    cfg = tiny(freeze="lambda,dt", steps=3)
    res = train(cfg)
    init = init_params(cfg.model_spec(), cfg.seed)
    frozen = [n for n in init if n.endswith(("lam_log_re", "lam_im", "log_dt"))]
    assert len(frozen) == 3 * cfg.layers
    for name in frozen:
        assert np.array_equal(res.params[name], init[name])
    assert not np.array_equal(res.params["layers.0.b_re"], init["layers.0.b_re"])


def test_time_budget_mode():
    res = train(tiny(steps=1000, time_budget=0.3))
    assert 0 < res.opt.step < 1000 and res.train_seconds >= 0.3


def test_compare_gives_convrnn_the_same_budget():
    out = compare_with_convrnn(tiny(steps=4))
    s5, rnn = out["results"]
    assert rnn.config.cell == "convrnn" and rnn.train_seconds >= s5.train_seconds
    assert out["convs5_beats_convrnn"] == (s5.final["rollout_mse"] < rnn.final["rollout_mse"])


def test_rollout_metrics_fields(rng):
    cfg = tiny()
    spec = cfg.model_spec()
    seqs = rng.uniform(size=(8, 2, 6, 6, 1)).astype(np.float32)
    m = rollout_metrics(init_params(spec, 0), spec, seqs, 4, 4)
    assert len(m["mse_curve"]) == 4 and len(m["psnr_curve"]) == 4
    assert np.isclose(m["mse_ratio"], m["rollout_mse"] / m["copy_last_mse"])
