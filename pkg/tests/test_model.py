import numpy as np
import pytest
from hypothesis import given, strategies as st

from irregts.data import SynthSpec, TimeSeries, generate
from irregts.errors import ConfigError, DimensionError, EmptyInputError, ValidationError
from irregts.model import (
    PRESETS,
    ModelConfig,
    SequenceEncoder,
    augment_inputs,
    checkpoint_dict,
    classify,
    encode,
    encoder_from_dict,
    forward_batch,
    init_hidden,
    load_checkpoint,
    logits_from_hidden,
    make_batch,
    positional_encoding,
    predict,
    predict_batch,
    preset,
    save_checkpoint,
)
from irregts.node import SolveConfig


def small_cfg(**kw):
    base = dict(cell="gru", hidden_dim=5, f_theta_units=7, num_classes=3, feature_dim=2, seed=1, init_sigma=0.1)
    base.update(kw)
    return ModelConfig(**base)


def rand_series(rng, ts, d=2, horizon=None, label=0):
    return TimeSeries("r", ts, rng.standard_normal((len(ts), d)), label, ts[-1] if horizon is None else horizon)


# -- configuration ----------------------------------------------------------

def test_defaults_and_presets():
    cfg = ModelConfig()
    assert (cfg.hidden_dim, cfg.f_theta_units, cfg.pe_tau, cfg.init_sigma) == (80, 255, 1000.0, 1e-4)
    assert set(PRESETS) >= {"ode-gru", "gru", "gru-dt", "gru-pe", "ode-lstm", "lstm-dt", "ode-rnn", "rnn"}
    m = preset("ode-gru", 6, 4)
    assert m.ode_enabled and m.cell == "gru" and m.hidden_dim == 80
    b = preset("gru-dt", 6, 4)
    assert not b.ode_enabled and b.time_features == "delta_t" and b.input_dim == 7
    with pytest.raises(ConfigError):
        preset("transformer", 6, 4)
    with pytest.raises(ConfigError):
        ModelConfig(num_classes=1).validate()
    with pytest.raises(ConfigError):
        ModelConfig(cell="rnn2").validate()


def test_config_dict_round_trip():
    cfg = small_cfg(solve=SolveConfig(2, "adjoint"), time_features="pe")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_large_head_sizes():
    for K in (19, 13):
        enc = SequenceEncoder(small_cfg(num_classes=K))
        p = classify(np.ones(5), enc)
        assert p.shape == (K,) and abs(p.sum() - 1) < 1e-12


# -- initial state ----------------------------------------------------------

def test_init_hidden():
    assert not init_hidden(4, 0.0, np.random.default_rng(0)).any()
    x = init_hidden(100_000, 1e-4, np.random.default_rng(0))
    assert 0.97e-4 <= x.std() <= 1.03e-4
    a = init_hidden(5, 1e-4, np.random.default_rng(9))
    b = init_hidden(5, 1e-4, np.random.default_rng(9))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        init_hidden(3, -1.0, np.random.default_rng(0))


# -- input augmentation -----------------------------------------------------

def test_augment_none_is_identity(rng):
    s = rand_series(rng, [1, 4])
    assert augment_inputs(s, "none") is s


def test_augment_delta_t(rng):
    s = rand_series(rng, [2, 3, 7])
    a = augment_inputs(s, "delta_t")
    assert a.observations[:, -1].tolist() == [0.0, 1.0, 4.0]
    assert np.array_equal(a.observations[:, :-1], s.observations)


def test_augment_pe_phase(rng):
    s = TimeSeries("z", [5, 9], np.zeros((2, 6)), 0, 9)
    a = augment_inputs(s, "pe", tau=1000.0)
    assert a.observations[0].tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
    i = np.arange(6)
    np.testing.assert_allclose(a.observations[1], np.sin(4 / 1000.0 ** (2 * i / 6) + np.pi / 2 * (i % 2)))
    assert positional_encoding([0], 54).shape == (1, 54)
    with pytest.raises(ConfigError):
        augment_inputs(s, "fourier")


# -- encoder ----------------------------------------------------------------

def test_encode_single_observation_no_solves(rng):
    enc = SequenceEncoder(small_cfg())
    rec = []
    encode(rand_series(rng, [0], horizon=0), enc, record=rec)
    assert [e[0] for e in rec] == ["update"]


def test_encode_event_trace(rng):
    enc = SequenceEncoder(small_cfg())
    rec = []
    encode(rand_series(rng, [0, 2, 5], horizon=8), enc, record=rec)
    assert [(e[0],) + tuple(e[1:4]) if e[0] == "solve" else (e[0], e[1]) for e in rec] == [
        ("update", 0), ("solve", 0, 2, 2), ("update", 2), ("solve", 2, 5, 3), ("update", 5), ("solve", 5, 8, 3)]


def test_encode_errors(rng):
    enc = SequenceEncoder(small_cfg())
    with pytest.raises(EmptyInputError):
        encode(TimeSeries("e", [], np.zeros((0, 2)), 0, 3), enc)
    with pytest.raises(ValidationError):
        encode(rand_series(rng, [0, 4]), enc, horizon=2)
    with pytest.raises(DimensionError):
        encode(rand_series(rng, [0, 4], d=3), enc)


@pytest.mark.parametrize("cell", ["tanh", "lstm", "gru"])
def test_zero_dynamics_matches_baseline(cell, rng):
    ode = SequenceEncoder(small_cfg(cell=cell))
    base = SequenceEncoder(small_cfg(cell=cell, ode_enabled=False))
    ode.zero_dynamics()
    for _ in range(5):
        ts = sorted(rng.choice(15, size=rng.integers(1, 8), replace=False).tolist())
        s = rand_series(rng, ts, horizon=20)
        assert np.array_equal(encode(s, ode), encode(s, base))


def test_horizon_dependence(rng):
    s = rand_series(rng, [0, 3, 4], horizon=10)
    base = SequenceEncoder(small_cfg(ode_enabled=False))
    assert np.array_equal(encode(s, base, horizon=4), encode(s, base, horizon=12))
    ode = SequenceEncoder(small_cfg())
    assert not np.array_equal(encode(s, ode, horizon=4), encode(s, ode, horizon=12))


def test_baseline_state_changes_only_at_observations(rng):
    enc = SequenceEncoder(small_cfg(ode_enabled=False))
    rec = []
    encode(rand_series(rng, [1, 6, 7], horizon=12), enc, record=rec)
    assert [e[0] for e in rec] == ["update"] * 3


def test_reencoding_is_bit_identical(rng):
    s = rand_series(rng, [0, 2, 9], horizon=11)
    a = encode(s, SequenceEncoder(small_cfg(seed=4)))
    b = encode(s, SequenceEncoder(small_cfg(seed=4)))
    assert np.array_equal(a, b)


def test_mean_extrapolation_for_baselines(rng):
    enc = SequenceEncoder(small_cfg(ode_enabled=False, extrapolation="mean"))
    enc.input_mean = np.array([0.5, -0.5])
    s = rand_series(rng, [0, 2], horizon=5)
    rec = []
    encode(s, enc, record=rec)
    assert [e[1] for e in rec] == [0, 2, 3, 4, 5]


# -- classifier -------------------------------------------------------------

def test_zero_classifier_is_uniform(rng):
    enc = SequenceEncoder(small_cfg(num_classes=4))
    enc.params["clf.W"].fill(0.0)
    np.testing.assert_allclose(classify(rng.standard_normal(5), enc), 0.25)
    label, _ = predict(rand_series(rng, [0, 1]), enc)
    assert label == 0


@given(st.integers(0, 2**31), st.floats(-100, 100))
def test_classify_argmax_shift_invariant(seed, c):
    r = np.random.default_rng(seed)
    enc = SequenceEncoder(small_cfg())
    h = r.standard_normal(5)
    p = classify(h, enc)
    assert abs(p.sum() - 1) < 1e-12
    enc.params["clf.b"][...] += c
    assert np.argmax(classify(h, enc)) == np.argmax(p)


def test_predict_argmax():
    enc = SequenceEncoder(small_cfg())
    enc.params["clf.W"].fill(0.0)
    enc.params["clf.b"][...] = np.log([0.1, 0.7, 0.2])
    label, probs = predict(TimeSeries("p", [0], np.zeros((1, 2)), 0, 0), enc)
    assert label == 1
    np.testing.assert_allclose(probs, [0.1, 0.7, 0.2])


# -- batched path -----------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(), dict(cell="lstm"), dict(cell="tanh", time_features="delta_t"),
                                dict(ode_enabled=False, time_features="pe"),
                                dict(solve=SolveConfig(3, "adjoint"))])
def test_batch_path_matches_reference(kw, rng):
    enc = SequenceEncoder(small_cfg(**kw))
    series = [rand_series(rng, sorted(rng.choice(12, size=rng.integers(1, 6), replace=False).tolist()),
                          horizon=int(rng.integers(11, 14))) for _ in range(6)]
    ref = np.array([logits_from_hidden(encode(s, enc), enc) for s in series])
    fwd = forward_batch(enc, make_batch(series, enc))
    np.testing.assert_allclose(fwd.logits, ref, rtol=0, atol=1e-12)


def test_train_mode_updates_per_step_statistics(rng):
    enc = SequenceEncoder(small_cfg())
    series = [rand_series(rng, [0, 3, 5], horizon=6) for _ in range(4)]
    forward_batch(enc, make_batch(series, enc), train=True, rng=rng)
    assert len(enc.bn_upd.slots) == 6
    assert enc.bn_upd.slots[1].running_mean.tolist() == [0.0] * 5  # no observations at t=1
    assert enc.bn_upd.slots[3].running_mean.any()


def test_checkpoint_round_trip(tmp_path, rng):
    enc = SequenceEncoder(small_cfg(cell="lstm"))
    series = [rand_series(rng, [0, 2, 4], horizon=6) for _ in range(5)]
    forward_batch(enc, make_batch(series, enc), train=True, rng=rng)
    for n in enc.params:
        enc.params[n][...] += rng.standard_normal(enc.params[n].shape) / 3
    enc.input_mean = rng.standard_normal(2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(enc, path)
    back = load_checkpoint(path)
    for n in enc.params:
        assert np.array_equal(back.params[n], enc.params[n])
    assert checkpoint_dict(back) == checkpoint_dict(enc)
    assert np.array_equal(predict_batch(back, series), predict_batch(enc, series))
    save_checkpoint(back, tmp_path / "m2.ckpt")
    assert (tmp_path / "m2.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_validation():
    d = checkpoint_dict(SequenceEncoder(small_cfg()))
    with pytest.raises(ValidationError):
        encoder_from_dict({**d, "format": "other"})
    with pytest.raises(ValidationError):
        encoder_from_dict({**d, "version": 99})
    bad = dict(d, params={k: v for k, v in d["params"].items() if k != "clf.b"})
    with pytest.raises(ValidationError):
        encoder_from_dict(bad)


def test_trained_toy_model_recognizes_clean_template():
    from irregts.data import default_templates
    from irregts.train import TrainConfig, fit

    spec = SynthSpec(num_classes=3, feature_dim=2, length=12, missing_rate=0.3, noise_std=0.3, n_series=300, seed=4)
    ds = generate(spec)
    tr, va = ds.with_series(ds.series[:240]), ds.with_series(ds.series[240:])
    cfg = ModelConfig(cell="gru", hidden_dim=16, f_theta_units=16, num_classes=3, feature_dim=2, seed=0)
    enc, _ = fit(tr, va, cfg, TrainConfig(lr0=0.01, epochs=25, batch_size=60, seed=0))
    tpl = default_templates(spec)[2]
    clean = TimeSeries("c", list(range(12)), tpl.curve(np.arange(12)), 2, 11)
    assert predict(clean, enc)[0] == 2
