import numpy as np
import pytest
from hypothesis import given, strategies as st

from irregts.data import SynthSpec, generate, split
from irregts.errors import ConfigError, EmptyInputError
from irregts.evaluation import (
    ConfusionMatrix,
    accuracy,
    confusion,
    macro_f1,
    per_class_f1,
    read_summary_csv,
    run_eval,
    sweep,
    truncate_dataset,
    write_report,
)
from irregts.model import ModelConfig, SequenceEncoder
from irregts.train import TrainConfig


def brute_force(preds, labels, K):
    acc = sum(p == y for p, y in zip(preds, labels)) / len(labels)
    f1s = []
    for k in range(K):
        tp = sum(p == k and y == k for p, y in zip(preds, labels))
        fp = sum(p == k and y != k for p, y in zip(preds, labels))
        fn = sum(p != k and y == k for p, y in zip(preds, labels))
        if tp + fp + fn == 0:
            continue
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return acc, sum(f1s) / len(f1s)


def test_hand_example():
    cm = ConfusionMatrix(np.array([[1, 1], [0, 2]]))
    assert accuracy(cm) == 0.75
    assert macro_f1(cm) == pytest.approx(0.733333, abs=1e-5)
    np.testing.assert_allclose(per_class_f1(cm), [2 / 3, 0.8])


def test_confusion_counts():
    cm = confusion([0, 1, 1, 2], [0, 1, 2, 2], 3)
    assert cm.counts.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]
    assert ConfusionMatrix.from_csv(cm.to_csv()).counts.tolist() == cm.counts.tolist()
    with pytest.raises(ValueError):
        confusion([0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        confusion([0], [0, 1], 3)
    with pytest.raises(EmptyInputError):
        accuracy(confusion([], [], 2))


def test_absent_class_excluded_from_macro_f1():
    cm = confusion([0, 1], [0, 1], 3)
    assert np.isnan(per_class_f1(cm)[2])
    assert macro_f1(cm) == 1.0


@given(st.integers(0, 2**31), st.integers(2, 6), st.integers(1, 60))
def test_metrics_match_brute_force(seed, K, n):
    r = np.random.default_rng(seed)
    preds, labels = r.integers(0, K, n).tolist(), r.integers(0, K, n).tolist()
    cm = confusion(preds, labels, K)
    acc, f1 = brute_force(preds, labels, K)
    assert abs(accuracy(cm) - acc) < 1e-12
    assert abs(macro_f1(cm) - f1) < 1e-12


@given(st.integers(0, 2**31))
def test_metrics_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    preds, labels = r.integers(0, 4, 30), r.integers(0, 4, 30)
    perm = r.permutation(30)
    a, b = confusion(preds, labels, 4), confusion(preds[perm], labels[perm], 4)
    assert accuracy(a) == accuracy(b) and macro_f1(a) == macro_f1(b)


def _data(seed=0, n=200):
    ds = generate(SynthSpec(num_classes=3, feature_dim=2, length=10, missing_rate=0.3, noise_std=0.3,
                            n_series=n, seed=seed))
    return split(ds, seed=0)


def _cfg():
    return ModelConfig(cell="gru", hidden_dim=6, f_theta_units=8, num_classes=3, feature_dim=2, seed=0)


def test_run_eval_constant_classifier():
    _, _, te = _data(n=600)
    enc = SequenceEncoder(_cfg())
    enc.params["clf.W"].fill(0.0)
    m = run_eval(enc, te)
    assert m["n"] == len(te)
    # uniform probabilities tie-break to class 0: accuracy is class 0's share
    assert m["accuracy"] == pytest.approx(np.mean(te.labels() == 0))
    again = run_eval(enc, te)
    assert (again["accuracy"], again["macro_f1"], again["confusion"]) == (m["accuracy"], m["macro_f1"], m["confusion"])


def test_truncate_dataset_skips_empty():
    _, _, te = _data()
    out = truncate_dataset(te, 0.1, te.nominal_length)
    assert len(out) <= len(te)
    assert all(max(s.timestamps) < 1 for s in out)
    assert len(truncate_dataset(te, 1.0, te.nominal_length)) == len(te)


def test_sweep_validation():
    data = _data()
    with pytest.raises(ConfigError):
        sweep("bogus", [("a", _cfg())], [1.0], [0], data, TrainConfig())
    with pytest.raises(ConfigError):
        sweep("early", [("a", _cfg())], [1.5], [0], data, TrainConfig())
    with pytest.raises(ConfigError):
        sweep("early", [("a", _cfg())], [1.0], [], data, TrainConfig())


@pytest.mark.parametrize("kind,grid", [("early", [1.0, 0.5]), ("sparsity", [1.0, 0.5]),
                                       ("datasize", [1.0, 0.5]), ("keepprob", [0.75, 1.0])])
def test_sweep_report_shape_and_reproducibility(kind, grid, tmp_path):
    data = _data()
    models = [("ode", _cfg()), ("rnn", ModelConfig(**{**_cfg().__dict__, "ode_enabled": False}))]
    tcfg = TrainConfig(lr0=0.01, epochs=1, batch_size=40)
    a = sweep(kind, models, grid, [0, 1], data, tcfg)
    b = sweep(kind, models, grid, [0, 1], data, tcfg)
    assert a.to_json() == b.to_json()
    assert len(a.runs) == 3 * len(grid) * 2
    for g in grid:
        for s in (0, 1):
            d = [r for r in a.runs if r["model"] == "ode - rnn" and r["condition"] == g and r["seed"] == s][0]
            x = [r for r in a.runs if r["model"] == "ode" and r["condition"] == g and r["seed"] == s][0]
            y = [r for r in a.runs if r["model"] == "rnn" and r["condition"] == g and r["seed"] == s][0]
            assert d["accuracy"] == x["accuracy"] - y["accuracy"]
    row = a.get("ode", grid[0])
    vals = [r["accuracy"] for r in a.runs if r["model"] == "ode" and r["condition"] == grid[0]]
    assert row.mean == pytest.approx(np.mean(vals)) and row.std == pytest.approx(np.std(vals))
    paths = write_report(a, tmp_path / "rep")
    back = read_summary_csv(paths["summary"])
    assert len(back) == len(a.rows)
    assert back[0]["mean"] == a.rows[0].mean


def test_sweep_jobs_matches_serial():
    data = _data()
    tcfg = TrainConfig(lr0=0.01, epochs=1, batch_size=40)
    a = sweep("keepprob", [("m", _cfg())], [0.5, 1.0], [0], data, tcfg, jobs=1)
    b = sweep("keepprob", [("m", _cfg())], [0.5, 1.0], [0], data, tcfg, jobs=2)
    assert a.to_json() == b.to_json()
