import re

import numpy as np
import pytest

from irregts.errors import EmptyInputError
from irregts.plotting import confusion_heatmap, sweep_chart, write_svg

ROWS = [
    {"model": "ode-gru", "condition": "1.0", "metric": "accuracy", "mean": 0.9, "std": 0.01},
    {"model": "ode-gru", "condition": "0.25", "metric": "accuracy", "mean": 0.6, "std": 0.02},
    {"model": "gru-dt", "condition": "1.0", "metric": "accuracy", "mean": 0.8, "std": 0.03},
    {"model": "gru-dt", "condition": "0.25", "metric": "accuracy", "mean": 0.5, "std": 0.0},
    {"model": "ode-gru - gru-dt", "condition": "1.0", "metric": "accuracy", "mean": 0.1, "std": 0.0},
    {"model": "ode-gru", "condition": "1.0", "metric": "macro_f1", "mean": 0.88, "std": 0.0},
]


def test_sweep_chart_is_deterministic_svg():
    a, b = sweep_chart(ROWS, title="sparsity"), sweep_chart(ROWS, title="sparsity")
    assert a == b
    assert a.lstrip().startswith("<?xml") and "<svg" in a
    assert "Date" not in a and "dc:date" not in a


def test_sweep_chart_labels_verbatim():
    svg = sweep_chart(ROWS)
    for label in ("1.0", "0.25", "accuracy", "ode-gru", "gru-dt"):
        assert f">{label}<" in svg
    assert ">ode-gru - gru-dt<" not in svg
    assert ">ode-gru - gru-dt<" in sweep_chart(ROWS, include_differences=True)
    assert ">macro_f1<" in sweep_chart(ROWS, metric="macro_f1")


def test_sweep_chart_does_not_touch_inputs():
    rows = [dict(r) for r in ROWS]
    sweep_chart(rows)
    assert rows == ROWS


def test_sweep_chart_missing_metric():
    with pytest.raises(EmptyInputError):
        sweep_chart(ROWS, metric="recall")


def test_confusion_heatmap(tmp_path):
    counts = np.array([[3, 1], [0, 4]])
    svg = confusion_heatmap(counts)
    assert svg == confusion_heatmap(counts)
    assert ">0.75<" in svg and ">predicted<" in svg and ">true<" in svg
    raw = confusion_heatmap(counts, normalize=False, class_names=["wheat", "corn"])
    assert ">wheat<" in raw and re.search(r">4<", raw)
    # a class that never occurs must not produce NaN cells
    assert "nan" not in confusion_heatmap(np.array([[0, 0], [1, 1]])).lower()
    write_svg(tmp_path / "c.svg", svg)
    assert (tmp_path / "c.svg").read_text() == svg
