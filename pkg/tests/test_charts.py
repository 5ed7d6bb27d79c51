"""Chart emission: method selection, captions, deterministic SVG bytes."""

import pytest

from privfl.charts import chart_accuracy, chart_privacy
from privfl.metrics import MetricsRecord, summarize


def rows():
    records = []
    for method, eps_step in (("c", None), ("f", None), ("dopamine", 0.7)):
        for seed in (0, 1):
            for rnd in (1, 2, 3):
                records.append(MetricsRecord(
                    method=method, seed=seed, round_index=rnd,
                    train_loss=1.0 / rnd, test_accuracy=0.5 + 0.1 * rnd,
                    epsilon_hat=None if eps_step is None else eps_step * rnd,
                    batch_sizes=(10,),
                ))
    return summarize(records)


def test_accuracy_chart_lists_every_method(tmp_path):
    path = tmp_path / "acc.svg"
    chart_accuracy(rows(), path, delta=1e-4)
    text = path.read_text()
    for needle in (">c<", ">f<", ">dopamine<"):
        assert needle in text
    assert "delta = 0.0001" in text


def test_privacy_chart_excludes_methods_without_a_spend(tmp_path):
    path = tmp_path / "eps.svg"
    chart_privacy(rows(), path, delta=1e-4)
    text = path.read_text()
    assert ">dopamine<" in text
    assert ">c<" not in text and ">f<" not in text
    assert "delta = 0.0001" in text


def test_privacy_chart_requires_a_dp_method(tmp_path):
    only_plain = [r for r in rows() if r.method in ("c", "f")]
    with pytest.raises(ValueError, match="privacy spend"):
        chart_privacy(only_plain, tmp_path / "eps.svg")


def test_accuracy_chart_rejects_empty_rows(tmp_path):
    with pytest.raises(ValueError, match="no summary rows"):
        chart_accuracy([], tmp_path / "acc.svg")


def test_chart_bytes_are_deterministic(tmp_path):
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    chart_accuracy(rows(), a, delta=1e-4)
    chart_accuracy(rows(), b, delta=1e-4)
    assert a.read_bytes() == b.read_bytes()
