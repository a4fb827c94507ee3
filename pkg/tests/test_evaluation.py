import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chexfusion.data import PATHOLOGIES
from chexfusion.errors import UndefinedAUROCError
from chexfusion.evaluation import BASELINE_TABLE, CSV_HEADER, auroc, compare_baseline, evaluate_scores, render_report


def pair_oracle(scores, labels):
    """Fraction of positive/negative pairs ranked correctly, ties count 1/2."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


scored = st.integers(2, 80).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 6).map(float), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n).filter(lambda ys: 0 < sum(ys) < len(ys)),
    )
)


@given(scored)
def test_matches_pair_counting(data):
    scores, labels = data
    assert auroc(scores, labels) == pytest.approx(pair_oracle(scores, labels), abs=1e-12)


@given(scored)
def test_invariant_under_monotone_transform(data):
    scores, labels = data
    s = np.array(scores)
    assert auroc(np.exp(s / 3) * 5 - 1, labels) == pytest.approx(auroc(s, labels), abs=1e-12)


@given(scored)
def test_negating_scores_complements(data):
    scores, labels = data
    s = np.array(scores)
    assert auroc(-s, labels) == pytest.approx(1 - auroc(s, labels), abs=1e-12)
    assert auroc(s, ~np.array(labels)) == pytest.approx(1 - auroc(s, labels), abs=1e-12)


def test_known_values():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([1, 2, 3], [0, 1, 1]) == 1.0
    assert auroc([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5


def test_single_class_is_undefined():
    with pytest.raises(UndefinedAUROCError):
        auroc([0.1, 0.2], [1, 1])


def test_evaluate_flags_undefined_and_excludes_from_mean():
    rng = np.random.default_rng(0)
    labels = np.zeros((20, 14))
    labels[:10, 0] = 1
    labels[::2, 3] = 1
    probs = rng.random((20, 14))
    probs[:10, 0] += 1
    rep = evaluate_scores(probs, labels)
    assert rep.auroc[0] == 1.0
    assert len(rep.undefined) == 12 and "Atelectasis" not in rep.undefined
    assert rep.mean == pytest.approx((1.0 + rep.auroc[3]) / 2)


def test_baseline_table_order_and_hernia():
    assert [r.pathology for r in BASELINE_TABLE] == list(PATHOLOGIES)
    assert BASELINE_TABLE[7][1:] == (0.9164, 0.9733)


def _report_with(values):
    labels = np.tile([[0.0] * 14, [1.0] * 14], (5, 1))
    rep = evaluate_scores(np.random.default_rng(0).random((10, 14)), labels)
    rep.auroc = list(values)
    return rep


def test_render_text_has_fifteen_rows_and_na():
    vals = [0.8] * 14
    vals[7] = None
    text = render_report(_report_with(vals))
    lines = text.strip().splitlines()
    assert len(lines) == 16  # header + 14 + mean
    assert "n/a" in lines[8] and lines[-1].startswith("mean")


def test_render_csv():
    out = render_report(_report_with([0.8328] + [0.5] * 13), fmt="csv")
    rows = list(csv.reader(io.StringIO(out)))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 16
    assert rows[1] == ["Atelectasis", "0.8328", "0.8094", "0.8328", "+0.0234", "+0.0000"]
    assert rows[-1][0] == "mean"


def test_compare_deltas():
    rows = compare_baseline(_report_with([0.9] * 14))
    for row, base in zip(rows, BASELINE_TABLE):
        assert row.delta_chexnet == 0.9 - base.chexnet_auroc
        assert row.delta_ourmodel == 0.9 - base.ourmodel_auroc
