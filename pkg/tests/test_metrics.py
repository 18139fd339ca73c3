import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import f1_score, matthews_corrcoef

from mcqforecast.exceptions import ContractError
from mcqforecast.metrics import (RESULT_COLUMNS, ConfusionCounts, accuracy, dummy_baseline,
                                 evaluate_predictions, f1, f1_macro, majority_label, mcc,
                                 read_results_csv, sort_results, write_results_csv)

mpmath.mp.dps = 50


def oracle(c):
    tp, fp, tn, fn = (mpmath.mpf(v) for v in (c.tp, c.fp, c.tn, c.fn))
    d = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    m = (tp * tn - fp * fn) / mpmath.sqrt(d) if d else mpmath.mpf(0)

    def one(a, b, e):
        return 2 * a / (2 * a + b + e) if 2 * a + b + e else mpmath.mpf(0)
    f1c1, f1c0 = one(tp, fp, fn), one(tn, fn, fp)
    return m, f1c1, f1c0, (f1c0 + f1c1) / 2, (tp + tn) / (tp + fp + tn + fn)


def random_tables(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        scale = 10 ** rng.integers(0, 7)
        cells = rng.integers(0, scale + 1, size=4)
        cells[rng.random(4) < 0.1] = 0
        if cells.sum() == 0:
            cells[0] = 1
        out.append(ConfusionCounts(*map(int, cells)))
    return out


class TestExamples:
    def test_perfect(self):
        c = ConfusionCounts(tp=10, fp=0, tn=10, fn=0)
        assert mcc(c) == 1.0 and f1_macro(c) == 1.0 and accuracy(c) == 1.0

    def test_all_majority(self):
        assert mcc(ConfusionCounts(tp=0, fp=0, tn=7, fn=3)) == 0.0

    def test_rational_oracle_example(self):
        c = ConfusionCounts(tp=6, fp=2, tn=5, fn=3)
        # (30 - 6) / sqrt(8 * 9 * 7 * 8) = 24 / sqrt(4032)
        assert mcc(c) == pytest.approx(float(mpmath.mpf(24) / mpmath.sqrt(4032)), abs=1e-15)

    def test_positive_f1_zero_without_tp(self):
        assert f1(ConfusionCounts(tp=0, fp=3, tn=2, fn=4)) == 0.0

    def test_empty_table(self):
        with pytest.raises(ContractError):
            accuracy(ConfusionCounts(0, 0, 0, 0))

    def test_negative_count(self):
        with pytest.raises(ContractError):
            ConfusionCounts(tp=-1, fp=0, tn=0, fn=0)

    def test_dummy_hand_table(self):
        # 10 instances, 4 positive; majority 0 -> tn=6, fn=4
        res = dummy_baseline([1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
        assert res.mcc == 0.0 and res.accuracy == 0.6
        assert res.f1_class0 == pytest.approx(12 / 16) and res.f1_class1 == 0.0
        assert res.f1_macro == pytest.approx(0.375)

    def test_majority_tie_goes_to_zero(self):
        assert majority_label([0, 1]) == 0 and majority_label([1, 1, 0]) == 1


def test_random_tables_match_oracle():
    for c in random_tables(1000, seed=0):
        m, f1c1, f1c0, macro, acc = oracle(c)
        assert abs(mcc(c) - float(m)) <= 1e-12
        assert abs(f1(c, 1) - float(f1c1)) <= 1e-12
        assert abs(f1(c, 0) - float(f1c0)) <= 1e-12
        assert abs(f1_macro(c) - float(macro)) <= 1e-12
        assert abs(accuracy(c) - float(acc)) <= 1e-12


def test_agrees_with_sklearn():
    rng = np.random.default_rng(1)
    for _ in range(20):
        y = rng.integers(0, 2, 300)
        p = np.where(rng.random(300) < 0.7, y, 1 - y)
        c = ConfusionCounts.from_labels(y, p)
        assert mcc(c) == pytest.approx(matthews_corrcoef(y, p), abs=1e-12)
        assert f1_macro(c) == pytest.approx(f1_score(y, p, average="macro"), abs=1e-12)


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_class_swap_symmetry(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    c = ConfusionCounts(tp, fp, tn, fn)
    assert mcc(c.swapped()) == mcc(c)
    assert f1_macro(c.swapped()) == pytest.approx(f1_macro(c), abs=1e-15)
    assert -1.0 <= mcc(c) <= 1.0


def test_accuracy_exact_for_large_counts():
    c = ConfusionCounts(tp=2**52, fp=0, tn=2**52, fn=2**53)
    assert accuracy(c) == 0.5


def test_dummy_mcc_exactly_zero():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(1, 500))
        train = rng.integers(0, 2, n)
        test = (rng.random(n) < rng.random()).astype(int)
        assert dummy_baseline(test, train).mcc == 0.0


def test_results_csv_round_trip(tmp_path):
    rows = [evaluate_predictions([1, 0, 1, 0], [1, 0, 0, 0], "mcqbert", epoch=2, seed=3),
            dummy_baseline([1, 0, 0])]
    path = tmp_path / "r.csv"
    write_results_csv(sort_results(rows), path, [{"model": "cat", "epoch": "failed"}])
    text = path.read_text()
    assert text.splitlines()[0] == ",".join(RESULT_COLUMNS)
    back = read_results_csv(path)
    assert [r["model"] for r in back] == ["mcqbert", "dummy", "cat"]
    assert float(back[0]["mcc"]) == rows[0].mcc and back[2]["epoch"] == "failed"
