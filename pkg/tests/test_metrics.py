import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sada.metrics import confusion_matrix, f1_scores


def test_diagonal_is_perfect():
    micro, macro, per = f1_scores(np.diag([3, 4, 5]))
    assert micro == macro == 1.0
    assert per.tolist() == [1.0, 1.0, 1.0]


def test_two_class_hand_count():
    micro, macro, per = f1_scores(np.array([[5, 5], [0, 10]]))
    assert per[0] == pytest.approx(2 / 3, abs=1e-9)
    assert per[1] == pytest.approx(0.8, abs=1e-9)
    assert macro == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-9)
    assert micro == pytest.approx(0.75, abs=1e-9)


def test_absent_class_counts_as_zero():
    # class 2 never appears nor is predicted: 0/0 -> 0 and it still enters the mean
    micro, macro, per = f1_scores(np.array([[2, 0, 0], [0, 2, 0], [0, 0, 0]]))
    assert per.tolist() == [1.0, 1.0, 0.0]
    assert macro == pytest.approx(2 / 3)
    assert micro == 1.0


def test_errors():
    with pytest.raises(ValueError):
        f1_scores(np.zeros((2, 2), int))
    with pytest.raises(ValueError):
        f1_scores(np.array([[1, -1], [0, 1]]))
    with pytest.raises(ValueError):
        f1_scores(np.ones((2, 3), int))
    with pytest.raises(ValueError):
        f1_scores(np.array([[0.5, 0], [0, 1]]))
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0])
    with pytest.raises(ValueError):
        confusion_matrix([0, -1], [0, 0])


def test_confusion_matrix_orientation():
    cm = confusion_matrix([0, 0, 1], [1, 0, 1], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [0, 0, 0]]


@given(arrays(np.int64, st.tuples(st.integers(1, 6)).map(lambda t: (t[0], t[0])),
              elements=st.integers(0, 50)))
def test_micro_equals_accuracy_and_macro_is_mean(cm):
    if cm.sum() == 0:
        cm[0, 0] = 1
    micro, macro, per = f1_scores(cm)
    assert micro == pytest.approx(np.trace(cm) / cm.sum(), abs=1e-12)
    assert np.all((per >= 0) & (per <= 1))
    assert macro == pytest.approx(per.mean(), abs=1e-15)


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
def test_micro_from_labels_is_accuracy(pairs):
    y, p = map(np.asarray, zip(*pairs))
    micro, _, _ = f1_scores(confusion_matrix(y, p, 5))
    assert micro == pytest.approx(np.mean(y == p))
