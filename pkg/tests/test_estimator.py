import numpy as np
import pytest
from sklearn.base import clone

from carnas.data import DataError, SpMotifConfig, generate_spmotif
from carnas.estimator import CarnasClassifier

TINY = dict(d0=4, d1=4, d_s=4, q_chunks=2, k_layers=2, batch_size=8, epochs=3)


@pytest.fixture(scope="module")
def graphs():
    ds = generate_spmotif(SpMotifConfig(num_graphs=48, bias=0.6, seed=0))
    return ds.graphs


def test_fit_predict_shapes(graphs):
    clf = CarnasClassifier(seed=0, **TINY)
    clf.fit(graphs)
    preds = clf.predict(graphs[:10])
    assert preds.shape == (10,)
    assert set(preds) <= set(clf.classes_)


def test_predict_proba_simplex(graphs):
    clf = CarnasClassifier(seed=0, **TINY).fit(graphs)
    probs = clf.predict_proba(graphs[:5])
    assert probs.shape == (5, len(clf.classes_))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_labels_override(graphs):
    y = [g.label for g in graphs]
    clf = CarnasClassifier(seed=0, **TINY).fit(graphs, y)
    assert sorted(clf.classes_) == sorted(set(y))


def test_unfitted_raises(graphs):
    clf = CarnasClassifier(**TINY)
    with pytest.raises(Exception):
        clf.predict(graphs[:2])


def test_clone_and_get_params(graphs):
    clf = CarnasClassifier(seed=5, **TINY)
    cloned = clone(clf)
    assert cloned.get_params() == clf.get_params()


def test_deterministic_fit(graphs):
    a = CarnasClassifier(seed=1, **TINY).fit(graphs).predict(graphs[:20])
    b = CarnasClassifier(seed=1, **TINY).fit(graphs).predict(graphs[:20])
    np.testing.assert_array_equal(a, b)


def test_rejects_non_graphs():
    with pytest.raises(DataError):
        CarnasClassifier(**TINY).fit([1, 2, 3])


def test_rejects_empty():
    with pytest.raises(DataError):
        CarnasClassifier(**TINY).fit([])
