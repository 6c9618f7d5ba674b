from dataclasses import replace

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ntsnet import NTSClassifier
from ntsnet.config import CONFIG_DIR, load_config
from ntsnet.synthdata import generate_dataset

TINY = load_config(CONFIG_DIR / "tiny.toml")


def _small(**kw):
    t = TINY.train
    params = dict(
        n_regions=t.n_regions,
        n_scrutinized=t.n_scrutinized,
        anchors=t.anchors,
        region_side=t.region_side,
        channels=t.channels,
        navigator_channels=t.navigator_channels,
        teacher_hidden=t.teacher_hidden,
        epochs=1,
        batch_size=3,
        random_state=0,
    )
    params.update(kw)
    return NTSClassifier(**params)


@pytest.fixture(scope="module")
def data():
    train, test = generate_dataset(replace(TINY.synth, n_train=6, n_test=3))
    X = np.stack([s.image[:, :, 0] for s in train])
    labels = np.array(["cat", "dog"])[[s.label for s in train]]
    return X, labels, np.stack([s.image[:, :, 0] for s in test])


def test_fit_predict(data):
    X, y, Xt = data
    clf = _small().fit(X, y)
    assert set(clf.classes_) == {"cat", "dog"}
    proba = clf.predict_proba(Xt)
    assert proba.shape == (3, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    assert set(clf.predict(Xt)) <= {"cat", "dog"}
    assert len(clf.history_) == 1


def test_deterministic(data):
    X, y, Xt = data
    a = _small().fit(X, y).predict_proba(Xt)
    b = _small().fit(X, y).predict_proba(Xt)
    np.testing.assert_array_equal(a, b)


def test_propose(data):
    X, y, Xt = data
    clf = _small().fit(X, y)
    props = clf.propose(Xt)
    assert len(props) == 3
    for row in props:
        assert 1 <= len(row) <= clf.n_regions
        inf = [p.informativeness for p in row]
        assert inf == sorted(inf, reverse=True)
        assert all(0 <= p.confidence <= 1 for p in row)


def test_params_round_trip():
    clf = NTSClassifier(n_scrutinized=4, lam=0.5)
    assert clf.get_params()["n_scrutinized"] == 4
    assert clone(clf).get_params() == clf.get_params()


def test_not_fitted():
    with pytest.raises(NotFittedError):
        NTSClassifier().predict(np.zeros((1, 64, 64)))


def test_wrong_image_side(data):
    _, y, _ = data
    with pytest.raises(ValueError):
        _small().fit(np.zeros((6, 8, 8)), y)


def test_single_class(data):
    X, _, _ = data
    with pytest.raises(ValueError):
        _small().fit(X, np.zeros(len(X)))
