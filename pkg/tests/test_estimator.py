import numpy as np
import pytest
from sklearn.base import clone
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline

from xraynet.estimator import (
    ContrastFilter,
    LetterboxTransformer,
    MobileNetClassifier,
    StratifiedDealKFold,
    check_images,
)
from xraynet.model import build_model, tiny_config
from xraynet.synthetic import make_pattern_arrays
from xraynet.weights import save_weights

SMALL = dict(
    block_specs=((1, 8, 1, 1), (6, 16, 2, 2)),
    head_units=16,
    stem_channels=8,
    last_channels=32,
    epochs=2,
    batch_size=14,
    augment=False,
)


@pytest.fixture(scope="module")
def patterns():
    imgs, labels = make_pattern_arrays(4, 16, seed=1)
    return imgs, np.array(["Covid19", "Edema", "Effusion", "Copd", "Fibrosis", "Pneumonia", "Normal"])[labels]


def test_letterbox_transformer(patterns):
    X = LetterboxTransformer(size=(16, 16)).fit_transform(patterns[0])
    assert X.shape == (28, 1, 16, 16) and X.dtype == np.float32
    assert X.max() <= 1.0


def test_contrast_filter():
    flat = np.full((10, 10), 7, np.uint8)
    ramp = np.tile(np.arange(0, 250, 25, dtype=np.uint8), (10, 1))
    assert ContrastFilter().mask([flat, ramp]).tolist() == [False, True]


def test_classifier_fit_predict(patterns):
    X = LetterboxTransformer(size=(16, 16)).fit_transform(patterns[0])
    clf = MobileNetClassifier(**SMALL).fit(X, patterns[1])
    assert len(clf.loss_curve_) == 2
    assert set(clf.classes_) == set(patterns[1])
    proba = clf.predict_proba(X)
    assert proba.shape == (28, 7)
    np.testing.assert_allclose(proba.sum(axis=1), 1, rtol=1e-5)
    assert set(clf.predict(X)) <= set(clf.classes_)


def test_get_params_and_clone():
    clf = MobileNetClassifier(**SMALL)
    params = clf.get_params()
    assert params["head_units"] == 16 and params["strategy"] == "scratch"
    other = clone(clf).set_params(learning_rate=0.1)
    assert other.learning_rate == 0.1 and clf.learning_rate == 1e-3


def test_pipeline_cross_val_score(patterns):
    pipe = make_pipeline(LetterboxTransformer(size=(16, 16)), MobileNetClassifier(**SMALL))
    scores = cross_val_score(pipe, patterns[0], patterns[1], cv=StratifiedDealKFold(2, random_state=0))
    assert scores.shape == (2,)
    assert np.all((0 <= scores) & (scores <= 1))


def test_off_the_shelf_needs_weights(patterns, tmp_path):
    X = LetterboxTransformer(size=(16, 16)).fit_transform(patterns[0])
    with pytest.raises(FileNotFoundError):
        MobileNetClassifier(strategy="offtheshelf", **SMALL).fit(X, patterns[1])
    path = tmp_path / "pre.snwt"
    cfg = tiny_config(input_size=(16, 16), head_units=16, stem_channels=8, last_channels=32)
    save_weights(build_model(cfg, 0), path)
    clf = MobileNetClassifier(strategy="finetune:1", pretrained_weights=str(path), **SMALL).fit(X, patterns[1])
    assert clf.model_.trainable("blocks.3.project.weight")
    assert not clf.model_.trainable("blocks.2.project.weight")


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        MobileNetClassifier(**SMALL).fit(np.zeros((4, 1, 16, 16)), [0, 0, 0, 0])
    with pytest.raises(ValueError):
        MobileNetClassifier(**SMALL).fit(np.zeros((4, 1, 16, 16)), [0, 1, 0])
    with pytest.raises(ValueError):
        check_images(np.zeros((4, 16)))


def test_splitter_stratifies():
    y = np.repeat(["a", "b", "c"], [10, 20, 30])
    splitter = StratifiedDealKFold(5, random_state=1)
    tests = [test for _, test in splitter.split(np.zeros(60), y)]
    assert splitter.get_n_splits() == 5
    assert sorted(np.concatenate(tests).tolist()) == list(range(60))
    for test in tests:
        assert sorted(np.unique(y[test], return_counts=True)[1].tolist()) == [2, 4, 6]
