import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from effnetv2.data import synthetic_dataset
from effnetv2.estimator import EfficientNetV2Classifier
from effnetv2.validation import check_images, check_images_labels


@pytest.fixture(scope="module")
def blobs():
    ds = synthetic_dataset(2, 128, 16, 0, snr=4.0)
    names = np.array(["cat", "dog"])[ds.labels]
    return ds.images, names


def test_fit_predict(blobs):
    X, y = blobs
    clf = EfficientNetV2Classifier(epochs=4, batch_size=16, random_state=0).fit(X, y)
    assert set(clf.classes_) == {"cat", "dog"}
    assert clf.score(X, y) >= 0.95
    proba = clf.predict_proba(X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1, atol=1e-6)
    assert clf.predict(X[:3]).dtype == y.dtype


def test_progressive_mode(blobs):
    X, y = blobs
    clf = EfficientNetV2Classifier(epochs=2, batch_size=16, schedule_mode="progressive_adaptive", num_stages=2,
                                   size_min=8, reg_max=(0.2, 5, 0.0)).fit(X, y)
    sizes = clf.metrics_.column("image_size")
    assert sizes[0] == 8 and sizes[-1] == 16


def test_params_and_clone():
    clf = EfficientNetV2Classifier(epochs=3, random_state=4)
    params = clf.get_params()
    assert params["epochs"] == 3 and params["random_state"] == 4
    assert clone(clf).get_params() == params
    clf.set_params(batch_size=8)
    assert clf.batch_size == 8


def test_same_seed_same_predictions(blobs):
    X, y = blobs
    a = EfficientNetV2Classifier(epochs=1, batch_size=16).fit(X, y).predict_proba(X)
    b = EfficientNetV2Classifier(epochs=1, batch_size=16).fit(X, y).predict_proba(X)
    assert np.array_equal(a, b)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        EfficientNetV2Classifier().predict(np.zeros((1, 3, 16, 16), np.uint8))


class TestValidation:
    def test_accepts_uint8_and_real(self):
        assert check_images(np.zeros((2, 3, 8, 8), np.uint8)).dtype == np.uint8
        assert check_images(np.zeros((2, 3, 8, 8))).dtype == np.float32

    def test_grayscale_batch(self):
        assert check_images(np.zeros((2, 8, 8))).shape == (2, 1, 8, 8)

    @pytest.mark.parametrize("X,msg", [
        (np.zeros((2, 3, 8, 9)), "square"),
        (np.zeros((2, 3, 4, 4)), "at least"),
        (np.full((1, 3, 8, 8), 2.0), r"\[0, 1\]"),
        (np.full((1, 3, 8, 8), np.nan), "NaN"),
    ])
    def test_rejects(self, X, msg):
        with pytest.raises(ValueError, match=msg):
            check_images(X)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            check_images(np.zeros((1, 1, 8, 8)), channels=3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            check_images_labels(np.zeros((3, 3, 8, 8)), [0, 1])
