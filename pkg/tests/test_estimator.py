import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from waspnet.estimator import SegmentationNetwork
from waspnet.exceptions import ShapeError
from waspnet.synthetic import make_synthetic


@pytest.fixture(scope="module")
def data():
    return make_synthetic(8, size=32, num_classes=3, seed=0)


def _small(**kw):
    args = dict(backbone="toy-resnet(1,8)", num_classes=3, max_iter=6, batch_size=4, eval_every=3,
                base_lr=0.05)
    args.update(kw)
    return SegmentationNetwork(**args)


class TestSklearnContract:
    def test_get_params_and_clone(self):
        est = _small(head="aspp", rates=(1, 2, 3, 4))
        params = est.get_params()
        assert params["head"] == "aspp" and params["rates"] == (1, 2, 3, 4)
        assert clone(est).get_params() == params

    def test_set_params(self):
        est = _small().set_params(head="cascade")
        assert est.head == "cascade"

    def test_not_fitted(self, data):
        with pytest.raises(NotFittedError):
            _small().predict(data.images)


class TestFitPredict:
    def test_fit_predict_score(self, data):
        est = _small().fit(*data.as_pair())
        pred = est.predict(data.images)
        assert pred.shape == data.labels.shape and pred.dtype == np.uint8
        proba = est.predict_proba(data.images[:2])
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-5)
        assert 0 <= est.score(*data.as_pair()) <= 1
        assert est.n_parameters_ == sum(v.size for v in est.graph_.params.values())
        assert len(est.trace_) == 6

    def test_refit_is_deterministic(self, data):
        a = _small().fit(*data.as_pair())
        b = clone(a).fit(*data.as_pair())
        assert a.checksum_ == b.checksum_

    def test_label_validation(self, data):
        with pytest.raises(ShapeError):
            _small(num_classes=2).fit(*data.as_pair())

    def test_receptive_field(self):
        assert _small(rates=(6, 12, 18, 24)).receptive_field().global_context
