import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from toim import SynthConfig, TOIMEmbedder, gen_dataset


@pytest.fixture(scope="module")
def data():
    return gen_dataset(SynthConfig(num_identities=12, num_cameras=3, seed=3))


def small(**kw):
    base = dict(dim=8, hidden_dim=16, epochs=2, anchors_per_batch=6)
    base.update(kw)
    return TOIMEmbedder(**base)


def test_fit_transform_shapes(data):
    est = small().fit(data.train.X, data.train.identities, cameras=data.train.cameras)
    assert est.transform(data.query.X).shape == (len(data.query), 8)
    assert len(est.loss_curve_) == 2
    report = est.score(data.query, data.gallery, repetitions=5)
    assert 0 <= report.map <= 1


def test_params_and_clone():
    est = small(gamma=0.7, loss="oim")
    params = est.get_params()
    assert params["gamma"] == 0.7 and params["loss"] == "oim"
    twin = clone(est)
    assert twin.get_params() == params
    assert not hasattr(twin, "state_")


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().transform(np.zeros((2, 3)))


def test_feature_count_checked(data):
    est = small(epochs=1).fit(data.train.X, data.train.identities)
    with pytest.raises(ValueError):
        est.transform(data.query.X[:, :5])


def test_rejects_nan(data):
    X = data.train.X.copy()
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        small().fit(X, data.train.identities)


@pytest.mark.parametrize("loss", ["toim", "triplet", "oim", "softmax", "combined"])
def test_every_loss_fits(data, loss):
    est = small(loss=loss, epochs=1).fit(data.train.X, data.train.identities,
                                         cameras=data.train.cameras)
    assert np.all(np.isfinite(est.transform(data.query.X)))


def test_save_load_round_trip(data, tmp_path):
    est = small().fit(data.train.X, data.train.identities, cameras=data.train.cameras)
    est.save(tmp_path / "m.npz")
    back = TOIMEmbedder.load(tmp_path / "m.npz")
    assert back.get_params() == est.get_params()
    np.testing.assert_array_equal(back.transform(data.query.X), est.transform(data.query.X))


def test_doc_example():
    import doctest

    import toim.estimator
    result = doctest.testmod(toim.estimator)
    assert result.attempted > 0 and result.failed == 0
