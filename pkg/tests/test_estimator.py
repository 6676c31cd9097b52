import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from partassembly.estimator import InProcessAssembler, PartAssembler
from partassembly.geometry import Pose, apply_pose

TINY = dict(d_model=32, n_heads=4, n_layers=2, noise_dim=4, n_pc=16, head_hidden=32, batch_size=4, epochs=2, n_mon=2, eval_every=1, val_k=1, k=2)


@pytest.fixture(scope="module")
def fitted(chairs16):
    return PartAssembler(**TINY).fit(chairs16[:4])


def test_params_round_trip_and_clone():
    est = PartAssembler(**TINY)
    again = clone(est)
    assert again.get_params() == est.get_params()
    est.set_params(lr=1e-3, chamfer_norm="sum")
    assert est.train_config().lr == 1e-3 and est.train_config().chamfer_norm == "sum"
    assert est.model_config().d_model == 32 and est.train_config().eval_k == 2


def test_default_chamfer_norm_is_mean():
    assert PartAssembler().train_config().chamfer_norm == "mean"
    assert InProcessAssembler().chamfer_norm == "mean"


def test_bad_params_surface_on_fit(chairs16):
    with pytest.raises(ValueError):
        PartAssembler(**{**TINY, "d_model": 30}).fit(chairs16[:1])
    with pytest.raises(ValueError, match="chamfer_norm"):
        PartAssembler(**{**TINY, "chamfer_norm": "median"}).fit(chairs16[:1])


def test_unfitted_raises(chairs16):
    with pytest.raises(NotFittedError):
        PartAssembler(**TINY).predict(chairs16[:1])
    with pytest.raises(NotFittedError):
        InProcessAssembler().predict(chairs16[:1], 0)


def test_predict_shapes_and_unit_quaternions(fitted, chairs16):
    preds = fitted.predict(chairs16[:3])
    for p, s in zip(preds, chairs16):
        assert p.shape == (s.n_parts, 7)
        np.testing.assert_allclose(np.linalg.norm(p[:, :4], axis=1), 1, atol=1e-9)
    branches = fitted.predict_branches(chairs16[:2], k=3)
    assert branches[0].shape == (3, chairs16[0].n_parts, 7)
    np.testing.assert_array_equal(branches[0][0], preds[0])


def test_transform_places_parts(fitted, chairs16):
    s = chairs16[0]
    out = fitted.transform([s])[0]
    pose = fitted.predict([s])[0]
    assert out.shape == (s.n_parts, 16, 3)
    np.testing.assert_allclose(out[1], apply_pose(Pose.from_vector(pose[1]), s.parts[1]), atol=1e-12)


def test_bare_clouds_predict_but_do_not_score(fitted, chairs16):
    clouds = [list(chairs16[0].parts)]
    pred = fitted.predict(clouds)[0]
    # noise is keyed by sample id, so bare input is compared with itself only
    assert pred.shape == (chairs16[0].n_parts, 7)
    np.testing.assert_array_equal(pred, fitted.predict(clouds)[0])
    with pytest.raises(ValueError, match="ground-truth"):
        fitted.score(clouds)
    with pytest.raises(ValueError, match="points"):
        fitted.predict([[np.zeros((5, 3))]])


def test_score_is_part_accuracy(fitted, chairs16):
    assert fitted.score(chairs16[:2]) == fitted.evaluate(chairs16[:2]).pa
    assert 0 <= fitted.score(chairs16[:2]) <= 100


def test_save_load_predicts_identically(fitted, chairs16, tmp_path):
    fitted.save(tmp_path / "m.ckpt")
    other = PartAssembler(seed=fitted.seed).load(tmp_path / "m.ckpt")
    assert other.d_model == 32
    np.testing.assert_array_equal(other.predict(chairs16[:2])[0], fitted.predict(chairs16[:2])[0])


def test_inprocess_fit_predict_score(fitted, chairs16):
    ip = InProcessAssembler(base=fitted, finetune_epochs=2, batch_size=4, n_mon=2).fit(chairs16[:4])
    out = ip.predict(chairs16[:2], [1, 2])
    assert out.shape == (2, 7)
    assert 0 <= ip.score(chairs16[:2]) <= 100
    with pytest.raises(ValueError, match="out of range"):
        ip.predict(chairs16[:1], 99)
    with pytest.raises(ValueError, match="base"):
        InProcessAssembler().fit(chairs16[:2])
    with pytest.raises(ValueError):
        InProcessAssembler(base=fitted, drop_prob=1.0).fit(chairs16[:2])
