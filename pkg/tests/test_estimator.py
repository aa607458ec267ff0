import numpy as np
import pytest
from sklearn.base import clone

from fmdacl.data import gen_synthetic, load_manifest, read_image, resize_image
from fmdacl.estimator import DualAgreementCoTrainer


def small_estimator(**kw):
    base = dict(epochs=2, seed=5, batch_labeled=1, batch_unlabeled=2,
                f1_width=8, f1_depth=2, f1_patch=2,
                f2_width=8, f2_depth=2, target_size=16)
    base.update(kw)
    return DualAgreementCoTrainer(**base)


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("est") / "ds"
    gen_synthetic(str(root), n=12, h=16, w=16, seed=2)
    return str(root)


@pytest.fixture(scope="module")
def fitted(ds, tmp_path_factory):
    run = tmp_path_factory.mktemp("est") / "run"
    return small_estimator(run_dir=str(run)).fit(ds)


# ------------------------------------------------------------- params API

def test_get_params_round_trip():
    est = small_estimator()
    params = est.get_params()
    assert params["epochs"] == 2 and params["f1_width"] == 8
    assert params["lambda_cps"] == 5.0  # untouched default
    est.set_params(epochs=7, lambda_cps=0.5)
    assert est.epochs == 7 and est.lambda_cps == 0.5
    with pytest.raises(ValueError):
        est.set_params(warp_speed=9)


def test_clone_preserves_params_and_drops_state(fitted):
    fresh = clone(fitted)
    assert fresh.get_params() == fitted.get_params()
    assert not hasattr(fresh, "trainer_")
    assert hasattr(fitted, "trainer_")


def test_defaults_are_paper_regimen():
    est = DualAgreementCoTrainer()
    p = est.get_params()
    assert p["epochs"] == 300
    assert p["lr_backbone_f1"] == 1e-4 and p["lr_heads_f1"] == 1e-3
    assert p["lr_f2"] == 1e-3 and p["wd_f1"] == 0.01 and p["wd_f2"] == 1e-4
    assert p["ema_decay"] == 0.99
    assert p["batch_labeled"] == 1 and p["batch_unlabeled"] == 4
    assert p["lambda_cps"] == 5.0 and p["tau_ict"] == 1.0 and p["beta_dac"] == 5.0
    assert p["mixup_sigma"] == 0.5
    assert p["c_seg"] == 15 and p["k_cls"] == 7
    assert p["target_size"] == 256


# ------------------------------------------------------------- fit surface

def test_fit_sets_state_attributes(fitted):
    assert fitted.best_checkpoint_.endswith("best.ckpt")
    assert 0.0 <= fitted.best_score_ <= 100.0
    assert len(fitted.history_) == 2
    assert fitted.run_dir_ == fitted.run_dir


def test_unfitted_predict_raises():
    est = small_estimator()
    with pytest.raises(RuntimeError, match="not fitted"):
        est.predict([np.zeros((16, 16), dtype=np.float32)])
    with pytest.raises(RuntimeError, match="not fitted"):
        est.evaluate(".", split="test")


def test_predict_shapes_and_ranges(fitted, ds):
    recs = [r for r in load_manifest(ds) if r.split == "test"]
    imgs = [resize_image(read_image(r.image_path), (16, 16)) for r in recs]
    masks, bits = fitted.predict(imgs)
    assert masks.shape == (len(imgs), 16, 16)
    assert bits.shape == (len(imgs), 7)
    assert masks.max() < 15 and masks.min() >= 0
    assert set(np.unique(bits)) <= {0, 1}


def test_predict_deterministic(fitted):
    img = np.full((16, 16), 0.5, dtype=np.float32)
    m1, b1 = fitted.predict([img])
    m2, b2 = fitted.predict([img])
    assert np.array_equal(m1, m2) and np.array_equal(b1, b2)


# ------------------------------------------------------------- evaluation

def test_evaluate_returns_bounded_report(fitted, ds):
    rep = fitted.evaluate(ds, split="val")
    for value in (rep.dsc, rep.nsd, rep.f1, rep.score):
        assert 0.0 <= value <= 100.0
    assert rep.n_images == 1  # n=12 -> one val record


def test_evaluate_unknown_split_errors(fitted, ds):
    with pytest.raises(ValueError, match="no records with split"):
        fitted.evaluate(ds, split="train")


def test_score_is_test_split_overall_score(fitted, ds):
    assert fitted.score(ds) == fitted.evaluate(ds, split="test").score
