import numpy as np
import pytest

from asdbench.dataset import SplitSpec, split, synth_dataset
from asdbench.hybrid import (
    FEATURE_WIDTH, FeatureMatrix, GBDTParams, NonFiniteFeature, SingleClass, WidthMismatch, extract_features,
    extract_manifest_features, feature_extractor, fit_gbdt, load_gbdt, predict_gbdt,
)
from asdbench.metrics import evaluate


def separable(n=80, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(size=(n, FEATURE_WIDTH)).astype(np.float32)
    x[:, 0] = y
    return x, y


def test_separable_column_is_learned():
    x, y = separable()
    model = fit_gbdt(x, y, GBDTParams(n_trees=20, seed=1))
    proba, labels = predict_gbdt(model, x)
    assert np.array_equal(labels, y)
    assert proba.dtype == np.float64 and ((proba >= 0) & (proba <= 1)).all()


def test_single_stump_has_at_most_two_outputs():
    x, y = separable(seed=2)
    model = fit_gbdt(x, y, GBDTParams(n_trees=1, max_depth=1))
    assert len(np.unique(predict_gbdt(model, x)[0])) <= 2


def test_same_seed_same_model():
    x, y = separable(seed=3)
    a = fit_gbdt(x, y, GBDTParams(n_trees=10, seed=4))
    b = fit_gbdt(x, y, GBDTParams(n_trees=10, seed=4))
    assert np.array_equal(predict_gbdt(a, x)[0], predict_gbdt(b, x)[0])


def test_save_load_round_trip(tmp_path):
    x, y = separable(seed=5)
    params = GBDTParams(n_trees=5)
    m = fit_gbdt(x, y, params)
    back = load_gbdt(m.save(tmp_path / "gbdt"), params, FEATURE_WIDTH)
    assert np.array_equal(predict_gbdt(back, x)[0], predict_gbdt(m, x)[0])


def test_empty_and_wrong_width():
    x, y = separable(seed=6)
    m = fit_gbdt(x, y, GBDTParams(n_trees=3))
    proba, labels = predict_gbdt(m, np.zeros((0, FEATURE_WIDTH)))
    assert proba.shape == (0,) and labels.shape == (0,)
    with pytest.raises(WidthMismatch):
        predict_gbdt(m, np.zeros((2, 100)))


def test_training_guards():
    x, _ = separable()
    with pytest.raises(SingleClass):
        fit_gbdt(x, np.ones(len(x)))
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(NonFiniteFeature):
        fit_gbdt(bad, np.arange(len(x)) % 2)
    with pytest.raises(ValueError):
        GBDTParams(learning_rate=0)


def test_feature_cache_round_trip(tmp_path):
    x, _ = separable(6)
    fm = FeatureMatrix(x[:6], tuple("abcdef"), {"backbone": "vgg16"})
    path = fm.save(tmp_path / "feats")
    assert np.load(path).flags["F_CONTIGUOUS"]
    assert FeatureMatrix.load(path).content_hash == fm.content_hash


@pytest.fixture(scope="module")
def stock_extractor():
    return feature_extractor(None, pretrained=False, seed=0)


def test_extractor_shape_and_purity(stock_extractor):
    extractor, desc = stock_extractor
    m = synth_dataset(3, seed=0)
    pixels = np.stack([s.pixels for s in m.samples])
    fm = extract_features(extractor, desc, pixels, m.ids, batch_size=4)
    assert fm.matrix.shape == (6, FEATURE_WIDTH)
    again = extract_features(extractor, desc, pixels[[0, 0]], ["x", "y"])
    assert np.array_equal(again.matrix[0], again.matrix[1])
    assert np.allclose(again.matrix[0], fm.matrix[0], atol=1e-5)
    assert extract_features(extractor, desc, pixels[:0], []).matrix.shape == (0, FEATURE_WIDTH)
    assert desc["tap"] == "block5_conv3+global_max_pool"
    assert extractor.output.shape[-1] == FEATURE_WIDTH


@pytest.mark.slow
def test_hybrid_pipeline_beats_chance_on_synthetic_data(stock_extractor):
    extractor, desc = stock_extractor
    m = synth_dataset(40, seed=1)
    a = split(m, SplitSpec.standard(1))
    train = extract_manifest_features(extractor, desc, m, a.train_ids)
    test = extract_manifest_features(extractor, desc, m, a.test_ids)
    model = fit_gbdt(train, m.labels(a.train_ids), GBDTParams(seed=1))
    _, report = evaluate(predict_gbdt(model, test)[0], m.labels(a.test_ids))
    assert report.accuracy > 0.5
