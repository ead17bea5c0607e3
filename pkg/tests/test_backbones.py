
import numpy as np
import pytest

from asdbench import backbones as bb
from asdbench.backbones import (
    BACKBONES, CANONICAL_ORDER, DENSE, DROPOUT, FLATTEN, GLOBAL_AVG_POOL, GLOBAL_MAX_POOL, BATCH_NORM, BackboneId,
    FineTuneConfig, HeadSpec, NonFiniteLoss, ShapeMismatch, WeightsUnavailable, build_model, expected_param_total,
    head_for, predict_proba, trainable_param_count,
)
from asdbench.dataset import DatasetManifest, ImageSample, SplitSpec, split, synth_dataset


def vgg16_conv_params():
    """Conv 3x3 blocks (64,64 | 128,128 | 256x3 | 512x3 | 512x3) with biases."""
    widths = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]
    total, c_in = 0, 3
    for c_out in widths:
        total += 3 * 3 * c_in * c_out + c_out
        c_in = c_out
    return total


def test_vgg16_total_from_layer_arithmetic():
    conv = vgg16_conv_params()
    assert conv == bb.BASE_TRAINABLE_PARAMS[BackboneId.VGG16] == 14_714_688
    assert conv + (512 * 512 + 512) + (512 + 1) == 14_977_857


def test_heads():
    assert head_for("vgg16").layers == (GLOBAL_MAX_POOL, DENSE(512, "relu"), DROPOUT(0.5), DENSE(1, "sigmoid"))
    for b in ("inceptionv3", "densenet121", "mobilenet"):
        assert head_for(b).layers == (GLOBAL_AVG_POOL, DROPOUT(0.5), DENSE(1, "sigmoid"))
    for b in ("xception", "resnet50"):
        assert head_for(b).layers == (FLATTEN, BATCH_NORM, DENSE(128, "relu"), BATCH_NORM, DENSE(1, "sigmoid"))
    with pytest.raises(ValueError):
        HeadSpec((GLOBAL_AVG_POOL, DENSE(2, "sigmoid")))


@pytest.mark.parametrize("bid", CANONICAL_ORDER)
def test_arithmetic_within_tolerance(bid):
    spec = BACKBONES[bid]
    rel = abs(expected_param_total(spec) - spec.expected_trainable_params) / spec.expected_trainable_params
    assert rel <= spec.param_tolerance


def test_single_dense_probability_layer():
    import keras

    inp = keras.Input((512,))
    model = keras.Model(inp, keras.layers.Dense(1, activation="sigmoid")(inp))
    assert trainable_param_count(model) == 513


@pytest.mark.slow
@pytest.mark.parametrize("bid", CANONICAL_ORDER)
def test_built_model_matches_arithmetic(bid):
    spec = BACKBONES[bid]
    model = build_model(spec, seed=0)
    assert trainable_param_count(model) == expected_param_total(spec)
    assert tuple(model.output.shape) == (None, 1)


def _pixels(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 224, 224, 3)).astype(np.float32)


@pytest.mark.slow
def test_same_seed_same_weights():
    x = _pixels(2)
    a = predict_proba(build_model("densenet121", seed=3), x)
    b = predict_proba(build_model("densenet121", seed=3), x)
    assert np.array_equal(a, b)


@pytest.fixture(scope="module")
def mobilenet():
    return build_model("mobilenet", seed=0)


def test_predict_contract(mobilenet):
    x = _pixels(5, seed=1)
    full = predict_proba(mobilenet, x, batch_size=5)
    singles = np.concatenate([predict_proba(mobilenet, x[i : i + 1], batch_size=1) for i in range(5)])
    assert full.shape == (5,) and full.dtype == np.float64
    assert np.allclose(full, singles, atol=1e-5)
    assert np.array_equal(predict_proba(mobilenet, x), predict_proba(mobilenet, x))
    dup = predict_proba(mobilenet, x[[2, 2]])
    assert dup[0] == dup[1]
    assert predict_proba(mobilenet, np.zeros((0, 224, 224, 3))).shape == (0,)
    with pytest.raises(ShapeMismatch):
        predict_proba(mobilenet, np.zeros((2, 100, 100, 3)))


def _tiny(seed=0, n=6):
    m = synth_dataset(n, seed=seed)
    return m, split(m, SplitSpec.standard(seed))


@pytest.mark.slow
def test_train_contract_and_reproducibility(tmp_path):
    m, a = _tiny()
    cfg = FineTuneConfig(epochs=1, seed=2)
    runs = [bb.train(build_model("mobilenet", seed=2), m, a, cfg) for _ in range(2)]
    first = runs[0]
    assert len(first.history) == 1 and first.wall_seconds > 0
    assert set(first.history[0]) == {"epoch", "loss", "accuracy", "val_loss", "val_accuracy"}
    assert abs(runs[0].history[0]["loss"] - runs[1].history[0]["loss"]) < 1e-4
    path = bb.save_trained(first, tmp_path)
    back = bb.load_trained(path)
    x = np.stack([s.pixels for s in m.samples[:3]])
    assert np.allclose(predict_proba(back, x), predict_proba(first, x), atol=1e-6)


@pytest.mark.slow
def test_training_lowers_the_loss():
    m, a = _tiny(seed=1, n=8)
    cfg = FineTuneConfig(epochs=4, learning_rate=0.05, momentum=0.9, batch_size=4, micro_batch_size=4, seed=1)
    hist = bb.train(build_model("mobilenet", seed=1), m, a, cfg).history
    assert hist[-1]["loss"] < hist[0]["loss"]


@pytest.mark.slow
def test_nan_input_raises_non_finite_loss():
    bad = np.full((224, 224, 3), np.nan, np.float32)
    m = DatasetManifest([ImageSample(f"nan{i}", "mem://nan", i % 2, bad) for i in range(10)])
    with pytest.raises(NonFiniteLoss) as info:
        bb.train(build_model("mobilenet", seed=0), m, split(m, SplitSpec.standard(0)), FineTuneConfig(epochs=1))
    assert info.value.epoch == 1


def test_config_validation():
    with pytest.raises(ValueError):
        FineTuneConfig(learning_rate=0)
    with pytest.raises(ValueError):
        FineTuneConfig(optimizer="adam")


@pytest.mark.slow
def test_pretrained_weights_or_skip():
    try:
        model = build_model("mobilenet", pretrained=True)
    except WeightsUnavailable as exc:
        pytest.skip(f"ImageNet weights not reachable: {exc}")
    assert trainable_param_count(model) == 3_208_001
    p = predict_proba(model, np.zeros((2, 224, 224, 3), np.float32))
    assert np.isfinite(p).all() and ((p >= 0) & (p <= 1)).all()


def test_level0_matrix_shape_and_symmetry(mobilenet):
    from asdbench.stacking import predict_level0

    m = synth_dataset(2, seed=0)
    shared = [bb.TrainedModel(bb.spec_for(b), mobilenet, FineTuneConfig()) for b in CANONICAL_ORDER]
    out = predict_level0(shared, m, m.ids)
    assert out.matrix.shape == (4, 6)
    assert all(np.array_equal(out.matrix[:, 0], out.matrix[:, j]) for j in range(6))
    assert predict_level0(shared, m, []).matrix.shape == (0, 6)


def test_head_for_is_constant():
    assert all(head_for(b) is head_for(b.value) for b in CANONICAL_ORDER)
