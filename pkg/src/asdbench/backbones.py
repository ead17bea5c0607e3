"""Six ImageNet backbones with their fine-tuning heads, SGD fine-tuning and prediction.

Keras/TensorFlow is imported lazily so that importing this module (for the
registry or the parameter arithmetic) does not initialise a compute backend.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench
from .dataset import INPUT_SHAPE, DatasetManifest, SplitAssignment, stack_pixels

log = logging.getLogger(__name__)


class BackboneError(Exception):
    pass


class WeightsUnavailable(BackboneError):
    pass


class ShapeMismatch(BackboneError):
    pass


class NonFiniteLoss(BackboneError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became {loss} in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class EmptySplit(BackboneError):
    pass


class BackboneId(str, enum.Enum):
    INCEPTION_V3 = "inceptionv3"
    XCEPTION = "xception"
    DENSENET121 = "densenet121"
    MOBILENET = "mobilenet"
    RESNET50 = "resnet50"
    VGG16 = "vgg16"


# Level-0 column order of the stacked model.
CANONICAL_ORDER = (
    BackboneId.INCEPTION_V3,
    BackboneId.XCEPTION,
    BackboneId.DENSENET121,
    BackboneId.MOBILENET,
    BackboneId.RESNET50,
    BackboneId.VGG16,
)


@dataclass(frozen=True)
class Layer:
    kind: str  # global_avg_pool | global_max_pool | flatten | batch_norm | dense | dropout
    units: int | None = None
    activation: str | None = None
    rate: float | None = None

    def __post_init__(self):
        if self.kind == "dense" and (not self.units or self.activation not in ("relu", "sigmoid")):
            raise ValueError(f"bad dense layer: {self}")
        if self.kind == "dropout" and not (self.rate is not None and 0 < self.rate < 1):
            raise ValueError(f"dropout rate must lie in (0, 1): {self}")

    def describe(self) -> str:
        if self.kind == "dense":
            return f"DENSE({self.units}, {self.activation})"
        if self.kind == "dropout":
            return f"DROPOUT({self.rate})"
        return self.kind.upper()


GLOBAL_AVG_POOL = Layer("global_avg_pool")
GLOBAL_MAX_POOL = Layer("global_max_pool")
FLATTEN = Layer("flatten")
BATCH_NORM = Layer("batch_norm")


def DENSE(units: int, activation: str) -> Layer:
    return Layer("dense", units=units, activation=activation)


def DROPOUT(rate: float) -> Layer:
    return Layer("dropout", rate=rate)


@dataclass(frozen=True)
class HeadSpec:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers or self.layers[-1] != DENSE(1, "sigmoid"):
            raise ValueError("a head must end in DENSE(1, sigmoid)")

    def describe(self) -> list[str]:
        return [layer.describe() for layer in self.layers]


_POOL_DROPOUT_HEAD = HeadSpec((GLOBAL_AVG_POOL, DROPOUT(0.5), DENSE(1, "sigmoid")))
_FLATTEN_BN_HEAD = HeadSpec(
    (FLATTEN, BATCH_NORM, DENSE(128, "relu"), BATCH_NORM, DENSE(1, "sigmoid"))
)
_VGG_HEAD = HeadSpec((GLOBAL_MAX_POOL, DENSE(512, "relu"), DROPOUT(0.5), DENSE(1, "sigmoid")))

_HEADS = {
    BackboneId.INCEPTION_V3: _POOL_DROPOUT_HEAD,
    BackboneId.XCEPTION: _FLATTEN_BN_HEAD,
    BackboneId.DENSENET121: _POOL_DROPOUT_HEAD,
    BackboneId.MOBILENET: _POOL_DROPOUT_HEAD,
    BackboneId.RESNET50: _FLATTEN_BN_HEAD,
    BackboneId.VGG16: _VGG_HEAD,
}


def head_for(backbone: BackboneId | str) -> HeadSpec:
    return _HEADS[BackboneId(backbone)]


@dataclass(frozen=True)
class BackboneSpec:
    id: BackboneId
    head: HeadSpec
    expected_trainable_params: int
    display_name: str
    keras_name: str
    # shape of the base output fed to the head (channels last, no batch axis)
    base_output_shape: tuple[int, ...]
    # Keras ``pooling=`` argument applied inside the base ("avg" or None)
    base_pooling: str | None = None
    # relative tolerance of the parameter audit
    param_tolerance: float = 0.0
    input_shape: tuple[int, int, int] = INPUT_SHAPE


BACKBONES: dict[BackboneId, BackboneSpec] = {
    BackboneId.INCEPTION_V3: BackboneSpec(
        BackboneId.INCEPTION_V3, _HEADS[BackboneId.INCEPTION_V3], 21_770_401,
        "Inceptionv3", "InceptionV3", (5, 5, 2048),
    ),
    BackboneId.XCEPTION: BackboneSpec(
        BackboneId.XCEPTION, _HEADS[BackboneId.XCEPTION], 33_853_225,
        "Xception", "Xception", (7, 7, 2048), param_tolerance=1e-3,
    ),
    BackboneId.DENSENET121: BackboneSpec(
        BackboneId.DENSENET121, _HEADS[BackboneId.DENSENET121], 6_954_881,
        "Densenet", "DenseNet121", (7, 7, 1024),
    ),
    BackboneId.MOBILENET: BackboneSpec(
        BackboneId.MOBILENET, _HEADS[BackboneId.MOBILENET], 3_208_001,
        "Mobilenet", "MobileNet", (7, 7, 1024),
    ),
    # The stated ResNet-50 count only fits a 2048-wide pooled feature vector; a
    # flattened 7x7x2048 map would put 12.8M weights in DENSE(128) alone.
    BackboneId.RESNET50: BackboneSpec(
        BackboneId.RESNET50, _HEADS[BackboneId.RESNET50], 23_796_993,
        "Resnet50", "ResNet50", (2048,), base_pooling="avg", param_tolerance=1e-3,
    ),
    BackboneId.VGG16: BackboneSpec(
        BackboneId.VGG16, _HEADS[BackboneId.VGG16], 14_977_857,
        "VGG16", "VGG16", (7, 7, 512),
    ),
}

# Trainable weights of each Keras base (include_top=False, 224x224x3); measured by
# ``trainable_param_count`` on the built base and pinned by the test-suite.
BASE_TRAINABLE_PARAMS = {
    BackboneId.INCEPTION_V3: 21_768_352,
    BackboneId.XCEPTION: 20_806_952,
    BackboneId.DENSENET121: 6_953_856,
    BackboneId.MOBILENET: 3_206_976,
    BackboneId.RESNET50: 23_534_592,
    BackboneId.VGG16: 14_714_688,
}


def spec_for(backbone: BackboneId | str) -> BackboneSpec:
    return BACKBONES[BackboneId(backbone)]


def head_param_breakdown(spec: BackboneSpec) -> list[tuple[str, int]]:
    """Trainable parameters of each head layer, from layer arithmetic alone.

    Batch-norm contributes gamma and beta (2 per channel); its moving statistics
    are not trainable.
    """
    shape = spec.base_output_shape
    rows = []
    for layer in spec.head.layers:
        if layer.kind in ("global_avg_pool", "global_max_pool"):
            shape, n = (shape[-1],), 0
        elif layer.kind == "flatten":
            shape, n = (math.prod(shape),), 0
        elif layer.kind == "batch_norm":
            n = 2 * shape[-1]
        elif layer.kind == "dense":
            n = (shape[-1] + 1) * layer.units
            shape = (*shape[:-1], layer.units)
        else:
            n = 0
        rows.append((layer.describe(), n))
    return rows


def param_breakdown(spec: BackboneSpec) -> list[tuple[str, int]]:
    pooled = f" (pooling={spec.base_pooling})" if spec.base_pooling else ""
    return [(f"{spec.keras_name} base{pooled}", BASE_TRAINABLE_PARAMS[spec.id]), *head_param_breakdown(spec)]


def expected_param_total(spec: BackboneSpec) -> int:
    return sum(n for _, n in param_breakdown(spec))


@dataclass(frozen=True)
class FineTuneConfig:
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    # gradient-accumulation chunk; bounds activation memory, not the SGD batch
    micro_batch_size: int = 8
    momentum: float = 0.0
    optimizer: str = "sgd"
    loss: str = "binary_crossentropy"
    seed: int = 0
    trainable_base: bool = True
    validate_each_epoch: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.micro_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        if self.optimizer != "sgd" or self.loss != "binary_crossentropy":
            raise ValueError("only SGD with binary cross-entropy is supported")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedModel:
    spec: BackboneSpec
    model: object  # keras.Model
    config: FineTuneConfig
    history: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0
    weights_ref: str | None = None
    train_ids: tuple[str, ...] = ()


def _keras():
    os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")
    if bench.accelerator_disabled():
        os.environ["CUDA_VISIBLE_DEVICES"] = "-1"
    import keras

    return keras


def build_model(spec: BackboneSpec | BackboneId | str, pretrained: bool = False, seed: int = 0,
                trainable_base: bool = True):
    """Base network (no top) plus the backbone's head; outputs one probability per image."""
    if not isinstance(spec, BackboneSpec):
        spec = spec_for(spec)
    keras = _keras()
    from keras import layers

    keras.utils.set_random_seed(seed)
    ctor = getattr(keras.applications, spec.keras_name)
    try:
        base = ctor(
            include_top=False,
            weights="imagenet" if pretrained else None,
            input_shape=spec.input_shape,
            pooling=spec.base_pooling,
        )
    except Exception as exc:
        if pretrained:
            raise WeightsUnavailable(f"could not load ImageNet weights for {spec.keras_name}: {exc}") from exc
        raise
    base.trainable = trainable_base
    if tuple(base.output.shape[1:]) != spec.base_output_shape:
        raise ShapeMismatch(f"{spec.keras_name} base emits {base.output.shape}, expected {spec.base_output_shape}")

    x = base.output
    for i, layer in enumerate(spec.head.layers):
        name = f"head_{i}_{layer.kind}"
        if layer.kind == "global_avg_pool":
            x = layers.GlobalAveragePooling2D(name=name)(x)
        elif layer.kind == "global_max_pool":
            x = layers.GlobalMaxPooling2D(name=name)(x)
        elif layer.kind == "flatten":
            x = layers.Flatten(name=name)(x)
        elif layer.kind == "batch_norm":
            x = layers.BatchNormalization(name=name)(x)
        elif layer.kind == "dense":
            x = layers.Dense(layer.units, activation=layer.activation, name=name)(x)
        elif layer.kind == "dropout":
            x = layers.Dropout(layer.rate, seed=seed, name=name)(x)
    model = keras.Model(base.input, x, name=spec.id.value)
    if tuple(model.output.shape[1:]) != (1,):
        raise ShapeMismatch(f"head output {model.output.shape}, expected (batch, 1)")
    return model


def trainable_param_count(model) -> int:
    return int(sum(int(np.prod(w.shape)) for w in model.trainable_weights))


def _as_model(model):
    return model.model if isinstance(model, TrainedModel) else model


def predict_proba(model, pixels: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Probabilities (float64, shape (N,)) for a preprocessed N x 224 x 224 x 3 batch."""
    m = _as_model(model)
    x = np.asarray(pixels, dtype=np.float32)
    if x.ndim != 4 or x.shape[1:] != INPUT_SHAPE:
        if x.size == 0:
            return np.zeros(0)
        raise ShapeMismatch(f"expected (N, 224, 224, 3), got {x.shape}")
    if len(x) == 0:
        return np.zeros(0)
    out = []
    for start in range(0, len(x), batch_size):
        out.append(np.asarray(m(x[start : start + batch_size], training=False)).reshape(-1))
    return np.concatenate(out).astype(np.float64)


def predict_samples(model, manifest: DatasetManifest, ids: Sequence[str], batch_size: int = 8) -> np.ndarray:
    ids = list(ids)
    out = [predict_proba(model, stack_pixels(manifest.select(ids[i : i + batch_size])), batch_size)
           for i in range(0, len(ids), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def _bce(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def train(model, manifest: DatasetManifest, assignment: SplitAssignment, config: FineTuneConfig,
          spec: BackboneSpec | None = None, weights_dir: str | Path | None = None) -> TrainedModel:
    """Fine-tune with plain SGD over ``config.epochs`` full passes of the train split.

    Each SGD step averages the binary cross-entropy gradient over ``batch_size``
    samples, accumulated in chunks of ``micro_batch_size``. Validation loss and
    accuracy are computed after every epoch (inside the timed span).
    """
    if not assignment.train_ids:
        raise EmptySplit("train split is empty")
    if config.validate_each_epoch and not assignment.val_ids:
        raise EmptySplit("validation split is empty")
    keras = _keras()
    import tensorflow as tf

    spec = spec or spec_for(model.name)
    keras.utils.set_random_seed(config.seed)
    optimizer = keras.optimizers.SGD(learning_rate=config.learning_rate, momentum=config.momentum)
    variables = model.trainable_variables
    optimizer.build(variables)

    @tf.function(input_signature=[
        tf.TensorSpec((None, *INPUT_SHAPE), tf.float32), tf.TensorSpec((None, 1), tf.float32)
    ], reduce_retracing=True)
    def grad_step(x, y):
        with tf.GradientTape() as tape:
            p = model(x, training=True)
            loss_sum = tf.reduce_sum(keras.losses.binary_crossentropy(y, p))
        return tape.gradient(loss_sum, variables), loss_sum, p

    train_ids = list(assignment.train_ids)
    labels = manifest.labels(train_ids).astype(np.float32)
    history: list[dict] = []

    def run_epochs():
        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(train_ids))
            total_loss, correct = 0.0, 0
            for b0 in range(0, len(order), config.batch_size):
                batch = order[b0 : b0 + config.batch_size]
                acc = None
                for m0 in range(0, len(batch), config.micro_batch_size):
                    idx = batch[m0 : m0 + config.micro_batch_size]
                    x = stack_pixels(manifest.select(train_ids[i] for i in idx))
                    y = labels[idx].reshape(-1, 1)
                    grads, loss_sum, p = grad_step(x, y)
                    total_loss += float(loss_sum)
                    correct += int(np.sum((np.asarray(p).reshape(-1) >= 0.5) == (y.reshape(-1) == 1)))
                    acc = list(grads) if acc is None else [a + g for a, g in zip(acc, grads)]
                scale = 1.0 / len(batch)
                optimizer.apply([g * scale for g in acc], variables)
            loss = total_loss / len(train_ids)
            if not math.isfinite(loss):
                raise NonFiniteLoss(epoch, loss)
            row = {"epoch": epoch, "loss": loss, "accuracy": correct / len(train_ids)}
            if config.validate_each_epoch:
                vp = predict_samples(model, manifest, assignment.val_ids, config.micro_batch_size)
                vy = manifest.labels(assignment.val_ids)
                row["val_loss"] = _bce(vy, vp)
                row["val_accuracy"] = float(np.mean((vp >= 0.5) == (vy == 1)))
            history.append(row)
            log.info("%s epoch %d/%d %s", spec.id.value, epoch, config.epochs, row)

    try:
        _, timing = bench.time_run(run_epochs)
    except bench.WorkloadFailed as exc:
        raise exc.error
    trained = TrainedModel(spec, model, config, history, timing.wall_seconds,
                           train_ids=tuple(assignment.train_ids))
    if weights_dir is not None:
        save_trained(trained, weights_dir)
    return trained


def save_trained(trained: TrainedModel, weights_dir: str | Path) -> Path:
    """Persist weights (HDF5) with the backbone, config and history as a JSON sidecar."""
    weights_dir = Path(weights_dir)
    weights_dir.mkdir(parents=True, exist_ok=True)
    path = weights_dir / f"{trained.spec.id.value}.weights.h5"
    trained.model.save_weights(path)
    sidecar = {
        "backbone": trained.spec.id.value,
        "head": trained.spec.head.describe(),
        "base_pooling": trained.spec.base_pooling,
        "expected_trainable_params": trained.spec.expected_trainable_params,
        "config": trained.config.to_dict(),
        "history": trained.history,
        "wall_seconds": trained.wall_seconds,
    }
    path.with_name(f"{trained.spec.id.value}.json").write_text(json.dumps(sidecar, indent=2))
    trained.weights_ref = str(path)
    return path


def load_trained(weights_path: str | Path) -> TrainedModel:
    weights_path = Path(weights_path)
    meta = json.loads(weights_path.with_name(weights_path.name.replace(".weights.h5", ".json")).read_text())
    spec = spec_for(meta["backbone"])
    config = FineTuneConfig(**meta["config"])
    model = build_model(spec, pretrained=False, seed=config.seed, trainable_base=config.trainable_base)
    model.load_weights(weights_path)
    return TrainedModel(spec, model, config, meta["history"], meta["wall_seconds"], str(weights_path))


def release(trained: TrainedModel) -> None:
    """Drop the in-memory network; it can be restored with :func:`load_trained`."""
    trained.model = None
