"""XGBOOST-VGG16: gradient-boosted trees over 512-d VGG16 features."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import backbones as bb
from .backbones import BackboneId, TrainedModel
from .dataset import DatasetManifest, stack_pixels

FEATURE_WIDTH = 512
TAP_LAYER = "block5_conv3+global_max_pool"


class HybridError(Exception):
    pass


class SingleClass(HybridError):
    pass


class NonFiniteFeature(HybridError):
    pass


class WidthMismatch(HybridError):
    pass


@dataclass(frozen=True)
class FeatureMatrix:
    matrix: np.ndarray
    sample_ids: tuple[str, ...]
    extractor: dict

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float32).reshape(-1, FEATURE_WIDTH)
        if m.shape[0] != len(self.sample_ids):
            raise bb.ShapeMismatch(f"{m.shape[0]} rows for {len(self.sample_ids)} ids")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.matrix).tobytes())
        h.update(json.dumps(self.sample_ids).encode())
        return h.hexdigest()

    def save(self, path: str | Path) -> Path:
        """Column-major ``.npy`` plus a ``.json`` sidecar (extractor, ids, hash)."""
        path = Path(path).with_suffix(".npy")
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, np.asfortranarray(self.matrix))
        sidecar = {"extractor": self.extractor, "sample_ids": list(self.sample_ids),
                   "shape": list(self.matrix.shape), "content_hash": self.content_hash}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "FeatureMatrix":
        path = Path(path).with_suffix(".npy")
        meta = json.loads(path.with_suffix(".json").read_text())
        fm = cls(np.load(path), tuple(meta["sample_ids"]), meta["extractor"])
        if fm.content_hash != meta["content_hash"]:
            raise HybridError(f"{path}: cached features do not match their sidecar hash")
        return fm


@dataclass(frozen=True)
class GBDTParams:
    n_trees: int = 100
    max_depth: int = 6
    learning_rate: float = 0.3
    objective: str = "binary:logistic"
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1:
            raise ValueError("n_trees and max_depth must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.objective != "binary:logistic":
            raise ValueError("only the binary logistic objective is supported")

    def to_dict(self) -> dict:
        return asdict(self)


def feature_extractor(backbone: TrainedModel | None = None, pretrained: bool = True, seed: int = 0):
    """Keras model mapping images to the global-max-pooled last VGG16 conv block.

    With ``backbone`` (a fine-tuned VGG16) the tap is read from its head; otherwise a
    stock VGG16 base is built (ImageNet weights when ``pretrained``).
    """
    keras = bb._keras()
    from keras import layers

    if backbone is not None:
        if backbone.spec.id is not BackboneId.VGG16:
            raise HybridError("feature extraction needs a VGG16 backbone")
        m = backbone.model
        tap = m.get_layer("head_0_global_max_pool").output
        return keras.Model(m.input, tap, name="vgg16_features"), {
            "backbone": "vgg16", "tap": TAP_LAYER, "weights": "fine-tuned",
        }
    keras.utils.set_random_seed(seed)
    try:
        base = keras.applications.VGG16(include_top=False, weights="imagenet" if pretrained else None,
                                        input_shape=(224, 224, 3))
    except Exception as exc:
        if pretrained:
            raise bb.WeightsUnavailable(f"could not load ImageNet weights for VGG16: {exc}") from exc
        raise
    out = layers.GlobalMaxPooling2D(name="tap_global_max_pool")(base.output)
    weights = "imagenet" if pretrained else f"random(seed={seed})"
    return keras.Model(base.input, out, name="vgg16_features"), {
        "backbone": "vgg16", "tap": TAP_LAYER, "weights": weights,
    }


def extract_features(extractor, descriptor: dict, pixels: np.ndarray, sample_ids: Sequence[str],
                     batch_size: int = 8) -> FeatureMatrix:
    x = np.asarray(pixels, dtype=np.float32)
    ids = tuple(sample_ids)
    if len(ids) == 0:
        return FeatureMatrix(np.zeros((0, FEATURE_WIDTH), np.float32), (), descriptor)
    if x.shape != (len(ids), 224, 224, 3):
        raise bb.ShapeMismatch(f"expected ({len(ids)}, 224, 224, 3), got {x.shape}")
    rows = [np.asarray(extractor(x[i : i + batch_size], training=False)) for i in range(0, len(x), batch_size)]
    feats = np.concatenate(rows)
    if feats.shape[1] != FEATURE_WIDTH:
        raise WidthMismatch(f"tap emits {feats.shape[1]} features, expected {FEATURE_WIDTH}")
    return FeatureMatrix(feats, ids, descriptor)


def extract_manifest_features(extractor, descriptor: dict, manifest: DatasetManifest,
                              ids: Sequence[str], batch_size: int = 8) -> FeatureMatrix:
    ids = list(ids)
    parts = [
        extract_features(extractor, descriptor, stack_pixels(manifest.select(ids[i : i + batch_size])),
                         ids[i : i + batch_size], batch_size).matrix
        for i in range(0, len(ids), batch_size)
    ]
    matrix = np.concatenate(parts) if parts else np.zeros((0, FEATURE_WIDTH), np.float32)
    return FeatureMatrix(matrix, tuple(ids), descriptor)


@dataclass
class GBDTModel:
    booster: object  # xgboost.XGBClassifier
    params: GBDTParams
    width: int

    def save(self, path: str | Path) -> Path:
        path = Path(path).with_suffix(".json")
        path.parent.mkdir(parents=True, exist_ok=True)
        self.booster.save_model(path)
        return path


def _classifier(params: GBDTParams):
    import xgboost

    return xgboost.XGBClassifier(
        n_estimators=params.n_trees,
        max_depth=params.max_depth,
        learning_rate=params.learning_rate,
        objective=params.objective,
        random_state=params.seed,
        n_jobs=1,
        tree_method="exact",
    )


def _matrix(features) -> np.ndarray:
    return features.matrix if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float32)


def fit_gbdt(features: FeatureMatrix | np.ndarray, labels, params: GBDTParams = GBDTParams()) -> GBDTModel:
    x = _matrix(features)
    y = np.asarray(labels).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise bb.ShapeMismatch(f"{x.shape} features for {y.size} labels")
    if y.size < 2 or np.unique(y).size < 2:
        raise SingleClass("GBDT training needs both classes")
    if not np.isfinite(x).all():
        raise NonFiniteFeature("feature matrix contains NaN or infinity")
    clf = _classifier(params)
    clf.fit(x, y)
    return GBDTModel(clf, params, x.shape[1])


def load_gbdt(path: str | Path, params: GBDTParams, width: int) -> GBDTModel:
    clf = _classifier(params)
    clf.load_model(Path(path))
    return GBDTModel(clf, params, width)


def predict_gbdt(model: GBDTModel, features: FeatureMatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = _matrix(features)
    if x.size == 0 and x.shape[0] == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != model.width:
        raise WidthMismatch(f"model expects {model.width} features, got {x.shape}")
    proba = model.booster.predict_proba(x)[:, 1].astype(np.float64)
    return proba, (proba >= 0.5).astype(np.int64)
