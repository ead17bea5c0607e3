"""Two-level stacking: six fine-tuned backbones feed a logistic-regression meta-learner.

The meta-learner is fit on level-0 probabilities for the validation split only.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import backbones as bb
from .backbones import CANONICAL_ORDER, BackboneId, FineTuneConfig, TrainedModel
from .dataset import DatasetManifest, SplitAssignment, SplitStrategy


class StackingError(Exception):
    pass


class SingularFit(StackingError):
    pass


class LeakageError(StackingError):
    pass


class Level0Failed(StackingError):
    def __init__(self, backbone: BackboneId, error: BaseException):
        super().__init__(f"level-0 model {backbone.value} failed: {error}")
        self.backbone = backbone
        self.error = error


@dataclass(frozen=True)
class LevelZeroOutputs:
    matrix: np.ndarray  # N x 6, column j from model_order[j]
    sample_ids: tuple[str, ...]
    model_order: tuple[BackboneId, ...] = CANONICAL_ORDER

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(-1, len(self.model_order))
        if m.shape[0] != len(self.sample_ids):
            raise bb.ShapeMismatch(f"{m.shape[0]} rows for {len(self.sample_ids)} sample ids")
        if m.size and not (np.isfinite(m).all() and (m >= 0).all() and (m <= 1).all()):
            raise ValueError("level-0 outputs must be probabilities in [0, 1]")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "model_order", tuple(BackboneId(b) for b in self.model_order))

    def save(self, path: str | Path) -> None:
        """CSV with a ``sample_id`` column followed by one probability column per model."""
        lines = [",".join(["sample_id", *(b.value for b in self.model_order)])]
        for sid, row in zip(self.sample_ids, self.matrix):
            lines.append(",".join([sid, *(repr(float(v)) for v in row)]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LevelZeroOutputs":
        rows = Path(path).read_text().splitlines()
        header = rows[0].split(",")
        ids, values = [], []
        for line in rows[1:]:
            parts = line.split(",")
            ids.append(parts[0])
            values.append([float(v) for v in parts[1:]])
        order = tuple(BackboneId(h) for h in header[1:])
        return cls(np.array(values).reshape(-1, len(order)), tuple(ids), order)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class MetaLearner:
    coefficients: np.ndarray
    intercept: float
    regularization: float = 1.0
    threshold: float = 0.5
    model_order: tuple[BackboneId, ...] = CANONICAL_ORDER
    iterations: int = 0
    gradient_norm: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.coefficients, dtype=np.float64).reshape(-1)
        if not np.isfinite(w).all() or not math.isfinite(self.intercept):
            raise ValueError("meta-learner parameters must be finite")
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")
        object.__setattr__(self, "coefficients", w)

    def predict_proba(self, matrix: np.ndarray) -> np.ndarray:
        x = np.asarray(matrix, dtype=np.float64).reshape(-1, self.coefficients.size)
        return sigmoid(self.intercept + x @ self.coefficients)

    def to_dict(self) -> dict:
        return {
            "coefficients": [float(v) for v in self.coefficients],
            "intercept": float(self.intercept),
            "regularization": self.regularization,
            "threshold": self.threshold,
            "model_order": [b.value for b in self.model_order],
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetaLearner":
        return cls(
            np.array(d["coefficients"], dtype=np.float64),
            float(d["intercept"]),
            float(d["regularization"]),
            float(d["threshold"]),
            tuple(BackboneId(b) for b in d["model_order"]),
            int(d.get("iterations", 0)),
            float(d.get("gradient_norm", 0.0)),
        )


def fit_logistic(x: np.ndarray, y: np.ndarray, regularization: float = 1.0, tol: float = 1e-8,
                 max_iter: int = 10_000) -> tuple[np.ndarray, float, int, float]:
    """Minimise sum(log-loss) + regularization/2 * ||w||^2 by damped Newton steps.

    The intercept is not penalised. Returns (w, b, iterations, final gradient norm).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    penalty = np.full(d + 1, regularization, dtype=np.float64)
    penalty[-1] = 0.0
    theta = np.zeros(d + 1)

    def objective(t):
        z = xa @ t
        return float(np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(penalty * t * t))

    it, gnorm = 0, float("inf")
    f = objective(theta)
    for it in range(1, max_iter + 1):
        p = sigmoid(xa @ theta)
        grad = xa.T @ (p - y) + penalty * theta
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            break
        hess = (xa * (p * (1 - p))[:, None]).T @ xa + np.diag(penalty)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            candidate = theta - t * step
            fc = objective(candidate)
            if fc <= f - 1e-4 * t * float(grad @ step) or t < 1e-10:
                break
            t *= 0.5
        theta, f = candidate, fc
    return theta[:-1].copy(), float(theta[-1]), it, gnorm


def fit_meta(outputs: LevelZeroOutputs, labels, regularization: float = 1.0,
             assignment: SplitAssignment | None = None, tol: float = 1e-8,
             max_iter: int = 10_000) -> MetaLearner:
    """Fit the level-1 logistic regression.

    With ``assignment`` given, the rows must come from its validation split; any
    overlap with the train or test split raises :class:`LeakageError`.
    """
    y = np.asarray(labels).reshape(-1)
    if y.size != outputs.matrix.shape[0]:
        raise bb.ShapeMismatch(f"{y.size} labels for {outputs.matrix.shape[0]} rows")
    if assignment is not None:
        ids = set(outputs.sample_ids)
        leaked_test = ids & set(assignment.test_ids)
        leaked_train = ids & set(assignment.train_ids)
        if leaked_test or leaked_train:
            raise LeakageError(
                f"meta-learner rows overlap the test split ({len(leaked_test)}) "
                f"or the train split ({len(leaked_train)}); fit on validation outputs only"
            )
        if not ids <= set(assignment.val_ids):
            raise LeakageError("meta-learner rows must be validation-split samples")
    if y.size == 0 or np.unique(y).size < 2:
        raise SingularFit("validation labels must contain both classes")
    w, b, it, gnorm = fit_logistic(outputs.matrix, y, regularization, tol, max_iter)
    return MetaLearner(w, b, regularization, 0.5, outputs.model_order, it, gnorm)


@dataclass
class StackedModel:
    level0: list[TrainedModel]
    meta: MetaLearner
    split: SplitAssignment
    artifacts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split.spec.strategy is not SplitStrategy.STACKING:
            raise ValueError("a stacked model requires a STACKING split")

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        (directory / "weights").mkdir(parents=True, exist_ok=True)
        refs = []
        for tm in self.level0:
            if tm.model is not None:
                bb.save_trained(tm, directory / "weights")
            refs.append(tm.weights_ref)
        meta = self.meta.to_dict() | {"weights": refs, "split": self.split.to_dict()}
        (directory / "meta.json").write_text(json.dumps(meta, indent=2))
        return directory


def fit_level0(manifest: DatasetManifest, assignment: SplitAssignment, config: FineTuneConfig,
               pretrained: bool = False, weights_dir: str | Path | None = None,
               order: Sequence[BackboneId] = CANONICAL_ORDER) -> list[TrainedModel]:
    """Train the six backbones on the shared STACKING train split, in canonical order."""
    if assignment.spec.strategy is not SplitStrategy.STACKING:
        raise ValueError("level-0 training requires a STACKING split")
    trained = {}
    for bid in order:
        try:
            model = bb.build_model(bid, pretrained=pretrained, seed=config.seed,
                                   trainable_base=config.trainable_base)
            trained[bid] = bb.train(model, manifest, assignment, config, weights_dir=weights_dir)
        except Exception as exc:
            raise Level0Failed(bid, exc) from exc
    return [trained[b] for b in CANONICAL_ORDER if b in trained]


def predict_level0(models: Sequence[TrainedModel], manifest: DatasetManifest,
                   sample_ids: Sequence[str], batch_size: int = 8) -> LevelZeroOutputs:
    order = tuple(m.spec.id for m in models)
    if order != CANONICAL_ORDER:
        raise bb.ShapeMismatch(f"level-0 models must be in canonical order, got {order}")
    ids = tuple(sample_ids)
    cols = [bb.predict_samples(m, manifest, ids, batch_size) for m in models]
    matrix = np.stack(cols, axis=1) if ids else np.zeros((0, len(models)))
    return LevelZeroOutputs(matrix, ids, order)


def predict_stacked(model: StackedModel | MetaLearner, level0: LevelZeroOutputs) -> tuple[np.ndarray, np.ndarray]:
    """Stacked probabilities and labels (probability >= threshold is ASD) from level-0 outputs."""
    meta = model.meta if isinstance(model, StackedModel) else model
    if level0.model_order != meta.model_order:
        perm = [level0.model_order.index(b) for b in meta.model_order]
        matrix = level0.matrix[:, perm]
    else:
        matrix = level0.matrix
    proba = meta.predict_proba(matrix)
    return proba, (proba >= meta.threshold).astype(np.int64)


def fit_stacked(manifest: DatasetManifest, assignment: SplitAssignment, config: FineTuneConfig,
                regularization: float = 1.0, pretrained: bool = False,
                weights_dir: str | Path | None = None) -> StackedModel:
    """Level-0 training on the train split, then the meta-learner on validation outputs."""
    level0 = fit_level0(manifest, assignment, config, pretrained, weights_dir)
    val = predict_level0(level0, manifest, assignment.val_ids, config.micro_batch_size)
    meta = fit_meta(val, manifest.labels(assignment.val_ids), regularization, assignment)
    return StackedModel(level0, meta, assignment, {"level0_val": val})
