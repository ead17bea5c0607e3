"""Timed end-to-end runs producing :class:`RunRecord` rows for each of the eight models."""
from __future__ import annotations

import gc
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import bench
from .bench import DeviceProfile, RunKey, RunRecord, RunStore, TimingRecord
from .config import RunConfig
from .dataset import DatasetManifest, SplitSpec, ingest_directory, split, synth_dataset
from .metrics import evaluate

log = logging.getLogger(__name__)

BACKBONE_NAMES = ("inceptionv3", "xception", "densenet121", "mobilenet", "resnet50", "vgg16")


class TrainingFailed(Exception):
    def __init__(self, record: RunRecord, error: BaseException):
        super().__init__(f"{record.model_name} failed: {error}")
        self.record = record
        self.error = error


def load_data(cfg: RunConfig) -> DatasetManifest:
    if cfg.synth is not None:
        return synth_dataset(cfg.synth, cfg.seed, cfg.synth_margin)
    if cfg.data_root is None:
        raise ValueError("give a data root or --synth N")
    return ingest_directory(cfg.data_root)


def finetune_config(cfg: RunConfig):
    from .backbones import FineTuneConfig

    return FineTuneConfig(
        learning_rate=cfg.learning_rate, epochs=cfg.epochs, batch_size=cfg.batch_size,
        micro_batch_size=cfg.micro_batch_size, momentum=cfg.momentum, seed=cfg.seed,
    )


def standard_spec(cfg: RunConfig) -> SplitSpec:
    return SplitSpec.standard(cfg.seed, tuple(Fraction(f) for f in cfg.standard_fractions))


def _timed(prepare: Callable[[], Callable[[], object]], repeats: int):
    """Untimed ``prepare()`` returns the workload; keep the median of ``repeats`` timings."""
    runs = []
    for _ in range(repeats):
        workload = prepare()
        runs.append(bench.time_run(workload))
    runs.sort(key=lambda r: r[1].wall_seconds)
    return runs[(len(runs) - 1) // 2]


class Runner:
    """Executes runs for one configuration on one device and appends their records."""

    def __init__(self, cfg: RunConfig, manifest: DatasetManifest, device: DeviceProfile,
                 store: RunStore | None = None):
        self.cfg = cfg
        self.manifest = manifest
        self.device = device
        self.run_key = RunKey(cfg.device_index, device.accelerator_enabled)
        self.out_dir = Path(cfg.out_dir)
        self.store = store or RunStore(self.out_dir / "records.jsonl")

    def run(self, model_name: str) -> RunRecord:
        run_id = bench.new_run_id()
        run_dir = self.out_dir / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = self.cfg.to_dict() | {
            "model": model_name,
            "pixel_normalization": "[0,1] (x / 255)",
            "manifest_hash": self.manifest.content_hash,
        }
        (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True))
        handler = {
            "xgb-vgg16": self._hybrid,
            "stacked": self._stacked,
        }.get(model_name, self._backbone)
        try:
            (proba, labels), timing, artifacts = handler(model_name, run_dir)
        except bench.WorkloadFailed as exc:
            record = self._record(model_name, run_id, None, exc.timing, {}, status="failed")
            self.store.append(record)
            raise TrainingFailed(record, exc.error) from exc.error
        finally:
            _free_backend()
        _, metrics = evaluate(proba, labels)
        record = self._record(model_name, run_id, metrics, timing, artifacts)
        self.store.append(record)
        return record

    def _record(self, model_name, run_id, metrics, timing: TimingRecord, artifacts, status="ok") -> RunRecord:
        return RunRecord(
            model_name=model_name, run_key=self.run_key, device=self.device, metrics=metrics,
            timing=timing, config_hash=self.cfg.config_hash(model_name), run_id=run_id,
            status=status, config=self.cfg.hashed_dict() | {"model": model_name}, artifacts=artifacts,
        )

    def _backbone(self, name: str, run_dir: Path):
        from . import backbones as bb

        assignment = split(self.manifest, standard_spec(self.cfg))
        ft = finetune_config(self.cfg)
        trained = {}

        def prepare():
            model = bb.build_model(name, pretrained=self.cfg.pretrained, seed=ft.seed)

            def workload():
                trained["model"] = bb.train(model, self.manifest, assignment, ft)
            return workload

        _, timing = _timed(prepare, self.cfg.repeats)
        tm = trained["model"]
        weights = bb.save_trained(tm, run_dir / "weights")
        proba = bb.predict_samples(tm, self.manifest, assignment.test_ids, ft.micro_batch_size)
        labels = self.manifest.labels(assignment.test_ids)
        _write_predictions(run_dir / "test_predictions.csv", assignment.test_ids, proba)
        artifacts = {"weights": str(weights), "split": assignment.spec.to_dict(),
                     "history": tm.history, "trainable_params": bb.trainable_param_count(tm.model)}
        return (proba, labels), timing, artifacts

    def _hybrid(self, name: str, run_dir: Path):
        from . import backbones as bb
        from . import hybrid as hy

        assignment = split(self.manifest, standard_spec(self.cfg))
        ft = finetune_config(self.cfg)
        params = hy.GBDTParams(self.cfg.n_trees, self.cfg.max_depth, self.cfg.gbdt_learning_rate, seed=self.cfg.seed)
        state = {}

        def prepare():
            base = None
            if self.cfg.extractor == "finetuned":
                base = bb.build_model("vgg16", pretrained=self.cfg.pretrained, seed=ft.seed)

            def workload():
                source = None
                if base is not None:
                    source = bb.train(base, self.manifest, assignment, ft)
                extractor, desc = hy.feature_extractor(source, pretrained=self.cfg.pretrained, seed=ft.seed)
                feats = hy.extract_manifest_features(extractor, desc, self.manifest, assignment.train_ids,
                                                     ft.micro_batch_size)
                state.update(extractor=extractor, desc=desc, train=feats,
                             gbdt=hy.fit_gbdt(feats, self.manifest.labels(assignment.train_ids), params))
            return workload

        _, timing = _timed(prepare, self.cfg.repeats)
        test = hy.extract_manifest_features(state["extractor"], state["desc"], self.manifest,
                                            assignment.test_ids, ft.micro_batch_size)
        proba, _ = hy.predict_gbdt(state["gbdt"], test)
        labels = self.manifest.labels(assignment.test_ids)
        feat_path = state["train"].save(run_dir / "features" / "train")
        test.save(run_dir / "features" / "test")
        model_path = state["gbdt"].save(run_dir / "gbdt")
        _write_predictions(run_dir / "test_predictions.csv", assignment.test_ids, proba)
        artifacts = {"gbdt_model": str(model_path), "features": str(feat_path), "extractor": state["desc"],
                     "gbdt_params": params.to_dict(), "split": assignment.spec.to_dict()}
        return (proba, labels), timing, artifacts

    def _stacked(self, name: str, run_dir: Path):
        from . import stacking as st

        assignment = split(self.manifest, SplitSpec.stacking(self.cfg.seed))
        ft = finetune_config(self.cfg)
        state = {}

        def prepare():
            def workload():
                state["model"] = st.fit_stacked(self.manifest, assignment, ft, self.cfg.meta_l2,
                                                self.cfg.pretrained)
            return workload

        _, timing = _timed(prepare, self.cfg.repeats)
        stacked = state["model"]
        stacked.save(run_dir / "stacked")
        level0 = st.predict_level0(stacked.level0, self.manifest, assignment.test_ids, ft.micro_batch_size)
        level0.save(run_dir / "stacked" / "level0_test.csv")
        stacked.artifacts["level0_val"].save(run_dir / "stacked" / "level0_val.csv")
        proba, _ = st.predict_stacked(stacked, level0)
        labels = self.manifest.labels(assignment.test_ids)
        _write_predictions(run_dir / "stacked" / "stacked_test.csv", assignment.test_ids, proba)
        artifacts = {"stacked_dir": str(run_dir / "stacked"), "meta": stacked.meta.to_dict(),
                     "split": assignment.spec.to_dict()}
        return (proba, labels), timing, artifacts


def _free_backend() -> None:
    if "keras" in sys.modules:
        sys.modules["keras"].backend.clear_session()
    gc.collect()


def _write_predictions(path: Path, ids, proba: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["sample_id,probability"] + [f"{sid},{float(p)!r}" for sid, p in zip(ids, proba)]
    path.write_text("\n".join(lines) + "\n")
