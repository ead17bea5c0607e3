"""Run configuration: JSON config file merged under command-line overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from fractions import Fraction
from pathlib import Path

from .bench import MODEL_NAMES

# Fields that locate or label a run rather than define it; excluded from the hash.
_UNHASHED = {"out_dir", "device_index", "accelerator", "model"}


@dataclass(frozen=True)
class RunConfig:
    model: str = "all"
    data_root: str | None = None
    synth: int | None = None
    synth_margin: float = 0.3
    seed: int = 0
    # fine-tuning
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    micro_batch_size: int = 8
    momentum: float = 0.0
    pretrained: bool = False
    # standard split used by the single models (ignored for a pre-split corpus)
    standard_fractions: tuple[str, str, str] = ("4/5", "1/10", "1/10")
    # meta-learner
    meta_l2: float = 1.0
    # GBDT
    n_trees: int = 100
    max_depth: int = 6
    gbdt_learning_rate: float = 0.3
    extractor: str = "stock"  # stock | finetuned
    # device
    device_index: int = 1
    accelerator: str = "auto"  # auto | off
    repeats: int = 1
    out_dir: str = "runs"

    def __post_init__(self):
        if self.model != "all" and self.model not in MODEL_NAMES:
            raise ValueError(f"unknown model {self.model!r}; choose from {MODEL_NAMES} or 'all'")
        if self.accelerator not in ("auto", "off"):
            raise ValueError("accelerator must be 'auto' or 'off'")
        if self.extractor not in ("stock", "finetuned"):
            raise ValueError("extractor must be 'stock' or 'finetuned'")
        if self.device_index < 1:
            raise ValueError("device_index starts at 1")
        object.__setattr__(self, "standard_fractions", tuple(str(Fraction(f)) for f in self.standard_fractions))

    def to_dict(self) -> dict:
        return asdict(self)

    def hashed_dict(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}

    def config_hash(self, model: str | None = None) -> str:
        payload = self.hashed_dict() | {"model": model or self.model}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def merged(self, overrides: dict) -> "RunConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        clean = {k: (tuple(v) if k == "standard_fractions" else v) for k, v in overrides.items() if v is not None}
        return replace(self, **clean)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (non-None values win)."""
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.merged(json.loads(Path(path).read_text()))
    if overrides:
        cfg = cfg.merged(overrides)
    return cfg
