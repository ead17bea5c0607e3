"""Face-image corpus ingestion, preprocessing, splitting and a synthetic stand-in.

Labels are encoded ASD = 1 (positive class) and TD = 0.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SIZE = 224
INPUT_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, 3)
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}

ASD, TD = "ASD", "TD"
LABEL_VALUE = {ASD: 1, TD: 0}
LABEL_NAME = {1: ASD, 0: TD}

# Directory names accepted for each class (lowercased, '-' and ' ' folded to '_').
CLASS_ALIASES = {
    ASD: {"asd", "autistic", "autism"},
    TD: {"td", "non_autistic", "nonautistic", "typical", "typically_developing"},
}
PRESPLIT_DIRS = {"train": "train", "valid": "val", "val": "val", "test": "test"}


class DatasetError(Exception):
    """Base class for dataset contract violations."""


class MissingClassDir(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


class UnreadableImage(DatasetError):
    pass


class ZeroDimension(DatasetError):
    pass


class TooFewSamples(DatasetError):
    pass


@dataclass(frozen=True)
class ImageSample:
    id: str
    source_path: str
    label: int
    pixels: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 (TD) or 1 (ASD), got {self.label!r}")
        if self.pixels is not None and self.pixels.shape != INPUT_SHAPE:
            raise ValueError(f"pixels must have shape {INPUT_SHAPE}, got {self.pixels.shape}")

    @property
    def label_name(self) -> str:
        return LABEL_NAME[self.label]


@dataclass
class DatasetManifest:
    samples: list[ImageSample]
    skipped: list[str] = field(default_factory=list)
    # sample id -> "train" | "val" | "test" when the corpus ships pre-split
    presplit: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique")
        self._by_id = {s.id: s for s in self.samples}

    @property
    def total(self) -> int:
        return len(self.samples)

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {ASD: 0, TD: 0}
        for s in self.samples:
            counts[s.label_name] += 1
        return counts

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def content_hash(self) -> str:
        pairs = [[s.id, s.label] for s in self.samples]
        return hashlib.sha256(json.dumps(pairs, separators=(",", ":")).encode()).hexdigest()

    def get(self, sample_id: str) -> ImageSample:
        return self._by_id[sample_id]

    def select(self, ids: Iterable[str]) -> list[ImageSample]:
        return [self._by_id[i] for i in ids]

    def labels(self, ids: Iterable[str]) -> np.ndarray:
        return np.array([self._by_id[i].label for i in ids], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "samples": [
                {"id": s.id, "source_path": s.source_path, "label": s.label_name}
                for s in self.samples
            ],
            "class_counts": self.class_counts,
            "total": self.total,
            "content_hash": self.content_hash,
            "skipped": list(self.skipped),
            "presplit": dict(sorted(self.presplit.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        samples = [
            ImageSample(d["id"], d["source_path"], LABEL_VALUE[d["label"]]) for d in data["samples"]
        ]
        manifest = cls(samples, list(data.get("skipped", [])), dict(data.get("presplit", {})))
        if manifest.content_hash != data["content_hash"]:
            raise DatasetError("manifest content_hash does not match its samples")
        return manifest


def _class_of(dirname: str) -> str | None:
    key = dirname.lower().replace("-", "_").replace(" ", "_")
    for name, aliases in CLASS_ALIASES.items():
        if key in aliases:
            return name
    return None


def _class_dirs(root: Path) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for child in sorted(p for p in root.iterdir() if p.is_dir()):
        name = _class_of(child.name)
        if name is not None and name not in found:
            found[name] = child
    return found


def decode_image(path: str | Path) -> np.ndarray:
    """Decode an image file to an H x W x C uint8 array (C in {1, 3, 4})."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "RGB", "RGBA"):
                img = img.convert("RGBA" if "A" in img.getbands() else "RGB")
            arr = np.asarray(img)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def ingest_directory(root: str | Path) -> DatasetManifest:
    """Enumerate every decodable image under ``root/<class>/`` (or ``root/<split>/<class>/``).

    Undecodable files are skipped with a warning and listed in ``manifest.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingClassDir(f"{root} is not a directory")

    split_roots = {
        PRESPLIT_DIRS[p.name.lower()]: p
        for p in sorted(root.iterdir())
        if p.is_dir() and p.name.lower() in PRESPLIT_DIRS
    }
    layouts: list[tuple[str | None, Path]]
    if split_roots:
        layouts = [(split, path) for split, path in sorted(split_roots.items())]
    else:
        layouts = [(None, root)]

    entries: list[tuple[str, str, str, Path, str | None]] = []
    for split_name, base in layouts:
        class_dirs = _class_dirs(base)
        if len(class_dirs) < 2:
            raise MissingClassDir(
                f"{base} must contain one subdirectory per class (ASD: one of "
                f"{sorted(CLASS_ALIASES[ASD])}; TD: one of {sorted(CLASS_ALIASES[TD])}), "
                f"found {sorted(class_dirs)}"
            )
        for cls, cdir in class_dirs.items():
            for f in sorted(cdir.iterdir()):
                if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                    rel = f.relative_to(root).as_posix()
                    entries.append((cls, f.name, rel, f, split_name))

    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    samples, skipped, presplit = [], [], {}
    for cls, _, rel, path, split_name in entries:
        try:
            decode_image(path)
        except UnreadableImage as exc:
            log.warning("skipping unreadable image %s", exc)
            skipped.append(rel)
            continue
        samples.append(ImageSample(rel, str(path), LABEL_VALUE[cls]))
        if split_name is not None:
            presplit[rel] = split_name
    if skipped:
        log.warning("%d unreadable image(s) skipped", len(skipped))
    if not samples:
        raise EmptyDataset(f"no decodable images under {root}")
    return DatasetManifest(samples, skipped, presplit)


def preprocess(raw_image: np.ndarray) -> np.ndarray:
    """Resize to 224x224x3 (bilinear) and scale [0, 255] to [0, 1]. No denoising."""
    arr = np.asarray(raw_image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {arr.shape}")
    h, w, c = arr.shape
    if h == 0 or w == 0:
        raise ZeroDimension(f"image has a zero dimension: {arr.shape}")
    if c not in (1, 3, 4):
        raise ValueError(f"channel count must be 1, 3 or 4, got {c}")
    if c == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif c == 4:
        arr = arr[:, :, :3]
    scaled = arr.astype(np.float32) / np.float32(255.0)
    if (h, w) == (IMAGE_SIZE, IMAGE_SIZE):
        return np.ascontiguousarray(scaled)
    planes = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(scaled[:, :, k]), mode="F").resize(
                (IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR
            )
        )
        for k in range(3)
    ]
    return np.clip(np.stack(planes, axis=2), 0.0, 1.0).astype(np.float32)


def load_pixels(sample: ImageSample) -> np.ndarray:
    if sample.pixels is not None:
        return sample.pixels
    return preprocess(decode_image(sample.source_path))


def stack_pixels(samples: Sequence[ImageSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, *INPUT_SHAPE), dtype=np.float32)
    return np.stack([load_pixels(s) for s in samples]).astype(np.float32, copy=False)


class SplitStrategy(str, enum.Enum):
    STANDARD = "standard"
    STACKING = "stacking"


STACKING_FRACTIONS = (Fraction(3, 5), Fraction(1, 10), Fraction(3, 10))
STANDARD_FRACTIONS = (Fraction(4, 5), Fraction(1, 10), Fraction(1, 10))


@dataclass(frozen=True)
class SplitSpec:
    strategy: SplitStrategy = SplitStrategy.STANDARD
    fractions: tuple[Fraction, Fraction, Fraction] = STANDARD_FRACTIONS
    seed: int = 0

    def __post_init__(self):
        fr = tuple(Fraction(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        object.__setattr__(self, "strategy", SplitStrategy(self.strategy))
        if len(fr) != 3 or any(f <= 0 for f in fr) or sum(fr) != 1:
            raise ValueError(f"fractions must be three positive rationals summing to 1, got {fr}")
        if self.strategy is SplitStrategy.STACKING and fr != STACKING_FRACTIONS:
            raise ValueError("STACKING fractions are fixed at (3/5, 1/10, 3/10)")

    @classmethod
    def stacking(cls, seed: int = 0) -> "SplitSpec":
        return cls(SplitStrategy.STACKING, STACKING_FRACTIONS, seed)

    @classmethod
    def standard(cls, seed: int = 0, fractions=STANDARD_FRACTIONS) -> "SplitSpec":
        return cls(SplitStrategy.STANDARD, fractions, seed)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "fractions": [str(f) for f in self.fractions],
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    spec: SplitSpec

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train_ids), len(self.val_ids), len(self.test_ids)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
        }


def split_sizes(n: int, fractions: Sequence[Fraction]) -> tuple[int, int, int]:
    train = math.floor(Fraction(fractions[0]) * n)
    val = math.floor(Fraction(fractions[1]) * n)
    return train, val, n - train - val


def _apportion(target: int, quotas: list[Fraction], caps: list[int]) -> list[int]:
    # floor each quota, then hand the leftover to the largest fractional parts
    alloc = [min(math.floor(q), cap) for q, cap in zip(quotas, caps)]
    order = sorted(range(len(quotas)), key=lambda k: (-(quotas[k] - math.floor(quotas[k])), k))
    short = target - sum(alloc)
    for k in order * 2:
        if short <= 0:
            break
        if alloc[k] < caps[k]:
            alloc[k] += 1
            short -= 1
    if short != 0:
        raise TooFewSamples(f"cannot place {target} samples under per-class caps {caps}")
    return alloc


def split(manifest: DatasetManifest, spec: SplitSpec) -> SplitAssignment:
    """Stratified train/val/test assignment with the floor size rule."""
    if (
        spec.strategy is SplitStrategy.STANDARD
        and manifest.presplit
        and set(manifest.presplit) == set(manifest.ids)
    ):
        parts = {"train": [], "val": [], "test": []}
        for sid in manifest.ids:
            parts[manifest.presplit[sid]].append(sid)
        if not all(parts.values()):
            raise TooFewSamples(f"pre-split layout has an empty split: { {k: len(v) for k, v in parts.items()} }")
        return SplitAssignment(tuple(parts["train"]), tuple(parts["val"]), tuple(parts["test"]), spec)

    n = manifest.total
    n_train, n_val, n_test = split_sizes(n, spec.fractions)
    if min(n_train, n_val, n_test) <= 0:
        raise TooFewSamples(
            f"N={n} gives split sizes {(n_train, n_val, n_test)}; every split must be nonempty"
        )

    by_class = {label: [s.id for s in manifest.samples if s.label == label] for label in (1, 0)}
    labels = [k for k in (1, 0) if by_class[k]]
    counts = [len(by_class[k]) for k in labels]
    f_train, f_val, _ = spec.fractions
    train_alloc = _apportion(n_train, [f_train * c for c in counts], counts)
    val_alloc = _apportion(
        n_val, [f_val * c for c in counts], [c - t for c, t in zip(counts, train_alloc)]
    )

    train, val, test = [], [], []
    for label, n_tr, n_va in zip(labels, train_alloc, val_alloc):
        ids = by_class[label]
        rng = np.random.default_rng([spec.seed, label])
        order = [ids[i] for i in rng.permutation(len(ids))]
        train += order[:n_tr]
        val += order[n_tr : n_tr + n_va]
        test += order[n_tr + n_va :]
    position = {sid: i for i, sid in enumerate(manifest.ids)}
    key = position.__getitem__
    return SplitAssignment(
        tuple(sorted(train, key=key)), tuple(sorted(val, key=key)), tuple(sorted(test, key=key)), spec
    )


SYNTH_BASE_INTENSITY = 0.5
SYNTH_MARGIN = 0.3
SYNTH_NOISE = 0.08


def synth_image(label: int, rng: np.random.Generator, margin: float = SYNTH_MARGIN) -> np.ndarray:
    """One synthetic face stand-in: a class-shifted mean intensity plus pixel noise."""
    mean = SYNTH_BASE_INTENSITY + (margin / 2 if label == 1 else -margin / 2)
    img = mean + SYNTH_NOISE * rng.standard_normal(INPUT_SHAPE)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(n_per_class: int, seed: int = 0, margin: float = SYNTH_MARGIN) -> DatasetManifest:
    """Generate ``2 * n_per_class`` labelled 224x224x3 images, deterministic in ``seed``.

    ASD images are brighter than TD images by ``margin`` in expected mean intensity.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    samples = []
    for name in (ASD, TD):
        label = LABEL_VALUE[name]
        rng = np.random.default_rng([seed, label])
        for i in range(n_per_class):
            sid = f"synth/{name}/{i:06d}"
            samples.append(ImageSample(sid, f"synth://{seed}/{sid}", label, synth_image(label, rng, margin)))
    return DatasetManifest(samples)


def write_image_tree(manifest: DatasetManifest, root: str | Path) -> Path:
    """Write in-memory samples as PNGs under ``root/<ASD|TD>/``; returns ``root``."""
    root = Path(root)
    for s in manifest.samples:
        d = root / s.label_name
        d.mkdir(parents=True, exist_ok=True)
        img = np.round(load_pixels(s) * 255).astype(np.uint8)
        Image.fromarray(img).save(d / f"{Path(s.id).name}.png")
    return root
