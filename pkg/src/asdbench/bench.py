"""Device profiling, exclusive wall-clock timing, duration formatting and the run-record store."""
from __future__ import annotations

import datetime as dt
import json
import os
import platform
import re
import shutil
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Callable, Iterator

from .metrics import MetricsReport

# Set to a truthy value to hide accelerators from the compute backend.
NO_ACCELERATOR_ENV = "ASDBENCH_NO_ACCELERATOR"

MODEL_NAMES = (
    "inceptionv3",
    "xception",
    "densenet121",
    "mobilenet",
    "resnet50",
    "vgg16",
    "xgb-vgg16",
    "stacked",
)


class StoreCorrupt(Exception):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = path
        self.lineno = lineno


class NegativeDuration(ValueError):
    pass


class ZeroDuration(ValueError):
    pass


class WorkloadFailed(Exception):
    """A timed workload raised; ``timing`` holds the (failed) measurement."""

    def __init__(self, timing: "TimingRecord", error: BaseException):
        super().__init__(f"workload failed after {timing.wall_seconds:.3f}s: {error!r}")
        self.timing = timing
        self.error = error


def accelerator_disabled() -> bool:
    return os.environ.get(NO_ACCELERATOR_ENV, "").strip().lower() not in ("", "0", "false", "no")


def disable_accelerator() -> None:
    """Hide GPUs from TensorFlow/CUDA. Only effective before the backend initialises."""
    os.environ[NO_ACCELERATOR_ENV] = "1"
    os.environ["CUDA_VISIBLE_DEVICES"] = "-1"


@dataclass(frozen=True)
class DeviceProfile:
    device_label: str
    cpu_model: str
    ram_gb: float
    gpu_model: str | None
    accelerator_enabled: bool

    def __post_init__(self):
        if self.accelerator_enabled and not self.gpu_model:
            raise ValueError("accelerator_enabled requires a gpu_model")

    def to_dict(self) -> dict:
        return {
            "device_label": self.device_label,
            "cpu_model": self.cpu_model,
            "ram_gb": self.ram_gb,
            "gpu_model": self.gpu_model,
            "accelerator_enabled": self.accelerator_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        return cls(d["device_label"], d["cpu_model"], float(d["ram_gb"]), d.get("gpu_model"), bool(d["accelerator_enabled"]))


def _cpu_model() -> str:
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.lower().startswith("model name"):
                return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or "unknown"


def _ram_gb() -> float:
    try:
        return round(os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES") / 1024**3, 1)
    except (ValueError, OSError, AttributeError):
        return 0.0


def _gpu_model() -> str | None:
    smi = shutil.which("nvidia-smi")
    if smi is None:
        return None
    try:
        out = subprocess.run(
            [smi, "--query-gpu=name", "--format=csv,noheader"],
            capture_output=True, text=True, timeout=10, check=True,
        ).stdout
    except (OSError, subprocess.SubprocessError):
        return None
    names = [line.strip() for line in out.splitlines() if line.strip()]
    return names[0] if names else None


def detect_device(device_index: int = 1, no_accelerator: bool | None = None) -> DeviceProfile:
    """Best-effort host description; GPU presence is probed through ``nvidia-smi``."""
    if no_accelerator is None:
        no_accelerator = accelerator_disabled()
    gpu = _gpu_model()
    return DeviceProfile(
        device_label=f"Device{device_index}",
        cpu_model=_cpu_model(),
        ram_gb=_ram_gb(),
        gpu_model=gpu,
        accelerator_enabled=gpu is not None and not no_accelerator,
    )


_KEY_RE = re.compile(r"^D_(\d+)('?)$")


@dataclass(frozen=True, order=True)
class RunKey:
    device_index: int
    accelerator_enabled: bool

    def __post_init__(self):
        if self.device_index < 1:
            raise ValueError("device_index starts at 1")

    def render(self) -> str:
        return f"D_{self.device_index}" + ("" if self.accelerator_enabled else "'")

    __str__ = render

    @classmethod
    def parse(cls, text: str) -> "RunKey":
        m = _KEY_RE.match(text.strip().replace("′", "'"))
        if not m:
            raise ValueError(f"not a run key: {text!r}")
        return cls(int(m.group(1)), m.group(2) == "")


@dataclass(frozen=True)
class TimingRecord:
    wall_seconds: float
    started_at: str
    ended_at: str
    started_ns: int
    ended_ns: int
    clock_source: str = "monotonic"
    failed: bool = False

    def to_dict(self) -> dict:
        return {
            "wall_seconds": self.wall_seconds,
            "clock_source": self.clock_source,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "started_ns": self.started_ns,
            "ended_ns": self.ended_ns,
            "failed": self.failed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TimingRecord":
        return cls(
            float(d["wall_seconds"]), d["started_at"], d["ended_at"],
            int(d.get("started_ns", 0)), int(d.get("ended_ns", 0)),
            d.get("clock_source", "monotonic"), bool(d.get("failed", False)),
        )

    @classmethod
    def from_seconds(cls, seconds: float) -> "TimingRecord":
        """A record for an externally measured duration (e.g. a value copied from a table)."""
        if seconds <= 0:
            raise ZeroDuration("wall time must be positive")
        end = dt.datetime(2000, 1, 1, tzinfo=dt.timezone.utc)
        start = end - dt.timedelta(seconds=seconds)
        return cls(float(seconds), start.isoformat(), end.isoformat(), 0, int(seconds * 1e9), "external")


# Reentrant so a timed pipeline may time its own inner training steps.
RUN_LOCK = threading.RLock()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def time_run(workload: Callable[..., Any], *args, **kwargs) -> tuple[Any, TimingRecord]:
    """Run ``workload`` under the process-wide run lock and time it with the monotonic clock."""
    with RUN_LOCK:
        started_at = _now()
        t0 = time.perf_counter_ns()
        try:
            result = workload(*args, **kwargs)
        except Exception as exc:
            t1 = time.perf_counter_ns()
            timing = TimingRecord(max(t1 - t0, 1) / 1e9, started_at, _now(), t0, t1, failed=True)
            raise WorkloadFailed(timing, exc) from exc
        t1 = time.perf_counter_ns()
        ended_at = _now()
    return result, TimingRecord(max(t1 - t0, 1) / 1e9, started_at, ended_at, t0, t1)


def time_repeated(workload: Callable[[], Any], repeats: int = 1) -> tuple[Any, TimingRecord]:
    """Time ``repeats`` runs and keep the run with the median wall time."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    runs = [time_run(workload) for _ in range(repeats)]
    runs.sort(key=lambda r: r[1].wall_seconds)
    return runs[(repeats - 1) // 2]


def _half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def format_duration(seconds: float) -> str:
    """``"5h 27min"`` from 3600 s up (seconds dropped), ``"33min 42s"`` below."""
    if seconds < 0:
        raise NegativeDuration(f"negative duration: {seconds}")
    if seconds >= 3600:
        hours = int(seconds // 3600)
        minutes = _half_up((seconds - hours * 3600) / 60)
        if minutes == 60:
            hours, minutes = hours + 1, 0
        return f"{hours}h {minutes}min"
    minutes = int(seconds // 60)
    secs = _half_up(seconds - minutes * 60)
    if secs == 60:
        minutes, secs = minutes + 1, 0
    if minutes == 60:
        return "1h 0min"
    return f"{minutes}min {secs}s"


_DURATION_RE = re.compile(r"^(?:(\d+)\s*(?:h|hr|hrs)\s*)?(?:(\d+)\s*min\s*)?(?:(\d+)\s*s)?$")


def canonical_duration_text(text: str) -> str:
    """Normalise table spellings such as ``"33 min 42s"`` or ``"1hr 3min"``."""
    m = _DURATION_RE.match(text.strip())
    if not m or not any(m.groups()):
        raise ValueError(f"unrecognised duration: {text!r}")
    h, mi, s = m.groups()
    parts = []
    if h is not None:
        parts.append(f"{int(h)}h")
    if mi is not None:
        parts.append(f"{int(mi)}min")
    if s is not None:
        parts.append(f"{int(s)}s")
    return " ".join(parts)


def parse_duration(text: str) -> int:
    m = _DURATION_RE.match(text.strip())
    if not m or not any(m.groups()):
        raise ValueError(f"unrecognised duration: {text!r}")
    h, mi, s = (int(g) if g else 0 for g in m.groups())
    return h * 3600 + mi * 60 + s


def speedup(cpu: TimingRecord | float, acc: TimingRecord | float) -> float:
    c = cpu.wall_seconds if isinstance(cpu, TimingRecord) else float(cpu)
    a = acc.wall_seconds if isinstance(acc, TimingRecord) else float(acc)
    if c <= 0 or a <= 0:
        raise ZeroDuration("speedup needs two positive durations")
    return c / a


def new_run_id() -> str:
    return dt.datetime.now(dt.timezone.utc).strftime("%Y%m%dT%H%M%S") + "-" + uuid.uuid4().hex[:8]


@dataclass
class RunRecord:
    model_name: str
    run_key: RunKey
    device: DeviceProfile
    metrics: MetricsReport | None
    timing: TimingRecord
    config_hash: str
    run_id: str = field(default_factory=new_run_id)
    created_at: str = field(default_factory=_now)
    status: str = "ok"
    config: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model_name not in MODEL_NAMES:
            raise ValueError(f"unknown model name {self.model_name!r}; expected one of {MODEL_NAMES}")

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "model_name": self.model_name,
            "run_key": self.run_key.render(),
            "device": self.device.to_dict(),
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "timing": self.timing.to_dict(),
            "config_hash": self.config_hash,
            "created_at": self.created_at,
            "status": self.status,
            "config": self.config,
            "artifacts": self.artifacts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            model_name=d["model_name"],
            run_key=RunKey.parse(d["run_key"]),
            device=DeviceProfile.from_dict(d["device"]),
            metrics=None if d.get("metrics") is None else MetricsReport.from_dict(d["metrics"]),
            timing=TimingRecord.from_dict(d["timing"]),
            config_hash=d["config_hash"],
            run_id=d["run_id"],
            created_at=d["created_at"],
            status=d.get("status", "ok"),
            config=d.get("config", {}),
            artifacts=d.get("artifacts", {}),
        )


class RunStore:
    """Append-only JSON-lines store of :class:`RunRecord` (``runs/records.jsonl``)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, record: RunRecord) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(record.to_dict(), sort_keys=True) + "\n"
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())

    def __iter__(self) -> Iterator[RunRecord]:
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    yield RunRecord.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise StoreCorrupt(self.path, lineno, str(exc)) from exc

    def load(
        self,
        model_name: str | None = None,
        run_key: RunKey | str | None = None,
        since: str | None = None,
        until: str | None = None,
    ) -> list[RunRecord]:
        """Records in append order, optionally filtered. ``since``/``until`` compare ISO dates."""
        if isinstance(run_key, str):
            run_key = RunKey.parse(run_key)
        out = []
        for rec in self:
            if model_name is not None and rec.model_name != model_name:
                continue
            if run_key is not None and rec.run_key != run_key:
                continue
            if since is not None and rec.created_at < since:
                continue
            if until is not None and rec.created_at > until:
                continue
            out.append(rec)
        return out


def load_runs(path: str | Path, **filters) -> list[RunRecord]:
    return RunStore(path).load(**filters)


def append_run(path: str | Path, record: RunRecord) -> None:
    RunStore(path).append(record)
