"""Run directories (append-only, lock-guarded) and the metrics stream."""
from __future__ import annotations

import json
import os
import time
from pathlib import Path

RUN_ROOT_ENV = "INAS_RUN_ROOT"
LOCK_NAME = ".lock"
METRICS_NAME = "metrics.jsonl"
CONFIG_NAME = "config.resolved.toml"

METRIC_KEYS = (
    "run_id", "stage", "epoch", "phase", "loss", "acc",
    "mean_latency_ms", "U_t", "L_t", "mean_R", "mean_entropy", "collapsed",
)


class RunDirError(RuntimeError):
    pass


def default_run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


class RunDir:
    """One writer per directory, enforced with an exclusive lock file."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._locked = False

    @staticmethod
    def create(stage: str, root: Path | None = None, explicit: Path | None = None) -> "RunDir":
        if explicit is not None:
            path = Path(explicit)
            if path.exists() and any(path.iterdir()):
                raise RunDirError(f"run directory {path} already exists and is not empty")
        else:
            root = Path(root) if root is not None else default_run_root()
            stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
            path = root / f"{stage}-{stamp}"
            k = 0
            while path.exists():
                k += 1
                path = root / f"{stage}-{stamp}-{k}"
        path.mkdir(parents=True, exist_ok=True)
        run = RunDir(path)
        run.acquire_lock()
        return run

    @staticmethod
    def attach(path) -> "RunDir":
        """Open an existing run directory (for reports); takes the lock too."""
        path = Path(path)
        if not path.is_dir():
            raise RunDirError(f"run directory {path} does not exist")
        run = RunDir(path)
        run.acquire_lock()
        return run

    def acquire_lock(self) -> None:
        lock = self.path / LOCK_NAME
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirError(f"run directory {self.path} is locked by another process ({lock})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        self._locked = True

    def release_lock(self) -> None:
        if self._locked:
            (self.path / LOCK_NAME).unlink(missing_ok=True)
            self._locked = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release_lock()

    # -- well-known paths ---------------------------------------------------

    @property
    def metrics_path(self) -> Path:
        return self.path / METRICS_NAME

    @property
    def config_path(self) -> Path:
        return self.path / CONFIG_NAME

    @property
    def checkpoints_dir(self) -> Path:
        d = self.path / "checkpoints"
        d.mkdir(exist_ok=True)
        return d

    @property
    def reports_dir(self) -> Path:
        d = self.path / "reports"
        d.mkdir(exist_ok=True)
        return d


class MetricsWriter:
    """Append-only JSON-lines stream, one record per epoch-phase.

    Every record carries the full fixed key set; inapplicable values are null.
    Records contain nothing time- or host-dependent, so identical runs produce
    byte-identical streams.
    """

    def __init__(self, path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id

    def append(self, stage: str, epoch: int, phase: str, **values) -> dict:
        unknown = set(values) - set(METRIC_KEYS)
        if unknown:
            raise ValueError(f"unknown metric keys {sorted(unknown)}")
        record = {key: None for key in METRIC_KEYS}
        record.update(run_id=self.run_id, stage=stage, epoch=epoch, phase=phase)
        for key, val in values.items():
            if isinstance(val, float) and not np_isfinite(val):
                val = None
            record[key] = val
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        return record


def np_isfinite(x) -> bool:
    return x == x and x not in (float("inf"), float("-inf"))


def read_metrics(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
