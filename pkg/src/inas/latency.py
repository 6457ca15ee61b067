"""Module-wise latency lookup tables: microbenchmark profiling, additive
estimation for child architectures, and estimator-vs-wall-clock validation.

Profiling must run single-threaded with no concurrent in-process work;
estimation is pure and thread-safe.
"""
from __future__ import annotations

import logging
import platform
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .metagraph import MetaGraph, MetaGraphSpec, Selection, sample_uniform_valid

log = logging.getLogger(__name__)

HEADER = "INAS-LAT v1"
NET_CELL = -1  # cell index used for the stem/head/controller entries
LOW_CONFIDENCE_TOKEN = "low-confidence"


@dataclass(frozen=True)
class ModuleLatency:
    cell_index: int
    kind: str
    mean_ms: float
    std_ms: float
    samples: int

    def __post_init__(self):
        if self.mean_ms <= 0:
            raise ValueError(f"mean latency must be > 0, got {self.mean_ms}")
        if self.std_ms < 0 or self.samples < 1:
            raise ValueError("std must be >= 0 and samples >= 1")


@dataclass
class LatencyTable:
    entries: dict[tuple[int, str], ModuleLatency]
    fingerprint: str

    def __post_init__(self):
        if not self.fingerprint.strip():
            raise ValueError("fingerprint must be non-empty")

    @property
    def low_confidence(self) -> bool:
        return LOW_CONFIDENCE_TOKEN in self.fingerprint

    def validate_for(self, spec: MetaGraphSpec) -> None:
        """A table covers a spec when it has exactly M + 3 entries: one per
        selectable module plus stem, head, and controller."""
        expected = {(NET_CELL, "stem"), (NET_CELL, "head"), (NET_CELL, "controller")}
        expected.update(spec.module_ids())
        got = set(self.entries)
        if got != expected:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValueError(f"latency table does not match spec: missing {missing}, extra {extra}")

    def save(self, path) -> None:
        lines = [HEADER, f"fingerprint: {self.fingerprint}"]
        for (cell, kind), e in sorted(self.entries.items()):
            lines.append(f"{cell} {kind} {e.mean_ms:.9f} {e.std_ms:.9f} {e.samples}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @staticmethod
    def load(path) -> "LatencyTable":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if not lines or lines[0] != HEADER:
            raise ValueError(f"{path}: not a latency table (expected header {HEADER!r})")
        if len(lines) < 2 or not lines[1].startswith("fingerprint: "):
            raise ValueError(f"{path}: missing fingerprint line")
        fingerprint = lines[1][len("fingerprint: "):]
        entries = {}
        for ln in lines[2:]:
            if not ln.strip():
                continue
            cell_s, kind, mean_s, std_s, samples_s = ln.split()
            e = ModuleLatency(int(cell_s), kind, float(mean_s), float(std_s), int(samples_s))
            entries[(e.cell_index, e.kind)] = e
        return LatencyTable(entries, fingerprint)


def environment_fingerprint(batch_size: int = 1, resolution: int = 32) -> str:
    return (
        f"host={platform.node()} {platform.machine()} {platform.system()} "
        f"python={sys.version.split()[0]} numpy={np.__version__} "
        f"| batch={batch_size} res={resolution}x{resolution}"
    )


def trimmed_stats(samples_ms: list[float]) -> tuple[float, float, int]:
    """Mean/std after discarding the top and bottom 5% of repetitions."""
    arr = np.sort(np.asarray(samples_ms, dtype=np.float64))
    k = int(len(arr) * 0.05)
    kept = arr[k:len(arr) - k] if len(arr) - 2 * k >= 1 else arr
    return float(kept.mean()), float(kept.std()), len(kept)


def timer_resolution_ms() -> float:
    """Smallest positive tick observed from the monotonic clock."""
    best = float("inf")
    for _ in range(200):
        a = time.perf_counter_ns()
        b = time.perf_counter_ns()
        while b == a:
            b = time.perf_counter_ns()
        best = min(best, b - a)
    return best / 1e6


def _time_callable(fn, warmup: int, reps: int) -> tuple[float, float, int]:
    for _ in range(warmup):
        fn()
    durations = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        durations.append((time.perf_counter_ns() - t0) / 1e6)
    return trimmed_stats(durations)


def profile_modules(graph: MetaGraph, controller, warmup: int, reps: int,
                    seed: int = 0) -> LatencyTable:
    """Wall-clock profile of every selectable module plus stem, head, and
    controller, each at batch size 1 and its actual input shape."""
    if reps < 30:
        raise ValueError(f"reps must be >= 30, got {reps}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    spec = graph.spec
    rng = np.random.default_rng(seed)
    sizes = spec.cell_input_hw()
    dtype = graph.dtype
    entries: dict[tuple[int, str], ModuleLatency] = {}

    stem_in = rng.normal(size=(1, spec.input_channels, spec.input_size, spec.input_size)).astype(dtype)
    from . import nn as _nn
    mean, std, kept = _time_callable(lambda: graph.stem_forward(_nn.Tensor(stem_in)), warmup, reps)
    entries[(NET_CELL, "stem")] = ModuleLatency(NET_CELL, "stem", mean, std, kept)

    for ref, size in zip(graph._modules, np.repeat(sizes, [len(c.enabled_kinds) for c in spec.cells])):
        x = rng.normal(size=(1, ref.cell.in_channels, int(size), int(size))).astype(dtype)
        xt = _nn.Tensor(x)
        mean, std, kept = _time_callable(lambda: graph._module_forward(ref, xt), warmup, reps)
        entries[(ref.cell.index, ref.kind)] = ModuleLatency(ref.cell.index, ref.kind, mean, std, kept)

    last = spec.cells[-1]
    head_hw = sizes[-1] if last.stride == 1 else (sizes[-1] + 2 - 3) // 2 + 1
    head_in = _nn.Tensor(rng.normal(size=(1, last.out_channels, head_hw, head_hw)).astype(dtype))
    mean, std, kept = _time_callable(lambda: graph.head_forward(head_in), warmup, reps)
    entries[(NET_CELL, "head")] = ModuleLatency(NET_CELL, "head", mean, std, kept)

    ctrl_in = rng.normal(size=(1, spec.input_channels, spec.input_size, spec.input_size)).astype(dtype)
    mean, std, kept = _time_callable(lambda: controller.forward(ctrl_in), warmup, reps)
    entries[(NET_CELL, "controller")] = ModuleLatency(NET_CELL, "controller", mean, std, kept)

    fingerprint = environment_fingerprint(1, spec.input_size)
    resolution = timer_resolution_ms()
    smallest = min(e.mean_ms for e in entries.values())
    if resolution > 0.01 * smallest:
        log.warning(
            "timer resolution %.6f ms exceeds 1%% of smallest module mean %.6f ms; table flagged low-confidence",
            resolution, smallest,
        )
        fingerprint += f" | {LOW_CONFIDENCE_TOKEN}"
    table = LatencyTable(entries, fingerprint)
    table.validate_for(spec)
    return table


def check_fingerprint(table: LatencyTable, spec: MetaGraphSpec) -> None:
    """Tables are host-specific; a mismatch is survivable but worth a warning."""
    current = environment_fingerprint(1, spec.input_size)
    stored = table.fingerprint.split(" | " + LOW_CONFIDENCE_TOKEN)[0]
    if stored != current:
        log.warning("latency table fingerprint mismatch:\n  table: %s\n  host:  %s", stored, current)


def estimate_latency(table: LatencyTable, spec: MetaGraphSpec, sel: Selection) -> float:
    """stem + head + controller + sum of active module means; pure function."""
    try:
        total = (
            table.entries[(NET_CELL, "stem")].mean_ms
            + table.entries[(NET_CELL, "head")].mean_ms
            + table.entries[(NET_CELL, "controller")].mean_ms
        )
        for bit, mid in zip(sel.bits, spec.module_ids()):
            if bit:
                total += table.entries[mid].mean_ms
    except KeyError as exc:
        raise KeyError(f"latency table has no entry for {exc.args[0]}") from None
    return total


def estimate_latency_batch(table: LatencyTable, spec: MetaGraphSpec, selections) -> np.ndarray:
    base = (
        table.entries[(NET_CELL, "stem")].mean_ms
        + table.entries[(NET_CELL, "head")].mean_ms
        + table.entries[(NET_CELL, "controller")].mean_ms
    )
    means = np.array([table.entries[mid].mean_ms for mid in spec.module_ids()])
    mask = np.stack([s.bits for s in selections]).astype(np.float64)
    return base + mask @ means


def measure_selection_ms(graph: MetaGraph, controller, sel: Selection,
                         warmup: int, reps: int, rng: np.random.Generator) -> float:
    """True end-to-end wall time: controller pass plus the selected child."""
    spec = graph.spec
    x = rng.normal(size=(1, spec.input_channels, spec.input_size, spec.input_size)).astype(graph.dtype)

    def run():
        controller.forward(x)
        graph.forward_selected(x, sel)

    mean, _, _ = _time_callable(run, warmup, reps)
    return mean


def pearson_r(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.corrcoef(a, b)[0, 1])


@dataclass
class CorrelationResult:
    r: float
    threshold: float
    estimated_ms: list[float]
    measured_ms: list[float]
    selections: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.r >= self.threshold

    def write_scatter_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("estimated_ms,measured_ms\n")
            for e, m in zip(self.estimated_ms, self.measured_ms):
                fh.write(f"{e},{m}\n")


def validate_correlation(table: LatencyTable, graph: MetaGraph, controller,
                         n_samples: int, rng: np.random.Generator,
                         warmup: int = 3, reps: int = 30,
                         threshold: float = 0.9) -> CorrelationResult:
    """Sample uniform valid architectures, measure each end to end, and
    compare against the additive estimate."""
    if n_samples < 100:
        raise ValueError(f"n_samples must be >= 100, got {n_samples}")
    spec = graph.spec
    table.validate_for(spec)
    estimated, measured, names = [], [], []
    for _ in range(n_samples):
        sel = sample_uniform_valid(spec, rng)
        estimated.append(estimate_latency(table, spec, sel))
        measured.append(measure_selection_ms(graph, controller, sel, warmup, reps, rng))
        names.append(sel.to_string(spec))
    r = pearson_r(estimated, measured)
    result = CorrelationResult(r, threshold, estimated, measured, names)
    if not result.passed:
        log.warning("latency estimator correlation %.4f below threshold %.2f", r, threshold)
    return result
