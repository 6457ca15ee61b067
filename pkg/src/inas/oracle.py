"""Synthetic-oracle simulation: the controller trains against a truth table
of per-architecture correctness probabilities and latencies instead of a
neural meta-graph, so the search machinery can be checked exactly against
brute-force enumeration.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .controller import (
    ControllerNet,
    bernoulli_entropy,
    encourage,
    policy_forward,
    policy_gradient_update,
    sample_actions,
    threshold_baseline,
)
from .metagraph import (
    DEFAULT_KIND,
    MetaGraphSpec,
    Selection,
    repair_selection,
    selection_is_valid,
)
from .nn import Adam
from .reward import RewardSchedule, bounds_at, init_bounds, latency_reward
from .runs import MetricsWriter

log = logging.getLogger(__name__)

MAX_ENUMERABLE = 4096


@dataclass
class OracleSpec:
    """Exhaustively enumerable stand-in environment.

    correct_prob[g, a]: probability that architecture `a` classifies a
    group-`g` instance correctly; latency_ms[a]: its fixed latency.
    """

    graph_spec: MetaGraphSpec
    archs: list[Selection]
    correct_prob: np.ndarray     # [groups, len(archs)]
    latency_ms: np.ndarray       # [len(archs)]

    def __post_init__(self):
        if len(self.archs) > MAX_ENUMERABLE:
            raise ValueError(f"{len(self.archs)} architectures exceed the enumerable cap {MAX_ENUMERABLE}")
        if self.correct_prob.shape[1] != len(self.archs):
            raise ValueError("correct_prob must have one column per architecture")
        if np.any(self.latency_ms <= 0):
            raise ValueError("latencies must be positive")

    @property
    def num_groups(self) -> int:
        return self.correct_prob.shape[0]

    def arch_index(self) -> dict[bytes, int]:
        return {sel.bits.tobytes(): i for i, sel in enumerate(self.archs)}


@dataclass
class OracleReport:
    agreement: float | None            # None = degenerate (uniform rewards)
    per_group_agreement: list[float | None]
    optimum_arch: list[int | None]
    converged_probs: np.ndarray
    schedule: RewardSchedule
    final_entropy: float


def enumerate_valid(spec: MetaGraphSpec) -> list[Selection]:
    """Every valid selection, in a deterministic per-cell product order."""
    per_cell: list[list[tuple[int, ...]]] = []
    for cell in spec.cells:
        k = len(cell.enabled_kinds)
        combos = []
        for code in itertools.product((0, 1), repeat=k):
            bits = np.array(code, dtype=np.uint8)
            if bits.sum() == 0:
                continue
            if cell.shape_changing and not bits[cell.enabled_kinds.index(DEFAULT_KIND)]:
                continue
            combos.append(code)
        per_cell.append(combos)
    out = []
    for parts in itertools.product(*per_cell):
        sel = Selection(np.concatenate([np.array(p, dtype=np.uint8) for p in parts]))
        assert selection_is_valid(spec, sel)
        out.append(sel)
    return out


def expected_reward(oracle: OracleSpec, group: int, arch: int,
                    upper: float, lower: float, r_p: float) -> float:
    r_a = latency_reward(float(oracle.latency_ms[arch]), upper, lower)
    return float(oracle.correct_prob[group, arch]) * r_p * r_a


def brute_force_optimum(oracle: OracleSpec, upper: float, lower: float,
                        r_p: float) -> list[int | None]:
    """argmax over all valid architectures of expected reward, per group;
    None when the landscape is flat (no meaningful optimum)."""
    out: list[int | None] = []
    for g in range(oracle.num_groups):
        values = np.array([
            expected_reward(oracle, g, a, upper, lower, r_p)
            for a in range(len(oracle.archs))
        ])
        if values.max() - values.min() < 1e-12:
            out.append(None)
        else:
            out.append(int(values.argmax()))
    return out


# ---------------------------------------------------------------------------
# truth-table generators


def small_oracle_graph_spec(n_cells: int = 2,
                            kinds=("BasicConv", "MBConv-3F-3K", "MBConv-3F-6K"),
                            input_size: int = 16) -> MetaGraphSpec:
    return MetaGraphSpec.build(
        [4] * (n_cells + 1), [1] * n_cells, 4, 2, kinds=kinds,
        input_channels=1, input_size=input_size,
    )


def _latency_costs(n_modules: int, rng: np.random.Generator) -> tuple[float, np.ndarray]:
    base = 0.1
    costs = rng.uniform(0.15, 0.45, size=n_modules)
    return base, costs


def _optimum_stable_late(oracle: OracleSpec, total_epochs: int, r_p: float) -> list[int | None] | None:
    """The per-group optimum, provided it is stationary over the last 40% of
    the schedule (so a tracking controller has a fixed target to land on)."""
    sched = _oracle_schedule(oracle, total_epochs)
    final = brute_force_optimum(oracle, sched.u_final, sched.l_final, r_p)
    for frac in (0.6, 0.75, 0.9):
        u, lo = bounds_at(sched, int(frac * total_epochs))
        if brute_force_optimum(oracle, u, lo, r_p) != final:
            return None
    return final


def make_two_group_oracle(seed: int, n_cells: int = 2, total_epochs: int = 150) -> OracleSpec:
    """Two instance groups with distinct, unique brute-force optima.

    Correctness probability decays with Hamming distance from a per-group
    target architecture, so the reward landscape has per-bit gradients; the
    construction retries until the final optimum is unique, differs between
    groups, and is already in place over the tail of the bound schedule.
    """
    spec = small_oracle_graph_spec(n_cells)
    archs = enumerate_valid(spec)
    mat = np.stack([a.bits for a in archs]).astype(np.float64)
    for attempt in range(256):
        rng = np.random.default_rng(seed + 1000 * attempt)
        base, costs = _latency_costs(spec.module_count, rng)
        latency = base + mat @ costs
        targets = rng.choice(len(archs), size=2, replace=False)
        prob = np.empty((2, len(archs)))
        for g, t in enumerate(targets):
            dist = np.abs(mat - mat[t]).sum(axis=1)
            prob[g] = np.clip(0.95 - 0.18 * dist, 0.05, 0.95)
        oracle = OracleSpec(spec, archs, prob, latency)
        sched = _oracle_schedule(oracle, total_epochs)
        optima = _optimum_stable_late(oracle, total_epochs, r_p=30.0)
        if (
            optima is not None
            and None not in optima
            and optima[0] != optima[1]
            and _optima_unique(oracle, optima, sched.u_final, sched.l_final)
        ):
            return oracle
    raise RuntimeError("could not construct a two-group oracle with distinct optima")


def make_dominant_oracle(seed: int, n_cells: int = 2) -> OracleSpec:
    """One group, one architecture strictly dominant in accuracy and latency."""
    spec = small_oracle_graph_spec(n_cells)
    archs = enumerate_valid(spec)
    mat = np.stack([a.bits for a in archs]).astype(np.float64)
    rng = np.random.default_rng(seed)
    base, costs = _latency_costs(spec.module_count, rng)
    latency = base + mat @ costs
    prob = np.full((1, len(archs)), 0.35)
    probe = OracleSpec(spec, archs, prob, latency)
    sched = _oracle_schedule(probe, total_epochs=1)
    mid = (sched.u_final + sched.l_final) / 2.0
    dominant = int(np.abs(latency - mid).argmin())
    dist = np.abs(mat - mat[dominant]).sum(axis=1)
    prob = np.clip(0.95 - 0.2 * dist, 0.05, 0.95)[None, :]
    return OracleSpec(spec, archs, prob, latency)


def make_uniform_oracle(seed: int, n_cells: int = 2) -> OracleSpec:
    """Degenerate case: identical reward for every architecture."""
    spec = small_oracle_graph_spec(n_cells)
    archs = enumerate_valid(spec)
    prob = np.full((1, len(archs)), 0.5)
    latency = np.full(len(archs), 0.5)
    return OracleSpec(spec, archs, prob, latency)


def _optima_unique(oracle, optima, upper, lower, margin: float = 0.12) -> bool:
    """The best architecture must beat the runner-up by a relative margin the
    controller can actually resolve through sampling noise."""
    for g, best in enumerate(optima):
        values = np.array([
            expected_reward(oracle, g, a, upper, lower, 30.0)
            for a in range(len(oracle.archs))
        ])
        top = np.sort(values)[-2:]
        if top[1] - top[0] < margin * max(top[1], 1e-9):
            return False
    return True


def _oracle_schedule(oracle: OracleSpec, total_epochs: int) -> RewardSchedule:
    """Band from the oracle's own latency table: start around twice the mean
    sampled latency, close down to half of the all-modules architecture."""
    all_idx = int(np.argmax([a.bits.sum() for a in oracle.archs]))
    reference = float(oracle.latency_ms[all_idx])
    rbar = float(oracle.latency_ms.mean())
    return init_bounds(rbar, reference, total_epochs)


def oracle_dataset(oracle: OracleSpec, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Group-coded images: each group gets a distinct spatial pattern."""
    spec = oracle.graph_spec
    side = spec.input_size
    rng = np.random.default_rng(seed)
    groups = np.arange(n) % oracle.num_groups
    rng.shuffle(groups)
    yy, xx = np.meshgrid(np.linspace(-1, 1, side), np.linspace(-1, 1, side), indexing="ij")
    images = np.empty((n, spec.input_channels, side, side))
    for i, g in enumerate(groups):
        angle = 2 * np.pi * g / max(oracle.num_groups, 1)
        pattern = 0.5 + 0.45 * np.tanh(2.0 * (np.cos(angle) * xx + np.sin(angle) * yy))
        images[i] = pattern + rng.normal(0, 0.03, size=(side, side))
    return images, groups


def run_oracle_sim(oracle: OracleSpec, epochs: int, n_examples: int, batch_size: int,
                   seed: int, metrics: MetricsWriter | None = None,
                   r_p: float = 30.0, alpha_start: float = 0.8, alpha_end: float = 0.95,
                   entropy_coef: float = 0.01, lr: float = 0.0005) -> OracleReport:
    """Controller-phase training against oracle lookups instead of the
    meta-graph, then comparison with the brute-force per-group optimum."""
    spec = oracle.graph_spec
    net = ControllerNet(spec, seed=seed, alpha=alpha_start, entropy_coef=entropy_coef)
    adam = Adam(lr)
    images, groups = oracle_dataset(oracle, n_examples, seed + 1)
    index = oracle.arch_index()
    schedule = _oracle_schedule(oracle, epochs)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))

    def lookup(selections) -> np.ndarray:
        return np.array([index[s.bits.tobytes()] for s in selections])

    mean_entropy = 0.0
    for epoch in range(epochs):
        upper, lower = bounds_at(schedule, epoch)
        alpha = alpha_start + (alpha_end - alpha_start) * epoch / max(epochs - 1, 1)
        order = rng.permutation(n_examples)
        ent, rewards = [], []
        for start in range(0, n_examples, batch_size):
            idx = order[start:start + batch_size]
            x, g = images[idx], groups[idx]
            p = policy_forward(net, x)
            sample = sample_actions(spec, encourage(p, alpha), p, rng)
            a_idx = lookup(sample.selections)
            b_idx = lookup(sample.baseline_selections)
            r = _oracle_reward(oracle, g, a_idx, upper, lower, r_p, rng)
            r_base = _oracle_reward(oracle, g, b_idx, upper, lower, r_p, rng)
            policy_gradient_update(net, x, sample, r, r_base, adam, alpha)
            ent.append(float(bernoulli_entropy(p).mean()))
            rewards.append(float(r.mean()))
        mean_entropy = float(np.mean(ent))
        if metrics is not None:
            metrics.append("oracle", epoch, "controller",
                           mean_R=round(float(np.mean(rewards)), 6),
                           mean_entropy=round(mean_entropy, 6),
                           U_t=round(upper, 6), L_t=round(lower, 6))

    upper, lower = bounds_at(schedule, schedule.total_epochs)
    optima = brute_force_optimum(oracle, upper, lower, r_p)
    probs = policy_forward(net, images)
    chosen = lookup([repair_selection(spec, row) for row in threshold_baseline(probs)])
    per_group: list[float | None] = []
    total_hits, total_n = 0, 0
    for g in range(oracle.num_groups):
        mask = groups == g
        if optima[g] is None:
            per_group.append(None)
            continue
        hits = int((chosen[mask] == optima[g]).sum())
        per_group.append(hits / max(int(mask.sum()), 1))
        total_hits += hits
        total_n += int(mask.sum())
    agreement = total_hits / total_n if total_n else None
    if agreement is None:
        log.info("oracle landscape is uniform; agreement metric reported as n/a")
    return OracleReport(agreement, per_group, optima, probs, schedule, mean_entropy)


def _oracle_reward(oracle, groups, arch_idx, upper, lower, r_p, rng) -> np.ndarray:
    prob = oracle.correct_prob[groups, arch_idx]
    correct = rng.random(len(arch_idx)) < prob
    r_task = np.where(correct, r_p, 0.0)
    gamma = ((upper - lower) / 2.0) ** 2
    z = oracle.latency_ms[arch_idx]
    r_lat = np.clip((upper - z) * (z - lower) / gamma, 0.0, 1.0)
    return np.where(r_task > 0, r_task * r_lat, r_task)
