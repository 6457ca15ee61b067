"""Three-stage training pipeline: (A) drop-path pre-training of the
meta-graph, (B) alternating controller / meta-graph joint training under the
decaying reward band, (C) fine-tuning with the controller frozen.

Stages consume each other's artifacts only by explicit path; all randomness
flows from stage-scoped seeded generators.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .controller import (
    ControllerNet,
    bernoulli_entropy,
    encourage,
    policy_forward,
    policy_gradient_update,
    sample_actions,
    threshold_baseline,
)
from .data import AugmentConfig, Dataset, augment, normalize
from .latency import LatencyTable, estimate_latency_batch
from .metagraph import (
    MetaGraph,
    Selection,
    droppath_rate,
    repair_selection,
    sample_droppath_selection,
)
from .nn import Adam, SGDMomentum, cosine_annealing_lr
from .reward import (
    RewardConfig,
    RewardSchedule,
    bounds_at,
    combine_batch,
    init_bounds,
    latency_reward_batch,
    task_reward_batch,
)
from .runs import MetricsWriter

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Checkpoint:
    epoch: int
    path: str
    summary: dict


@dataclass
class JointResult:
    checkpoints: list[Checkpoint]
    controller_steps: int
    metagraph_steps: int
    collapsed: bool


@dataclass
class EvalResult:
    accuracy: float
    latencies_ms: np.ndarray
    selections: list[Selection]
    probs: np.ndarray

    @property
    def mean_latency_ms(self) -> float:
        return float(self.latencies_ms.mean())

    @property
    def std_latency_ms(self) -> float:
        return float(self.latencies_ms.std())


def selection_matrix(selections) -> np.ndarray:
    return np.stack([s.bits for s in selections]).astype(np.float64)


def batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def shuffle_policies(selections: list[Selection], rng: np.random.Generator) -> list[Selection]:
    """Uniformly permute the selections within a batch; the multiset of
    selections and the sample order are both preserved."""
    perm = rng.permutation(len(selections))
    return [selections[i] for i in perm]


def epoch_rng(base_seed: int, *scope: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([base_seed, *scope]))


# ---------------------------------------------------------------------------
# evaluation helpers


def evaluate_deterministic(graph: MetaGraph, net: ControllerNet, table: LatencyTable | None,
                           images: np.ndarray, labels: np.ndarray,
                           aug_cfg: AugmentConfig, batch_size: int) -> EvalResult:
    """Inference-path evaluation: per-instance thresholded (repaired)
    selections, normalization only, no sampling."""
    spec = graph.spec
    correct = 0
    sels: list[Selection] = []
    probs = np.empty((len(labels), spec.module_count))
    with nn.no_grad():
        for idx in batches(len(labels), batch_size):
            x = normalize(images[idx], aug_cfg)
            p = policy_forward(net, x)
            probs[idx] = p
            batch_sels = [repair_selection(spec, row) for row in threshold_baseline(p)]
            sels.extend(batch_sels)
            logits = graph.forward(x, selection_matrix(batch_sels)).data
            correct += int((logits.argmax(1) == labels[idx]).sum())
    lats = (
        estimate_latency_batch(table, spec, sels)
        if table is not None
        else np.zeros(len(labels))
    )
    return EvalResult(correct / max(len(labels), 1), lats, sels, probs)


def sample_controller_latency(net: ControllerNet, table: LatencyTable, graph: MetaGraph,
                              images: np.ndarray, sample_size: int, alpha: float,
                              rng: np.random.Generator, aug_cfg: AugmentConfig) -> float:
    """Mean estimated latency over architectures sampled from the controller."""
    if sample_size < 100:
        raise ValueError(f"sample_size must be >= 100, got {sample_size}")
    spec = graph.spec
    reps = int(math.ceil(sample_size / len(images)))
    pool = np.concatenate([images] * reps)[:sample_size]
    sels: list[Selection] = []
    for idx in batches(sample_size, 256):
        x = normalize(pool[idx], aug_cfg)
        p = policy_forward(net, x)
        sample = sample_actions(spec, encourage(p, alpha), p, rng)
        sels.extend(sample.selections)
    return float(estimate_latency_batch(table, spec, sels).mean())


def make_schedule(cfg, table: LatencyTable, graph: MetaGraph, net: ControllerNet,
                  train_images: np.ndarray, aug_cfg: AugmentConfig) -> RewardSchedule:
    """Reward band from the untrained controller and the reference architecture."""
    from .latency import estimate_latency

    reference = cfg.schedule.reference_latency_ms
    if reference <= 0:
        reference = estimate_latency(table, graph.spec, Selection.all_modules(graph.spec))
    rbar = sample_controller_latency(
        net, table, graph, train_images, cfg.schedule.bound_sample_size,
        cfg.controller.alpha_start, epoch_rng(cfg.seeds.bounds), aug_cfg,
    )
    return init_bounds(
        rbar, reference, cfg.train.joint_epochs,
        l0=cfg.schedule.l0, l_final=cfg.schedule.l_final,
        static_mode=cfg.ablations.static_reward,
    )


# ---------------------------------------------------------------------------
# stage (A): pre-training


def pretrain(graph: MetaGraph, train: Dataset, val: Dataset, aug_cfg: AugmentConfig,
             cfg, metrics: MetricsWriter, ckpt_path=None) -> None:
    spec = graph.spec
    total = cfg.train.pretrain_epochs
    opt = SGDMomentum(cfg.train.pretrain_lr, cfg.train.momentum, cfg.train.weight_decay)
    for epoch in range(total):
        opt.lr = cosine_annealing_lr(cfg.train.pretrain_lr, epoch, total)
        rate = droppath_rate(epoch, total)
        rng_order = epoch_rng(cfg.seeds.pretrain, epoch, 0)
        rng_drop = epoch_rng(cfg.seeds.pretrain, epoch, 1)
        rng_aug = epoch_rng(cfg.seeds.pretrain, epoch, 2)
        order = rng_order.permutation(len(train))
        losses, correct, seen = [], 0, 0
        for idx in batches(len(train), cfg.train.batch_size, order):
            x = augment(train.images[idx], aug_cfg, rng_aug)
            sel = sample_droppath_selection(spec, rate, rng_drop)
            logits = graph.forward_selected(x, sel)
            loss = nn.softmax_cross_entropy(logits, train.labels[idx])
            if not np.isfinite(loss.item()):
                if ckpt_path is not None:
                    nn.save_arrays(ckpt_path, graph.params.to_arrays())
                raise TrainingDiverged(
                    f"pre-training loss became non-finite at epoch {epoch}; "
                    f"last finite weights saved to {ckpt_path}"
                )
            graph.params.zero_grad()
            loss.backward()
            opt.step(graph.params)
            graph.params.zero_grad()
            losses.append(loss.item())
            correct += int((logits.data.argmax(1) == train.labels[idx]).sum())
            seen += len(idx)
        val_acc = _plain_eval(graph, val, aug_cfg, cfg.train.batch_size)
        metrics.append("pretrain", epoch, "train",
                       loss=float(np.mean(losses)), acc=round(correct / seen, 6))
        metrics.append("pretrain", epoch, "val", acc=round(val_acc, 6))
    if ckpt_path is not None:
        nn.save_arrays(ckpt_path, graph.params.to_arrays())


def _plain_eval(graph: MetaGraph, ds: Dataset, aug_cfg: AugmentConfig, batch_size: int,
                selection: Selection | None = None) -> float:
    sel = selection or Selection.all_modules(graph.spec)
    correct = 0
    with nn.no_grad():
        for idx in batches(len(ds), batch_size):
            x = normalize(ds.images[idx], aug_cfg)
            logits = graph.forward_selected(x, sel).data
            correct += int((logits.argmax(1) == ds.labels[idx]).sum())
    return correct / max(len(ds), 1)


# ---------------------------------------------------------------------------
# stage (B): joint training


def _reward_batch(graph, table, spec, x, labels, selections, upper, lower, rcfg):
    with nn.no_grad():
        logits = graph.forward(x, selection_matrix(selections)).data
    r_task = task_reward_batch(logits, labels, rcfg)
    z = estimate_latency_batch(table, spec, selections)
    r_lat = latency_reward_batch(z, upper, lower, clamp=rcfg.clamp_latency_reward)
    return combine_batch(r_task, r_lat), z, (logits.argmax(1) == labels)


def joint_train(graph: MetaGraph, net: ControllerNet, table: LatencyTable,
                train: Dataset, val: Dataset, aug_cfg: AugmentConfig,
                schedule: RewardSchedule, cfg, metrics: MetricsWriter,
                checkpoints_dir) -> JointResult:
    spec = graph.spec
    rcfg = RewardConfig(cfg.reward.task_reward, cfg.reward.clamp, cfg.ablations.static_reward)
    total = cfg.train.joint_epochs
    adam = Adam(cfg.controller.lr)
    sgd = SGDMomentum(cfg.train.metagraph_lr, cfg.train.momentum, cfg.train.weight_decay)
    checkpoints: list[Checkpoint] = []
    collapse_streak, collapsed = 0, False
    entropy_floor = 0.05 * spec.module_count * math.log(2)
    chance = 1.0 / max(int(train.labels.max()) + 1, 1)

    for epoch in range(total):
        upper, lower = bounds_at(schedule, epoch)
        alpha = cfg.controller.alpha_start + (
            (cfg.controller.alpha_end - cfg.controller.alpha_start) * epoch / max(total - 1, 1)
        )

        # -- phase 1: controller (meta-graph frozen) ------------------------
        rng_order = epoch_rng(cfg.seeds.search, epoch, 0)
        rng_sample = epoch_rng(cfg.seeds.search, epoch, 1)
        rng_aug = epoch_rng(cfg.seeds.search, epoch, 2)
        order = rng_order.permutation(len(train))
        stats = {"loss": [], "R": [], "ent": [], "z": [], "acc": [], "adv_var": [], "r_var": []}
        for idx in batches(len(train), cfg.train.batch_size, order):
            x = augment(train.images[idx], aug_cfg, rng_aug)
            y = train.labels[idx]
            p = policy_forward(net, x)
            sample = sample_actions(spec, encourage(p, alpha), p, rng_sample)
            r, z, correct = _reward_batch(graph, table, spec, x, y, sample.selections, upper, lower, rcfg)
            r_base, _, _ = _reward_batch(graph, table, spec, x, y, sample.baseline_selections, upper, lower, rcfg)
            diag = policy_gradient_update(net, x, sample, r, r_base, adam, alpha)
            stats["loss"].append(diag["loss"])
            stats["R"].append(float(r.mean()))
            stats["ent"].append(float(bernoulli_entropy(p).mean()))
            stats["z"].append(float(z.mean()))
            stats["acc"].append(float(correct.mean()))
            stats["adv_var"].append(float((r - r_base).var()))
            stats["r_var"].append(float(r.var()))
        mean_entropy = float(np.mean(stats["ent"]))
        if np.mean(stats["adv_var"]) > np.mean(stats["r_var"]):
            log.info(
                "epoch %d: baseline did not reduce variance (Var(R-Rb)=%.3f > Var(R)=%.3f)",
                epoch, np.mean(stats["adv_var"]), np.mean(stats["r_var"]),
            )
        metrics.append("search", epoch, "controller",
                       loss=round(float(np.mean(stats["loss"])), 6),
                       acc=round(float(np.mean(stats["acc"])), 6),
                       mean_latency_ms=round(float(np.mean(stats["z"])), 6),
                       U_t=round(upper, 6), L_t=round(lower, 6),
                       mean_R=round(float(np.mean(stats["R"])), 6),
                       mean_entropy=round(mean_entropy, 6),
                       collapsed=collapsed)

        # -- phase 2: meta-graph (controller frozen) -------------------------
        sgd.lr = cosine_annealing_lr(cfg.train.metagraph_lr, epoch, total)
        rng_order = epoch_rng(cfg.seeds.search, epoch, 3)
        rng_sample = epoch_rng(cfg.seeds.search, epoch, 4)
        rng_aug = epoch_rng(cfg.seeds.search, epoch, 5)
        rng_shuffle = epoch_rng(cfg.seeds.search, epoch, 6)
        order = rng_order.permutation(len(train))
        losses, correct, seen = [], 0, 0
        for idx in batches(len(train), cfg.train.batch_size, order):
            x = augment(train.images[idx], aug_cfg, rng_aug)
            y = train.labels[idx]
            p = policy_forward(net, x)
            sample = sample_actions(spec, encourage(p, alpha), p, rng_sample)
            sels = sample.selections
            if not cfg.ablations.no_shuffle:
                sels = shuffle_policies(sels, rng_shuffle)
            logits = graph.forward(x, selection_matrix(sels))
            loss = nn.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"meta-graph loss became non-finite at joint epoch {epoch}")
            graph.params.zero_grad()
            loss.backward()
            sgd.step(graph.params)
            graph.params.zero_grad()
            losses.append(loss.item())
            correct += int((logits.data.argmax(1) == y).sum())
            seen += len(idx)
        metrics.append("search", epoch, "metagraph",
                       loss=round(float(np.mean(losses)), 6),
                       acc=round(correct / seen, 6),
                       U_t=round(upper, 6), L_t=round(lower, 6),
                       collapsed=collapsed)

        # -- validation summary + checkpoint ---------------------------------
        ev = evaluate_deterministic(graph, net, table, val.images, val.labels, aug_cfg,
                                    cfg.train.batch_size)
        if mean_entropy < entropy_floor and ev.accuracy < 1.5 * chance:
            collapse_streak += 1
            if collapse_streak >= 3 and not collapsed:
                collapsed = True
                log.warning("run flagged as collapsed at epoch %d (entropy %.4f, val acc %.4f)",
                            epoch, mean_entropy, ev.accuracy)
        else:
            collapse_streak = 0
        summary = {
            "val_acc": round(ev.accuracy, 6),
            "mean_latency_ms": round(ev.mean_latency_ms, 6),
            "std_latency_ms": round(ev.std_latency_ms, 6),
            "U_t": round(upper, 6),
            "L_t": round(lower, 6),
        }
        path = checkpoints_dir / f"epoch-{epoch:03d}.ckpt"
        arrays = {**graph.params.to_arrays(), **net.params.to_arrays()}
        nn.save_arrays(path, arrays)
        checkpoints.append(Checkpoint(epoch, str(path), summary))
        with open(checkpoints_dir / "index.jsonl", "a") as fh:
            fh.write(json.dumps({"epoch": epoch, "path": path.name, "summary": summary}) + "\n")
        metrics.append("search", epoch, "val",
                       acc=summary["val_acc"],
                       mean_latency_ms=summary["mean_latency_ms"],
                       U_t=summary["U_t"], L_t=summary["L_t"],
                       mean_entropy=round(mean_entropy, 6),
                       collapsed=collapsed)
    return JointResult(checkpoints, adam.step_count, sgd.step_count, collapsed)


# ---------------------------------------------------------------------------
# stage (C): fine-tuning


def finetune(graph: MetaGraph, net: ControllerNet, train: Dataset, val: Dataset,
             aug_cfg: AugmentConfig, cfg, metrics: MetricsWriter,
             table: LatencyTable | None = None) -> None:
    """Controller frozen; each instance runs its thresholded (repaired)
    selection; only the meta-graph weights train."""
    spec = graph.spec
    total = cfg.train.finetune_epochs
    opt = SGDMomentum(cfg.train.finetune_lr, cfg.train.momentum, cfg.train.weight_decay)
    for epoch in range(total):
        opt.lr = cosine_annealing_lr(cfg.train.finetune_lr, epoch, total)
        rng_order = epoch_rng(cfg.seeds.finetune, epoch, 0)
        rng_aug = epoch_rng(cfg.seeds.finetune, epoch, 1)
        order = rng_order.permutation(len(train))
        losses, correct, seen = [], 0, 0
        for idx in batches(len(train), cfg.train.batch_size, order):
            x = augment(train.images[idx], aug_cfg, rng_aug)
            y = train.labels[idx]
            p = policy_forward(net, x)
            sels = [repair_selection(spec, row) for row in threshold_baseline(p)]
            logits = graph.forward(x, selection_matrix(sels))
            loss = nn.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"fine-tuning loss became non-finite at epoch {epoch}")
            graph.params.zero_grad()
            loss.backward()
            opt.step(graph.params)
            graph.params.zero_grad()
            losses.append(loss.item())
            correct += int((logits.data.argmax(1) == y).sum())
            seen += len(idx)
        ev = evaluate_deterministic(graph, net, table, val.images, val.labels, aug_cfg,
                                    cfg.train.batch_size)
        metrics.append("finetune", epoch, "train",
                       loss=round(float(np.mean(losses)), 6), acc=round(correct / seen, 6))
        metrics.append("finetune", epoch, "val",
                       acc=round(ev.accuracy, 6),
                       mean_latency_ms=round(ev.mean_latency_ms, 6) if table else None)


def finetune_all_modules(graph: MetaGraph, train: Dataset, val: Dataset,
                         aug_cfg: AugmentConfig, cfg, metrics: MetricsWriter) -> None:
    """Reference path: fine-tune with every module active (the static
    always-everything baseline used for latency-reduction comparisons)."""
    sel = Selection.all_modules(graph.spec)
    total = cfg.train.finetune_epochs
    opt = SGDMomentum(cfg.train.finetune_lr, cfg.train.momentum, cfg.train.weight_decay)
    for epoch in range(total):
        opt.lr = cosine_annealing_lr(cfg.train.finetune_lr, epoch, total)
        rng_order = epoch_rng(cfg.seeds.finetune, epoch, 10)
        rng_aug = epoch_rng(cfg.seeds.finetune, epoch, 11)
        order = rng_order.permutation(len(train))
        losses = []
        for idx in batches(len(train), cfg.train.batch_size, order):
            x = augment(train.images[idx], aug_cfg, rng_aug)
            logits = graph.forward_selected(x, sel)
            loss = nn.softmax_cross_entropy(logits, train.labels[idx])
            graph.params.zero_grad()
            loss.backward()
            opt.step(graph.params)
            graph.params.zero_grad()
            losses.append(loss.item())
        metrics.append("finetune-baseline", epoch, "train", loss=round(float(np.mean(losses)), 6))
        metrics.append("finetune-baseline", epoch, "val",
                       acc=round(_plain_eval(graph, val, aug_cfg, cfg.train.batch_size), 6))
