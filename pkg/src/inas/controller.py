"""Instance-aware policy network: three conv layers into a sigmoid head that
emits one Bernoulli probability per selectable module, plus the exploration
mutation, self-critical baseline, and policy-gradient update.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .metagraph import MetaGraphSpec, Selection, repair_selection
from .nn.params import ParameterSet, kaiming_normal

log = logging.getLogger(__name__)

_LOG_EPS = 1e-12


@dataclass
class PolicySample:
    """One batch of Bernoulli draws plus everything the update needs.

    `actions` and `baseline` are stored pre-repair; the repaired selections
    actually executed are attached alongside.
    """

    actions: np.ndarray            # [N, M] uint8, drawn from mutated_probs
    mutated_probs: np.ndarray      # [N, M] p' = alpha*p + (1-alpha)*(1-p)
    baseline: np.ndarray           # [N, M] uint8, p > 0.5 (strict)
    log_prob_sum: np.ndarray       # [N]
    selections: list[Selection]
    baseline_selections: list[Selection]


class ControllerNet:
    """conv7x7/2 (8ch) -> ReLU6 -> conv5x5/2 (16ch) -> ReLU6 -> conv5x5/2 (32ch)
    -> global average pool -> dense M -> sigmoid."""

    CHANNELS = (8, 16, 32)

    def __init__(self, spec: MetaGraphSpec, seed: int, dtype=None,
                 alpha: float = 0.8, entropy_coef: float = 0.01):
        self.spec = spec
        self.num_outputs = spec.module_count
        self.dtype = np.dtype(dtype or nn.get_default_dtype()).type
        self.alpha = alpha
        self.entropy_coef = entropy_coef
        rng = np.random.default_rng(seed)
        params = ParameterSet()
        saved = nn.get_default_dtype()
        nn.set_default_dtype(self.dtype)
        try:
            c1, c2, c3 = self.CHANNELS
            cin = spec.input_channels
            params.add("controller.conv1.w", kaiming_normal(rng, (c1, cin, 7, 7), fan_in=cin * 49))
            params.add("controller.conv1.b", np.zeros(c1))
            params.add("controller.conv2.w", kaiming_normal(rng, (c2, c1, 5, 5), fan_in=c1 * 25))
            params.add("controller.conv2.b", np.zeros(c2))
            params.add("controller.conv3.w", kaiming_normal(rng, (c3, c2, 5, 5), fan_in=c2 * 25))
            params.add("controller.conv3.b", np.zeros(c3))
            params.add("controller.fc.w", kaiming_normal(rng, (c3, self.num_outputs), fan_in=c3))
            params.add("controller.fc.b", np.zeros(self.num_outputs))
        finally:
            nn.set_default_dtype(saved)
        self.params = params

    def forward(self, x) -> nn.Tensor:
        """Per-instance module probabilities, shape [N, M]."""
        xv = np.ascontiguousarray(x, dtype=self.dtype)
        size = self.spec.input_size
        if xv.ndim != 4 or xv.shape[2] != size or xv.shape[3] != size:
            raise ValueError(
                f"controller expects input resolution {size}x{size}, got {xv.shape}"
            )
        p = self.params
        h = nn.conv2d(nn.Tensor(xv), p["controller.conv1.w"], stride=2, padding=3)
        h = nn.relu6(nn.add(h, _bias4(p["controller.conv1.b"])))
        h = nn.conv2d(h, p["controller.conv2.w"], stride=2, padding=2)
        h = nn.relu6(nn.add(h, _bias4(p["controller.conv2.b"])))
        h = nn.conv2d(h, p["controller.conv3.w"], stride=2, padding=2)
        h = nn.add(h, _bias4(p["controller.conv3.b"]))
        pooled = nn.global_avg_pool(h)
        return nn.sigmoid(nn.dense(pooled, p["controller.fc.w"], p["controller.fc.b"]))


def _bias4(b: nn.Tensor) -> nn.Tensor:
    return nn.reshape(b, (1, b.shape[0], 1, 1))


def policy_forward(net: ControllerNet, x: np.ndarray) -> np.ndarray:
    """Evaluation-path probabilities as a plain array (no tape)."""
    with nn.no_grad():
        return net.forward(x).data


def encourage(p: np.ndarray, alpha: float) -> np.ndarray:
    """Mix each probability toward 0.5: p' = alpha*p + (1-alpha)*(1-p)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * p + (1.0 - alpha) * (1.0 - p)


def threshold_baseline(p: np.ndarray) -> np.ndarray:
    """Deterministic reference actions: 1 where p is strictly above 0.5."""
    return (p > 0.5).astype(np.uint8)


def log_prob_of_actions(probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Row sums of log P(a_i) under independent Bernoulli(probs)."""
    probs = np.atleast_2d(probs)
    actions = np.atleast_2d(actions)
    chosen = np.where(actions == 1, probs, 1.0 - probs)
    return np.log(np.clip(chosen, _LOG_EPS, 1.0)).sum(axis=1)


def sample_actions(net_spec: MetaGraphSpec, mutated_probs: np.ndarray,
                   p: np.ndarray, rng: np.random.Generator) -> PolicySample:
    """Independent Bernoulli draws from p', with the thresholded baseline of p."""
    p2 = np.atleast_2d(mutated_probs)
    raw_p = np.atleast_2d(p)
    actions = (rng.random(p2.shape) < p2).astype(np.uint8)
    baseline = threshold_baseline(raw_p)
    return PolicySample(
        actions=actions,
        mutated_probs=p2,
        baseline=baseline,
        log_prob_sum=log_prob_of_actions(p2, actions),
        selections=[repair_selection(net_spec, row) for row in actions],
        baseline_selections=[repair_selection(net_spec, row) for row in baseline],
    )


def bernoulli_entropy(p: np.ndarray) -> np.ndarray:
    """Sum over components of the Bernoulli entropy (nats); rows if p is 2-d."""
    p = np.asarray(p)
    q = 1.0 - p
    h = -np.where(p > 0, p * np.log(np.clip(p, _LOG_EPS, 1.0)), 0.0)
    h -= np.where(q > 0, q * np.log(np.clip(q, _LOG_EPS, 1.0)), 0.0)
    return h.sum(axis=-1)


def policy_loss(net: ControllerNet, x: np.ndarray, actions: np.ndarray,
                advantage: np.ndarray, alpha: float) -> tuple[nn.Tensor, nn.Tensor]:
    """Differentiable REINFORCE objective; returns (loss, mean entropy).

    loss = -mean[advantage * sum_i log P(a_i | p')] + coef * mean[H(p)],
    with p' = alpha*p + (1-alpha)*(1-p). The advantage is a constant.
    """
    p = net.forward(x)
    p_mut = nn.add(nn.mul(p, 2.0 * alpha - 1.0), float(1.0 - alpha))
    q_mut = nn.add(nn.mul(p_mut, -1.0), 1.0)
    logp = nn.add(
        nn.mul(nn.log(nn.clamp(p_mut, _LOG_EPS, 1.0)), np.asarray(actions, dtype=net.dtype)),
        nn.mul(nn.log(nn.clamp(q_mut, _LOG_EPS, 1.0)), np.asarray(1.0 - actions, dtype=net.dtype)),
    )
    log_prob_sum = nn.reduce_sum(logp, axis=1)
    pg_loss = nn.mul(nn.reduce_mean(nn.mul(log_prob_sum, np.asarray(advantage, dtype=net.dtype))), -1.0)

    q = nn.add(nn.mul(p, -1.0), 1.0)
    ent = nn.add(
        nn.mul(nn.mul(p, nn.log(nn.clamp(p, _LOG_EPS, 1.0))), -1.0),
        nn.mul(nn.mul(q, nn.log(nn.clamp(q, _LOG_EPS, 1.0))), -1.0),
    )
    entropy_mean = nn.reduce_mean(nn.reduce_sum(ent, axis=1))
    return nn.add(pg_loss, nn.mul(entropy_mean, net.entropy_coef)), entropy_mean


def policy_gradient_update(
    net: ControllerNet,
    x: np.ndarray,
    sample: PolicySample,
    rewards: np.ndarray,
    baseline_rewards: np.ndarray,
    optimizer,
    alpha: float,
) -> dict:
    """One REINFORCE step with the self-critical baseline and entropy term.

    Minimizes  -mean[(R - R_baseline) * sum_i log P(a_i)] + coef * mean[H(p)].
    The advantage is a constant; gradients flow only through the log-probs
    and the entropy of the raw policy.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    baseline_rewards = np.asarray(baseline_rewards, dtype=np.float64)
    keep = np.isfinite(rewards) & np.isfinite(baseline_rewards)
    if not np.all(keep):
        log.warning("dropping %d samples with non-finite rewards", int((~keep).sum()))
        if not np.any(keep):
            return {"mean_advantage": 0.0, "advantage_variance": 0.0,
                    "mean_entropy": float(bernoulli_entropy(policy_forward(net, x)).mean()),
                    "loss": 0.0}
    x = np.asarray(x)[keep]
    actions = sample.actions[keep].astype(net.dtype)
    advantage = (rewards - baseline_rewards)[keep].astype(net.dtype)

    loss, entropy_mean = policy_loss(net, x, actions, advantage, alpha)

    net.params.zero_grad()
    loss.backward()
    optimizer.step(net.params)
    net.params.zero_grad()

    adv64 = advantage.astype(np.float64)
    return {
        "loss": float(loss.item()),
        "mean_advantage": float(adv64.mean()),
        "advantage_variance": float(adv64.var()),
        "mean_entropy": float(entropy_mean.item()),
    }
