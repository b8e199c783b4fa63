"""Deployments of a pretrained model: goal reaching, prompting, offline RL.

Goal reaching plans actions by inpainting a goal-masked window and executes
them open- or closed-loop. Prompting continues a short observed state-action
segment. Offline finetuning swaps bidirectional attention for causal attention
and trains twin-critic/actor heads on the frozen token interface.
"""

from __future__ import annotations

import copy
import dataclasses

import numpy as np
import torch
from torch import nn

from . import envs, masking, model as model_mod
from .data import Dataset, sample_window
from .model import MaskedSeqModel


@dataclasses.dataclass(frozen=True)
class GoalQuery:
    start: np.ndarray
    goals: tuple[tuple[np.ndarray, int], ...]  # (goal_state, cumulative budget)

    def __post_init__(self):
        if not self.goals:
            raise ValueError("a query needs at least one goal")
        budgets = [b for _, b in self.goals]
        if any(b < 1 for b in budgets) or any(
                b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
            raise ValueError("budgets must be strictly increasing and >= 1")

    @property
    def budgets(self) -> list[int]:
        return [b for _, b in self.goals]


@dataclasses.dataclass
class Rollout:
    states: np.ndarray   # [N+1, state_dim] visited states, f64
    actions: np.ndarray  # [N, action_dim] executed actions
    rewards: np.ndarray  # [N, n_tasks] rewards of the post-step state

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]


def goal_distances(states: np.ndarray, goals) -> list[float]:
    """Min L2 distance to each goal over states visited within its budget."""
    out = []
    for goal_state, budget in goals:
        horizon = min(budget, states.shape[0] - 1)
        diffs = states[:horizon + 1] - np.asarray(goal_state, dtype=np.float64)
        out.append(float(np.min(np.linalg.norm(diffs, axis=1))))
    return out


def plan_actions(model: MaskedSeqModel, start: np.ndarray, goal_states,
                 positions) -> np.ndarray:
    """One inpainting pass: start at slot 0, goals at their slots, actions out."""
    positions = [int(p) for p in positions]
    L = positions[-1] + 1
    ds = model.cfg.state_dim
    start = np.asarray(start, dtype=np.float64)
    if start.shape != (ds,):
        raise ValueError(f"start state must have shape ({ds},)")
    states = np.zeros((L, ds))
    states[0] = start
    for g, p in zip(goal_states, positions, strict=True):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (ds,):
            raise ValueError(f"goal state must have shape ({ds},)")
        states[p] = g
    mask = masking.goal_mask(L, positions)
    rec = model.forward_masked(states, np.zeros((L, model.cfg.action_dim)), mask)
    return rec.pred_actions.astype(np.float64)


def _run(env: str, start: np.ndarray, n_steps: int, act_fn) -> Rollout:
    spec = envs.env_spec(env)
    s = envs.set_state(env, np.asarray(start, dtype=np.float64))
    states, actions, rewards = [s], [], []
    for t in range(n_steps):
        a = np.clip(np.asarray(act_fn(t, s), dtype=np.float64), -1.0, 1.0)
        s = envs.env_step(env, s, a)
        states.append(s)
        actions.append(a)
        rewards.append([envs.task_reward(task, s, a) for task in spec.tasks])
    return Rollout(np.array(states), np.array(actions).reshape(n_steps, spec.action_dim),
                   np.array(rewards).reshape(n_steps, len(spec.tasks)))


def reach_goals(model: MaskedSeqModel, env: str, query: GoalQuery,
                mode: str = "closed", foresight: bool = True,
                ) -> tuple[Rollout, list[float]]:
    """Reach the query's goals within their budgets; returns rollout + distances.

    open executes a whole plan blindly (with foresight: one plan over all goals;
    without: one plan per goal segment, re-planned from the reached state).
    closed re-plans every step with remaining goals shifted one slot nearer,
    dropping goals whose budget expired; without foresight only the current
    goal is exposed.
    """
    if mode not in ("open", "closed"):
        raise ValueError(f"unknown mode {mode!r}")
    capacity = 2 * model.cfg.train_context_len
    if query.budgets[-1] > capacity:
        raise ValueError(f"last budget {query.budgets[-1]} exceeds context "
                         f"capacity {capacity}")
    n_steps = query.budgets[-1]

    if mode == "open" and foresight:
        acts = plan_actions(model, query.start, [g for g, _ in query.goals],
                            query.budgets)
        rollout = _run(env, query.start, n_steps, lambda t, s: acts[t])
    elif mode == "open":
        spec = envs.env_spec(env)
        s = envs.set_state(env, np.asarray(query.start, dtype=np.float64))
        states, actions, rewards = [s], [], []
        t = 0
        for goal_state, budget in query.goals:
            acts = plan_actions(model, s, [goal_state], [budget - t])
            for i in range(budget - t):
                a = np.clip(acts[i], -1.0, 1.0)
                s = envs.env_step(env, s, a)
                states.append(s)
                actions.append(a)
                rewards.append([envs.task_reward(task, s, a) for task in spec.tasks])
            t = budget
        rollout = Rollout(np.array(states), np.array(actions), np.array(rewards))
    else:
        def replan(t, s):
            remaining = [(g, b) for g, b in query.goals if b > t]
            if not foresight:
                remaining = remaining[:1]
            acts = plan_actions(model, s, [g for g, _ in remaining],
                                [b - t for _, b in remaining])
            return acts[0]
        rollout = _run(env, query.start, n_steps, replan)

    return rollout, goal_distances(rollout.states, query.goals)


def prompt_rollout(model: MaskedSeqModel, env: str, prompt_states, prompt_actions,
                   task: str, horizon: int, mode: str = "closed",
                   ) -> tuple[Rollout, float]:
    """Continue a k-pair segment for `horizon` steps; returns rollout + return.

    The rollout starts from the state the environment reaches after the last
    prompt pair. Closed-loop re-plans each step with the executed pairs
    appended to the visible prefix.
    """
    if mode not in ("open", "closed"):
        raise ValueError(f"unknown mode {mode!r}")
    spec = envs.env_spec(env)
    if task not in spec.tasks:
        raise ValueError(f"task {task!r} not defined for {env}")
    prompt_states = np.asarray(prompt_states, dtype=np.float64)
    prompt_actions = np.asarray(prompt_actions, dtype=np.float64)
    k = prompt_states.shape[0]
    if k < 1 or horizon < 1:
        raise ValueError("need at least one prompt pair and one rollout step")
    if prompt_actions.shape[0] != k:
        raise ValueError("prompt states and actions must pair up")

    L = k + horizon
    ds, da = model.cfg.state_dim, model.cfg.action_dim
    start = envs.env_step(env, prompt_states[-1], prompt_actions[-1])

    if mode == "open":
        states_in = np.zeros((L, ds))
        actions_in = np.zeros((L, da))
        states_in[:k] = prompt_states
        actions_in[:k] = prompt_actions
        rec = model.forward_masked(states_in, actions_in, masking.prompt_mask(k, L))
        acts = rec.pred_actions.astype(np.float64)
        rollout = _run(env, start, horizon, lambda t, s: acts[k + t])
    else:
        hist_s = list(prompt_states)
        hist_a = list(prompt_actions)

        def replan(t, s):
            states_in = np.zeros((L, ds))
            actions_in = np.zeros((L, da))
            states_in[:k + t] = hist_s
            actions_in[:k + t] = hist_a
            rec = model.forward_masked(states_in, actions_in,
                                       masking.prompt_mask(k + t, L))
            a = rec.pred_actions[k + t].astype(np.float64)
            hist_s.append(np.asarray(s, dtype=np.float64))
            hist_a.append(np.clip(a, -1.0, 1.0))
            return a

        rollout = _run(env, start, horizon, replan)

    total = float(rollout.rewards[:, spec.tasks.index(task)].sum())
    return rollout, total


# ---------------------------------------------------------------------------
# Offline RL finetuning (causal mask swap + twin-critic/actor heads).

@dataclasses.dataclass(frozen=True)
class RlConfig:
    discount: float = 0.99
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    target_update_rate: float = 0.005
    policy_delay: int = 2
    target_noise_std: float = 0.2
    target_noise_clip: float = 0.5
    batch_size: int = 64
    context_len: int = 16
    seed: int = 0
    eval_every: int = 250
    eval_horizon: int = 200

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must be in (0, 1)")
        if not 0.0 < self.target_update_rate <= 1.0:
            raise ValueError("target_update_rate must be in (0, 1]")
        if min(self.batch_size, self.context_len, self.policy_delay) < 1:
            raise ValueError("batch_size, context_len, policy_delay must be >= 1")


def td_target(reward: float, discount: float, min_next_q: float) -> float:
    """Non-terminal bootstrapped target: r + discount * min(Q1', Q2')."""
    return reward + discount * min_next_q


@dataclasses.dataclass
class CurvePoint:
    step: int
    eval_return: float


class RlHeads(nn.Module):
    """Actor (tanh-squashed) on state-token features, twin critics on action-token features."""

    def __init__(self, hidden_dim: int, action_dim: int):
        super().__init__()
        self.actor = nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.GELU(),
                                   nn.Linear(hidden_dim, action_dim), nn.Tanh())
        self.q1 = nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.GELU(),
                                nn.Linear(hidden_dim, 1))
        self.q2 = nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.GELU(),
                                nn.Linear(hidden_dim, 1))


def _init_heads(heads: RlHeads, seed: int) -> None:
    g = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, 5]).generate_state(1)[0]))
    with torch.no_grad():
        for name, p in heads.named_parameters():
            if p.ndim >= 2:
                model_mod._trunc_normal_(p, 0.02, g)
            else:
                p.zero_()


class SequencePolicy:
    """Deterministic sequence policy: causal features -> actor head."""

    def __init__(self, backbone, heads: RlHeads, context_len: int):
        self.backbone = backbone
        self.heads = heads
        self.context_len = context_len

    def act(self, state, hist_states=(), hist_actions=()) -> np.ndarray:
        keep = self.context_len - 1
        hs = list(hist_states)[-keep:] if keep > 0 else []
        ha = list(hist_actions)[-keep:] if keep > 0 else []
        states = np.asarray(hs + [np.asarray(state, dtype=np.float64)])
        actions = np.asarray(ha + [np.zeros(self.backbone.cfg.action_dim)])
        with torch.no_grad():
            feats = self.backbone.forward_causal(states, actions, drop_last_action=True)
            a = self.heads.actor(feats[-1])
        return a.numpy().astype(np.float64)

    def rollout_return(self, env: str, task: str, rng: np.random.Generator,
                       horizon: int) -> float:
        spec = envs.env_spec(env)
        s = envs.env_reset(env, rng)
        hist_s: list[np.ndarray] = []
        hist_a: list[np.ndarray] = []
        total = 0.0
        for _ in range(horizon):
            a = np.clip(self.act(s, hist_s, hist_a), -1.0, 1.0)
            s2 = envs.env_step(env, s, a)
            total += envs.task_reward(task, s2, a)
            hist_s.append(s)
            hist_a.append(a)
            s = s2
        return total


@dataclasses.dataclass
class RlResult:
    policy: SequencePolicy
    curve: list[CurvePoint]
    backbone: MaskedSeqModel
    heads: RlHeads
    target_backbone: MaskedSeqModel
    target_heads: RlHeads


def _stream(seed: int, *tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tag]))


def _critic_values(backbone, heads, states, actions):
    feats = backbone.forward_causal_batch(states, actions)
    action_feats = feats[:, 1::2]
    return heads.q1(action_feats).squeeze(-1), heads.q2(action_feats).squeeze(-1)


def rl_finetune(pretrained: MaskedSeqModel, dataset: Dataset, task: str,
                cfg: RlConfig, n_grad_steps: int, init: str = "pretrained",
                ) -> RlResult:
    """TD3-style offline finetuning of the causal backbone on logged data."""
    ti = dataset.task_index(task)
    env = dataset.env
    model_cfg = pretrained.cfg
    if init == "pretrained":
        backbone = copy.deepcopy(pretrained)
    elif init == "scratch":
        backbone = pretrained.fresh(cfg.seed)
    else:
        raise ValueError(f"unknown init {init!r}")
    if cfg.context_len + 1 > dataset.ep_len:
        raise ValueError("context_len + 1 exceeds episode length")

    heads = RlHeads(model_cfg.hidden_dim, model_cfg.action_dim)
    _init_heads(heads, cfg.seed)
    target_backbone = copy.deepcopy(backbone)
    target_heads = copy.deepcopy(heads)
    for p in list(target_backbone.parameters()) + list(target_heads.parameters()):
        p.requires_grad_(False)

    critic_opt = torch.optim.Adam(
        list(backbone.parameters()) + list(heads.q1.parameters())
        + list(heads.q2.parameters()), lr=cfg.critic_lr)
    actor_opt = torch.optim.Adam(heads.actor.parameters(), lr=cfg.actor_lr)
    noise_g = torch.Generator().manual_seed(
        int(np.random.SeedSequence([cfg.seed, 6]).generate_state(1)[0]))

    policy = SequencePolicy(backbone, heads, cfg.context_len)

    def eval_point(step: int) -> CurvePoint:
        ret = policy.rollout_return(env, task, _stream(cfg.seed, 4, step),
                                    cfg.eval_horizon)
        return CurvePoint(step, ret)

    curve = [eval_point(0)]
    Lc = cfg.context_len
    for step in range(n_grad_steps):
        ws, wa, wr = [], [], []
        for slot in range(cfg.batch_size):
            w = sample_window(dataset, Lc + 1, _stream(cfg.seed, 0, step, slot))
            ep = dataset.episodes[w.episode_index]
            ws.append(w.states)
            wa.append(w.actions)
            wr.append(ep.rewards[w.start:w.start + Lc, ti])
        states = torch.tensor(np.stack(ws))
        actions = torch.tensor(np.stack(wa))
        rewards = torch.tensor(np.stack(wr))

        s_now, a_now = states[:, :Lc], actions[:, :Lc]
        s_next, a_next = states[:, 1:], actions[:, 1:]

        with torch.no_grad():
            feats = target_backbone.forward_causal_batch(s_next, a_next)
            pi_next = target_heads.actor(feats[:, 0::2])
            noise = (torch.randn(pi_next.shape, generator=noise_g)
                     * cfg.target_noise_std).clamp(-cfg.target_noise_clip,
                                                   cfg.target_noise_clip)
            a_smooth = (pi_next + noise).clamp(-1.0, 1.0)
            tq1, tq2 = _critic_values(target_backbone, target_heads, s_next, a_smooth)
            y = rewards + cfg.discount * torch.minimum(tq1, tq2)

        backbone.zero_grad(set_to_none=True)
        heads.zero_grad(set_to_none=True)
        q1, q2 = _critic_values(backbone, heads, s_now, a_now)
        critic_loss = ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()
        critic_loss.backward()
        critic_opt.step()

        if (step + 1) % cfg.policy_delay == 0:
            backbone.zero_grad(set_to_none=True)
            heads.zero_grad(set_to_none=True)
            with torch.no_grad():
                base_feats = backbone.forward_causal_batch(s_now, a_now)
            pi = heads.actor(base_feats[:, 0::2])  # detached features: actor head only
            feats_pi = backbone.forward_causal_batch(s_now, pi)
            actor_loss = -heads.q1(feats_pi[:, 1::2]).mean()
            actor_loss.backward()
            actor_opt.step()
            with torch.no_grad():
                tau = cfg.target_update_rate
                for p, tp in zip(list(backbone.parameters()) + list(heads.parameters()),
                                 list(target_backbone.parameters())
                                 + list(target_heads.parameters())):
                    tp.mul_(1.0 - tau).add_(p, alpha=tau)

        if cfg.eval_every > 0 and (step + 1) % cfg.eval_every == 0:
            curve.append(eval_point(step + 1))

    return RlResult(policy=policy, curve=curve, backbone=backbone, heads=heads,
                    target_backbone=target_backbone, target_heads=target_heads)


def steps_to_threshold(curve: list[CurvePoint], threshold: float) -> int | None:
    """First curve step whose return meets the threshold, or None."""
    for point in curve:
        if point.eval_return >= threshold:
            return point.step
    return None


def write_return_curve(rows: list[tuple[int, int, float]], path: str) -> None:
    """Rows are (step, seed, eval_return)."""
    with open(path, "w") as f:
        f.write("step,seed,eval_return\n")
        for step, seed, ret in rows:
            f.write(f"{step},{seed},{ret!r}\n")
