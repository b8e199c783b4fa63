"""Reference sequence models trained on the same data and step budgets.

Three baselines: a next-token causal transformer (gpt), a goal-conditioned
causal behavior cloner (goal_gpt), and a goal-conditioned MLP regressor
(goal_mlp). They share the dataset format, checkpoint format, rng streams,
and optimizer settings with the main model so comparisons stay budget-matched.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np
import torch
from torch import nn

from . import downstream, envs, model as model_mod
from .data import Dataset, sample_window
from .downstream import GoalQuery, Rollout
from .model import Block, NonFiniteLossError, positions
from .pretrain import TrainConfig, _stream


@dataclasses.dataclass(frozen=True)
class GptConfig:
    state_dim: int
    action_dim: int
    hidden_dim: int = 64
    n_heads: int = 2
    n_layers: int = 3
    train_context_len: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.state_dim, self.action_dim, self.n_layers, self.n_heads) < 1:
            raise ValueError("dims and layer/head counts must be >= 1")
        if self.hidden_dim % self.n_heads or self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even and divisible by n_heads")


@dataclasses.dataclass(frozen=True)
class MlpConfig:
    state_dim: int
    action_dim: int
    hidden_sizes: tuple[int, ...] = (256, 256, 256)

    def __post_init__(self):
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("need at least one positive hidden size")


def desk_gpt_config(env: str, **overrides) -> GptConfig:
    spec = envs.env_spec(env)
    kwargs = dict(state_dim=spec.state_dim, action_dim=spec.action_dim)
    kwargs.update(overrides)
    return GptConfig(**kwargs)


def paper_gpt_config(env: str, **overrides) -> GptConfig:
    kwargs = dict(hidden_dim=256, n_heads=4, n_layers=5, train_context_len=64)
    kwargs.update(overrides)
    return desk_gpt_config(env, **kwargs)


def desk_mlp_config(env: str, **overrides) -> MlpConfig:
    spec = envs.env_spec(env)
    kwargs = dict(state_dim=spec.state_dim, action_dim=spec.action_dim)
    kwargs.update(overrides)
    return MlpConfig(**kwargs)


def paper_mlp_config(env: str, **overrides) -> MlpConfig:
    kwargs = dict(hidden_sizes=(1024,) * 5)
    kwargs.update(overrides)
    return desk_mlp_config(env, **kwargs)


def _head(hidden_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.GELU(),
                         nn.Linear(hidden_dim, out_dim))


def _init_module(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim >= 2:
                model_mod._trunc_normal_(p, 0.02, g)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                p.fill_(1.0)  # layer-norm gains


class NextTokenModel(nn.Module):
    """Causal transformer over interleaved tokens; predicts the next token."""

    def __init__(self, cfg: GptConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_dim
        self.state_embed = nn.Linear(cfg.state_dim, h)
        self.action_embed = nn.Linear(cfg.action_dim, h)
        self.blocks = nn.ModuleList(
            Block(h, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_layers))
        self.out_norm = nn.LayerNorm(h)
        self.state_head = _head(h, cfg.state_dim)
        self.action_head = _head(h, cfg.action_dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.state_embed.weight.dtype

    def _positions(self, L: int) -> torch.Tensor:
        table = positions(L, self.cfg.train_context_len, self.cfg.hidden_dim)
        return torch.as_tensor(table, dtype=self.dtype)

    def forward_causal_batch(self, states: torch.Tensor, actions: torch.Tensor,
                             drop_last_action: bool = False) -> torch.Tensor:
        """Causal features over interleaved tokens, [B, T, h]."""
        B, L, _ = states.shape
        pos = self._positions(L)
        se = self.state_embed(states) + pos
        ae = self.action_embed(actions) + pos
        x = torch.stack((se, ae), dim=2).reshape(B, 2 * L, self.cfg.hidden_dim)
        if drop_last_action:
            x = x[:, :-1]
        T = x.shape[1]
        bias = torch.full((T, T), float("-inf"), dtype=self.dtype).triu(1)
        for blk in self.blocks:
            x = blk(x, bias)
        return self.out_norm(x)

    def forward_causal(self, states, actions, drop_last_action: bool = False) -> torch.Tensor:
        """Single-sequence causal features from numpy inputs, [T, h]."""
        with torch.no_grad():
            out = self.forward_causal_batch(
                torch.as_tensor(np.asarray(states), dtype=self.dtype).unsqueeze(0),
                torch.as_tensor(np.asarray(actions), dtype=self.dtype).unsqueeze(0),
                drop_last_action=drop_last_action)
        return out[0]

    def predict_batch(self, states: torch.Tensor, actions: torch.Tensor,
                      ) -> tuple[torch.Tensor, torch.Tensor]:
        """Next-token predictions: states s_1..s_{L-1} and actions a_0..a_{L-1}."""
        feats = self.forward_causal_batch(states, actions)
        pred_actions = self.action_head(feats[:, 0::2])
        pred_states = self.state_head(feats[:, 1::2][:, :-1])
        return pred_states, pred_actions

    def fresh(self, seed: int) -> "NextTokenModel":
        return init_gpt(self.cfg, seed)


class GoalTokenModel(nn.Module):
    """Causal behavior cloner on (state, goal) tokens; predicts each action."""

    def __init__(self, cfg: GptConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_dim
        self.pair_embed = nn.Linear(2 * cfg.state_dim, h)
        self.blocks = nn.ModuleList(
            Block(h, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_layers))
        self.out_norm = nn.LayerNorm(h)
        self.action_head = _head(h, cfg.action_dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.pair_embed.weight.dtype

    def forward_batch(self, states: torch.Tensor, goals: torch.Tensor) -> torch.Tensor:
        """Action predictions at every position, [B, L, action_dim]."""
        B, L, _ = states.shape
        tokens = torch.cat((states, goals.unsqueeze(1).expand(-1, L, -1)), dim=-1)
        table = positions(L, self.cfg.train_context_len, self.cfg.hidden_dim)
        x = self.pair_embed(tokens) + torch.as_tensor(table, dtype=self.dtype)
        bias = torch.full((L, L), float("-inf"), dtype=self.dtype).triu(1)
        for blk in self.blocks:
            x = blk(x, bias)
        return self.action_head(self.out_norm(x))

    def fresh(self, seed: int) -> "GoalTokenModel":
        return init_goal_gpt(self.cfg, seed)


class MlpModel(nn.Module):
    """MLP regressing the action at a state from (state, goal state)."""

    def __init__(self, cfg: MlpConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        last = 2 * cfg.state_dim
        for width in cfg.hidden_sizes:
            layers += [nn.Linear(last, width), nn.GELU()]
            last = width
        layers.append(nn.Linear(last, cfg.action_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, state_goal: torch.Tensor) -> torch.Tensor:
        return self.net(state_goal)

    def fresh(self, seed: int) -> "MlpModel":
        return init_goal_mlp(self.cfg, seed)


def init_gpt(cfg: GptConfig, seed: int) -> NextTokenModel:
    m = NextTokenModel(cfg)
    _init_module(m, seed)
    return m


def init_goal_gpt(cfg: GptConfig, seed: int) -> GoalTokenModel:
    m = GoalTokenModel(cfg)
    _init_module(m, seed)
    return m


def init_goal_mlp(cfg: MlpConfig, seed: int) -> MlpModel:
    m = MlpModel(cfg)
    _init_module(m, seed)
    return m


# ---------------------------------------------------------------------------
# Losses and holdout metrics.

def gpt_loss(pred_states: torch.Tensor, pred_actions: torch.Tensor,
             states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Per-coordinate MSE over every next-token prediction of the window."""
    err_s = ((pred_states - states[:, 1:]) ** 2).sum(dim=(1, 2))
    err_a = ((pred_actions - actions) ** 2).sum(dim=(1, 2))
    L, ds = states.shape[1], states.shape[2]
    denom = L * actions.shape[2] + (L - 1) * ds
    return ((err_s + err_a) / denom).mean()


def train_mean_action(dataset: Dataset) -> np.ndarray:
    acts = np.concatenate([ep.actions for ep in dataset.episodes], axis=0)
    return acts.mean(axis=0, dtype=np.float64)


@dataclasses.dataclass
class BaselineRow:
    step: int
    train_loss: float
    holdout_mse: float


@dataclasses.dataclass
class BaselineResult:
    model: nn.Module
    loss_log: list[BaselineRow]
    holdout_episodes: np.ndarray
    checkpoint_paths: list[str]
    mean_action_mse: float  # constant-predictor reference on the same eval targets

    @property
    def final_holdout_mse(self) -> float:
        return self.loss_log[-1].holdout_mse if self.loss_log else float("nan")


def _eval_windows(holdout: Dataset, cfg: TrainConfig, L: int, with_pairs: bool):
    ws, pairs = [], []
    for i in range(cfg.n_eval_windows):
        rng = _stream(cfg.seed, 2, i)
        w = sample_window(holdout, L, rng)
        ws.append(w)
        if with_pairs:
            pairs.append(_draw_pair(L, rng))
    states = torch.tensor(np.stack([w.states for w in ws]))
    actions = torch.tensor(np.stack([w.actions for w in ws]))
    return states, actions, np.array(pairs, dtype=np.int64) if with_pairs else None


def _draw_pair(L: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform draw over the L*(L-1)/2 ordered pairs i < j."""
    idx = int(rng.integers(L * (L - 1) // 2))
    j = 1
    while idx >= j:
        idx -= j
        j += 1
    return idx, j


def _finite_or_raise(value: torch.Tensor, step: int) -> None:
    if not torch.isfinite(value):
        raise NonFiniteLossError(f"aborted at step {step}: loss is {value.item()}")


def _train_loop(model: nn.Module, dataset: Dataset, cfg: TrainConfig,
                batch_loss_fn, eval_fn, out_dir: str | None,
                ref_mse_fn=None) -> BaselineResult:
    from .pretrain import split_holdout

    train, holdout, held_idx = split_holdout(dataset, cfg.eval_holdout_fraction, cfg.seed)
    mean_action_mse = float("nan")
    if ref_mse_fn is not None and holdout is not None:
        mean_action_mse = ref_mse_fn(train, holdout)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
    loss_log: list[BaselineRow] = []
    recent: list[float] = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for step in range(cfg.n_steps):
        model.zero_grad(set_to_none=True)
        value = batch_loss_fn(train, step)
        _finite_or_raise(value, step)
        value.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        recent.append(float(value.item()))
        done = step + 1
        if done % cfg.log_every == 0 or done == cfg.n_steps:
            window = recent[-cfg.log_every:]
            mse = eval_fn(holdout) if holdout is not None else float("nan")
            loss_log.append(BaselineRow(done, float(np.mean(window)), mse))

    checkpoint_paths = []
    if out_dir is not None:
        path = os.path.join(out_dir, f"ckpt_{cfg.n_steps:06d}.ckpt")
        save_baseline(model, path, extra={"step": cfg.n_steps})
        checkpoint_paths.append(path)
        _write_baseline_log(loss_log, os.path.join(out_dir, "loss_log.csv"))

    return BaselineResult(model=model, loss_log=loss_log, holdout_episodes=held_idx,
                          checkpoint_paths=checkpoint_paths,
                          mean_action_mse=mean_action_mse)


def _write_baseline_log(rows: list[BaselineRow], path: str) -> None:
    with open(path, "w") as f:
        f.write("step,train_loss,holdout_mse\n")
        for r in rows:
            f.write(f"{r.step},{r.train_loss!r},{r.holdout_mse!r}\n")


def _check_dims(dataset: Dataset, cfg) -> None:
    if (dataset.state_dim, dataset.action_dim) != (cfg.state_dim, cfg.action_dim):
        raise ValueError("dataset dims do not match baseline config")


def _batch_windows(train: Dataset, L: int, cfg: TrainConfig, step: int):
    ws = [sample_window(train, L, _stream(cfg.seed, 0, step, slot))
          for slot in range(cfg.batch_size)]
    states = torch.tensor(np.stack([w.states for w in ws]))
    actions = torch.tensor(np.stack([w.actions for w in ws]))
    return states, actions


def train_gpt(dataset: Dataset, cfg: TrainConfig,
              model_cfg: GptConfig | None = None,
              out_dir: str | None = None) -> BaselineResult:
    """Next-token pretraining; holdout metric is the pooled next-token MSE."""
    model_cfg = model_cfg or desk_gpt_config(dataset.env)
    _check_dims(dataset, model_cfg)
    L = model_cfg.train_context_len
    if L > dataset.ep_len:
        raise ValueError("train_context_len exceeds episode length")
    model = init_gpt(model_cfg, cfg.seed)

    def batch_loss_fn(train, step):
        states, actions = _batch_windows(train, L, cfg, step)
        return gpt_loss(*model.predict_batch(states, actions), states, actions)

    def eval_fn(holdout):
        states, actions, _ = _eval_windows(holdout, cfg, L, with_pairs=False)
        with torch.no_grad():
            value = gpt_loss(*model.predict_batch(states, actions), states, actions)
        return float(value.item())

    return _train_loop(model, dataset, cfg, batch_loss_fn, eval_fn, out_dir)


def gpt_state_metrics(model: NextTokenModel, holdout: Dataset, cfg: TrainConfig,
                      ) -> tuple[float, float]:
    """One-step state-prediction MSE and the matching per-coordinate variance."""
    L = model.cfg.train_context_len
    states, actions, _ = _eval_windows(holdout, cfg, L, with_pairs=False)
    with torch.no_grad():
        pred_states, _ = model.predict_batch(states, actions)
    targets = states[:, 1:].numpy().astype(np.float64)
    mse = float(np.mean((pred_states.numpy().astype(np.float64) - targets) ** 2))
    var = float(np.mean(targets.reshape(-1, targets.shape[-1]).var(axis=0)))
    return mse, var


def train_goal_gpt(dataset: Dataset, cfg: TrainConfig,
                   model_cfg: GptConfig | None = None,
                   out_dir: str | None = None) -> BaselineResult:
    """Goal-conditioned BC; the window's last state is the goal for every token."""
    model_cfg = model_cfg or desk_gpt_config(dataset.env)
    _check_dims(dataset, model_cfg)
    L = model_cfg.train_context_len
    if L > dataset.ep_len:
        raise ValueError("train_context_len exceeds episode length")
    model = init_goal_gpt(model_cfg, cfg.seed)

    def batch_loss_fn(train, step):
        states, actions = _batch_windows(train, L, cfg, step)
        pred = model.forward_batch(states, states[:, -1])
        return ((pred - actions) ** 2).mean()

    def eval_fn(holdout):
        states, actions, _ = _eval_windows(holdout, cfg, L, with_pairs=False)
        with torch.no_grad():
            pred = model.forward_batch(states, states[:, -1])
        return float(((pred - actions) ** 2).mean().item())

    def ref_mse_fn(train, holdout):
        _, actions, _ = _eval_windows(holdout, cfg, L, with_pairs=False)
        mean = train_mean_action(train)
        return float(np.mean((actions.numpy().astype(np.float64) - mean) ** 2))

    return _train_loop(model, dataset, cfg, batch_loss_fn, eval_fn, out_dir,
                       ref_mse_fn=ref_mse_fn)


def train_goal_mlp(dataset: Dataset, cfg: TrainConfig,
                   model_cfg: MlpConfig | None = None,
                   out_dir: str | None = None,
                   pair_window: int | None = None) -> BaselineResult:
    """Regress a_i from (s_i, s_j) for uniformly drawn pairs i < j in a window."""
    model_cfg = model_cfg or desk_mlp_config(dataset.env)
    _check_dims(dataset, model_cfg)
    L = pair_window if pair_window is not None else min(32, dataset.ep_len)
    if L > dataset.ep_len or L < 2:
        raise ValueError("pair window must fit the episode and allow i < j")
    model = init_goal_mlp(model_cfg, cfg.seed)

    def batch_loss_fn(train, step):
        xs, ys = [], []
        for slot in range(cfg.batch_size):
            rng = _stream(cfg.seed, 0, step, slot)
            w = sample_window(train, L, rng)
            i, j = _draw_pair(L, rng)
            xs.append(np.concatenate([w.states[i], w.states[j]]))
            ys.append(w.actions[i])
        x = torch.tensor(np.stack(xs))
        y = torch.tensor(np.stack(ys))
        return ((model(x) - y) ** 2).mean()

    def eval_pairs(holdout):
        states, actions, pairs = _eval_windows(holdout, cfg, L, with_pairs=True)
        rows = np.arange(len(pairs))
        x = torch.cat((states[rows, pairs[:, 0]], states[rows, pairs[:, 1]]), dim=-1)
        return x, actions[rows, pairs[:, 0]]

    def eval_fn(holdout):
        x, y = eval_pairs(holdout)
        with torch.no_grad():
            pred = model(x)
        return float(((pred - y) ** 2).mean().item())

    def ref_mse_fn(train, holdout):
        _, y = eval_pairs(holdout)
        mean = train_mean_action(train)
        return float(np.mean((y.numpy().astype(np.float64) - mean) ** 2))

    return _train_loop(model, dataset, cfg, batch_loss_fn, eval_fn, out_dir,
                       ref_mse_fn=ref_mse_fn)


# ---------------------------------------------------------------------------
# Deployment: goal reaching and prompting with the baselines.

def _current_goal(goals, t: int):
    for g, b in goals:
        if b > t:
            return g
    return goals[-1][0]


def baseline_reach(model: nn.Module, env: str, query: GoalQuery,
                   mode: str = "closed") -> tuple[Rollout, list[float]]:
    """Closed-loop goal reaching with a goal-conditioned baseline."""
    if isinstance(model, NextTokenModel):
        raise ValueError("next-token model is not goal-conditioned; "
                         "use a goal_gpt or goal_mlp baseline")
    if mode != "closed":
        raise ValueError("baselines execute closed-loop only")
    n_steps = query.budgets[-1]

    if isinstance(model, MlpModel):
        def act(t, s):
            x = np.concatenate([s, _current_goal(query.goals, t)])
            with torch.no_grad():
                a = model(torch.as_tensor(x, dtype=torch.float32))
            return a.numpy().astype(np.float64)
    elif isinstance(model, GoalTokenModel):
        Lc = model.cfg.train_context_len
        hist: list[np.ndarray] = []

        def act(t, s):
            hist.append(np.asarray(s, dtype=np.float64))
            window = np.stack(hist[-Lc:])
            goal = np.asarray(_current_goal(query.goals, t), dtype=np.float64)
            with torch.no_grad():
                pred = model.forward_batch(
                    torch.as_tensor(window, dtype=torch.float32).unsqueeze(0),
                    torch.as_tensor(goal, dtype=torch.float32).unsqueeze(0))
            return pred[0, -1].numpy().astype(np.float64)
    else:
        raise ValueError(f"unsupported baseline model {type(model).__name__}")

    rollout = downstream._run(env, query.start, n_steps, act)
    return rollout, downstream.goal_distances(rollout.states, query.goals)


def gpt_prompt_rollout(model: NextTokenModel, env: str, prompt_states,
                       prompt_actions, task: str, horizon: int,
                       ) -> tuple[Rollout, float]:
    """Closed-loop continuation: predict the next action from the history."""
    spec = envs.env_spec(env)
    if task not in spec.tasks:
        raise ValueError(f"task {task!r} not defined for {env}")
    prompt_states = np.asarray(prompt_states, dtype=np.float64)
    prompt_actions = np.asarray(prompt_actions, dtype=np.float64)
    if prompt_states.shape[0] != prompt_actions.shape[0] or prompt_states.shape[0] < 1:
        raise ValueError("prompt states and actions must pair up")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    Lc = model.cfg.train_context_len
    hist_s = list(prompt_states)
    hist_a = list(prompt_actions)
    start = envs.env_step(env, hist_s[-1], hist_a[-1])

    def act(t, s):
        states = np.stack((hist_s + [np.asarray(s, dtype=np.float64)])[-Lc:])
        actions = np.stack((hist_a + [np.zeros(model.cfg.action_dim)])[-Lc:])
        with torch.no_grad():
            _, pred_a = model.predict_batch(
                torch.as_tensor(states, dtype=torch.float32).unsqueeze(0),
                torch.as_tensor(actions, dtype=torch.float32).unsqueeze(0))
        a = pred_a[0, -1].numpy().astype(np.float64)
        hist_s.append(np.asarray(s, dtype=np.float64))
        hist_a.append(np.clip(a, -1.0, 1.0))
        return a

    rollout = downstream._run(env, start, horizon, act)
    total = float(rollout.rewards[:, spec.tasks.index(task)].sum())
    return rollout, total


# ---------------------------------------------------------------------------
# Checkpoints (same container format as the main model).

_ARCHS = {"gpt": (NextTokenModel, GptConfig),
          "goal_gpt": (GoalTokenModel, GptConfig),
          "goal_mlp": (MlpModel, MlpConfig)}


def baseline_kind(model: nn.Module) -> str:
    for kind, (cls, _) in _ARCHS.items():
        if type(model) is cls:
            return kind
    raise ValueError(f"unknown baseline model {type(model).__name__}")


def save_baseline(model: nn.Module, path: str, extra: dict | None = None) -> None:
    model_mod.save_checkpoint(model, baseline_kind(model),
                              dataclasses.asdict(model.cfg), path, extra)


def load_baseline(path: str) -> tuple[nn.Module, dict]:
    header, tensors = model_mod.read_checkpoint(path)
    arch = header.get("arch")
    if arch not in _ARCHS:
        raise model_mod.CheckpointError(f"not a baseline checkpoint: {arch!r}")
    cls, cfg_cls = _ARCHS[arch]
    cfg = cfg_cls(**{k: tuple(v) if isinstance(v, list) else v
                     for k, v in header["config"].items()})
    model = cls(cfg)
    model_mod._load_into(model, tensors)
    return model, header.get("extra", {})
