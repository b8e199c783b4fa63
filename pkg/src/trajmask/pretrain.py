"""Self-supervised pretraining: masked windows in, Adam updates out.

Every random draw comes from a purpose-tagged numpy SeedSequence stream:
[seed, 0, step, slot] for training samples, [seed, 1] for the holdout split,
[seed, 2, i] for the fixed evaluation windows. Batch assembly is therefore
independent of scheduling and the whole run is reproducible bit for bit.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np
import torch

from . import masking, model as model_mod
from .data import Dataset, sample_window
from .model import MaskedSeqModel, ModelConfig, NonFiniteLossError


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 64
    n_steps: int = 5000
    ratio_set: tuple[float, ...] = masking.DEFAULT_RATIOS
    loss_mode: str = "total"
    seed: int = 0
    checkpoint_every: int = 1000
    eval_holdout_fraction: float = 0.05
    log_every: int = 100
    grad_clip: float = 1.0
    n_eval_windows: int = 256

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.n_steps < 0:
            raise ValueError("batch_size must be >= 1 and n_steps >= 0")
        if self.loss_mode not in ("total", "masked"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}")
        if not 0.0 <= self.eval_holdout_fraction < 1.0:
            raise ValueError("eval_holdout_fraction must be in [0, 1)")


def paper_train_config(**overrides) -> TrainConfig:
    kwargs = dict(batch_size=384, n_steps=400_000)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


@dataclasses.dataclass
class LossRow:
    step: int
    train_loss: float
    holdout_total_mse: float
    holdout_masked_mse: float


@dataclasses.dataclass
class TrainResult:
    model: MaskedSeqModel
    loss_log: list[LossRow]
    holdout_episodes: np.ndarray        # global indices excluded from training
    sampled_episodes: np.ndarray        # [n_steps, batch] global indices drawn
    clip_steps: list[int]               # steps where the gradient norm was clipped
    checkpoint_paths: list[str]
    holdout_target_variance: float      # mean per-coordinate variance of eval targets

    @property
    def final_holdout_total_mse(self) -> float:
        return self.loss_log[-1].holdout_total_mse

    @property
    def final_holdout_masked_mse(self) -> float:
        return self.loss_log[-1].holdout_masked_mse


def _stream(seed: int, *tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tag]))


def split_holdout(dataset: Dataset, fraction: float, seed: int,
                  ) -> tuple[Dataset, Dataset | None, np.ndarray]:
    """Deterministically split off held-out episodes for evaluation."""
    n = dataset.n_episodes
    k = int(round(fraction * n))
    if fraction > 0 and k == 0:
        k = 1
    if k == 0:
        return dataset, None, np.array([], dtype=np.int64)
    held = np.sort(_stream(seed, 1).choice(n, size=k, replace=False))
    train_idx = np.setdiff1d(np.arange(n), held)
    train = dataclasses.replace(dataset, episodes=[dataset.episodes[i] for i in train_idx])
    holdout = dataclasses.replace(dataset, episodes=[dataset.episodes[i] for i in held])
    return train, holdout, held


def _draw_sample(d: Dataset, L: int, ratio_set, rng):
    w = sample_window(d, L, rng)
    m = masking.sample_mask_spec(L, ratio_set, rng)
    return w, m


def _eval_batch(holdout: Dataset, cfg: TrainConfig, L: int):
    """Fixed windows and masks used for every holdout evaluation of a run."""
    ws, ms = [], []
    for i in range(cfg.n_eval_windows):
        w, m = _draw_sample(holdout, L, cfg.ratio_set, _stream(cfg.seed, 2, i))
        ws.append(w)
        ms.append(m)
    states = torch.tensor(np.stack([w.states for w in ws]))
    actions = torch.tensor(np.stack([w.actions for w in ws]))
    svis = torch.tensor(np.stack([m.state_visible for m in ms]))
    avis = torch.tensor(np.stack([m.action_visible for m in ms]))
    return states, actions, svis, avis


def _target_variance(states: torch.Tensor, actions: torch.Tensor) -> float:
    """Mean over coordinates of the per-coordinate variance of eval targets."""
    s = states.reshape(-1, states.shape[-1]).numpy().astype(np.float64)
    a = actions.reshape(-1, actions.shape[-1]).numpy().astype(np.float64)
    return float(np.mean(np.concatenate([s.var(axis=0), a.var(axis=0)])))


def _eval_holdout(model: MaskedSeqModel, batch) -> tuple[float, float]:
    states, actions, svis, avis = batch
    with torch.no_grad():
        ps, pa = model.forward_masked_batch(states, actions, svis, avis)
        total = model_mod.batch_loss(ps, pa, states, actions, svis, avis, "total")
        masked = model_mod.batch_loss(ps, pa, states, actions, svis, avis, "masked")
    return float(total.item()), float(masked.item())


def pretrain(model_cfg: ModelConfig, dataset: Dataset, cfg: TrainConfig,
             out_dir: str | None = None) -> TrainResult:
    """Train a masked autoencoder on the dataset; returns the run artifacts."""
    spec_dims = (dataset.state_dim, dataset.action_dim)
    if spec_dims != (model_cfg.state_dim, model_cfg.action_dim):
        raise ValueError(f"dataset dims {spec_dims} do not match model config "
                         f"({model_cfg.state_dim}, {model_cfg.action_dim})")
    L = model_cfg.train_context_len
    if L > dataset.ep_len:
        raise ValueError("train_context_len exceeds episode length")

    train, holdout, held_idx = split_holdout(dataset, cfg.eval_holdout_fraction, cfg.seed)
    train_global = np.setdiff1d(np.arange(dataset.n_episodes), held_idx)
    eval_batch = _eval_batch(holdout, cfg, L) if holdout is not None else None
    target_var = _target_variance(eval_batch[0], eval_batch[1]) if eval_batch else float("nan")

    model = model_mod.init_model(model_cfg, cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas)

    loss_log: list[LossRow] = []
    clip_steps: list[int] = []
    checkpoint_paths: list[str] = []
    sampled = np.zeros((cfg.n_steps, cfg.batch_size), dtype=np.int64)
    recent: list[float] = []

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    def maybe_checkpoint(step: int) -> None:
        if out_dir is None:
            return
        due = cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0
        if due or step == cfg.n_steps:
            path = os.path.join(out_dir, f"ckpt_{step:06d}.ckpt")
            if path not in checkpoint_paths:
                model_mod.save_model(model, path, extra={"step": step})
                checkpoint_paths.append(path)

    for step in range(cfg.n_steps):
        batch_states, batch_actions, batch_svis, batch_avis = [], [], [], []
        for slot in range(cfg.batch_size):
            w, m = _draw_sample(train, L, cfg.ratio_set, _stream(cfg.seed, 0, step, slot))
            sampled[step, slot] = train_global[w.episode_index]
            batch_states.append(w.states)
            batch_actions.append(w.actions)
            batch_svis.append(m.state_visible)
            batch_avis.append(m.action_visible)
        states = torch.tensor(np.stack(batch_states))
        actions = torch.tensor(np.stack(batch_actions))
        svis = torch.tensor(np.stack(batch_svis))
        avis = torch.tensor(np.stack(batch_avis))

        try:
            train_loss, _ = model_mod.loss_and_grads(model, states, actions,
                                                     svis, avis, cfg.loss_mode)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"aborted at step {step}: {exc}") from exc
        norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        if float(norm) > cfg.grad_clip:
            clip_steps.append(step)
        opt.step()
        recent.append(train_loss)

        done = step + 1
        if done % cfg.log_every == 0 or done == cfg.n_steps:
            window = recent[-cfg.log_every:]
            if eval_batch is not None:
                tot, msk = _eval_holdout(model, eval_batch)
            else:
                tot, msk = float("nan"), float("nan")
            loss_log.append(LossRow(done, float(np.mean(window)), tot, msk))
        maybe_checkpoint(done)

    if cfg.n_steps == 0 and out_dir is not None:
        maybe_checkpoint(0)
    if out_dir is not None:
        write_loss_log(loss_log, os.path.join(out_dir, "loss_log.csv"))

    return TrainResult(model=model, loss_log=loss_log, holdout_episodes=held_idx,
                       sampled_episodes=sampled, clip_steps=clip_steps,
                       checkpoint_paths=checkpoint_paths,
                       holdout_target_variance=target_var)


def write_loss_log(rows: list[LossRow], path: str) -> None:
    with open(path, "w") as f:
        f.write("step,train_loss,holdout_total_mse,holdout_masked_mse\n")
        for r in rows:
            f.write(f"{r.step},{r.train_loss!r},{r.holdout_total_mse!r},"
                    f"{r.holdout_masked_mse!r}\n")


def read_loss_log(path: str) -> list[LossRow]:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "step,train_loss,holdout_total_mse,holdout_masked_mse":
            raise ValueError(f"unexpected loss log header: {header!r}")
        for line in f:
            step, tr, tot, msk = line.strip().split(",")
            rows.append(LossRow(int(step), float(tr), float(tot), float(msk)))
    return rows
