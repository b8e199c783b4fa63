"""Masked sequence autoencoder over interleaved state/action tokens.

Tokens are ordered s0, a0, s1, a1, ...; the state and action token of timestep
t share the sinusoidal position index t. The encoder self-attends over visible
tokens only; the decoder sees the full sequence with a shared learned vector in
every masked slot, re-projected per modality with positions re-added, and two
MLP heads reconstruct states and actions. A causal mode runs the same stack
under a lower-triangular attention mask and exposes decoder features for
reinforcement-learning heads.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct

import numpy as np
import torch
from torch import nn

from . import envs
from .data import Window
from .masking import MaskSpec

# Phi(2): mass of the standard normal below +2 sigma, for truncated init.
_PHI2 = 0.9772498680518208


class NonFiniteLossError(RuntimeError):
    """Training loss became inf or NaN."""


class CheckpointError(ValueError):
    """A checkpoint file could not be parsed."""


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    state_dim: int
    action_dim: int
    hidden_dim: int = 64
    n_heads: int = 2
    n_encoder_layers: int = 2
    n_decoder_layers: int = 1
    train_context_len: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.state_dim, self.action_dim, self.hidden_dim, self.n_heads,
               self.n_encoder_layers, self.n_decoder_layers,
               self.train_context_len) < 1:
            raise ValueError("all model dimensions and counts must be >= 1")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.hidden_dim % 2 != 0:
            raise ValueError("hidden_dim must be even (sin/cos position pairs)")


def desk_model_config(env: str, **overrides) -> ModelConfig:
    spec = envs.env_spec(env)
    return ModelConfig(state_dim=spec.state_dim, action_dim=spec.action_dim,
                       **overrides)


def paper_model_config(env: str, **overrides) -> ModelConfig:
    spec = envs.env_spec(env)
    kwargs = dict(hidden_dim=256, n_heads=4, n_encoder_layers=3,
                  n_decoder_layers=2, train_context_len=64)
    kwargs.update(overrides)
    return ModelConfig(state_dim=spec.state_dim, action_dim=spec.action_dim,
                       **kwargs)


@dataclasses.dataclass
class Reconstruction:
    pred_states: np.ndarray   # [L, state_dim]
    pred_actions: np.ndarray  # [L, action_dim]


def position_indices(L: int, train_len: int) -> np.ndarray:
    """Integer positions, linearly compressed when L exceeds the train length."""
    idx = np.arange(L, dtype=np.float64)
    if L > train_len and L > 1:
        idx *= (train_len - 1) / (L - 1)
    return idx


def positions(L: int, train_len: int, hidden_dim: int) -> np.ndarray:
    """Sinusoidal embedding of (possibly rescaled) positions, [L, hidden_dim]."""
    idx = position_indices(L, train_len)
    rates = 10000.0 ** (2.0 * np.arange(hidden_dim // 2) / hidden_dim)
    table = np.zeros((L, hidden_dim))
    table[:, 0::2] = np.sin(idx[:, None] / rates)
    table[:, 1::2] = np.cos(idx[:, None] / rates)
    return table


class SelfAttention(nn.Module):
    def __init__(self, hidden_dim: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(hidden_dim, 3 * hidden_dim)
        self.proj = nn.Linear(hidden_dim, hidden_dim)
        self.attn_drop = nn.Dropout(dropout)
        self.out_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
        B, T, h = x.shape
        dh = h // self.n_heads
        q, k, v = self.qkv(x).view(B, T, 3, self.n_heads, dh).permute(2, 0, 3, 1, 4)
        att = q @ k.transpose(-2, -1) / math.sqrt(dh)
        if bias is not None:
            att = att + bias
        w = self.attn_drop(att.softmax(dim=-1))
        out = (w @ v).transpose(1, 2).reshape(B, T, h)
        return self.out_drop(self.proj(out))


class Block(nn.Module):
    """Pre-layer-norm transformer block with a x4 GELU MLP."""

    def __init__(self, hidden_dim: int, n_heads: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden_dim)
        self.attn = SelfAttention(hidden_dim, n_heads, dropout)
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.fc1 = nn.Linear(hidden_dim, 4 * hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(4 * hidden_dim, hidden_dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), bias)
        return x + self.drop(self.fc2(self.act(self.fc1(self.norm2(x)))))


class MaskedSeqModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_dim
        self.state_embed = nn.Linear(cfg.state_dim, h)
        self.action_embed = nn.Linear(cfg.action_dim, h)
        self.mask_token = nn.Parameter(torch.zeros(h))
        self.encoder = nn.ModuleList(
            Block(h, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_encoder_layers))
        self.enc_norm = nn.LayerNorm(h)
        self.state_reproj = nn.Linear(h, h)
        self.action_reproj = nn.Linear(h, h)
        self.decoder = nn.ModuleList(
            Block(h, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_decoder_layers))
        self.dec_norm = nn.LayerNorm(h)
        self.state_head = nn.Sequential(nn.Linear(h, h), nn.GELU(),
                                        nn.Linear(h, cfg.state_dim))
        self.action_head = nn.Sequential(nn.Linear(h, h), nn.GELU(),
                                         nn.Linear(h, cfg.action_dim))

    @property
    def dtype(self) -> torch.dtype:
        return self.state_embed.weight.dtype

    def _positions(self, L: int) -> torch.Tensor:
        table = positions(L, self.cfg.train_context_len, self.cfg.hidden_dim)
        return torch.as_tensor(table, dtype=self.dtype)

    def _embed_tokens(self, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        """Interleave per-timestep state and action embeddings, [B, 2L, h]."""
        B, L, _ = states.shape
        pos = self._positions(L)
        se = self.state_embed(states) + pos
        ae = self.action_embed(actions) + pos
        return torch.stack((se, ae), dim=2).reshape(B, 2 * L, self.cfg.hidden_dim)

    def forward_masked_batch(self, states: torch.Tensor, actions: torch.Tensor,
                             state_vis: torch.Tensor, action_vis: torch.Tensor,
                             visible_order: torch.Tensor | None = None,
                             ) -> tuple[torch.Tensor, torch.Tensor]:
        """Reconstruct a batch of windows. Masked slots influence nothing.

        visible_order optionally overrides the encoder's token order (a [B, n]
        index tensor into the interleaved sequence, visible slots only); the
        default is interleaved order restricted to visible slots.
        """
        B, L, _ = states.shape
        h = self.cfg.hidden_dim
        # Zero masked inputs before embedding: the forward pass is then a
        # function of visible values only, whatever sits in masked slots.
        states = torch.where(state_vis.unsqueeze(-1), states, torch.zeros((), dtype=states.dtype))
        actions = torch.where(action_vis.unsqueeze(-1), actions, torch.zeros((), dtype=actions.dtype))
        tokens = self._embed_tokens(states, actions)
        vis = torch.stack((state_vis, action_vis), dim=2).reshape(B, 2 * L)
        counts = vis.sum(dim=1)
        if int(counts.min()) < 1:
            raise ValueError("each window needs at least one visible token")

        if visible_order is None:
            order = torch.argsort((~vis).to(torch.int8), dim=1, stable=True)
        else:
            order = visible_order
        maxn = int(counts.max()) if visible_order is None else order.shape[1]
        idx = order[:, :maxn]
        gathered = torch.take_along_dim(tokens, idx.unsqueeze(-1).expand(-1, -1, h), dim=1)
        pad = torch.arange(maxn).unsqueeze(0) >= counts.unsqueeze(1)
        bias = None
        if bool(pad.any()):
            bias = torch.zeros((B, 1, 1, maxn), dtype=self.dtype)
            bias.masked_fill_(pad[:, None, None, :], float("-inf"))

        x = gathered
        for blk in self.encoder:
            x = blk(x, bias)
        x = self.enc_norm(x)

        full = self.mask_token.expand(B, 2 * L, h).clone()
        keep = ~pad
        batch_idx = torch.arange(B).unsqueeze(1).expand(B, maxn)
        full[batch_idx[keep], idx[keep]] = x[keep]

        pos = self._positions(L)
        seq_s = self.state_reproj(full[:, 0::2]) + pos
        seq_a = self.action_reproj(full[:, 1::2]) + pos
        seq = torch.stack((seq_s, seq_a), dim=2).reshape(B, 2 * L, h)
        for blk in self.decoder:
            seq = blk(seq, None)
        seq = self.dec_norm(seq)
        return self.state_head(seq[:, 0::2]), self.action_head(seq[:, 1::2])

    def forward_masked(self, states, actions, mask: MaskSpec,
                       visible_order=None) -> Reconstruction:
        """Single-window reconstruction from numpy inputs."""
        states = np.asarray(states)
        actions = np.asarray(actions)
        if states.shape != (len(mask), self.cfg.state_dim):
            raise ValueError(f"states shape {states.shape} does not match "
                             f"(L={len(mask)}, {self.cfg.state_dim})")
        if actions.shape != (len(mask), self.cfg.action_dim):
            raise ValueError(f"actions shape {actions.shape} does not match "
                             f"(L={len(mask)}, {self.cfg.action_dim})")
        order = None
        if visible_order is not None:
            vis = np.zeros(2 * len(mask), dtype=bool)
            vis[0::2] = mask.state_visible
            vis[1::2] = mask.action_visible
            slots = np.flatnonzero(vis)[np.asarray(visible_order)]
            order = torch.as_tensor(slots, dtype=torch.long).unsqueeze(0)
        with torch.no_grad():
            ps, pa = self.forward_masked_batch(
                torch.as_tensor(states, dtype=self.dtype).unsqueeze(0),
                torch.as_tensor(actions, dtype=self.dtype).unsqueeze(0),
                torch.as_tensor(mask.state_visible).unsqueeze(0),
                torch.as_tensor(mask.action_visible).unsqueeze(0),
                visible_order=order)
        return Reconstruction(ps[0].numpy(), pa[0].numpy())

    def forward_causal_batch(self, states: torch.Tensor, actions: torch.Tensor,
                             drop_last_action: bool = False) -> torch.Tensor:
        """Causal features over interleaved tokens, [B, T, h]."""
        B, L, _ = states.shape
        h = self.cfg.hidden_dim
        tokens = self._embed_tokens(states, actions)
        if drop_last_action:
            tokens = tokens[:, :-1]
        T = tokens.shape[1]
        bias = torch.full((T, T), float("-inf"), dtype=self.dtype).triu(1)

        x = tokens
        for blk in self.encoder:
            x = blk(x, bias)
        x = self.enc_norm(x)

        steps = torch.arange(T) // 2
        pos = self._positions(L)[steps]
        is_state = (torch.arange(T) % 2 == 0).unsqueeze(-1)
        seq = torch.where(is_state, self.state_reproj(x), self.action_reproj(x)) + pos
        for blk in self.decoder:
            seq = blk(seq, bias)
        return self.dec_norm(seq)

    def forward_causal(self, states, actions, drop_last_action: bool = False) -> torch.Tensor:
        """Single-sequence causal features from numpy inputs, [T, h]."""
        with torch.no_grad():
            out = self.forward_causal_batch(
                torch.as_tensor(np.asarray(states), dtype=self.dtype).unsqueeze(0),
                torch.as_tensor(np.asarray(actions), dtype=self.dtype).unsqueeze(0),
                drop_last_action=drop_last_action)
        return out[0]

    def fresh(self, seed: int) -> "MaskedSeqModel":
        """New deterministically initialized model with this model's config."""
        return init_model(self.cfg, seed)


def _trunc_normal_(tensor: torch.Tensor, std: float, g: torch.Generator) -> None:
    # Inverse-CDF sampling of a normal truncated at +/- 2 sigma.
    u = torch.rand(tensor.shape, generator=g, dtype=torch.float64)
    u = (1.0 - _PHI2) + (2.0 * _PHI2 - 1.0) * u
    tensor.copy_((torch.special.ndtri(u) * std).to(tensor.dtype))


def init_model(cfg: ModelConfig, seed: int) -> MaskedSeqModel:
    """Deterministic init: truncated-normal affine weights, zero biases."""
    model = MaskedSeqModel(cfg)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name == "mask_token":
                p.copy_((torch.randn(p.shape, generator=g, dtype=torch.float64)
                         * 0.02).to(p.dtype))
            elif p.ndim >= 2:
                _trunc_normal_(p, 0.02, g)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                p.fill_(1.0)  # layer-norm gains
    return model


def loss(recon: Reconstruction, window: Window, mask: MaskSpec,
         mode: str = "total") -> float:
    """MSE pooled over all state and action coordinates of the window.

    total averages over every slot; masked averages over masked slots only and
    is 0 when nothing is masked.
    """
    err_s = (np.asarray(recon.pred_states, dtype=np.float64)
             - np.asarray(window.states, dtype=np.float64)) ** 2
    err_a = (np.asarray(recon.pred_actions, dtype=np.float64)
             - np.asarray(window.actions, dtype=np.float64)) ** 2
    if mode == "total":
        return float((err_s.sum() + err_a.sum()) / (err_s.size + err_a.size))
    if mode == "masked":
        ms, ma = ~mask.state_visible, ~mask.action_visible
        denom = ms.sum() * err_s.shape[1] + ma.sum() * err_a.shape[1]
        if denom == 0:
            return 0.0
        return float((err_s[ms].sum() + err_a[ma].sum()) / denom)
    raise ValueError(f"unknown loss mode {mode!r}")


def batch_loss(pred_s: torch.Tensor, pred_a: torch.Tensor,
               states: torch.Tensor, actions: torch.Tensor,
               state_vis: torch.Tensor, action_vis: torch.Tensor,
               mode: str = "total") -> torch.Tensor:
    """Mean over the batch of the per-window loss above."""
    err_s = (pred_s - states) ** 2
    err_a = (pred_a - actions) ** 2
    B, L, ds = err_s.shape
    da = err_a.shape[2]
    if mode == "total":
        per = (err_s.sum(dim=(1, 2)) + err_a.sum(dim=(1, 2))) / (L * (ds + da))
    elif mode == "masked":
        ms = (~state_vis).to(err_s.dtype)
        ma = (~action_vis).to(err_a.dtype)
        num = (err_s.sum(dim=2) * ms).sum(dim=1) + (err_a.sum(dim=2) * ma).sum(dim=1)
        denom = ms.sum(dim=1) * ds + ma.sum(dim=1) * da
        per = torch.where(denom > 0, num / denom.clamp(min=1), torch.zeros_like(num))
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return per.mean()


def loss_and_grads(model: MaskedSeqModel, states: torch.Tensor, actions: torch.Tensor,
                   state_vis: torch.Tensor, action_vis: torch.Tensor,
                   mode: str = "total") -> tuple[float, dict[str, torch.Tensor]]:
    """Backprop the batch loss; raises NonFiniteLossError on inf/NaN."""
    model.zero_grad(set_to_none=True)
    pred_s, pred_a = model.forward_masked_batch(states, actions, state_vis, action_vis)
    value = batch_loss(pred_s, pred_a, states, actions, state_vis, action_vis, mode)
    if not torch.isfinite(value):
        raise NonFiniteLossError(f"loss is {value.item()}")
    value.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}
    return float(value.item()), grads


# ---------------------------------------------------------------------------
# Checkpoints: u32-length-prefixed JSON header, then f32 little-endian tensors
# in manifest order. Round-trips are bit-exact for float32 modules.

def save_checkpoint(module: nn.Module, arch: str, config: dict, path: str,
                    extra: dict | None = None) -> None:
    sd = module.state_dict()
    header = {"arch": arch, "config": config,
              "manifest": [[name, list(t.shape)] for name, t in sd.items()]}
    if extra is not None:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for t in sd.values():
            f.write(np.ascontiguousarray(t.detach().numpy(), dtype="<f4").tobytes())


def read_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4:
        raise CheckpointError("file too short for header length")
    (blob_len,) = struct.unpack("<I", buf[:4])
    if 4 + blob_len > len(buf):
        raise CheckpointError("file ends inside JSON header")
    try:
        header = json.loads(buf[4:4 + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad JSON header: {exc}") from exc
    off = 4 + blob_len
    tensors = {}
    for name, shape in header["manifest"]:
        n = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if off + n > len(buf):
            raise CheckpointError(f"file ends inside tensor {name!r}")
        tensors[name] = np.frombuffer(buf[off:off + n], dtype="<f4").reshape(shape).copy()
        off += n
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after tensors")
    return header, tensors


def _load_into(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    sd = module.state_dict()
    if set(sd) != set(tensors):
        raise CheckpointError("manifest does not match module parameters")
    with torch.no_grad():
        for name, arr in tensors.items():
            sd[name].copy_(torch.from_numpy(arr))


def save_model(model: MaskedSeqModel, path: str, extra: dict | None = None) -> None:
    save_checkpoint(model, "masked_seq", dataclasses.asdict(model.cfg), path, extra)


def load_model(path: str) -> tuple[MaskedSeqModel, dict]:
    header, tensors = read_checkpoint(path)
    if header.get("arch") != "masked_seq":
        raise CheckpointError(f"not a masked sequence model: {header.get('arch')!r}")
    model = MaskedSeqModel(ModelConfig(**header["config"]))
    _load_into(model, tensors)
    return model, header.get("extra", {})
