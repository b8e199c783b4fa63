"""Trajectory datasets: collection, binary storage, and window sampling.

A dataset is a list of fixed-length episodes collected from one environment,
with per-step rewards recorded for every task of that environment so a single
dataset can serve any downstream task. Files use the MDP1 binary layout and
round-trip byte-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from . import envs

MAGIC = b"MDP1"
VERSION = 1

# Desk-scale recipe sizes.
EPISODE_LEN = 200
NEAR_EXPERT_EPISODES_PER_TASK = 2000
MIXED_EPISODES_PER_DOMAIN = 4000


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""


class BadMagicError(DatasetFormatError):
    """File does not start with the MDP1 magic."""


class VersionError(DatasetFormatError):
    """File declares an unsupported format version."""


class TruncatedError(DatasetFormatError):
    """File ends before the payload its header promises."""


@dataclasses.dataclass(frozen=True)
class ExpertPolicy:
    task: str
    noise_std: float


@dataclasses.dataclass(frozen=True)
class RandomPolicy:
    """Uniform actions on [-1, 1] per dimension."""


@dataclasses.dataclass(frozen=True)
class EpsilonMixPolicy:
    """Noise-free expert, replaced by a uniform random action with prob epsilon."""

    task: str
    epsilon: float


PolicySpec = ExpertPolicy | RandomPolicy | EpsilonMixPolicy


@dataclasses.dataclass(eq=False)
class Trajectory:
    states: np.ndarray   # [ep_len, state_dim] f32
    actions: np.ndarray  # [ep_len, action_dim] f32
    rewards: np.ndarray  # [ep_len, n_tasks] f32

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.rewards, other.rewards))


@dataclasses.dataclass(eq=False)
class Dataset:
    env: str
    tasks: tuple[str, ...]
    provenance: str
    seed: int
    episodes: list[Trajectory]

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    @property
    def ep_len(self) -> int:
        return self.episodes[0].states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.episodes[0].states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.episodes[0].actions.shape[1]

    def task_index(self, task: str) -> int:
        if task not in self.tasks:
            raise ValueError(f"task {task!r} not recorded in dataset (has {self.tasks})")
        return self.tasks.index(task)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.env == other.env and self.tasks == other.tasks
                and self.provenance == other.provenance and self.seed == other.seed
                and self.episodes == other.episodes)


@dataclasses.dataclass(frozen=True)
class Window:
    """Contiguous slice of one episode, the unit fed to models."""

    states: np.ndarray   # [L, state_dim] f32
    actions: np.ndarray  # [L, action_dim] f32
    episode_index: int
    start: int

    def __len__(self) -> int:
        return self.states.shape[0]


def _episode_rng(seed: int, episode: int) -> np.random.Generator:
    # Seeding by (seed, episode) keeps episodes independent of collection order.
    return np.random.default_rng(np.random.SeedSequence([seed, episode]))


def _quantize(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def _policy_action(env: str, policy: PolicySpec, s: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    if isinstance(policy, ExpertPolicy):
        return envs.expert_action(policy.task, s, policy.noise_std, rng)
    if isinstance(policy, RandomPolicy):
        return rng.uniform(-1.0, 1.0, size=envs.env_spec(env).action_dim)
    if isinstance(policy, EpsilonMixPolicy):
        if rng.random() < policy.epsilon:
            return rng.uniform(-1.0, 1.0, size=envs.env_spec(env).action_dim)
        return envs.expert_action(policy.task, s, 0.0)
    raise TypeError(f"unknown policy spec {policy!r}")


def _collect_episode(env: str, policy: PolicySpec, ep_len: int,
                     rng: np.random.Generator) -> Trajectory:
    spec = envs.env_spec(env)
    states = np.empty((ep_len, spec.state_dim), np.float32)
    actions = np.empty((ep_len, spec.action_dim), np.float32)
    rewards = np.empty((ep_len, len(spec.tasks)), np.float32)
    # States and actions are quantized to f32 before being fed forward so that
    # replaying the stored f32 values reproduces the stored states bit-exactly.
    s = _quantize(envs.env_reset(env, rng))
    for t in range(ep_len):
        a = _quantize(np.clip(_policy_action(env, policy, s, rng), -1.0, 1.0))
        states[t] = s
        actions[t] = a
        s = _quantize(envs.env_step(env, s, a))
        for k, task in enumerate(spec.tasks):
            rewards[t, k] = envs.task_reward(task, s, a)
    return Trajectory(states, actions, rewards)


def _collect_with_policies(env: str, policies: list[PolicySpec], ep_len: int,
                           seed: int, provenance: str) -> Dataset:
    spec = envs.env_spec(env)
    episodes = [_collect_episode(env, p, ep_len, _episode_rng(seed, e))
                for e, p in enumerate(policies)]
    return Dataset(env=env, tasks=spec.tasks, provenance=provenance,
                   seed=seed, episodes=episodes)


def collect(env: str, policy: PolicySpec, n_episodes: int, ep_len: int,
            seed: int) -> Dataset:
    """Roll out one policy spec for n_episodes and record all task rewards."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    provenance = "near_expert" if isinstance(policy, ExpertPolicy) else "mixed"
    return _collect_with_policies(env, [policy] * n_episodes, ep_len, seed, provenance)


def mixed_policy_plan(env: str, n_episodes: int) -> list[PolicySpec]:
    """25% noisy expert (split over tasks), 50% random, 25% epsilon-mix (split)."""
    tasks = envs.env_spec(env).tasks
    n_expert = n_episodes // 4
    n_eps = n_episodes // 4
    n_random = n_episodes - n_expert - n_eps

    def split(n: int) -> list[int]:
        return [n // len(tasks) + (1 if i < n % len(tasks) else 0)
                for i in range(len(tasks))]

    plan: list[PolicySpec] = []
    for task, count in zip(tasks, split(n_expert)):
        plan.extend([ExpertPolicy(task, 0.2)] * count)
    plan.extend([RandomPolicy()] * n_random)
    for task, count in zip(tasks, split(n_eps)):
        plan.extend([EpsilonMixPolicy(task, 0.5)] * count)
    return plan


def collect_mixed(env: str, n_episodes: int = MIXED_EPISODES_PER_DOMAIN,
                  ep_len: int = EPISODE_LEN, seed: int = 0) -> Dataset:
    """Diverse, mostly suboptimal dataset pooled from several behavior policies."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    plan = mixed_policy_plan(env, n_episodes)
    return _collect_with_policies(env, plan, ep_len, seed, "mixed")


def collect_near_expert(task: str, seed: int,
                        n_episodes: int = NEAR_EXPERT_EPISODES_PER_TASK,
                        ep_len: int = EPISODE_LEN) -> Dataset:
    """Noisy-expert dataset for one task (action noise std 0.2)."""
    return collect(envs.TASK_ENV[task], ExpertPolicy(task, 0.2),
                   n_episodes, ep_len, seed)


def concat_datasets(parts: list[Dataset]) -> Dataset:
    """Pool datasets of the same environment, e.g. per-task sets of one domain."""
    if not parts:
        raise ValueError("nothing to concatenate")
    first = parts[0]
    for d in parts[1:]:
        if d.env != first.env or d.tasks != first.tasks or d.ep_len != first.ep_len:
            raise ValueError("datasets disagree on env, tasks, or episode length")
    provenance = first.provenance
    if any(d.provenance != provenance for d in parts):
        provenance = "mixed"
    episodes = [ep for d in parts for ep in d.episodes]
    return Dataset(env=first.env, tasks=first.tasks, provenance=provenance,
                   seed=first.seed, episodes=episodes)


def check_replay(d: Dataset, atol: float = 1e-6) -> None:
    """Verify states follow from states[0] and the stored actions."""
    for e, ep in enumerate(d.episodes):
        s = _quantize(ep.states[0].astype(np.float64))
        for t in range(d.ep_len - 1):
            s = _quantize(envs.env_step(d.env, s, ep.actions[t].astype(np.float64)))
            if not np.allclose(s, ep.states[t + 1].astype(np.float64), atol=atol):
                raise ValueError(f"episode {e} diverges from its own actions at step {t + 1}")


def _validate(d: Dataset) -> None:
    spec = envs.env_spec(d.env)
    if d.tasks != spec.tasks:
        raise ValueError(f"task list {d.tasks} does not match {d.env}")
    if not d.episodes:
        raise ValueError("dataset has no episodes")
    for ep in d.episodes:
        if ep.states.shape != (d.ep_len, spec.state_dim):
            raise ValueError("episode state shape mismatch")
        if ep.actions.shape != (d.ep_len, spec.action_dim):
            raise ValueError("episode action shape mismatch")
        if ep.rewards.shape != (d.ep_len, len(spec.tasks)):
            raise ValueError("episode reward shape mismatch")
        for arr in (ep.states, ep.actions, ep.rewards):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite values in dataset")


def serialize_dataset(d: Dataset) -> bytes:
    _validate(d)
    meta = {"env": d.env, "tasks": list(d.tasks), "provenance": d.provenance,
            "seed": d.seed}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC,
           struct.pack("<6I", VERSION, d.state_dim, d.action_dim,
                       len(d.tasks), d.n_episodes, d.ep_len),
           struct.pack("<I", len(meta_bytes)), meta_bytes]
    for ep in d.episodes:
        for arr in (ep.states, ep.actions, ep.rewards):
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedError(f"file ends inside {what}")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk


def parse_dataset(buf: bytes) -> Dataset:
    cur = _Cursor(buf)
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, found {magic!r}")
    version, state_dim, action_dim, n_tasks, n_episodes, ep_len = struct.unpack(
        "<6I", cur.take(24, "header"))
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    (meta_len,) = struct.unpack("<I", cur.take(4, "metadata length"))
    try:
        meta = json.loads(cur.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"bad metadata blob: {exc}") from exc
    episodes = []
    for e in range(n_episodes):
        arrays = []
        for name, cols in (("states", state_dim), ("actions", action_dim),
                           ("rewards", n_tasks)):
            raw = cur.take(4 * ep_len * cols, f"episode {e} {name}")
            arrays.append(np.frombuffer(raw, dtype="<f4").reshape(ep_len, cols).copy())
        episodes.append(Trajectory(*arrays))
    if cur.off != len(buf):
        raise DatasetFormatError(f"{len(buf) - cur.off} trailing bytes after payload")
    d = Dataset(env=meta["env"], tasks=tuple(meta["tasks"]),
                provenance=meta["provenance"], seed=meta["seed"], episodes=episodes)
    _validate(d)
    return d


def write_dataset(d: Dataset, path: str) -> None:
    with open(path, "wb") as f:
        f.write(serialize_dataset(d))


def read_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        return parse_dataset(f.read())


def sample_window(d: Dataset, L: int, rng: np.random.Generator) -> Window:
    """Uniform episode, then uniform start offset in [0, ep_len - L]."""
    if L < 1:
        raise ValueError("window length must be >= 1")
    if L > d.ep_len:
        raise ValueError(f"window length {L} exceeds episode length {d.ep_len}")
    e = int(rng.integers(d.n_episodes))
    start = int(rng.integers(d.ep_len - L + 1))
    ep = d.episodes[e]
    return Window(states=ep.states[start:start + L],
                  actions=ep.actions[start:start + L],
                  episode_index=e, start=start)
