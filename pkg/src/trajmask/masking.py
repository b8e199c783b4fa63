"""Visibility masks over state/action token sequences.

A MaskSpec marks, per timestep slot, whether the state token and the action
token are visible to the encoder. Pretraining draws random masks with a ratio
picked from a fixed set; goal reaching and prompting use deterministic masks.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

# Mixed-ratio set used for pretraining draws.
DEFAULT_RATIOS = (0.15, 0.35, 0.55, 0.75, 0.95)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclasses.dataclass(eq=False)
class MaskSpec:
    state_visible: np.ndarray   # [L] bool
    action_visible: np.ndarray  # [L] bool

    def __post_init__(self):
        self.state_visible = np.asarray(self.state_visible, dtype=bool)
        self.action_visible = np.asarray(self.action_visible, dtype=bool)
        if self.state_visible.shape != self.action_visible.shape:
            raise ValueError("state and action visibility lengths differ")
        if self.state_visible.ndim != 1 or len(self.state_visible) < 1:
            raise ValueError("visibility must be a nonempty 1-D array")

    def __len__(self) -> int:
        return len(self.state_visible)

    def __eq__(self, other):
        if not isinstance(other, MaskSpec):
            return NotImplemented
        return (np.array_equal(self.state_visible, other.state_visible)
                and np.array_equal(self.action_visible, other.action_visible))

    @property
    def n_masked_states(self) -> int:
        return int((~self.state_visible).sum())

    @property
    def n_masked_actions(self) -> int:
        return int((~self.action_visible).sum())


def sample_mask_spec(L: int, ratio_set=DEFAULT_RATIOS,
                     rng: np.random.Generator | None = None) -> MaskSpec:
    """Random mask: one ratio from the set, applied independently per modality.

    Draw order is fixed (ratio index, state slots, action slots, safeguard) so
    a given rng state always yields the same mask.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    ratios = tuple(ratio_set)
    if not ratios or any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ValueError("ratio set must be nonempty with entries in [0, 1]")
    if rng is None:
        raise ValueError("rng is required")
    r = ratios[int(rng.integers(len(ratios)))]
    n = round_half_up(r * L)
    state_visible = np.ones(L, dtype=bool)
    state_visible[rng.choice(L, size=n, replace=False)] = False
    action_visible = np.ones(L, dtype=bool)
    action_visible[rng.choice(L, size=n, replace=False)] = False
    if not state_visible.any() and not action_visible.any():
        slot = int(rng.integers(2 * L))
        if slot < L:
            state_visible[slot] = True
        else:
            action_visible[slot - L] = True
    return MaskSpec(state_visible, action_visible)


def goal_mask(L: int, goal_positions) -> MaskSpec:
    """Start state and goal states visible; everything else masked.

    All action slots are masked: the decoder must infer the actions that carry
    the rollout from the start through each goal.
    """
    goals = [int(g) for g in goal_positions]
    if not goals:
        raise ValueError("at least one goal position required")
    if goals != sorted(set(goals)):
        raise ValueError("goal positions must be sorted and unique")
    if goals[0] < 1 or goals[-1] > L - 1:
        raise ValueError(f"goal positions must lie in [1, {L - 1}]")
    state_visible = np.zeros(L, dtype=bool)
    state_visible[0] = True
    state_visible[goals] = True
    return MaskSpec(state_visible, np.zeros(L, dtype=bool))


def prompt_mask(prompt_len: int, L: int) -> MaskSpec:
    """First prompt_len state/action pairs visible; the rest masked."""
    if not 1 <= prompt_len < L:
        raise ValueError(f"prompt length must be in [1, {L - 1}]")
    visible = np.arange(L) < prompt_len
    return MaskSpec(visible, visible.copy())
