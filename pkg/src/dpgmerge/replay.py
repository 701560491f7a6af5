"""Experience replay: full FIFO buffer and elite top-k trajectory buffer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import Transition


class EmptyBufferError(RuntimeError):
    """Sampling from an empty source; the agent falls back to conventional updates."""


@dataclass
class Trajectory:
    """One complete episode with its undiscounted cumulative reward."""

    states: np.ndarray      # (T, state_dim)
    next_states: np.ndarray
    actions: np.ndarray     # (T, action_dim)
    rewards: np.ndarray     # (T,)
    terminals: np.ndarray   # (T,)

    def __len__(self):
        return self.rewards.shape[0]

    @property
    def cumulative_reward(self) -> float:
        return float(self.rewards.sum())


@dataclass
class Batch:
    states: np.ndarray
    next_states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    source: str  # "full" or "elite"

    def __len__(self):
        return self.states.shape[0]


class FullErb:
    """Ring buffer of transitions with strictly FIFO eviction."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = int(capacity)
        self.states = np.zeros((self.capacity, state_dim))
        self.next_states = np.zeros((self.capacity, state_dim))
        self.actions = np.zeros((self.capacity, action_dim))
        self.rewards = np.zeros(self.capacity)
        self.terminals = np.zeros(self.capacity)
        self.cursor = 0
        self.size = 0

    def push(self, t: Transition) -> None:
        i = self.cursor
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.terminals[i] = 1.0 if t.terminal else 0.0
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng) -> Batch:
        if self.size == 0:
            raise EmptyBufferError("full ERB is empty")
        idx = rng.integers(0, self.size, size=n)
        return Batch(self.states[idx].copy(), self.next_states[idx].copy(),
                     self.actions[idx].copy(), self.rewards[idx].copy(),
                     self.terminals[idx].copy(), "full")


class EliteErb:
    """Keeps the kappa highest-return complete trajectories seen so far.

    Ties are broken in favour of the later-inserted trajectory: an incoming
    trajectory whose return equals the current minimum evicts the earliest
    minimum member.
    """

    def __init__(self, kappa: int):
        self.kappa = int(kappa)
        self.entries: list[tuple[float, int, Trajectory]] = []  # (return, seq, traj)
        self._seq = 0
        self._pool = None  # cached flattened transition arrays

    def __len__(self):
        return len(self.entries)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for _, _, t in self.entries)

    def min_return(self) -> float:
        return min(r for r, _, _ in self.entries)

    def end_trajectory(self, traj: Trajectory) -> bool:
        """Insert a completed trajectory; returns whether it was admitted."""
        if len(traj) == 0:
            raise ValueError("empty trajectory")
        ret = traj.cumulative_reward
        seq = self._seq
        self._seq += 1
        if len(self.entries) < self.kappa:
            self.entries.append((ret, seq, traj))
            self._pool = None
            return True
        worst = min(self.entries, key=lambda e: (e[0], e[1]))
        if ret < worst[0]:
            return False
        self.entries.remove(worst)
        self.entries.append((ret, seq, traj))
        self._pool = None
        return True

    def _flatten(self):
        if self._pool is None:
            self._pool = Batch(
                np.concatenate([t.states for _, _, t in self.entries]),
                np.concatenate([t.next_states for _, _, t in self.entries]),
                np.concatenate([t.actions for _, _, t in self.entries]),
                np.concatenate([t.rewards for _, _, t in self.entries]),
                np.concatenate([t.terminals for _, _, t in self.entries]),
                "elite",
            )
        return self._pool

    def sample(self, n: int, rng) -> Batch:
        """Uniform with replacement over transitions pooled across elite trajectories."""
        if not self.entries:
            raise EmptyBufferError("elite ERB is empty")
        pool = self._flatten()
        idx = rng.integers(0, len(pool), size=n)
        return Batch(pool.states[idx].copy(), pool.next_states[idx].copy(),
                     pool.actions[idx].copy(), pool.rewards[idx].copy(),
                     pool.terminals[idx].copy(), "elite")

    def dump_csv(self, path) -> None:
        """One row per transition: episode_id, step, state..., action..., reward, return."""
        with open(path, "w") as fh:
            sdim = self.entries[0][2].states.shape[1] if self.entries else 0
            adim = self.entries[0][2].actions.shape[1] if self.entries else 0
            cols = (["episode_id", "step"]
                    + [f"state_{i}" for i in range(sdim)]
                    + [f"action_{i}" for i in range(adim)]
                    + ["reward", "return"])
            fh.write(",".join(cols) + "\n")
            for ret, seq, traj in sorted(self.entries, key=lambda e: e[1]):
                for t in range(len(traj)):
                    row = ([str(seq), str(t)]
                           + [repr(float(x)) for x in traj.states[t]]
                           + [repr(float(x)) for x in traj.actions[t]]
                           + [repr(float(traj.rewards[t])), repr(ret)])
                    fh.write(",".join(row) + "\n")
