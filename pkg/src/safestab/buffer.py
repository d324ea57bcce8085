"""Fixed-capacity replay buffer with uniform minibatch sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    u: np.ndarray
    reward: float
    cost: float
    x_next: np.ndarray

    def __post_init__(self):
        if self.cost < 0.0:
            raise ValueError("cost must be nonnegative")


class NotWarmedUp(RuntimeError):
    """Raised when a batch is requested before enough transitions exist."""


class ReplayBuffer:
    """Ring buffer of transitions; sampling is uniform with replacement."""

    def __init__(self, capacity, state_dim, control_dim, rng):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim = int(state_dim)
        self.control_dim = int(control_dim)
        self.rng = rng
        self.X = np.zeros((capacity, state_dim))
        self.U = np.zeros((capacity, control_dim))
        self.R = np.zeros(capacity)
        self.C = np.zeros(capacity)
        self.X_next = np.zeros((capacity, state_dim))
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition):
        x = np.asarray(t.x, dtype=np.float64)
        u = np.atleast_1d(np.asarray(t.u, dtype=np.float64))
        x_next = np.asarray(t.x_next, dtype=np.float64)
        if x.shape != (self.state_dim,) or x_next.shape != (self.state_dim,):
            raise ValueError("state dimension mismatch")
        if u.shape != (self.control_dim,):
            raise ValueError("control dimension mismatch")
        i = self.cursor
        self.X[i] = x
        self.U[i] = u
        self.R[i] = t.reward
        self.C[i] = t.cost
        self.X_next[i] = x_next
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch):
        """Uniform with-replacement batch as stacked arrays."""
        if self.size < batch:
            raise NotWarmedUp(
                f"buffer holds {self.size} transitions, need {batch}")
        idx = self.rng.integers(0, self.size, size=batch)
        return (self.X[idx].copy(), self.U[idx].copy(), self.R[idx].copy(),
                self.C[idx].copy(), self.X_next[idx].copy())

    def transitions(self):
        """Stored transitions in insertion order (oldest first)."""
        if self.size < self.capacity:
            order = range(self.size)
        else:
            order = [(self.cursor + j) % self.capacity
                     for j in range(self.capacity)]
        return [
            Transition(self.X[i].copy(), self.U[i].copy(), float(self.R[i]),
                       float(self.C[i]), self.X_next[i].copy())
            for i in order
        ]
