"""Control-affine simulation tasks: unicycle navigation and car following.

Both tasks expose a known nominal model x' = f(x) + g(x) u and hide a
residual term from it; the true step applies the residual. Barrier
functions, rewards, and costs are part of the task definition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Barrier:
    """One safety constraint h(x) >= 0 with decay rate and analytic gradient."""

    label: str
    eta: float
    fn: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("decay rate must lie in [0, 1]")


@dataclass(frozen=True)
class StepFeedback:
    next_state: np.ndarray
    reward: float
    cost: float
    barrier_values: np.ndarray
    violation: bool


class Env:
    """Common interface: nominal model, true step, reward/cost, barriers."""

    name: str
    state_dim: int
    control_dim: int
    dt: float
    control_low: np.ndarray
    control_high: np.ndarray
    barriers: list
    horizon: int
    # state indices whose residual the GP models
    residual_dims: tuple

    @property
    def feature_scale(self):
        """Characteristic magnitude per state dimension, used to scale
        network inputs into an O(1) range."""
        return np.ones(self.state_dim)

    def reset(self) -> np.ndarray:
        raise NotImplementedError

    def nominal(self, x):
        """Known model parts (f(x), g(x)) with g of shape (n, m)."""
        raise NotImplementedError

    def step(self, x, u) -> np.ndarray:
        """True transition including the hidden residual."""
        raise NotImplementedError

    def reward(self, x, u, x_next) -> float:
        raise NotImplementedError

    def cost(self, x, u, x_next) -> float:
        raise NotImplementedError

    def _validate(self, x, u):
        x = np.asarray(x, dtype=np.float64)
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        if x.shape != (self.state_dim,):
            raise ValueError(f"state shape {x.shape} != ({self.state_dim},)")
        if u.shape != (self.control_dim,):
            raise ValueError(f"control shape {u.shape} != ({self.control_dim},)")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(u)):
            raise ValueError("non-finite state or control")
        return x, u

    def clip_control(self, u):
        return np.clip(u, self.control_low, self.control_high)

    def barrier_values(self, x):
        return np.array([b.fn(x) for b in self.barriers])

    def feedback(self, x, u, x_next) -> StepFeedback:
        hvals = self.barrier_values(x_next)
        return StepFeedback(
            next_state=np.asarray(x_next, dtype=np.float64),
            reward=self.reward(x, u, x_next),
            cost=self.cost(x, u, x_next),
            barrier_values=hvals,
            violation=bool(hvals.min() < 0.0),
        )


def lookahead_point(x, l_p):
    """Point a distance l_p ahead of the unicycle along its heading."""
    if l_p < 0:
        raise ValueError("lookahead distance must be nonnegative")
    return np.array([x[0] + l_p * np.cos(x[2]), x[1] + l_p * np.sin(x[2])])


class UnicycleEnv(Env):
    """Planar unicycle driving to a destination among circular obstacles.

    Hidden residual: a drag term -0.1 * [cos(theta), 0] added to the control
    before the nominal input matrix.
    """

    name = "unicycle"
    state_dim = 3
    control_dim = 2
    residual_dims = (0, 1, 2)

    def __init__(self, dt=0.1, horizon=500, destination=(2.5, 2.5),
                 obstacles=((1.0, 1.0), (1.8, 2.2), (2.2, 1.4)),
                 delta=0.3, l_p=0.1, eta=0.2, v_ref=1.0,
                 reward_velocity_coeff=0.1, reward_progress_coeff=30.0,
                 start=(0.0, 0.0, 0.0)):
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.destination = np.asarray(destination, dtype=np.float64)
        self.obstacles = [np.asarray(o, dtype=np.float64) for o in obstacles]
        self.delta = float(delta)
        self.l_p = float(l_p)
        self.v_ref = float(v_ref)
        self.k1 = float(reward_velocity_coeff)
        self.k2 = float(reward_progress_coeff)
        self.start = np.asarray(start, dtype=np.float64)
        self.control_low = np.array([-2.0, -3.0])
        self.control_high = np.array([2.0, 3.0])
        self.barriers = [
            self._make_barrier(i, obs, eta) for i, obs in enumerate(self.obstacles)
        ]

    def _make_barrier(self, i, obs, eta):
        l_p, delta = self.l_p, self.delta

        def fn(x):
            p = lookahead_point(x, l_p)
            return 0.5 * (float((p - obs) @ (p - obs)) - delta**2)

        def grad(x):
            p = lookahead_point(x, l_p)
            dp = p - obs
            return np.array([
                dp[0],
                dp[1],
                dp @ (l_p * np.array([-np.sin(x[2]), np.cos(x[2])])),
            ])

        return Barrier(label=f"obstacle_{i}", eta=eta, fn=fn, grad=grad)

    def reset(self):
        return self.start.copy()

    def nominal(self, x):
        th = x[2]
        g = np.array([
            [self.dt * np.cos(th), 0.0],
            [self.dt * np.sin(th), 0.0],
            [0.0, self.dt],
        ])
        return x.copy(), g

    def _drag(self, x):
        return np.array([-0.1 * np.cos(x[2]), 0.0])

    def step(self, x, u):
        x, u = self._validate(x, u)
        f, g = self.nominal(x)
        return f + g @ (u + self._drag(x))

    def reward(self, x, u, x_next):
        d_before = np.linalg.norm(lookahead_point(x, self.l_p) - self.destination)
        d_after = np.linalg.norm(lookahead_point(x_next, self.l_p) - self.destination)
        return -self.k1 * (u[0] - self.v_ref) ** 2 + self.k2 * (d_before - d_after)

    def cost(self, x, u, x_next):
        return float(np.linalg.norm(
            lookahead_point(x_next, self.l_p) - self.destination))


class CarFollowEnv(Env):
    """Chain of five cars; the controller sets the velocity of car 4.

    State: [p1, v1, p2, v2, p3, v3, p4, v4, p5, v5, t]. The lead car tracks
    a sinusoidal reference velocity; cars 2, 3, 5 track the cruise velocity
    with a braking term when too close to the car they watch. Hidden
    residual: each non-controlled car's acceleration enters the velocity
    update scaled by (1 + d_i) with d_i = 0.1; the nominal model assumes
    d_i = 0.
    """

    name = "carfollow"
    state_dim = 11
    control_dim = 1
    # only car 4 (indices p4, v4) is modeled by the GP; the other cars'
    # residual is not excited by the agent's own control
    residual_dims = (6, 7)

    K_V = 4.0
    K_B = 20.0
    V_S = 3.0
    BRAKE_NEAR = 6.5
    BRAKE_FAR = 13.0
    D_I = 0.1

    def __init__(self, dt=0.1, horizon=500, delta=1.5, eta=0.2,
                 d_desired=9.5, bonus_band=(9.0, 10.0), bonus=1.5,
                 initial_spacing=9.5):
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.delta = float(delta)
        self.d_desired = float(d_desired)
        self.bonus_band = (float(bonus_band[0]), float(bonus_band[1]))
        self.bonus = float(bonus)
        self.initial_spacing = float(initial_spacing)
        self.control_low = np.array([0.0])
        self.control_high = np.array([6.0])
        delta_ = self.delta
        self.barriers = [
            Barrier(
                label="gap_3_4", eta=eta,
                fn=lambda x: float(x[4] - x[6] - delta_),
                grad=lambda x: self._unit_grad(4, 6),
            ),
            Barrier(
                label="gap_4_5", eta=eta,
                fn=lambda x: float(x[6] - x[8] - delta_),
                grad=lambda x: self._unit_grad(6, 8),
            ),
        ]

    @property
    def feature_scale(self):
        # positions reach ~40-80 over an episode, velocities ~[-1, 7]
        scale = np.empty(self.state_dim)
        scale[0:10:2] = 30.0
        scale[1:10:2] = 5.0
        scale[10] = 10.0
        return scale

    def _unit_grad(self, plus, minus):
        g = np.zeros(self.state_dim)
        g[plus] = 1.0
        g[minus] = -1.0
        return g

    def reset(self):
        x = np.zeros(self.state_dim)
        for i in range(5):
            x[2 * i] = (4 - i) * self.initial_spacing
            x[2 * i + 1] = self.V_S
        return x

    def _accels(self, x):
        """Acceleration laws for cars 1, 2, 3, 5 (indexed 0, 1, 2, 4)."""
        t = x[10]
        p = x[0:10:2]
        v = x[1:10:2]
        a = np.zeros(5)
        # lead car tracks the sinusoidal reference velocity
        a[0] = self.K_V * ((self.V_S - 4.0 * np.sin(t)) - v[0])
        for i in (1, 2):
            a[i] = self.K_V * (self.V_S - v[i])
            if abs(p[i - 1] - p[i]) < self.BRAKE_NEAR:
                a[i] -= self.K_B * (p[i - 1] - p[i])
        a[4] = self.K_V * (self.V_S - v[4])
        if abs(p[2] - p[4]) < self.BRAKE_FAR:
            a[4] -= self.K_B * (p[2] - p[4])
        return a

    def _advance(self, x, u, residual_gain):
        a = self._accels(x)
        x_next = np.empty(self.state_dim)
        for i in (0, 1, 2, 4):
            x_next[2 * i] = x[2 * i] + x[2 * i + 1] * self.dt
            x_next[2 * i + 1] = x[2 * i + 1] + (1.0 + residual_gain) * a[i] * self.dt
        x_next[6] = x[6] + u[0] * self.dt
        x_next[7] = u[0]
        x_next[10] = x[10] + self.dt
        return x_next

    def nominal(self, x):
        f = self._advance(x, np.zeros(1), residual_gain=0.0)
        g = np.zeros((self.state_dim, 1))
        g[6, 0] = self.dt
        g[7, 0] = 1.0
        return f, g

    def step(self, x, u):
        x, u = self._validate(x, u)
        return self._advance(x, u, residual_gain=self.D_I)

    def gap(self, x):
        """Distance between car 3 and car 4, the regulated quantity."""
        return float(x[4] - x[6])

    # tracking-penalty weight; small enough that the in-band bonus dominates,
    # so regulating the gap is reward-optimal rather than velocity-tracking
    K_TRACK = 0.1

    def reward(self, x, u, x_next):
        r = -self.K_TRACK * (u[0] - self.V_S) ** 2
        d_next = self.gap(x_next)
        if self.bonus_band[0] <= d_next <= self.bonus_band[1]:
            r += self.bonus
        return r

    def cost(self, x, u, x_next):
        return abs(self.gap(x_next) - self.d_desired)


def make_env(name, **kwargs) -> Env:
    envs = {"unicycle": UnicycleEnv, "carfollow": CarFollowEnv}
    if name not in envs:
        raise ValueError(f"unknown environment {name!r}")
    return envs[name](**kwargs)
