"""Training loop: rollout, replay, per-step updates, and backup switching.

The loop follows a strict if/else per step: either the backup QP controller
acts (no storage, no learning) or the policy acts and one learner update
runs. Residual observations accumulate per step and the GP refits once per
episode until frozen.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np

from .agent import BlacAgent, ConstraintModel
from .buffer import ReplayBuffer, Transition
from .envs import lookahead_point, make_env
from .gp import ResidualEstimator
from .safety import BackupProblem, BackupSolverError, backup_solve


@dataclass
class TrainConfig:
    env: str = "carfollow"
    episodes: int = 150
    horizon: int = 500
    batch_size: int = 64
    hidden: tuple = (64, 64)
    mode: str = "full"  # full | barrier-only | unconstrained
    # environment
    dt: float = 0.1
    eta: float = 0.2
    delta: float | None = None  # None -> environment default
    env_kwargs: dict = field(default_factory=dict)
    # learner
    gamma: float = 0.99
    gamma_c: float = 0.995
    beta: float = 0.1
    lr_critic: float = 3e-4
    lr_actor: float = 3e-4
    dual_lr: float = 1e-3
    tau: float = 0.005
    rho_init: float = 1.0
    rho_growth: float = 1.0005
    rho_max: float = 1e3
    alpha_init: float = 1.0
    buffer_capacity: int = 100_000
    # residual model
    gp_signal_var: float = 1.0
    gp_length_scale: float = 1.0
    gp_noise_var: float = 1e-4
    gp_capacity: int = 200
    gp_freeze_episodes: int = 20
    # backup controller
    backup_enabled: bool = True
    backup_q_diag: float = 1.0
    backup_k_eps: float = 100.0
    backup_kappa: float = 0.1
    backup_k_sigma: float = 1.0
    trap_window: int = 20
    trap_displacement: float = 0.05
    trap_margin: float = 0.1
    resume_distance: float = 0.5
    backup_max_steps: int = 50
    car_proximity_extra: float = 1.0
    car_hysteresis: float = 0.5

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        for name in ("trap_window", "trap_displacement", "trap_margin",
                     "resume_distance", "backup_max_steps", "horizon",
                     "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if isinstance(cfg.hidden, list):
            cfg.hidden = tuple(cfg.hidden)
        return cfg

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class EpisodeMetrics:
    episode: int
    reward: float
    violations: int
    cost: float
    backup_steps: int
    final_distance: float


class BackupSwitch:
    """Per-episode state machine deciding when the backup controller runs."""

    def __init__(self, env, cfg: TrainConfig):
        self.env = env
        self.cfg = cfg
        self.window = deque(maxlen=cfg.trap_window)
        self.active = False
        self.steps_in_backup = 0
        self.trap_point = None

    def reset(self):
        self.window.clear()
        self.active = False
        self.steps_in_backup = 0
        self.trap_point = None

    def _marker(self, x):
        if self.env.name == "unicycle":
            return lookahead_point(x, self.env.l_p)
        return None

    def observe(self, x):
        if self.env.name == "unicycle":
            self.window.append(self._marker(x))

    def decide(self, x):
        """Returns (use_backup, u_nominal) for the current step."""
        cfg = self.cfg
        if self.active:
            if self._should_release(x):
                self.active = False
                self.steps_in_backup = 0
                self.trap_point = None
                # require a fresh window before the trap test can fire again
                self.window.clear()
            else:
                self.steps_in_backup += 1
                return True, self._nominal()
        if not self.active and self._should_trigger(x):
            self.active = True
            self.steps_in_backup = 1
            self.trap_point = self._marker(x)
            return True, self._nominal()
        return False, None

    def _nominal(self):
        if self.env.name == "unicycle":
            return self.env.control_high.copy()
        return np.zeros(self.env.control_dim)

    def _should_trigger(self, x):
        if self.env.name == "unicycle":
            if len(self.window) < self.cfg.trap_window:
                return False  # still warming up
            pts = list(self.window)
            travelled = sum(
                float(np.linalg.norm(b - a)) for a, b in zip(pts, pts[1:]))
            near = float(self.env.barrier_values(x).min()) < self.cfg.trap_margin
            return travelled < self.cfg.trap_displacement and near
        gap45 = x[6] - x[8]
        return gap45 < self.env.delta + self.cfg.car_proximity_extra

    def _should_release(self, x):
        if self.env.name == "unicycle":
            if self.steps_in_backup >= self.cfg.backup_max_steps:
                return True
            moved = float(np.linalg.norm(self._marker(x) - self.trap_point))
            return moved > self.cfg.resume_distance
        gap45 = x[6] - x[8]
        return gap45 >= (self.env.delta + self.cfg.car_proximity_extra
                         + self.cfg.car_hysteresis)


class Trainer:
    """One seeded training run."""

    def __init__(self, cfg: TrainConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        env_kwargs = dict(cfg.env_kwargs)
        env_kwargs.setdefault("dt", cfg.dt)
        env_kwargs.setdefault("horizon", cfg.horizon)
        env_kwargs.setdefault("eta", cfg.eta)
        if cfg.delta is not None:
            env_kwargs.setdefault("delta", cfg.delta)
        self.env = make_env(cfg.env, **env_kwargs)
        root = np.random.SeedSequence(self.seed)
        init_ss, agent_ss, buffer_ss = root.spawn(3)
        self.agent = BlacAgent(
            self.env, np.random.default_rng(init_ss), hidden=cfg.hidden,
            gamma=cfg.gamma, gamma_c=cfg.gamma_c, beta=cfg.beta,
            lr_critic=cfg.lr_critic, lr_actor=cfg.lr_actor,
            dual_lr=cfg.dual_lr, tau=cfg.tau, rho_init=cfg.rho_init,
            rho_growth=cfg.rho_growth, rho_max=cfg.rho_max, mode=cfg.mode,
            alpha_init=cfg.alpha_init)
        self.agent.rng = np.random.default_rng(agent_ss)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, self.env.state_dim,
                                   self.env.control_dim,
                                   np.random.default_rng(buffer_ss))
        self.residual = ResidualEstimator(
            self.env.state_dim, self.env.residual_dims,
            signal_var=cfg.gp_signal_var, length_scale=cfg.gp_length_scale,
            noise_var=cfg.gp_noise_var, capacity=cfg.gp_capacity)
        self.model = ConstraintModel(self.env, self.residual)
        self.switch = BackupSwitch(self.env, cfg)
        self._pending_residuals = []
        self.episode_index = 0
        self.metrics: list[EpisodeMetrics] = []

    @property
    def backup_available(self):
        return self.cfg.backup_enabled and self.cfg.mode != "unconstrained"

    def _backup_problem(self, u_nominal):
        m = self.env.control_dim
        k = len(self.env.barriers)
        return BackupProblem(
            Q=self.cfg.backup_q_diag * np.eye(m),
            k_eps=np.full(k, self.cfg.backup_k_eps),
            kappa=self.cfg.backup_kappa, k_sigma=self.cfg.backup_k_sigma,
            u_nominal=u_nominal)

    def backup_control(self, x, u_nominal):
        problem = self._backup_problem(u_nominal)
        try:
            sol = backup_solve(
                problem, x, self.env, self.agent.lyap,
                residual_mean=lambda s: self.residual.mean(s),
                residual_std=lambda s: self.residual.mean_std(s)[1])
            return sol.u_actual
        except BackupSolverError:
            return self.env.clip_control(u_nominal)

    def train_step(self, x, learn=True, deterministic=False):
        """One step of the outer loop; returns (feedback, used_backup)."""
        self.switch.observe(x)
        use_backup = False
        u_nominal = None
        if self.backup_available:
            use_backup, u_nominal = self.switch.decide(x)
        if use_backup:
            u = self.backup_control(x, u_nominal)
            x_next = self.env.step(x, u)
            return self.env.feedback(x, u, x_next), True
        u, _ = self.agent.policy.sample(x, rng=self.agent.rng,
                                        deterministic=deterministic)
        x_next = self.env.step(x, u)
        fb = self.env.feedback(x, u, x_next)
        if learn:
            self.buffer.push(Transition(x, u, fb.reward, fb.cost, x_next))
            if not self.residual.frozen:
                f, g = self.env.nominal(x)
                self._pending_residuals.append((x, f + g @ u, x_next))
            if len(self.buffer) >= self.cfg.batch_size:
                self.agent.update(self.buffer.sample(self.cfg.batch_size),
                                  self.model)
        return fb, False

    def _flush_residuals(self):
        for x, nominal_next, x_next in self._pending_residuals:
            self.residual.observe(x, nominal_next, x_next)
        self._pending_residuals = []

    def _final_distance(self, x):
        if self.env.name == "unicycle":
            return float(np.linalg.norm(
                lookahead_point(x, self.env.l_p) - self.env.destination))
        return abs(self.env.gap(x) - self.env.d_desired)

    def run_episode(self, learn=True, deterministic=False) -> EpisodeMetrics:
        x = self.env.reset()
        self.switch.reset()
        reward = cost = 0.0
        violations = backup_steps = 0
        for _ in range(self.cfg.horizon):
            fb, used_backup = self.train_step(x, learn=learn,
                                              deterministic=deterministic)
            reward += fb.reward
            cost += fb.cost
            violations += int(fb.violation)
            backup_steps += int(used_backup)
            x = fb.next_state
        if learn:
            self._flush_residuals()
            self.episode_index += 1
            if self.episode_index >= self.cfg.gp_freeze_episodes:
                self.residual.freeze()
        m = EpisodeMetrics(
            episode=self.episode_index, reward=reward, violations=violations,
            cost=cost, backup_steps=backup_steps,
            final_distance=self._final_distance(x))
        if learn:
            self.metrics.append(m)
        return m

    def run(self) -> list[EpisodeMetrics]:
        for _ in range(self.cfg.episodes):
            self.run_episode()
        return self.metrics


def evaluate(trainer: Trainer, episodes, deterministic=False):
    """Roll out the current policy without learning."""
    out = []
    for ep in range(episodes):
        m = trainer.run_episode(learn=False, deterministic=deterministic)
        out.append(EpisodeMetrics(
            episode=ep, reward=m.reward, violations=m.violations,
            cost=m.cost, backup_steps=m.backup_steps,
            final_distance=m.final_distance))
    return out
