"""The constrained soft actor-critic learner.

Squashed-Gaussian policy, twin action-value networks with polyak targets, a
nonnegative Lyapunov value network trained on the cost signal, and an
augmented-Lagrangian policy objective whose constraint terms are the batch
means of the rectified barrier and Lyapunov decrease residuals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import Adam, Mlp, polyak_update

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))
_TANH_EPS = 1e-9


class SquashedGaussianPolicy:
    """tanh-squashed Gaussian rescaled into the control box."""

    def __init__(self, net: Mlp, control_low, control_high):
        self.net = net
        self.low = np.atleast_1d(np.asarray(control_low, dtype=np.float64))
        self.high = np.atleast_1d(np.asarray(control_high, dtype=np.float64))
        if net.out_dim != 2 * self.low.shape[0]:
            raise ValueError("policy head must emit mean and log-std per control")
        self.center = 0.5 * (self.high + self.low)
        self.half = 0.5 * (self.high - self.low)

    @property
    def control_dim(self):
        return self.low.shape[0]

    def _head(self, X):
        out = self.net(np.atleast_2d(X))
        m = self.control_dim
        mu = out[:, :m]
        log_std = np.clip(out[:, m:], LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def sample(self, x, xi=None, rng=None, deterministic=False):
        """Draw a control and its log-probability for a single state."""
        mu, log_std = self._head(np.asarray(x)[None, :])
        if deterministic:
            pre = mu
        else:
            if xi is None:
                xi = rng.standard_normal(self.control_dim)
            pre = mu + np.exp(log_std) * xi[None, :]
        a = np.tanh(pre)
        u = self.center + self.half * a
        logp = self._log_prob(pre, mu, log_std, a)
        return u[0], float(logp[0])

    def sample_batch(self, X, xi):
        mu, log_std = self._head(X)
        pre = mu + np.exp(log_std) * xi
        a = np.tanh(pre)
        u = self.center + self.half * a
        return u, self._log_prob(pre, mu, log_std, a)

    def _log_prob(self, pre, mu, log_std, a):
        z = (pre - mu) / np.exp(log_std)
        per_dim = (-0.5 * z * z - log_std - 0.5 * _LOG_2PI
                   - np.log(1.0 - a * a + _TANH_EPS) - np.log(self.half))
        return per_dim.sum(axis=1)

    def sample_node(self, X, xi, params):
        """Autodiff control and log-probability for a batch (training path)."""
        m = self.control_dim
        out = self.net.apply(X, params)
        mu = ad.columns(out, 0, m)
        log_std = ad.clip(ad.columns(out, m, 2 * m), LOG_STD_MIN, LOG_STD_MAX)
        std = ad.exp(log_std)
        pre = mu + ad.mul(std, xi)
        a = ad.tanh(pre)
        u = np.asarray(self.center) + ad.mul(np.asarray(self.half), a)
        # reparameterized density: (pre - mu)/std == xi, a constant
        sq_term = -0.5 * xi * xi - 0.5 * _LOG_2PI - np.log(self.half)
        per_dim = (ad.as_node(sq_term) - log_std
                   - ad.log(1.0 - ad.square(a) + _TANH_EPS))
        return u, ad.sum_rows(per_dim)


@dataclass
class LagrangianState:
    """Multipliers and quadratic-penalty coefficients for the constraints."""

    lam: np.ndarray
    zeta: float
    rho_lam: np.ndarray
    rho_zeta: float
    growth: float
    rho_max: float
    dual_lr: float

    @classmethod
    def fresh(cls, n_barriers, rho_init=1.0, growth=1.0005, rho_max=1e3,
              dual_lr=1e-3):
        if growth <= 1.0:
            raise ValueError("penalty growth factor must exceed 1")
        return cls(lam=np.zeros(n_barriers), zeta=0.0,
                   rho_lam=np.full(n_barriers, rho_init), rho_zeta=rho_init,
                   growth=growth, rho_max=rho_max, dual_lr=dual_lr)

    def dual_update(self, cbf_means, clf_mean):
        """Ascend the multipliers by their residual means; grow penalties."""
        cbf_means = np.asarray(cbf_means, dtype=np.float64)
        if np.any(cbf_means < 0.0) or clf_mean < 0.0:
            raise ValueError("residual means must be nonnegative")
        self.lam = self.lam + self.dual_lr * cbf_means
        self.zeta = self.zeta + self.dual_lr * clf_mean
        self.rho_lam = np.minimum(self.growth * self.rho_lam, self.rho_max)
        self.rho_zeta = min(self.growth * self.rho_zeta, self.rho_max)


class ConstraintModel:
    """Everything needed to predict x_hat' and score constraints on a batch."""

    def __init__(self, env, residual_estimator=None):
        self.env = env
        self.residual = residual_estimator

    def batch_model(self, X):
        """Stacked (f(x), g(x), d_hat(x)) for each row of X."""
        F = np.zeros_like(X)
        G = np.zeros((X.shape[0], self.env.state_dim, self.env.control_dim))
        for i, x in enumerate(X):
            F[i], G[i] = self.env.nominal(x)
        D = (self.residual.mean_batch(X) if self.residual is not None
             else np.zeros_like(X))
        return F, G, D


def cbf_residual_node(barrier, X, x_hat_node):
    hx = np.array([barrier.fn(x) for x in X])
    h_next = ad.rowwise_scalar(barrier.fn, barrier.grad, x_hat_node)
    return ad.relu((1.0 - barrier.eta) * hx - h_next)


def clf_residual_node(lyap_net, X, x_hat_node, beta):
    lx = np.asarray(lyap_net(X)).reshape(-1)
    l_next = lyap_net.apply(x_hat_node)
    return ad.relu(ad.sum_rows(l_next) - (1.0 - beta) * lx)


class BlacAgent:
    """Sequential learner implementing the constrained actor-critic update."""

    MODES = ("full", "barrier-only", "unconstrained")

    def __init__(self, env, rng, hidden=(64, 64), gamma=0.99, gamma_c=0.995,
                 beta=0.1, lr_critic=3e-4, lr_actor=3e-4, dual_lr=1e-3,
                 tau=0.005, rho_init=1.0, rho_growth=1.0005, rho_max=1e3,
                 mode="full", entropy_target=None, alpha_init=1.0):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}")
        n, m = env.state_dim, env.control_dim
        self.env = env
        self.mode = mode
        self.gamma = gamma
        self.gamma_c = gamma_c
        self.beta = beta
        self.tau = tau
        x_scale = env.feature_scale
        u_scale = np.maximum(np.abs(env.control_low),
                             np.abs(env.control_high))
        xu_scale = np.concatenate([x_scale, u_scale])
        policy_net = Mlp.create(n, hidden, 2 * m, rng, input_scale=x_scale)
        # zero output layer: start centered in the control box with unit
        # pre-squash spread, so early gradients are not squash-saturated
        policy_net.weights[-1][:] = 0.0
        self.policy = SquashedGaussianPolicy(
            policy_net, env.control_low, env.control_high)
        self.q1 = Mlp.create(n + m, hidden, 1, rng, input_scale=xu_scale)
        self.q2 = Mlp.create(n + m, hidden, 1, rng, input_scale=xu_scale)
        self.q1_targ = self.q1.copy()
        self.q2_targ = self.q2.copy()
        self.lyap = Mlp.create(n, hidden, 1, rng, output_activation="relu",
                               input_scale=x_scale)
        # start the rectified output at a constant 1 (zero weights, positive
        # bias): a dead rectifier here would zero every stability gradient,
        # while an active one lets the critic loss carve out the real shape
        self.lyap.weights[-1][:] = 0.0
        self.lyap.biases[-1][:] = 1.0
        self.lyap_targ = self.lyap.copy()
        self.log_alpha = np.array(np.log(alpha_init))
        self.entropy_target = (-float(m) if entropy_target is None
                               else float(entropy_target))
        self.lagrangian = LagrangianState.fresh(
            len(env.barriers), rho_init=rho_init, growth=rho_growth,
            rho_max=rho_max, dual_lr=dual_lr)
        self.opt_q1 = Adam(self.q1.params, lr_critic)
        self.opt_q2 = Adam(self.q2.params, lr_critic)
        self.opt_lyap = Adam(self.lyap.params, lr_critic)
        self.opt_policy = Adam(self.policy.net.params, lr_actor)
        self.opt_alpha = Adam([self.log_alpha], lr_actor)
        self.rng = rng

    @property
    def alpha(self):
        return float(np.exp(self.log_alpha))

    # ---- losses (autodiff functions of one network's parameters) ----

    def q_targets(self, R, X_next, xi_next):
        u_next, logp_next = self.policy.sample_batch(X_next, xi_next)
        inp = np.concatenate([X_next, u_next], axis=1)
        q_min = np.minimum(self.q1_targ(inp), self.q2_targ(inp)).reshape(-1)
        return R + self.gamma * (q_min - self.alpha * logp_next)

    def q_loss(self, critic, params, X, U, targets):
        inp = np.concatenate([X, U], axis=1)
        pred = ad.sum_rows(critic.apply(inp, params))
        return ad.mean(ad.square(pred - targets))

    def lyapunov_targets(self, C, X_next):
        return C + self.gamma_c * np.asarray(self.lyap_targ(X_next)).reshape(-1)

    def lyapunov_loss(self, params, X, targets):
        pred = ad.sum_rows(self.lyap.apply(X, params))
        return ad.mean(ad.square(pred - targets))

    def alpha_loss_grad(self, mean_logp):
        """J_alpha value and its gradient in log-alpha (closed form)."""
        pressure = mean_logp + self.entropy_target
        value = -self.alpha * pressure
        return value, np.array(-self.alpha * pressure)

    def policy_objective(self, params, X, xi, model):
        """Augmented Lagrangian of the policy over one batch.

        Returns (loss node, list of residual-mean nodes) so callers can
        read the constraint pressure from the same forward pass.
        """
        u, logp = self.policy.sample_node(X, xi, params)
        inp = ad.concat_cols(ad.as_node(X), u)
        q1 = ad.sum_rows(self.q1.apply(inp))
        q2 = ad.sum_rows(self.q2.apply(inp))
        v = ad.mean(ad.minimum(q1, q2) - ad.mul(self.alpha, logp))
        loss = ad.neg(v)
        cbf_means, clf_mean = [], None
        if self.mode != "unconstrained":
            F, G, D = model.batch_model(X)
            x_hat = ad.as_node(F + D) + ad.bmatvec(G, u)
            lag = self.lagrangian
            for i, barrier in enumerate(self.env.barriers):
                r_mean = ad.mean(cbf_residual_node(barrier, X, x_hat))
                cbf_means.append(r_mean)
                loss = loss + ad.mul(lag.lam[i], r_mean) \
                    + ad.mul(0.5 * lag.rho_lam[i], ad.square(r_mean))
            if self.mode == "full":
                s_mean = ad.mean(
                    clf_residual_node(self.lyap, X, x_hat, self.beta))
                clf_mean = s_mean
                loss = loss + ad.mul(lag.zeta, s_mean) \
                    + ad.mul(0.5 * lag.rho_zeta, ad.square(s_mean))
        return loss, cbf_means, clf_mean

    def residual_means(self, X, xi, model, include_clf=True):
        """Numpy-only constraint residual means at the current policy."""
        u, _ = self.policy.sample_batch(X, xi)
        F, G, D = model.batch_model(X)
        x_hat = F + D + np.einsum("bnm,bm->bn", G, u)
        cbf = np.zeros(len(self.env.barriers))
        for i, barrier in enumerate(self.env.barriers):
            hx = np.array([barrier.fn(x) for x in X])
            hn = np.array([barrier.fn(x) for x in x_hat])
            cbf[i] = np.maximum(0.0, (1.0 - barrier.eta) * hx - hn).mean()
        if not include_clf:
            return cbf, 0.0
        lx = np.asarray(self.lyap(X)).reshape(-1)
        ln = np.asarray(self.lyap(x_hat)).reshape(-1)
        clf = float(np.maximum(0.0, ln - (1.0 - self.beta) * lx).mean())
        return cbf, clf

    # ---- one full update ----

    def update(self, batch, model):
        """Run one learner update on a sampled batch; returns diagnostics."""
        X, U, R, C, X_next = batch
        B = X.shape[0]
        m = self.env.control_dim

        # critics and Lyapunov network (learning rate eta_1)
        xi_next = self.rng.standard_normal((B, m))
        q_targets = self.q_targets(R, X_next, xi_next)
        for critic, opt in ((self.q1, self.opt_q1), (self.q2, self.opt_q2)):
            loss_val, grads = ad.value_and_grad(
                lambda p: self.q_loss(critic, p, X, U, q_targets),
                critic.params)
            critic.set_params(opt.step(critic.params, grads))
        if self.mode != "unconstrained":
            l_targets = self.lyapunov_targets(C, X_next)
            _, grads = ad.value_and_grad(
                lambda p: self.lyapunov_loss(p, X, l_targets),
                self.lyap.params)
            self.lyap.set_params(self.opt_lyap.step(self.lyap.params, grads))

        # policy and temperature (learning rate eta_2)
        xi = self.rng.standard_normal((B, m))
        constraint_model = model

        def objective(params):
            loss, _, _ = self.policy_objective(params, X, xi, constraint_model)
            return loss

        loss_val, grads = ad.value_and_grad(objective, self.policy.net.params)
        self.policy.net.set_params(
            self.opt_policy.step(self.policy.net.params, grads))

        _, logp = self.policy.sample_batch(X, xi)
        _, alpha_grad = self.alpha_loss_grad(float(logp.mean()))
        self.log_alpha = self.opt_alpha.step([self.log_alpha], [alpha_grad])[0]
        # squash-saturated actions report large positive log-densities, which
        # the temperature ascent misreads as an entropy deficit; without a
        # ceiling alpha can run away and destabilize the policy update
        self.log_alpha = np.clip(self.log_alpha, np.log(1e-4), np.log(0.05))

        # multipliers and penalties (learning rate eta_3), at the new policy
        diag = {"policy_loss": loss_val, "alpha": self.alpha}
        if self.mode != "unconstrained":
            cbf_means, clf_mean = self.residual_means(
                X, xi, constraint_model, include_clf=(self.mode == "full"))
            self.lagrangian.dual_update(cbf_means, clf_mean)
            diag["cbf_residual_means"] = cbf_means
            diag["clf_residual_mean"] = clf_mean

        # target networks
        self.q1_targ.set_params(
            polyak_update(self.q1.params, self.q1_targ.params, self.tau))
        self.q2_targ.set_params(
            polyak_update(self.q2.params, self.q2_targ.params, self.tau))
        self.lyap_targ.set_params(
            polyak_update(self.lyap.params, self.lyap_targ.params, self.tau))
        return diag

    # ---- persistence ----

    def save(self, path):
        from .nets import flatten_params

        blobs = {}
        meta = {"mode": self.mode, "entropy_target": self.entropy_target}
        nets = {
            "policy": self.policy.net, "q1": self.q1, "q2": self.q2,
            "q1_targ": self.q1_targ, "q2_targ": self.q2_targ,
            "lyap": self.lyap, "lyap_targ": self.lyap_targ,
        }
        for name, net in nets.items():
            shapes, flat = flatten_params(net.params)
            blobs[name] = flat
            meta[name] = {
                "shapes": shapes,
                "hidden_activation": net.hidden_activation,
                "output_activation": net.output_activation,
            }
        blobs["log_alpha"] = self.log_alpha
        lag = self.lagrangian
        blobs["lagrangian"] = np.concatenate([
            lag.lam, [lag.zeta], lag.rho_lam,
            [lag.rho_zeta, lag.growth, lag.rho_max, lag.dual_lr],
        ])
        blobs["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **blobs)

    def load(self, path):
        from .nets import unflatten_params

        data = np.load(path)
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["mode"] != self.mode:
            raise ValueError(
                f"checkpoint mode {meta['mode']!r} != agent mode {self.mode!r}")
        nets = {
            "policy": self.policy.net, "q1": self.q1, "q2": self.q2,
            "q1_targ": self.q1_targ, "q2_targ": self.q2_targ,
            "lyap": self.lyap, "lyap_targ": self.lyap_targ,
        }
        for name, net in nets.items():
            params = unflatten_params(meta[name]["shapes"], data[name])
            net.set_params(params)
        self.log_alpha = np.array(data["log_alpha"])
        vec = data["lagrangian"]
        k = len(self.env.barriers)
        self.lagrangian = LagrangianState(
            lam=vec[:k], zeta=float(vec[k]), rho_lam=vec[k + 1:2 * k + 1],
            rho_zeta=float(vec[2 * k + 1]), growth=float(vec[2 * k + 2]),
            rho_max=float(vec[2 * k + 3]), dual_lr=float(vec[2 * k + 4]))
