"""Constraint residuals for training and the QP backup controller.

The training-side residuals are the rectified one-step barrier decrease and
Lyapunov decrease conditions; the backup controller is a small slack-relaxed
QP solved exactly by active-set enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad


def predict_next(x, u, env, residual_mean=None):
    """Model-based next state f(x) + g(x) u + estimated residual."""
    f, g = env.nominal(x)
    x_hat = f + g @ np.atleast_1d(u)
    if residual_mean is not None:
        x_hat = x_hat + residual_mean(x)
    return x_hat


def cbf_residual(barrier, x, x_hat_next):
    """Rectified violation of h(x') - h(x) >= -eta h(x)."""
    return max(0.0, barrier.fn(x) - barrier.fn(x_hat_next)
               - barrier.eta * barrier.fn(x))


def clf_residual(lyapunov, x, x_hat_next, beta):
    """Rectified violation of L(x') - L(x) <= -beta L(x)."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    lx = float(np.asarray(lyapunov(x)).reshape(-1)[0])
    lx_next = float(np.asarray(lyapunov(x_hat_next)).reshape(-1)[0])
    return max(0.0, lx_next - lx + beta * lx)


def lyapunov_input_grad(lyap_net, x):
    """Gradient of the scalar Lyapunov network with respect to the state."""
    x = np.asarray(x, dtype=np.float64)
    leaf = ad.Node(x[None, :])
    out = ad.total(lyap_net.apply(leaf))
    ad.backward(out)
    return leaf.grad[0]


@dataclass
class BackupProblem:
    """The slack-relaxed safety QP around a nominal control."""

    Q: np.ndarray
    k_eps: np.ndarray
    kappa: float
    k_sigma: float
    u_nominal: np.ndarray

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.k_eps = np.atleast_1d(np.asarray(self.k_eps, dtype=np.float64))
        self.u_nominal = np.atleast_1d(
            np.asarray(self.u_nominal, dtype=np.float64))
        if self.Q.ndim != 2 or self.Q.shape[0] != self.Q.shape[1]:
            raise ValueError("weight matrix must be square")
        if not np.allclose(self.Q, self.Q.T, atol=1e-12):
            raise ValueError("weight matrix must be symmetric")
        if np.linalg.eigvalsh(self.Q).min() < -1e-10:
            raise ValueError("weight matrix must be positive semidefinite")
        if np.any(self.k_eps <= 0.0):
            raise ValueError("slack penalties must be positive")
        if self.kappa < 0.0 or self.k_sigma < 0.0:
            raise ValueError("objective coefficients must be nonnegative")


@dataclass
class BackupSolution:
    u_modi: np.ndarray
    u_actual: np.ndarray
    eps: np.ndarray
    objective: float
    active_set: tuple


class BackupSolverError(RuntimeError):
    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


def _linearize_constraints(problem, x, env, residual_mean, residual_std):
    """Affine rows a_i . u_modi - eps_i <= b_i around u_modi = 0.

    Derived from h_i(f + g (u_nom - u_modi) + d_hat) - h_i(x) >= -eta h_i(x)
    - eps_i, first order in u_modi, with the bound tightened by the GP
    standard deviation.
    """
    f, g = env.nominal(x)
    d_hat = residual_mean(x) if residual_mean is not None else 0.0
    sigma = residual_std(x) if residual_std is not None else np.zeros_like(f)
    x_hat0 = f + g @ problem.u_nominal + d_hat
    rows, bounds = [], []
    for barrier in env.barriers:
        grad_h = barrier.grad(x_hat0)
        a = g.T @ grad_h
        tighten = problem.k_sigma * np.linalg.norm(grad_h) * np.linalg.norm(sigma)
        b = (barrier.fn(x_hat0) - (1.0 - barrier.eta) * barrier.fn(x)
             - tighten)
        rows.append(a)
        bounds.append(b)
    return np.array(rows), np.array(bounds)


def solve_qp_active_set(Q, c, k_eps, A, b, tol=1e-8):
    """Exact minimizer of 0.5 u'Qu - c'u + sum k_i eps_i^2
    subject to A u - eps <= b, eps >= 0.

    Enumerates active subsets of the k rows; for each, solves the
    equality-constrained KKT system and keeps the feasible candidate with
    the least objective. Exact for the small sizes used here.
    """
    m = Q.shape[0]
    k = A.shape[0]
    best = None
    for size in range(k + 1):
        for S in combinations(range(k), size):
            nS = len(S)
            dim = m + nS + nS  # u, eps_S, multipliers
            KKT = np.zeros((dim, dim))
            rhs = np.zeros(dim)
            KKT[:m, :m] = Q
            rhs[:m] = c
            for j, i in enumerate(S):
                KKT[m + j, m + j] = 2.0 * k_eps[i]
                # constraint row: a_i . u - eps_i = b_i
                KKT[m + nS + j, :m] = A[i]
                KKT[m + nS + j, m + j] = -1.0
                KKT[:m, m + nS + j] = A[i]
                KKT[m + j, m + nS + j] = -1.0
                rhs[m + nS + j] = b[i]
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                sol, *_ = np.linalg.lstsq(KKT, rhs, rcond=None)
            u = sol[:m]
            eps = np.zeros(k)
            for j, i in enumerate(S):
                eps[i] = sol[m + j]
            if np.any(eps < -tol):
                continue
            if np.any(A @ u - eps > b + tol):
                continue
            obj = 0.5 * u @ Q @ u - c @ u + np.sum(k_eps * eps * eps)
            if best is None or obj < best[0] - 1e-14:
                best = (obj, u, np.maximum(eps, 0.0), S)
    if best is None:
        raise BackupSolverError("no feasible active-set candidate found")
    return best


def backup_solve(problem, x, env, lyap_net, residual_mean=None,
                 residual_std=None) -> BackupSolution:
    """Solve the backup QP at state x and return the control to apply."""
    x = np.asarray(x, dtype=np.float64)
    A, b = _linearize_constraints(problem, x, env, residual_mean, residual_std)
    _, g = env.nominal(x)
    if problem.kappa > 0.0 and lyap_net is not None:
        c = problem.kappa * (g.T @ lyapunov_input_grad(lyap_net, x))
    else:
        c = np.zeros(env.control_dim)
    obj, u_modi, eps, S = solve_qp_active_set(
        problem.Q, c, problem.k_eps, A, b)
    u_actual = env.clip_control(problem.u_nominal - u_modi)
    return BackupSolution(u_modi=u_modi, u_actual=u_actual, eps=eps,
                          objective=obj, active_set=S)
