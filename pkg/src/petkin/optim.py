"""Constrained ill-posed nonlinear least-squares solvers.

Two solvers over a generic residual/Jacobian interface:

* ``reg_as_tr`` -- a regularizing affine-scaling trust-region method whose
  trust-region constraint is kept active so the multiplier acts as a
  Tikhonov-style penalty; iterates stay strictly positive.
* ``projected_lm`` -- a classical Levenberg-Marquardt baseline with
  multiplicative damping adaptation and projection onto the non-negative
  orthant.

Both stop on the discrepancy principle (residual <= tau * delta), an optional
caller-supplied rule, stagnation, or an iteration cap.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass
class ResidualProblem:
    """Nonlinear model F(k) = y with known noise bound.

    ``evaluate(k)`` must return ``(F(k), J(k))`` with F an N-vector and J an
    N x n Jacobian, continuously differentiable on the feasible set.
    """

    evaluate: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    y: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.delta < 0:
            raise ValueError("noise bound delta must be >= 0")


@dataclass
class TrConfig:
    """Tuning constants of the regularizing affine-scaling trust-region method."""

    beta: float = 0.25          # acceptance threshold on the actual/predicted ratio
    beta_c: float = 0.1         # threshold on the Cauchy-comparison ratio
    gamma: float = 0.5          # trust-region shrink factor
    q: float = 0.5              # target linearized residual reduction
    tau: float = 2.1            # discrepancy factor, must exceed 1/q
    t: float = 0.995            # stepback factor for strict feasibility
    mu0: float = 0.001
    # mu shrinks gently and grows fast: once steps stop reaching the target
    # linearized reduction (q_j > 1.1 q) the radius should open up quickly,
    # otherwise the iteration crawls near the least-squares minimum and the
    # pixel-level plateau rule fires at a still-biased iterate
    theta: float = 0.9          # mu shrink factor
    eta: float = 0.05           # mu growth divisor
    delta_min: float = 1e-8
    delta_max: float = 10.0
    alpha_floor: float = 1e-10  # multiplier when the TR constraint is inactive
    max_iter: int = 200
    max_inner: int = 30
    stagnation_tol: float = 1e-6
    stagnation_window: int = 5

    def __post_init__(self):
        if not (0.25 <= self.beta < 1):
            raise ValueError("beta must be in [0.25, 1)")
        for name in ("beta_c", "gamma", "q", "t", "theta", "eta"):
            v = getattr(self, name)
            if not (0 < v < 1):
                raise ValueError(f"{name} must be in (0, 1)")
        if self.tau * self.q <= 1:
            raise ValueError("need tau > 1/q")
        if not (0 < self.delta_min < self.delta_max):
            raise ValueError("need 0 < delta_min < delta_max")


@dataclass
class LmConfig:
    """Tuning constants of the projected Levenberg-Marquardt baseline."""

    alpha0: float = 1e-3
    nu_up: float = 10.0
    nu_down: float = 10.0
    alpha_min: float = 1e-12
    tau: float = 2.1
    max_iter: int = 200
    max_reject: int = 40
    stagnation_tol: float = 1e-6
    stagnation_window: int = 5


@dataclass
class FitResult:
    """Outcome of one solver run, with per-iteration history."""

    k: np.ndarray
    stop_reason: str
    n_iter: int
    res_norms: np.ndarray       # residual norm at each accepted iterate, incl. k0
    deltas: np.ndarray          # TR radius (or LM damping) used per accepted step
    alphas: np.ndarray          # multiplier per accepted step
    accepted: np.ndarray        # bool per recorded step
    q_ratios: np.ndarray        # linearized residual ratio q_j per accepted step
    iterates: np.ndarray        # (n_iter+1, n) trajectory including k0
    wall_time_s: float = 0.0

    def summary(self) -> dict:
        return {
            "k": [float(v) for v in self.k],
            "stop_reason": self.stop_reason,
            "n_iter": int(self.n_iter),
            "final_residual": float(self.res_norms[-1]),
            "wall_time_s": float(self.wall_time_s),
        }

    def log_lines(self) -> list[str]:
        lines = []
        for j in range(len(self.deltas)):
            lines.append(
                f"iter={j} res={self.res_norms[j + 1]:.9e} delta={self.deltas[j]:.6e} "
                f"alpha={self.alphas[j]:.6e} q={self.q_ratios[j]:.6e} accepted={int(self.accepted[j])}"
            )
        lines.append(f"stop={self.stop_reason} n_iter={self.n_iter}")
        return lines


def _solve_damped(J: np.ndarray, rhs: np.ndarray, alpha: float) -> np.ndarray:
    """Solve (J^T J + alpha I) x = J^T rhs via Cholesky, bumping alpha if needed."""
    B = J.T @ J
    g = J.T @ rhs
    n = B.shape[0]
    bump = alpha
    for _ in range(60):
        try:
            c = cho_factor(B + bump * np.eye(n), lower=True)
            return cho_solve(c, g)
        except np.linalg.LinAlgError:
            bump = max(2 * bump, 1e-14)
    raise np.linalg.LinAlgError("damped normal equations remained singular")


def solve_secular(J: np.ndarray, r: np.ndarray, radius: float,
                  alpha_floor: float = 1e-10) -> tuple[float, np.ndarray, bool]:
    """Trust-region subproblem via its secular equation.

    Finds alpha > 0 with ||p(alpha)|| = radius, p(alpha) = (J^T J + alpha I)^-1 J^T r,
    by a safeguarded Newton iteration on phi(alpha) = 1/radius - 1/||p(alpha)||.
    When even the alpha -> 0+ step is inside the region the constraint cannot be
    active: returns (alpha_floor, p(alpha_floor), False).

    Returns (alpha, p, active).
    """
    J = np.asarray(J, dtype=float)
    r = np.asarray(r, dtype=float)
    if not (np.all(np.isfinite(J)) and np.all(np.isfinite(r)) and np.isfinite(radius)):
        raise ValueError("non-finite inputs to the secular solve")
    if radius <= 0:
        raise ValueError("trust-region radius must be positive")

    B = J.T @ J
    g = J.T @ r
    n = B.shape[0]
    eye = np.eye(n)

    def step_and_norm(alpha):
        c = cho_factor(B + alpha * eye, lower=True)
        p = cho_solve(c, g)
        return c, p, float(np.linalg.norm(p))

    p_floor = _solve_damped(J, r, alpha_floor)
    if np.linalg.norm(p_floor) <= radius:
        return alpha_floor, p_floor, False

    # ||p(alpha)|| is decreasing; bracket the root.
    lo = 0.0
    hi = float(np.linalg.norm(g)) / radius  # ||p(alpha)|| <= ||g||/alpha
    alpha = max(alpha_floor, 1e-3 * hi)
    for _ in range(100):
        try:
            c, p, pnorm = step_and_norm(alpha)
        except np.linalg.LinAlgError:
            lo = alpha
            alpha = 0.5 * (alpha + hi) if hi > alpha else 2 * alpha + 1e-14
            continue
        if abs(pnorm - radius) <= 1e-8 * radius:
            return alpha, p, True
        if pnorm > radius:
            lo = alpha
        else:
            hi = alpha
        # Newton step on 1/radius - 1/||p||  (Hebden/More form)
        w = cho_solve(c, p)
        dnorm = -float(p @ w) / pnorm
        alpha_new = alpha + (pnorm / radius) * (pnorm - radius) / dnorm if dnorm != 0 else np.nan
        if not np.isfinite(alpha_new) or not (lo < alpha_new < hi):
            alpha_new = 0.5 * (lo + hi)
        alpha = alpha_new
    return alpha, p, True


def feasible_step(k: np.ndarray, p: np.ndarray, t: float) -> np.ndarray:
    """Pull step components back inside the positive orthant.

    Components that keep k + p strictly positive pass through; the rest are
    replaced by t * (proj(k + p) - k), guaranteeing k + p_bar > 0 and
    ||p_bar|| <= ||p||.
    """
    trial = k + p
    proj = np.maximum(trial, 0.0)
    return np.where(trial > 0, p, t * (proj - k))


def scaling_matrix(k: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Affine-scaling diagonal: |k_i| where the gradient pushes toward the bound, else 1."""
    return np.where(grad >= 0, np.abs(k), 1.0)


def cauchy_point(k: np.ndarray, g: np.ndarray, J: np.ndarray, radius: float,
                 t: float) -> np.ndarray:
    """Generalized Cauchy point -lambda_C * D(k) g of the scaled steepest descent."""
    gnorm = np.linalg.norm(g)
    if gnorm == 0:
        raise ValueError("cauchy_point undefined at a stationary point")
    d = scaling_matrix(k, g)
    dg = d * g
    jdg = J @ dg
    denom = float(jdg @ jdg)
    quad = float((np.sqrt(d) * g) @ (np.sqrt(d) * g)) / denom if denom > 0 else np.inf
    lam = min(radius / np.linalg.norm(dg), quad)
    if np.all(k - lam * dg > 0):
        return -lam * dg
    pos = dg > 0
    lam = t * np.min(k[pos] / dg[pos])
    return -lam * dg


def radius_update(mu: float, q_j: float, cfg: TrConfig, res_norm_next: float,
                  g_next: np.ndarray, b_norm_next: float) -> tuple[float, float]:
    """Post-acceptance multiplier and trust-region radius adjustment."""
    if q_j < cfg.q:
        mu_next = cfg.theta * mu
    elif q_j > 1.1 * cfg.q:
        mu_next = mu / cfg.eta
    else:
        mu_next = mu
    raw = max(mu_next * res_norm_next,
              1.2 * (1 - cfg.q) * np.linalg.norm(g_next) / b_norm_next if b_norm_next > 0 else 0.0)
    return mu_next, float(np.clip(raw, cfg.delta_min, cfg.delta_max))


def discrepancy_stop(res_norm: float, delta: float, tau: float) -> bool:
    """Discrepancy principle: stop once the residual falls to tau * delta (never for delta=0)."""
    if delta == 0:
        return False
    return res_norm <= tau * delta


def _quadratic_model(p: np.ndarray, B: np.ndarray, g: np.ndarray) -> float:
    return float(0.5 * p @ B @ p + p @ g)


StopRule = Callable[[list[float]], Optional[str]]


def _check_stagnation(res_hist: list[float], tol: float, window: int) -> bool:
    if len(res_hist) < window + 1:
        return False
    recent = res_hist[-(window + 1):]
    for prev, cur in zip(recent[:-1], recent[1:]):
        scale = max(abs(prev), 1e-300)
        if abs(cur - prev) / scale >= tol:
            return False
    return True


def reg_as_tr(problem: ResidualProblem, k0: np.ndarray, cfg: TrConfig | None = None,
              stop_rule: StopRule | None = None) -> FitResult:
    """Regularizing affine-scaling trust-region iteration.

    Keeps the trust-region constraint active (the multiplier regularizes),
    enforces strict positivity of all iterates through the stepback rule, and
    requires the trial step to achieve a fraction of the generalized Cauchy
    decrease before acceptance.

    ``stop_rule`` is called with the history of accepted residual norms and may
    return a stop-reason string (used for pixel-level thresholds).
    """
    cfg = cfg or TrConfig()
    k = np.asarray(k0, dtype=float).copy()
    if np.any(k <= 0):
        raise ValueError("initial iterate must be strictly positive")
    t_start = time.perf_counter()

    res_hist: list[float] = []
    deltas: list[float] = []
    alphas: list[float] = []
    accepted: list[bool] = []
    q_ratios: list[float] = []
    iterates = [k.copy()]

    mu = cfg.mu0
    stop_reason = "max-iter"

    f, J = problem.evaluate(k)
    r = problem.y - f
    res_norm = float(np.linalg.norm(r))
    res_hist.append(res_norm)

    for _ in range(cfg.max_iter):
        if discrepancy_stop(res_norm, problem.delta, cfg.tau):
            stop_reason = "discrepancy"
            break
        if stop_rule is not None:
            reason = stop_rule(res_hist)
            if reason:
                stop_reason = reason
                break
        if _check_stagnation(res_hist, cfg.stagnation_tol, cfg.stagnation_window):
            stop_reason = "stagnation"
            break

        B = J.T @ J
        g = -J.T @ r
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0:
            stop_reason = "stationary"
            break
        b_norm = float(np.linalg.norm(B, 2))
        radius = max(mu * res_norm,
                     1.2 * (1 - cfg.q) * gnorm / b_norm if b_norm > 0 else cfg.delta_min)
        radius = float(np.clip(radius, cfg.delta_min, cfg.delta_max))

        ok = False
        phi = 0.5 * res_norm ** 2
        for _ in range(cfg.max_inner):
            alpha, p, _active = solve_secular(J, r, radius, cfg.alpha_floor)
            p_bar = feasible_step(k, p, cfg.t)
            p_c = cauchy_point(k, g, J, radius, cfg.t)
            m_bar = _quadratic_model(p_bar, B, g)
            m_c = _quadratic_model(p_c, B, g)
            if m_c < 0 and m_bar < 0:
                f_trial, J_trial = problem.evaluate(k + p_bar)
                r_trial = problem.y - f_trial
                phi_trial = 0.5 * float(r_trial @ r_trial)
                rho_c = m_bar / m_c
                rho = (phi_trial - phi) / m_bar
                if rho_c > cfg.beta_c and rho > cfg.beta:
                    ok = True
                    break
            radius *= cfg.gamma
        if not ok:
            stop_reason = "stalled"
            break

        q_j = float(np.linalg.norm(r - J @ p_bar)) / res_norm
        k = k + p_bar
        f, J = f_trial, J_trial
        r = r_trial
        res_norm = float(np.linalg.norm(r))

        res_hist.append(res_norm)
        deltas.append(radius)
        alphas.append(alpha)
        accepted.append(True)
        q_ratios.append(q_j)
        iterates.append(k.copy())

        g_next = -J.T @ r
        b_norm_next = float(np.linalg.norm(J.T @ J, 2))
        mu, _ = radius_update(mu, q_j, cfg, res_norm, g_next, b_norm_next)

    return FitResult(
        k=k,
        stop_reason=stop_reason,
        n_iter=len(deltas),
        res_norms=np.asarray(res_hist),
        deltas=np.asarray(deltas),
        alphas=np.asarray(alphas),
        accepted=np.asarray(accepted, dtype=bool),
        q_ratios=np.asarray(q_ratios),
        iterates=np.asarray(iterates),
        wall_time_s=time.perf_counter() - t_start,
    )


def projected_lm(problem: ResidualProblem, k0: np.ndarray,
                 cfg: LmConfig | None = None,
                 stop_rule: StopRule | None = None) -> FitResult:
    """Projected Levenberg-Marquardt baseline.

    Solves the penalized normal equations, projects the trial point onto the
    non-negative orthant, and adapts the damping multiplicatively.  Shares the
    stopping rules of ``reg_as_tr``.
    """
    cfg = cfg or LmConfig()
    k = np.maximum(np.asarray(k0, dtype=float).copy(), 0.0)
    t_start = time.perf_counter()

    res_hist: list[float] = []
    deltas: list[float] = []
    alphas: list[float] = []
    accepted: list[bool] = []
    q_ratios: list[float] = []
    iterates = [k.copy()]

    alpha = cfg.alpha0
    stop_reason = "max-iter"

    f, J = problem.evaluate(k)
    r = problem.y - f
    res_norm = float(np.linalg.norm(r))
    res_hist.append(res_norm)

    for _ in range(cfg.max_iter):
        if discrepancy_stop(res_norm, problem.delta, cfg.tau):
            stop_reason = "discrepancy"
            break
        if stop_rule is not None:
            reason = stop_rule(res_hist)
            if reason:
                stop_reason = reason
                break
        if _check_stagnation(res_hist, cfg.stagnation_tol, cfg.stagnation_window):
            stop_reason = "stagnation"
            break

        g = -J.T @ r
        if np.linalg.norm(g) == 0:
            stop_reason = "stationary"
            break

        ok = False
        for _ in range(cfg.max_reject):
            p = _solve_damped(J, r, alpha)
            trial = np.maximum(k + p, 0.0)
            f_trial, J_trial = problem.evaluate(trial)
            r_trial = problem.y - f_trial
            trial_norm = float(np.linalg.norm(r_trial))
            if trial_norm < res_norm:
                ok = True
                break
            alpha *= cfg.nu_up
        if not ok:
            stop_reason = "stalled"
            break

        q_j = float(np.linalg.norm(r - J @ (trial - k))) / res_norm
        k = trial
        f, J, r = f_trial, J_trial, r_trial
        res_norm = trial_norm

        res_hist.append(res_norm)
        deltas.append(float(np.linalg.norm(trial - iterates[-1])))
        alphas.append(alpha)
        accepted.append(True)
        q_ratios.append(q_j)
        iterates.append(k.copy())

        alpha = max(alpha / cfg.nu_down, cfg.alpha_min)

    return FitResult(
        k=k,
        stop_reason=stop_reason,
        n_iter=len(deltas),
        res_norms=np.asarray(res_hist),
        deltas=np.asarray(deltas),
        alphas=np.asarray(alphas),
        accepted=np.asarray(accepted, dtype=bool),
        q_ratios=np.asarray(q_ratios),
        iterates=np.asarray(iterates),
        wall_time_s=time.perf_counter() - t_start,
    )


def _cast_like(default, raw):
    if not isinstance(raw, str):
        return type(default)(raw)
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def config_from_mapping(cls, mapping: dict, prefix: str = ""):
    """Build a config dataclass from flat (string) key/value pairs."""
    kwargs = {}
    names = {f_.name for f_ in fields(cls)}
    for key in mapping:
        if key.startswith(prefix) and key[len(prefix):] not in names:
            raise ValueError(f"unknown {cls.__name__} key {key!r}")
    for f_ in fields(cls):
        key = prefix + f_.name
        if key in mapping:
            kwargs[f_.name] = _cast_like(f_.default, mapping[key])
    return cls(**kwargs)
