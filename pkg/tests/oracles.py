"""Independent numerical oracles used by the test suite.

These deliberately avoid the library's closed-form machinery: the forward
model is integrated with classical RK4, the matrix exponential with Taylor
scaling-and-squaring, and the trust-region secular equation with bisection.
"""

from __future__ import annotations

import numpy as np

from petkin.kinetics import InputFunction, KineticParams, TimeGrid, system_matrix

TABLE1 = {
    1: KineticParams(0.100, 0.250, 0.100, 0.020, 0.050),
    2: KineticParams(0.050, 0.150, 0.050, 0.020, 0.030),
    3: KineticParams(0.070, 0.050, 0.100, 0.007, 0.040),
    4: KineticParams(0.080, 0.100, 0.050, 0.007, 0.050),
}


def test_input_function(peak: float = 27.56, t_peak: float = 0.5) -> InputFunction:
    """Piecewise-linear blood curve: linear rise, then tri-exponential decay."""
    fr = np.array([0.6, 0.3, 0.1]) * peak
    lams = np.array([4.0, 0.5, 0.01])
    times = np.unique(np.concatenate([
        np.arange(0.0, 2.01, 0.1),
        np.arange(2.0, 10.01, 0.5),
        np.arange(10.0, 60.01, 2.5),
        [t_peak, 60.0],
    ]))
    rise = peak / t_peak * times
    dec = (fr[:, None] * np.exp(-lams[:, None] * (times - t_peak))).sum(0)
    return InputFunction(times, np.where(times <= t_peak, rise, dec))


def rk4_model(params: KineticParams, input_fn: InputFunction, grid: TimeGrid,
              h: float = 0.01) -> np.ndarray:
    """RK4 integration of the two-compartment ODE, sampled at frame midpoints.

    Steps are aligned with the input-function breakpoints so the piecewise
    linearity of C_b never straddles a step.
    """
    M = system_matrix(params)
    brk = np.unique(np.concatenate([
        [0.0],
        input_fn.times_min[input_fn.times_min <= grid.end_min],
        grid.mid_min,
    ]))
    C = np.zeros(2)
    out = {}
    mids = set(grid.mid_min.tolist())
    if 0.0 in mids:
        out[0.0] = C.copy()

    def f(t, c):
        return M @ c + params.k1 * input_fn(t) * np.array([1.0, 0.0])

    for a, b in zip(brk[:-1], brk[1:]):
        nst = max(1, int(np.ceil((b - a) / h)))
        hh = (b - a) / nst
        t = a
        for _ in range(nst):
            s1 = f(t, C)
            s2 = f(t + hh / 2, C + hh / 2 * s1)
            s3 = f(t + hh / 2, C + hh / 2 * s2)
            s4 = f(t + hh, C + hh * s3)
            C = C + hh / 6 * (s1 + 2 * s2 + 2 * s3 + s4)
            t += hh
        if b in mids:
            out[b] = C.copy()
    cc = np.array([out[t] for t in grid.mid_min])
    return (1 - params.V) * cc.sum(1) + params.V * input_fn(grid.mid_min)


def expm_taylor(M: np.ndarray, dt: float) -> np.ndarray:
    """Scaling-and-squaring Taylor series matrix exponential."""
    A = np.asarray(M, dtype=float) * dt
    norm = max(np.abs(A).sum(axis=1).max(), 1e-30)
    s = max(0, int(np.ceil(np.log2(norm))) + 4)
    A = A / 2 ** s
    X = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for j in range(1, 25):
        term = term @ A / j
        X = X + term
    for _ in range(s):
        X = X @ X
    return X


def secular_bisection(J: np.ndarray, r: np.ndarray, radius: float,
                      tol: float = 1e-12) -> tuple[float, np.ndarray]:
    """Bisection solve of ||p(alpha)|| = radius with p = (J'J+aI)^-1 J'r."""
    g = J.T @ r

    def step_norm(alpha):
        n = J.shape[1]
        p = np.linalg.solve(J.T @ J + alpha * np.eye(n), g)
        return np.linalg.norm(p), p

    lo = 0.0
    hi = max(np.linalg.norm(g) / radius, 1e-12)
    n_hi, _ = step_norm(hi)
    while n_hi > radius:
        hi *= 2.0
        n_hi, _ = step_norm(hi)
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        n_mid, p = step_norm(mid)
        if n_mid > radius:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * max(hi, 1.0):
            break
    return 0.5 * (lo + hi), step_norm(0.5 * (lo + hi))[1]


def fd_jacobian(model_fn, k: np.ndarray, rel_h: float = 1e-5) -> np.ndarray:
    """Central finite-difference Jacobian of ``model_fn(k)``."""
    k = np.asarray(k, dtype=float)
    cols = []
    for i in range(k.size):
        h = rel_h * max(abs(k[i]), 1e-3)
        kp = k.copy()
        kp[i] += h
        km = k.copy()
        km[i] -= h
        cols.append((model_fn(kp) - model_fn(km)) / (2 * h))
    return np.stack(cols, axis=1)
