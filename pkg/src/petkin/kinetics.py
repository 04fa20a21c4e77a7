"""Two-compartment FDG forward model.

Compartment concentrations are the solution of the linear ODE system

    dC/dt = M C + k1 * Cb(t) * e1,   C(0) = 0,

with M = [[-(k2+k3), k4], [k3, -k4]].  The measured concentration mixes the
tissue signal with the blood signal through the blood volume fraction V.

All rate constants are in 1/min; time is handled in minutes internally;
concentrations are in kBq/mL.  The input function is piecewise linear, which
lets the convolution integral (and its parameter sensitivities) be evaluated
in closed form, segment by segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SECONDS_PER_MINUTE = 60.0

# Relative eigenvalue gap below which the confluent (Jordan-limit) branch of
# the matrix exponential is used.
DEGENERACY_RTOL = 1e-8
SENS_DEGENERACY_RTOL = 1e-5

# Default acquisition: 28 frames spanning 60 minutes.
DEFAULT_FRAME_DURATIONS_S = (6 * [10.0]) + (3 * [20.0]) + (3 * [30.0]) + (4 * [60.0]) + (3 * [150.0]) + (9 * [300.0])


@dataclass(frozen=True)
class KineticParams:
    """Rate constants k1..k4 (1/min) and blood volume fraction V."""

    k1: float
    k2: float
    k3: float
    k4: float
    V: float = 0.0

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "k4"):
            if not np.isfinite(getattr(self, name)) or getattr(self, name) < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if not (0.0 <= self.V < 1.0):
            raise ValueError("V must lie in [0, 1)")

    @property
    def k(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3, self.k4], dtype=float)

    def with_k(self, k) -> "KineticParams":
        k = np.asarray(k, dtype=float)
        return KineticParams(k[0], k[1], k[2], k[3], self.V)


@dataclass(frozen=True)
class TimeGrid:
    """Contiguous acquisition frames; starts/ends in seconds, midpoints in minutes."""

    frame_starts_s: np.ndarray
    frame_ends_s: np.ndarray

    def __post_init__(self):
        starts = np.asarray(self.frame_starts_s, dtype=float)
        ends = np.asarray(self.frame_ends_s, dtype=float)
        object.__setattr__(self, "frame_starts_s", starts)
        object.__setattr__(self, "frame_ends_s", ends)
        if starts.ndim != 1 or starts.shape != ends.shape or starts.size == 0:
            raise ValueError("frame starts/ends must be matching 1-D arrays")
        if starts[0] != 0.0:
            raise ValueError("acquisition must start at t=0")
        if np.any(ends <= starts) or np.any(starts[1:] != ends[:-1]):
            raise ValueError("frames must be contiguous and strictly increasing")

    @classmethod
    def from_durations(cls, durations_s=DEFAULT_FRAME_DURATIONS_S) -> "TimeGrid":
        ends = np.cumsum(np.asarray(durations_s, dtype=float))
        starts = np.concatenate([[0.0], ends[:-1]])
        return cls(starts, ends)

    @classmethod
    def default(cls) -> "TimeGrid":
        return cls.from_durations()

    @property
    def n(self) -> int:
        return self.frame_starts_s.size

    @property
    def mid_min(self) -> np.ndarray:
        return 0.5 * (self.frame_starts_s + self.frame_ends_s) / SECONDS_PER_MINUTE

    @property
    def end_min(self) -> float:
        return float(self.frame_ends_s[-1]) / SECONDS_PER_MINUTE


@dataclass(frozen=True)
class InputFunction:
    """Arterial tracer concentration Cb(t), piecewise linear between samples."""

    times_min: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times_min, dtype=float)
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times_min", t)
        object.__setattr__(self, "values", v)
        if t.ndim != 1 or t.shape != v.shape or t.size < 2:
            raise ValueError("need >= 2 matching samples")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("sample times must start at 0 and increase strictly")
        if np.any(v < 0):
            raise ValueError("input-function values must be non-negative")

    def __call__(self, t_min) -> np.ndarray:
        return np.interp(t_min, self.times_min, self.values)

    @property
    def end_min(self) -> float:
        return float(self.times_min[-1])


@dataclass(frozen=True)
class CompartmentCurve:
    """Free and metabolized compartment concentrations at the frame midpoints."""

    cf: np.ndarray
    cm: np.ndarray


@dataclass(frozen=True)
class ModelCurve:
    """Measured concentration at the frame midpoints."""

    values: np.ndarray


def system_matrix(params: KineticParams) -> np.ndarray:
    """Coefficient matrix M of the compartment ODE system."""
    k2, k3, k4 = params.k2, params.k3, params.k4
    return np.array([[-(k2 + k3), k4], [k3, -k4]], dtype=float)


def _eigenvalues(M: np.ndarray) -> tuple[float, float]:
    """Eigenvalues of the compartment matrix, lam1 >= lam2 (both <= 0).

    The small eigenvalue is recovered from the determinant to avoid the
    cancellation in (trace + sqrt(disc)) / 2 when det(M) is tiny.
    """
    tr = M[0, 0] + M[1, 1]
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    disc = tr * tr - 4.0 * det
    sq = np.sqrt(max(disc, 0.0))
    lam2 = 0.5 * (tr - sq)
    lam1 = det / lam2 if lam2 != 0.0 else 0.0
    return lam1, lam2


def _is_degenerate(lam1: float, lam2: float, rtol: float = DEGENERACY_RTOL) -> bool:
    scale = max(abs(lam1), abs(lam2))
    return abs(lam1 - lam2) <= rtol * scale


def expm_2x2(M: np.ndarray, dt: float) -> np.ndarray:
    """exp(M*dt) for a compartment matrix via its closed-form eigendecomposition.

    Falls back to the confluent formula exp(lam*dt) * (I + dt*(M - lam I))
    when the eigenvalues coincide within a relative gap of DEGENERACY_RTOL.
    """
    M = np.asarray(M, dtype=float)
    lam1, lam2 = _eigenvalues(M)
    eye = np.eye(2)
    if _is_degenerate(lam1, lam2):
        lam = 0.5 * (lam1 + lam2)
        return np.exp(lam * dt) * (eye + dt * (M - lam * eye))
    gap = lam1 - lam2
    p1 = (M - lam2 * eye) / gap
    p2 = (lam1 * eye - M) / gap
    return np.exp(lam1 * dt) * p1 + np.exp(lam2 * dt) * p2


def _psi(m: int, x: np.ndarray) -> np.ndarray:
    """psi_m(x) = integral_0^1 v^m e^{x v} dv, numerically stable near x=0.

    Series for |x| < 0.5, otherwise the upward recurrence
    psi_m = (e^x - m psi_{m-1}) / x starting from psi_0 = expm1(x)/x.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 0.5
    if np.any(small):
        xs = x[small]
        acc = np.zeros_like(xs)
        term = np.ones_like(xs)
        for j in range(17):
            acc = acc + term / (m + j + 1)
            term = term * xs / (j + 1)
        out[small] = acc
    big = ~small
    if np.any(big):
        xb = x[big]
        ex = np.exp(xb)
        val = np.expm1(xb) / xb
        for mm in range(1, m + 1):
            val = (ex - mm * val) / xb
        out[big] = val
    return out


def pl_exp_moments(t_eval: np.ndarray, if_times: np.ndarray, if_values: np.ndarray,
                   lam: float, mmax: int) -> np.ndarray:
    """Exact moments of a piecewise-linear function against an exponential kernel.

    Returns an array of shape (mmax+1, len(t_eval)) whose m-th row is

        conv_m(t) = integral_0^t (t-u)^m e^{lam (t-u)} Cb(u) du

    computed in closed form per linear segment of Cb.
    """
    t = np.asarray(t_eval, dtype=float)[:, None]
    u0 = if_times[:-1][None, :]
    u1 = if_times[1:][None, :]
    a = if_values[:-1][None, :]
    b = ((if_values[1:] - if_values[:-1]) / (if_times[1:] - if_times[:-1]))[None, :]

    c = np.minimum(u1, t)
    active = u0 < t
    s0 = t - u0
    s1 = t - c
    h = np.where(active, c - u0, 0.0)
    s1 = np.where(active, s1, 0.0)
    s0 = np.where(active, s0, 0.0)

    # P[j] = integral_0^h w^j e^{lam w} dw = h^{j+1} psi_j(lam h)
    x = lam * h
    P = [h ** (j + 1) * _psi(j, x) for j in range(mmax + 2)]

    # G[m] = integral_{s1}^{s0} s^m e^{lam s} ds = e^{lam s1} * sum binom(m,j) s1^{m-j} P[j]
    decay = np.exp(lam * s1)
    from math import comb

    G = []
    for m_ in range(mmax + 2):
        acc = np.zeros_like(h)
        for j in range(m_ + 1):
            acc = acc + comb(m_, j) * s1 ** (m_ - j) * P[j]
        G.append(decay * acc)

    out = np.empty((mmax + 1, t.shape[0]))
    for m_ in range(mmax + 1):
        seg = (a + b * s0) * G[m_] - b * G[m_ + 1]
        out[m_] = np.where(active, seg, 0.0).sum(axis=1)
    return out


# dM/dk_i for i = 2, 3, 4.
_DM = (
    np.array([[-1.0, 0.0], [0.0, 0.0]]),
    np.array([[-1.0, 0.0], [1.0, 0.0]]),
    np.array([[0.0, 1.0], [0.0, -1.0]]),
)

_E1 = np.array([1.0, 0.0])


def _compartments_and_sens(k: np.ndarray, if_times: np.ndarray, if_values: np.ndarray,
                           t_eval: np.ndarray, with_sens: bool):
    """Per-unit-k1 compartment curves and, optionally, their k2..k4 sensitivities.

    Returns (base, sens) where base has shape (len(t), 2) with
    C(t) = k1 * base, and sens is None or shape (3, len(t), 2) holding
    d(C/k1)/dk_i for i = 2, 3, 4.  Uses the Frechet-derivative identity
    d exp(Ms) = integral_0^s e^{M(s-r)} dM e^{Mr} dr, which reduces to the
    same closed-form convolution moments.
    """
    M = np.array([[-(k[1] + k[2]), k[3]], [k[2], -k[3]]])
    lam1, lam2 = _eigenvalues(M)
    eye = np.eye(2)

    # The sensitivity formulas carry second divided differences (1/gap^2
    # amplification), so they need a wider confluent window than the plain
    # exponential does.
    rtol = SENS_DEGENERACY_RTOL if with_sens else DEGENERACY_RTOL
    if _is_degenerate(lam1, lam2, rtol):
        lam = 0.5 * (lam1 + lam2)
        Q = M - lam * eye  # nilpotent: Q @ Q == 0
        mmax = 3 if with_sens else 1
        conv = pl_exp_moments(t_eval, if_times, if_values, lam, mmax)
        base = np.outer(conv[0], _E1) + np.outer(conv[1], Q @ _E1)
        if not with_sens:
            return base, None
        sens = np.empty((3, t_eval.size, 2))
        for i, A in enumerate(_DM):
            v1 = A @ _E1
            v2 = (Q @ A + A @ Q) @ _E1
            v3 = (Q @ A @ Q) @ _E1
            sens[i] = (np.outer(conv[1], v1) + 0.5 * np.outer(conv[2], v2)
                       + np.outer(conv[3], v3) / 6.0)
        return base, sens

    gap = lam1 - lam2
    p1 = (M - lam2 * eye) / gap
    p2 = (lam1 * eye - M) / gap
    mmax = 1 if with_sens else 0
    c1 = pl_exp_moments(t_eval, if_times, if_values, lam1, mmax)
    c2 = pl_exp_moments(t_eval, if_times, if_values, lam2, mmax)
    base = np.outer(c1[0], p1 @ _E1) + np.outer(c2[0], p2 @ _E1)
    if not with_sens:
        return base, None

    cross = (c1[0] - c2[0]) / gap
    sens = np.empty((3, t_eval.size, 2))
    for i, A in enumerate(_DM):
        w11 = p1 @ A @ p1 @ _E1
        w22 = p2 @ A @ p2 @ _E1
        w12 = p1 @ A @ p2 @ _E1 + p2 @ A @ p1 @ _E1
        sens[i] = np.outer(c1[1], w11) + np.outer(c2[1], w22) + np.outer(cross, w12)
    return base, sens


def solve_forward(params: KineticParams, input_fn: InputFunction, grid: TimeGrid) -> CompartmentCurve:
    """Compartment concentrations at the frame midpoints, exact for piecewise-linear Cb."""
    if grid.frame_starts_s[0] != 0.0:
        raise ValueError("time grid must start at 0")
    base, _ = _compartments_and_sens(params.k, input_fn.times_min, input_fn.values,
                                     grid.mid_min, with_sens=False)
    c = params.k1 * base
    return CompartmentCurve(cf=c[:, 0], cm=c[:, 1])


def measure(curve: CompartmentCurve, params: KineticParams, input_fn: InputFunction,
            grid: TimeGrid) -> ModelCurve:
    """Measured concentration (1-V)(Cf+Cm) + V*Cb at the frame midpoints."""
    cb = input_fn(grid.mid_min)
    return ModelCurve((1.0 - params.V) * (curve.cf + curve.cm) + params.V * cb)


def model_curve(params: KineticParams, input_fn: InputFunction, grid: TimeGrid) -> np.ndarray:
    """Convenience: forward model evaluated straight to measured values."""
    return measure(solve_forward(params, input_fn, grid), params, input_fn, grid).values


def model_and_jacobian(params: KineticParams, input_fn: InputFunction, grid: TimeGrid):
    """Measured curve and its N x 4 Jacobian w.r.t. (k1..k4); V held fixed.

    Column 1 exploits linearity of the tissue signal in k1 (no division, so
    k1 = 0 is fine); columns 2-4 come from the closed-form Frechet derivative
    of the matrix exponential under the same per-segment convolution.
    """
    k = params.k
    tmid = grid.mid_min
    base, sens = _compartments_and_sens(k, input_fn.times_min, input_fn.values,
                                        tmid, with_sens=True)
    one_minus_v = 1.0 - params.V
    tissue_unit = base.sum(axis=1)
    f = one_minus_v * k[0] * tissue_unit + params.V * input_fn(tmid)
    jac = np.empty((tmid.size, 4))
    jac[:, 0] = one_minus_v * tissue_unit
    for i in range(3):
        jac[:, i + 1] = one_minus_v * k[0] * sens[i].sum(axis=1)
    return f, jac


def sensitivities(params: KineticParams, input_fn: InputFunction, grid: TimeGrid) -> np.ndarray:
    """N x 4 Jacobian of the measured curve w.r.t. the rate constants."""
    _, jac = model_and_jacobian(params, input_fn, grid)
    return jac
