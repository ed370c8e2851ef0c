"""Closed-form kernels of the VP diffusion bridge pinned at z_T.

Index conventions: every coefficient array has length T+1 and is indexed by
t directly. Step-kernel and posterior arrays hold NaN at t = 0 where they are
undefined.
"""

from dataclasses import dataclass

import numpy as np

from .schedule import Schedule
from .tensor import Rng, as_tensor, randn

DELTA2_TOL = 1e-12
M_GUARD = 1e-4
DAN_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class BridgeCoefficients:
    schedule: Schedule
    m: np.ndarray
    n: np.ndarray
    sbar: np.ndarray
    a: np.ndarray
    b: np.ndarray
    delta: np.ndarray
    k1: np.ndarray
    k2: np.ndarray
    k3: np.ndarray
    post_std: np.ndarray

    @property
    def T(self) -> int:
        return self.schedule.T


def bridge_coeffs(s: Schedule) -> BridgeCoefficients:
    """Tabulate marginal, one-step and posterior coefficients for every t."""
    T = s.T
    alpha, sigma = np.asarray(s.alpha), np.asarray(s.sigma)
    # SNR_T / SNR_t, written to avoid forming the tiny SNR_T on its own
    ratio = (alpha[T] ** 2 * sigma ** 2) / (sigma[T] ** 2 * alpha ** 2)
    ratio[T] = 1.0
    one_minus = 1.0 - ratio
    m = alpha * one_minus
    n = ratio * alpha / alpha[T]
    sbar = sigma * np.sqrt(one_minus)
    m[T], n[T], sbar[T] = 0.0, 1.0, 0.0

    a = np.full(T + 1, np.nan)
    b = np.full(T + 1, np.nan)
    delta2 = np.full(T + 1, np.nan)
    a[1:] = m[1:] / m[:-1]
    b[1:] = n[1:] - a[1:] * n[:-1]
    delta2[1:] = sbar[1:] ** 2 - a[1:] ** 2 * sbar[:-1] ** 2
    bad = np.where(delta2[1:] < -DELTA2_TOL)[0]
    if bad.size:
        raise ValueError(f"schedule incompatible with bridge: delta^2 < 0 at t={bad[0] + 1}")
    delta2[1:] = np.maximum(delta2[1:], 0.0)

    k1 = np.full(T + 1, np.nan)
    k2 = np.full(T + 1, np.nan)
    k3 = np.full(T + 1, np.nan)
    post_var = np.full(T + 1, np.nan)
    t = np.arange(1, T)
    w_prev = sbar[t - 1] ** 2 / sbar[t] ** 2
    w_step = delta2[t] / sbar[t] ** 2
    k1[t] = w_prev * a[t]
    k2[t] = w_step * m[t - 1]
    k3[t] = w_step * n[t - 1] - w_prev * a[t] * b[t]
    post_var[t] = w_prev * delta2[t]
    # z_T is deterministic, so the t = T posterior is the t = T-1 marginal
    k1[T], k2[T], k3[T], post_var[T] = 0.0, m[T - 1], n[T - 1], sbar[T - 1] ** 2

    arrays = dict(m=m, n=n, sbar=sbar, a=a, b=b, delta=np.sqrt(delta2),
                  k1=k1, k2=k2, k3=k3, post_std=np.sqrt(post_var))
    for arr in arrays.values():
        arr.setflags(write=False)
    return BridgeCoefficients(schedule=s, **arrays)


def _timesteps(t, lo, hi):
    t_arr = np.asarray(t)
    if t_arr.dtype.kind not in "iu" and not np.all(np.mod(t_arr, 1) == 0):
        raise ValueError(f"timestep must be integral, got {t}")
    t_arr = t_arr.astype(np.int64)
    if np.any(t_arr < lo) or np.any(t_arr > hi):
        raise ValueError(f"timestep {t} out of range [{lo}, {hi}]")
    return t_arr


def _bcast(c, ndim):
    """Scalar stays scalar; a per-sample vector broadcasts over the leading batch axis."""
    if np.ndim(c) == 0:
        return float(c)
    return c.reshape(c.shape + (1,) * (ndim - 1))


def _per_sample(coef, t_arr, ndim):
    return _bcast(coef[t_arr], ndim)


def forward_sample(bc: BridgeCoefficients, t, z0, zT, rng: Rng = None, eps=None):
    """Draw z_t ~ q(z_t | z0, zT); returns ``(z_t, eps)``."""
    z0, zT = as_tensor(z0), as_tensor(zT)
    if z0.shape != zT.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {zT.shape}")
    t = _timesteps(t, 1, bc.T)
    if eps is None:
        eps = randn(rng, z0.shape)
    eps = as_tensor(eps)
    nd = z0.ndim
    z_t = (_per_sample(bc.m, t, nd) * z0 + _per_sample(bc.n, t, nd) * zT
           + _per_sample(bc.sbar, t, nd) * eps)
    return z_t, eps


def step_kernel(bc: BridgeCoefficients, t: int):
    """``(a_t, b_t, delta_t)`` of q(z_t | z_{t-1}, z_T)."""
    t = int(_timesteps(t, 1, bc.T))
    if bc.m[t - 1] == 0.0:
        raise ValueError("degenerate step")
    return float(bc.a[t]), float(bc.b[t]), float(bc.delta[t])


def posterior(bc: BridgeCoefficients, t, z_t, z0_hat, zT):
    """Mean and std of q(z_{t-1} | z_t, z0, zT)."""
    t = _timesteps(t, 2, bc.T)
    z_t, z0_hat, zT = as_tensor(z_t), as_tensor(z0_hat), as_tensor(zT)
    if not (z_t.shape == z0_hat.shape == zT.shape):
        raise ValueError("shape mismatch in posterior inputs")
    nd = z_t.ndim
    mean = (_per_sample(bc.k1, t, nd) * z_t + _per_sample(bc.k2, t, nd) * z0_hat
            + _per_sample(bc.k3, t, nd) * zT)
    return mean, _per_sample(bc.post_std, t, nd)


def dan_coefficients(bc: BridgeCoefficients, t):
    """``(c_t, s_t)`` with z' = c_t z0 + s_t eps after normalization."""
    t = _timesteps(t, 1, bc.T - 1)
    norm = np.sqrt(bc.m[t] ** 2 + bc.sbar[t] ** 2)
    return bc.m[t] / norm, bc.sbar[t] / norm


def dan_normalize(bc: BridgeCoefficients, t, z_t, zT):
    """Map a bridge state onto unit-marginal VP form: (z_t - n_t zT) / sqrt(m_t^2 + sbar_t^2)."""
    t = _timesteps(t, 1, bc.T - 1)
    z_t, zT = as_tensor(z_t), as_tensor(zT)
    if z_t.shape != zT.shape:
        raise ValueError(f"shape mismatch: {z_t.shape} vs {zT.shape}")
    norm = np.sqrt(bc.m[t] ** 2 + bc.sbar[t] ** 2)
    if np.any(norm < DAN_TOL):
        raise ValueError(f"DAN singular at t={t}")
    nd = z_t.ndim
    return (z_t - _per_sample(bc.n, t, nd) * zT) / _bcast(norm, nd)


def recover_z0(bc: BridgeCoefficients, t, z_t, zT, eps_hat, m_guard: float = M_GUARD):
    """Invert the forward kernel given a noise estimate."""
    t = _timesteps(t, 1, bc.T)
    if np.any(bc.m[t] < m_guard):
        raise ValueError(f"z0 recovery singular at t={t}")
    z_t, zT, eps_hat = as_tensor(z_t), as_tensor(zT), as_tensor(eps_hat)
    nd = z_t.ndim
    return ((z_t - _per_sample(bc.n, t, nd) * zT - _per_sample(bc.sbar, t, nd) * eps_hat)
            / _per_sample(bc.m, t, nd))


def h_drift(s: Schedule, t, z_t, x):
    """grad_z log q(z_T = x | z_t) for the VP reference process.

    ``t`` may be fractional; alpha is then interpolated log-linearly.
    """
    if not (0 <= t < s.T):
        raise ValueError(f"h_drift needs 0 <= t < T, got {t}")
    log_rho = s.log_alpha_at(s.T) - s.log_alpha_at(t)
    rho = np.exp(log_rho)
    # sigma_T^2 - rho^2 sigma_t^2 reduces to 1 - rho^2 for VP schedules
    denom = -np.expm1(2.0 * log_rho)
    if denom <= 0:
        raise ValueError(f"h_drift denominator non-positive at t={t}")
    z_t, x = as_tensor(z_t), as_tensor(x)
    return rho * (x - rho * z_t) / denom
