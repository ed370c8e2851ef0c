"""Discrete variance-preserving noise schedule."""

from dataclasses import dataclass

import numpy as np

SIGMA_MIN = 1e-4


@dataclass(frozen=True, eq=False)
class Schedule:
    """VP schedule on the integer grid t = 0..T.

    ``alpha`` and ``sigma`` have length T+1, ``beta`` has length T with
    ``beta[t-1]`` the increment of step t. Time in the SDE helpers is
    normalized, tau = t / T.
    """

    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    beta: np.ndarray
    beta_min: float = float("nan")
    beta_max: float = float("nan")

    @property
    def snr_array(self) -> np.ndarray:
        return self.alpha ** 2 / self.sigma ** 2

    def _check_t(self, t, lo=0, hi=None):
        hi = self.T if hi is None else hi
        if not (lo <= int(t) <= hi) or int(t) != t:
            raise ValueError(f"timestep {t} out of range [{lo}, {hi}]")
        return int(t)

    def snr(self, t: int) -> float:
        t = self._check_t(t)
        return float(self.alpha[t] ** 2 / self.sigma[t] ** 2)

    def sde_coeffs(self, t: int):
        """Drift scale and squared diffusion of the reference SDE at grid point t.

        Rates are per unit of normalized time and come from central
        differences of log(alpha) and sigma^2, so one Euler step of size 1/T
        matches the discrete kernel to second order.
        """
        t = self._check_t(t, 1, self.T - 1)
        f = 0.5 * (np.log(self.alpha[t + 1]) - np.log(self.alpha[t - 1]))
        dvar = 0.5 * (self.sigma[t + 1] ** 2 - self.sigma[t - 1] ** 2)
        g2 = dvar - 2.0 * f * self.sigma[t] ** 2
        return float(f * self.T), float(g2 * self.T)

    # Continuous-time view: log(alpha) linear between grid points, so
    # beta(tau) is piecewise constant and the VP SDE reproduces alpha_t and
    # sigma_t exactly at every integer t.

    def _locate(self, t):
        t = np.clip(np.asarray(t, dtype=np.float64), 0.0, float(self.T))
        k = np.minimum(np.floor(t).astype(np.int64), self.T - 1)
        return k, t - k

    def log_alpha_at(self, t):
        k, u = self._locate(t)
        la = np.log(self.alpha)
        return la[k] + u * (la[k + 1] - la[k])

    def alpha_at(self, t):
        return np.exp(self.log_alpha_at(t))

    def sigma2_at(self, t):
        return -np.expm1(2.0 * self.log_alpha_at(t))

    def beta_rate_at(self, t):
        """beta(t) = -2 d log(alpha)/dt per integer time unit (= g^2, f = -beta/2)."""
        k, _ = self._locate(t)
        la = np.log(self.alpha)
        return -2.0 * (la[k + 1] - la[k])


def make_vp_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> Schedule:
    """Linear-beta VP schedule with sigma_0 floored at ``SIGMA_MIN``."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)
    beta = np.linspace(beta_min, beta_max, T)
    log_a2 = np.concatenate([[0.0], np.cumsum(np.log1p(-beta))])
    return _from_log_alpha2(T, log_a2, beta, beta_min, beta_max)


def schedule_from_alpha(alpha) -> Schedule:
    """Build a VP schedule from an explicit decreasing alpha sequence."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size < 3:
        raise ValueError("alpha must be 1-D with at least 3 entries")
    if np.any(alpha <= 0) or np.any(alpha > 1) or np.any(np.diff(alpha) >= 0):
        raise ValueError("alpha must be strictly decreasing in (0, 1]")
    log_a2 = 2.0 * np.log(alpha)
    beta = -np.expm1(np.diff(log_a2))
    return _from_log_alpha2(alpha.size - 1, log_a2, beta, float(beta.min()), float(beta.max()))


def _from_log_alpha2(T, log_a2, beta, beta_min, beta_max):
    sigma2 = -np.expm1(log_a2)
    sigma2 = np.maximum(sigma2, SIGMA_MIN ** 2)
    sigma = np.sqrt(sigma2)
    alpha = np.sqrt(1.0 - sigma2)
    # where the floor is inactive keep the more accurate product form
    unfloored = sigma2 > SIGMA_MIN ** 2
    alpha[unfloored] = np.exp(0.5 * log_a2[unfloored])
    s = Schedule(T=T, alpha=alpha, sigma=sigma, beta=np.asarray(beta, dtype=np.float64),
                 beta_min=float(beta_min), beta_max=float(beta_max))
    for arr in (s.alpha, s.sigma, s.beta):
        arr.setflags(write=False)
    return s
