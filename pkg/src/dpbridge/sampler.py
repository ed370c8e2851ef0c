"""Reverse-time samplers: ancestral (Markov posterior) and accelerated grid sampling."""

from dataclasses import dataclass

import numpy as np

from . import bridge
from .bridge import BridgeCoefficients
from .codec import decode, encode
from .tensor import Rng, as_tensor

G_MODES = ("markov", "deterministic", "scaled")


@dataclass(frozen=True)
class SamplerConfig:
    """``grid`` (explicit evaluation times t_1 < ... < t_N) overrides ``n_steps``/``t_start``.

    ``clip_z0`` clamps each z0 estimate to the latent range of valid maps
    before it is used; near t = T the estimate divides by m_t ~ 1e-4 and
    is otherwise unusable.
    """

    n_steps: int = 50
    g_mode: str = "markov"
    eta: float = 1.0
    t_start: int = None
    grid: tuple = None
    use_dan: bool = True
    clip_z0: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.g_mode not in G_MODES:
            raise ValueError(f"g_mode must be one of {G_MODES}, got {self.g_mode!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


def make_grid(T: int, n_steps: int, t_start: int = None):
    """Network evaluation times t_1 < ... < t_N of a uniform grid 0 = t_0 < ... < t_N = t_start.

    The last move lands on t_0 = 0, where the bridge marginal collapses to
    z0, so the sampler returns the estimate made at t_1.
    """
    t_start = T - 1 if t_start is None else int(t_start)
    if not 1 <= t_start <= T - 1:
        raise ValueError(f"t_start must lie in [1, {T - 1}]")
    if n_steps >= t_start:
        return tuple(range(1, t_start + 1))
    grid = np.unique(np.rint(np.linspace(0, t_start, n_steps + 1)).astype(np.int64))[1:]
    return tuple(int(t) for t in grid)


def _resolve_grid(bc: BridgeCoefficients, cfg: SamplerConfig):
    grid = cfg.grid if cfg.grid is not None else make_grid(bc.T, cfg.n_steps, cfg.t_start)
    grid = tuple(int(t) for t in grid)
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("sampling grid must be strictly increasing")
    if grid[0] < 1 or grid[-1] > bc.T - 1:
        raise ValueError(f"sampling grid must lie in [1, {bc.T - 1}]")
    return grid


def jump_posterior_std(bc: BridgeCoefficients, t_lo: int, t_hi: int) -> float:
    """Std of q(z_{t_lo} | z_{t_hi}, z0, zT); equals ``post_std[t_hi]`` for adjacent steps."""
    ratio = bc.m[t_hi] / bc.m[t_lo]
    var = bc.sbar[t_lo] ** 2 - ratio ** 2 * bc.sbar[t_lo] ** 4 / bc.sbar[t_hi] ** 2
    return float(np.sqrt(max(var, 0.0)))


def _predict(model, bc, t, z, zT, use_dan):
    net_in = bridge.dan_normalize(bc, t, z, zT) if use_dan else z
    return model(net_in, zT, t)


def _check_model(model, bc):
    T = getattr(model, "T", None)
    if T is not None and T != bc.T:
        raise ValueError(f"model trained with T={T} but schedule has T={bc.T}")


def _estimate_z0(bc, t, z, zT, eps_hat, bound):
    z0_hat = bridge.recover_z0(bc, t, z, zT, eps_hat)
    if bound is not None:
        np.clip(z0_hat, -bound, bound, out=z0_hat)
    return z0_hat


def _initial_state(bc, zT, t_start, rng, stochastic):
    """Bridge marginal at t_start with the O(m_t) contribution of z0 dropped."""
    noise = rng.randn(zT.shape) if stochastic else 0.0
    return bc.n[t_start] * zT + bc.sbar[t_start] * noise


def ancestral_latent(model, bc: BridgeCoefficients, zT, cfg: SamplerConfig, rng: Rng = None,
                     trajectory=None, z0_bound=None):
    """Markov reverse chain t_start -> 1 on latents; returns the final z0 estimate.

    ``z0_bound`` is the clamp applied when ``cfg.clip_z0`` is set.
    """
    _check_model(model, bc)
    zT = as_tensor(zT)
    rng = Rng(cfg.seed) if rng is None else rng
    t_start = _resolve_grid(bc, cfg)[-1]
    bound = z0_bound if cfg.clip_z0 else None
    z = _initial_state(bc, zT, t_start, rng, stochastic=True)
    for t in range(t_start, 0, -1):
        if trajectory is not None:
            trajectory.append(z)
        eps_hat = _predict(model, bc, t, z, zT, cfg.use_dan)
        z0_hat = _estimate_z0(bc, t, z, zT, eps_hat, bound)
        if t == 1:
            break
        mean, std = bridge.posterior(bc, t, z, z0_hat, zT)
        z = mean + std * rng.randn(z.shape)
    return z0_hat


def accelerated_latent(model, bc: BridgeCoefficients, zT, cfg: SamplerConfig, rng: Rng = None,
                       trajectory=None, z0_bound=None):
    """Grid sampler with stochasticity g_n; ``markov`` on the full grid matches the ancestral chain."""
    _check_model(model, bc)
    zT = as_tensor(zT)
    rng = Rng(cfg.seed) if rng is None else rng
    grid = _resolve_grid(bc, cfg)
    stochastic = cfg.g_mode != "deterministic"
    bound = z0_bound if cfg.clip_z0 else None
    z = _initial_state(bc, zT, grid[-1], rng, stochastic)
    for i in range(len(grid) - 1, -1, -1):
        t_hi = grid[i]
        if trajectory is not None:
            trajectory.append(z)
        eps_hat = _predict(model, bc, t_hi, z, zT, cfg.use_dan)
        z0_hat = _estimate_z0(bc, t_hi, z, zT, eps_hat, bound)
        if i == 0:
            break
        t_lo = grid[i - 1]
        z = accelerated_update(bc, t_lo, t_hi, z, z0_hat, zT, _g_value(bc, t_lo, t_hi, cfg),
                               rng if stochastic else None)
    return z0_hat


def _g_value(bc, t_lo, t_hi, cfg):
    if cfg.g_mode == "deterministic":
        return 0.0
    g = jump_posterior_std(bc, t_lo, t_hi)
    return g if cfg.g_mode == "markov" else cfg.eta * g


def accelerated_update(bc: BridgeCoefficients, t_lo, t_hi, z, z0_hat, zT, g, rng=None, eps=None):
    """Move from t_hi to t_lo keeping the bridge marginal form around ``z0_hat``."""
    var_dir = bc.sbar[t_lo] ** 2 - g ** 2
    if var_dir < -1e-12 * bc.sbar[t_lo] ** 2:
        raise ValueError(f"invalid stochasticity: g={g} exceeds sbar={bc.sbar[t_lo]} at t={t_lo}")
    direction = (z - bc.m[t_hi] * z0_hat - bc.n[t_hi] * zT) / bc.sbar[t_hi]
    out = bc.m[t_lo] * z0_hat + bc.n[t_lo] * zT + np.sqrt(max(var_dir, 0.0)) * direction
    if g > 0:
        if eps is None:
            eps = rng.randn(z.shape)
        out = out + g * eps
    return out


def ancestral_sample(model, bc, codec, x, cfg: SamplerConfig = SamplerConfig(), rng=None):
    """Encode ``x``, run the Markov chain, decode; returns ``(y_hat, z0_hat)``."""
    zT = encode(codec, x)
    z0_hat = ancestral_latent(model, bc, zT, cfg, rng, z0_bound=codec.latent_bound)
    return decode(codec, z0_hat), z0_hat


def accelerated_sample(model, bc, codec, x, cfg: SamplerConfig = SamplerConfig(), rng=None):
    """Encode ``x``, run the grid sampler, decode; returns ``(y_hat, z0_hat)``."""
    zT = encode(codec, x)
    z0_hat = accelerated_latent(model, bc, zT, cfg, rng, z0_bound=codec.latent_bound)
    return decode(codec, z0_hat), z0_hat
