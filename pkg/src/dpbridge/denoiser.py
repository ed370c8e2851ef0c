"""Residual MLP noise predictor eps(z', z_T, t) with hand-written gradients."""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tensor import Rng, as_tensor


def timestep_embedding(t, dim):
    """Sinusoidal embedding of integer timesteps, shape ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _silu(x):
    s = expit(x)
    return x * s, s


def _silu_grad(x, s):
    return s * (1.0 + x * (1.0 - s))


class Denoiser:
    """Flattened-latent residual MLP.

    Input is ``[z' | z_T | embed(t)]``; a linear stem maps it to ``width``,
    followed by ``n_blocks`` blocks ``h + W2 silu(W1 h + b1) + b2`` and a
    linear head on the residual stream, so an input-to-output linear path
    exists. All parameters live in one flat vector ``theta``; the per-layer
    arrays are views into it.
    """

    def __init__(self, latent_shape, width=512, n_blocks=4, temb_dim=64):
        self.latent_shape = tuple(int(d) for d in latent_shape)
        self.latent_dim = int(np.prod(self.latent_shape))
        self.width = int(width)
        self.n_blocks = int(n_blocks)
        self.temb_dim = int(temb_dim)
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")
        self.in_dim = 2 * self.latent_dim + self.temb_dim
        layout = [("W_in", (self.in_dim, self.width)), ("b_in", (self.width,))]
        for k in range(self.n_blocks):
            layout += [(f"W1_{k}", (self.width, self.width)), (f"b1_{k}", (self.width,)),
                       (f"W2_{k}", (self.width, self.width)), (f"b2_{k}", (self.width,))]
        layout += [("W_out", (self.width, self.latent_dim)), ("b_out", (self.latent_dim,))]
        self._layout = layout
        self.n_params = sum(int(np.prod(s)) for _, s in layout)
        self.theta = np.zeros(self.n_params)
        self.T = None
        self._cache = None

    @property
    def widths(self):
        return [self.latent_dim, self.width, self.n_blocks, self.temb_dim]

    def views(self, flat):
        """Named array views of a flat parameter (or gradient) vector."""
        out, pos = {}, 0
        for name, shape in self._layout:
            size = int(np.prod(shape))
            out[name] = flat[pos:pos + size].reshape(shape)
            pos += size
        return out

    def init_params(self, rng: Rng, zero_output=True):
        """He-style init; residual branches shrunk by 1/sqrt(n_blocks), zero head by default."""
        p = self.views(self.theta)
        p["W_in"][...] = rng.randn(p["W_in"].shape) * np.sqrt(1.0 / self.in_dim)
        branch = 1.0 / np.sqrt(max(self.n_blocks, 1))
        for k in range(self.n_blocks):
            p[f"W1_{k}"][...] = rng.randn((self.width, self.width)) * np.sqrt(2.0 / self.width)
            p[f"W2_{k}"][...] = rng.randn((self.width, self.width)) * np.sqrt(1.0 / self.width) * branch
        for name in ("b_in",) + tuple(f"b{i}_{k}" for k in range(self.n_blocks) for i in (1, 2)):
            p[name][...] = 0.0
        if zero_output:
            p["W_out"][...] = 0.0
        else:
            p["W_out"][...] = rng.randn(p["W_out"].shape) * np.sqrt(1.0 / self.width)
        p["b_out"][...] = 0.0
        return self

    def _inputs(self, z_prime, zT, t):
        z_prime, zT = as_tensor(z_prime), as_tensor(zT)
        if z_prime.shape != zT.shape or z_prime.shape[1:] != self.latent_shape:
            raise ValueError(f"expected latents of shape (B, {self.latent_shape}), got "
                             f"{z_prime.shape} and {zT.shape}")
        B = z_prime.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        if self.T is not None and (t.min() < 1 or t.max() > self.T - 1):
            raise ValueError(f"timesteps must lie in [1, {self.T - 1}]")
        return np.concatenate([z_prime.reshape(B, -1), zT.reshape(B, -1),
                               timestep_embedding(t, self.temb_dim)], axis=1)

    def forward(self, z_prime, zT, t, retain=True):
        """Predict noise for a batch ``(B, *latent_shape)``; ``t`` scalar or per sample."""
        p = self.views(self.theta)
        x = self._inputs(z_prime, zT, t)
        h = x @ p["W_in"] + p["b_in"]
        blocks = []
        for k in range(self.n_blocks):
            pre = h @ p[f"W1_{k}"] + p[f"b1_{k}"]
            u, s = _silu(pre)
            blocks.append((h, pre, u, s))
            h = h + u @ p[f"W2_{k}"] + p[f"b2_{k}"]
        out = h @ p["W_out"] + p["b_out"]
        self._cache = (x, blocks, h) if retain else None
        return out.reshape((-1,) + self.latent_shape)

    def predict_noise(self, z_prime, zT, t):
        return self.forward(z_prime, zT, t, retain=False)

    __call__ = predict_noise

    def backward(self, upstream):
        """Gradient of ``sum(upstream * output)`` w.r.t. ``theta`` for the retained pass."""
        if self._cache is None:
            raise RuntimeError("backward called without a retained forward pass")
        x, blocks, h_last = self._cache
        p = self.views(self.theta)
        grad = np.zeros(self.n_params)
        g = self.views(grad)
        dy = as_tensor(upstream).reshape(x.shape[0], self.latent_dim)
        g["W_out"][...] = h_last.T @ dy
        g["b_out"][...] = dy.sum(axis=0)
        dh = dy @ p["W_out"].T
        for k in reversed(range(self.n_blocks)):
            h, pre, u, s = blocks[k]
            g[f"W2_{k}"][...] = u.T @ dh
            g[f"b2_{k}"][...] = dh.sum(axis=0)
            dpre = (dh @ p[f"W2_{k}"].T) * _silu_grad(pre, s)
            g[f"W1_{k}"][...] = h.T @ dpre
            g[f"b1_{k}"][...] = dpre.sum(axis=0)
            dh = dh + dpre @ p[f"W1_{k}"].T
        g["W_in"][...] = x.T @ dh
        g["b_in"][...] = dh.sum(axis=0)
        return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, betas=(0.9, 0.999), eps=1e-8):
        return cls(m=np.zeros(n), v=np.zeros(n), betas=tuple(betas), eps=eps)


def adam_step(theta, grad, state: AdamState, lr):
    """In-place bias-corrected Adam update of ``theta``; returns ``theta``.

    Uses the folded form lr_t * m / (sqrt(v) + eps_t) with
    lr_t = lr sqrt(1 - b2^k) / (1 - b1^k) and eps_t = eps sqrt(1 - b2^k),
    which equals the textbook update and needs a single scratch buffer.
    """
    if state.m.shape != theta.shape or grad.shape != theta.shape:
        raise ValueError("Adam state / gradient do not match parameter vector")
    b1, b2 = state.betas
    state.step += 1
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * (grad * grad)
    c2 = np.sqrt(1.0 - b2 ** state.step)
    lr_t = lr * c2 / (1.0 - b1 ** state.step)
    buf = np.sqrt(state.v)
    buf += state.eps * c2
    np.divide(state.m, buf, out=buf)
    buf *= lr_t
    theta -= buf
    return theta
