"""Training loop: bridge noising, DAN, noise-matching loss and gated image-consistency loss."""

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import bridge
from .bridge import BridgeCoefficients
from .codec import LinearCodec, decode, encode
from .data import random_hflip
from .denoiser import AdamState, Denoiser, adam_step
from .schedule import Schedule
from .tensor import Rng, as_tensor

log = logging.getLogger(__name__)

# child-stream keys of the master seed
STREAM_INIT = 1
STREAM_TRAIN = 2
STREAM_SAMPLE = 3
STREAM_EVAL = 4


@dataclass(frozen=True)
class TrainConfig:
    omega1: float = 1.0
    omega2: float = 0.1
    batch_size: int = 2
    grad_accum: int = 8
    n_iter: int = 5000
    lr: float = 1e-3
    warmup: int = 100
    ic_m_threshold: float = 0.2    # IC weight stays below the ELBO weight for every open t
    use_dan: bool = True
    hflip: bool = True
    checkpoint_every: int = 1000
    clip_norm: float = 1.0      # global gradient-norm ceiling; 0 disables
    seed: int = 0

    def __post_init__(self):
        if not self.omega1 > 0:
            raise ValueError("omega1 must be > 0")
        if self.omega2 < 0:
            raise ValueError("omega2 must be >= 0")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("batch_size and grad_accum must be >= 1")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")


@dataclass
class TrainLogRecord:
    iteration: int
    elbo_loss: float
    ic_loss: float
    total_loss: float
    wall_ms: float
    grad_norm: float = float("nan")


@dataclass
class TrainState:
    schedule: Schedule
    bc: BridgeCoefficients
    codec: LinearCodec
    model: Denoiser
    adam: AdamState
    config: TrainConfig
    task: str = "depth"
    iteration: int = 0
    history: list = field(default_factory=list)


def elbo_loss(eps, eps_hat) -> float:
    """Noise-matching objective: mean squared error over all elements."""
    eps, eps_hat = as_tensor(eps), as_tensor(eps_hat)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {eps.shape} vs {eps_hat.shape}")
    return float(np.mean((eps - eps_hat) ** 2))


def ic_loss(codec: LinearCodec, z0_hat, y) -> float:
    """Image-space MSE between the decoded latent prediction and the target map."""
    pred = decode(codec, z0_hat)
    y = as_tensor(y)
    if pred.shape != y.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {y.shape}")
    return float(np.mean((pred - y) ** 2))


def composite_loss_and_grad(model: Denoiser, bc: BridgeCoefficients, codec: LinearCodec,
                            x, y, t, eps, cfg: TrainConfig, decode_adjoint=None):
    """Loss parts and d(loss)/d(theta) for one micro-batch with fixed (t, eps).

    ``decode_adjoint`` overrides the codec transpose (used only by the
    gradient-check negative control).
    """
    x, y = as_tensor(x), as_tensor(y)
    B = x.shape[0]
    t = np.asarray(t, dtype=np.int64).reshape(B)
    zT = encode(codec, x)
    z0 = encode(codec, y)
    z_t, eps = bridge.forward_sample(bc, t, z0, zT, eps=eps)
    net_in = bridge.dan_normalize(bc, t, z_t, zT) if cfg.use_dan else z_t
    eps_hat = model.forward(net_in, zT, t)

    resid = eps_hat - eps
    l_elbo = float(np.mean(resid ** 2))
    upstream = cfg.omega1 * 2.0 * resid / resid.size

    l_ic = 0.0
    gate = bc.m[t] >= cfg.ic_m_threshold
    if cfg.omega2 > 0 and np.any(gate):
        idx = np.nonzero(gate)[0]
        z0_hat = bridge.recover_z0(bc, t[idx], z_t[idx], zT[idx], eps_hat[idx])
        diff = decode(codec, z0_hat) - y[idx]
        per_pixel = diff[0].size
        l_ic = float(np.sum(diff ** 2) / per_pixel / B)
        d_img = 2.0 * diff / per_pixel / B
        adjoint = codec.decode_adjoint if decode_adjoint is None else decode_adjoint
        d_z0 = adjoint(d_img)
        # z0_hat = (z_t - n zT - sbar eps_hat) / m
        amp = (bc.sbar[t[idx]] / bc.m[t[idx]]).reshape((-1,) + (1,) * (d_z0.ndim - 1))
        upstream[idx] += cfg.omega2 * (-amp) * d_z0

    total = cfg.omega1 * l_elbo + cfg.omega2 * l_ic
    grad = model.backward(upstream)
    return {"elbo": l_elbo, "ic": l_ic, "total": total}, grad


def _draw_microbatch(state: TrainState, X, Y, rng: Rng):
    cfg = state.config
    idx = rng.integers(0, X.shape[0], size=cfg.batch_size)
    xs, ys = [], []
    for i in idx:
        x, y = X[i], Y[i]
        if cfg.hflip:
            x, y = random_hflip(x, y, state.task, rng)
        xs.append(x)
        ys.append(y)
    t = rng.integers(1, state.bc.T, size=cfg.batch_size)
    eps = rng.randn((cfg.batch_size,) + state.model.latent_shape)
    return np.stack(xs), np.stack(ys), t, eps


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """Linear warmup over ``cfg.warmup`` updates, constant afterwards."""
    if cfg.warmup <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (iteration + 1) / cfg.warmup)


def train_step(state: TrainState, X, Y) -> TrainLogRecord:
    """One optimizer update over ``grad_accum`` micro-batches drawn from ``(X, Y)``.

    All randomness for the update comes from the stream keyed by the
    iteration number, so a resumed run reproduces an uninterrupted one.
    The micro-batches share one size, so the mean of their losses is the
    loss of their concatenation; they are evaluated in a single fused pass.
    """
    cfg = state.config
    start = time.perf_counter()
    rng = Rng(cfg.seed).spawn(STREAM_TRAIN).spawn(state.iteration)
    draws = [_draw_microbatch(state, X, Y, rng) for _ in range(cfg.grad_accum)]
    x, y, t, eps = (np.concatenate(parts) for parts in zip(*draws))
    loss, grad = composite_loss_and_grad(state.model, state.bc, state.codec, x, y, t, eps, cfg)
    if not np.isfinite(loss["total"]):
        raise FloatingPointError(
            f"non-finite loss at iteration {state.iteration}, t={t.tolist()}, parts={loss}")
    grad_norm = float(np.sqrt(np.dot(grad, grad)))
    if cfg.clip_norm and grad_norm > cfg.clip_norm:
        grad *= cfg.clip_norm / grad_norm
    adam_step(state.model.theta, grad, state.adam, learning_rate(cfg, state.iteration))
    state.iteration += 1
    rec = TrainLogRecord(iteration=state.iteration, elbo_loss=loss["elbo"], ic_loss=loss["ic"],
                         total_loss=loss["total"],
                         wall_ms=1000.0 * (time.perf_counter() - start), grad_norm=grad_norm)
    state.history.append(rec)
    return rec


def init_state(config: TrainConfig, image_shape, task="depth", T=1000, beta_min=1e-4,
               beta_max=0.02, factor=2, width=512, n_blocks=4, temb_dim=64) -> TrainState:
    from .schedule import make_vp_schedule

    schedule = make_vp_schedule(T, beta_min, beta_max)
    bc = bridge.bridge_coeffs(schedule)
    codec = LinearCodec(factor=factor, image_shape=tuple(image_shape),
                        random_state=config.seed).fit()
    model = Denoiser(codec.latent_shape_, width=width, n_blocks=n_blocks, temb_dim=temb_dim)
    model.T = schedule.T
    model.init_params(Rng(config.seed).spawn(STREAM_INIT))
    return TrainState(schedule=schedule, bc=bc, codec=codec, model=model,
                      adam=AdamState.zeros(model.n_params), config=config, task=task)


def train(state: TrainState, X, Y, n_iter=None, checkpoint_path=None, log_path=None):
    """Run ``train_step`` until ``n_iter`` total updates, checkpointing periodically."""
    from .checkpoint import save_checkpoint

    cfg = state.config
    n_iter = cfg.n_iter if n_iter is None else n_iter
    X, Y = as_tensor(X), as_tensor(Y)
    writer = None
    log_file = None
    if log_path is not None:
        # a resumed run extends its log, a fresh run starts a new one
        log_file = open(log_path, "a" if state.iteration > 0 else "w", newline="")
        writer = csv.writer(log_file)
        if log_file.tell() == 0:
            writer.writerow(["iteration", "elbo", "ic", "total", "wall_ms"])
    try:
        while state.iteration < n_iter:
            rec = train_step(state, X, Y)
            if writer is not None:
                writer.writerow([rec.iteration, f"{rec.elbo_loss:.10g}", f"{rec.ic_loss:.10g}",
                                 f"{rec.total_loss:.10g}", f"{rec.wall_ms:.3f}"])
            if rec.iteration % 500 == 0:
                log.info("iter %d elbo %.4f ic %.4f", rec.iteration, rec.elbo_loss, rec.ic_loss)
            if checkpoint_path is not None and cfg.checkpoint_every and \
                    rec.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, state)
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    return state


def validation_elbo(state: TrainState, X, Y, draws=4, seed=0) -> float:
    """Mean noise-matching loss on held-out pairs with a fixed (t, eps) stream.

    The stream depends only on ``seed`` and the data shapes, so two models are
    scored on identical draws.
    """
    rng = Rng(seed).spawn(STREAM_EVAL)
    X, Y = as_tensor(X), as_tensor(Y)
    zT = encode(state.codec, X)
    z0 = encode(state.codec, Y)
    total, count = 0.0, 0
    for _ in range(draws):
        t = rng.integers(1, state.bc.T, size=X.shape[0])
        eps = rng.randn(z0.shape)
        z_t, _ = bridge.forward_sample(state.bc, t, z0, zT, eps=eps)
        net_in = bridge.dan_normalize(state.bc, t, z_t, zT) if state.config.use_dan else z_t
        for lo in range(0, X.shape[0], 256):
            sl = slice(lo, lo + 256)
            eps_hat = state.model.forward(net_in[sl], zT[sl], t[sl], retain=False)
            total += float(np.sum((eps_hat - eps[sl]) ** 2))
            count += eps_hat.size
    return total / count

