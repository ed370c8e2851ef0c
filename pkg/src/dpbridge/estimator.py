"""scikit-learn style wrapper around training and sampling."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import evaluate_maps
from .sampler import SamplerConfig, accelerated_sample
from .tensor import Rng
from .trainer import STREAM_SAMPLE, TrainConfig, init_state, train


def check_images(X, name="X", channels=None):
    """Validate a stack of images ``(N, H, W, C)``: float64, finite, values in [-1, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[0] == 0:
        raise ValueError(f"{name} must have shape (n_samples, H, W, C), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    if np.any(np.abs(X) > 1.0 + 1e-9):
        raise ValueError(f"{name} values must lie in [-1, 1]")
    if channels is not None and X.shape[-1] != channels:
        raise ValueError(f"{name} has {X.shape[-1]} channels, expected {channels}")
    return np.ascontiguousarray(X)


class DPBridgeRegressor(RegressorMixin, BaseEstimator):
    """Image-to-dense-map regressor trained as a diffusion bridge.

    ``fit`` trains the noise predictor on paired images and maps;
    ``predict`` encodes an image, runs the reverse bridge from it and decodes
    the final estimate. ``score`` is negated AbsRel (depth) or negated mean
    angular error in degrees (normals), so larger is better.

    Parameters
    ----------
    task : {"depth", "normal"}
    T, beta_min, beta_max : schedule
    factor : codec downscale factor
    width, n_blocks, temb_dim : denoiser architecture
    omega1, omega2 : weights of the noise-matching and image-consistency losses
    batch_size, grad_accum, n_iter, lr, warmup, ic_m_threshold, use_dan, hflip,
    clip_norm : training
    n_steps, g_mode, eta, clip_z0 : sampling
    random_state : master seed
    """

    def __init__(self, task="depth", T=1000, beta_min=1e-4, beta_max=0.02, factor=2, width=512,
                 n_blocks=4, temb_dim=64, omega1=1.0, omega2=0.1, batch_size=2, grad_accum=8,
                 n_iter=5000, lr=1e-3, warmup=100, ic_m_threshold=0.2, use_dan=True, hflip=True,
                 clip_norm=1.0, n_steps=50, g_mode="deterministic", eta=1.0, clip_z0=True,
                 random_state=0):
        self.task = task
        self.T = T
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.factor = factor
        self.width = width
        self.n_blocks = n_blocks
        self.temb_dim = temb_dim
        self.omega1 = omega1
        self.omega2 = omega2
        self.batch_size = batch_size
        self.grad_accum = grad_accum
        self.n_iter = n_iter
        self.lr = lr
        self.warmup = warmup
        self.ic_m_threshold = ic_m_threshold
        self.use_dan = use_dan
        self.hflip = hflip
        self.clip_norm = clip_norm
        self.n_steps = n_steps
        self.g_mode = g_mode
        self.eta = eta
        self.clip_z0 = clip_z0
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(omega1=self.omega1, omega2=self.omega2, batch_size=self.batch_size,
                           grad_accum=self.grad_accum, n_iter=self.n_iter, lr=self.lr,
                           warmup=self.warmup, ic_m_threshold=self.ic_m_threshold,
                           use_dan=self.use_dan, hflip=self.hflip, clip_norm=self.clip_norm,
                           seed=self.random_state)

    def fit(self, X, Y, checkpoint_path=None, log_path=None):
        if self.task not in ("depth", "normal"):
            raise ValueError(f"unknown task {self.task!r}")
        X = check_images(X, "X")
        Y = check_images(Y, "Y", channels=1 if self.task == "depth" else 3)
        if X.shape[:3] != Y.shape[:3]:
            raise ValueError(f"X and Y disagree in samples or size: {X.shape} vs {Y.shape}")
        if X.shape[-1] != Y.shape[-1]:
            raise ValueError("image and target must have the same number of channels "
                             "(the bridge connects them in one latent space)")
        state = init_state(self._train_config(), X.shape[1:], self.task, self.T, self.beta_min,
                           self.beta_max, self.factor, self.width, self.n_blocks, self.temb_dim)
        train(state, X, Y, self.n_iter, checkpoint_path, log_path)
        self._set_state(state)
        return self

    def _set_state(self, state):
        self.state_ = state
        self.n_iter_ = state.iteration
        self.image_shape_ = state.codec.image_shape_
        return self

    @classmethod
    def from_checkpoint(cls, path, **sampling):
        state = load_checkpoint(path)
        s, c, m, tc = state.schedule, state.codec, state.model, state.config
        est = cls(task=state.task, T=s.T, beta_min=s.beta_min, beta_max=s.beta_max,
                  factor=c.factor, width=m.width, n_blocks=m.n_blocks, temb_dim=m.temb_dim,
                  omega1=tc.omega1, omega2=tc.omega2, batch_size=tc.batch_size,
                  grad_accum=tc.grad_accum, n_iter=tc.n_iter, lr=tc.lr, warmup=tc.warmup,
                  ic_m_threshold=tc.ic_m_threshold, use_dan=tc.use_dan, hflip=tc.hflip,
                  clip_norm=tc.clip_norm, random_state=tc.seed, **sampling)
        return est._set_state(state)

    def save(self, path):
        check_is_fitted(self, "state_")
        save_checkpoint(path, self.state_)

    def sampler_config(self, **overrides):
        cfg = dict(n_steps=self.n_steps, g_mode=self.g_mode, eta=self.eta, clip_z0=self.clip_z0,
                   use_dan=self.state_.config.use_dan, seed=self.random_state)
        cfg.update(overrides)
        return SamplerConfig(**cfg)

    def predict(self, X, return_latent=False, **sampler_overrides):
        check_is_fitted(self, "state_")
        X = check_images(X, "X", channels=self.image_shape_[-1])
        st = self.state_
        cfg = self.sampler_config(**sampler_overrides)
        rng = Rng(cfg.seed).spawn(STREAM_SAMPLE)
        y_hat, z0_hat = accelerated_sample(st.model, st.bc, st.codec, X, cfg, rng=rng)
        if self.task == "normal":
            norm = np.linalg.norm(y_hat, axis=-1, keepdims=True)
            y_hat = np.divide(y_hat, norm, out=np.zeros_like(y_hat), where=norm > 0)
        return (y_hat, z0_hat) if return_latent else y_hat

    def score(self, X, Y, sample_weight=None):
        metrics = evaluate_maps(self.task, self.predict(X), check_images(Y, "Y"))
        return -metrics["absrel"] if self.task == "depth" else -metrics["mean_angle"]
