"""Fixed linear codec standing in for a VAE: block-average encode, nearest-upsample decode."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .tensor import Rng, as_tensor


class LinearCodec(TransformerMixin, BaseEstimator):
    """Linear encoder/decoder pair between images and latents.

    ``transform`` encodes ``(..., H, W, C)`` images to ``(..., H/f, W/f, C)``
    latents: block means multiplied by ``scale_``. ``inverse_transform``
    decodes by nearest upsampling divided by ``scale_``, so decode∘encode is
    the orthogonal projection onto block-constant images.

    ``fit`` only needs the image shape. It calibrates ``scale_`` so encoded
    unit-variance white noise has unit RMS.

    Parameters
    ----------
    factor : int
        Downscale factor per spatial axis.
    n_calibration : int
        Number of white-noise images used to estimate ``scale_``.
    image_shape : tuple or None
        ``(H, W, C)``; taken from ``X`` in ``fit`` when None.
    random_state : int
        Seed of the calibration stream.
    """

    def __init__(self, factor=2, n_calibration=10_000, image_shape=None, random_state=0):
        self.factor = factor
        self.n_calibration = n_calibration
        self.image_shape = image_shape
        self.random_state = random_state

    def fit(self, X=None, y=None):
        shape = self.image_shape
        if shape is None:
            if X is None:
                raise ValueError("image_shape is required when fitting without data")
            shape = np.shape(X)[-3:]
        H, W, C = (int(v) for v in shape)
        f = int(self.factor)
        if f < 1 or H % f or W % f:
            raise ValueError(f"image size {H}x{W} not divisible by factor {f}")
        self.image_shape_ = (H, W, C)
        self.latent_shape_ = (H // f, W // f, C)
        rng = Rng(self.random_state, stream=0xC0DEC)
        # chunked so memory stays bounded for large calibration sets
        total, count, left = 0.0, 0, int(self.n_calibration)
        while left > 0:
            k = min(left, 1024)
            noise = rng.randn((k, H, W, C))
            means = _block_mean(noise, f)
            total += float(np.sum(means * means))
            count += means.size
            left -= k
        self.scale_ = 1.0 / np.sqrt(total / count)
        return self

    @classmethod
    def from_params(cls, factor, image_shape, scale):
        """Rebuild a fitted codec from stored parameters without recalibrating."""
        c = cls(factor=int(factor), image_shape=tuple(int(v) for v in image_shape))
        H, W, C = c.image_shape
        if H % c.factor or W % c.factor:
            raise ValueError(f"image size {H}x{W} not divisible by factor {c.factor}")
        c.image_shape_ = (H, W, C)
        c.latent_shape_ = (H // c.factor, W // c.factor, C)
        c.scale_ = float(scale)
        return c

    @property
    def latent_bound(self):
        """Largest latent magnitude of an image with values in [-1, 1]."""
        check_is_fitted(self, "scale_")
        return self.scale_

    def _check(self, x, expected, what):
        check_is_fitted(self, "scale_")
        x = as_tensor(x)
        if x.shape[-3:] != expected:
            raise ValueError(f"{what} shape {x.shape[-3:]} does not match {expected}")
        return x

    def transform(self, X):
        return encode(self, X)

    def inverse_transform(self, Z):
        return decode(self, Z)

    def decode_adjoint(self, G):
        """Transpose of the decoder: block sums divided by ``scale_``."""
        G = self._check(G, self.image_shape_, "image")
        f = int(self.factor)
        return _block_mean(G, f) * (f * f) / self.scale_

    def project(self, X):
        return decode(self, encode(self, X))


def _block_mean(x, f):
    *lead, H, W, C = x.shape
    return x.reshape(*lead, H // f, f, W // f, f, C).mean(axis=(-4, -2))


def encode(c: LinearCodec, img):
    img = c._check(img, c.image_shape_, "image")
    return _block_mean(img, int(c.factor)) * c.scale_


def decode(c: LinearCodec, z):
    z = c._check(z, c.latent_shape_, "latent")
    f = int(c.factor)
    up = np.repeat(np.repeat(z, f, axis=-3), f, axis=-2)
    return up / c.scale_
