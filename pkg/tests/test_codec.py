import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from dpbridge.codec import LinearCodec, decode, encode
from dpbridge.tensor import Rng


@pytest.fixture(scope="module")
def codec():
    return LinearCodec(factor=2, image_shape=(8, 6, 3)).fit()


def test_shapes(codec):
    x = np.zeros((5, 8, 6, 3))
    assert encode(codec, x).shape == (5, 4, 3, 3)
    assert decode(codec, encode(codec, x)).shape == x.shape
    assert codec.latent_shape_ == (4, 3, 3)


def test_block_constant_fixed_point(codec):
    z = np.random.default_rng(0).normal(size=(4, 3, 3))
    img = np.repeat(np.repeat(z, 2, axis=0), 2, axis=1)
    assert np.max(np.abs(codec.project(img) - img)) < 1e-12


def test_decode_zero(codec):
    assert not np.any(decode(codec, np.zeros((4, 3, 3))))


def test_encode_is_scaled_block_mean(codec):
    img = np.arange(8 * 6 * 3, dtype=float).reshape(8, 6, 3)
    z = encode(codec, img)
    want = img[2:4, 4:6, 1].mean() * codec.scale_
    assert z[1, 2, 1] == pytest.approx(want, rel=1e-14)


def test_projection_idempotent(codec):
    img = np.random.default_rng(1).normal(size=(3, 8, 6, 3))
    p = codec.project(img)
    assert np.max(np.abs(codec.project(p) - p)) < 1e-10
    # orthogonal: the residual is orthogonal to the projection
    assert abs(np.sum((img - p) * p)) < 1e-9


@given(seed=st.integers(0, 2 ** 31), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linearity(codec, seed, a, b):
    r = np.random.default_rng(seed)
    x1, x2 = r.normal(size=(2, 8, 6, 3))
    lhs = encode(codec, a * x1 + b * x2)
    rhs = a * encode(codec, x1) + b * encode(codec, x2)
    assert np.allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_decode_adjoint_is_transpose(codec):
    r = np.random.default_rng(2)
    z = r.normal(size=(4, 3, 3))
    g = r.normal(size=(8, 6, 3))
    assert np.sum(decode(codec, z) * g) == pytest.approx(np.sum(z * codec.decode_adjoint(g)),
                                                         rel=1e-12)


def test_white_noise_rms_preserved():
    c = LinearCodec(factor=2, image_shape=(32, 32, 1), random_state=5).fit()
    noise = Rng(123).randn((10_000, 32, 32, 1))
    rms = np.sqrt(np.mean(encode(c, noise) ** 2))
    assert abs(rms - 1.0) < 0.02
    # a block mean of 4 iid unit normals has variance 1/4
    assert c.scale_ == pytest.approx(2.0, rel=0.01)


def test_errors():
    with pytest.raises(ValueError, match="not divisible"):
        LinearCodec(factor=3, image_shape=(8, 8, 1)).fit()
    with pytest.raises(ValueError, match="image_shape is required"):
        LinearCodec().fit()
    c = LinearCodec(image_shape=(4, 4, 1)).fit()
    with pytest.raises(ValueError, match="does not match"):
        encode(c, np.zeros((4, 6, 1)))
    with pytest.raises(ValueError, match="does not match"):
        decode(c, np.zeros((4, 4, 1)))


def test_fit_from_data_and_sklearn_api():
    X = np.zeros((2, 4, 4, 1))
    c = LinearCodec(n_calibration=100).fit(X)
    assert c.image_shape_ == (4, 4, 1)
    assert clone(c).get_params() == c.get_params()
    assert np.array_equal(c.fit_transform(X), c.transform(X))
    r = LinearCodec.from_params(2, (4, 4, 1), c.scale_)
    assert np.array_equal(r.transform(X + 1), c.transform(X + 1))
