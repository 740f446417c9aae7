import math

import numpy as np
import pytest
import torch

from ticlab.exceptions import ConfigurationError, UsageError
from ticlab.latent_codec import LatentCodec, load_png, roundtrip_psnr, save_png
from ticlab.synth_data import make_split


def block_oracle(x):
    """space_to_depth by explicit indexing: channel 2*di + dj holds x[2i+di, 2j+dj]."""
    c, h, w = x.shape
    out = np.zeros((4 * c, h // 2, w // 2))
    for k in range(c):
        for di in range(2):
            for dj in range(2):
                out[4 * k + 2 * di + dj] = x[k, di::2, dj::2]
    return out


@pytest.fixture(scope="module")
def small_set():
    return make_split(7, 48, 6)


def test_identity_encode_is_identity(rng):
    x = rng.random((1, 32, 32)).astype(np.float32)
    codec = LatentCodec("identity").fit_statistics(x[None])
    z = codec.encode(x)
    assert z.dtype == torch.float64
    assert np.array_equal(z.numpy(), x.astype(np.float64))
    assert np.array_equal(codec.decode(z), x)


def test_space_to_depth_layout_matches_oracle(rng):
    x = rng.random((1, 32, 32)).astype(np.float32)
    z = LatentCodec().encode(x)
    assert tuple(z.shape) == (4, 16, 16)
    assert np.array_equal(z.numpy(), block_oracle(x))


def test_space_to_depth_roundtrip_bit_exact(small_set):
    images = small_set.images("train")
    codec = LatentCodec().fit_statistics(images)
    assert math.log2(codec.scale) == round(math.log2(codec.scale))
    assert codec.shift == float(np.float32(codec.shift))
    z = codec.encode(images)
    assert abs(float(z.mean())) < 0.05 and 0.5 < float(z.std()) < 2.0
    assert codec.decode(z).tobytes() == np.asarray(images).tobytes()


def test_encode_deterministic(small_set):
    images = small_set.images("test")
    codec = LatentCodec().fit_statistics(images)
    assert torch.equal(codec.encode(images), codec.encode(images))


@pytest.mark.parametrize("mode", ["identity", "space_to_depth"])
def test_exact_codecs_hit_psnr_cap(small_set, mode):
    codec = LatentCodec(mode).fit_statistics(small_set.images("train"))
    stats = roundtrip_psnr(codec, small_set.images("test"))
    assert stats["per_image_db"] == [99.0] * 6
    assert stats["mean_db"] == stats["min_db"] == 99.0


def test_trained_autoencoder_is_lossy_but_finite(small_set):
    codec = LatentCodec("trained_autoencoder")
    codec.train_autoencoder(small_set.images("train"), steps=60)
    stats = roundtrip_psnr(codec, small_set.images("test"))
    assert np.isfinite(stats["mean_db"])
    assert 5.0 < stats["min_db"] <= stats["mean_db"] < 99.0
    out = codec.decode(codec.encode(small_set.images("test")))
    assert out.dtype == np.float32 and out.min() >= 0 and out.max() <= 1


def test_train_autoencoder_wrong_mode():
    with pytest.raises(UsageError):
        LatentCodec().train_autoencoder(np.zeros((2, 1, 32, 32)))


def test_shape_errors():
    codec = LatentCodec()
    with pytest.raises(ConfigurationError):
        codec.encode(np.zeros((1, 30, 32)))
    with pytest.raises(ConfigurationError):
        codec.decode(torch.zeros(4, 8, 8))
    with pytest.raises(ConfigurationError):
        LatentCodec("space_to_depth", (1, 31, 32))
    with pytest.raises(ConfigurationError):
        LatentCodec("wavelet")


def test_roundtrip_psnr_empty():
    with pytest.raises(UsageError):
        roundtrip_psnr(LatentCodec(), [])


def test_constant_set_cannot_be_standardized():
    with pytest.raises(UsageError):
        LatentCodec().fit_statistics(np.full((3, 1, 32, 32), 0.5, np.float32))


@pytest.mark.parametrize("mode", ["space_to_depth", "trained_autoencoder"])
def test_save_load_roundtrip(tmp_path, small_set, mode):
    codec = LatentCodec(mode)
    if mode == "trained_autoencoder":
        codec.train_autoencoder(small_set.images("train"), steps=5)
    else:
        codec.fit_statistics(small_set.images("train"))
    codec.save(tmp_path)
    back = LatentCodec.load(tmp_path)
    x = small_set.images("test")
    assert back.config() == codec.config()
    assert torch.equal(back.encode(x), codec.encode(x))


def test_png_roundtrip(tmp_path, small_set):
    img = small_set.images("test")[0]
    save_png(tmp_path / "a.png", img)
    assert np.array_equal(load_png(tmp_path / "a.png"), img)
    rgb = np.stack([img[0], 1 - img[0], img[0]])
    save_png(tmp_path / "b.png", rgb)
    assert load_png(tmp_path / "b.png").shape == (3, 32, 32)
