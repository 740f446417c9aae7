"""Image <-> latent codecs and PNG I/O.

Images are float32 arrays of shape (C, H, W) or (B, C, H, W) with values in
[0, 1]. Latents are float64 torch tensors.

``space_to_depth`` and ``identity`` are exactly invertible: standardization
uses a float32 shift and a power-of-two scale, so every operation in the
round trip is exact in float64 for float32 inputs.
"""

import json
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .exceptions import ConfigurationError, UsageError
from .metrics import PSNR_CAP_DB, psnr
from .tensor_io import load_tensor, save_tensor

MODES = ("space_to_depth", "identity", "trained_autoencoder")


class _AutoEncoder(nn.Module):
    def __init__(self, in_channels, latent_channels, width=32):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, in_channels, 3, padding=1),
        )


class LatentCodec:
    """Encoder/decoder pair mapping images to standardized latents.

    Args:
        mode: one of ``space_to_depth`` (block 2), ``identity`` or
            ``trained_autoencoder``.
        image_shape: (C, H, W) of accepted images.
        shift, scale: latent standardization ``(x - shift) * scale``.
    """

    def __init__(self, mode="space_to_depth", image_shape=(1, 32, 32), shift=0.0, scale=1.0, autoencoder=None):
        if mode not in MODES:
            raise ConfigurationError(f"unknown codec mode {mode!r}; expected one of {MODES}")
        c, h, w = image_shape
        if mode != "identity" and (h % 2 or w % 2):
            raise ConfigurationError(f"{mode} needs even spatial size, got {image_shape}")
        if mode == "trained_autoencoder" and autoencoder is None:
            autoencoder = _AutoEncoder(c, 4 * c).double()
        self.mode = mode
        self.image_shape = tuple(int(v) for v in image_shape)
        self.shift = float(np.float32(shift)) if mode != "trained_autoencoder" else float(shift)
        self.scale = float(scale)
        self.autoencoder = autoencoder
        if self.autoencoder is not None:
            self.autoencoder.eval()

    @property
    def latent_shape(self):
        c, h, w = self.image_shape
        if self.mode == "identity":
            return (c, h, w)
        return (4 * c, h // 2, w // 2)

    # -- core maps ----------------------------------------------------------
    def _check(self, x, expected, what):
        if tuple(x.shape[-3:]) != tuple(expected) or x.ndim not in (3, 4):
            raise ConfigurationError(f"{what} shape {tuple(x.shape)} does not match {tuple(expected)}")

    def encode(self, image):
        """Map an image (or batch) to its standardized latent, float64."""
        x = torch.as_tensor(np.asarray(image, dtype=np.float32)).to(torch.float64)
        self._check(x, self.image_shape, "image")
        single = x.ndim == 3
        if single:
            x = x[None]
        if self.mode == "identity":
            z = x
        elif self.mode == "space_to_depth":
            z = nn.functional.pixel_unshuffle(x, 2)
        else:
            with torch.no_grad():
                z = self.autoencoder.encoder(x)
        z = (z - self.shift) * self.scale
        return z[0] if single else z

    def decode(self, latent):
        """Map a latent (or batch) back to a float32 image clamped to [0, 1]."""
        z = torch.as_tensor(latent).to(torch.float64)
        self._check(z, self.latent_shape, "latent")
        single = z.ndim == 3
        if single:
            z = z[None]
        z = z / self.scale + self.shift
        if self.mode == "identity":
            x = z
        elif self.mode == "space_to_depth":
            x = nn.functional.pixel_shuffle(z, 2)
        else:
            with torch.no_grad():
                x = self.autoencoder.decoder(z)
        x = x.clamp(0.0, 1.0).to(torch.float32).numpy()
        return x[0] if single else x

    # -- statistics and training ---------------------------------------------
    def fit_statistics(self, images):
        """Set shift/scale so encoded ``images`` are roughly standardized.

        Exact modes keep a float32 shift and a power-of-two scale; the identity
        codec is left untouched so that ``encode`` is literally the identity.
        """
        if self.mode == "identity":
            return self
        saved = self.shift, self.scale
        self.shift, self.scale = 0.0, 1.0
        raw = self.encode(np.asarray(images)).numpy()
        self.shift, self.scale = saved
        mean, std = float(raw.mean()), float(raw.std())
        if std <= 0:
            raise UsageError("cannot standardize a constant image set")
        if self.mode == "space_to_depth":
            self.shift = float(np.float32(mean))
            self.scale = 2.0 ** round(math.log2(1.0 / std))
        else:
            self.shift, self.scale = mean, 1.0 / std
        return self

    def train_autoencoder(self, images, steps=600, batch_size=64, lr=3e-3, seed=0):
        """Fit the lossy autoencoder by pixel MSE, then refresh statistics."""
        if self.mode != "trained_autoencoder":
            raise UsageError("only the trained_autoencoder codec can be trained")
        gen = torch.Generator().manual_seed(seed)
        data = torch.as_tensor(np.asarray(images, dtype=np.float32)).to(torch.float64)
        torch.manual_seed(seed)
        ae = self.autoencoder
        ae.train()
        opt = torch.optim.Adam(ae.parameters(), lr=lr)
        for _ in range(steps):
            idx = torch.randint(0, len(data), (min(batch_size, len(data)),), generator=gen)
            x = data[idx]
            loss = ((ae.decoder(ae.encoder(x)) - x) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        ae.eval()
        return self.fit_statistics(images)

    # -- persistence --------------------------------------------------------
    def config(self):
        return {"mode": self.mode, "image_shape": list(self.image_shape), "shift": self.shift, "scale": self.scale}

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "codec.json").write_text(json.dumps(self.config(), indent=1))
        if self.autoencoder is not None:
            for name, p in self.autoencoder.state_dict().items():
                save_tensor(directory / f"codec_{name}.tns", p)

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        cfg = json.loads((directory / "codec.json").read_text())
        codec = cls(cfg["mode"], tuple(cfg["image_shape"]), cfg["shift"], cfg["scale"])
        if codec.autoencoder is not None:
            state = {
                name: torch.from_numpy(load_tensor(directory / f"codec_{name}.tns"))
                for name in codec.autoencoder.state_dict()
            }
            codec.autoencoder.load_state_dict(state)
            codec.autoencoder.eval()
        codec.shift = cfg["shift"]
        return codec


def roundtrip_psnr(codec, images, cap=PSNR_CAP_DB):
    """Mean/min PSNR of ``decode(encode(x))`` against ``x`` over a set.

    For a lossy codec this is the reconstruction ceiling of the run.
    """
    images = list(images)
    if not images:
        raise UsageError("image set is empty")
    values = [psnr(codec.decode(codec.encode(img)), img, cap=cap) for img in images]
    return {"mean_db": float(np.mean(values)), "min_db": float(np.min(values)), "per_image_db": values}


def load_png(path):
    """Read an 8-bit grayscale or RGB PNG as a float32 (C, H, W) array in [0, 1]."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if "A" in img.mode or img.mode == "P" else "L")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_png(path, image):
    """Write a (C, H, W) or (H, W) image in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)
