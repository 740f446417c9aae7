"""Input checks shared by the estimator and the command line."""

import numbers

import numpy as np

from .exceptions import ConfigurationError, UsageError


def check_images(images, image_shape=None, name="images"):
    """Return ``images`` as a float32 (B, C, H, W) array with values in [0, 1].

    A single (C, H, W) image is promoted to a batch of one.
    """
    try:
        x = np.asarray(images, dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{name} must be numeric arrays") from exc
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise UsageError(f"{name} must have shape (C, H, W) or (B, C, H, W), got {x.shape}")
    if x.shape[0] == 0:
        raise UsageError(f"{name} is empty")
    if image_shape is not None and tuple(x.shape[1:]) != tuple(image_shape):
        raise UsageError(f"{name} shape {x.shape[1:]} does not match {tuple(image_shape)}")
    if not np.isfinite(x).all():
        raise UsageError(f"{name} contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise UsageError(f"{name} values must lie in [0, 1]")
    return x


def check_prompts(prompts, n, length, vocab_size, name="prompts"):
    """Token id matrix (n, length); a single prompt is broadcast to ``n`` rows."""
    p = np.asarray(prompts)
    if p.ndim == 1:
        p = np.broadcast_to(p, (n, p.shape[0]))
    if p.ndim != 2 or p.shape != (n, length):
        raise UsageError(f"{name} must have shape ({n}, {length}), got {p.shape}")
    if not np.issubdtype(p.dtype, np.integer):
        raise UsageError(f"{name} must hold integer token ids")
    if p.min() < 0 or p.max() >= vocab_size:
        raise UsageError(f"{name} hold ids outside the vocabulary of {vocab_size}")
    return np.ascontiguousarray(p, dtype=np.int64)


def check_int(value, name, low=None, high=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ConfigurationError(f"{name} must be an integer, got {value!r}")
    if low is not None and value < low:
        raise ConfigurationError(f"{name} must be >= {low}, got {value}")
    if high is not None and value > high:
        raise ConfigurationError(f"{name} must be <= {high}, got {value}")
    return int(value)


def check_float(value, name, low=None, high=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ConfigurationError(f"{name} must be a finite number, got {value!r}")
    if low is not None and value < low:
        raise ConfigurationError(f"{name} must be >= {low}, got {value}")
    if high is not None and value > high:
        raise ConfigurationError(f"{name} must be <= {high}, got {value}")
    return float(value)


def check_choice(value, name, choices):
    if value not in choices:
        raise ConfigurationError(f"{name} must be one of {tuple(choices)}, got {value!r}")
    return value

