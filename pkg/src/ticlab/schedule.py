"""Noise schedule and deterministic DDIM stepping.

All step arithmetic runs in float64. Latents may be numpy arrays or torch
tensors; the result has the same container type, promoted to float64.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import ConfigurationError, NumericError, UsageError


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients plus the inference timestep map.

    Attributes:
        num_train_steps: number of training noise levels N.
        beta_start, beta_end: endpoints of the scaled-linear beta ramp.
        alpha_bar: float64 array of length N + 1, ``alpha_bar[0] == 1``.
        num_inference_steps: T.
        timestep_map: int array of length T + 1 mapping inference index t to
            training index, ``timestep_map[0] == 0``.
    """

    num_train_steps: int
    beta_start: float
    beta_end: float
    alpha_bar: np.ndarray = field(repr=False)
    num_inference_steps: int
    timestep_map: np.ndarray = field(repr=False)

    @property
    def T(self):
        return self.num_inference_steps

    def params(self):
        return {
            "num_train_steps": self.num_train_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "num_inference_steps": self.num_inference_steps,
        }

    def with_steps(self, num_inference_steps):
        """Same training schedule with a different inference step count."""
        return make_schedule(self.num_train_steps, self.beta_start, self.beta_end, num_inference_steps)

    def digest(self):
        """Short content hash of the realized tables."""
        h = hashlib.sha256(self.alpha_bar.tobytes())
        h.update(np.asarray(self.timestep_map, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]

    def __hash__(self):
        return hash(self.digest())

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return self.digest() == other.digest()


def make_schedule(num_train_steps=1000, beta_start=0.00085, beta_end=0.012, T=50):
    """Scaled-linear betas with a leading-spaced inference map.

    ``beta_i = (sqrt(beta_start) + (i-1)/(N-1) * (sqrt(beta_end) - sqrt(beta_start)))**2``
    for ``i = 1..N``; ``alpha_bar[i] = prod_{j<=i} (1 - beta_j)`` and
    ``timestep_map[t] = round(t * N / T)``.
    """
    if not isinstance(num_train_steps, (int, np.integer)) or not isinstance(T, (int, np.integer)):
        raise ConfigurationError("num_train_steps and T must be integers")
    if T < 1 or num_train_steps < T:
        raise ConfigurationError(f"need num_train_steps >= T >= 1, got N={num_train_steps}, T={T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")

    n = int(num_train_steps)
    if n == 1:
        sqrt_betas = np.array([math.sqrt(beta_start)])
    else:
        sqrt_betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), n, dtype=np.float64)
    betas = sqrt_betas**2
    alpha_bar = np.empty(n + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - betas)

    t = np.arange(int(T) + 1)
    # exact integer rounding of t*N/T (half-up)
    timestep_map = (2 * t * n + int(T)) // (2 * int(T))
    alpha_bar.setflags(write=False)
    timestep_map.setflags(write=False)
    return NoiseSchedule(n, float(beta_start), float(beta_end), alpha_bar, int(T), timestep_map)


def alpha_bar_at(schedule, t):
    """Return ``alpha_bar[timestep_map[t]]`` for inference index ``0 <= t <= T``."""
    if not 0 <= t <= schedule.T:
        raise UsageError(f"timestep index {t} outside 0..{schedule.T}")
    return float(schedule.alpha_bar[schedule.timestep_map[t]])


def _as_f64(x):
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    return np.asarray(x, dtype=np.float64)


def _check_finite(x, name, t):
    ok = torch.isfinite(x).all().item() if isinstance(x, torch.Tensor) else np.isfinite(x).all()
    if not ok:
        raise NumericError(f"non-finite values in {name}", step=t)


def _step_inputs(schedule, z, eps, t):
    if not 1 <= t <= schedule.T:
        raise UsageError(f"step index {t} outside 1..{schedule.T}")
    z, eps = _as_f64(z), _as_f64(eps)
    if tuple(z.shape) != tuple(eps.shape):
        raise UsageError(f"latent shape {tuple(z.shape)} != noise shape {tuple(eps.shape)}")
    _check_finite(z, "latent", t)
    _check_finite(eps, "noise prediction", t)
    return z, eps, alpha_bar_at(schedule, t), alpha_bar_at(schedule, t - 1)


def ddim_sample_step(schedule, z_t, eps_t, t):
    """One deterministic denoising step ``z_t -> z_{t-1}``."""
    z, eps, a_t, a_prev = _step_inputs(schedule, z_t, eps_t, t)
    coef = math.sqrt(1.0 / a_prev - 1.0) - math.sqrt(1.0 / a_t - 1.0)
    # ratio form keeps equal coefficients an exact identity
    return math.sqrt(a_prev / a_t) * z + (math.sqrt(a_prev) * coef) * eps


def ddim_invert_step(schedule, z_prev, eps_prev, t):
    """One inversion step ``z_{t-1} -> z_t`` using the noise predicted at ``t-1``."""
    z, eps, a_t, a_prev = _step_inputs(schedule, z_prev, eps_prev, t)
    coef = math.sqrt(1.0 / a_t - 1.0) - math.sqrt(1.0 / a_prev - 1.0)
    return math.sqrt(a_t / a_prev) * z + (math.sqrt(a_t) * coef) * eps


def step_error_constant(schedule, t):
    """Coefficient ``C_t`` with ``z_{t-1} - z*_{t-1} = C_t (eps_t - eps*_{t-1})``.

    Holds exactly when both steps start from the same latent ``z_t = z*_t``.
    """
    if not 1 <= t <= schedule.T:
        raise UsageError(f"step index {t} outside 1..{schedule.T}")
    a_t, a_prev = alpha_bar_at(schedule, t), alpha_bar_at(schedule, t - 1)
    return math.sqrt(a_prev) * (math.sqrt(1.0 / a_prev - 1.0) - math.sqrt(1.0 / a_t - 1.0))


def schedule_from_alpha_bar(alpha_bar, timestep_map):
    """Build a schedule from an explicit table (tests and hand-made schedules).

    ``alpha_bar`` must start at 1 and be non-increasing; betas are not
    meaningful for such schedules and are recorded as NaN.
    """
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64).copy()
    timestep_map = np.asarray(timestep_map, dtype=np.int64).copy()
    if alpha_bar[0] != 1.0 or np.any(np.diff(alpha_bar) > 0) or np.any(alpha_bar <= 0):
        raise ConfigurationError("alpha_bar must start at 1, be positive and non-increasing")
    if timestep_map[0] != 0 or np.any(np.diff(timestep_map) <= 0) or timestep_map[-1] >= len(alpha_bar):
        raise ConfigurationError("timestep_map must start at 0, increase strictly and stay in range")
    alpha_bar.setflags(write=False)
    timestep_map.setflags(write=False)
    return NoiseSchedule(
        len(alpha_bar) - 1, float("nan"), float("nan"), alpha_bar, len(timestep_map) - 1, timestep_map
    )
