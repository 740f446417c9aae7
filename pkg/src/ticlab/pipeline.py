"""Inversion, controlled sampling, reconstruction, editing and error traces.

Latents are float64 torch tensors shaped (C, H, W) or (B, C, H, W); a batch
runs as independent images sharing every step.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .attention_control import (
    CacheRecorder,
    ControllerPolicy,
    EditMask,
    KVCache,
    LiveKVSource,
    PolicyKind,
    SamplingController,
    aggregate_cross_attention,
    build_edit_mask,
)
from .denoiser import cfg_combine, predict_noise
from .exceptions import ConfigurationError, UsageError
from .schedule import ddim_invert_step, ddim_sample_step, step_error_constant
from .synth_data import null_prompt, tokenize
from .tensor_io import load_tensor, save_tensor


@dataclass
class InversionResult:
    """Pivotal trajectory ``z*_0..z*_T``, noise ``eps*_0..eps*_{T-1}`` and KV cache."""

    trajectory: list
    eps: list
    cache: KVCache | None
    cond: list
    seconds: float = 0.0

    @property
    def T(self):
        return len(self.eps)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for t, z in enumerate(self.trajectory):
            save_tensor(directory / f"z_t{t}.tns", z)
        for t, e in enumerate(self.eps):
            save_tensor(directory / f"eps_t{t}.tns", e)
        if self.cache is not None:
            self.cache.save(directory / "cache")
        manifest = {"T": self.T, "cond": list(self.cond), "has_cache": self.cache is not None}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        T = manifest["T"]
        traj = [torch.from_numpy(load_tensor(directory / f"z_t{t}.tns")) for t in range(T + 1)]
        eps = [torch.from_numpy(load_tensor(directory / f"eps_t{t}.tns")) for t in range(T)]
        cache = KVCache.load(directory / "cache") if manifest["has_cache"] else None
        return cls(traj, eps, cache, manifest["cond"])


@dataclass
class SamplerRun:
    """Settings of one sampling pass (deterministic given its inputs)."""

    policy: ControllerPolicy = field(default_factory=lambda: ControllerPolicy(PolicyKind.NAIVE))
    cfg_scale: float = 1.0
    cond: list | None = None
    layout: np.ndarray | None = None

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ConfigurationError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


@dataclass
class SampleRecord:
    z0: torch.Tensor
    latents: dict  # t -> z_t for t = T..0
    eps: dict  # t -> eps_t used at step t
    gated: dict  # t -> bool
    masks: dict  # t -> EditMask
    seconds: float = 0.0


def _cond_ids(cond):
    return null_prompt() if cond is None else list(np.asarray(cond).tolist())


INVERSION_LEVELS = ("next", "current")


def invert_latent(z0, model, schedule=None, cond=None, record_cache=True, noise_level="next"):
    """DDIM-invert ``z0`` for T steps, caching self-attention K/V at each step.

    The pass with index ``t`` (0..T-1) predicts ``eps*_t`` from ``z*_t`` with
    ``cond`` (null prompt by default) and yields ``z*_{t+1}``. With
    ``noise_level="next"`` the network is queried at the noise level of
    ``t + 1``, the level the step moves to (and the level of the sampling
    step that later reads this pass's K/V); ``"current"`` queries level
    ``t`` instead, which for ``t = 0`` is the untrained clean level.
    """
    if noise_level not in INVERSION_LEVELS:
        raise ConfigurationError(f"noise_level must be one of {INVERSION_LEVELS}")
    schedule = schedule or model.schedule
    _check_schedule(model, schedule)
    z = torch.as_tensor(z0).to(torch.float64)
    T = schedule.T
    num_layers = getattr(model, "num_attention_layers", 0)
    cache = None
    if record_cache:
        meta = {"schedule": schedule.digest(), "cond": _cond_ids(cond), "noise_level": noise_level}
        if hasattr(model, "fingerprint"):
            meta["model"] = model.fingerprint()
        cache = KVCache(T, range(num_layers), meta)
    traj, eps_list = [z], []
    start = time.perf_counter()
    for t in range(T):
        recorder = CacheRecorder(cache, t) if record_cache and num_layers else None
        level = t + 1 if noise_level == "next" else t
        eps, captured = predict_noise(model, z, level, cond, controller=recorder, branch="inversion", capture=False)
        if recorder is not None:
            cache.record_cross(t, captured.cross_maps)
        eps_list.append(eps)
        z = ddim_invert_step(schedule, z, eps, t + 1)
        traj.append(z)
    if cache is not None:
        cache.freeze()
    return InversionResult(traj, eps_list, cache, _cond_ids(cond), time.perf_counter() - start)


def invert(image, model, codec, schedule=None, cond=None, noise_level="next"):
    """Encode ``image`` and invert its latent."""
    return invert_latent(codec.encode(image), model, schedule, cond, noise_level=noise_level)


def _check_schedule(model, schedule):
    if schedule != model.schedule:
        raise ConfigurationError("schedule differs from the model's schedule")


def _mask_for_step(model, z, t, run, controller_policy, captured_maps=None):
    policy = controller_policy
    if policy.fixed_mask is not None:
        return build_fixed_mask(policy.fixed_mask, z)
    if captured_maps is None:
        _, probe = predict_noise(model, z, t, run.cond, layout=run.layout, capture=False)
        captured_maps = probe.cross_maps
    agg = aggregate_cross_attention(captured_maps, policy.resolution)
    return build_edit_mask(agg, policy.token_indices, policy.threshold, step=t)


def build_fixed_mask(mask, z):
    return EditMask(np.asarray(mask).astype(bool), token_indices=(), threshold=None)


def sample(inversion, model, schedule=None, run=None):
    """Sample from ``z_T = z*_T`` under ``run.policy``.

    Sampling step ``t`` (T..1) reads the inversion features recorded at
    ``t - 1``. With ``cfg_scale != 1`` the unconditional (null prompt) and
    conditional branches are combined by classifier-free guidance; the
    controller is applied to the unconditional branch too unless
    ``policy.inject_uncond`` is false.
    """
    schedule = schedule or model.schedule
    _check_schedule(model, schedule)
    run = run or SamplerRun()
    policy = run.policy
    T = schedule.T
    if inversion.T != T:
        raise ConfigurationError(f"inversion has T={inversion.T}, schedule T={T}")
    num_layers = getattr(model, "num_attention_layers", 0)
    policy.validate(T, max(num_layers, 1))
    if policy.kind in (PolicyKind.TIC, PolicyKind.CONCAT, PolicyKind.MASK_GUIDED) and num_layers:
        if inversion.cache is None or not inversion.cache.is_complete:
            raise UsageError("policy needs a complete KV cache from inversion")

    live = LiveKVSource() if policy.kind is PolicyKind.RECON_QUERY else None
    source = live if live is not None else (inversion.cache.lookup if inversion.cache is not None else None)
    controller = SamplingController(policy, source, num_layers) if num_layers else None

    z = inversion.trajectory[-1].clone()
    z_recon = z.clone()
    record = SampleRecord(None, {T: z}, {}, {}, {})
    start = time.perf_counter()
    for t in range(T, 0, -1):
        progress = T - t
        gated = controller is not None and controller.step_gated(t, progress)
        mask = None
        if gated and policy.kind is PolicyKind.MASK_GUIDED:
            mask = _mask_for_step(model, z, t, run, policy)
            record.masks[t] = mask
        if live is not None:
            # naive reconstruction branch with the null prompt; serves live K/V
            eps_r, _ = predict_noise(model, z_recon, t, None, controller=_LiveHook(live), capture=False)
        if controller is not None:
            controller.begin_step(t, progress, None if mask is None else mask.values)
        eps = _guided_noise(model, z, t, run, controller)
        if live is not None:
            z_recon = ddim_sample_step(schedule, z_recon, eps_r, t)
        record.eps[t] = eps
        record.gated[t] = bool(gated)
        z = ddim_sample_step(schedule, z, eps, t)
        record.latents[t - 1] = z
    record.z0 = z
    record.seconds = time.perf_counter() - start
    return record


class _LiveHook:
    def __init__(self, live):
        self.live = live

    def self_attention(self, layer, q, k, v):
        return self.live.self_attention(layer, q, k, v)


def _guided_noise(model, z, t, run, controller):
    w = run.cfg_scale
    cond_ctrl = controller
    eps_c, _ = predict_noise(model, z, t, run.cond, controller=cond_ctrl, layout=run.layout, capture=False)
    if w == 1:
        return eps_c
    unc_ctrl = controller if run.policy.inject_uncond else None
    eps_u, _ = predict_noise(model, z, t, None, controller=unc_ctrl, layout=run.layout, capture=False)
    return cfg_combine(eps_u, eps_c, w)


def epsilon_replay(inversion, schedule):
    """Sample by feeding step ``t`` the cached ``eps*_{t-1}``: inverts the inversion exactly."""
    z = inversion.trajectory[-1]
    for t in range(schedule.T, 0, -1):
        z = ddim_sample_step(schedule, z, inversion.eps[t - 1], t)
    return z


def _per_image(images):
    images = np.asarray(images)
    return images if images.ndim == 4 else images[None]


@dataclass
class ReconstructionResult:
    images: np.ndarray
    psnr: list
    ssim: list
    seconds: float
    z0: torch.Tensor


def reconstruct(image, model, codec, policy=None, schedule=None, inversion=None):
    """Invert then sample with the null prompt and ``w = 1``, decode, score.

    ``policy`` may be ``"replay"`` for cached-noise replay. Accepts a single
    image or a batch; per-image PSNR/SSIM are reported.
    """
    schedule = schedule or model.schedule
    start = time.perf_counter()
    if inversion is None:
        inversion = invert(image, model, codec, schedule)
    if isinstance(policy, str) and policy == "replay":
        z0 = epsilon_replay(inversion, schedule)
    else:
        policy = policy or ControllerPolicy(PolicyKind.NAIVE)
        z0 = sample(inversion, model, schedule, SamplerRun(policy, 1.0, None)).z0
    out = codec.decode(z0)
    seconds = time.perf_counter() - start
    src, rec = _per_image(image), _per_image(out)
    return ReconstructionResult(
        out,
        [metrics.psnr(r, s) for r, s in zip(rec, src)],
        [metrics.ssim(r, s) for r, s in zip(rec, src)],
        seconds,
        z0,
    )


def edit(image, target_prompt, model, codec, policy=None, cfg_scale=7.5, layout=None, schedule=None, inversion=None):
    """Invert ``image`` with the null prompt and resample under ``target_prompt``.

    Returns ``(edited_image, record)``. ``layout`` (edge map) feeds the
    layout adapter on the editing branch only.
    """
    schedule = schedule or model.schedule
    if isinstance(target_prompt, str):
        target_prompt = tokenize(target_prompt)
    if inversion is None:
        inversion = invert(image, model, codec, schedule)
    policy = policy or ControllerPolicy(PolicyKind.TIC)
    record = sample(inversion, model, schedule, SamplerRun(policy, cfg_scale, list(target_prompt), layout))
    return codec.decode(record.z0), record


def stepwise_error_trace(inversion, model, schedule=None, policy=None, cond=None, cfg_scale=1.0):
    """Per-step reconstruction error, free-running and teacher-forced.

    For each step ``t``: ``C_t``; the free-running ``|z_{t-1} - z*_{t-1}|``
    and ``|eps_t - eps*_{t-1}|``; and, starting from ``z*_t`` instead
    (teacher forcing), the same norms plus the residual
    ``|(z_{t-1} - z*_{t-1}) - C_t (eps_t - eps*_{t-1})|``.
    """
    schedule = schedule or model.schedule
    policy = policy or ControllerPolicy(PolicyKind.NAIVE)
    run = SamplerRun(policy, cfg_scale, cond)
    free = sample(inversion, model, schedule, run)

    num_layers = getattr(model, "num_attention_layers", 0)
    source = inversion.cache.lookup if inversion.cache is not None else None
    controller = SamplingController(policy, source, num_layers) if num_layers else None
    rows = []
    T = schedule.T
    for t in range(T, 0, -1):
        progress = T - t
        z_star, z_star_prev, eps_star = inversion.trajectory[t], inversion.trajectory[t - 1], inversion.eps[t - 1]
        c_t = step_error_constant(schedule, t)
        mask = None
        if controller is not None and policy.kind is PolicyKind.MASK_GUIDED and controller.step_gated(t, progress):
            mask = _mask_for_step(model, z_star, t, run, policy).values
        if policy.kind is PolicyKind.RECON_QUERY:
            # the teacher-forced reconstruction branch coincides with z*_t
            live = LiveKVSource()
            predict_noise(model, z_star, t, None, controller=_LiveHook(live), capture=False)
            controller = SamplingController(policy, live, num_layers)
        if controller is not None:
            controller.begin_step(t, progress, mask)
        eps_tf = _guided_noise(model, z_star, t, run, controller)
        z_tf = ddim_sample_step(schedule, z_star, eps_tf, t)
        residual = (z_tf - z_star_prev) - c_t * (eps_tf - eps_star)
        rows.append(
            {
                "t": t,
                "C_t": c_t,
                "gated": free.gated[t],
                "free_latent_error": float(torch.linalg.vector_norm(free.latents[t - 1] - z_star_prev)),
                "free_eps_error": float(torch.linalg.vector_norm(free.eps[t] - eps_star)),
                "tf_latent_error": float(torch.linalg.vector_norm(z_tf - z_star_prev)),
                "tf_eps_error": float(torch.linalg.vector_norm(eps_tf - eps_star)),
                "tf_residual": float(torch.linalg.vector_norm(residual)),
            }
        )
    return rows


def per_image_eps_error(inversion, record, gated_only=True, steps=None):
    """Per-image sum over steps of ``|eps_t - eps*_{t-1}|``.

    ``steps`` selects the sampling steps explicitly (e.g. another run's gated
    steps, so two policies are compared over the same set); otherwise all
    steps, or only this run's gated ones when ``gated_only``.
    """
    if steps is None:
        steps = [t for t in record.eps if record.gated[t] or not gated_only]
    total = None
    for t in steps:
        eps = record.eps[t]
        diff = (eps - inversion.eps[t - 1]).reshape(eps.shape[0] if eps.ndim == 4 else 1, -1)
        norm = torch.linalg.vector_norm(diff, dim=1)
        total = norm if total is None else total + norm
    return total


def edge_map(image, threshold=0.3):
    """Binary edge map from central-difference gradient magnitude.

    Borders replicate the edge pixels. The magnitude is min-max normalized
    per image and thresholded (``>= threshold``); constant images give zeros.
    """
    if not 0.0 < threshold < 1.0:
        raise UsageError(f"edge threshold must be in (0, 1), got {threshold}")
    x = np.asarray(image, dtype=np.float64)
    if x.ndim not in (2, 3, 4):
        raise UsageError(f"edge_map expects (H, W), (C, H, W) or (B, C, H, W), got {x.shape}")
    ndim = x.ndim
    x = x.reshape((-1,) + x.shape[-3:]) if ndim >= 3 else x[None, None]
    p = np.pad(x, [(0, 0), (0, 0), (1, 1), (1, 1)], mode="edge")
    gx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / 2.0
    gy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / 2.0
    mag = np.sqrt(gx**2 + gy**2).max(axis=1, keepdims=True)  # combine channels
    lo = mag.min(axis=(1, 2, 3), keepdims=True)
    span = mag.max(axis=(1, 2, 3), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = (((mag - lo) / safe >= threshold) & (span > 0)).astype(np.float32)
    if ndim == 2:
        return out[0, 0]
    return out[0] if ndim == 3 else out
