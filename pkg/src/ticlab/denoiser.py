"""Noise predictor: a small U-Net with hookable self/cross-attention.

Every self-attention layer carries a stable index ``l`` in forward-pass
order (encoder, bottleneck, decoder). A *hook* object passed to the forward
pass decides how each self-attention layer combines its Q/K/V and may
observe cross-attention probabilities::

    class Hook:
        def self_attention(self, layer, q, k, v): ...   # -> output (B, heads, N, d)
        def cross_attention(self, layer, probs, resolution): ...  # optional

Also here: classifier-free guidance, an analytic Gaussian predictor used
as an exact test double, the denoising trainer, and a finite-difference
gradient check.
"""

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .exceptions import ConfigurationError, NumericError, UsageError
from .schedule import alpha_bar_at, make_schedule
from .synth_data import PAD_ID, PROMPT_LENGTH, VOCAB
from .tensor_io import load_tensor, save_tensor

log = logging.getLogger(__name__)


def attention(q, k, v):
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v`` over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ConfigurationError(f"attention shape mismatch: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    scores = torch.matmul(q * (1.0 / math.sqrt(q.shape[-1])), k.transpose(-1, -2))
    return torch.matmul(scores.softmax(dim=-1), v)


def cfg_combine(eps_uncond, eps_cond, w):
    """Classifier-free guidance, computed as ``cond + (w - 1) (cond - uncond)``.

    ``w == 1`` returns ``eps_cond`` and ``w == 0`` returns ``eps_uncond``
    unchanged.
    """
    if tuple(eps_uncond.shape) != tuple(eps_cond.shape):
        raise UsageError(f"shape mismatch: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    if w < 0:
        raise UsageError(f"guidance scale must be non-negative, got {w}")
    if w == 0:
        return eps_uncond
    return eps_cond + (w - 1.0) * (eps_cond - eps_uncond)


def timestep_embedding(timesteps, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = timesteps.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    latent_size: int = 16
    widths: tuple = (32, 64, 128)
    heads: int = 4
    vocab_size: int = len(VOCAB)
    embed_dim: int = 64
    prompt_length: int = PROMPT_LENGTH
    time_dim: int = 128
    groups: int = 8
    layout_adapter: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3:
            raise ConfigurationError("widths must list three resolutions")
        if self.latent_size % 4:
            raise ConfigurationError("latent_size must be divisible by 4")
        for w in self.widths:
            if w % self.heads or w % self.groups:
                raise ConfigurationError(f"width {w} must divide by heads={self.heads} and groups={self.groups}")


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, layer_index):
        super().__init__()
        self.heads = heads
        self.layer_index = layer_index
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, hook=None):
        q, k, v = (rearrange(f(x), "b n (h d) -> b h n d", h=self.heads) for f in (self.to_q, self.to_k, self.to_v))
        if hook is None:
            # fused kernel for training; inference always goes through a hook
            out = F.scaled_dot_product_attention(q, k, v)
        else:
            out = hook.self_attention(self.layer_index, q, k, v)
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class CrossAttention(nn.Module):
    def __init__(self, dim, context_dim, heads, layer_index):
        super().__init__()
        self.heads = heads
        self.layer_index = layer_index
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context, resolution, hook=None):
        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.to_k(context), "b n (h d) -> b h n d", h=self.heads)
        v = rearrange(self.to_v(context), "b n (h d) -> b h n d", h=self.heads)
        probs = (torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])).softmax(dim=-1)
        if hook is not None and hasattr(hook, "cross_attention"):
            hook.cross_attention(self.layer_index, probs.mean(dim=1), resolution)
        out = torch.matmul(probs, v)
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class TransformerBlock(nn.Module):
    """Self-attention, cross-attention and feed-forward on a feature map."""

    def __init__(self, dim, context_dim, heads, groups, layer_index):
        super().__init__()
        self.norm_in = nn.GroupNorm(groups, dim)
        self.proj_in = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = SelfAttention(dim, heads, layer_index)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = CrossAttention(dim, context_dim, heads, layer_index)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.proj_out = nn.Linear(dim, dim)

    def forward(self, x, context, hook=None):
        b, c, h, w = x.shape
        tokens = self.proj_in(rearrange(self.norm_in(x), "b c h w -> b (h w) c"))
        tokens = tokens + self.attn1(self.norm1(tokens), hook)
        tokens = tokens + self.attn2(self.norm2(tokens), context, h, hook)
        tokens = tokens + self.ff(self.norm3(tokens))
        return x + rearrange(self.proj_out(tokens), "b (h w) c -> b c h w", h=h, w=w)


class LayoutAdapter(nn.Module):
    """Edge-map encoder emitting one residual per encoder resolution.

    Output projections start at zero, so an untrained adapter is inert.
    """

    def __init__(self, widths, hidden=16):
        super().__init__()
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(1, hidden, 3, stride=2, padding=1),
                nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
                nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
            ]
        )
        self.zero_convs = nn.ModuleList([nn.Conv2d(hidden, w, 1) for w in widths])
        for conv in self.zero_convs:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, layout):
        residuals = []
        h = layout
        for conv, zero in zip(self.convs, self.zero_convs):
            h = F.silu(conv(h))
            residuals.append(zero(h))
        return residuals


class ToyDenoiser(nn.Module):
    """U-Net noise predictor over a 16x16 latent grid.

    Self-attention roster (forward order, latent resolution):
    encoder 0 @8, 1 @4; bottleneck 2 @4, 3 @4; decoder 4 @4, 5 @8, 6 @8, 7 @16.
    The 16x16 encoder stage is convolution-only to keep CPU training cheap.
    """

    ROSTER = ((0, 2), (1, 4), (2, 4), (3, 4), (4, 4), (5, 2), (6, 2), (7, 1))  # (layer, downsample factor)

    def __init__(self, config=None, schedule=None):
        super().__init__()
        self.config = config = config or DenoiserConfig()
        self.schedule = schedule or make_schedule()
        c0, c1, c2 = config.widths
        td, g, heads, ctx = config.time_dim, config.groups, config.heads, config.embed_dim

        def block(c, layer):
            return TransformerBlock(c, ctx, heads, g, layer)

        self.time_mlp = nn.Sequential(nn.Linear(64, td), nn.SiLU(), nn.Linear(td, td))
        self.token_embedding = nn.Embedding(config.vocab_size, ctx)
        self.position_embedding = nn.Parameter(torch.randn(config.prompt_length, ctx) * 0.02)
        self.conv_in = nn.Conv2d(config.latent_channels, c0, 3, padding=1)

        self.enc_res = nn.ModuleList([ResBlock(c0, c0, td, g), ResBlock(c0, c1, td, g), ResBlock(c1, c2, td, g)])
        self.enc_attn = nn.ModuleList([block(c1, 0), block(c2, 1)])
        self.downs = nn.ModuleList([nn.Conv2d(c0, c0, 3, stride=2, padding=1), nn.Conv2d(c1, c1, 3, stride=2, padding=1)])
        self.mid_res = ResBlock(c2, c2, td, g)
        self.mid_attn = nn.ModuleList([block(c2, 2), block(c2, 3)])
        self.dec_res = nn.ModuleList(
            [ResBlock(c2 + c2, c2, td, g), ResBlock(c2 + c1, c1, td, g), ResBlock(c1, c1, td, g), ResBlock(c1 + c0, c0, td, g)]
        )
        self.dec_attn = nn.ModuleList([block(c2, 4), block(c1, 5), block(c1, 6), block(c0, 7)])
        self.norm_out = nn.GroupNorm(g, c0)
        self.conv_out = nn.Conv2d(c0, config.latent_channels, 3, padding=1)
        self.layout_adapter = LayoutAdapter((c0, c1, c2)) if config.layout_adapter else None

    @property
    def num_attention_layers(self):
        return len(self.ROSTER)

    def attention_resolutions(self):
        return [self.config.latent_size // f for _, f in self.ROSTER]

    def context(self, tokens):
        return self.token_embedding(tokens) + self.position_embedding[None].to(self.token_embedding.weight.dtype)

    def forward(self, z, timesteps, tokens, hook=None, layout=None):
        """Predict noise for latents ``z`` at training indices ``timesteps``.

        Args:
            z: (B, C, H, W) latents in the model dtype.
            timesteps: (B,) integer training indices.
            tokens: (B, N) token ids.
            hook: optional attention hook (see module docstring).
            layout: optional (B, 1, 2H, 2W) edge map for the layout adapter.
        """
        dtype = self.conv_in.weight.dtype
        temb = self.time_mlp(timestep_embedding(timesteps, 64).to(dtype))
        ctx = self.context(tokens)
        residuals = [0.0, 0.0, 0.0]
        if layout is not None:
            if self.layout_adapter is None:
                raise ConfigurationError("model was built without a layout adapter")
            residuals = self.layout_adapter(layout.to(dtype))

        h0 = self.enc_res[0](self.conv_in(z), temb) + residuals[0]
        h1 = self.enc_res[1](self.downs[0](h0), temb) + residuals[1]
        h1 = self.enc_attn[0](h1, ctx, hook)
        h2 = self.enc_res[2](self.downs[1](h1), temb) + residuals[2]
        h2 = self.enc_attn[1](h2, ctx, hook)

        h = self.mid_res(h2, temb)
        for blk in self.mid_attn:
            h = blk(h, ctx, hook)

        h = self.dec_attn[0](self.dec_res[0](torch.cat([h, h2], 1), temb), ctx, hook)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.dec_attn[1](self.dec_res[1](torch.cat([h, h1], 1), temb), ctx, hook)
        h = self.dec_attn[2](self.dec_res[2](h, temb), ctx, hook)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.dec_attn[3](self.dec_res[3](torch.cat([h, h0], 1), temb), ctx, hook)
        return self.conv_out(F.silu(self.norm_out(h)))

    # -- persistence --------------------------------------------------------
    def save(self, directory, seed=None, extra=None):
        """Write ``manifest.json`` plus one tensor file per parameter group."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        groups = {}
        for name, tensor in self.state_dict().items():
            group = name.split(".")[0]
            groups.setdefault(group, []).append(name)
            save_tensor(directory / f"{name}.tns", tensor)
        manifest = {
            "architecture": asdict(self.config),
            "vocab": list(VOCAB),
            "schedule": self.schedule.params(),
            "seed": seed,
            "dtype": str(self.conv_in.weight.dtype).replace("torch.", ""),
            "parameter_groups": groups,
        }
        if extra:
            manifest.update(extra)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        if not (directory / "manifest.json").exists():
            raise ConfigurationError(f"no checkpoint manifest in {directory}")
        manifest = json.loads((directory / "manifest.json").read_text())
        sched = manifest["schedule"]
        model = cls(
            DenoiserConfig(**manifest["architecture"]),
            make_schedule(sched["num_train_steps"], sched["beta_start"], sched["beta_end"], sched["num_inference_steps"]),
        )
        if manifest.get("dtype") == "float64":
            model.double()
        state = {name: torch.from_numpy(load_tensor(directory / f"{name}.tns")) for name in model.state_dict()}
        model.load_state_dict(state)
        model.eval()
        return model

    def fingerprint(self):
        """Hash of all weights; identifies the model that produced a cache."""
        import hashlib

        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]


class LinearToyHead(nn.Module):
    """Per-pixel linear noise predictor; used to validate the gradient check."""

    def __init__(self, channels=4, schedule=None):
        super().__init__()
        self.schedule = schedule or make_schedule()
        self.proj = nn.Conv2d(channels, channels, 1)

    num_attention_layers = 0

    def forward(self, z, timesteps, tokens, hook=None, layout=None):
        return self.proj(z)


class AnalyticGaussianPredictor:
    """Exact posterior-mean noise predictor for a Gaussian latent prior N(mu, s^2 I).

    With ``D = (1 - a) + a s^2`` (``a`` the cumulative signal coefficient),
    ``eps(z) = sqrt(1 - a) (z - sqrt(a) mu) / D``, which equals
    ``(z - sqrt(a) x0_hat) / sqrt(1 - a)`` with the posterior mean
    ``x0_hat = (mu (1 - a) + sqrt(a) s^2 z) / D`` but stays finite at ``a = 1``.
    """

    num_attention_layers = 0

    def __init__(self, mu, s, schedule):
        if s <= 0:
            raise UsageError("prior scale s must be positive")
        self.mu = mu
        self.s = float(s)
        self.schedule = schedule

    def posterior_mean(self, z, a):
        mu = torch.as_tensor(self.mu, dtype=torch.float64)
        d = (1.0 - a) + a * self.s**2
        return (mu * (1.0 - a) + math.sqrt(a) * self.s**2 * z) / d

    def eps_at(self, z, a):
        mu = torch.as_tensor(self.mu, dtype=torch.float64)
        d = (1.0 - a) + a * self.s**2
        return math.sqrt(1.0 - a) * (z - math.sqrt(a) * mu) / d

    def noise(self, z, t):
        return self.eps_at(torch.as_tensor(z, dtype=torch.float64), alpha_bar_at(self.schedule, t))


def analytic_gaussian_predictor(mu, s, schedule):
    return AnalyticGaussianPredictor(mu, s, schedule)


# -- prediction entry point ---------------------------------------------------


@dataclass
class AttentionFeatures:
    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    layer: int
    t: int
    branch: str


@dataclass
class CrossAttentionMap:
    layer: int
    resolution: int
    probs: torch.Tensor  # (B, positions, tokens), averaged over heads


@dataclass
class Captured:
    features: list = field(default_factory=list)
    cross_maps: list = field(default_factory=list)


class _CaptureHook:
    def __init__(self, controller, t, branch, captured, store_features):
        self.controller = controller
        self.t = t
        self.branch = branch
        self.captured = captured
        self.store_features = store_features

    def self_attention(self, layer, q, k, v):
        if self.store_features:
            self.captured.features.append(AttentionFeatures(q, k, v, layer, self.t, self.branch))
        if self.controller is None:
            out = attention(q, k, v)
        else:
            out = self.controller.self_attention(layer, q, k, v)
        if not torch.isfinite(out).all():
            raise NumericError("non-finite self-attention output", step=self.t, layer=layer)
        return out

    def cross_attention(self, layer, probs, resolution):
        self.captured.cross_maps.append(CrossAttentionMap(layer, resolution, probs))
        if self.controller is not None and hasattr(self.controller, "cross_attention"):
            self.controller.cross_attention(layer, probs, resolution)


def as_tokens(cond, batch):
    """Token ids as a (batch, N) long tensor; a single prompt is broadcast."""
    tokens = torch.as_tensor(np.asarray(cond), dtype=torch.long)
    if tokens.ndim == 1:
        tokens = tokens[None].expand(batch, -1)
    if tokens.shape[0] != batch:
        raise UsageError(f"got {tokens.shape[0]} prompts for a batch of {batch}")
    return tokens


def null_tokens(batch=1, length=PROMPT_LENGTH):
    return torch.full((batch, length), PAD_ID, dtype=torch.long)


def predict_noise(model, z, t, cond=None, controller=None, layout=None, branch="conditional", capture=True):
    """Noise prediction at inference index ``t`` with optional attention control.

    Args:
        model: a :class:`ToyDenoiser`, :class:`LinearToyHead` or
            :class:`AnalyticGaussianPredictor`.
        z: latent (C, H, W) or batch (B, C, H, W); any float dtype.
        t: inference index, mapped through ``model.schedule.timestep_map``.
        cond: token ids (N,) or (B, N); ``None`` means the null prompt.
        controller: attention hook; ``None`` runs plain attention.
        layout: optional edge map(s) for the layout adapter.
        branch: tag stored on captured features.
        capture: store per-layer Q/K/V in the returned :class:`Captured`.

    Returns:
        ``(eps, captured)`` with ``eps`` float64 and shaped like ``z``.
    """
    z = torch.as_tensor(z)
    single = z.ndim == 3
    zb = z[None] if single else z
    captured = Captured()
    schedule = model.schedule
    if not 0 <= t <= schedule.T:
        raise UsageError(f"timestep index {t} outside 0..{schedule.T}")

    if isinstance(model, AnalyticGaussianPredictor):
        eps = model.noise(zb, t)
    else:
        num_layers = getattr(model, "num_attention_layers", 0)
        if controller is not None and hasattr(controller, "validate"):
            controller.validate(num_layers)
        dtype = next(model.parameters()).dtype
        batch = zb.shape[0]
        tokens = null_tokens(batch) if cond is None else as_tokens(cond, batch)
        timesteps = torch.full((batch,), int(schedule.timestep_map[t]), dtype=torch.long)
        if layout is not None:
            layout = torch.as_tensor(np.asarray(layout, dtype=np.float32))
            if layout.ndim == 3:
                layout = layout[None].expand(batch, -1, -1, -1)
        hook = _CaptureHook(controller, t, branch, captured, capture)
        with torch.no_grad():
            eps = model(zb.to(dtype), timesteps, tokens, hook=hook, layout=layout).to(torch.float64)
    if not torch.isfinite(eps).all():
        raise NumericError("non-finite noise prediction", step=t)
    return (eps[0] if single else eps), captured


# -- training -----------------------------------------------------------------


@dataclass
class TrainOptions:
    seed: int = 0
    epochs: int = 40
    batch_size: int = 64
    lr: float = 2e-3
    cond_drop: float = 0.1
    layout_drop: float = 0.5
    loss_threshold: float = 0.05
    weight_decay: float = 0.0
    log_every: int = 0


@dataclass
class TrainResult:
    model: nn.Module
    loss_trace: list
    final_loss: float
    converged: bool
    seconds: float


def denoising_loss(model, z0, tokens, timesteps, noise, layout=None):
    """Mean squared error between predicted and true noise at given levels."""
    a = torch.from_numpy(np.array(model.schedule.alpha_bar))[timesteps]
    a = a.to(z0.dtype)[:, None, None, None]
    zt = a.sqrt() * z0 + (1 - a).sqrt() * noise
    return ((model(zt, timesteps, tokens, layout=layout) - noise) ** 2).mean()


def train(model, dataset, opts=None):
    """Fit ``model`` with the standard noise-prediction objective.

    Args:
        dataset: dict with ``latents`` (n, C, H, W), ``tokens`` (n, N) and
            optionally ``layouts`` (n, 1, 2H, 2W).
        opts: :class:`TrainOptions`.

    The conditioning is replaced by the null prompt with probability
    ``opts.cond_drop`` so the model supports classifier-free guidance.
    """
    opts = opts or TrainOptions()
    latents = torch.as_tensor(np.asarray(dataset["latents"]))
    if len(latents) == 0:
        raise UsageError("training set is empty")
    dtype = next(model.parameters()).dtype
    latents = latents.to(dtype)
    tokens = torch.as_tensor(np.asarray(dataset["tokens"]), dtype=torch.long)
    layouts = dataset.get("layouts")
    if layouts is not None:
        layouts = torch.as_tensor(np.asarray(layouts)).to(dtype)
    use_layout = layouts is not None and getattr(model, "layout_adapter", None) is not None

    gen = torch.Generator().manual_seed(opts.seed)
    n = len(latents)
    steps_per_epoch = math.ceil(n / opts.batch_size)
    total = opts.epochs * steps_per_epoch
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=opts.lr, weight_decay=opts.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=opts.lr, total_steps=max(total, 1), pct_start=0.1)
    trace = []
    start = time.perf_counter()
    step = 0
    for _ in range(opts.epochs):
        order = torch.randperm(n, generator=gen)
        for i in range(steps_per_epoch):
            idx = order[i * opts.batch_size : (i + 1) * opts.batch_size]
            b = len(idx)
            z0, tok = latents[idx], tokens[idx].clone()
            drop = torch.rand(b, generator=gen) < opts.cond_drop
            tok[drop] = PAD_ID
            timesteps = torch.randint(1, model.schedule.num_train_steps + 1, (b,), generator=gen)
            noise = torch.randn(z0.shape, generator=gen, dtype=dtype)
            layout = None
            if use_layout:
                keep = (torch.rand(b, generator=gen) >= opts.layout_drop).to(dtype)[:, None, None, None]
                layout = layouts[idx] * keep
            loss = denoising_loss(model, z0, tok, timesteps, noise, layout)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError("training loss diverged", step=step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            trace.append(value)
            step += 1
            if opts.log_every and step % opts.log_every == 0:
                log.info("step %d/%d loss %.4f", step, total, float(np.mean(trace[-opts.log_every :])))
    model.eval()
    tail = trace[-max(1, steps_per_epoch) :]
    final = float(np.mean(tail)) if tail else float("nan")
    converged = bool(trace) and final < opts.loss_threshold
    if trace and not converged:
        log.warning("final training loss %.4f above threshold %.4f", final, opts.loss_threshold)
    return TrainResult(model, trace, final, converged, time.perf_counter() - start)


# -- gradient check -----------------------------------------------------------


@dataclass
class ProbeConfig:
    seed: int = 0
    num_params: int = 128
    batch_size: int = 2
    step: float = 1e-3
    abs_floor: float = 1e-6


def grad_check(model, probe=None, batch=None):
    """Max relative error between autograd and central finite differences.

    The check runs on a float64 deep copy of ``model``. ``batch`` may supply
    ``(z0, tokens, timesteps, noise)``; otherwise a random one is drawn from
    ``probe.seed``. Relative error per parameter is
    ``|g - g_fd| / max(|g|, |g_fd|, abs_floor)``.
    """
    probe = probe or ProbeConfig()
    model = copy.deepcopy(model).double()
    model.eval()
    gen = torch.Generator().manual_seed(probe.seed)
    if batch is None:
        c = getattr(getattr(model, "config", None), "latent_channels", 4)
        s = getattr(getattr(model, "config", None), "latent_size", 8)
        z0 = torch.randn(probe.batch_size, c, s, s, generator=gen, dtype=torch.float64)
        tokens = torch.randint(0, len(VOCAB), (probe.batch_size, PROMPT_LENGTH), generator=gen)
        timesteps = torch.randint(1, model.schedule.num_train_steps + 1, (probe.batch_size,), generator=gen)
        noise = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
    else:
        z0, tokens, timesteps, noise = batch
        z0, noise = z0.double(), noise.double()

    def loss_fn():
        return denoising_loss(model, z0, tokens, timesteps, noise)

    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    grads = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    count = min(probe.num_params, total)
    flat_ids = torch.randperm(total, generator=gen)[:count].numpy()
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for fid in flat_ids:
            pi = int(np.searchsorted(offsets, fid, side="right") - 1)
            local = int(fid - offsets[pi])
            flat = params[pi].view(-1)
            orig = flat[local].item()
            flat[local] = orig + probe.step
            up = loss_fn().item()
            flat[local] = orig - probe.step
            down = loss_fn().item()
            flat[local] = orig
            numeric = (up - down) / (2 * probe.step)
            analytic = grads[pi].view(-1)[local].item()
            denom = max(abs(analytic), abs(numeric), probe.abs_floor)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
