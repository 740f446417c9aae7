"""Inversion KV cache, attention policies, cross-attention masks.

During inversion a :class:`CacheRecorder` stores each self-attention layer's
keys/values per timestep. During sampling a :class:`SamplingController`
decides, per layer and step, whether to attend locally, replace K/V with the
cached inversion features, concatenate both, or blend the two by an edit
mask.
"""

import enum
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import attention
from .exceptions import ConfigurationError, IntegrityError, UsageError
from .tensor_io import load_tensor, save_tensor


class PolicyKind(str, enum.Enum):
    NAIVE = "naive"
    TIC = "tic"
    CONCAT = "concat"
    MASK_GUIDED = "mask_guided"
    RECON_QUERY = "recon_query"


class Plan(enum.Enum):
    USE_LOCAL = "use_local"
    REPLACE = "replace"
    CONCAT = "concat"
    MASKED_BLEND = "masked_blend"


_NON_LOCAL = {
    PolicyKind.TIC: Plan.REPLACE,
    PolicyKind.RECON_QUERY: Plan.REPLACE,
    PolicyKind.CONCAT: Plan.CONCAT,
    PolicyKind.MASK_GUIDED: Plan.MASKED_BLEND,
}


@dataclass
class ControllerPolicy:
    """Which attention substitution to run, and when.

    The non-local plan fires iff ``t_progress >= t0`` and ``l > l0``, where
    ``t_progress`` counts completed denoising iterations. With
    ``literal_gate=True`` the step condition is ``t_index > t0`` instead.

    Attributes:
        kind: a :class:`PolicyKind` (or its string value).
        t0: step threshold.
        l0: layer threshold; -1 enables every layer.
        token_indices: prompt positions defining the edit mask (mask-guided).
        threshold: mask binarization threshold after min-max normalization.
        resolution: cross-attention grid the mask is built at.
        fixed_mask: optional explicit mask overriding the cross-attention one.
        inject_uncond: also control the unconditional guidance branch.
        literal_gate: gate on the countdown index instead of progress.
    """

    kind: PolicyKind = PolicyKind.TIC
    t0: int = 4
    l0: int = 4
    token_indices: tuple = ()
    threshold: float = 0.3
    resolution: int = 8
    fixed_mask: np.ndarray | None = field(default=None, repr=False)
    inject_uncond: bool = True
    literal_gate: bool = False

    def __post_init__(self):
        self.kind = PolicyKind(self.kind)
        self.token_indices = tuple(int(i) for i in self.token_indices)
        if self.t0 < 0:
            raise ConfigurationError(f"t0 must be >= 0, got {self.t0}")
        if self.l0 < -1:
            raise ConfigurationError(f"l0 must be >= -1, got {self.l0}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError(f"mask threshold must be in [0, 1], got {self.threshold}")

    def validate(self, num_steps, num_layers):
        if self.kind is PolicyKind.NAIVE:
            return
        if self.t0 > num_steps:
            raise ConfigurationError(f"t0={self.t0} exceeds T={num_steps}")
        if self.l0 > num_layers - 1:
            raise ConfigurationError(f"l0={self.l0} references a layer >= L={num_layers}")
        if self.kind is PolicyKind.MASK_GUIDED and self.fixed_mask is None and not self.token_indices:
            raise ConfigurationError("mask-guided policy needs token_indices or a fixed mask")

    def gate(self, t_progress, t_index, layer):
        step_on = t_index > self.t0 if self.literal_gate else t_progress >= self.t0
        return step_on and layer > self.l0

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "t0": self.t0,
            "l0": self.l0,
            "token_indices": list(self.token_indices),
            "threshold": self.threshold,
            "resolution": self.resolution,
            "inject_uncond": self.inject_uncond,
            "literal_gate": self.literal_gate,
            "fixed_mask": None if self.fixed_mask is None else np.asarray(self.fixed_mask).astype(int).tolist(),
        }


def policy_plan(policy, t_progress, t_index, layer, mask=None):
    """Attention plan for one (step, layer)."""
    if policy.kind is PolicyKind.NAIVE or not policy.gate(t_progress, t_index, layer):
        return Plan.USE_LOCAL
    plan = _NON_LOCAL[policy.kind]
    if plan is Plan.MASKED_BLEND and mask is None:
        raise UsageError("mask-guided plan requested without an edit mask")
    return plan


def _mask_weights(mask, positions, like):
    side = int(round(positions**0.5))
    if side * side != positions:
        raise ConfigurationError(f"layer with {positions} positions is not a square grid")
    m = resize_mask(mask, side)
    m = torch.as_tensor(np.asarray(m, dtype=np.float64)).to(like.dtype)
    if m.ndim == 2:
        m = m[None]
    return m.reshape(m.shape[0], 1, positions, 1)


def attend_with_plan(plan, q, k, v, cache_entry=None, mask=None):
    """Self-attention output for ``plan``.

    Tensors are (B, heads, positions, head_dim). ``cache_entry`` is the
    inversion ``(K*, V*)`` pair; ``mask`` a binary grid (or per-image grids)
    marking where the concatenated attention applies.
    """
    if plan is Plan.USE_LOCAL:
        return attention(q, k, v)
    if cache_entry is None:
        raise IntegrityError(f"plan {plan.value} needs inversion features")
    k_inv, v_inv = cache_entry
    if k_inv.shape != k.shape or v_inv.shape != v.shape:
        raise IntegrityError(f"cached K/V shape {tuple(k_inv.shape)} does not match layer shape {tuple(k.shape)}")
    k_inv, v_inv = k_inv.to(q.dtype), v_inv.to(q.dtype)
    if plan is Plan.REPLACE:
        return attention(q, k_inv, v_inv)
    concat = attention(q, torch.cat([k, k_inv], dim=-2), torch.cat([v, v_inv], dim=-2))
    if plan is Plan.CONCAT:
        return concat
    if mask is None:
        raise UsageError("masked blend requires a mask")
    replace = attention(q, k_inv, v_inv)
    m = _mask_weights(mask, q.shape[-2], q)
    return m * concat + (1 - m) * replace


# -- KV cache -----------------------------------------------------------------


class KVCache:
    """Per-(timestep, layer) inversion keys/values plus cross-attention maps.

    ``entries[(t, l)]`` holds the features of the inversion forward pass run
    at timestep argument ``t`` (0..T-1). Sampling step ``t`` reads entry
    ``t - 1``.
    """

    def __init__(self, num_steps, layers, metadata=None):
        self.num_steps = int(num_steps)
        self.layers = tuple(int(l) for l in layers)
        self.metadata = dict(metadata or {})
        self.entries = {}
        self.cross_maps = {}
        self.frozen = False

    def _check_open(self):
        if self.frozen:
            raise IntegrityError("KV cache is frozen after inversion")

    def record(self, t, layer, k, v):
        self._check_open()
        if not 0 <= t < self.num_steps or layer not in self.layers:
            raise IntegrityError(f"(t={t}, l={layer}) outside the cache roster")
        if (t, layer) in self.entries:
            raise IntegrityError(f"duplicate cache entry (t={t}, l={layer})")
        if k.shape != v.shape:
            raise IntegrityError(f"K/V shapes differ at (t={t}, l={layer})")
        for (_, other), (k_other, _) in self.entries.items():
            if other == layer:
                if k_other.shape != k.shape:
                    raise IntegrityError(f"inconsistent K shape at layer {layer}")
                break
        self.entries[(t, layer)] = (k.detach().clone(), v.detach().clone())

    def record_cross(self, t, maps):
        self._check_open()
        if t in self.cross_maps:
            raise IntegrityError(f"duplicate cross-attention record at t={t}")
        self.cross_maps[t] = [(m.layer, m.resolution, m.probs.detach().clone()) for m in maps]

    @property
    def is_complete(self):
        return len(self.entries) == self.num_steps * len(self.layers)

    def freeze(self):
        if not self.is_complete:
            missing = [(t, l) for t in range(self.num_steps) for l in self.layers if (t, l) not in self.entries]
            raise IntegrityError(f"cannot freeze an incomplete cache; missing {missing[:4]}...")
        self.frozen = True
        return self

    def entry(self, t, layer):
        try:
            return self.entries[(t, layer)]
        except KeyError:
            raise IntegrityError(f"no cache entry for (t={t}, l={layer})") from None

    def lookup(self, t, layer):
        """Features for sampling step ``t`` (1..T): the entry recorded at ``t - 1``."""
        if not 1 <= t <= self.num_steps:
            raise UsageError(f"sampling step {t} outside 1..{self.num_steps}")
        try:
            return self.entries[(t - 1, layer)]
        except KeyError:
            raise IntegrityError(f"no cache entry for sampling step t={t}, layer {layer}") from None

    # -- persistence ----------------------------------------------------------
    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        shapes = {}
        for (t, l), (k, v) in sorted(self.entries.items()):
            save_tensor(directory / f"kv_t{t}_l{l}_k.tns", k)
            save_tensor(directory / f"kv_t{t}_l{l}_v.tns", v)
            shapes[str(l)] = list(k.shape)
        cross_layout = None
        for t, maps in sorted(self.cross_maps.items()):
            # maps of all layers concatenated along the position axis
            save_tensor(directory / f"xattn_t{t}.tns", torch.cat([p for _, _, p in maps], dim=1))
            cross_layout = [[layer, res, int(p.shape[1])] for layer, res, p in maps]
        manifest = {
            "T": self.num_steps,
            "layers": list(self.layers),
            "shapes": shapes,
            "cross_layout": cross_layout,
            "cross_steps": sorted(self.cross_maps),
            "frozen": self.frozen,
            "metadata": self.metadata,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory):
        from .denoiser import CrossAttentionMap

        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        cache = cls(manifest["T"], manifest["layers"], manifest.get("metadata"))
        for t in range(cache.num_steps):
            for l in cache.layers:
                k = torch.from_numpy(load_tensor(directory / f"kv_t{t}_l{l}_k.tns"))
                v = torch.from_numpy(load_tensor(directory / f"kv_t{t}_l{l}_v.tns"))
                cache.entries[(t, l)] = (k, v)
        for t in manifest.get("cross_steps", []):
            flat = torch.from_numpy(load_tensor(directory / f"xattn_t{t}.tns"))
            maps, offset = [], 0
            for layer, res, n in manifest["cross_layout"]:
                maps.append(CrossAttentionMap(layer, res, flat[:, offset : offset + n]))
                offset += n
            cache.cross_maps[t] = [(m.layer, m.resolution, m.probs) for m in maps]
        if manifest.get("frozen"):
            cache.freeze()
        return cache


def cache_record(cache, t, layer, k, v):
    cache.record(t, layer, k, v)


def cache_record_cross(cache, t, maps):
    cache.record_cross(t, maps)


def cache_lookup(cache, t, layer):
    return cache.lookup(t, layer)


# -- cross-attention maps and masks ---------------------------------------------


@dataclass
class EditMask:
    values: np.ndarray  # bool, (r, r) or (B, r, r)
    step: int | None = None
    token_indices: tuple = ()
    threshold: float | None = None


def aggregate_cross_attention(maps, resolution):
    """Average head-averaged cross-attention maps at ``resolution``.

    Args:
        maps: iterable of objects with ``layer``, ``resolution`` and ``probs``
            (B, r*r, N) attributes, or ``(layer, resolution, probs)`` tuples.

    Returns:
        float64 array (B, r, r, N); token axis sums to 1 at each position.
    """
    selected = []
    for m in maps:
        layer, res, probs = (m.layer, m.resolution, m.probs) if hasattr(m, "probs") else m
        if res == resolution:
            selected.append(torch.as_tensor(probs).to(torch.float64))
    if not selected:
        raise ConfigurationError(f"no cross-attention layer at resolution {resolution}")
    mean = torch.stack(selected).mean(dim=0)
    b, n_pos, n_tok = mean.shape
    return mean.reshape(b, resolution, resolution, n_tok).numpy()


def build_edit_mask(attn_maps, token_indices, threshold, step=None):
    """Binarize the token-averaged map after per-image min-max normalization."""
    token_indices = tuple(int(i) for i in token_indices)
    a = np.asarray(attn_maps, dtype=np.float64)
    n_tok = a.shape[-1]
    if not token_indices or any(not 0 <= i < n_tok for i in token_indices):
        raise UsageError(f"token indices {token_indices} must be non-empty and within 0..{n_tok - 1}")
    if not 0.0 <= threshold <= 1.0:
        raise UsageError(f"threshold must be in [0, 1], got {threshold}")
    single = a.ndim == 3
    if single:
        a = a[None]
    sel = a[..., list(token_indices)].mean(axis=-1)
    lo = sel.min(axis=(1, 2), keepdims=True)
    hi = sel.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    flat = span[:, 0, 0] <= 0
    if flat.any():
        warnings.warn("constant cross-attention map; edit mask defaults to all ones", RuntimeWarning, stacklevel=2)
    norm = np.where(span > 0, (sel - lo) / np.where(span > 0, span, 1.0), 1.0)
    values = norm >= threshold
    return EditMask(values[0] if single else values, step, token_indices, threshold)


def resize_mask(mask, target):
    """Area-average resize to ``target`` x ``target``, then re-binarize at 0.5."""
    values = mask.values if isinstance(mask, EditMask) else mask
    m = np.asarray(values, dtype=np.float64)
    single = m.ndim == 2
    if single:
        m = m[None]
    src = m.shape[-1]
    if m.shape[-2] != src:
        raise ConfigurationError(f"mask must be square, got {m.shape[-2:]}")
    big, small = max(src, target), min(src, target)
    factor = big // small
    if small < 1 or big % small or factor & (factor - 1):
        raise ConfigurationError(f"cannot resize a {src}-grid mask to {target}")
    if target < src:
        m = m.reshape(m.shape[0], target, factor, target, factor).mean(axis=(2, 4))
    elif target > src:
        m = np.repeat(np.repeat(m, factor, axis=1), factor, axis=2)
    out = m >= 0.5
    return out[0] if single else out


# -- hooks ----------------------------------------------------------------------


class CacheRecorder:
    """Attention hook that records every self-attention K/V into a cache."""

    def __init__(self, cache, t):
        self.cache = cache
        self.t = t
        self.maps = []

    def self_attention(self, layer, q, k, v):
        self.cache.record(self.t, layer, k, v)
        return attention(q, k, v)

    def cross_attention(self, layer, probs, resolution):
        self.maps.append((layer, resolution, probs))


class SamplingController:
    """Attention hook that applies a policy during one sampling step.

    Args:
        policy: the :class:`ControllerPolicy`.
        source: callable ``(t, layer) -> (K*, V*)`` supplying inversion or
            reconstruction-branch features (typically ``cache.lookup``).
        num_layers: number of self-attention layers in the model.
    """

    def __init__(self, policy, source, num_layers):
        self.policy = policy
        self.source = source
        self.num_layers = num_layers
        self.t_index = None
        self.t_progress = None
        self.mask = None
        self.fired = []

    def validate(self, num_layers):
        if self.policy.kind is not PolicyKind.NAIVE and self.policy.l0 > num_layers - 1:
            raise ConfigurationError(f"l0={self.policy.l0} references a layer >= L={num_layers}")

    def begin_step(self, t_index, t_progress, mask=None):
        self.t_index = t_index
        self.t_progress = t_progress
        self.mask = mask
        self.fired = []

    def step_gated(self, t_index, t_progress):
        """Whether any layer fires a non-local plan at this step."""
        if self.policy.kind is PolicyKind.NAIVE:
            return False
        return any(self.policy.gate(t_progress, t_index, l) for l in range(self.num_layers))

    def self_attention(self, layer, q, k, v):
        plan = policy_plan(self.policy, self.t_progress, self.t_index, layer, self.mask)
        if plan is Plan.USE_LOCAL:
            return attention(q, k, v)
        self.fired.append(layer)
        return attend_with_plan(plan, q, k, v, self.source(self.t_index, layer), self.mask)


class LiveKVSource:
    """Holds the K/V of one forward pass, served to a parallel branch."""

    def __init__(self):
        self.kv = {}

    def self_attention(self, layer, q, k, v):
        self.kv[layer] = (k, v)
        return attention(q, k, v)

    def __call__(self, t, layer):
        try:
            return self.kv[layer]
        except KeyError:
            raise IntegrityError(f"reconstruction branch has no features for layer {layer}") from None
