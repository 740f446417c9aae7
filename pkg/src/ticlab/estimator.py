"""scikit-learn style front end: fit a toy denoiser, reconstruct and edit images."""

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .attention_control import ControllerPolicy, PolicyKind
from .denoiser import DenoiserConfig, ToyDenoiser, TrainOptions, train
from .latent_codec import MODES, LatentCodec
from .pipeline import INVERSION_LEVELS, edge_map, edit, invert, reconstruct
from .schedule import make_schedule
from .synth_data import PROMPT_LENGTH, VOCAB, null_prompt, tokenize
from .validation import check_choice, check_float, check_images, check_int, check_prompts

POLICIES = ("replay",) + tuple(k.value for k in PolicyKind)


class TICEditor(BaseEstimator, TransformerMixin):
    """Train a small text-conditioned denoiser, then invert, reconstruct and edit.

    ``fit(X, y)`` takes images ``X`` (B, C, H, W) in [0, 1] and prompt token
    ids ``y`` (B, N); ``y=None`` trains unconditionally. ``transform`` returns
    reconstructions under ``policy`` and ``edit`` resamples under new prompts.

    Parameters
    ----------
    codec_mode : str
        Latent codec, see :class:`LatentCodec`.
    widths : tuple of int
        Channel widths of the three U-Net stages.
    num_inference_steps : int
        DDIM steps T.
    epochs, batch_size, learning_rate, seed :
        Training options.
    policy : str
        Attention policy for ``transform`` and ``edit``: ``replay`` (transform
        only), ``naive``, ``tic``, ``concat``, ``mask_guided`` or ``recon_query``.
    t0, l0 : int
        Step and layer gate of the controlled policies.
    cfg_scale : float
        Guidance scale used by ``edit``.
    use_layout : bool
        Train the layout adapter and feed it edge maps of the source image
        while editing.
    edge_threshold : float
        Threshold of the edge maps.
    noise_level : str
        ``next`` or ``current``: noise level queried by each inversion pass.
    """

    def __init__(
        self,
        codec_mode="space_to_depth",
        widths=(32, 64, 128),
        num_inference_steps=50,
        epochs=20,
        batch_size=64,
        learning_rate=2e-3,
        seed=0,
        policy="tic",
        t0=4,
        l0=4,
        cfg_scale=7.5,
        use_layout=False,
        edge_threshold=0.3,
        noise_level="next",
    ):
        self.codec_mode = codec_mode
        self.widths = widths
        self.num_inference_steps = num_inference_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.policy = policy
        self.t0 = t0
        self.l0 = l0
        self.cfg_scale = cfg_scale
        self.use_layout = use_layout
        self.edge_threshold = edge_threshold
        self.noise_level = noise_level

    def _validate_params(self):
        check_choice(self.codec_mode, "codec_mode", MODES)
        check_choice(self.policy, "policy", POLICIES)
        check_choice(self.noise_level, "noise_level", INVERSION_LEVELS)
        check_int(self.num_inference_steps, "num_inference_steps", 1)
        check_int(self.epochs, "epochs", 0)
        check_int(self.batch_size, "batch_size", 1)
        check_int(self.seed, "seed", 0)
        check_int(self.t0, "t0", 0, self.num_inference_steps)
        check_int(self.l0, "l0", -1)
        check_float(self.learning_rate, "learning_rate", 0.0)
        check_float(self.cfg_scale, "cfg_scale", 0.0)
        check_float(self.edge_threshold, "edge_threshold", 0.0, 1.0)

    def fit(self, X, y=None):
        self._validate_params()
        X = check_images(X)
        prompts = np.array([null_prompt()] * len(X)) if y is None else y
        prompts = check_prompts(prompts, len(X), PROMPT_LENGTH, len(VOCAB))

        codec = LatentCodec(self.codec_mode, X.shape[1:])
        if self.codec_mode == "trained_autoencoder":
            codec.train_autoencoder(X, seed=self.seed)
        else:
            codec.fit_statistics(X)
        c, h, w = codec.latent_shape
        config = DenoiserConfig(latent_channels=c, latent_size=h, widths=tuple(self.widths), layout_adapter=self.use_layout)
        torch.manual_seed(self.seed)
        model = ToyDenoiser(config, make_schedule(T=self.num_inference_steps))
        data = {"latents": codec.encode(X), "tokens": prompts}
        if self.use_layout:
            data["layouts"] = edge_map(X, self.edge_threshold)
        opts = TrainOptions(seed=self.seed, epochs=self.epochs, batch_size=self.batch_size, lr=self.learning_rate)
        result = train(model, data, opts)

        self.codec_ = codec
        self.model_ = result.model
        self.loss_trace_ = list(result.loss_trace)
        self.train_loss_ = result.final_loss
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _policy(self, kind=None):
        return ControllerPolicy(kind or self.policy, t0=self.t0, l0=self.l0)

    def invert(self, X):
        """DDIM inversion of ``X`` with the null prompt (batched)."""
        check_is_fitted(self, ["model_", "codec_"])
        X = check_images(X, self.codec_.image_shape)
        return invert(X, self.model_, self.codec_, noise_level=self.noise_level)

    def transform(self, X):
        """Reconstruct ``X`` through inversion and sampling under ``policy``."""
        check_is_fitted(self, ["model_", "codec_"])
        X = check_images(X, self.codec_.image_shape)
        inversion = self.invert(X)
        policy = "replay" if self.policy == "replay" else self._policy()
        return reconstruct(X, self.model_, self.codec_, policy, inversion=inversion).images

    def score(self, X, y=None):
        """Mean reconstruction PSNR (dB) of ``X``."""
        X = check_images(X)
        rec = self.transform(X)
        return float(np.mean([metrics.psnr(r, x) for r, x in zip(rec, X)]))

    def edit(self, X, prompts):
        """Edit ``X`` towards ``prompts`` (strings or token ids, one per image or shared)."""
        check_is_fitted(self, ["model_", "codec_"])
        if self.policy == "replay":
            raise ValueError("replay cannot edit; choose an attention policy")
        X = check_images(X, self.codec_.image_shape)
        if isinstance(prompts, str):
            prompts = tokenize(prompts)
        elif len(prompts) and isinstance(prompts[0], str):
            prompts = [tokenize(p) for p in prompts]
        prompts = check_prompts(prompts, len(X), PROMPT_LENGTH, len(VOCAB))
        layout = edge_map(X, self.edge_threshold) if self.use_layout else None
        inversion = self.invert(X)
        out, _ = edit(X, prompts, self.model_, self.codec_, self._policy(), self.cfg_scale, layout, inversion=inversion)
        return out

    def save(self, directory):
        check_is_fitted(self, ["model_", "codec_"])
        directory = Path(directory)
        extra = {"estimator": _jsonable(self.get_params()), "train_loss": getattr(self, "train_loss_", None)}
        self.model_.save(directory, seed=self.seed, extra=extra)
        self.codec_.save(directory)
        return directory

    @classmethod
    def load(cls, directory, **params):
        """Rebuild a fitted editor from a checkpoint written by :meth:`save`."""
        import json

        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        stored = dict(manifest.get("estimator", {}))
        stored.update(params)
        if "widths" in stored:
            stored["widths"] = tuple(stored["widths"])
        est = cls(**stored)
        est.model_ = ToyDenoiser.load(directory)
        est.codec_ = LatentCodec.load(directory)
        if manifest.get("train_loss") is not None:
            est.train_loss_ = manifest["train_loss"]
        est.n_features_in_ = int(np.prod(est.codec_.image_shape))
        return est


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
