"""Command line: ``ticlab {train,invert,reconstruct,edit,analyze-error,eval}``.

Every command reads a JSON run configuration (``--config``), fills in
defaults, validates it before doing any work and writes the fully resolved
configuration to ``<output_dir>/resolved_config.json``. Feeding that file
back with ``--config`` repeats the run exactly.

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric failure.
The environment variable ``TICLAB_NUM_THREADS`` sets the torch thread count.
"""

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .attention_control import ControllerPolicy, PolicyKind
from .denoiser import AnalyticGaussianPredictor, DenoiserConfig, ToyDenoiser, TrainOptions, train
from .exceptions import ConfigurationError, IntegrityError, NumericError, UsageError
from .latent_codec import MODES, LatentCodec, load_png, save_png
from .pipeline import INVERSION_LEVELS, edge_map, edit, invert, reconstruct, stepwise_error_trace
from .schedule import make_schedule
from .synth_data import make_split, tokenize
from .validation import check_choice, check_float, check_int

log = logging.getLogger("ticlab")

THREADS_ENV = "TICLAB_NUM_THREADS"
COMMANDS = ("train", "invert", "reconstruct", "edit", "analyze-error", "eval")
RECON_POLICIES = ("replay",) + tuple(k.value for k in PolicyKind)

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "ticlab_out",
    "schedule": {"num_train_steps": 1000, "beta_start": 0.00085, "beta_end": 0.012, "T": 50},
    "model": {"path": None, "analytic": None},
    "codec": {"mode": "space_to_depth"},
    "policy": {
        "kind": "tic",
        "t0": 4,
        "l0": 4,
        "threshold": 0.3,
        "token_indices": [],
        "resolution": 8,
        "inject_uncond": True,
        "literal_gate": False,
    },
    "cfg_scale": 7.5,
    "layout": {"enabled": False, "edge_threshold": 0.3},
    "inversion": {"noise_level": "next"},
    "data": {"seed": 0, "n_train": 2000, "n_test": 24},
    "train": {"epochs": 20, "batch_size": 64, "lr": 0.002, "widths": [32, 64, 128]},
    "run": {"image": None, "prompt": None, "policies": None, "split": "test", "n_images": None},
}

# sections whose contents are free-form (``None`` by default)
_OPEN_KEYS = {("model", "analytic")}


def _merge(defaults, given, path=()):
    if not isinstance(given, dict):
        raise ConfigurationError(f"config section {'.'.join(path) or '<root>'} must be an object")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigurationError(f"unknown config key {'.'.join(path + (key,))}")
        if isinstance(defaults[key], dict) and (path + (key,)) not in _OPEN_KEYS:
            out[key] = _merge(defaults[key], value, path + (key,))
        else:
            out[key] = value
    return out


def resolve_config(given=None):
    """Defaults merged with ``given``, validated; raises :class:`ConfigurationError`."""
    cfg = _merge(DEFAULT_CONFIG, given or {})
    check_int(cfg["seed"], "seed", 0)
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        raise ConfigurationError("output_dir must be a non-empty string")
    s = cfg["schedule"]
    make_schedule(
        check_int(s["num_train_steps"], "schedule.num_train_steps", 1),
        check_float(s["beta_start"], "schedule.beta_start"),
        check_float(s["beta_end"], "schedule.beta_end"),
        check_int(s["T"], "schedule.T", 1),
    )
    m = cfg["model"]
    if m["path"] is not None and m["analytic"] is not None:
        raise ConfigurationError("model.path and model.analytic are mutually exclusive")
    if m["analytic"] is not None:
        a = m["analytic"]
        if not isinstance(a, dict) or set(a) - {"mu", "s"}:
            raise ConfigurationError("model.analytic must be an object with keys mu and s")
        a.setdefault("mu", 0.0)
        a.setdefault("s", 1.0)
        check_float(a["mu"], "model.analytic.mu")
        check_float(a["s"], "model.analytic.s", 1e-12)
    check_choice(cfg["codec"]["mode"], "codec.mode", MODES)
    p = cfg["policy"]
    check_choice(p["kind"], "policy.kind", RECON_POLICIES)
    check_int(p["t0"], "policy.t0", 0, s["T"])
    check_int(p["l0"], "policy.l0", -1)
    check_float(p["threshold"], "policy.threshold", 0.0, 1.0)
    check_int(p["resolution"], "policy.resolution", 1)
    if not isinstance(p["token_indices"], list):
        raise ConfigurationError("policy.token_indices must be a list")
    for i in p["token_indices"]:
        check_int(i, "policy.token_indices[]", 0)
    check_float(cfg["cfg_scale"], "cfg_scale", 0.0)
    check_float(cfg["layout"]["edge_threshold"], "layout.edge_threshold", 0.0, 1.0)
    check_choice(cfg["inversion"]["noise_level"], "inversion.noise_level", INVERSION_LEVELS)
    d = cfg["data"]
    check_int(d["seed"], "data.seed", 0)
    check_int(d["n_train"], "data.n_train", 0)
    check_int(d["n_test"], "data.n_test", 0)
    t = cfg["train"]
    check_int(t["epochs"], "train.epochs", 0)
    check_int(t["batch_size"], "train.batch_size", 1)
    check_float(t["lr"], "train.lr", 0.0)
    DenoiserConfig(widths=tuple(t["widths"]))
    r = cfg["run"]
    check_choice(r["split"], "run.split", ("train", "test"))
    if r["n_images"] is not None:
        check_int(r["n_images"], "run.n_images", 1)
    if r["policies"] is not None:
        for name in r["policies"]:
            check_choice(name, "run.policies[]", RECON_POLICIES)
    if r["prompt"] is not None:
        try:
            tokenize(r["prompt"])
        except UsageError as exc:
            raise ConfigurationError(f"run.prompt: {exc}") from exc
    return cfg


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="ticlab", description=__doc__.splitlines()[0])
    parser.add_argument("--dump-alpha-bar", metavar="PATH", help="write the schedule's alpha_bar table as JSON")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--output-dir", help="overrides output_dir")
        p.add_argument("--seed", type=int, help="overrides seed")
        return p

    command("train", "train the toy denoiser on the synthetic scenes")
    p = command("invert", "DDIM-invert an image and store trajectory, noise and KV cache")
    p.add_argument("--image")
    p = command("reconstruct", "invert then resample with the null prompt")
    p.add_argument("--image")
    p.add_argument("--policy", help="policy name, or a comma separated list")
    p = command("edit", "invert then resample under a new prompt")
    p.add_argument("--image")
    p.add_argument("--prompt")
    p.add_argument("--policy")
    p = command("analyze-error", "per-step free-running and teacher-forced error trace")
    p.add_argument("--image")
    p.add_argument("--policy")
    p = command("eval", "batch reconstruction metrics per policy over a split")
    p.add_argument("--policies")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--n-images", type=int)
    return parser


def _apply_flags(cfg, args):
    if args.output_dir is not None:
        cfg["output_dir"] = args.output_dir
    if args.seed is not None:
        cfg["seed"] = args.seed
    run = cfg.setdefault("run", {})
    for flag in ("image", "prompt", "split", "n_images"):
        value = getattr(args, flag, None)
        if value is not None:
            run[flag] = value
    policies = getattr(args, "policies", None) or getattr(args, "policy", None)
    if policies is not None:
        names = [p.strip() for p in policies.split(",") if p.strip()]
        if args.command in ("edit", "analyze-error"):
            if len(names) != 1:
                raise UsageError(f"{args.command} takes a single policy")
            cfg.setdefault("policy", {})["kind"] = names[0]
        else:
            run["policies"] = names
    if run.get("image") is not None:
        run["image"] = str(Path(run["image"]).resolve())
    return cfg


def _read_config(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"malformed config {path}: {exc.msg} at line {exc.lineno}") from exc


# -- shared setup -------------------------------------------------------------


def _schedule(cfg):
    s = cfg["schedule"]
    return make_schedule(s["num_train_steps"], s["beta_start"], s["beta_end"], s["T"])


def load_model(cfg):
    """``(model, codec)`` described by ``cfg``; a checkpoint's own codec wins."""
    schedule = _schedule(cfg)
    m = cfg["model"]
    if m["analytic"] is not None:
        codec = LatentCodec(cfg["codec"]["mode"])
        return AnalyticGaussianPredictor(m["analytic"]["mu"], m["analytic"]["s"], schedule), codec
    if m["path"] is None:
        raise ConfigurationError("config needs model.path (a checkpoint) or model.analytic")
    path = Path(m["path"])
    if not (path / "manifest.json").is_file() or not (path / "codec.json").is_file():
        raise ConfigurationError(f"missing checkpoint at {path}")
    model = ToyDenoiser.load(path)
    trained = {k: v for k, v in model.schedule.params().items() if k != "num_inference_steps"}
    if trained != {k: v for k, v in schedule.params().items() if k != "num_inference_steps"}:
        raise ConfigurationError("schedule training parameters differ from the checkpoint's")
    model.schedule = schedule
    codec = LatentCodec.load(path)
    cfg["codec"]["mode"] = codec.mode
    return model, codec


def _policy(cfg, kind=None):
    p = dict(cfg["policy"])
    p["kind"] = kind or p["kind"]
    if p["kind"] == "replay":
        return "replay"
    p["token_indices"] = tuple(p["token_indices"])
    return ControllerPolicy(**p)


def _image(cfg, codec):
    path = cfg["run"]["image"]
    if path is None:
        raise UsageError("this command needs --image")
    if not Path(path).is_file():
        raise UsageError(f"image not found: {path}")
    img = load_png(path)
    if img.shape != codec.image_shape:
        raise UsageError(f"image shape {img.shape} does not match the codec's {codec.image_shape}")
    return img


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=1, default=_json_default))


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# -- commands -----------------------------------------------------------------


def cmd_train(cfg, out):
    torch.manual_seed(cfg["seed"])
    d, t = cfg["data"], cfg["train"]
    ds = make_split(d["seed"], d["n_train"], d["n_test"])
    images = ds.images("train")
    codec = LatentCodec(cfg["codec"]["mode"])
    if codec.mode == "trained_autoencoder":
        codec.train_autoencoder(images, seed=cfg["seed"])
    else:
        codec.fit_statistics(images)
    c, h, _ = codec.latent_shape
    config = DenoiserConfig(latent_channels=c, latent_size=h, widths=tuple(t["widths"]), layout_adapter=True)
    model = ToyDenoiser(config, _schedule(cfg))
    data = {"latents": codec.encode(images), "tokens": ds.prompts("train")}
    if cfg["layout"]["enabled"]:
        data["layouts"] = edge_map(images, cfg["layout"]["edge_threshold"])
    result = train(model, data, TrainOptions(seed=cfg["seed"], epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"]))
    model.save(out / "model", seed=cfg["seed"])
    codec.save(out / "model")
    report = {
        "final_loss": result.final_loss,
        "converged": result.converged,
        "seconds": result.seconds,
        "steps": len(result.loss_trace),
        "loss_trace": result.loss_trace,
    }
    _write_json(out / "train_report.json", report)
    return f"trained {len(result.loss_trace)} steps, final loss {result.final_loss:.4f}"


def cmd_invert(cfg, out):
    model, codec = load_model(cfg)
    img = _image(cfg, codec)
    inv = invert(img, model, codec, cond=None, noise_level=cfg["inversion"]["noise_level"])
    inv.save(out / "inversion")
    _write_json(out / "metrics.json", {"seconds": inv.seconds, "T": inv.T})
    return f"inverted in {inv.seconds:.2f}s"


def cmd_reconstruct(cfg, out):
    model, codec = load_model(cfg)
    img = _image(cfg, codec)
    names = cfg["run"]["policies"] or [cfg["policy"]["kind"]]
    start = time.perf_counter()
    inv = invert(img, model, codec, noise_level=cfg["inversion"]["noise_level"])
    inv_seconds = time.perf_counter() - start
    report = {"policies": {}}
    for name in names:
        res = reconstruct(img, model, codec, _policy(cfg, name), inversion=inv)
        save_png(out / f"reconstructed_{name}.png", res.images)
        entry = {"psnr": res.psnr[0], "ssim": res.ssim[0], "seconds": res.seconds + inv_seconds}
        report["policies"][name] = entry
        report[f"psnr_{name}"] = entry["psnr"]
        report[f"ssim_{name}"] = entry["ssim"]
    if len(names) == 1:
        save_png(out / "reconstructed.png", res.images)
    _write_json(out / "metrics.json", report)
    return ", ".join(f"{n}: {report['policies'][n]['psnr']:.2f} dB" for n in names)


def cmd_edit(cfg, out):
    model, codec = load_model(cfg)
    img = _image(cfg, codec)
    prompt = cfg["run"]["prompt"]
    if prompt is None:
        raise UsageError("edit needs --prompt")
    policy = _policy(cfg)
    if policy == "replay":
        raise UsageError("replay cannot edit; choose an attention policy")
    layout = edge_map(img, cfg["layout"]["edge_threshold"]) if cfg["layout"]["enabled"] else None
    start = time.perf_counter()
    edited, record = edit(img, tokenize(prompt), model, codec, policy, cfg["cfg_scale"], layout)
    seconds = time.perf_counter() - start
    save_png(out / "edited.png", edited)
    report = {
        "prompt": prompt,
        "policy": policy.kind.value,
        "psnr_to_source": metrics.psnr(edited, img),
        "ssim_to_source": metrics.ssim(edited, img),
        "gated_steps": int(sum(record.gated.values())),
        "seconds": seconds,
    }
    _write_json(out / "metrics.json", report)
    return f"edited in {seconds:.2f}s"


def cmd_analyze_error(cfg, out):
    model, codec = load_model(cfg)
    img = _image(cfg, codec)
    inv = invert(img, model, codec, noise_level=cfg["inversion"]["noise_level"])
    policy = _policy(cfg)
    if policy == "replay":
        raise UsageError("analyze-error needs an attention policy")
    rows = stepwise_error_trace(inv, model, policy=policy)
    _write_json(out / "trace.json", {"policy": policy.kind.value, "rows": rows})
    worst = max(rows, key=lambda r: r["tf_residual"])
    return f"{len(rows)} steps, max teacher-forced residual {worst['tf_residual']:.2e}"


def cmd_eval(cfg, out):
    model, codec = load_model(cfg)
    d, r = cfg["data"], cfg["run"]
    ds = make_split(d["seed"], d["n_train"], d["n_test"])
    specs = getattr(ds, r["split"])
    if r["n_images"] is not None:
        specs = specs[: r["n_images"]]
    if not specs:
        raise UsageError(f"split {r['split']!r} has no images")
    images = ds.images(r["split"])[: len(specs)]
    names = r["policies"] or ["naive", "tic", "replay"]
    start = time.perf_counter()
    inv = invert(images, model, codec, noise_level=cfg["inversion"]["noise_level"])
    inv_seconds = time.perf_counter() - start
    table = {}
    for name in names:
        res = reconstruct(images, model, codec, _policy(cfg, name), inversion=inv)
        table[name] = {
            "psnr": float(np.mean(res.psnr)),
            "ssim": float(np.mean(res.ssim)),
            "seconds_per_image": (res.seconds + inv_seconds) / len(images),
            "per_image_psnr": res.psnr,
        }
    report = {"split": r["split"], "n_images": len(images), "policies": table}
    chain = [n for n in ("replay", "tic", "naive") if n in table]
    if len(chain) > 1:
        report["ceiling_chain"] = chain
        report["ceiling_chain_holds"] = all(table[a]["psnr"] >= table[b]["psnr"] for a, b in zip(chain, chain[1:]))
    _write_json(out / "eval.json", report)
    lines = [f"{'policy':<12}{'PSNR':>8}{'SSIM':>8}{'s/img':>8}"]
    for name, row in table.items():
        lines.append(f"{name:<12}{row['psnr']:>8.2f}{row['ssim']:>8.4f}{row['seconds_per_image']:>8.3f}")
    if "ceiling_chain_holds" in report:
        lines.append(f"ordering {' >= '.join(chain)}: {'holds' if report['ceiling_chain_holds'] else 'VIOLATED'}")
    return "\n".join(lines)


HANDLERS = {
    "train": cmd_train,
    "invert": cmd_invert,
    "reconstruct": cmd_reconstruct,
    "edit": cmd_edit,
    "analyze-error": cmd_analyze_error,
    "eval": cmd_eval,
}


def _set_threads():
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return
    try:
        n = int(value)
    except ValueError as exc:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from exc
    if n < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    torch.set_num_threads(n)


def run_command(argv=None, stdout=None, stderr=None):
    """Run one command; returns the process exit code."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=stderr)
        _set_threads()
        if args.command is None and args.dump_alpha_bar is None:
            raise UsageError(f"missing command; choose one of {', '.join(COMMANDS)}")
        cfg = None
        if args.command is not None:
            cfg = resolve_config(_apply_flags(_read_config(args.config), args))
        if args.dump_alpha_bar is not None:
            schedule = _schedule(cfg) if cfg else make_schedule()
            dump = {**schedule.params(), "alpha_bar": schedule.alpha_bar.tolist()}
            _write_json(args.dump_alpha_bar, dump)
        if args.command is None:
            return 0
        out = Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(cfg["seed"])
        message = HANDLERS[args.command](cfg, out)
        # written last so it also records values settled by the run (e.g. codec mode)
        _write_json(out / "resolved_config.json", cfg)
        print(message, file=stdout)
        return 0
    except NumericError as exc:
        print(f"error: {exc}", file=stderr)
        return 2
    except (ConfigurationError, UsageError, IntegrityError) as exc:
        print(f"error: {_one_line(exc)}", file=stderr)
        return 1
    except OSError as exc:
        print(f"error: {_one_line(exc)}", file=stderr)
        return 1


def _one_line(exc):
    return " ".join(str(exc).split())


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
