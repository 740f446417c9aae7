"""Acceptance criteria 1-12; each test records one PASS/FAIL line in the terminal summary."""

import math
import time

import numpy as np
import pytest
import torch

from ticlab.attention_control import ControllerPolicy, Plan, attend_with_plan, aggregate_cross_attention
from ticlab.denoiser import AnalyticGaussianPredictor, DenoiserConfig, ProbeConfig, ToyDenoiser, grad_check, predict_noise
from ticlab.metrics import psnr, region_psnr, ssim
from ticlab.pipeline import (
    SamplerRun,
    edit,
    epsilon_replay,
    invert,
    invert_latent,
    per_image_eps_error,
    sample,
    stepwise_error_trace,
)
from ticlab.schedule import ddim_invert_step, ddim_sample_step, make_schedule
from ticlab.synth_data import render_scene, scene_prompt

N_RECON = 20
N_EDIT = 10
PSNR_MARGIN_DB = 2.0

pytestmark = pytest.mark.slow


def timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


@pytest.fixture(scope="module")
def recon_runs(trained_model, codec, test_images):
    """Naive, always-on TIC and replay reconstructions of the first N_RECON test images."""
    images = test_images[:N_RECON]
    start = time.perf_counter()
    inv = invert(images, trained_model, codec)
    tic_policy = ControllerPolicy("tic", t0=0, l0=-1)
    runs = {
        "naive": sample(inv, trained_model, run=SamplerRun(ControllerPolicy("naive"))),
        "tic": sample(inv, trained_model, run=SamplerRun(tic_policy)),
    }
    decoded = {name: codec.decode(rec.z0) for name, rec in runs.items()}
    decoded["replay"] = codec.decode(epsilon_replay(inv, trained_model.schedule))
    scores = {
        name: ([psnr(r, x) for r, x in zip(out, images)], [ssim(r, x) for r, x in zip(out, images)])
        for name, out in decoded.items()
    }
    return {"inv": inv, "runs": runs, "scores": scores, "seconds": time.perf_counter() - start}


def test_criterion_01_inverse_pair(acceptance):
    s = make_schedule()
    g = torch.Generator().manual_seed(0)

    def check():
        ts = torch.randint(1, s.T + 1, (1000,), generator=g)
        z = torch.randn(1000, 16, generator=g, dtype=torch.float64) * (torch.rand(1000, 1, generator=g, dtype=torch.float64) * 10 + 0.1)
        eps = torch.randn(1000, 16, generator=g, dtype=torch.float64)
        worst = 0.0
        # triples sharing a timestep go through the step functions together
        for t in ts.unique().tolist():
            zi, ei = z[ts == t], eps[ts == t]
            n = torch.linalg.vector_norm(zi, dim=1)
            a = torch.linalg.vector_norm(ddim_invert_step(s, ddim_sample_step(s, zi, ei, t), ei, t) - zi, dim=1) / n
            b = torch.linalg.vector_norm(ddim_sample_step(s, ddim_invert_step(s, zi, ei, t), ei, t) - zi, dim=1) / n
            worst = max(worst, float(a.max()), float(b.max()))
        return worst

    worst, secs = timed(check)
    ok = worst < 1e-12 and secs < 1.0
    acceptance(1, ok, f"inverse pair max relative error {worst:.2e} (< 1e-12) in {secs:.2f}s (< 1s)")
    assert ok


def test_criterion_02_teacher_forced_identity(acceptance, trained_model, codec, test_images):
    torch.manual_seed(0)
    random_model = ToyDenoiser(DenoiserConfig(layout_adapter=False))
    image = test_images[0]

    def traces():
        out = {}
        for name, model in (("random", random_model), ("trained", trained_model)):
            inv = invert(image, model, codec)
            out[name] = max(r["tf_residual"] for r in stepwise_error_trace(inv, model))
        return out

    worst, secs = timed(traces)
    ok = max(worst.values()) < 1e-10 and secs < 10.0
    acceptance(
        2, ok, f"teacher-forced residual random {worst['random']:.1e}, trained {worst['trained']:.1e} (< 1e-10) in {secs:.1f}s (< 10s)"
    )
    assert ok


def test_criterion_03_replay_exactness(acceptance, trained_model, codec, test_images):
    def run():
        inv = invert(test_images[0], trained_model, codec)
        z0 = epsilon_replay(inv, trained_model.schedule)
        return psnr(codec.decode(z0), codec.decode(inv.trajectory[0]))

    value, secs = timed(run)
    ok = value >= 80.0 and secs < 10.0
    acceptance(3, ok, f"replay PSNR vs z*_0 {value:.1f} dB (>= 80) in {secs:.1f}s (< 10s)")
    assert ok


def test_criterion_04_gating_degeneracy(acceptance, trained_model, codec, test_images):
    images = test_images[:5]
    inv = invert(images, trained_model, codec)
    naive = sample(inv, trained_model, run=SamplerRun(ControllerPolicy("naive"))).z0
    L = trained_model.num_attention_layers
    same = []
    for t0, l0 in ((inv.T, -1), (0, L - 1)):
        z = sample(inv, trained_model, run=SamplerRun(ControllerPolicy("tic", t0=t0, l0=l0))).z0
        same.append(torch.equal(z, naive) and np.array_equal(codec.decode(z), codec.decode(naive)))
    ok = all(same)
    acceptance(4, ok, f"TIC(t0=T) and TIC(l0=L-1) bitwise equal to naive on 5 images: {same}")
    assert ok


def test_criterion_05_reconstruction_ordering(acceptance, recon_runs):
    psnrs = {k: float(np.mean(v[0])) for k, v in recon_runs["scores"].items()}
    ssims = {k: float(np.mean(v[1])) for k, v in recon_runs["scores"].items()}
    secs = recon_runs["seconds"]
    margin = psnrs["tic"] - psnrs["naive"]
    ok = (
        psnrs["replay"] > psnrs["tic"] > psnrs["naive"]
        and margin >= PSNR_MARGIN_DB
        and ssims["replay"] > ssims["tic"] > ssims["naive"]
        and secs < 300
    )
    acceptance(
        5,
        ok,
        f"mean PSNR replay {psnrs['replay']:.2f} / TIC {psnrs['tic']:.2f} / naive {psnrs['naive']:.2f} dB, "
        f"margin {margin:+.2f} dB (>= {PSNR_MARGIN_DB}); SSIM {ssims['replay']:.4f} / {ssims['tic']:.4f} / {ssims['naive']:.4f}; "
        f"{N_RECON} images in {secs:.0f}s",
    )
    assert ok


def test_criterion_06_mechanism(acceptance, recon_runs):
    inv, runs = recon_runs["inv"], recon_runs["runs"]
    steps = [t for t, g in runs["tic"].gated.items() if g]
    tic = per_image_eps_error(inv, runs["tic"], steps=steps)
    naive = per_image_eps_error(inv, runs["naive"], steps=steps)
    wins = int((tic < naive).sum())
    ok = wins == len(tic) and len(steps) > 0
    acceptance(
        6,
        ok,
        f"sum_t |eps_t - eps*_(t-1)| over {len(steps)} gated steps smaller under TIC on {wins}/{len(tic)} images "
        f"(mean TIC {float(tic.mean()):.3f} vs naive {float(naive.mean()):.3f})",
    )
    assert ok


def test_criterion_07_concat_identity(acceptance):
    g = np.random.default_rng(7)

    def run():
        worst = 0.0
        for _ in range(100):
            q, k, v, ki, vi = (g.standard_normal((4, 8)) for _ in range(5))
            out = attend_with_plan(Plan.CONCAT, *(torch.from_numpy(a) for a in (q, k, v)), (torch.from_numpy(ki), torch.from_numpy(vi)))
            s1, s2 = q @ k.T / math.sqrt(8), q @ ki.T / math.sqrt(8)
            top = np.maximum(s1.max(1), s2.max(1))[:, None]
            e1, e2 = np.exp(s1 - top), np.exp(s2 - top)
            lam = (e1.sum(1) / (e1.sum(1) + e2.sum(1)))[:, None]
            ref = lam * (e1 @ v) / e1.sum(1)[:, None] + (1 - lam) * (e2 @ vi) / e2.sum(1)[:, None]
            worst = max(worst, float(np.max(np.abs(out.numpy() - ref))))
        return worst

    worst, secs = timed(run)
    ok = worst < 1e-10 and secs < 1.0
    acceptance(7, ok, f"concat vs log-sum-exp mixture max error {worst:.1e} (< 1e-10) over 100 instances in {secs:.2f}s")
    assert ok


def test_criterion_08_mask_guided_boundaries(acceptance, trained_model, codec, dataset):
    spec = dataset.test[0]
    image = dataset.images("test")[0]
    prompt = scene_prompt(spec.replace(x_pos="right" if spec.x_pos != "right" else "left"))
    inv = invert(image, trained_model, codec)

    def z0(policy):
        return edit(image, prompt, trained_model, codec, policy, 7.5, inversion=inv)[1].z0

    concat = z0(ControllerPolicy("concat"))
    tic = z0(ControllerPolicy("tic"))
    ones = z0(ControllerPolicy("mask_guided", token_indices=(1,), threshold=0.0))
    zeros = z0(ControllerPolicy("mask_guided", fixed_mask=np.zeros((8, 8), bool)))
    a, b = torch.equal(ones, concat), torch.equal(zeros, tic)
    ok = a and b
    acceptance(8, ok, f"mask all-ones == concat bitwise: {a}; mask all-zeros == TIC bitwise: {b}")
    assert ok


def test_criterion_09_editing_consistency(acceptance, trained_model, codec, dataset):
    start = time.perf_counter()
    wins, rows = 0, []
    for spec in dataset.test[:N_EDIT]:
        source = spec.replace(x_pos="left")
        target = spec.replace(x_pos="right")
        image, foot_src = render_scene(source)
        _, foot_tgt = render_scene(target)
        background = ~(foot_src | foot_tgt)
        inv = invert(image, trained_model, codec)
        prompt = scene_prompt(target)
        out = {
            kind: edit(image, prompt, trained_model, codec, ControllerPolicy(kind), 7.5, inversion=inv)[0]
            for kind in ("naive", "tic")
        }
        p_tic, p_naive = (region_psnr(out[k], image, background) for k in ("tic", "naive"))
        rows.append((p_tic, p_naive))
        wins += p_tic > p_naive
    secs = time.perf_counter() - start
    ok = wins >= 9 and secs < 300
    mean_tic, mean_naive = np.mean(rows, axis=0)
    acceptance(
        9,
        ok,
        f"background PSNR TIC > naive on {wins}/{N_EDIT} edits (>= 9); mean {mean_tic:.2f} vs {mean_naive:.2f} dB in {secs:.0f}s",
    )
    assert ok


def test_criterion_10_cross_attention_stochastic(acceptance, trained_model, codec, dataset):
    image = dataset.images("test")[1]
    prompt = scene_prompt(dataset.test[1])
    inv = invert(image, trained_model, codec)
    record = sample(inv, trained_model, run=SamplerRun(ControllerPolicy("tic"), 7.5, prompt))
    resolutions = sorted(set(trained_model.attention_resolutions()))
    worst, checked = 0.0, 0
    for t in range(inv.T):
        maps = inv.cache.cross_maps[t]
        _, cap = predict_noise(trained_model, record.latents[t + 1], t + 1, prompt, capture=False)
        for source in (maps, cap.cross_maps):
            for r in resolutions:
                a = aggregate_cross_attention(source, r)
                worst = max(worst, float(np.max(np.abs(a.sum(-1) - 1.0))))
                checked += 1
    ok = worst < 1e-6
    acceptance(10, ok, f"token-axis sums of A_t within {worst:.1e} of 1 (< 1e-6) over {checked} step/resolution maps")
    assert ok


def test_criterion_11_gradient_check(acceptance):
    torch.manual_seed(0)
    model = ToyDenoiser(DenoiserConfig(widths=(8, 16, 16), heads=2, groups=4, time_dim=32, embed_dim=16, latent_size=8))
    worst, secs = timed(lambda: grad_check(model, ProbeConfig(num_params=128)))
    ok = worst < 1e-4 and secs < 60
    acceptance(11, ok, f"reduced-width U-Net max relative gradient error {worst:.1e} (< 1e-4) in {secs:.1f}s")
    assert ok


def test_criterion_12_error_sweep(acceptance):
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(8, 4, 16, 16, generator=g, dtype=torch.float64) * 0.5 + 0.3

    def sweep():
        errors = []
        for T in (10, 25, 50, 100):
            sch = make_schedule(T=T)
            model = AnalyticGaussianPredictor(0.0, 0.5, sch)
            inv = invert_latent(z0, model, sch, record_cache=False)
            rec = sample(inv, model, sch).z0
            errors.append(float(torch.linalg.vector_norm(rec - z0) / torch.linalg.vector_norm(z0)))
        return errors

    errors, secs = timed(sweep)
    ok = all(a > b for a, b in zip(errors, errors[1:])) and secs < 60
    acceptance(12, ok, "free-running error at T=10/25/50/100: " + " > ".join(f"{e:.2e}" for e in errors) + f" in {secs:.1f}s")
    assert ok
