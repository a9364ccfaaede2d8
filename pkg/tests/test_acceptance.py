"""Acceptance checks. Each test prints one PASS/FAIL line with the measured value.

Run alone with ``pytest tests/test_acceptance.py -v``; the training-based
checks are marked ``slow`` (about 26 minutes together on one CPU core).
"""
import base64
import csv
import json
import time

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from invrescale import tensor as T
from invrescale.cli import main as cli_main
from invrescale.evaluation import mean_psnr, save_dataset, synthetic_images, to_8bit
from invrescale.imageio import (LATENT_KEYWORD, artifact_to_png, decode_png, encode_png,
                                png_to_artifact)
from invrescale.invnet import BlockStack, SplitMode, SplitSpec, recover_removed_channel, split_channels
from invrescale.latent_codec import (AeConfig, AutoEncoder, dequantize_code, pretrain_ae,
                                     reconstruction_mse)
from invrescale.metrics import psnr, ssim
from invrescale.model import ModelConfig, RescaleModel
from invrescale.tensor import Tensor
from invrescale.training import LossWeights, TrainConfig, train
from invrescale.wavelet import HaarStack, haar_forward, haar_forward_tensor, haar_inverse, haar_inverse_tensor

from _oracles import gradcheck, psnr_reference

TOY_SEED = 0
TOY_ITERS = 2000
TOY_PATCH = 32


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok
    return emit


def perturb(params, rng, sd=0.01):
    """Identity-initialised parameters nudged away from zero."""
    for p in params:
        p.data += rng.normal(0, sd, p.shape).astype(np.float32)


# -- 1 ---------------------------------------------------------------------------------

def test_haar_perfect_reconstruction(report):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst_err = worst_energy = 0.0
    for _ in range(100):
        x = rng.random((3, 64, 64)).astype(np.float32)
        s = haar_forward(Tensor(x))
        back = haar_inverse(s).data
        worst_err = max(worst_err, float(np.abs(back - x).max()))
        e_in = np.sum(x.astype(np.float64) ** 2)
        e_out = np.sum(s.stacked().data.astype(np.float64) ** 2)
        worst_energy = max(worst_energy, abs(e_out - e_in) / e_in)
    dt = time.perf_counter() - t0
    ok = worst_err < 1e-6 and worst_energy < 1e-5 and dt < 5
    report("Haar perfect reconstruction", ok,
           f"max err {worst_err:.2e} (<1e-6), energy rel {worst_energy:.2e} (<1e-5), {dt:.2f}s (<5s)")
    assert ok


# -- 2 ---------------------------------------------------------------------------------

def test_invblock_stack_bijectivity(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    parts, ok = [], True
    for depth, tol in ((1, 1e-4), (4, 1e-4), (8, 1e-3)):
        stack = BlockStack.build(depth, 3, 9, rng)
        perturb([p for _, p in stack.named_parameters()], rng)
        x_l = Tensor(rng.random((3, 32, 32)))
        x_h = Tensor(rng.normal(0, 0.1, (9, 32, 32)))
        y_l, y_h = stack.forward(x_l, x_h)
        b_l, b_h = stack.inverse(y_l, y_h)
        err = max(np.abs(b_l.data - x_l.data).max(), np.abs(b_h.data - x_h.data).max())
        ok &= err < tol
        parts.append(f"depth {depth}: {err:.2e} (<{tol:g})")
    dt = time.perf_counter() - t0
    ok &= dt < 10
    report("InvBlock-stack bijectivity", ok, ", ".join(parts) + f", {dt:.2f}s (<10s)")
    assert ok


# -- 3 ---------------------------------------------------------------------------------

def test_removed_channel_recovery(report):
    rng = np.random.default_rng(2)
    spec = SplitSpec(SplitMode.PRE_SPLIT_ALPHA, alpha_avg_init=True)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        stack = rng.normal(size=(12, 16, 16)).astype(np.float32)
        out = split_channels(HaarStack.from_tensor(Tensor(stack)), spec)
        x_m = recover_removed_channel(T.channels(out.x_l, 3, 4), out.x_h, 3)
        rebuilt = np.concatenate([out.x_l.data[:3], x_m.data, out.x_h.data])
        worst = max(worst, float(np.abs(rebuilt - stack).max()))
    dt = time.perf_counter() - t0
    ok = worst < 1e-5 and dt < 2
    report("Removed-channel recovery", ok, f"max err {worst:.2e} (<1e-5), {dt:.2f}s (<2s)")
    assert ok


# -- 4 ---------------------------------------------------------------------------------

def _gradient_cases(rng):
    def r(*shape):
        return rng.normal(size=shape)

    def off_zero(*shape):
        x = r(*shape)
        return np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12), x)

    distinct = rng.permutation(32).reshape(2, 4, 4) / 32.0 + 1e-3 * r(2, 4, 4)
    ae = {}

    def ae_loss(z):
        if "net" not in ae:
            ae["net"] = AutoEncoder(3, AeConfig(conv_layers=2, hidden_width=4), np.random.default_rng(0))
            for p in ae["net"].parameters():
                p.data = p.data.astype(np.float64)
        return reconstruction_mse(ae["net"], z)

    def coupling(xl, xh):
        block = BlockStack.build(1, 3, 9, np.random.default_rng(3), width=4).blocks[0]
        for p in (p for _, p in block.named_parameters()):
            p.data = (p.data + np.random.default_rng(4).normal(0, 0.1, p.shape)).astype(np.float64)
        y_l, y_h = block.forward(xl, xh)
        return T.sum_(T.square(y_l)) + T.sum_(T.square(y_h))

    return {
        "add": (lambda a, b: T.sum_(T.square(T.add(a, b))), [r(2, 3), r(2, 3)]),
        "sub": (lambda a, b: T.sum_(T.square(T.sub(a, b))), [r(2, 3), r(2, 3)]),
        "mul": (lambda a, b: T.sum_(T.mul(a, b)), [r(2, 3), r(2, 3)]),
        "neg": (lambda a: T.sum_(T.square(T.neg(a))), [r(2, 3)]),
        "scale": (lambda a: T.sum_(T.square(T.scale(a, 1.7))), [r(2, 3)]),
        "exp": (lambda a: T.sum_(T.exp(a)), [r(2, 3)]),
        "abs": (lambda a: T.mean(T.absolute(a)), [off_zero(2, 3)]),
        "square": (lambda a: T.sum_(T.square(a)), [r(2, 3)]),
        "sigmoid": (lambda a: T.sum_(T.square(T.sigmoid(a))), [r(2, 3)]),
        "leaky_relu": (lambda a: T.sum_(T.square(T.leaky_relu(a, 0.2))), [off_zero(2, 3)]),
        "sum": (lambda a: T.sum_(T.square(a)), [r(4)]),
        "mean": (lambda a: T.mean(T.square(a)), [r(4)]),
        "channel_sum": (lambda a: T.sum_(T.square(T.channel_sum(a))), [r(3, 2, 2)]),
        "channel_mean": (lambda a: T.sum_(T.square(T.channel_mean(a))), [r(3, 2, 2)]),
        "take": (lambda a: T.sum_(T.square(a[1:, ::2])), [r(3, 4)]),
        "concat": (lambda a, b: T.sum_(T.square(T.concat_channels([a, b]))), [r(2, 2, 2), r(1, 2, 2)]),
        "reshape": (lambda a: T.sum_(T.exp(T.reshape(a, (6,)))), [r(2, 3)]),
        "conv2d": (lambda x, w, b: T.sum_(T.square(T.conv2d(x, w, b))), [r(2, 5, 5), r(3, 2, 3, 3), r(3)]),
        "maxpool2": (lambda a: T.sum_(T.square(T.maxpool2(a))), [distinct]),
        "upsample": (lambda a: T.sum_(T.exp(T.upsample_nearest2(a))), [r(2, 2, 2)]),
        "pixel_unshuffle": (lambda a: T.sum_(T.exp(T.pixel_unshuffle(a, 2))), [r(2, 4, 4)]),
        "pixel_shuffle": (lambda a: T.sum_(T.exp(T.pixel_shuffle(a, 2))), [r(8, 2, 2)]),
        "haar_forward": (lambda a: T.sum_(T.exp(haar_forward_tensor(a))), [r(2, 4, 4)]),
        "haar_inverse": (lambda a: T.sum_(T.exp(haar_inverse_tensor(a))), [r(8, 2, 2)]),
        "recover_channel": (lambda a, h: T.sum_(T.square(recover_removed_channel(a, h, 3))),
                            [r(1, 2, 2), r(8, 2, 2)]),
        "coupling": (coupling, [r(3, 4, 4), r(9, 4, 4)]),
        "autoencoder": (ae_loss, [r(3, 8, 8)]),
    }


def test_autodiff_gradients(report):
    cases = _gradient_cases(np.random.default_rng(4))
    t0 = time.perf_counter()
    failed, worst = [], 0.0
    for name, (build, inputs) in cases.items():
        try:
            worst = max(worst, gradcheck(build, inputs))
        except AssertionError as exc:
            failed.append(f"{name} ({exc})")
    dt = time.perf_counter() - t0
    ok = not failed and dt < 30
    detail = f"{len(cases)} ops, worst rel err {worst:.2e}, {dt:.2f}s (<30s)"
    if failed:
        detail += "; failed: " + "; ".join(failed)
    report("Autodiff finite-difference check", ok, detail)
    assert ok


# -- 5 ---------------------------------------------------------------------------------

def test_model_bijectivity_true_latent(report):
    img = np.random.default_rng(5).random((3, 64, 64)).astype(np.float32)
    parts, ok = [], True
    for scale, tol in ((2, 1e-3), (4, 5e-3)):
        for variant in ("baseline", "alpha", "meta"):
            kw = {"ae": AeConfig(hidden_width=8)} if variant == "meta" else {}
            m = RescaleModel(ModelConfig.for_variant(variant, scale, blocks_per_stage=4, **kw), seed=scale)
            perturb(m.net_parameters(), np.random.default_rng(scale))
            out = m.forward(Tensor(img))
            err = float(np.abs(m.inverse(out.lr_rgb, out.alpha_logit, out.z).data - img).max())
            ok &= err < tol
            parts.append(f"x{scale} {variant} {err:.1e}")
    report("End-to-end bijectivity with true z", ok, ", ".join(parts) + " (<1e-3 at x2, <5e-3 at x4)")
    assert ok


# -- 6 ---------------------------------------------------------------------------------

def test_file_roundtrip(report):
    rng = np.random.default_rng(6)
    alpha_m = RescaleModel(ModelConfig.for_variant("alpha", 2, blocks_per_stage=2), seed=1)
    meta_m = RescaleModel(ModelConfig.for_variant("meta", 2, blocks_per_stage=2,
                                                  ae=AeConfig(hidden_width=8)), seed=1)
    for m in (alpha_m, meta_m):
        perturb(m.net_parameters(), rng)
    hr = rng.random((3, 64, 64)).astype(np.float32)
    details, ok = [], True
    for name, m in (("alpha", alpha_m), ("meta", meta_m)):
        art, _ = m.downscale(hr)
        first = encode_png(artifact_to_png(art))
        back = png_to_artifact(decode_png(first))
        second = encode_png(artifact_to_png(back))
        same = first == second
        rgb_err = float(np.abs(back.lr_rgb.astype(np.float64) - np.clip(art.lr_rgb, 0, 1)).max())
        ok &= same and rgb_err <= 1 / 510 + 1e-9
        line = f"{name}: bytes identical={same}, rgb err {rgb_err:.5f}"
        if name == "alpha":
            a_err = float(np.abs(back.alpha.astype(np.float64) - art.alpha).max())
            ok &= a_err <= 1 / 510 + 1e-7
            line += f", alpha err {a_err:.5f}"
        else:
            chunk = decode_png(first).text(LATENT_KEYWORD)
            exact = back.meta == art.meta and base64.b64decode(chunk) == art.meta.to_bytes()
            code = m.forward(Tensor(hr)).code.s.data
            deq = dequantize_code(back.meta).s.data
            bound = (code.max() - code.min()) / 256
            c_err = float(np.abs(deq.astype(np.float64) - code).max())
            ok &= exact and c_err <= bound * (1 + 1e-6)
            line += f", code exact={exact}, code err {c_err:.2e} (<= {bound:.2e})"
        details.append(line)
    report("File roundtrip", ok, "; ".join(details) + f" (image bound {1 / 510:.5f})")
    assert ok


# -- 7 ---------------------------------------------------------------------------------

def test_metric_fidelity(report):
    rng = np.random.default_rng(7)
    dp = ds = 0.0
    for _ in range(20):
        a = rng.random((48, 48))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.2), a.shape), 0, 1)
        dp = max(dp, abs(psnr(a, b) - psnr_reference(a, b)))
        sk = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                   use_sample_covariance=False)
        ds = max(ds, abs(ssim(a, b) - sk))
    x = rng.random((48, 48))
    di = abs(ssim(x, x) - 1.0)
    ok = dp < 1e-6 and ds < 1e-4 and di < 1e-9
    report("Metric fidelity", ok,
           f"PSNR diff {dp:.1e} dB (<1e-6), SSIM diff {ds:.1e} (<1e-4), SSIM(x,x)-1 {di:.1e} (<1e-9)")
    assert ok


# -- shared toy training ----------------------------------------------------------------

def toy_split():
    imgs = [to_8bit(i) for i in synthetic_images(20, 96, seed=TOY_SEED)]
    return imgs[:16], imgs[16:]


def toy_run(variant, batch=4, **model_kw):
    train_set, held = toy_split()
    cfg = ModelConfig.for_variant(variant, 2, blocks_per_stage=4, **model_kw)
    model = RescaleModel(cfg, seed=TOY_SEED)
    return model, train_set, held, TrainConfig(iterations=TOY_ITERS, batch=batch, patch_size=TOY_PATCH,
                                               seed=TOY_SEED, log_every=0)


@pytest.fixture(scope="module")
def trained_pair():
    out = {}
    t0 = time.perf_counter()
    for variant in ("baseline", "alpha"):
        model, train_set, held, tc = toy_run(variant)
        res = train(model, train_set, tc, LossWeights.default(2, variant))
        out[variant] = (res, mean_psnr(model, held))
    out["seconds"] = time.perf_counter() - t0
    return out


# -- 8 ---------------------------------------------------------------------------------

@pytest.mark.slow
def test_ae_pretraining_effect(report):
    t0 = time.perf_counter()
    z_shape = (9, TOY_PATCH // 2, TOY_PATCH // 2)
    held_z = Tensor(np.random.default_rng(99).standard_normal((8,) + z_shape).astype(np.float32))
    psnrs = {}
    for pretrained in (True, False):
        cfg = AeConfig(conv_layers=4, pretrained=pretrained)
        model, train_set, held, tc = toy_run("meta", batch=2, ae=cfg)
        if pretrained:
            before = reconstruction_mse(model.ae, held_z).item()
            pretrain_ae(cfg, z_shape, samples=64, steps=2000, seed=TOY_SEED, ae=model.ae)
            after = reconstruction_mse(model.ae, held_z).item()
        train(model, train_set, tc, LossWeights.default(2, "meta"))
        psnrs[pretrained] = mean_psnr(model, held)
    drop = 1 - after / before
    dt = time.perf_counter() - t0
    ok = drop >= 0.5 and psnrs[True] >= psnrs[False] and dt < 15 * 60
    report("AE pretraining effect", ok,
           f"held-out latent MSE {before:.3f} -> {after:.3f} ({drop:.0%} lower, need >=50%); "
           f"joint PSNR pretrained {psnrs[True]:.3f} dB vs scratch {psnrs[False]:.3f} dB (need >=); "
           f"{dt / 60:.1f} min (<15)")
    assert ok


# -- 9 ---------------------------------------------------------------------------------

@pytest.mark.slow
def test_alpha_beats_baseline(report, trained_pair):
    base, alpha = trained_pair["baseline"][1], trained_pair["alpha"][1]
    dt = trained_pair["seconds"]
    ok = alpha - base >= 0.5 and dt < 30 * 60
    report("Alpha channel beats zero-latent baseline", ok,
           f"held-out PSNR alpha {alpha:.3f} dB vs baseline {base:.3f} dB, "
           f"gain {alpha - base:+.3f} dB (need >=0.5); {dt / 60:.1f} min (<30)")
    assert ok


@pytest.mark.slow
def test_toy_training_loss_decreases(trained_pair):
    for variant in ("baseline", "alpha"):
        totals = trained_pair[variant][0].totals()
        assert totals[-100:].mean() < totals[:100].mean()


# -- 10 --------------------------------------------------------------------------------

def test_determinism(tmp_path, report):
    save_dataset(synthetic_images(4, 32, seed=10), tmp_path / "data")
    cfg = {"data_dir": "data", "seed": 11,
           "model": {"scale": 2, "variant": "alpha", "blocks_per_stage": 2, "subnet_width": 8},
           "train": {"iterations": 20, "batch": 2, "patch_size": 16, "log_every": 5}}
    blobs = []
    for run in ("a", "b"):
        cfg["output_dir"] = run
        path = tmp_path / f"{run}.json"
        path.write_text(json.dumps(cfg))
        assert cli_main(["train", "--config", str(path)]) == 0
        ck = tmp_path / run / "model.ckpt"
        rep = tmp_path / run / "eval.csv"
        assert cli_main(["eval", "--checkpoint", str(ck), "--data", str(tmp_path / "data"),
                         "--report", str(rep)]) == 0
        blobs.append((ck.read_bytes(), rep.read_bytes(), (tmp_path / run / "loss.csv").read_bytes()))
    same = [x == y for x, y in zip(*blobs)]
    rows = len(list(csv.DictReader((tmp_path / "a" / "eval.csv").open())))
    ok = all(same) and rows == 4
    report("Determinism", ok, f"checkpoint identical={same[0]}, eval CSV identical={same[1]}, "
                              f"loss trace identical={same[2]}")
    assert ok
