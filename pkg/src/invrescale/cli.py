"""Command-line entry point: train, pretrain-ae, downscale, upscale, eval, roundtrip.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 data
error, 4 variant/file mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .evaluation import evaluate_images, score_pair, write_report
from .imageio import load_image, read_artifact, save_image, write_artifact
from .invnet import SplitMode, SplitSpec
from .latent_codec import AeConfig, ConfigError, FormatError, pretrain_ae
from .model import ModelConfig, RescaleModel, Variant, load_checkpoint, save_checkpoint
from .tensor import InvalidArgument
from .training import (DataError, LossWeights, TrainConfig, list_images, load_dataset, train,
                       write_trace)

log = logging.getLogger("invrescale")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA, EXIT_MISMATCH = 0, 1, 2, 3, 4


class VariantMismatch(RuntimeError):
    pass


# -- run configuration ----------------------------------------------------------------

_TOP_KEYS = {"data_dir", "output_dir", "checkpoint", "trace", "seed", "model", "train",
             "loss", "pretrain", "init_checkpoint"}
_MODEL_KEYS = {"scale", "variant", "blocks_per_stage", "subnet_width", "clamp", "split", "ae"}
_PRETRAIN_KEYS = {"samples", "steps", "batch", "lr"}


def _reject_unknown(section: str, given: dict, allowed: set) -> None:
    extra = set(given) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(extra))}")


def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    loss: LossWeights
    seed: int = 0
    data_dir: Path | None = None
    output_dir: Path = Path(".")
    checkpoint: str = "model.ckpt"
    trace: str = "loss.csv"
    init_checkpoint: Path | None = None
    pretrain: dict = dataclasses.field(default_factory=dict)

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / self.checkpoint

    @property
    def trace_path(self) -> Path:
        return self.output_dir / self.trace


def build_model_config(d: dict, variant: str | None = None, scale: int | None = None) -> ModelConfig:
    _reject_unknown("model", d, _MODEL_KEYS)
    d = dict(d)
    v = Variant(variant or d.pop("variant", "baseline"))
    d.pop("variant", None)
    if scale is not None:
        d["scale"] = scale
    split = d.pop("split", None)
    if split is not None:
        _reject_unknown("model.split", split, {"mode", "alpha_avg_init"})
        d["split"] = SplitSpec(**split)
    elif v is Variant.ALPHA:
        d["split"] = SplitSpec(SplitMode.PRE_SPLIT_ALPHA, True)
    ae = d.pop("ae", None)
    if v is Variant.META:
        ae = ae or {}
        _reject_unknown("model.ae", ae, _fields(AeConfig))
        d["ae"] = AeConfig(**ae)
    return ModelConfig.for_variant(v.value, **d)


def load_run_config(path, overrides: argparse.Namespace | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("config", raw, _TOP_KEYS)
    ov = overrides or argparse.Namespace()
    seed = getattr(ov, "seed", None)
    seed = raw.get("seed", 0) if seed is None else seed
    try:
        model = build_model_config(raw.get("model", {}), getattr(ov, "variant", None),
                                   getattr(ov, "scale", None))
        tdict = dict(raw.get("train", {}))
        _reject_unknown("train", tdict, _fields(TrainConfig) - {"seed"})
        for key in ("betas", "lr_milestones"):
            if key in tdict:
                tdict[key] = tuple(tdict[key])
        tc = TrainConfig(seed=seed, **tdict)
        ldict = raw.get("loss")
        if ldict is None:
            loss = LossWeights.default(model.scale, model.variant)
        else:
            _reject_unknown("loss", ldict, _fields(LossWeights))
            loss = LossWeights(**ldict)
        pre = raw.get("pretrain", {})
        _reject_unknown("pretrain", pre, _PRETRAIN_KEYS)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    base = Path(path).parent
    data_dir = raw.get("data_dir")
    init = raw.get("init_checkpoint")
    return RunConfig(
        model=model, train=tc, loss=loss, seed=seed,
        data_dir=(base / data_dir) if data_dir else None,
        output_dir=base / raw.get("output_dir", "."),
        checkpoint=raw.get("checkpoint", "model.ckpt"),
        trace=raw.get("trace", "loss.csv"),
        init_checkpoint=(base / init) if init else None,
        pretrain=pre,
    )


# -- commands -------------------------------------------------------------------------

def _pretrained_ae(model: RescaleModel, rc: RunConfig) -> None:
    patch = rc.train.patch_size // model.cfg.scale
    pre = rc.pretrain
    res = pretrain_ae(model.cfg.ae, (model.z_channels, patch, patch),
                      samples=pre.get("samples", 64), steps=pre.get("steps", 2000),
                      batch=pre.get("batch", 4), lr=pre.get("lr", 1e-3), seed=rc.seed, ae=model.ae)
    log.info("autoencoder pretraining final loss %.5f", res.final_loss)


def _init_model(rc: RunConfig) -> RescaleModel:
    if rc.init_checkpoint is not None:
        if not rc.init_checkpoint.is_file():
            raise DataError(f"init checkpoint not found: {rc.init_checkpoint}")
        model = load_checkpoint(rc.init_checkpoint)
        if model.cfg != rc.model:
            raise ConfigError("init checkpoint configuration differs from the run configuration")
        return model
    model = RescaleModel(rc.model, seed=rc.seed)
    if model.ae is not None and rc.model.ae.pretrained:
        _pretrained_ae(model, rc)
    return model


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args)
    if rc.data_dir is None:
        raise ConfigError("data_dir is required for training")
    images = load_dataset(rc.data_dir)
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    model = _init_model(rc)
    result = train(model, images, rc.train, rc.loss)
    save_checkpoint(model, rc.checkpoint_path, {"seed": rc.seed})
    write_trace(result.trace, rc.trace_path, every=max(rc.train.log_every, 1))
    print(f"checkpoint: {rc.checkpoint_path}")
    print(f"loss trace: {rc.trace_path}")
    return EXIT_OK


def cmd_pretrain_ae(args) -> int:
    rc = load_run_config(args.config, args)
    if rc.model.variant is not Variant.META:
        raise ConfigError("pretrain-ae needs a meta-variant model configuration")
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    model = RescaleModel(rc.model, seed=rc.seed)
    _pretrained_ae(model, rc)
    save_checkpoint(model, rc.checkpoint_path, {"seed": rc.seed, "stage": "pretrain-ae"})
    print(f"checkpoint: {rc.checkpoint_path}")
    return EXIT_OK


def _load_model(path) -> RescaleModel:
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _load_input(path) -> np.ndarray:
    if not Path(path).is_file():
        raise DataError(f"input image not found: {path}")
    return load_image(path)


def cmd_downscale(args) -> int:
    model = _load_model(args.checkpoint)
    if args.variant and Variant(args.variant) is not model.cfg.variant:
        raise VariantMismatch(f"checkpoint is a {model.cfg.variant.value} model, "
                              f"--variant asked for {args.variant}")
    hr = _load_input(args.input)
    artifact, _ = model.downscale(hr)
    write_artifact(artifact, args.output)
    print(f"wrote {args.output} ({artifact.variant.value}, {artifact.lr_rgb.shape[2]}x{artifact.lr_rgb.shape[1]})")
    return EXIT_OK


def cmd_upscale(args) -> int:
    model = _load_model(args.checkpoint)
    if not Path(args.input).is_file():
        raise DataError(f"input image not found: {args.input}")
    artifact = read_artifact(args.input)
    if artifact.variant is not model.cfg.variant:
        raise VariantMismatch(f"{args.input} holds a {artifact.variant.value} artifact but the "
                              f"checkpoint is a {model.cfg.variant.value} model")
    out = model.upscale(artifact).data
    save_image(out, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def _named_images(directory) -> list[tuple[str, np.ndarray]]:
    paths = list_images(directory)
    if not paths:
        raise DataError(f"no images in {directory}")
    out = []
    for p in paths:
        try:
            out.append((p.name, load_image(p)))
        except Exception as exc:  # unreadable files are skipped, not fatal
            log.warning("skipping %s: %s", p, exc)
    return out


def cmd_eval(args) -> int:
    if args.method == "bicubic":
        model = None
        scale = args.scale or 2
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --method bicubic")
        model = _load_model(args.checkpoint)
        scale = model.cfg.scale
    images = _named_images(args.data)
    usable = []
    for name, img in images:
        h, w = img.shape[-2:]
        if h % (2 * scale) or w % (2 * scale):
            log.warning("skipping %s: %dx%d not divisible by %d", name, h, w, 2 * scale)
            continue
        usable.append((name, img))
    if not usable:
        raise DataError(f"no usable images in {args.data}")
    scores = evaluate_images(usable, scale, model, args.method, Path(args.data).name,
                             args.crop_border)
    write_report(scores, args.report)
    print(f"{len(scores)} images  mean PSNR {np.mean([s.psnr_db for s in scores]):.4f} dB  "
          f"mean SSIM {np.mean([s.ssim for s in scores]):.4f}")
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    model = _load_model(args.checkpoint)
    hr = _load_input(args.input)
    lr_path = Path(args.lr or Path(args.output).with_suffix(".lr.png"))
    artifact, _ = model.downscale(hr)
    write_artifact(artifact, lr_path)
    out = model.upscale(read_artifact(lr_path)).data
    save_image(out, args.output)
    est = load_image(args.output)
    p, s = score_pair(hr, est, args.crop_border)
    print(f"LR {lr_path}  HR {args.output}  PSNR {p:.4f} dB  SSIM {s:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="invrescale", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--scale", type=int, choices=(2, 4))
        p.add_argument("--variant", choices=[v.value for v in Variant])

    p = sub.add_parser("train", help="train a model from a JSON run configuration")
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain-ae", help="pretrain the latent autoencoder on random latents")
    with_config(p)
    p.set_defaults(func=cmd_pretrain_ae)

    p = sub.add_parser("downscale", help="HR image -> LR artifact PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.set_defaults(func=cmd_downscale)

    p = sub.add_parser("upscale", help="LR artifact PNG -> HR image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("eval", help="score a directory of HR images")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--method", choices=("model", "bicubic"), default="model")
    p.add_argument("--scale", type=int, choices=(2, 4))
    p.add_argument("--crop-border", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roundtrip", help="downscale, write, read back and upscale one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--lr")
    p.add_argument("--crop-border", type=int, default=0)
    p.set_defaults(func=cmd_roundtrip)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VariantMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvalidArgument, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
