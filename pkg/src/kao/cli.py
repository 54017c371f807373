"""Command-line entry point: ``kao {gen-data,train,inpaint,eval,figures}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import atomic_write
from .config import RunConfig
from .errors import ConfigError, DataError, DivergenceError, DomainError, KaoError
from .grid import SeededRng
from .imageio import grid_image, read_image, read_mask, write_image
from .metrics import masked_mse, psnr, ssim
from .sampler import SamplerConfig, expected_forward_passes, inpaint, inpaint_batch
from .scenegen import load_dataset, read_manifest, write_dataset
from .trainer import (build_model, load_checkpoint, make_optimizer, read_loss_table, save_checkpoint,
                      train, write_loss_table)

log = logging.getLogger("kao")

RESOLVED_NAME = "resolved.cfg"

# stream indices derived from the run seed
MODEL_INIT_STREAM = 1
SAMPLER_STREAM = 3

ABLATION_ROWS = ("no-conditioning", "lsc-only", "lsc+1xEP", "full")


def ablation_configs(base: SamplerConfig) -> dict[str, SamplerConfig]:
    """The four fixed ablation rows; ``full`` takes its resampling and kernel blend from ``base``."""
    kw = dict(T=base.T, seed=base.seed, kernel=base.kernel)
    return {
        "no-conditioning": SamplerConfig(resample_jumps=0, lsc=False, ep=False, ep_modules=0,
                                         kernel_blend=False, **kw),
        "lsc-only": SamplerConfig(resample_jumps=0, lsc=True, ep=False, ep_modules=0, kernel_blend=False, **kw),
        "lsc+1xEP": SamplerConfig(resample_jumps=0, lsc=True, ep=True, ep_modules=1, kernel_blend=False, **kw),
        "full": SamplerConfig(resample_jumps=base.resample_jumps, lsc=True, ep=True, ep_modules=2,
                              kernel_blend=base.kernel_blend, **kw),
    }


def _derived_seed(seed: int, stream: int) -> int:
    return int(SeededRng(seed).stream(stream).integers(0, 2**63))


def _prepare(args) -> tuple[RunConfig, Path]:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.set("seed", str(args.seed))
    if args.out is not None:
        cfg.set("paths.out", args.out)
    out = Path(cfg["paths.out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / RESOLVED_NAME, cfg.resolved_text().encode("utf-8"))
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    return cfg, out


def cmd_gen_data(args) -> int:
    cfg, out = _prepare(args)
    spec = cfg.scene_spec()
    names = write_dataset(out, spec, cfg["data.count"], cfg["seed"], cfg["data.kind"], cfg["data.mask_ratio"])
    print(f"wrote {len(names)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, out = _prepare(args)
    tcfg = cfg.train_config()
    sched = cfg.schedule()
    data_dir = Path(cfg["paths.data"])
    images = load_dataset(data_dir)
    mcfg = cfg.model_config()
    if images.shape[1:] != (mcfg.in_channels, mcfg.image_size, mcfg.image_size):
        raise DataError(f"dataset images {images.shape[1:]} do not match the model input")
    start = 0
    history = []
    if cfg["train.resume"]:
        model, opt, start = load_checkpoint(cfg["train.resume"], tcfg)
        loss_path = Path(cfg["train.resume"]).with_name("loss.tsv")
        if loss_path.exists():
            history = [row for row in read_loss_table(loss_path) if row[0] < start]
    else:
        model = build_model(mcfg, _derived_seed(cfg["seed"], MODEL_INIT_STREAM))
        opt = make_optimizer(model, tcfg)

    def report(i, v):
        if i % 100 == 0 or i == tcfg.total_iters - 1:
            log.info("iter %d loss %.4f", i, v)

    t0 = time.time()
    model, hist = train(images, tcfg, sched, model, SeededRng(cfg["seed"]), start, opt, report)
    history += hist
    save_checkpoint(out / "model.ckpt", model, opt, tcfg.total_iters)
    write_loss_table(history, out / "loss.tsv")
    print(f"trained iterations {start}..{tcfg.total_iters - 1} in {time.time() - t0:.1f}s; "
          f"checkpoint {out / 'model.ckpt'}")
    return 0


def _load_model(cfg: RunConfig):
    path = Path(cfg["paths.checkpoint"])
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    model, _, _ = load_checkpoint(path)
    return model


def cmd_inpaint(args) -> int:
    cfg, out = _prepare(args)
    model = _load_model(cfg)
    sched = cfg.schedule()
    scfg = cfg.sampler_config()
    image = read_image(args.image)
    mask = read_mask(args.mask)
    c = model.cfg
    if image.shape != (c.in_channels, c.image_size, c.image_size) or mask.shape[1:] != image.shape[1:]:
        raise DataError(f"image {image.shape} / mask {mask.shape} do not match the model input")
    every = cfg["sampler.trace_every"]
    trace = None
    if every > 0:
        def trace(t, x):
            if t % every == 0:
                write_image(x, out / "trace" / f"step_{t:05d}.{'pgm' if x.shape[0] == 1 else 'ppm'}")
    model.forward_passes = 0
    t0 = time.time()
    result = inpaint(image, mask, model, sched, scfg, SeededRng(_derived_seed(cfg["seed"], SAMPLER_STREAM)), trace)
    wall = time.time() - t0
    ext = "pgm" if result.shape[0] == 1 else "ppm"
    clamped = write_image(result, out / f"inpainted.{ext}")
    print(f"forward passes: {model.forward_passes} (expected {expected_forward_passes(sched.T, scfg)})")
    print(f"wall time: {wall:.2f}s")
    if clamped:
        print(f"clamped {clamped} out-of-range values")
    return 0


def cmd_eval(args) -> int:
    cfg, out = _prepare(args)
    data_dir = Path(args.dataset or cfg["paths.eval_data"])
    model = _load_model(cfg)
    sched = cfg.schedule()
    rows = read_manifest(data_dir)
    images, masks = load_dataset(data_dir, with_masks=True)
    if np.all(masks == 1):
        raise DataError("evaluation masks contain no holes")
    base = cfg.sampler_config()
    master = SeededRng(_derived_seed(cfg["seed"], SAMPLER_STREAM))
    bs = max(1, cfg["eval.batch_size"])
    ext = "pgm" if images.shape[1] == 1 else "ppm"
    lines = ["config\tmasked_mse\tpsnr\tssim\tforward_passes\n"]
    for label, scfg in ablation_configs(base).items():
        t0 = time.time()
        model.forward_passes = 0
        outputs = []
        batches = 0
        for s in range(0, len(images), bs):
            batches += 1
            idx = range(s, min(s + bs, len(images)))
            outputs.append(inpaint_batch(images[s:s + bs], masks[s:s + bs], model, sched, scfg,
                                         [master.stream(i) for i in idx]))
        result = np.concatenate(outputs)
        mses, psnrs, ssims = [], [], []
        for i, (name, _, _) in enumerate(rows):
            hole = 1.0 - masks[i]
            mses.append(masked_mse(result[i], images[i], hole))
            psnrs.append(psnr(result[i], images[i]))
            ssims.append(ssim(result[i], images[i], cfg["eval.ssim_window"]))
            write_image(result[i], out / label / f"{Path(name).stem}.{ext}")
        # passes per image: every batch runs the full chain once
        per_image = model.forward_passes // batches
        lines.append(f"{label}\t{float(np.mean(mses))!r}\t{float(np.mean(psnrs))!r}\t{float(np.mean(ssims))!r}"
                     f"\t{per_image}\n")
        log.info("%s: masked_mse %.5f (%.1fs)", label, np.mean(mses), time.time() - t0)
    atomic_write(out / "metrics.tsv", "".join(lines).encode("utf-8"))
    print("".join(lines), end="")
    return 0


def cmd_figures(args) -> int:
    cfg, out = _prepare(args)
    eval_dir = Path(args.eval_dir)
    data_dir = Path(args.dataset or cfg["paths.eval_data"])
    rows = read_manifest(data_dir)
    images, masks = load_dataset(data_dir, with_masks=True)
    figs = []
    for i, (name, _, _) in enumerate(rows):
        stem = Path(name).stem
        ext = Path(name).suffix
        observed = np.where(np.broadcast_to(masks[i], images[i].shape) == 1, images[i], -1.0)
        row = [observed, images[i]]
        for label in ABLATION_ROWS:
            path = eval_dir / label / f"{stem}{ext}"
            if not path.exists():
                raise DataError(f"missing eval output {path}")
            row.append(read_image(path))
        fig = grid_image([row])
        write_image(fig, out / f"figure_{stem}{ext}")
        figs.append(row)
    write_image(grid_image(figs[:8]), out / f"overview{Path(rows[0][0]).suffix}")
    print(f"wrote {len(figs)} figure rows to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kao", description="Kernel-adaptive diffusion inpainting at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override the config's seed")
        sp.add_argument("--out", help="output directory (overrides paths.out)")

    sp = sub.add_parser("gen-data", help="write procedural scenes and a manifest")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the denoiser on paths.data")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("inpaint", help="inpaint one image given its keep-mask (255 = observed)")
    common(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask", required=True)
    sp.set_defaults(func=cmd_inpaint)

    sp = sub.add_parser("eval", help="run the four ablation rows over an evaluation set")
    common(sp)
    sp.add_argument("dataset", nargs="?", help="evaluation set (defaults to paths.eval_data)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("figures", help="compose input/target/per-method figure grids")
    common(sp)
    sp.add_argument("eval_dir", help="output directory of a previous eval run")
    sp.add_argument("--dataset", help="evaluation set (defaults to paths.eval_data)")
    sp.set_defaults(func=cmd_figures)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, DomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 4
    except KaoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
