"""Command-line surface: split, stain, lrfind, train, eval, explain, bench."""

from __future__ import annotations

import csv
import itertools
import sys
import time
from pathlib import Path
from typing import Optional

import click
import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    AugmentConfig,
    BatchSpec,
    folder_provider,
    load_split_file,
    resize_bilinear,
    save_split_file,
    scan_dataset,
    stratified_split,
)
from .gradcam import grad_cam, overlay, write_cam_csv
from .metrics import (
    evaluate,
    macro_roc,
    one_vs_rest_curves,
    write_confusion_csv,
    write_roc_csv,
    write_summary_csv,
)
from .network import build_network
from .optim import TrainStage, lr_range_test, train as run_train
from .plots import line_plot_svg
from .rng import RngStream
from .stain import StainNormalizer, load_stain_model, normalize_image, save_stain_model
from .tensor import Tensor


def _load_config(config_path: Optional[str], overrides: dict) -> RunConfig:
    cfg = RunConfig.from_file(config_path) if config_path else RunConfig()
    cfg.merge({k: v for k, v in overrides.items() if v is not None})
    if cfg["threads"] > 0:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=cfg["threads"])
    return cfg


def _augment_from_config(cfg: RunConfig) -> Optional[AugmentConfig]:
    if not cfg["aug.enabled"]:
        return None
    return AugmentConfig(
        hflip=cfg["aug.hflip"], vflip=cfg["aug.vflip"],
        rotations=cfg.ints("aug.rotations"),
        zoom_range=(1.0, cfg["aug.zoom_max"]),
        jitter_px=cfg["aug.jitter_px"], brightness=cfg["aug.brightness"],
        contrast=cfg["aug.contrast"], warp_magnitude=cfg["aug.warp_magnitude"],
        blur_sigma=(0.0, cfg["aug.blur_sigma_max"]),
        elastic_alpha=cfg["aug.elastic_alpha"],
        elastic_sigma=cfg["aug.elastic_sigma"], prob=cfg["aug.prob"])


def _spec_from_config(cfg: RunConfig, seed: int) -> BatchSpec:
    return BatchSpec(batch_size=cfg["data.batch_size"],
                     image_size=cfg["data.image_size"],
                     means=cfg.floats("data.channel_means"),
                     stds=cfg.floats("data.channel_stds"), seed=seed)


def _provider(cfg: RunConfig, root: str, split_file: str, seed: int,
              augment: bool, stain: Optional[str]):
    index = load_split_file(scan_dataset(root), split_file)
    stain_model = load_stain_model(stain) if stain else None
    return folder_provider(index, _spec_from_config(cfg, seed),
                           augment=_augment_from_config(cfg) if augment else None,
                           stain_model=stain_model)


@click.group()
def main():
    """Histology texture classification toolkit."""


# ---------------------------------------------------------------------- split

@main.command()
@click.option("--root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--seed", required=True, type=int)
@click.option("--ratios", default="0.6,0.2,0.2", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def split(root, seed, ratios, out):
    """Index a dataset tree and write a stratified split file."""
    parts = tuple(float(v) for v in ratios.split(","))
    if len(parts) != 3:
        raise click.ClickException(f"need three ratios, got {ratios!r}")
    index = stratified_split(scan_dataset(root), parts, seed=seed)
    save_split_file(index, out)
    for warning in index.warnings:
        click.echo(f"warning: {warning}", err=True)
    counts = index.split_counts()
    click.echo(f"{counts['train']}/{counts['val']}/{counts['test']} "
               f"train/val/test over {len(index.class_names)} classes -> {out}")


# ---------------------------------------------------------------------- stain

@main.group()
def stain():
    """Fit a stain model or apply one to an image tree."""


@stain.command("fit")
@click.option("--target", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
def stain_fit(target, out, config_path, seed):
    """Estimate the stain basis and density percentiles of the target image."""
    cfg = _load_config(config_path, {"seed": seed})
    with Image.open(target) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    norm = StainNormalizer(
        fit_lambda=cfg["stain.fit_lambda"],
        density_lambda=cfg["stain.density_lambda"],
        background_beta=cfg["stain.background_beta"],
        max_iters=cfg["stain.max_iters"], tol=cfg["stain.tol"],
        percentile=cfg["stain.percentile"], max_pixels=cfg["stain.max_pixels"],
        seed=cfg["seed"]).fit(rgb)
    save_stain_model(norm.model_, out)
    self_out = norm.transform(rgb)
    mad = float(np.abs(self_out.astype(float) - rgb.astype(float)).mean())
    click.echo(f"stain model -> {out} (self-normalization mean abs diff "
               f"{mad:.2f}/255)")


@stain.command("apply")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def stain_apply(model_path, root, out):
    """Normalize every image under root, mirroring the directory layout."""
    model = load_stain_model(model_path)
    index = scan_dataset(root)
    out_root = Path(out)
    blanks = 0
    total = 0
    for cls in index.class_names:
        (out_root / cls).mkdir(parents=True, exist_ok=True)
        for rel in index.files[cls]:
            with Image.open(Path(root) / rel) as img:
                rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
            result, blank = normalize_image(rgb, model)
            blanks += int(blank)
            total += 1
            target = out_root / Path(rel).with_suffix(".png")
            Image.fromarray(result).save(target)
    click.echo(f"normalized {total} images -> {out} "
               f"({blanks} blank pass-throughs)")


# --------------------------------------------------------------------- lrfind

@main.command()
@click.option("--root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split-file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--stain", "stain_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--pretrained", type=click.Path(exists=True, dir_okay=False))
def lrfind(root, split_file, out_dir, config_path, seed, stain_path, pretrained):
    """Sweep learning rates on a throwaway model and plot the loss curve."""
    cfg = _load_config(config_path, {"seed": seed})
    seed = cfg["seed"]
    provider = _provider(cfg, root, split_file, seed, augment=True,
                         stain=stain_path)
    stream = RngStream(seed)
    model = build_network(
        num_classes=cfg["model.num_classes"], input_size=cfg["data.image_size"],
        dropout=(cfg["model.dropout1"], cfg["model.dropout2"]), rng=stream,
        pretrained=(load_checkpoint(pretrained).model_tensors()
                    if pretrained else None),
        bn_eps=cfg["model.bn_eps"], bn_momentum=cfg["model.bn_momentum"])

    def batches():
        for epoch in itertools.count():
            yield from provider.train_batches(epoch)

    result = lr_range_test(
        model, batches(), lr_lo=cfg["lrfind.lr_lo"], lr_hi=cfg["lrfind.lr_hi"],
        iters=cfg["lrfind.iters"], smooth_beta=cfg["lrfind.smooth_beta"],
        divergence_factor=cfg["lrfind.divergence_factor"],
        betas=(cfg["train.beta1"], cfg["train.beta2"]),
        weight_decay=cfg["train.weight_decay"], rng=stream)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "lrfind.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "lr", "loss", "smoothed_loss"])
        for i, (lr, loss, sm) in enumerate(zip(result.lrs, result.losses,
                                               result.smoothed)):
            writer.writerow([i, f"{lr:.9g}", f"{loss:.9g}", f"{sm:.9g}"])
    finite = np.isfinite(result.smoothed)
    line_plot_svg(out / "lrfind.svg",
                  [("smoothed loss", result.lrs[finite].tolist(),
                    result.smoothed[finite].tolist())],
                  title="learning-rate range test", xlabel="learning rate",
                  ylabel="smoothed loss", log_x=True)
    if result.lr_lo_too_high:
        click.echo("warning: diverged immediately; lr_lo looks too high", err=True)
    click.echo(f"suggested lr_max: {result.suggested_lr:.6g}")


# ---------------------------------------------------------------------- train

@main.command(name="train")
@click.option("--root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split-file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", required=True, type=int)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--stain", "stain_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--pretrained", type=click.Path(exists=True, dir_okay=False))
@click.option("--resume", type=click.Path(exists=True, dir_okay=False),
              help="checkpoint to resume from (epoch granularity)")
def train_cmd(root, split_file, out_dir, seed, config_path, stain_path,
              pretrained, resume):
    """Two-stage fine-tuning: head-only epochs, then the full network."""
    cfg = _load_config(config_path, {"seed": seed})
    provider = _provider(cfg, root, split_file, seed, augment=True,
                         stain=stain_path)
    stream = RngStream(seed)
    model = build_network(
        num_classes=cfg["model.num_classes"], input_size=cfg["data.image_size"],
        dropout=(cfg["model.dropout1"], cfg["model.dropout2"]), rng=stream,
        pretrained=(load_checkpoint(pretrained).model_tensors()
                    if pretrained else None),
        bn_eps=cfg["model.bn_eps"], bn_momentum=cfg["model.bn_momentum"])
    start_epoch = 0
    if resume:
        ck = load_checkpoint(resume)
        model.load_state(ck.model_tensors())
        start_epoch = ck.epoch + 1
        click.echo(f"resuming after epoch {ck.epoch} (step {ck.schedule_step})")

    explicit = cfg.floats("train.group_lrs") or None
    if explicit is not None and len(explicit) != 4:
        raise click.ClickException("train.group_lrs needs exactly 4 values")
    stages = [
        TrainStage(groups=frozenset({4}), epochs=cfg["train.head_epochs"],
                   lr_max=cfg["train.lr_max"], warmup_frac=cfg["train.warmup_frac"]),
        TrainStage(groups=frozenset({1, 2, 3, 4}), epochs=cfg["train.full_epochs"],
                   lr_max=cfg["train.lr_max"], group_lrs=explicit,
                   warmup_frac=cfg["train.warmup_frac"]),
    ]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_train(
        model, provider, stages, rng=stream,
        betas=(cfg["train.beta1"], cfg["train.beta2"]), eps=cfg["train.eps"],
        weight_decay=cfg["train.weight_decay"],
        class_names=provider.class_names, checkpoint_dir=out,
        log_path=out / "train_log.csv", start_epoch=start_epoch,
        on_epoch=lambda row: click.echo(
            f"epoch {row['epoch']}: train {row['train_loss']} "
            f"val {row['val_loss']} err {row['val_error_rate']}"))

    if result.rows:
        epochs = [int(r["epoch"]) for r in result.rows]
        line_plot_svg(out / "loss.svg",
                      [("train", epochs, [float(r["train_loss"]) for r in result.rows]),
                       ("val", epochs, [float(r["val_loss"]) for r in result.rows])],
                      title="loss", xlabel="epoch", ylabel="loss")
        line_plot_svg(out / "error_rate.svg",
                      [("val error", epochs,
                        [float(r["val_error_rate"]) for r in result.rows])],
                      title="validation error rate", xlabel="epoch", ylabel="error")
    click.echo(f"best val loss {result.best_val_loss:.6g} "
               f"(epoch {result.best_epoch}) -> {out}")


# ----------------------------------------------------------------------- eval

@main.command(name="eval")
@click.option("--checkpoint", "ckpt_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split-file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", "split_name", default="test", show_default=True,
              type=click.Choice(["train", "val", "test"]))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--stain", "stain_path", type=click.Path(exists=True, dir_okay=False))
def eval_cmd(ckpt_path, root, split_file, split_name, out_dir, config_path,
             stain_path):
    """Accuracy, confusion matrix and one-vs-rest ROC curves for a split."""
    cfg = _load_config(config_path, {})
    ck = load_checkpoint(ckpt_path)
    model = build_network(
        num_classes=cfg["model.num_classes"], input_size=cfg["data.image_size"],
        dropout=(cfg["model.dropout1"], cfg["model.dropout2"]),
        bn_eps=cfg["model.bn_eps"], bn_momentum=cfg["model.bn_momentum"])
    model.load_state(ck.model_tensors())
    provider = _provider(cfg, root, split_file, cfg["seed"], augment=False,
                         stain=stain_path)
    names = ck.class_names or list(provider.class_names)

    result = evaluate(model, provider.eval_batches(split_name))
    curves = one_vs_rest_curves(result.probs, result.labels)
    summary = macro_roc(curves)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "probabilities.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "prediction", *names])
        for label, pred, row in zip(result.labels, result.predictions, result.probs):
            writer.writerow([label, pred, *(f"{p:.9g}" for p in row)])
    write_confusion_csv(result.confusion, names, out / "confusion.csv")
    write_roc_csv(curves, names, out / "roc.csv")
    write_summary_csv(result.accuracy, summary, out / "summary.csv")
    line_plot_svg(out / "roc.svg",
                  [(f"{name} (auc {c.auc:.3f})", c.fpr.tolist(), c.tpr.tolist())
                   for name, c in zip(names, curves)],
                  title=f"one-vs-rest ROC ({split_name})",
                  xlabel="false positive rate", ylabel="true positive rate")
    click.echo(f"accuracy: {100 * result.accuracy:.1f}%  "
               f"macro AUC: {summary.macro_auc:.4f}  "
               f"sens/spec: {summary.mean_sensitivity:.3f}/"
               f"{summary.mean_specificity:.3f}")


# -------------------------------------------------------------------- explain

@main.command()
@click.option("--checkpoint", "ckpt_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--image", "images", required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--class-index", type=int, default=None,
              help="target class; defaults to the prediction")
@click.option("--alpha", type=float, default=0.5, show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def explain(ckpt_path, images, class_index, alpha, out_dir, config_path):
    """Write a Grad-CAM overlay PNG and raw-map CSV per input image."""
    cfg = _load_config(config_path, {})
    ck = load_checkpoint(ckpt_path)
    model = build_network(
        num_classes=cfg["model.num_classes"], input_size=cfg["data.image_size"],
        dropout=(cfg["model.dropout1"], cfg["model.dropout2"]),
        bn_eps=cfg["model.bn_eps"], bn_momentum=cfg["model.bn_momentum"])
    model.load_state(ck.model_tensors())
    names = ck.class_names or [str(i) for i in range(model.num_classes)]
    means = np.asarray(cfg.floats("data.channel_means"), dtype=np.float32)
    stds = np.asarray(cfg.floats("data.channel_stds"), dtype=np.float32)
    size = cfg["data.image_size"]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for path in images:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
        unit = resize_bilinear(rgb.astype(np.float32) / 255.0, (size, size))
        x = ((unit - means) / stds).transpose(2, 0, 1)
        cam = grad_cam(model, x, class_idx=class_index)
        display = np.clip(np.rint(unit * 255), 0, 255).astype(np.uint8)
        blended = overlay(display, cam, alpha=alpha)
        cls = names[cam.class_index]
        prob = cam.predicted_probs[cam.class_index]
        stem = f"{Path(path).stem}_{cls}_p{prob:.3f}"
        Image.fromarray(blended).save(out / f"{stem}_overlay.png")
        write_cam_csv(cam, out / f"{stem}_map.csv")
        click.echo(f"{path}: class {cls} (p={prob:.3f}) -> {stem}_overlay.png")


# ---------------------------------------------------------------------- bench

@main.command()
@click.option("--checkpoint", "ckpt_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--batch-sizes", default=None, help="comma list; default 1..64")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
def bench(ckpt_path, out_path, batch_sizes, config_path, seed):
    """Measure batch inference time per batch size."""
    cfg = _load_config(config_path, {"seed": seed})
    if batch_sizes:
        cfg.merge({"bench.batch_sizes": batch_sizes})
    ck = load_checkpoint(ckpt_path)
    model = build_network(
        num_classes=cfg["model.num_classes"], input_size=cfg["data.image_size"],
        dropout=(cfg["model.dropout1"], cfg["model.dropout2"]),
        bn_eps=cfg["model.bn_eps"], bn_momentum=cfg["model.bn_momentum"])
    model.load_state(ck.model_tensors())
    size = cfg["data.image_size"]
    gen = np.random.default_rng(cfg["seed"])
    repeats = max(5, cfg["bench.repeats"])
    rows = []
    prev_per_image = None
    trend_ok = True
    for bs in cfg.ints("bench.batch_sizes"):
        x = gen.standard_normal((bs, 3, size, size)).astype(np.float32) * 0.3
        for _ in range(cfg["bench.warmup"]):
            model.forward(Tensor(x), mode="eval")
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward(Tensor(x), mode="eval")
            times.append((time.perf_counter() - t0) * 1e3)
        mean_ms = float(np.mean(times))
        std_ms = float(np.std(times))
        rows.append((bs, mean_ms, std_ms, 1000.0 * bs / mean_ms))
        per_image = mean_ms / bs
        if prev_per_image is not None and per_image > prev_per_image * 1.05:
            trend_ok = False
        prev_per_image = per_image
        click.echo(f"batch {bs}: {mean_ms:.1f} +/- {std_ms:.1f} ms "
                   f"({1000.0 * bs / mean_ms:.1f} img/s)")
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch_size", "mean_ms", "std_ms", "images_per_s"])
        for bs, mean_ms, std_ms, ips in rows:
            writer.writerow([bs, f"{mean_ms:.3f}", f"{std_ms:.3f}", f"{ips:.2f}"])
    click.echo("per-image time non-increasing with batch size: "
               + ("yes" if trend_ok else "no"))


if __name__ == "__main__":
    sys.exit(main())
