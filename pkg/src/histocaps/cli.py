"""Command-line entry point: ``histocaps <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .capsnet import CLASS_NAMES, build_network
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_override
from .embedding import (
    TsneConfig,
    export_feature_maps,
    extract_features,
    tsne_affinities,
    tsne_embed,
    write_embedding_tsv,
    write_features_tsv,
    write_svg_scatter,
)
from .preprocess import (
    DatasetManifest,
    LabeledImage,
    build_manifest,
    channel_stats,
    extract_random_patches,
    pooled_stats,
    read_image,
    reinhard_transfer,
    rgb_to_lab,
    rotate,
)
from .tensor import derive_seed, make_rng
from .training import cross_validate, predict_image, train

log = logging.getLogger("histocaps")

IMAGE_SUFFIXES = (".png", ".ppm", ".pnm", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides([parse_override(s) for s in args.set], "--set")


def read_labels(path: Path) -> dict[str, str]:
    """``name<TAB|,>label`` lines; ``#`` comments and blank lines skipped."""
    labels = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = [p.strip() for p in text.replace(",", "\t").split("\t") if p.strip()]
        if len(parts) != 2:
            raise UsageError(f"{path}:{lineno}: expected 'image<TAB>label', got {line!r}")
        name, label = parts
        if label not in CLASS_NAMES:
            raise UsageError(f"{path}:{lineno}: unknown label {label!r} (expected one of {', '.join(CLASS_NAMES)})")
        labels[name] = label
    return labels


def _find_image(input_dir: Path, name: str) -> Path:
    candidate = input_dir / name
    if candidate.is_file():
        return candidate
    for suffix in IMAGE_SUFFIXES:
        if (input_dir / (name + suffix)).is_file():
            return input_dir / (name + suffix)
    raise UsageError(f"image {name!r} not found in {input_dir}")


def cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    input_dir = Path(args.input_dir)
    labels = read_labels(Path(args.labels_file))
    if not labels:
        raise UsageError(f"{args.labels_file}: no labeled images")
    images = []
    for name, label in labels.items():
        path = _find_image(input_dir, name)
        images.append(LabeledImage(Path(name).stem, label, read_image(path)))
    if args.reference == "dataset-mean":
        target = pooled_stats(im.image for im in images)
    elif args.reference == "none":
        target = None
    else:
        target = channel_stats(rgb_to_lab(read_image(args.reference)))
    manifest = build_manifest(
        images,
        args.out_dir,
        rotations=cfg.rotations,
        patches_per_image=cfg.patches_per_image,
        size=cfg.patch_size,
        seed=cfg.seed,
        target=target,
        normalize=cfg.normalize,
        patch_format=cfg.patch_format,
    )
    print(f"wrote {len(manifest.records)} patch records for {len(images)} images to {Path(args.out_dir) / 'manifest.tsv'}")
    return 0


def _read_manifest(path: str) -> DatasetManifest:
    if not Path(path).is_file():
        raise UsageError(f"manifest {path} not found")
    return DatasetManifest.read(path)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = _read_manifest(args.manifest)
    if args.holdout_images:
        held = {line.strip() for line in Path(args.holdout_images).read_text().splitlines() if line.strip()}
        manifest = manifest.subset([im for im in manifest.images() if im not in held])
    network = build_network(cfg.network_config(), make_rng(derive_seed(cfg.seed, "init")))
    network, report = train(
        network,
        manifest,
        stop_loss=cfg.stop_loss,
        max_steps=cfg.max_steps,
        batch_size=cfg.batch_size,
        window=cfg.window,
        seed=derive_seed(cfg.seed, "train"),
        lr=cfg.lr,
    )
    out = Path(args.out)
    save_checkpoint(network, out)
    load_checkpoint(out)
    report_path = Path(args.report) if args.report else out.with_suffix(".train.csv")
    report.write_csv(report_path)
    print(f"stop reason: {report.stop_reason} after {report.stop_step} steps (window loss {report.window_loss:.4f})")
    return 0


def cmd_crossval(args) -> int:
    cfg = _load_config(args)
    manifest = _read_manifest(args.manifest)
    result = cross_validate(
        manifest,
        cfg.network_config(),
        args.out_dir,
        k=cfg.k_folds,
        seed=cfg.seed,
        stop_loss=cfg.stop_loss,
        max_steps=cfg.max_steps,
        batch_size=cfg.batch_size,
        window=cfg.window,
        lr=cfg.lr,
    )
    for i, (report, macro) in enumerate(zip(result.reports, result.macro_accuracies)):
        print(f"fold {i}: {report.stop_reason} after {report.stop_step} steps, macro accuracy {macro:.2f}%")
    print(f"mean macro accuracy: {result.mean_macro_accuracy:.2f}%")
    return 0


def _load_model(path: str):
    if not Path(path).is_file():
        raise UsageError(f"model {path} not found")
    return load_checkpoint(path)


def image_patches(image: np.ndarray, cfg: RunConfig, side: int) -> np.ndarray:
    """Rotated random patches of one image as network input ``[P, 3, side, side]``."""
    from PIL import Image as PILImage

    h, w = image.shape[:2]
    if min(h, w) < cfg.patch_size:
        raise UsageError(f"image {w}x{h} is smaller than patch size {cfg.patch_size}")
    patches = []
    for deg in cfg.rotations:
        rng = make_rng(derive_seed(cfg.seed, "predict", deg))
        for patch, _ in extract_random_patches(rotate(image, deg), cfg.patches_per_image, cfg.patch_size, rng):
            if cfg.patch_size != side:
                patch = np.asarray(PILImage.fromarray(patch).resize((side, side), PILImage.BILINEAR))
            patches.append(patch.transpose(2, 0, 1).astype(np.float32) / 255.0)
    return np.stack(patches)


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    network = _load_model(args.model)
    image = read_image(args.image)
    if args.reference:
        image = reinhard_transfer(image, channel_stats(rgb_to_lab(read_image(args.reference))))
    cls, votes = predict_image(network, image_patches(image, cfg, network.config.input_side))
    counts = " ".join(f"{name}={int(v)}" for name, v in zip(CLASS_NAMES, votes))
    print(f"{CLASS_NAMES[cls]}\t{counts}")
    return 0


def cmd_embed(args) -> int:
    cfg = _load_config(args)
    network = _load_model(args.model)
    manifest = _read_manifest(args.manifest)
    rows = extract_features(network, manifest, aggregate=args.aggregate)
    if not args.tsne:
        write_features_tsv(rows, args.out)
        return 0
    tsne_cfg = TsneConfig(perplexity=cfg.perplexity, iterations=cfg.tsne_iterations, seed=derive_seed(cfg.seed, "tsne"))
    X = np.stack([r.feature for r in rows]).astype(np.float64)
    Y, trace = tsne_embed(tsne_affinities(X, tsne_cfg.perplexity), tsne_cfg)
    labels = [r.label for r in rows]
    write_embedding_tsv([r.patch_id for r in rows], labels, Y, args.out)
    if args.svg:
        write_svg_scatter(Y, labels, args.svg)
    log.info("t-SNE KL %.4f -> %.4f", trace[0], trace[-1])
    return 0


def cmd_features(args) -> int:
    network = _load_model(args.model)
    paths = export_feature_maps(network, read_image(args.image), args.layer, args.out_dir)
    print(f"wrote {len(paths)} feature maps to {args.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="histocaps", description="Capsule network pipeline for H&E histology images")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value run configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.set_defaults(func=func)
        return p

    p = add("preprocess", cmd_preprocess, "normalize, rotate and cut patches; write manifest")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--labels-file", required=True)
    p.add_argument("--reference", default="dataset-mean", help="reference image path, 'dataset-mean' or 'none'")
    p.add_argument("--out-dir", required=True)

    p = add("train", cmd_train, "train one network on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout-images", help="file listing image ids to exclude from training")
    p.add_argument("--report", help="training loss CSV (default: <out>.train.csv)")

    p = add("crossval", cmd_crossval, "k-fold cross-validation with image-wise evaluation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)

    p = add("predict", cmd_predict, "classify one image by patch majority vote")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--reference", help="reference image for color normalization")

    p = add("embed", cmd_embed, "export class-capsule features or their t-SNE embedding")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tsne", action="store_true")
    p.add_argument("--svg", help="also write an SVG scatter plot (with --tsne)")
    p.add_argument("--aggregate", action="store_true", help="one row per image (mean of its patches)")

    p = add("features", cmd_features, "export conv feature maps of one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", type=int, required=True, help="1-based conv layer index")
    p.add_argument("--out-dir", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, ValueError, IndexError, OSError) as exc:
        print(f"histocaps {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
