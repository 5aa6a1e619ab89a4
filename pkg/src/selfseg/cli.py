"""Command line entry point: ``selfseg <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .camops import generate_pseudo_label, load_cam_dump, multiscale_cams, save_cam_dump
from .config import ConfigFileError, RunConfig, parse_config
from .dataio import DatasetError, ShapesConfig, generate_shapes_dataset, load_dataset_dir, save_dataset_dir
from .harness import epoch_tag, evaluate_split, export_masks, make_palette, run_experiment
from .metrics import mean_iou
from .model import ConfigError, load_model
from .pipeline import NonFiniteLossError, load_pseudo_labels, save_pseudo_labels

log = logging.getLogger("selfseg")

EXIT_CONFIG = 2
EXIT_NONFINITE = 3


def _load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    """Config file plus ``--set key=value`` lines; later keys win."""
    lines = Path(path).read_text().splitlines() if path else []
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigFileError(f"override {item!r} is not key=value")
        lines.append(f"{key.strip()} = {value.strip()}")
    return parse_config("\n".join(lines))


def _classes_for(data_dir: Path) -> list[str] | None:
    f = data_dir / "classes.txt"
    return [c.strip() for c in f.read_text().splitlines() if c.strip()] if f.exists() else None


def cmd_generate_data(args) -> int:
    cfg = ShapesConfig(
        num_images=args.num_images, image_size=args.image_size, seed=args.seed, color_mode=args.color_mode
    )
    samples = generate_shapes_dataset(cfg)
    save_dataset_dir(samples, args.out, cfg.classes)
    print(f"wrote {len(samples)} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config, args.set)
    summary = run_experiment(cfg)
    print(summary.table())
    print(f"outputs in {cfg.output_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args.config, args.set)
    params = load_model(args.checkpoint)
    data_dir = Path(args.data)
    classes = _classes_for(data_dir)
    samples = load_dataset_dir(data_dir, classes)
    result = evaluate_split(params, samples, cfg.train, params.num_classes + 1, args.dump_cams)
    print(f"images                      {len(samples)}")
    print(f"threshold-only mIoU         {100 * result.threshold_miou:.2f}")
    print(f"CAM + dCRF mIoU             {100 * result.crf_miou:.2f}")
    print(f"dCRF >= threshold (images)  {100 * result.crf_not_worse_fraction:.1f}%")
    print(f"classification accuracy     {100 * result.accuracy:.2f}")
    if args.out:
        save_pseudo_labels(args.out, result.masks)
    return 0


def cmd_dump_cams(args) -> int:
    cfg = _load_run_config(args.config, args.set).train
    params = load_model(args.checkpoint)
    samples = load_dataset_dir(args.data, _classes_for(Path(args.data)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        cams = multiscale_cams(params, s.image, s.present_classes, cfg.scales, cfg.use_flip, cfg.renormalize_multiscale, s.id)
        save_cam_dump(out / f"{s.id}.cam", cams)
    print(f"wrote {len(samples)} CAM dumps to {out}")
    return 0


def cmd_crf_refine(args) -> int:
    cfg = _load_run_config(args.config, args.set).train
    samples = {s.id: s for s in load_dataset_dir(args.data, _classes_for(Path(args.data)))}
    masks = {}
    num_labels = 0
    for path in sorted(Path(args.cams).glob("*.cam")):
        cams = load_cam_dump(path)
        num_labels = cams.num_classes + 1
        ident = cams.image_id or path.stem
        if ident not in samples:
            raise DatasetError(f"CAM dump {path.name} has no image in {args.data}")
        masks[ident] = generate_pseudo_label(cams, samples[ident].image, cfg.tau, cfg.crf)
    if not masks:
        raise DatasetError(f"no *.cam files in {args.cams}")
    with_gt = [i for i in sorted(masks) if samples[i].gt_mask is not None]
    if with_gt:
        gt = [samples[i].gt_mask for i in with_gt]
        crf = mean_iou([masks[i].labels for i in with_gt], gt, num_labels)[0]
        thr = mean_iou([masks[i].pre_crf for i in with_gt], gt, num_labels)[0]
        print(f"CAM (threshold only) mIoU  {100 * thr:.2f}")
        print(f"CAM + dCRF mIoU            {100 * crf:.2f}")
    save_pseudo_labels(args.out, masks)
    print(f"wrote {len(masks)} refined masks to {args.out}")
    return 0


def cmd_export_masks(args) -> int:
    labels = load_pseudo_labels(args.labels)
    palette = make_palette()
    tag = args.tag if args.tag else epoch_tag(args.epoch)
    if args.pre_crf:
        labels = {k: m.pre_crf for k, m in labels.items() if m.pre_crf is not None}
    paths = export_masks(labels, palette, args.out, tag)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p, required=False):
        p.add_argument("--config", required=required, help="run config file (key = value lines)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("generate-data", help="write a synthetic shapes dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int, default=500)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--color-mode", choices=("class_hue", "random"), default="class_hue")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="run the self-training experiment described by a config")
    config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score CAM and CAM + dCRF masks of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, help="model.ckpt file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="write the masks as a pseudo-label archive")
    p.add_argument("--dump-cams", help="also write per-image CAM dumps here")
    config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-cams", help="write multi-scale CAM dumps of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    config_args(p)
    p.set_defaults(func=cmd_dump_cams)

    p = sub.add_parser("crf-refine", help="run the dense CRF on saved CAM dumps")
    p.add_argument("--cams", required=True, help="directory of *.cam dumps")
    p.add_argument("--data", required=True, help="dataset directory holding the images")
    p.add_argument("--out", required=True, help="pseudo-label archive to write")
    config_args(p)
    p.set_defaults(func=cmd_crf_refine)

    p = sub.add_parser("export-masks", help="palette-map a pseudo-label archive to PNG files")
    p.add_argument("--labels", required=True, help="pseudo-label archive (*.ckpt)")
    p.add_argument("--out", required=True)
    p.add_argument("--epoch", type=int, default=0, help="epoch for the file name tag")
    p.add_argument("--tag", help="explicit file name tag instead of the epoch")
    p.add_argument("--pre-crf", action="store_true", help="export the threshold-only masks")
    p.set_defaults(func=cmd_export_masks)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (ConfigFileError, ConfigError, DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
