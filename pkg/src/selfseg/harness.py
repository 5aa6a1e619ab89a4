"""Experiment driver: data setup, training with per-epoch metrics, summary and exports."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import numcore as nc
from .camops import cams_to_mask, generate_pseudo_label, multiscale_cams, save_cam_dump
from .config import RunConfig, dump_config
from .dataio import DEFAULT_CLASSES, Sample, generate_shapes_dataset, ground_truth_view, load_dataset_dir, training_view
from .metrics import classification_accuracy, mean_iou
from .model import ModelParams, forward
from .pipeline import EpochReport, TrainState, regen_schedule, save_pseudo_labels, save_state, train
from .structures import PseudoMask

log = logging.getLogger(__name__)

CSV_BASE = ["run_id", "epoch", "split", "miou", "acc", "seconds"]


# ---------------------------------------------------------------------------
# metrics CSV


def csv_header(num_labels: int) -> list[str]:
    return CSV_BASE + [f"iou_{k}" for k in range(num_labels)]


def _num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return repr(float(x))


def append_metrics_row(path, run_id: str, epoch: int, split: str, miou, acc, seconds, per_class) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(csv_header(len(per_class)))
        w.writerow([run_id, epoch, split, _num(miou), _num(acc), _num(seconds)] + [_num(v) for v in per_class])


def read_metrics_csv(path) -> list[dict]:
    rows = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {"run_id": rec["run_id"], "epoch": int(rec["epoch"]), "split": rec["split"]}
            for key, value in rec.items():
                if key not in row:
                    row[key] = float(value)
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# palette export


def make_palette(n: int = 256) -> np.ndarray:
    """VOC-style bit-interleaved colour map; entry 0 is black."""
    pal = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    return pal


def colorize(labels: np.ndarray, palette: np.ndarray) -> np.ndarray:
    if labels.max(initial=0) >= len(palette):
        raise ValueError(f"label {labels.max()} has no palette entry (palette size {len(palette)})")
    return palette[labels]


def decolorize(rgb: np.ndarray, palette: np.ndarray) -> np.ndarray:
    lut = {tuple(int(v) for v in c): k for k, c in reversed(list(enumerate(palette)))}
    flat = rgb.reshape(-1, 3)
    out = np.array([lut[tuple(int(v) for v in px)] for px in flat], dtype=np.int64)
    return out.reshape(rgb.shape[:2])


def export_masks(masks: dict[str, np.ndarray | PseudoMask], palette: np.ndarray, out_dir, tag: str) -> list[Path]:
    """Write ``<id>_<tag>.png`` per mask, colour-mapped through ``palette``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for ident in sorted(masks):
        m = masks[ident]
        labels = m.labels if isinstance(m, PseudoMask) else np.asarray(m)
        p = out / f"{ident}_{tag}.png"
        Image.fromarray(colorize(labels, palette), "RGB").save(p)
        paths.append(p)
    return paths


def epoch_tag(epoch: int) -> str:
    return f"e{epoch:03d}"


# ---------------------------------------------------------------------------
# evaluation helpers


def pseudo_mask_scores(
    labels: dict[str, PseudoMask], gt: dict[str, np.ndarray], num_labels: int
) -> tuple[float, np.ndarray, float]:
    """(CRF mIoU, CRF per-class IoU, threshold-only mIoU) over the ids present in ``gt``."""
    ids = [i for i in sorted(labels) if i in gt]
    crf = mean_iou([labels[i].labels for i in ids], [gt[i] for i in ids], num_labels)
    pre = [labels[i].pre_crf if labels[i].pre_crf is not None else labels[i].labels for i in ids]
    thr = mean_iou(pre, [gt[i] for i in ids], num_labels)
    return crf[0], crf[1], thr[0]


def predict_logits(params: ModelParams, samples: Sequence, batch_size: int = 16) -> np.ndarray:
    out = []
    with nc.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = np.stack([s.image.transpose(2, 0, 1) for s in samples[i : i + batch_size]])
            out.append(forward(params, batch, with_decoder=False).class_logits.data)
    return np.concatenate(out)


@dataclass
class SplitEvaluation:
    masks: dict[str, PseudoMask]
    crf_miou: float
    crf_iou: np.ndarray
    threshold_miou: float
    crf_not_worse_fraction: float  # share of images where CRF mIoU >= threshold-only mIoU
    accuracy: float


def evaluate_split(params: ModelParams, samples: Sequence[Sample], cfg, num_labels: int, cam_dir=None) -> SplitEvaluation:
    masks = {}
    for s in samples:
        cams = multiscale_cams(params, s.image, s.present_classes, cfg.scales, cfg.use_flip, cfg.renormalize_multiscale, s.id)
        if cam_dir is not None:
            Path(cam_dir).mkdir(parents=True, exist_ok=True)
            save_cam_dump(Path(cam_dir) / f"{s.id}.cam", cams)
        masks[s.id] = generate_pseudo_label(cams, s.image, cfg.tau, cfg.crf)
    gt = ground_truth_view(samples)
    crf_miou, crf_iou, thr_miou = pseudo_mask_scores(masks, gt, num_labels) if gt else (float("nan"), np.full(num_labels, np.nan), float("nan"))
    wins = []
    for ident, g in gt.items():
        a = mean_iou(masks[ident].labels, g, num_labels)[0]
        b = mean_iou(masks[ident].pre_crf, g, num_labels)[0]
        wins.append(a >= b)
    frac = float(np.mean(wins)) if wins else float("nan")
    acc = classification_accuracy(predict_logits(params, samples), np.stack([s.class_labels for s in samples]))
    return SplitEvaluation(masks, crf_miou, crf_iou, thr_miou, frac, acc)


# ---------------------------------------------------------------------------
# experiment


def load_run_data(cfg: RunConfig) -> tuple[list[Sample], list[Sample], tuple[str, ...]]:
    if cfg.data_path:
        cls_file = Path(cfg.data_path) / "classes.txt"
        classes = tuple(c.strip() for c in cls_file.read_text().splitlines() if c.strip()) if cls_file.exists() else DEFAULT_CLASSES
        samples = load_dataset_dir(cfg.data_path, classes)
    else:
        classes = cfg.shapes.classes
        samples = generate_shapes_dataset(cfg.shapes)
    if not 0 <= cfg.eval_images < len(samples):
        raise ValueError(f"eval_images={cfg.eval_images} leaves no training images out of {len(samples)}")
    cut = len(samples) - cfg.eval_images
    return samples[:cut], samples[cut:], classes


@dataclass
class RunSummary:
    cam_baseline_miou: float
    warmup_crf_miou: float
    final_crf_miou: float
    final_threshold_miou: float
    eval_crf_miou: float
    eval_threshold_miou: float
    eval_crf_not_worse_fraction: float
    train_accuracy: float
    eval_accuracy: float
    seconds: float

    def table(self) -> str:
        rows = [
            ("train  CAM baseline (warmup, threshold only)", self.cam_baseline_miou),
            ("train  pseudo-masks at warmup (CAM + dCRF)", self.warmup_crf_miou),
            ("train  final threshold-only masks", self.final_threshold_miou),
            ("train  final pseudo-masks (CAM + dCRF)", self.final_crf_miou),
            ("eval   threshold-only masks", self.eval_threshold_miou),
            ("eval   CAM + dCRF masks", self.eval_crf_miou),
        ]
        lines = [f"{'':46s} {'mIoU':>7s}"]
        lines += [f"{name:46s} {100 * v:7.2f}" for name, v in rows]
        lines.append(f"{'eval   images where dCRF >= threshold-only':46s} {100 * self.eval_crf_not_worse_fraction:6.1f}%")
        lines.append(f"{'classification accuracy train / eval':46s} {100 * self.train_accuracy:6.2f} / {100 * self.eval_accuracy:.2f}")
        return "\n".join(lines)


def run_experiment(cfg: RunConfig) -> RunSummary:
    """Train per ``cfg`` and write metrics.csv, checkpoints, pseudo-label archives and the summary."""
    t0 = time.perf_counter()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.txt")
    train_samples, eval_samples, classes = load_run_data(cfg)
    num_labels = len(classes) + 1
    tcfg = cfg.train
    gt = ground_truth_view(train_samples)
    items = training_view(train_samples)
    csv_path = out / "metrics.csv"
    if csv_path.exists():
        csv_path.unlink()
    palette = make_palette()

    def evaluator(labels):
        crf, _, thr = pseudo_mask_scores(labels, gt, num_labels)
        return crf, thr

    def on_epoch_end(state: TrainState, report: EpochReport) -> None:
        per_class = np.full(num_labels, np.nan)
        if state.pseudo_labels and gt:
            _, per_class, _ = pseudo_mask_scores(state.pseudo_labels, gt, num_labels)
        secs = time.perf_counter() - t0 if cfg.record_seconds else 0.0
        append_metrics_row(csv_path, cfg.run_id, report.epoch, "train", report.pseudo_miou, report.train_acc, secs, per_class)
        if report.regenerated and cfg.export_masks:
            export_masks(state.pseudo_labels, palette, out / "masks", epoch_tag(report.epoch))
        if state.epoch == tcfg.warmup_epochs:
            save_state(out / "checkpoints" / "warmup", state)

    state = train(items, tcfg, evaluator if gt else None, on_epoch_end=on_epoch_end)
    save_state(out / "checkpoints" / "final", state)

    first = next((r for r in state.history if r.regenerated), None)
    cam_baseline = first.cam_miou if first and first.cam_miou is not None else float("nan")
    warm_crf = first.pseudo_miou if first and first.pseudo_miou is not None else float("nan")
    if cfg.final_regeneration:
        final = evaluate_split(state.params, train_samples, tcfg, num_labels)
        save_pseudo_labels(out / "final_pseudo_labels.ckpt", final.masks)
        final_crf, final_thr, train_acc = final.crf_miou, final.threshold_miou, final.accuracy
    else:
        last = state.history[-1]
        final_crf = last.pseudo_miou if last.pseudo_miou is not None else float("nan")
        final_thr = last.cam_miou if last.cam_miou is not None else float("nan")
        train_acc = last.train_acc
    if eval_samples:
        ev = evaluate_split(state.params, eval_samples, tcfg, num_labels, out / "cams" if cfg.export_cams else None)
        save_pseudo_labels(out / "eval_pseudo_labels.ckpt", ev.masks)
        secs = time.perf_counter() - t0 if cfg.record_seconds else 0.0
        append_metrics_row(csv_path, cfg.run_id, tcfg.total_epochs, "eval", ev.crf_miou, ev.accuracy, secs, ev.crf_iou)
        if cfg.export_masks:
            export_masks(ev.masks, palette, out / "masks_eval", epoch_tag(tcfg.total_epochs))
    else:
        ev = SplitEvaluation({}, float("nan"), np.full(num_labels, np.nan), float("nan"), float("nan"), float("nan"))
    summary = RunSummary(
        cam_baseline, warm_crf, final_crf, final_thr, ev.crf_miou, ev.threshold_miou,
        ev.crf_not_worse_fraction, train_acc, ev.accuracy, time.perf_counter() - t0,
    )
    (out / "summary.txt").write_text(summary.table() + "\n")
    return summary


def exported_epoch_tags(cfg: RunConfig) -> list[str]:
    return [epoch_tag(e) for e in sorted(regen_schedule(cfg.train))]
