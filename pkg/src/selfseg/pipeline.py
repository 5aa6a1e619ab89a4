"""Self-training loop: classification warmup, then alternating pseudo-label
regeneration and joint encoder-decoder training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .camops import generate_pseudo_label, multiscale_cams
from .dataio import TrainItem, preprocess_train
from .dcrf import CrfParams
from .metrics import classification_accuracy
from .model import DecoderConfig, EncoderConfig, ModelParams, build_model, forward, params_from_header
from .optim import DEFAULT_BASE_LRS, PolySchedule, PolySGD, modified_cross_entropy, multilabel_soft_margin
from .pack import load_pack, save_pack
from .structures import PseudoMask

log = logging.getLogger(__name__)

STATE_VERSION = 1


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_epochs: int = 50
    warmup_epochs: int = 5
    regen_frequency: int = 10
    regen_mode: str = "fixed"  # or "until_convergence"
    patience: int = 3
    convergence_delta: float = 1e-3
    tau: float = 0.3
    scales: tuple[float, ...] = (1.0, 0.5, 1.5, 2.0)
    use_flip: bool = True
    renormalize_multiscale: bool = True
    crop: int = 64
    resize_bounds: tuple[int, int] = (64, 128)
    batch_size: int = 8
    base_lrs: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BASE_LRS))
    momentum: float = 0.9
    poly_power: float = 0.9
    crf: CrfParams = field(default_factory=CrfParams)
    lambda_seg: float = 1.0
    seg_normalization: str = "gated"
    literal_gate: bool = False
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self) -> None:
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.regen_frequency < 1:
            raise ValueError("regen_frequency must be >= 1")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.regen_mode not in ("fixed", "until_convergence"):
            raise ValueError(f"unknown regen_mode {self.regen_mode!r}")
        if self.batch_size < 1 or self.crop < 1:
            raise ValueError("batch_size and crop must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        self.crf.validate()


@dataclass
class EpochReport:
    epoch: int
    cls_loss: float
    seg_loss: float
    train_acc: float
    regenerated: bool
    pseudo_miou: float | None = None  # CRF pseudo-masks vs ground truth, evaluation only
    cam_miou: float | None = None  # threshold-only masks from the same regeneration


@dataclass
class TrainState:
    params: ModelParams
    optimizer: PolySGD
    rng: np.random.Generator
    pseudo_labels: dict[str, PseudoMask] = field(default_factory=dict)
    epoch: int = 0
    history: list[EpochReport] = field(default_factory=list)
    last_regen_epoch: int | None = None


# evaluator(pseudo_labels) -> (crf mIoU, threshold-only mIoU); supplied by the harness
Evaluator = Callable[[dict[str, PseudoMask]], tuple[float, float]]


def regen_schedule(cfg: TrainConfig) -> set[int]:
    return set(range(cfg.warmup_epochs, cfg.total_epochs, cfg.regen_frequency))


def steps_per_epoch(n: int, cfg: TrainConfig) -> int:
    return math.ceil(n / cfg.batch_size)


def init_state(num_items: int, num_classes: int, cfg: TrainConfig) -> TrainState:
    cfg.validate()
    params = build_model(cfg.encoder, cfg.decoder, num_classes, cfg.seed)
    schedule = PolySchedule(
        base_lrs=dict(cfg.base_lrs),
        momentum=cfg.momentum,
        power=cfg.poly_power,
        max_steps=cfg.total_epochs * steps_per_epoch(num_items, cfg),
    )
    rng = np.random.default_rng([cfg.seed, 1])
    return TrainState(params, PolySGD(schedule), rng)


def should_regenerate(epoch: int, state: TrainState, cfg: TrainConfig) -> bool:
    if epoch < cfg.warmup_epochs:
        return False
    if cfg.regen_mode == "fixed":
        return epoch in regen_schedule(cfg)
    if state.last_regen_epoch is None or math.isinf(cfg.convergence_delta):
        return True
    seg = [r.seg_loss for r in state.history if r.epoch >= state.last_regen_epoch]
    if len(seg) <= cfg.patience:
        return False
    old, new = seg[-1 - cfg.patience], seg[-1]
    return abs(old - new) / max(abs(old), 1e-12) < cfg.convergence_delta


# ---------------------------------------------------------------------------
# epochs


def _batches(rng: np.random.Generator, n: int, size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _check_finite(value: float, what: str, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise NonFiniteLossError(f"{what} loss became {value} at epoch {epoch}, batch {batch}")


def _augment(items: Sequence[TrainItem], idx, cfg: TrainConfig, rng, masks=None):
    images, out_masks = [], []
    for i in idx:
        extra = [masks[items[i].id].labels] if masks is not None else []
        img, m, _ = preprocess_train(items[i].image, extra, cfg.crop, rng, cfg.resize_bounds)
        images.append(img.transpose(2, 0, 1))
        if masks is not None:
            out_masks.append(m[0])
    batch = np.stack(images)
    return batch, (np.stack(out_masks) if masks is not None else None)


def train_encoder(state: TrainState, data: Sequence[TrainItem], cfg: TrainConfig) -> tuple[float, float]:
    """One warmup epoch on the classification loss; the decoder is never evaluated.

    Returns (mean classification loss, training accuracy).
    """
    return _run_epoch(state, data, cfg, joint=False)


def train_encoder_decoder(state: TrainState, data: Sequence[TrainItem], cfg: TrainConfig) -> tuple[float, float, float]:
    """One joint epoch: classification + lambda * gated segmentation loss.

    Returns (mean classification loss, mean segmentation loss, training accuracy).
    """
    if any(item.id not in state.pseudo_labels for item in data):
        raise RuntimeError("pseudo-labels missing for some training images")
    return _run_epoch(state, data, cfg, joint=True)


def _run_epoch(state, data, cfg, joint: bool):
    params = state.params
    cls_losses, seg_losses, weights = [], [], []
    logits_all, targets_all = [], []
    for b, idx in enumerate(_batches(state.rng, len(data), cfg.batch_size)):
        batch, masks = _augment(data, idx, cfg, state.rng, state.pseudo_labels if joint else None)
        targets = np.stack([data[i].class_labels for i in idx])
        params.zero_grad()
        gate = None
        use_seg = False
        if joint and cfg.lambda_seg != 0:
            gate = np.array([1.0 if m.any() else 0.0 for m in masks])
            use_seg = cfg.literal_gate or gate.any()
        out = forward(params, batch, with_decoder=use_seg)
        loss = multilabel_soft_margin(out.class_logits, targets)
        cls_val = loss.item()
        _check_finite(cls_val, "classification", state.epoch, b)
        seg_val = 0.0
        if use_seg:
            seg = modified_cross_entropy(out.pixel_logits, masks, gate, cfg.seg_normalization, cfg.literal_gate)
            seg_val = seg.item()
            _check_finite(seg_val, "segmentation", state.epoch, b)
            loss = nc.add(loss, nc.mul(seg, cfg.lambda_seg))
        nc.backward(loss)
        state.optimizer.step(params)
        cls_losses.append(cls_val)
        seg_losses.append(seg_val)
        weights.append(len(idx))
        logits_all.append(out.class_logits.data)
        targets_all.append(targets)
    acc = classification_accuracy(np.concatenate(logits_all), np.concatenate(targets_all))
    cls_mean = float(np.average(cls_losses, weights=weights))
    if not joint:
        return cls_mean, acc
    return cls_mean, float(np.average(seg_losses, weights=weights)), acc


def generate_pseudo_ground_truths(
    params: ModelParams, data: Sequence[TrainItem], cfg: TrainConfig
) -> dict[str, PseudoMask]:
    """Multi-scale CAMs -> threshold-derived unary -> dense CRF -> argmax, per image."""
    out = {}
    for item in data:
        cams = multiscale_cams(
            params, item.image, item.present_classes, cfg.scales, cfg.use_flip, cfg.renormalize_multiscale, item.id
        )
        out[item.id] = generate_pseudo_label(cams, item.image, cfg.tau, cfg.crf)
    return out


def train(
    data: Sequence[TrainItem],
    cfg: TrainConfig,
    evaluator: Evaluator | None = None,
    state: TrainState | None = None,
    stop_after: int | None = None,
    on_epoch_end: Callable[[TrainState, EpochReport], None] | None = None,
) -> TrainState:
    """Run (or resume) training up to ``stop_after`` epochs (default: all)."""
    if not data:
        raise ValueError("training set is empty")
    cfg.validate()
    if state is None:
        state = init_state(len(data), len(data[0].class_labels), cfg)
    end = cfg.total_epochs if stop_after is None else min(stop_after, cfg.total_epochs)
    while state.epoch < end:
        epoch = state.epoch
        regenerated = False
        pseudo_miou = cam_miou = None
        if should_regenerate(epoch, state, cfg):
            log.info("epoch %d: regenerating pseudo-labels", epoch)
            state.pseudo_labels = generate_pseudo_ground_truths(state.params, data, cfg)
            state.last_regen_epoch = epoch
            regenerated = True
        if state.pseudo_labels and evaluator is not None:
            pseudo_miou, cam_miou = evaluator(state.pseudo_labels)
        if epoch < cfg.warmup_epochs:
            cls_loss, acc = train_encoder(state, data, cfg)
            seg_loss = 0.0
        else:
            cls_loss, seg_loss, acc = train_encoder_decoder(state, data, cfg)
        report = EpochReport(epoch, cls_loss, seg_loss, acc, regenerated, pseudo_miou, cam_miou)
        state.history.append(report)
        state.epoch = epoch + 1
        log.info(
            "epoch %d cls %.4f seg %.4f acc %.4f regen %s miou %s", epoch, cls_loss, seg_loss, acc, regenerated, pseudo_miou
        )
        if on_epoch_end is not None:
            on_epoch_end(state, report)
    return state


# ---------------------------------------------------------------------------
# persistence


def save_state(directory, state: TrainState) -> None:
    """Write ``model.ckpt`` (parameters, optimizer, RNG, history) and ``pseudo_labels.ckpt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    from .model import config_header

    sched = state.optimizer.schedule
    header = config_header(state.params)
    header.update(
        {
            "state_version": str(STATE_VERSION),
            "epoch": str(state.epoch),
            "last_regen_epoch": "none" if state.last_regen_epoch is None else str(state.last_regen_epoch),
            "schedule": json.dumps(asdict(sched), sort_keys=True),
            "rng": json.dumps(state.rng.bit_generator.state, sort_keys=True),
            "history": json.dumps([asdict(r) for r in state.history]),
        }
    )
    arrays = {f"param/{k}": v.data for k, v in state.params.tensors.items()}
    arrays.update({f"velocity/{k}": v for k, v in state.optimizer.velocity.items()})
    save_pack(d / "model.ckpt", header, arrays)
    save_pseudo_labels(d / "pseudo_labels.ckpt", state.pseudo_labels)


def load_state(directory) -> TrainState:
    d = Path(directory)
    header, arrays = load_pack(d / "model.ckpt")
    if int(header.get("state_version", -1)) != STATE_VERSION:
        raise ValueError(f"{d}: unsupported training-state version")
    params = params_from_header(header, arrays)
    schedule = PolySchedule(**json.loads(header["schedule"]))
    velocity = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("velocity/")}
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(header["rng"])
    history = [EpochReport(**r) for r in json.loads(header["history"])]
    last = header["last_regen_epoch"]
    return TrainState(
        params,
        PolySGD(schedule, velocity),
        rng,
        load_pseudo_labels(d / "pseudo_labels.ckpt"),
        int(header["epoch"]),
        history,
        None if last == "none" else int(last),
    )


def save_pseudo_labels(path, labels: dict[str, PseudoMask], header: dict[str, str] | None = None) -> None:
    arrays = {}
    for ident, m in labels.items():
        arrays[f"mask/{ident}"] = m.labels.astype(np.uint8)
        if m.pre_crf is not None:
            arrays[f"precrf/{ident}"] = m.pre_crf.astype(np.uint8)
    save_pack(path, {"kind": "pseudo_labels", **(header or {})}, arrays)


def load_pseudo_labels(path) -> dict[str, PseudoMask]:
    _, arrays = load_pack(path)
    out = {}
    for key, arr in arrays.items():
        if key.startswith("mask/"):
            ident = key[5:]
            pre = arrays.get(f"precrf/{ident}")
            out[ident] = PseudoMask(arr.astype(np.int64), ident, None if pre is None else pre.astype(np.int64))
    return out
