"""Multi-scale CAM aggregation, thresholding and pseudo-label generation."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numcore as nc
from .dcrf import CrfParams, build_unary, mean_field_refine
from .model import ModelParams, class_activation, encode, normalize_cams
from .pack import load_pack, save_pack
from .structures import CamStack, PseudoMask

__all__ = [
    "CamStack",
    "PseudoMask",
    "multiscale_cams",
    "cams_to_mask",
    "generate_pseudo_label",
    "save_cam_dump",
    "load_cam_dump",
]


def _scaled_extent(n: int, s: float) -> int:
    return max(1, int(round(n * s)))


def multiscale_cams(
    params: ModelParams,
    image: np.ndarray,
    present_classes,
    scales: Sequence[float] = (1.0, 0.5, 1.5, 2.0),
    use_flip: bool = True,
    renormalize: bool = True,
    image_id: str = "",
    align_corners: bool = True,
) -> CamStack:
    """Average per-scale (and mirrored) CAMs at the original image extent.

    ``image`` is H x W x 3.  Each variant is normalised per class, resized back
    with bilinear interpolation and averaged; with ``renormalize`` the average
    is max-normalised again.
    """
    if not scales or any(s <= 0 for s in scales):
        raise ValueError(f"scales must be non-empty and positive, got {scales}")
    present = frozenset(int(c) for c in present_classes)
    h, w = image.shape[:2]
    chw = np.ascontiguousarray(np.asarray(image, dtype=np.float64).transpose(2, 0, 1))
    acc = np.zeros((params.num_classes, h, w))
    count = 0
    with nc.no_grad():
        for s in scales:
            sh, sw = _scaled_extent(h, s), _scaled_extent(w, s)
            x = nc.resize_array(chw, sh, sw, align_corners)
            batch = np.stack([x, x[:, :, ::-1]]) if use_flip else x[None]
            feats, _ = encode(params, batch)
            raw = class_activation(params, feats)
            for v in range(batch.shape[0]):
                cam = normalize_cams(raw[v], present)
                if v == 1:
                    cam = cam[:, :, ::-1]
                acc += nc.resize_array(cam, h, w, align_corners)
                count += 1
    acc /= count
    if renormalize:
        acc = normalize_cams(acc, present)
    return CamStack(acc, present, image_id)


def cams_to_mask(cams: CamStack, tau: float) -> PseudoMask:
    """Foreground where the best present class exceeds ``tau``; ties go to the lower class."""
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    maps = cams.maps.copy()
    absent = [c for c in range(1, cams.num_classes + 1) if c not in cams.present_classes]
    for c in absent:
        maps[c - 1] = -np.inf
    if not cams.present_classes:
        return PseudoMask(np.zeros(cams.extent, dtype=np.int64), cams.image_id)
    best = maps.argmax(axis=0)
    peak = maps.max(axis=0)
    labels = np.where(peak > tau, best + 1, 0)
    return PseudoMask(labels, cams.image_id)


def crf_labels(cams: CamStack, image: np.ndarray, tau: float, crf: CrfParams) -> np.ndarray:
    q = mean_field_refine(build_unary(cams, tau), image, crf)
    allowed = np.zeros(q.shape[0], dtype=bool)
    allowed[0] = True
    for c in cams.present_classes:
        allowed[c] = True
    q = np.where(allowed[:, None, None], q, -np.inf)
    return q.argmax(axis=0)


def generate_pseudo_label(cams: CamStack, image: np.ndarray, tau: float, crf: CrfParams) -> PseudoMask:
    """Threshold-derived unary, mean-field refinement, argmax.

    The CRF decision replaces the threshold decision entirely; the plain
    threshold mask is kept on ``pre_crf`` for ablations.
    """
    if tuple(image.shape[:2]) != cams.extent:
        raise ValueError(f"image extent {image.shape[:2]} != CAM extent {cams.extent}")
    pre = cams_to_mask(cams, tau).labels
    return PseudoMask(crf_labels(cams, image, tau, crf), cams.image_id, pre_crf=pre)


def save_cam_dump(path, cams: CamStack) -> None:
    h, w = cams.extent
    header = {
        "kind": "cam",
        "image_id": cams.image_id or "-",
        "height": str(h),
        "width": str(w),
        "num_classes": str(cams.num_classes),
        "class_ids": ",".join(str(c) for c in range(1, cams.num_classes + 1)),
        "present": ",".join(str(c) for c in sorted(cams.present_classes)) or "-",
    }
    save_pack(path, header, {"maps": cams.maps})


def load_cam_dump(path) -> CamStack:
    header, arrays = load_pack(path)
    if header.get("kind") != "cam":
        raise ValueError(f"{path} is not a CAM dump")
    present = [] if header["present"] == "-" else [int(c) for c in header["present"].split(",")]
    image_id = "" if header["image_id"] == "-" else header["image_id"]
    return CamStack(arrays["maps"], frozenset(present), image_id)
