"""Encoder-decoder segmentation network with a GAP + 1x1 classification branch.

The encoder is a stack of conv blocks; the classifier taps the last block via
global average pooling followed by a bias-free 1x1 convolution, so class
activation maps are the same 1x1 weights applied to the un-pooled features.
The decoder turns the shared encoder features into ``num_classes + 1`` pixel
logits (label 0 is background).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import Tensor
from .pack import load_pack, save_pack
from .structures import CamStack

FORMAT_VERSION = 1
DECODER_KINDS = ("bilinear_unet", "transposed_unet", "aspp_lite")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    strides: tuple[int, ...] = (1, 2, 2, 2)
    last_block_dilated: bool = True
    convs_per_block: int = 1

    def validate(self) -> None:
        if len(self.widths) < 2:
            raise ConfigError("encoder needs at least 2 blocks")
        if len(self.widths) != len(self.strides):
            raise ConfigError(f"{len(self.widths)} widths but {len(self.strides)} strides")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"encoder widths must be >= 1, got {self.widths}")
        if any(s < 1 for s in self.strides):
            raise ConfigError(f"encoder strides must be >= 1, got {self.strides}")
        if self.convs_per_block < 1:
            raise ConfigError("convs_per_block must be >= 1")
        if self.last_block_dilated and self.strides[-1] == 1:
            raise ConfigError("last_block_dilated needs a strided last block to replace")

    def block_geometry(self) -> list[tuple[int, int]]:
        """(stride, dilation) of each block's first conv."""
        geo = [(s, 1) for s in self.strides]
        if self.last_block_dilated:
            geo[-1] = (1, self.strides[-1])
        return geo

    @property
    def effective_stride(self) -> int:
        return int(np.prod([s for s, _ in self.block_geometry()]))


@dataclass(frozen=True)
class DecoderConfig:
    kind: str = "bilinear_unet"
    use_skip_connections: bool = True
    # per-stage widths, aligned with encoder blocks 0..L-2; None -> encoder width // 2
    channels: tuple[int, ...] | None = None

    def validate(self, enc: EncoderConfig) -> None:
        if self.kind not in DECODER_KINDS:
            raise ConfigError(f"unknown decoder kind {self.kind!r}")
        if self.channels is not None:
            need = 1 if self.kind == "aspp_lite" else len(enc.widths) - 1
            if len(self.channels) != need:
                raise ConfigError(f"decoder.channels needs {need} entries, got {len(self.channels)}")
            if any(c < 1 for c in self.channels):
                raise ConfigError("decoder channels must be >= 1")

    def stage_channels(self, enc: EncoderConfig) -> tuple[int, ...]:
        if self.channels is not None:
            return self.channels
        if self.kind == "aspp_lite":
            return (max(1, enc.widths[-1] // 4),)
        return tuple(max(1, w // 2) for w in enc.widths[:-1])


@dataclass
class ModelParams:
    encoder: EncoderConfig
    decoder: DecoderConfig
    num_classes: int
    seed: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def group_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.tensors if group is None or self.group_of(n) == group]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def checksum(self, group: str | None = None) -> str:
        h = hashlib.sha256()
        for name in self.names(group):
            h.update(name.encode())
            h.update(self.tensors[name].data.tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> ModelParams:
        tensors = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()}
        return ModelParams(self.encoder, self.decoder, self.num_classes, self.seed, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


@dataclass
class ForwardOutputs:
    class_logits: Tensor
    pixel_logits: Tensor | None
    encoder_features: Tensor
    skips: list[Tensor] = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# construction


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def build_model(enc: EncoderConfig, dec: DecoderConfig, num_classes: int, seed: int) -> ModelParams:
    if num_classes < 1:
        raise ConfigError("num_classes must be >= 1")
    enc.validate()
    dec.validate(enc)
    rng = np.random.default_rng(seed)
    t: dict[str, Tensor] = {}
    cin = 3
    for b, width in enumerate(enc.widths):
        for j in range(enc.convs_per_block):
            t[f"encoder.block{b}.conv{j}.weight"] = _he(rng, (width, cin, 3, 3), cin * 9)
            t[f"encoder.block{b}.conv{j}.bias"] = _zeros(width)
            cin = width
    feat = enc.widths[-1]
    stage_ch = dec.stage_channels(enc)
    if dec.kind == "aspp_lite":
        m = stage_ch[0]
        for d in (1, 2):
            t[f"decoder.aspp_d{d}.weight"] = _he(rng, (m, feat, 3, 3), feat * 9)
            t[f"decoder.aspp_d{d}.bias"] = _zeros(m)
        head_in = 2 * m
    else:
        geo = enc.block_geometry()
        cur = feat
        for i in reversed(range(len(enc.widths) - 1)):
            ratio = geo[i + 1][0]
            if dec.kind == "transposed_unet" and ratio > 1:
                t[f"decoder.up{i}.weight"] = _he(rng, (cur, cur, ratio, ratio), cur)
                t[f"decoder.up{i}.bias"] = _zeros(cur)
            cat = cur + (enc.widths[i] if dec.use_skip_connections else 0)
            t[f"decoder.stage{i}.weight"] = _he(rng, (stage_ch[i], cat, 3, 3), cat * 9)
            t[f"decoder.stage{i}.bias"] = _zeros(stage_ch[i])
            cur = stage_ch[i]
        head_in = cur
    t["decoder.head.weight"] = _he(rng, (num_classes + 1, head_in, 1, 1), head_in)
    t["decoder.head.bias"] = _zeros(num_classes + 1)
    t["classifier.weight"] = _he(rng, (num_classes, feat, 1, 1), feat)
    return ModelParams(enc, dec, num_classes, seed, t)


# ---------------------------------------------------------------------------
# forward


def _as_batch(batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4 or x.shape[1] != 3:
        raise nc.ShapeError(f"expected an N x 3 x H x W batch, got {x.shape}")
    return x


def encode(params: ModelParams, batch) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder; returns final features and every block output."""
    x = _as_batch(batch)
    p = params.tensors
    outs = []
    for b, (stride, dil) in enumerate(params.encoder.block_geometry()):
        for j in range(params.encoder.convs_per_block):
            s = stride if j == 0 else 1
            # once dilated, later convs in the block keep the dilation
            x = nc.relu(
                nc.conv2d(x, p[f"encoder.block{b}.conv{j}.weight"], p[f"encoder.block{b}.conv{j}.bias"], s, dil, dil)
            )
        outs.append(x)
    return x, outs


def classify(params: ModelParams, features: Tensor) -> Tensor:
    pooled = nc.global_average_pool(features)
    n, k = pooled.shape
    logits = nc.conv2d(nc.reshape(pooled, (n, k, 1, 1)), params.tensors["classifier.weight"])
    return nc.reshape(logits, (n, params.num_classes))


def decode(params: ModelParams, features: Tensor, skips: list[Tensor], out_hw: tuple[int, int]) -> Tensor:
    p = params.tensors
    dec = params.decoder
    if dec.kind == "aspp_lite":
        branches = [
            nc.conv2d(features, p[f"decoder.aspp_d{d}.weight"], p[f"decoder.aspp_d{d}.bias"], 1, d, d) for d in (1, 2)
        ]
        x = nc.relu(nc.concat(branches, axis=1))
        x = nc.conv2d(x, p["decoder.head.weight"], p["decoder.head.bias"])
        return nc.upsample_bilinear(x, *out_hw)
    x = features
    for i in reversed(range(len(skips) - 1)):
        skip = skips[i]
        if x.shape[2:] != skip.shape[2:]:
            if dec.kind == "transposed_unet":
                ratio = p[f"decoder.up{i}.weight"].shape[2]
                x = nc.conv_transpose2d(x, p[f"decoder.up{i}.weight"], p[f"decoder.up{i}.bias"], ratio)
                if x.shape[2:] != skip.shape[2:]:
                    x = nc.upsample_bilinear(x, *skip.shape[2:])
            else:
                x = nc.upsample_bilinear(x, *skip.shape[2:])
        if dec.use_skip_connections:
            x = nc.concat([x, skip], axis=1)
        x = nc.relu(nc.conv2d(x, p[f"decoder.stage{i}.weight"], p[f"decoder.stage{i}.bias"], 1, 1, 1))
    x = nc.conv2d(x, p["decoder.head.weight"], p["decoder.head.bias"])
    if x.shape[2:] != tuple(out_hw):
        x = nc.upsample_bilinear(x, *out_hw)
    return x


def forward(params: ModelParams, batch, with_decoder: bool = True) -> ForwardOutputs:
    x = _as_batch(batch)
    feats, skips = encode(params, x)
    logits = classify(params, feats)
    pixel = decode(params, feats, skips, x.shape[2:]) if with_decoder else None
    return ForwardOutputs(logits, pixel, feats, skips)


# ---------------------------------------------------------------------------
# class activation maps


def class_activation(params: ModelParams, features) -> np.ndarray:
    """Raw per-class maps sum_k w[c, k] * f[k]; features K x h x w or N x K x h x w."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    w = params.tensors["classifier.weight"].data[:, :, 0, 0]
    return np.einsum("ck,...khw->...chw", w, f)


def normalize_cams(raw: np.ndarray, present_classes) -> np.ndarray:
    """ReLU, zero absent classes, divide each map by its spatial max."""
    cams = np.maximum(raw, 0.0)
    keep = np.zeros(cams.shape[0], dtype=bool)
    for c in present_classes:
        keep[c - 1] = True
    cams[~keep] = 0.0
    peak = cams.max(axis=(1, 2), keepdims=True)
    return np.divide(cams, peak, out=np.zeros_like(cams), where=peak > 0)


def compute_cam(params: ModelParams, encoder_features, present_classes, image_id: str = "") -> CamStack:
    f = encoder_features.data if isinstance(encoder_features, Tensor) else np.asarray(encoder_features)
    if f.ndim == 4:
        if f.shape[0] != 1:
            raise nc.ShapeError("compute_cam handles one image at a time")
        f = f[0]
    present = frozenset(int(c) for c in present_classes)
    return CamStack(normalize_cams(class_activation(params, f), present), present, image_id)


# ---------------------------------------------------------------------------
# checkpoint


def config_header(params: ModelParams) -> dict[str, str]:
    enc, dec = asdict(params.encoder), asdict(params.decoder)
    h = {"format_version": str(FORMAT_VERSION), "seed": str(params.seed), "num_classes": str(params.num_classes)}
    for k, v in enc.items():
        h[f"encoder.{k}"] = _fmt(v)
    for k, v in dec.items():
        h[f"decoder.{k}"] = _fmt(v)
    return h


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _ints(s: str) -> tuple[int, ...] | None:
    return None if s == "none" else tuple(int(x) for x in s.split(","))


def params_from_header(header: dict[str, str], arrays: dict[str, np.ndarray]) -> ModelParams:
    if int(header.get("format_version", -1)) != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {header.get('format_version')}")
    enc = EncoderConfig(
        widths=_ints(header["encoder.widths"]),
        strides=_ints(header["encoder.strides"]),
        last_block_dilated=header["encoder.last_block_dilated"] == "true",
        convs_per_block=int(header["encoder.convs_per_block"]),
    )
    dec = DecoderConfig(
        kind=header["decoder.kind"],
        use_skip_connections=header["decoder.use_skip_connections"] == "true",
        channels=_ints(header["decoder.channels"]),
    )
    params = build_model(enc, dec, int(header["num_classes"]), int(header["seed"]))
    for name, t in params.tensors.items():
        key = f"param/{name}"
        if key not in arrays:
            raise ConfigError(f"checkpoint is missing parameter {name}")
        if arrays[key].shape != t.shape:
            raise ConfigError(f"parameter {name}: checkpoint shape {arrays[key].shape} != {t.shape}")
        t.data = np.ascontiguousarray(arrays[key], dtype=np.float64)
    return params


def save_model(path, params: ModelParams, extra_header=None, extra_arrays=None) -> None:
    header = config_header(params)
    header.update(extra_header or {})
    arrays = {f"param/{k}": v.data for k, v in params.tensors.items()}
    arrays.update(extra_arrays or {})
    save_pack(path, header, arrays)


def load_model(path) -> ModelParams:
    header, arrays = load_pack(path)
    return params_from_header(header, arrays)
