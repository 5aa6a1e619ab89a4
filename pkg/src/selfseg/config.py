"""Run configuration and its flat ``key = value`` file format.

One setting per line, ``#`` starts a comment line.  Keys are grouped by prefix:
``run.*``, ``data.*``, ``shapes.*``, ``train.*`` (with ``train.base_lrs.<group>``),
``crf.*``, ``encoder.*``, ``decoder.*``, ``export.*`` and ``metrics.*``.
Sequences are comma separated, booleans are ``true``/``false``, a missing
optional value is ``none``.  Floats are written with ``repr`` so a
write/read cycle is lossless.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dataio import ShapesConfig
from .dcrf import CrfParams
from .model import DecoderConfig, EncoderConfig
from .pipeline import TrainConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    run_id: str = "run"
    output_dir: str = "runs/run"
    data_path: str | None = None
    eval_images: int = 100
    shapes: ShapesConfig = field(default_factory=ShapesConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    export_masks: bool = False
    export_cams: bool = False
    record_seconds: bool = False
    # regenerate pseudo-masks with the final model for the summary table
    final_regeneration: bool = True


# key prefix -> (attribute path on RunConfig, dataclass type)
_SECTIONS = {
    "shapes": (("shapes",), ShapesConfig),
    "train": (("train",), TrainConfig),
    "crf": (("train", "crf"), CrfParams),
    "encoder": (("train", "encoder"), EncoderConfig),
    "decoder": (("train", "decoder"), DecoderConfig),
}
_NESTED = {"crf", "encoder", "decoder", "base_lrs"}
_TOP = {
    "run.id": "run_id",
    "run.output_dir": "output_dir",
    "data.path": "data_path",
    "data.eval_images": "eval_images",
    "export.masks": "export_masks",
    "export.cams": "export_cams",
    "metrics.record_seconds": "record_seconds",
    "metrics.final_regeneration": "final_regeneration",
}


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _parse(text: str, hint, key: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text == "none":
            return None
        return _parse(text, args[0], key)
    if origin is tuple:
        args = typing.get_args(hint)
        parts = [p for p in text.split(",") if p.strip()] if text else []
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse(p, args[0], key) for p in parts)
        if len(parts) != len(args):
            raise ConfigFileError(f"{key}: expected {len(args)} values, got {len(parts)}")
        return tuple(_parse(p, a, key) for p, a in zip(parts, args))
    try:
        if hint is bool:
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {text!r} as {hint.__name__}") from None
    raise ConfigFileError(f"{key}: unsupported type {hint}")


def _get(obj, path):
    for p in path:
        obj = getattr(obj, p)
    return obj


def to_lines(cfg: RunConfig) -> list[str]:
    lines = [f"{key} = {_fmt(getattr(cfg, attr))}" for key, attr in _TOP.items()]
    for prefix, (path, _cls) in _SECTIONS.items():
        section = _get(cfg, path)
        for f in dataclasses.fields(section):
            if prefix == "train" and f.name in _NESTED:
                continue
            lines.append(f"{prefix}.{f.name} = {_fmt(getattr(section, f.name))}")
    for group, lr in cfg.train.base_lrs.items():
        lines.append(f"train.base_lrs.{group} = {_fmt(float(lr))}")
    return lines


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text("\n".join(to_lines(cfg)) + "\n")


def parse_config(text: str) -> RunConfig:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigFileError(f"line {lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()

    top_hints = typing.get_type_hints(RunConfig)
    top = {}
    for key, attr in _TOP.items():
        if key in values:
            top[attr] = _parse(values.pop(key), top_hints[attr], key)
    base_lrs = {}
    for key in [k for k in values if k.startswith("train.base_lrs.")]:
        base_lrs[key.rsplit(".", 1)[1]] = _parse(values.pop(key), float, key)

    built = {}
    for prefix, (path, cls) in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = f"{prefix}.{f.name}"
            if key in values:
                kwargs[f.name] = _parse(values.pop(key), hints[f.name], key)
        built[prefix] = kwargs
    if values:
        raise ConfigFileError(f"unknown config keys: {', '.join(sorted(values))}")

    train_kwargs = built["train"]
    train_kwargs["crf"] = CrfParams(**built["crf"])
    train_kwargs["encoder"] = EncoderConfig(**built["encoder"])
    train_kwargs["decoder"] = DecoderConfig(**built["decoder"])
    if base_lrs:
        train_kwargs["base_lrs"] = base_lrs
    return RunConfig(shapes=ShapesConfig(**built["shapes"]), train=TrainConfig(**train_kwargs), **top)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
