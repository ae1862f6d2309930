"""Run-configuration files: sectioned key=value text with strict keys.

Four sections (model, train, data, loss), every key optional with a
documented default, unknown sections or keys rejected outright so a typo
cannot silently fall back to a default.  `effective_text` renders a config
back to file syntax with every default resolved; parsing that text
reproduces the config exactly, which is what makes the echoed header of
each command sufficient to rerun it.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace

from .data import SynthConfig
from .errors import ConfigError
from .losses import LossSelection, LossWeights
from .model import ModelConfig, preset
from .train import AugmentConfig, TrainConfig

_MODEL_KEYS = (
    "preset",
    "stem_channels",
    "encoder_widths",
    "encoder_depths",
    "head_hidden",
    "input_size",
    "fusion_mode",
)
_TRAIN_KEYS = (
    "batch_size",
    "base_lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "epochs",
    "seed",
    "teacher_mode",
    "teacher_checkpoint",
    "augment",
    "flip_prob",
    "jitter_prob",
    "jitter_strength",
    "scale_prob",
    "scale_min",
    "scale_max",
    "blur_prob",
    "blur_sigma_min",
    "blur_sigma_max",
)
_DATA_KEYS = (
    "image_size",
    "train_count",
    "val_count",
    "test_count",
    "shape_min",
    "shape_max",
    "change_min",
    "change_max",
    "drift",
    "noise_sigma",
    "seed",
    "max_retries",
)
_LOSS_KEYS = ("gt_loss", "distill_loss", "alpha1", "alpha2", "alpha3")
_SECTIONS = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS, "loss": _LOSS_KEYS}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: SynthConfig = SynthConfig()


def _to_int(section: str, key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {raw!r}")


def _to_float(section: str, key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}")


def _to_bool(section: str, key: str, raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"[{section}] {key}: expected on/off, got {raw!r}")


def _to_int_tuple(section: str, key: str, raw: str) -> tuple[int, ...]:
    return tuple(_to_int(section, key, part.strip()) for part in raw.split(","))


def _build_model(items: dict[str, str]) -> ModelConfig:
    cfg = preset(items["preset"]) if "preset" in items else ModelConfig()
    fields = {}
    if "stem_channels" in items:
        fields["stem_channels"] = _to_int("model", "stem_channels", items["stem_channels"])
    if "encoder_widths" in items:
        fields["encoder_widths"] = _to_int_tuple("model", "encoder_widths", items["encoder_widths"])
    if "encoder_depths" in items:
        fields["encoder_depths"] = _to_int_tuple("model", "encoder_depths", items["encoder_depths"])
    if "head_hidden" in items:
        fields["head_hidden"] = _to_int("model", "head_hidden", items["head_hidden"])
    if "input_size" in items:
        size = _to_int_tuple("model", "input_size", items["input_size"])
        fields["input_size"] = size * 2 if len(size) == 1 else size
    if "fusion_mode" in items:
        fields["fusion_mode"] = items["fusion_mode"].strip()
    return replace(cfg, **fields) if fields else cfg


def _build_train(items: dict[str, str], weights: LossWeights, selection: LossSelection) -> TrainConfig:
    base = TrainConfig()
    aug = AugmentConfig()
    aug_fields = {}
    for key, conv in (
        ("augment", "enabled"),
        ("flip_prob", "flip_prob"),
        ("jitter_prob", "jitter_prob"),
        ("jitter_strength", "jitter_strength"),
        ("scale_prob", "scale_prob"),
        ("blur_prob", "blur_prob"),
    ):
        if key in items:
            if key == "augment":
                aug_fields[conv] = _to_bool("train", key, items[key])
            else:
                aug_fields[conv] = _to_float("train", key, items[key])
    lo, hi = AugmentConfig().scale_range
    if "scale_min" in items:
        lo = _to_float("train", "scale_min", items["scale_min"])
    if "scale_max" in items:
        hi = _to_float("train", "scale_max", items["scale_max"])
    if (lo, hi) != AugmentConfig().scale_range:
        aug_fields["scale_range"] = (lo, hi)
    lo, hi = AugmentConfig().blur_sigma
    if "blur_sigma_min" in items:
        lo = _to_float("train", "blur_sigma_min", items["blur_sigma_min"])
    if "blur_sigma_max" in items:
        hi = _to_float("train", "blur_sigma_max", items["blur_sigma_max"])
    if (lo, hi) != AugmentConfig().blur_sigma:
        aug_fields["blur_sigma"] = (lo, hi)
    if aug_fields:
        aug = replace(aug, **aug_fields)
    fields = {}
    for key in ("batch_size", "epochs", "seed"):
        if key in items:
            fields[key] = _to_int("train", key, items[key])
    for key in ("base_lr", "weight_decay", "beta1", "beta2", "adam_eps"):
        if key in items:
            fields[key] = _to_float("train", key, items[key])
    if "teacher_mode" in items:
        fields["teacher_mode"] = items["teacher_mode"].strip()
    if "teacher_checkpoint" in items:
        fields["teacher_checkpoint"] = items["teacher_checkpoint"].strip()
    return replace(base, augment=aug, weights=weights, selection=selection, **fields)


def _build_data(items: dict[str, str]) -> SynthConfig:
    base = SynthConfig()
    fields = {}
    for key in ("image_size", "train_count", "val_count", "test_count", "seed", "max_retries"):
        if key in items:
            fields[key] = _to_int("data", key, items[key])
    shape = list(base.shape_count)
    if "shape_min" in items:
        shape[0] = _to_int("data", "shape_min", items["shape_min"])
    if "shape_max" in items:
        shape[1] = _to_int("data", "shape_max", items["shape_max"])
    if tuple(shape) != base.shape_count:
        fields["shape_count"] = tuple(shape)
    change = list(base.change_fraction)
    if "change_min" in items:
        change[0] = _to_float("data", "change_min", items["change_min"])
    if "change_max" in items:
        change[1] = _to_float("data", "change_max", items["change_max"])
    if tuple(change) != base.change_fraction:
        fields["change_fraction"] = tuple(change)
    for key in ("drift", "noise_sigma"):
        if key in items:
            fields[key] = _to_float("data", key, items[key])
    return replace(base, **fields) if fields else base


def _build_loss(items: dict[str, str]) -> tuple[LossWeights, LossSelection]:
    weights = LossWeights(
        alpha1=_to_float("loss", "alpha1", items.get("alpha1", "1.0")),
        alpha2=_to_float("loss", "alpha2", items.get("alpha2", "0.5")),
        alpha3=_to_float("loss", "alpha3", items.get("alpha3", "1.0")),
    )
    selection = LossSelection(
        gt_loss=items.get("gt_loss", "ce").strip(),
        distill_loss=items.get("distill_loss", "mae").strip(),
    )
    return weights, selection


def parse_run_config(text: str) -> RunConfig:
    """Parse sectioned key=value text; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config file: {exc}")
    sections = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}], expected one of {sorted(_SECTIONS)}")
        items = dict(parser.items(section))
        unknown = sorted(set(items) - set(_SECTIONS[section]))
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {unknown}")
        sections[section] = items
    weights, selection = _build_loss(sections.get("loss", {}))
    return RunConfig(
        model=_build_model(sections.get("model", {})),
        train=_build_train(sections.get("train", {}), weights, selection),
        data=_build_data(sections.get("data", {})),
    )


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_run_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")


def effective_text(config: RunConfig) -> str:
    """Render with every default resolved; parses back to an equal config."""
    m, t, d = config.model, config.train, config.data
    a, w, s = t.augment, t.weights, t.selection
    lines = [
        "[model]",
        f"stem_channels = {m.stem_channels}",
        f"encoder_widths = {','.join(map(str, m.encoder_widths))}",
        f"encoder_depths = {','.join(map(str, m.encoder_depths))}",
        f"head_hidden = {m.head_hidden}",
        f"input_size = {m.input_size[0]},{m.input_size[1]}",
        f"fusion_mode = {m.fusion_mode}",
        "",
        "[train]",
        f"batch_size = {t.batch_size}",
        f"base_lr = {t.base_lr!r}",
        f"weight_decay = {t.weight_decay!r}",
        f"beta1 = {t.beta1!r}",
        f"beta2 = {t.beta2!r}",
        f"adam_eps = {t.adam_eps!r}",
        f"epochs = {t.epochs}",
        f"seed = {t.seed}",
        f"teacher_mode = {t.teacher_mode}",
    ]
    if t.teacher_checkpoint is not None:
        lines.append(f"teacher_checkpoint = {t.teacher_checkpoint}")
    lines += [
        f"augment = {'on' if a.enabled else 'off'}",
        f"flip_prob = {a.flip_prob!r}",
        f"jitter_prob = {a.jitter_prob!r}",
        f"jitter_strength = {a.jitter_strength!r}",
        f"scale_prob = {a.scale_prob!r}",
        f"scale_min = {a.scale_range[0]!r}",
        f"scale_max = {a.scale_range[1]!r}",
        f"blur_prob = {a.blur_prob!r}",
        f"blur_sigma_min = {a.blur_sigma[0]!r}",
        f"blur_sigma_max = {a.blur_sigma[1]!r}",
        "",
        "[data]",
        f"image_size = {d.image_size}",
        f"train_count = {d.train_count}",
        f"val_count = {d.val_count}",
        f"test_count = {d.test_count}",
        f"shape_min = {d.shape_count[0]}",
        f"shape_max = {d.shape_count[1]}",
        f"change_min = {d.change_fraction[0]!r}",
        f"change_max = {d.change_fraction[1]!r}",
        f"drift = {d.drift!r}",
        f"noise_sigma = {d.noise_sigma!r}",
        f"seed = {d.seed}",
        f"max_retries = {d.max_retries}",
        "",
        "[loss]",
        f"gt_loss = {s.gt_loss}",
        f"distill_loss = {s.distill_loss}",
        f"alpha1 = {w.alpha1!r}",
        f"alpha2 = {w.alpha2!r}",
        f"alpha3 = {w.alpha3!r}",
    ]
    return "\n".join(lines) + "\n"
