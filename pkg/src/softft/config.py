"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment.  Keys are dotted paths into
the sections below; unknown keys, duplicates and malformed values are
rejected with the offending line number.  :func:`emit_config` writes every
key (defaults included) so ``parse_config(emit_config(c)) == c``.

Top-level keys::

    experiment   name (required)
    kind         classification | verification
    seeds        comma-separated integers
    arms         comma-separated NAME or NAME:MODE, MODE in
                 finetune, intermediate, soft, pretrained, random
    out_dir      output directory

Section keys: ``source.*``, ``target.*``, ``target2.*`` (see
:class:`DomainConfig`), ``model.input`` / ``model.layers``, ``pretrain.*``
and ``train.*`` (see :class:`TrainSettings`), ``eval.*`` (see
:class:`EvalSettings`) and per-arm overrides ``arm.NAME.FIELD`` (see
:class:`ArmOverrides`).
"""

from __future__ import annotations

import math
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError, ParseError
from .model import BackboneConfig, LayerSpec

KINDS = ("classification", "verification")
ARM_MODES = ("finetune", "intermediate", "soft", "pretrained", "random")
Range = tuple[float, float]


@dataclass(frozen=True)
class DomainConfig:
    mode: str = "shapes16"
    classes: int = 5
    class_offset: int = 0
    samples_per_class: int = 20
    test_samples_per_class: int = 0
    rotation: Range = (-90.0, 90.0)
    translation: Range = (-1.5, 1.5)
    scale: Range = (0.9, 1.1)
    noise: Range = (0.05, 0.15)
    dim: int = 8
    # narrower rotation range for the training split only (the bias knob)
    train_rotation: Optional[Range] = None
    # verification: disjoint identities used for the test split
    test_classes: int = 0
    test_class_offset: int = 0


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 32
    smoothing: float = 0.0
    E: float = 20.0
    post_saturation: Optional[int] = None
    freeze_source_head: bool = False


@dataclass(frozen=True)
class ArmOverrides:
    epochs: Optional[int] = None
    lr: Optional[float] = None
    momentum: Optional[float] = None
    batch: Optional[int] = None
    smoothing: Optional[float] = None
    E: Optional[float] = None
    post_saturation: Optional[int] = None
    freeze_source_head: Optional[bool] = None
    fixed_alpha: Optional[float] = None
    # train on the full target range instead of train_rotation
    unbiased: bool = False
    # "none", "images:FRACTION" or "categories:FRACTION"
    source_subsample: str = "none"
    use_target2: bool = False


@dataclass(frozen=True)
class Arm:
    name: str
    mode: str
    overrides: ArmOverrides = ArmOverrides()


@dataclass(frozen=True)
class EvalSettings:
    far_levels: tuple[float, ...] = (0.1, 0.01, 0.001)
    probe: bool = False
    probe_epochs: int = 200
    purity: bool = False
    purity_restarts: int = 10
    lead: Optional[str] = None  # "ARM_A:ARM_B"
    convergence_threshold: float = 0.7
    plot: bool = True


def _default_source() -> DomainConfig:
    return DomainConfig(classes=20, samples_per_class=200, test_samples_per_class=0)


def _default_target() -> DomainConfig:
    return DomainConfig(classes=5, class_offset=20, samples_per_class=20, test_samples_per_class=100)


def _default_model() -> BackboneConfig:
    return BackboneConfig(
        (1, 16, 16), (LayerSpec("conv", 8, 3, 1), LayerSpec("conv", 16, 3, 2), LayerSpec("linear", 64))
    )


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    kind: str = "classification"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    arms: tuple[Arm, ...] = (Arm("finetune", "finetune"), Arm("intermediate", "intermediate"), Arm("soft", "soft"))
    out_dir: str = ""
    source: DomainConfig = field(default_factory=_default_source)
    target: DomainConfig = field(default_factory=_default_target)
    target2: Optional[DomainConfig] = None
    model: BackboneConfig = field(default_factory=_default_model)
    pretrain: TrainSettings = TrainSettings(epochs=12, lr=0.02)
    train: TrainSettings = TrainSettings()
    eval: EvalSettings = EvalSettings()

    def output_dir(self) -> Path:
        return Path(self.out_dir or f"out/{self.experiment}")

    def arm(self, name: str) -> Arm:
        for a in self.arms:
            if a.name == name:
                return a
        raise KeyError(name)


# --- value codecs ------------------------------------------------------------

def _fmt_float(v: float) -> str:
    if v == math.inf:
        return "inf"
    return repr(float(v))


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_float(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise ValueError("nan is not allowed")
    return v


def _parse_range(text: str) -> Range:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected LO,HI, got {text!r}")
    return (_parse_float(parts[0]), _parse_float(parts[1]))


def _decode(tp, text: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
        if text.lower() == "none":
            return None
        return _decode(inner, text)
    if tp is bool:
        return _parse_bool(text)
    if tp is int:
        return int(text)
    if tp is float:
        return _parse_float(text)
    if tp is str:
        if not text:
            raise ValueError("empty string")
        return text
    if origin is tuple:
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            if not text:
                return ()
            return tuple(_decode(args[0], p.strip()) for p in text.split(","))
        return _parse_range(text)
    raise TypeError(tp)


def _encode(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _fmt_float(value)
    if isinstance(value, tuple):
        return ",".join(_encode(v) for v in value)
    return str(value)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


# --- parsing -----------------------------------------------------------------

def _parse_arms(text: str) -> tuple[Arm, ...]:
    arms = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, mode = item.partition(":")
        mode = mode or name
        if mode not in ARM_MODES:
            raise ValueError(f"arm {name!r}: unknown mode {mode!r}; expected one of {ARM_MODES}")
        if not name.replace("_", "").isalnum():
            raise ValueError(f"arm name {name!r} must be alphanumeric/underscore")
        arms.append(Arm(name, mode))
    if not arms:
        raise ValueError("at least one arm is required")
    names = [a.name for a in arms]
    if len(set(names)) != len(names):
        raise ValueError("duplicate arm names")
    return tuple(arms)


def _parse_input(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.lower().split("x"))


def _parse_layers(text: str) -> tuple[LayerSpec, ...]:
    return tuple(LayerSpec.parse(p) for p in text.split(",") if p.strip())


_TOP = {"experiment": str, "kind": str, "seeds": tuple[int, ...], "arms": None, "out_dir": str}
_SECTIONS = {"source": DomainConfig, "target": DomainConfig, "target2": DomainConfig,
             "pretrain": TrainSettings, "train": TrainSettings, "eval": EvalSettings}


def parse_config_text(text: str, path: str | None = None) -> ExperimentConfig:
    seen: dict[str, int] = {}
    top: dict[str, object] = {}
    sections: dict[str, dict] = {name: {} for name in _SECTIONS}
    model: dict[str, object] = {}
    arm_overrides: dict[str, dict] = {}
    arm_lines: dict[str, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
        if key in seen:
            raise ParseError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno, path)
        seen[key] = lineno
        try:
            if key in _TOP:
                if key == "arms":
                    top[key] = _parse_arms(value)
                elif key == "out_dir":
                    top[key] = value
                else:
                    top[key] = _decode(_TOP[key], value)
                continue
            head, _, rest = key.partition(".")
            if head in _SECTIONS and rest in _hints(_SECTIONS[head]):
                sections[head][rest] = _decode(_hints(_SECTIONS[head])[rest], value)
                continue
            if key == "model.input":
                model["input"] = _parse_input(value)
                continue
            if key == "model.layers":
                model["layers"] = _parse_layers(value)
                continue
            if head == "arm":
                name, _, fld = rest.partition(".")
                if name and fld in _hints(ArmOverrides):
                    arm_overrides.setdefault(name, {})[fld] = _decode(_hints(ArmOverrides)[fld], value)
                    arm_lines.setdefault(name, lineno)
                    continue
        except ConfigError as exc:
            raise ParseError(f"{key}: {exc}", lineno, path) from exc
        except (ValueError, TypeError) as exc:
            raise ParseError(f"bad value for {key!r}: {exc}", lineno, path) from exc
        raise ParseError(f"unknown key {key!r}", lineno, path)

    if "experiment" not in top:
        raise ParseError("missing required key 'experiment'", None, path)

    def where(key):
        return seen.get(key)

    kind = top.get("kind", "classification")
    if kind not in KINDS:
        raise ParseError(f"kind must be one of {KINDS}, got {kind!r}", where("kind"), path)
    cfg = ExperimentConfig(experiment=top["experiment"], kind=kind)
    updates: dict[str, object] = {}
    for key in ("seeds", "arms", "out_dir"):
        if key in top:
            updates[key] = top[key]
    if "seeds" in updates and not updates["seeds"]:
        raise ParseError("seeds must not be empty", where("seeds"), path)
    for name, cls in _SECTIONS.items():
        values = sections[name]
        if name == "target2":
            if values:
                updates[name] = replace(_default_target(), class_offset=25, **values)
            continue
        if values:
            updates[name] = replace(getattr(cfg, name), **values)
    try:
        if model:
            updates["model"] = BackboneConfig(
                model.get("input", cfg.model.input_shape), model.get("layers", cfg.model.layers)
            )
    except ConfigError as exc:
        raise ParseError(f"model: {exc}", where("model.layers") or where("model.input"), path) from exc
    cfg = replace(cfg, **updates)

    arms = list(cfg.arms)
    names = [a.name for a in arms]
    for name, values in arm_overrides.items():
        if name not in names:
            raise ParseError(f"override for unknown arm {name!r}", arm_lines[name], path)
        i = names.index(name)
        arms[i] = replace(arms[i], overrides=replace(arms[i].overrides, **values))
    cfg = replace(cfg, arms=tuple(arms))
    try:
        validate(cfg)
    except ConfigError as exc:
        raise ParseError(str(exc), None, path) from exc
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


def validate(cfg: ExperimentConfig) -> None:
    for arm in cfg.arms:
        o = arm.overrides
        if o.use_target2 and cfg.target2 is None:
            raise ConfigError(f"arm {arm.name!r} uses target2 but no target2.* keys are set")
        if o.source_subsample != "none":
            how, _, frac = o.source_subsample.partition(":")
            try:
                ok = how in ("images", "categories") and 0 < float(frac) <= 1
            except ValueError:
                ok = False
            if not ok:
                raise ConfigError(f"arm {arm.name!r}: source_subsample must be images:F or categories:F with 0<F<=1")
    if cfg.kind == "verification" and cfg.target.test_classes < 2:
        raise ConfigError("verification needs target.test_classes >= 2")
    if cfg.eval.lead is not None:
        a, _, b = cfg.eval.lead.partition(":")
        names = {arm.name for arm in cfg.arms}
        if a not in names or b not in names:
            raise ConfigError(f"eval.lead {cfg.eval.lead!r} must name two configured arms")


# --- emission ----------------------------------------------------------------

def _section_lines(prefix: str, obj) -> list[str]:
    return [f"{prefix}.{f.name} = {_encode(getattr(obj, f.name))}" for f in fields(obj)]


def emit_config(cfg: ExperimentConfig) -> str:
    lines = [
        f"experiment = {cfg.experiment}",
        f"kind = {cfg.kind}",
        f"seeds = {_encode(cfg.seeds)}",
        "arms = " + ",".join(a.name if a.name == a.mode else f"{a.name}:{a.mode}" for a in cfg.arms),
    ]
    if cfg.out_dir:
        lines.append(f"out_dir = {cfg.out_dir}")
    lines += _section_lines("source", cfg.source)
    lines += _section_lines("target", cfg.target)
    if cfg.target2 is not None:
        lines += _section_lines("target2", cfg.target2)
    lines.append("model.input = " + "x".join(str(d) for d in cfg.model.input_shape))
    lines.append("model.layers = " + ",".join(str(layer) for layer in cfg.model.layers))
    lines += _section_lines("pretrain", cfg.pretrain)
    lines += _section_lines("train", cfg.train)
    lines += _section_lines("eval", cfg.eval)
    for arm in cfg.arms:
        default = ArmOverrides()
        for f in fields(arm.overrides):
            value = getattr(arm.overrides, f.name)
            if value != getattr(default, f.name):
                lines.append(f"arm.{arm.name}.{f.name} = {_encode(value)}")
    return "\n".join(lines) + "\n"


def config_digest(cfg: ExperimentConfig) -> str:
    import hashlib

    return hashlib.sha256(emit_config(cfg).encode("utf-8")).hexdigest()


__all__ = [
    "Arm",
    "ArmOverrides",
    "DomainConfig",
    "EvalSettings",
    "ExperimentConfig",
    "TrainSettings",
    "emit_config",
    "parse_config",
    "parse_config_text",
    "config_digest",
]
