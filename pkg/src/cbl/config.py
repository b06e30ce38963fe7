"""Run configuration: one tree holding every component's settings.

Layers are applied in this order, later ones winning:

1. dataclass defaults (the published hyperparameters where they exist)
2. presets, in the order listed
3. the YAML config file
4. ``section.field=value`` overrides from the command line

Unknown sections or fields are errors at every layer.
"""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

import yaml

from .crd import CrdConfig
from .eval import EvalConfig
from .synthscene import ConfigError, GenConfig
from .trainer import TrainConfig
from .wet import EmaConfig

OUTPUT_ROOT_ENV = "CBL_OUTPUT_ROOT"

SECTIONS = {"gen": GenConfig, "train": TrainConfig, "crd": CrdConfig, "ema": EmaConfig, "eval": EvalConfig}
TOP_LEVEL = ("dataset", "output_dir", "presets")

# Desk-scale schedule used by the reference experiments: short runs need a
# larger step size and a sharper rank distribution to move in 10k steps.
DESK = {
    "train": {"iterations": 10_000, "lr": 0.01, "lr_after_drop": 0.001},
    "crd": {"iter_max": 10_000, "temperature": 0.03},
}

PRESETS: dict[str, dict] = {
    "desk": DESK,
    "baseline": {"train": {"use_wet": False, "use_crd": False, "use_msr": False}},
    "cbl": {"train": {"use_wet": True, "use_crd": True, "use_msr": True}, "ema": {"mode": "weighted"}},
    "ema-last-oic": {"ema": {"mode": "single", "source": "oic_last"}},
    "ema-cls": {"ema": {"mode": "single", "source": "cls"}},
    "a-ema": {"ema": {"mode": "average"}},
    "w-ema": {"ema": {"mode": "weighted"}},
    "crd-oic-teacher": {"train": {"crd_teacher": "oic_last"}},
    "crd-static-tau": {"crd": {"schedule": "static"}},
    "crd-decline-tau": {"crd": {"schedule": "linear_decline"}},
    "no-crd": {"train": {"use_crd": False}},
    "no-msr": {"train": {"use_msr": False}},
}


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    crd: CrdConfig = field(default_factory=CrdConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    dataset: str | None = None  # snapshot path; None generates the corpus from ``gen``
    output_dir: str = "runs/default"
    presets: list[str] = field(default_factory=list)

    def validate(self) -> None:
        try:
            self.gen.validate()
            self.train.validate()
            self.crd.validate()
            self.ema.validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval.score_source not in ("auto", "basic", "average", "weighted", "wet", "wet_head"):
            raise ConfigError(f"unknown score source {self.eval.score_source!r}")

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        out.update(dataset=self.dataset, output_dir=self.output_dir, presets=list(self.presets))
        return out

    def output_path(self) -> Path:
        """``output_dir``, placed under ``$CBL_OUTPUT_ROOT`` when it is relative and the variable is set."""
        path = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not path.is_absolute():
            path = Path(root) / path
        return path


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _coerce(cls, name: str, value: Any, where: str) -> Any:
    """Light type check against the dataclass default; ints widen to floats."""
    default = getattr(cls(), name)
    if default is None and "float" in str({f.name: f.type for f in fields(cls)}[name]):
        default = 0.0  # optional numeric knob: check as a number when set
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot ("1e-3") as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


def apply_tree(cfg: RunConfig, tree: dict, origin: str = "config", lines: dict | None = None) -> RunConfig:
    """Merge a nested mapping into ``cfg`` in place. ``lines`` maps key paths to source line numbers."""
    lines = lines or {}

    def where(path: str) -> str:
        line = lines.get(path)
        return f"{origin}:{line}: {path}" if line else f"{origin}: {path}"

    if not isinstance(tree, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    for key, value in tree.items():
        if key in SECTIONS:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{where(key)}: section must be a mapping")
            section = getattr(cfg, key)
            known = _field_names(SECTIONS[key])
            for name, v in value.items():
                path = f"{key}.{name}"
                if name not in known:
                    raise ConfigError(f"{where(path)}: unknown field (known: {', '.join(sorted(known))})")
                setattr(section, name, _coerce(SECTIONS[key], name, v, where(path)))
        elif key == "presets":
            if not isinstance(value, list):
                raise ConfigError(f"{where(key)}: presets must be a list")
            for name in value:
                apply_preset(cfg, name)
        elif key in ("dataset", "output_dir"):
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"{where(key)}: expected a path string")
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"{where(key)}: unknown key (known: {', '.join([*SECTIONS, *TOP_LEVEL])})")
    return cfg


def apply_preset(cfg: RunConfig, name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (known: {', '.join(PRESETS)})")
    apply_tree(cfg, copy.deepcopy(PRESETS[name]), origin=f"preset {name}")
    cfg.presets.append(name)
    return cfg


def _key_lines(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line number, for diagnostics."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    out: dict[str, int] = {}
    if not isinstance(root, yaml.MappingNode):
        return out
    for k, v in root.value:
        out[str(k.value)] = k.start_mark.line + 1
        if isinstance(v, yaml.MappingNode):
            for k2, _ in v.value:
                out[f"{k.value}.{k2.value}"] = k2.start_mark.line + 1
    return out


def parse_override(text: str) -> dict:
    """``section.field=value`` (value parsed as YAML) -> nested mapping."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.field=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: cannot parse value ({exc})") from exc
    parts = key.strip().split(".")
    if len(parts) == 1:
        return {parts[0]: value}
    if len(parts) != 2:
        raise ConfigError(f"override {text!r}: expected section.field")
    return {parts[0]: {parts[1]: value}}


def load_config(path: str | os.PathLike | None = None, presets: Iterable[str] = (),
                overrides: Iterable[str] = ()) -> RunConfig:
    """Resolve defaults < presets < file < overrides, then validate."""
    cfg = RunConfig()
    for name in presets:
        apply_preset(cfg, name)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        text = p.read_text(encoding="utf-8")
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML: {exc}") from exc
        apply_tree(cfg, tree, origin=str(p), lines=_key_lines(text))
    for item in overrides:
        apply_tree(cfg, parse_override(item), origin="command line")
    cfg.validate()
    return cfg


def config_from_dict(tree: dict) -> RunConfig:
    """Rebuild a resolved config (e.g. from a checkpoint header) without re-applying presets."""
    tree = copy.deepcopy(tree)
    applied = tree.pop("presets", []) or []
    cfg = apply_tree(RunConfig(), tree, origin="stored config")
    cfg.presets = list(applied)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """YAML for a fully resolved config. Presets are listed as a comment
    because their values are already spelled out field by field."""
    tree = cfg.to_dict()
    applied = tree.pop("presets")
    head = f"# resolved config; applied presets: {', '.join(applied) if applied else 'none'}\n"
    return head + yaml.safe_dump(tree, sort_keys=False)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
