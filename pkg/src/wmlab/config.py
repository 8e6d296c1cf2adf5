"""Experiment configuration: flat key=value sections, diff-able on disk."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

DEFAULTS = {
    "lambda1": 0.01,
    "lambda2": 0.1,
    "lr": 1e-4,
    "batch": 100,
    "beta1": 0.5,
    "beta2": 0.999,
    "clip": 0.01,
}

OUTPUT_ROOT_ENV = "WMLAB_OUTPUT_ROOT"


@dataclass
class AttackSpec:
    name: str
    kind: str
    options: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    scheme: str = "riga"
    hiding: bool = True
    seed: int = 0
    dataset: str = "synthetic-gaussians"
    data_path: str | None = None
    output_dir: str = "runs"
    epochs: int = 20
    target_accuracy: float | None = None  # None: zoo mean accuracy minus 1pp
    weight_decay: float = 0.0

    message_kind: str = "bits"
    message_length: int = 64
    image_width: int = 8
    image_height: int = 8
    message_seed: int = 1

    lambda1: float = DEFAULTS["lambda1"]
    lambda2: float = DEFAULTS["lambda2"]
    clip: float = DEFAULTS["clip"]
    critic: str = "logloss"
    layer: int = 1
    eps_loss: float = 1e-3

    lr: float = DEFAULTS["lr"]
    batch: int = DEFAULTS["batch"]
    beta1: float = DEFAULTS["beta1"]
    beta2: float = DEFAULTS["beta2"]

    zoo_dir: str = "zoo"
    zoo_count: int = 32
    zoo_epochs: int = 20

    attacks: list[AttackSpec] = field(default_factory=list)

    def resolved_output(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out / self.name

    def resolved_zoo(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        z = Path(self.zoo_dir)
        if root and not z.is_absolute():
            z = Path(root) / z
        return z


def _set(section, cfg, attr, cast=str, key=None):
    key = key or attr
    if key in section:
        setattr(cfg, attr, cast(section[key]))


def _bool(v: str) -> bool:
    lv = v.strip().lower()
    if lv in ("1", "true", "on", "yes"):
        return True
    if lv in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)
    cfg = ExperimentConfig()
    if parser.has_section("experiment"):
        s = parser["experiment"]
        _set(s, cfg, "name")
        _set(s, cfg, "scheme")
        _set(s, cfg, "hiding", _bool)
        _set(s, cfg, "seed", int)
        _set(s, cfg, "dataset")
        _set(s, cfg, "data_path")
        _set(s, cfg, "output_dir", key="output")
        _set(s, cfg, "epochs", int)
        _set(s, cfg, "target_accuracy", float)
        _set(s, cfg, "weight_decay", float)
    if parser.has_section("message"):
        s = parser["message"]
        _set(s, cfg, "message_kind", key="kind")
        _set(s, cfg, "message_length", int, key="length")
        _set(s, cfg, "image_width", int, key="width")
        _set(s, cfg, "image_height", int, key="height")
        _set(s, cfg, "message_seed", int, key="seed")
    if parser.has_section("watermark"):
        s = parser["watermark"]
        _set(s, cfg, "lambda1", float)
        _set(s, cfg, "lambda2", float)
        _set(s, cfg, "clip", float)
        _set(s, cfg, "critic")
        _set(s, cfg, "layer", int)
        _set(s, cfg, "eps_loss", float)
    if parser.has_section("optimizer"):
        s = parser["optimizer"]
        _set(s, cfg, "lr", float)
        _set(s, cfg, "batch", int)
        _set(s, cfg, "beta1", float)
        _set(s, cfg, "beta2", float)
    if parser.has_section("zoo"):
        s = parser["zoo"]
        _set(s, cfg, "zoo_dir", key="dir")
        _set(s, cfg, "zoo_count", int, key="count")
        _set(s, cfg, "zoo_epochs", int, key="epochs")
    for section in parser.sections():
        if section.startswith("attack:"):
            opts = dict(parser[section])
            kind = opts.pop("kind", section.split(":", 1)[1])
            cfg.attacks.append(AttackSpec(section.split(":", 1)[1], kind, opts))
    return cfg


def save_config(cfg: ExperimentConfig, path) -> Path:
    parser = configparser.ConfigParser()
    parser["experiment"] = {
        "name": cfg.name, "scheme": cfg.scheme,
        "hiding": "on" if cfg.hiding else "off",
        "seed": str(cfg.seed), "dataset": cfg.dataset,
        "output": cfg.output_dir, "epochs": str(cfg.epochs),
        "weight_decay": repr(cfg.weight_decay),
    }
    if cfg.data_path:
        parser["experiment"]["data_path"] = cfg.data_path
    if cfg.target_accuracy is not None:
        parser["experiment"]["target_accuracy"] = repr(cfg.target_accuracy)
    parser["message"] = {"kind": cfg.message_kind,
                         "length": str(cfg.message_length),
                         "width": str(cfg.image_width),
                         "height": str(cfg.image_height),
                         "seed": str(cfg.message_seed)}
    parser["watermark"] = {"lambda1": repr(cfg.lambda1), "lambda2": repr(cfg.lambda2),
                           "clip": repr(cfg.clip), "critic": cfg.critic,
                           "layer": str(cfg.layer), "eps_loss": repr(cfg.eps_loss)}
    parser["optimizer"] = {"lr": repr(cfg.lr), "batch": str(cfg.batch),
                           "beta1": repr(cfg.beta1), "beta2": repr(cfg.beta2)}
    parser["zoo"] = {"dir": cfg.zoo_dir, "count": str(cfg.zoo_count),
                     "epochs": str(cfg.zoo_epochs)}
    for spec in cfg.attacks:
        parser[f"attack:{spec.name}"] = {"kind": spec.kind,
                                         **{k: str(v) for k, v in spec.options.items()}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        parser.write(f)
    return path
