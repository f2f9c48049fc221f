"""Run configuration: INI file plus ``section.key=value`` overrides.

Grammar: standard INI (``[section]`` headers, ``key = value`` lines, ``#``
or ``;`` comments). Vectors are comma separated (``origin = -80, -80, -5``)
and booleans are ``true``/``false``. The ``[classes]`` section maps raw
label ids to training ids (``10 = 0``); all other sections accept only the
keys listed in :data:`KEYS`. Precedence is compiled default < file <
override.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .augment import AugmentConfig
from .exceptions import ConfigError, ContractError
from .losses import LossWeights, TVConfig
from .model import RANGE_CHANNELS, ModelConfig
from .pointcloud import SEMANTIC_KITTI_MAP, CropBounds
from .postprocess import KnnConfig
from .projection import PillarGridConfig, SphericalConfig
from .trainer import TrainConfig

PUBLISHED = "published default"
ARTIFACT = "artifact default"


def _floats(n: int) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return tuple(float(p) for p in parts)
    parse.__name__ = f"{n} floats"
    return parse


def _ints(n: int) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        return tuple(int(v) for v in _floats(n)(text))
    parse.__name__ = f"{n} ints"
    return parse


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _names(text: str) -> tuple:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _str(text: str) -> str:
    return text.strip()


def _show(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_show(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    default: Any
    parse: Callable[[str], Any]
    source: str
    doc: str


KEYS: tuple[Key, ...] = (
    Key("projection", "width", 2048, int, PUBLISHED, "range image width (pixels)"),
    Key("projection", "height", 64, int, PUBLISHED, "range image height (128 for the high-res model)"),
    Key("projection", "fov_up_deg", 3.0, float, PUBLISHED, "upper vertical field of view (deg)"),
    Key("projection", "fov_down_deg", 25.0, float, PUBLISHED, "lower vertical field of view (deg)"),
    Key("pillars", "voxel_size", (0.3125, 0.3125, 10.0), _floats(3), ARTIFACT, "pillar cell size (m)"),
    Key("pillars", "origin", (-80.0, -80.0, -5.0), _floats(3), ARTIFACT, "grid lower corner (m)"),
    Key("pillars", "grid_size", (512, 512), _ints(2), ARTIFACT, "cells along x and y"),
    Key("crop", "x_range", (-80.0, 80.0), _floats(2), PUBLISHED, "kept x interval (m)"),
    Key("crop", "y_range", (-80.0, 80.0), _floats(2), PUBLISHED, "kept y interval (m)"),
    Key("crop", "z_range", (-5.0, 5.0), _floats(2), PUBLISHED, "kept z interval (m)"),
    Key("augment", "enabled", True, _bool, ARTIFACT, "apply augmentation during training"),
    Key("augment", "drop_max_fraction", 0.2, float, PUBLISHED, "largest dropped point fraction"),
    Key("augment", "rot_x", (-5.0, 5.0), _floats(2), PUBLISHED, "rotation about x (deg)"),
    Key("augment", "rot_y", (-5.0, 5.0), _floats(2), PUBLISHED, "rotation about y (deg)"),
    Key("augment", "rot_z", (-180.0, 180.0), _floats(2), PUBLISHED, "rotation about z (deg)"),
    Key("augment", "trans_x", (-5.0, 5.0), _floats(2), PUBLISHED, "translation along x (m)"),
    Key("augment", "trans_y", (-3.0, 3.0), _floats(2), PUBLISHED, "translation along y (m)"),
    Key("augment", "trans_z", (-1.0, 1.0), _floats(2), PUBLISHED, "translation along z (m)"),
    Key("augment", "drop_probability", 0.5, float, PUBLISHED, "chance of point dropping"),
    Key("augment", "rigid_probability", 0.5, float, PUBLISHED, "chance of rotation + translation"),
    Key("augment", "flip_probability", 0.5, float, PUBLISHED, "chance of mirroring y"),
    Key("model", "channels", 64, int, PUBLISHED, "encoder width C"),
    Key("model", "point_features", 7, int, PUBLISHED, "per-point input width C_P"),
    Key("model", "projected_channels", 192, int, PUBLISHED, "projected feature width C_D"),
    Key("model", "num_classes", 19, int, PUBLISHED, "number of training classes"),
    Key("model", "num_stages", 4, int, PUBLISHED, "encoder stages (compression 2^stages)"),
    Key("model", "leaky_slope", 0.01, float, ARTIFACT, "negative slope of the activation"),
    Key("model", "bn_momentum", 0.99, float, ARTIFACT, "running-statistics momentum"),
    Key("model", "bn_eps", 1e-5, float, ARTIFACT, "batch-norm variance floor"),
    Key("model", "use_ppl", True, _bool, ARTIFACT, "pillar point branch on/off"),
    Key("model", "use_dcb", True, _bool, ARTIFACT, "diamond context block on/off"),
    Key("model", "ppl_pool", "max", _str, ARTIFACT, "pillar pooling: max or mean"),
    Key("model", "ppl_batch_norm", True, _bool, ARTIFACT, "batch norm after the point FCs"),
    Key("model", "circular_padding", True, _bool, PUBLISHED, "wrap-around horizontal padding"),
    Key("model", "range_channels", RANGE_CHANNELS, _names, ARTIFACT,
        "range-image channels used when use_ppl is false"),
    Key("loss", "beta_ls", 1.5, float, PUBLISHED, "Lovasz-Softmax weight"),
    Key("loss", "beta_wce", 1.0, float, PUBLISHED, "weighted cross-entropy weight"),
    Key("loss", "beta_tv", 7.5, float, PUBLISHED, "total-variation weight"),
    Key("loss", "tv_step_i", 1, int, PUBLISHED, "TV vertical neighbour step"),
    Key("loss", "tv_step_j", 1, int, PUBLISHED, "TV horizontal neighbour step"),
    Key("loss", "tv_p", 1.0, float, PUBLISHED, "TV inner norm order"),
    Key("loss", "tv_q", 1.0, float, PUBLISHED, "TV outer norm order"),
    Key("loss", "lovasz_classes", "present", _str, ARTIFACT, "Lovasz class averaging: present or all"),
    Key("loss", "class_weighting", True, _bool, PUBLISHED, "inverse-sqrt-frequency class weights"),
    Key("train", "epochs", 50, int, PUBLISHED, "training epochs"),
    Key("train", "batch_size", 4, int, PUBLISHED, "frames per step"),
    Key("train", "max_lr", 0.004, float, PUBLISHED, "peak learning rate"),
    Key("train", "div_factor", 10.0, float, PUBLISHED, "initial lr = max_lr / div_factor"),
    Key("train", "anneal_fraction", 0.3, float, PUBLISHED, "final fraction spent in cosine decay"),
    Key("train", "weight_decay", 1e-4, float, PUBLISHED, "decoupled weight decay"),
    Key("train", "one_cycle", True, _bool, PUBLISHED, "one-cycle schedule (false: constant max_lr)"),
    Key("train", "seed", 0, int, ARTIFACT, "seed for initialization and augmentation"),
    Key("train", "max_steps", 0, int, ARTIFACT, "stop after this many steps (0: no limit)"),
    Key("train", "validate_every", 1, int, ARTIFACT, "epochs between validation passes"),
    Key("knn", "kernel_size", 5, int, PUBLISHED, "window side in pixels (11 for high-res)"),
    Key("knn", "k", 5, int, PUBLISHED, "number of voting neighbours"),
    Key("knn", "sigma", 1.0, float, PUBLISHED, "Gaussian vote width (pixels)"),
    Key("knn", "cutoff", 1.0, float, PUBLISHED, "range gate (m)"),
    Key("knn", "distance", "chebyshev", _str, ARTIFACT, "pixel distance: chebyshev or euclidean"),
    Key("data", "train_dir", "", _str, ARTIFACT, "directory with velodyne/*.bin and labels/*.label"),
    Key("data", "val_dir", "", _str, ARTIFACT, "validation directory, same layout"),
)

_INDEX = {(k.section, k.name): k for k in KEYS}
SECTIONS = tuple(dict.fromkeys(k.section for k in KEYS)) + ("classes",)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {(k.section, k.name): k.default for k in KEYS})
    class_map: dict = field(default_factory=lambda: dict(SEMANTIC_KITTI_MAP))

    def get(self, section: str, name: str):
        return self.values[(section, name)]

    def section(self, name: str) -> dict:
        return {k: v for (s, k), v in self.values.items() if s == name}

    # typed views -------------------------------------------------------
    def spherical(self) -> SphericalConfig:
        p = self.section("projection")
        return SphericalConfig.from_degrees(p["width"], p["height"], p["fov_up_deg"], p["fov_down_deg"])

    def pillars(self) -> PillarGridConfig:
        p = self.section("pillars")
        return PillarGridConfig(p["voxel_size"], p["origin"], p["grid_size"])

    def crop(self) -> CropBounds:
        p = self.section("crop")
        return CropBounds(p["x_range"], p["y_range"], p["z_range"])

    def augment(self) -> AugmentConfig | None:
        p = self.section("augment")
        if not p["enabled"]:
            return None
        return AugmentConfig(
            drop_max_fraction=p["drop_max_fraction"],
            rot_ranges=(p["rot_x"], p["rot_y"], p["rot_z"]),
            trans_ranges=(p["trans_x"], p["trans_y"], p["trans_z"]),
            drop_probability=p["drop_probability"],
            rigid_probability=p["rigid_probability"],
            flip_probability=p["flip_probability"],
        )

    def model(self) -> ModelConfig:
        p = self.section("model")
        return ModelConfig(projection=self.spherical(), pillars=self.pillars(), **p)

    def loss_weights(self) -> LossWeights:
        p = self.section("loss")
        return LossWeights(p["beta_ls"], p["beta_wce"], p["beta_tv"])

    def tv(self) -> TVConfig:
        p = self.section("loss")
        return TVConfig(p["tv_step_i"], p["tv_step_j"], p["tv_p"], p["tv_q"])

    def train(self) -> TrainConfig:
        p = self.section("train")
        loss = self.section("loss")
        max_steps = p.pop("max_steps") or None
        return TrainConfig(max_steps=max_steps, loss_weights=self.loss_weights(), tv=self.tv(),
                           lovasz_classes=loss["lovasz_classes"],
                           class_weighting=loss["class_weighting"],
                           augment=self.augment(), model=self.model(), **p)

    def knn(self) -> KnnConfig:
        p = self.section("knn")
        return KnnConfig(p["kernel_size"], p["k"], p["sigma"], p["cutoff"], p["distance"])

    def validate(self) -> "RunConfig":
        """Build every typed view once so bad values surface as :class:`ConfigError`."""
        try:
            for view in (self.crop, self.train, self.knn):
                view()
        except (ContractError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_text(self) -> str:
        out = []
        for section in SECTIONS[:-1]:
            out.append(f"[{section}]")
            out.extend(f"{k} = {_show(v)}" for k, v in self.section(section).items())
            out.append("")
        out.append("[classes]")
        out.extend(f"{raw} = {train}" for raw, train in sorted(self.class_map.items()))
        return "\n".join(out) + "\n"


def _set(cfg: RunConfig, section: str, name: str, text: str, origin: str) -> None:
    key = _INDEX.get((section, name))
    if key is None:
        raise ConfigError(f"{origin}: unknown key {section}.{name}")
    try:
        value = key.parse(text)
    except ValueError as exc:
        raise ConfigError(f"{origin}: bad value for {section}.{name}: {exc}") from exc
    if isinstance(value, float) and not math.isfinite(value):
        raise ConfigError(f"{origin}: {section}.{name} must be finite")
    cfg.values[(section, name)] = value


def _set_class(cfg: RunConfig, raw: str, train: str, origin: str) -> None:
    try:
        cfg.class_map[int(raw)] = int(train)
    except ValueError as exc:
        raise ConfigError(f"{origin}: class mapping entries must be integers") from exc


def parse_text(text: str, cfg: RunConfig | None = None, origin: str = "<config>") -> RunConfig:
    cfg = cfg if cfg is not None else RunConfig()
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        if section == "classes":
            cfg.class_map = {}
            for raw, train in parser.items(section):
                _set_class(cfg, raw, train, origin)
            continue
        for name, value in parser.items(section):
            _set(cfg, section, name, value, origin)
    return cfg


def load(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        parse_text(text, cfg, origin=str(path))
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        if section == "classes":
            _set_class(cfg, name, value, "--set")
        else:
            _set(cfg, section, name.strip(), value.strip(), "--set")
    return cfg.validate()


def describe_keys() -> str:
    """One line per key: name, default and where the default comes from."""
    lines = []
    for k in KEYS:
        lines.append(f"  {k.section}.{k.name} = {_show(k.default)}  [{k.source}] {k.doc}")
    lines.append("  classes.<raw id> = <train id>  [published default] SemanticKITTI learning map")
    return "\n".join(lines)
