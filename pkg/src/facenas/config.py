"""Run configuration: one dataclass, loaded from an INI file plus ``section.key=value`` overrides."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


@dataclass
class RunConfig:
    # [data]
    source: str = ""
    ratios: tuple = (8, 1, 1)
    data_seed: int = 0  # split shuffle; independent of the search seed
    augment: bool = True
    flip_prob: float = 0.5
    pad_pixels: int = 4
    crop_size: int = 32
    cutout_size: int = 4
    # [search]
    L: int = 5
    Q: int = 8
    S: int = 30
    search_epochs: int = 100
    batch_size: int = 128
    eval_batch_size: int = 0  # 0 means batch_size
    top_k: int = 3
    seed: int = 0
    rank_by: str = "best"  # or "mean"
    search_eval_bn: str = "batch"  # or "running"; running stats mix every sampled arch
    # [child]
    loss: str = "cross_entropy"
    loss_m: float = -1.0  # negative means the loss default
    loss_s: float = -1.0
    stem_channels: int = 16
    lr_max: float = 0.1
    lr_min: float = 1e-4
    warmup_epochs: int = 20
    momentum: float = 0.9
    weight_decay: float = 1e-4
    dropblock_size: int = 3
    keep_prob: float = 0.9
    # [controller]
    controller_lr: float = 0.1
    controller_lr_min: float = 1e-4
    controller_lr_every: int = 20
    entropy_weight: float = 1e-4
    baseline_decay: float = 0.95
    temperature: float = 1.0
    hidden: int = 100
    reward_mode: str = "per_trace"  # or "averaged"
    # [reward]
    target: float = 2.0
    q: float = -0.07
    latency_mode: str = "analytic"
    cost_table: str = ""
    # [retrain]
    retrain_epochs: int = 150

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("L", "Q", "S", "search_epochs", "batch_size", "top_k", "stem_channels", "retrain_epochs",
                    "hidden", "controller_lr_every", "dropblock_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ConfigError("batch_size", "must be >= 2 (batch norm needs two samples)")
        if self.eval_batch_size < 0:
            raise ConfigError("eval_batch_size", "must be >= 0")
        if not 0 <= self.lr_min < self.lr_max:
            raise ConfigError("lr_min", f"need 0 <= lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if not 0 < self.keep_prob <= 1:
            raise ConfigError("keep_prob", f"must lie in (0, 1], got {self.keep_prob}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs", "must be >= 0")
        if self.q > 0:
            raise ConfigError("q", f"latency exponent must be <= 0, got {self.q}")
        if self.target <= 0:
            raise ConfigError("target", "must be positive")
        if self.temperature <= 0:
            raise ConfigError("temperature", "must be positive")
        choices = {"rank_by": ("best", "mean"), "search_eval_bn": ("batch", "running"),
                   "reward_mode": ("per_trace", "averaged"),
                   "latency_mode": ("analytic", "wallclock"),
                   "loss": ("cross_entropy", "a_softmax", "am_softmax", "arcface")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(name, f"must be one of {allowed}, got {getattr(self, name)!r}")
        if len(self.ratios) != 3 or min(self.ratios) <= 0:
            raise ConfigError("ratios", f"need three positive split ratios, got {self.ratios}")

    @property
    def val_batch(self) -> int:
        return self.eval_batch_size or self.batch_size

    def loss_params(self) -> dict:
        out = {}
        if self.loss_m >= 0:
            out["m"] = self.loss_m
        if self.loss_s > 0:
            out["s"] = self.loss_s
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ratios"] = list(self.ratios)
        return d

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for f in dataclasses.fields(self):
            sec = SECTION_OF[f.name]
            if not cp.has_section(sec):
                cp.add_section(sec)
            v = getattr(self, f.name)
            cp.set(sec, f.name, ":".join(map(str, v)) if f.name == "ratios" else str(v))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


SECTIONS = {
    "data": ("source", "ratios", "data_seed", "augment", "flip_prob", "pad_pixels", "crop_size", "cutout_size"),
    "search": ("L", "Q", "S", "search_epochs", "batch_size", "eval_batch_size", "top_k", "seed", "rank_by",
               "search_eval_bn"),
    "child": ("loss", "loss_m", "loss_s", "stem_channels", "lr_max", "lr_min", "warmup_epochs", "momentum",
              "weight_decay", "dropblock_size", "keep_prob"),
    "controller": ("controller_lr", "controller_lr_min", "controller_lr_every", "entropy_weight",
                   "baseline_decay", "temperature", "hidden", "reward_mode"),
    "reward": ("target", "q", "latency_mode", "cost_table"),
    "retrain": ("retrain_epochs",),
}
SECTION_OF = {name: sec for sec, names in SECTIONS.items() for name in names}
REQUIRED = ("source",)
_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    default = _FIELDS[name].default
    try:
        if name == "ratios":
            parts = raw.replace(",", ":").split(":")
            return tuple(int(p) for p in parts)
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {type(default).__name__}") from None


def _resolve_key(key: str) -> str:
    sec, _, name = key.rpartition(".")
    if name not in _FIELDS:
        raise ConfigError(key, "unknown configuration key")
    if sec and SECTION_OF[name] != sec:
        raise ConfigError(key, f"key belongs to section [{SECTION_OF[name]}], not [{sec}]")
    return name


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            read = cp.read(path)
        except configparser.Error as exc:
            raise ConfigError("config", f"{path}: {exc}") from None
        if not read:
            raise ConfigError("config", f"cannot read {path}")
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(sec, "unknown section")
            for key, raw in cp.items(sec):
                name = _resolve_key(f"{sec}.{key}")
                values[name] = _coerce(name, raw)
    for item in overrides or []:
        key, eq, raw = item.partition("=")
        if not eq:
            raise ConfigError(item, "override must look like key=value")
        name = _resolve_key(key.strip())
        values[name] = _coerce(name, raw)
    if seed is not None:
        values["seed"] = seed
    for name in REQUIRED:
        if not values.get(name):
            raise ConfigError(f"{SECTION_OF[name]}.{name}", "required field is missing")
    return RunConfig(**values)


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    if "ratios" in d:
        d["ratios"] = tuple(d["ratios"])
    return RunConfig(**d)
