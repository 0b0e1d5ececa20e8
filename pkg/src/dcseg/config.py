"""Run configuration: one YAML document holding every sub-config."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import AugmentationConfig, PhantomSpec
from .networks import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None
    phantom: PhantomSpec | None = None
    phantom_count: int = 16
    test_fraction: float = 0.2

    def __post_init__(self):
        if (self.path is None) == (self.phantom is None):
            raise ValueError("exactly one of data.path and data.phantom must be set")
        if self.phantom_count < 0:
            raise ValueError("phantom_count must be >= 0")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    augment: AugmentationConfig
    data: DataConfig
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.augment.crop_size != self.model.patch_side:
            raise ConfigError("augment.crop_size: must equal model.patch_side "
                              f"({self.augment.crop_size} != {self.model.patch_side})")
        if self.train.patch_side != self.model.patch_side:
            raise ConfigError("train.patch_side: must equal model.patch_side "
                              f"({self.train.patch_side} != {self.model.patch_side})")
        ph = self.data.phantom
        if ph is not None:
            if ph.modality_count != self.model.modality_count:
                raise ConfigError("data.phantom.modality_count: does not match model.modality_count")
            if ph.class_count != self.model.class_count:
                raise ConfigError("data.phantom.class_count: does not match model.class_count")

    def to_dict(self) -> dict:
        data = asdict(self.data)
        if self.data.phantom is not None:
            data["phantom"] = self.data.phantom.to_dict()
        return {
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "augment": _listify(asdict(self.augment)),
            "data": data,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        _reject_unknown("", raw, {"model", "train", "augment", "data", "output_dir"})
        for key in ("model", "train", "data"):
            if key not in raw:
                raise ConfigError(f"{key}: section missing")
        model = _build("model", ModelConfig, raw["model"])
        train = _build("train", TrainConfig, {"patch_side": model.patch_side, **raw["train"]})
        aug_raw = {"crop_size": model.patch_side, "seed": train.seed, **(raw.get("augment") or {})}
        augment = _build("augment", AugmentationConfig, aug_raw)
        data_raw = dict(raw["data"] or {})
        if data_raw.get("phantom") is not None:
            data_raw["phantom"] = _build("data.phantom", PhantomSpec, data_raw["phantom"])
        data = _build("data", DataConfig, data_raw)
        return cls(model, train, augment, data, str(raw.get("output_dir", "runs/default")))


def _listify(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _reject_unknown(section: str, raw: dict, allowed):
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        prefix = f"{section}." if section else ""
        raise ConfigError(f"{prefix}{unknown[0]}: unknown field")


def _build(section: str, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: must be a mapping")
    _reject_unknown(section, raw, {f.name for f in fields(cls)})
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return RunConfig.from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def load_phantom_spec(path) -> tuple[PhantomSpec, int | None]:
    """Accept either a full run config (uses ``data.phantom``) or a bare phantom mapping."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"spec file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict):
        raise ConfigError("phantom spec must be a mapping")
    if "data" in raw:
        data = raw["data"] or {}
        if data.get("phantom") is None:
            raise ConfigError("data.phantom: missing from run config")
        return _build("data.phantom", PhantomSpec, data["phantom"]), data.get("phantom_count")
    return _build("phantom", PhantomSpec, raw), None
