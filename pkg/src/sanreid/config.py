"""Run configuration, loaded from and echoed to JSON."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .datamodel import DEFAULT_PIXEL_MEAN, DEFAULT_PIXEL_STD
from .errors import ConfigError
from .network import BRANCHES

SCHEMA_VERSION = 1
OPTIMIZERS = ("sgd", "adam")


@dataclass
class RunConfig:
    manifest: str | None = None
    eval_manifest: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0

    backbone: str = "resnet50"
    backbone_width: int = 64
    pretrained: bool = False
    input_size: int = 256
    q: int = 8
    d: int = 512
    reduce_bn: bool = True
    reduce_relu: bool = True
    normalize: bool = False
    branch: str = "full"

    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    label_smoothing: float = 0.0

    optimizer: str = "sgd"
    lr: float = 3e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_step: int = 40
    lr_gamma: float = 0.1
    epochs: int = 120
    batch_size: int = 32
    flip: bool = True
    pixel_mean: tuple[float, float, float] = DEFAULT_PIXEL_MEAN
    pixel_std: tuple[float, float, float] = DEFAULT_PIXEL_STD

    checkpoint_every: int = 0
    resume: str | None = None
    protocol: str = "plain"
    eval_batch_size: int = 64
    predictor_epochs: int | None = None

    def __post_init__(self):
        self.loss_weights = tuple(float(x) for x in self.loss_weights)
        self.pixel_mean = tuple(float(x) for x in self.pixel_mean)
        self.pixel_std = tuple(float(x) for x in self.pixel_std)
        self.validate()

    def validate(self):
        if self.branch not in BRANCHES:
            raise ConfigError(f"branch must be one of {BRANCHES}, got {self.branch!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0:
            raise ConfigError("loss_weights must be three non-negative numbers")
        if len(self.pixel_mean) != 3 or len(self.pixel_std) != 3 or min(self.pixel_std) <= 0:
            raise ConfigError("pixel_mean / pixel_std must have three entries, std > 0")
        for name in ("q", "d", "input_size", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")

    @property
    def effective_weights(self) -> tuple[float, float, float]:
        """Loss weights after applying the branch ablation switch."""
        ws, wi, wa = self.loss_weights
        return {
            "full": (ws, wi, wa),
            "stripe": (ws, 0.0, 0.0),
            "attr": (0.0, wi, wa),
            "id": (0.0, wi, 0.0),
        }[self.branch]

    def model_kwargs(self) -> dict:
        return dict(
            q=self.q,
            d=self.d,
            backbone=self.backbone,
            input_size=self.input_size,
            backbone_width=self.backbone_width,
            reduce_bn=self.reduce_bn,
            reduce_relu=self.reduce_relu,
            branch=self.branch,
            normalize=self.normalize,
            pretrained=self.pretrained,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **dataclasses.asdict(self)}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_dict(data)
