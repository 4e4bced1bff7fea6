"""Flat ``key=value`` run configuration shared by the CLI commands.

Lines starting with ``#`` are comments. Unknown keys are rejected; every
key has a default, listed in :data:`DEFAULTS`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentConfig, GammaParams, PreprocessConfig
from .errors import ConfigurationError
from .model import ModelConfig, canonical_flavor
from .training import TrainConfig

# key -> (default, description)
DEFAULTS: dict[str, tuple[object, str]] = {
    "seed": (0, "seed for weight init, shuffling and augmentation"),
    "lr": (0.001, "Adam learning rate"),
    "batch_size": (16, "mini-batch size"),
    "epochs": (20, "training epochs per fusion model"),
    "freeze_extractors": (False, "freeze patch-embed/transformer blocks and CNN backbones"),
    "warmup_epochs": (0, "all-trainable epochs before freezing (with freeze_extractors)"),
    "width_factor": (0.25, "scale applied to the 512/256/121 MLP head widths"),
    "augment": (True, "apply random affine augmentation to training images"),
    "flavor": ("plain", "CNN backbone flavor: plain|residual|dense|sep"),
    "image_size": (32, "square input size after resizing"),
    "patch_size": (4, "transformer patch size"),
    "embed_dim": (32, "transformer token width"),
    "depth": (2, "number of transformer blocks"),
    "heads": (4, "attention heads"),
    "cnn_channels": (16, "backbone channel count (dense: base channels)"),
    "stages": (2, "stride-2 stages in each backbone"),
    "growth": (8, "dense backbone growth rate"),
    "dense_layers": (2, "layers in the dense block"),
    "aspp_branch_channels": (8, "channels per ASPP branch"),
    "aspp_channels": (16, "ASPP projection channels"),
    "se_reduction": (4, "SE bottleneck reduction ratio"),
    "gamma": (1.1, "gamma exponent"),
    "gamma_c": (1.0, "gamma multiplier c"),
    "preprocess_order": ("normalize,gamma,resize", "order of preprocessing steps"),
    "rotation_deg": (40.0, "max rotation in degrees"),
    "shift_frac": (0.2, "max shift as a fraction of size"),
    "shear": (0.2, "max shear angle (radians)"),
    "zoom_frac": (0.2, "zoom range fraction"),
    "hflip": (True, "random horizontal flips"),
    "data": ("", "dataset directory; empty means generate synthetic data"),
    "test_fraction": (0.2, "stratified test split fraction"),
    "split_seed": (0, "seed of the train/test split"),
    "synth_classes": (8, "synthetic dataset classes"),
    "synth_per_class": (50, "synthetic images per class"),
    "synth_size": (32, "synthetic image size"),
    "synth_seed": (0, "synthetic dataset seed"),
    "out": ("runs", "output directory"),
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key][0]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v for k, (v, _) in DEFAULTS.items()})

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def with_overrides(self, **kw) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kw.items():
            if k not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {k!r}")
            vals[k] = v
        return RunConfig(vals)

    def model_config(self, num_classes: int, flavor: str | None = None, **kw) -> ModelConfig:
        v = self.values
        return ModelConfig(
            num_classes=num_classes, image_size=v["image_size"], patch_size=v["patch_size"],
            embed_dim=v["embed_dim"], depth=v["depth"], heads=v["heads"], width_factor=v["width_factor"],
            flavor=canonical_flavor(flavor or v["flavor"]), cnn_channels=v["cnn_channels"], stages=v["stages"],
            growth=v["growth"], dense_layers=v["dense_layers"], aspp_branch_channels=v["aspp_branch_channels"],
            aspp_channels=v["aspp_channels"], se_reduction=v["se_reduction"], seed=v["seed"], **kw)

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(lr=v["lr"], batch_size=v["batch_size"], epochs=v["epochs"], seed=v["seed"],
                           freeze_extractors=v["freeze_extractors"], warmup_epochs=v["warmup_epochs"],
                           width_factor=v["width_factor"], augment=v["augment"])

    def preprocess_config(self) -> PreprocessConfig:
        order = tuple(s.strip() for s in self.values["preprocess_order"].split(","))
        return PreprocessConfig(self.values["image_size"], GammaParams(self.values["gamma_c"], self.values["gamma"]),
                                order)

    def augment_config(self) -> AugmentConfig:
        v = self.values
        return AugmentConfig(v["rotation_deg"], v["shift_frac"], v["shear"], v["zoom_frac"], v["hflip"])


def parse_config(text: str) -> RunConfig:
    values = {k: v for k, (v, _) in DEFAULTS.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return RunConfig(values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def describe_defaults() -> str:
    return "\n".join(f"{k}={v}  # {desc}" for k, (v, desc) in DEFAULTS.items())
