"""Run configuration: ``key = value`` files plus ``--key value`` overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DatasetSpec, SyntheticSpec
from .networks import GeneratorSpec, MultiBranchDiscriminatorSpec
from .training import TrainConfig

OUTPUT_ROOT_ENV = "MBDGAN_OUTPUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    # general
    out_dir: str = "runs/default"
    seed: int = 0
    # dataset (directory per class); empty data_root means "generate synthetic"
    data_root: str = ""
    class_names: str = ""
    image_side: int = 64
    train_fraction: float = 0.8
    # synthetic shapes
    synth_count: int = 750
    synth_max_objects: int = 3
    synth_noise: float = 0.03
    # training
    total_epochs: int = 50
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    recycling: bool = True
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    non_saturating: bool = True
    checkpoint_every: int = 10
    sample_every: int = 10
    # generator
    g_base_channels: int = 16
    g_downsample: int = 2
    g_res_blocks: int = 2
    g_edge_kernel: int = 3
    # multi-branch discriminator
    branches: int = 4
    base_channels: int = 32
    d_layers: int = 4
    d_max_channels: int = 256
    # refiner
    refiner_low_side: int = 8
    refiner_epochs: int = 10
    refiner_base_channels: int = 8
    refiner_lambda_l1: float = 100.0
    # evaluation
    classifier_epochs: int = 6
    min_classifier_accuracy: float = 0.95
    is_splits: int = 0
    # inference inputs
    checkpoint: str = ""
    refiner_checkpoint: str = ""
    input_dir: str = ""
    source_label: str = ""
    target_label: str = ""
    # parameter audit
    audit_methods: str = "stargan,pix2pix,cyclegan"
    audit_branches: str = "1,2,4,8,16,32,64"

    # -- derived objects --------------------------------------------------
    def validate(self) -> None:
        if self.branches < 1:
            raise ConfigError("branches", "must be >= 1")
        if self.base_channels % self.branches:
            raise ConfigError("branches", f"base_channels = {self.base_channels} is not divisible by branches = {self.branches}")
        if self.branches > self.base_channels:
            raise ConfigError("branches", "cannot exceed base_channels")
        if self.d_max_channels % self.branches:
            raise ConfigError("d_max_channels", f"{self.d_max_channels} is not divisible by branches = {self.branches}")
        if self.image_side % (2**self.d_layers):
            raise ConfigError("d_layers", f"image_side {self.image_side} not divisible by 2^{self.d_layers}")
        if self.image_side % (2**self.g_downsample):
            raise ConfigError("g_downsample", f"image_side {self.image_side} not divisible by 2^{self.g_downsample}")
        if self.recycling and self.total_epochs < 2:
            raise ConfigError("total_epochs", "recycling needs at least 2 epochs")
        if self.lr < 0:
            raise ConfigError("lr", "must be non-negative")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(key, "must lie in [0, 1)")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction", "must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be positive")
        if self.image_side % self.refiner_low_side:
            raise ConfigError("refiner_low_side", f"must divide image_side {self.image_side}")

    def class_list(self) -> list[str] | None:
        names = [c.strip() for c in self.class_names.split(",") if c.strip()]
        return names or None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            total_epochs=self.total_epochs, batch_size=self.batch_size, lr=self.lr, betas=(self.beta1, self.beta2),
            recycling_enabled=self.recycling, lambda_cls=self.lambda_cls, lambda_cyc=self.lambda_cyc, seed=self.seed,
            image_side=self.image_side, branches=self.branches, non_saturating=self.non_saturating,
        )

    def generator_spec(self, num_classes: int) -> GeneratorSpec:
        return GeneratorSpec(3, self.g_base_channels, self.g_downsample, self.g_res_blocks, num_classes, self.image_side,
                             self.g_edge_kernel)

    def discriminator_spec(self, num_classes: int) -> MultiBranchDiscriminatorSpec:
        return MultiBranchDiscriminatorSpec(self.branches, self.base_channels, self.d_layers, num_classes, self.image_side,
                                            max_channels=self.d_max_channels)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(self.data_root, self.class_list(), self.image_side,
                           (self.train_fraction, 1 - self.train_fraction), self.seed)

    def synthetic_spec(self) -> SyntheticSpec:
        # object sizes are tuned for 64x64 and scale with the image side
        scale = self.image_side / 64
        return SyntheticSpec(image_side=self.image_side, max_objects=self.synth_max_objects, noise=self.synth_noise,
                             radius=(6.0 * scale, 9.0 * scale), margin=4.0 * scale)

    def output_path(self) -> Path:
        out = Path(self.out_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _convert(key: str, typ, raw: str):
    raw = raw.strip()
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(key, f"expected a boolean, got {raw!r}")
    if typ is int or typ == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got {raw!r}") from None
    if typ is float or typ == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {raw!r}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    return raw


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config(path=None, overrides: dict[str, str] | None = None, text: str | None = None) -> RunConfig:
    """File values first, then overrides; every key is checked and converted."""
    raw: dict[str, str] = {}
    if path:
        raw.update(parse_text(Path(path).read_text()))
    if text:
        raw.update(parse_text(text))
    raw.update({k.replace("-", "_"): v for k, v in (overrides or {}).items() if v is not None})
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _convert(key, types[key], value) if isinstance(value, str) else value
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def write_resolved(cfg: RunConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "resolved_config.txt"
    path.write_text(cfg.to_text())
    return path
