# coding=utf-8
# Copyright 2025. All rights reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml
from transformers import HfArgumentParser


VALID_BITS = (8, 16, 24, 32)
MODES = ("baseline", "oracle", "a2dtwp")
_ORACLE_ALIAS = re.compile(r"^oracle_fixed_bits\((\d+)\)$")


class InvalidField(ValueError):
    """A config value failed validation; `field` names the offending field."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """
    Where the training samples come from.

    Args:
        dataset_path (`str` or `None`, *optional*, defaults to `None`):
            CSV (`features..., label` per row) or flat binary file written by `a2dtwp make-blobs`.
            When unset, Gaussian blobs are generated in memory from the `blob_*` fields.
    """

    dataset_path: Optional[str] = field(default=None, metadata={"help": "Dataset file (.csv or .bin)."})
    num_samples: int = field(default=10_000, metadata={"help": "Number of synthetic samples."})
    num_features: int = field(default=32, metadata={"help": "Width of each synthetic sample."})
    num_classes: int = field(default=4, metadata={"help": "Number of synthetic classes."})
    blob_std: float = field(default=1.0, metadata={"help": "Standard deviation of every blob."})
    blob_spread: float = field(default=0.5, metadata={"help": "Standard deviation of the blob centers."})
    val_fraction: float = field(default=0.2, metadata={"help": "Fraction of samples held out for validation."})

    def __post_init__(self):
        for name in ("num_samples", "num_features", "num_classes"):
            if getattr(self, name) < 1:
                raise InvalidField(name, f"must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise InvalidField("num_classes", "at least two classes are required")
        if self.blob_std <= 0:
            raise InvalidField("blob_std", f"must be positive, got {self.blob_std}")
        if not 0 < self.val_fraction < 1:
            raise InvalidField("val_fraction", f"must be in (0, 1), got {self.val_fraction}")


@dataclass
class ModelConfig:
    hidden_sizes: list[int] = field(
        default_factory=lambda: [128, 64], metadata={"help": "Widths of the hidden ReLU layers."}
    )
    init_std: float = field(default=0.1, metadata={"help": "Std of the zero-mean normal weight init."})
    bias_init: float = field(default=0.0, metadata={"help": "Constant bias init."})

    def __post_init__(self):
        if any(size < 1 for size in self.hidden_sizes):
            raise InvalidField("hidden_sizes", f"all widths must be positive, got {self.hidden_sizes}")
        if self.init_std <= 0:
            raise InvalidField("init_std", f"must be positive, got {self.init_std}")


@dataclass
class SgdConfig:
    learning_rate: float = field(default=0.01, metadata={"help": "SGD learning rate (mu)."})
    momentum: float = field(default=0.9, metadata={"help": "Momentum factor in [0, 1)."})
    weight_decay: float = field(default=5e-4, metadata={"help": "L2 penalty applied to weights, not biases."})
    batch_size: int = field(default=64, metadata={"help": "Samples per SGD batch."})
    lr_decay_every: int = field(default=0, metadata={"help": "Decay the learning rate every N batches (0: off)."})
    lr_decay_factor: float = field(default=0.16, metadata={"help": "Multiplicative learning rate decay."})

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidField("learning_rate", f"must be non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise InvalidField("momentum", f"must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidField("weight_decay", f"must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise InvalidField("batch_size", f"must be positive, got {self.batch_size}")
        if self.lr_decay_every < 0:
            raise InvalidField("lr_decay_every", f"must be non-negative, got {self.lr_decay_every}")
        if not 0 < self.lr_decay_factor <= 1:
            raise InvalidField("lr_decay_factor", f"must be in (0, 1], got {self.lr_decay_factor}")


@dataclass
class AwpConfig:
    """
    Adaptive weight precision parameters.

    Args:
        threshold (`float`, *optional*, defaults to `-2e-3`):
            Change-rate threshold `T`. Batches whose relative l2-norm change is below it count towards
            widening. A negative value only counts shrinking norms; a small positive value also counts
            norms that have stopped growing.
        interval (`int`, *optional*, defaults to `50`):
            Below-threshold batches needed before a layer widens.
        step_bits (`int`, *optional*, defaults to `8`):
            Bits added per widening.
        initial_bits (`int`, *optional*, defaults to `8`):
            Starting width of every layer.
        consecutive (`bool`, *optional*, defaults to `False`):
            Reset the interval counter on every batch that is not below the threshold.
        layer_groups (`list[int]` or `None`, *optional*, defaults to `None`):
            Group id per layer; layers with the same id share one precision state.
    """

    threshold: float = field(default=-2e-3, metadata={"help": "Change-rate threshold T."})
    interval: int = field(default=50, metadata={"help": "Below-threshold batches before widening."})
    step_bits: int = field(default=8, metadata={"help": "Bits added per widening (N)."})
    initial_bits: int = field(default=8, metadata={"help": "Initial bits for every layer."})
    max_bits: int = field(default=32, metadata={"help": "Upper bound on the width."})
    consecutive: bool = field(default=False, metadata={"help": "Require consecutive below-threshold batches."})
    layer_groups: Optional[list[int]] = field(default=None, metadata={"help": "Shared-precision group per layer."})

    def __post_init__(self):
        if self.interval < 1:
            raise InvalidField("interval", f"must be positive, got {self.interval}")
        if self.step_bits < 1:
            raise InvalidField("step_bits", f"must be positive, got {self.step_bits}")
        if self.initial_bits not in VALID_BITS:
            raise InvalidField("initial_bits", f"must be one of {VALID_BITS}, got {self.initial_bits}")
        if not self.initial_bits <= self.max_bits <= 32:
            raise InvalidField("max_bits", f"must be in [initial_bits, 32], got {self.max_bits}")


@dataclass
class LinkConfig:
    bandwidth: float = field(default=12e9, metadata={"help": "Host to worker link bandwidth in bytes/s."})
    latency: float = field(default=10e-6, metadata={"help": "Per-message latency in seconds."})

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise InvalidField("bandwidth", f"must be positive, got {self.bandwidth}")
        if self.latency < 0:
            raise InvalidField("latency", f"must be non-negative, got {self.latency}")


@dataclass
class RunArguments:
    mode: str = field(
        default="a2dtwp",
        metadata={"help": "One of 'baseline', 'oracle' (fixed `oracle_bits`), 'a2dtwp' or 'oracle_fixed_bits(b)'."},
    )
    oracle_bits: int = field(default=32, metadata={"help": "Fixed width used by the oracle mode."})
    seed: Optional[int] = field(default=None, metadata={"help": "Random seed (required for training)."})
    epochs: int = field(default=10, metadata={"help": "Number of training epochs."})
    num_workers: int = field(default=1, metadata={"help": "Number of simulated workers (D)."})
    reduction_shards: int = field(
        default=4, metadata={"help": "Fixed gradient shards per batch; workers split shards, not samples."}
    )
    output_dir: str = field(default="outputs/run", metadata={"help": "Directory for CSVs and reports."})
    log_level: str = field(
        default="info",
        metadata={"help": "Logging level.", "choices": ["debug", "info", "warning", "error"]},
    )
    report_to: list[str] = field(default_factory=lambda: [], metadata={"help": "Trackers to report to ('wandb')."})
    callbacks: list[str] = field(default_factory=lambda: [], metadata={"help": "Extra per-epoch callbacks."})
    target_accuracy: Optional[float] = field(
        default=None, metadata={"help": "Validation accuracy used for time-to-accuracy tracking."}
    )
    wall_clock_in_csv: bool = field(
        default=False, metadata={"help": "Write measured codec times into the CSVs (breaks byte-identical reruns)."}
    )
    wandb_entity: Optional[str] = field(default=None, metadata={"help": "The entity to store runs under."})
    wandb_project: Optional[str] = field(default=None, metadata={"help": "The project to store runs under."})
    wandb_run_group: Optional[str] = field(default=None, metadata={"help": "The group to store runs under."})

    def __post_init__(self):
        alias = _ORACLE_ALIAS.match(self.mode)
        if alias:
            self.mode = "oracle"
            self.oracle_bits = int(alias.group(1))
        if self.mode not in MODES:
            raise InvalidField("mode", f"must be one of {MODES} or 'oracle_fixed_bits(b)', got {self.mode!r}")
        if self.oracle_bits not in VALID_BITS:
            raise InvalidField("oracle_bits", f"must be one of {VALID_BITS}, got {self.oracle_bits}")
        if self.epochs < 1:
            raise InvalidField("epochs", f"must be positive, got {self.epochs}")
        if self.num_workers < 1:
            raise InvalidField("num_workers", f"must be positive, got {self.num_workers}")
        if self.reduction_shards < 1:
            raise InvalidField("reduction_shards", f"must be positive, got {self.reduction_shards}")
        if self.target_accuracy is not None and not 0 < self.target_accuracy <= 1:
            raise InvalidField("target_accuracy", f"must be in (0, 1], got {self.target_accuracy}")


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "sgd": SgdConfig,
    "awp": AwpConfig,
    "link": LinkConfig,
    "run": RunArguments,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    awp: AwpConfig = field(default_factory=AwpConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    run: RunArguments = field(default_factory=RunArguments)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **sections) -> "RunConfig":
        """Copy with some sections swapped, e.g. `cfg.replace(run=dataclasses.replace(cfg.run, mode="baseline"))`."""
        return dataclasses.replace(self, **sections)


def _field_owner() -> dict[str, str]:
    owners = {}
    for section, dtype in SECTIONS.items():
        for f in dataclasses.fields(dtype):
            owners[f.name] = section
    return owners


def _key_lines(path: Path) -> dict[tuple[str, str], int]:
    """1-based line number of every `section.key` in a YAML config."""
    with open(path, "r", encoding="utf-8") as f:
        root = yaml.compose(f)
    lines: dict[tuple[str, str], int] = {}
    if not isinstance(root, yaml.MappingNode):
        return lines
    for section_key, section_value in root.value:
        lines[(section_key.value, "")] = section_key.start_mark.line + 1
        if isinstance(section_value, yaml.MappingNode):
            for key, _ in section_value.value:
                lines[(section_key.value, key.value)] = key.start_mark.line + 1
    return lines


def read_config_file(path) -> dict[str, Any]:
    """Reads a sectioned YAML config into a flat `{field: value}` mapping, rejecting unknown keys."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: invalid YAML: {getattr(e, 'problem', e)}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections {list(SECTIONS)}")

    lines = _key_lines(path)
    owners = _field_owner()
    flat: dict[str, Any] = {}
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"{path}:{lines.get((section, ''), '?')}: unknown section '{section}'")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"{path}:{lines.get((section, ''), '?')}: section '{section}' must be a mapping")
        for key, value in values.items():
            if owners.get(key) != section:
                hint = f" (did you mean section '{owners[key]}'?)" if key in owners else ""
                raise ConfigError(f"{path}:{lines.get((section, key), '?')}: unknown field '{section}.{key}'{hint}")
            flat[key] = value
    return flat


def make_parser() -> HfArgumentParser:
    return HfArgumentParser(tuple(SECTIONS.values()))


def load_run_config(config_file=None, args: Optional[list[str]] = None) -> RunConfig:
    """Builds a `RunConfig` from an optional YAML file, overridden by command-line style `args`.

    Validation failures are raised as `ConfigError` pointing at the file line of the offending field
    when the value came from the file.
    """
    defaults = read_config_file(config_file) if config_file is not None else {}
    parser = make_parser()
    parser.set_defaults(**defaults)
    try:
        *parsed, remaining = parser.parse_args_into_dataclasses(
            args=args or [], return_remaining_strings=True, look_for_args_file=False
        )
    except InvalidField as e:
        owners = _field_owner()
        section = owners.get(e.field, "?")
        where = "command line"
        if config_file is not None and e.field in defaults and not _overridden(e.field, args):
            where = f"{config_file}:{_key_lines(Path(config_file)).get((section, e.field), '?')}"
        raise ConfigError(f"{where}: [{section}.{e.field}] {e}") from e
    if remaining:
        raise ConfigError(f"command line: unknown config fields {remaining}")
    return RunConfig(**dict(zip(SECTIONS, parsed)))


def _overridden(field_name: str, args: Optional[list[str]]) -> bool:
    flag = f"--{field_name}"
    return any(arg == flag or arg.startswith(flag + "=") for arg in args or [])
