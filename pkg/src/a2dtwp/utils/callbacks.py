#!/usr/bin/env python
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

import logging
from typing import TYPE_CHECKING, Any, List, Optional

from transformers.utils.import_utils import _is_package_available


if TYPE_CHECKING:
    from ..configs import RunConfig
    from ..trainer import EpochStats


logger = logging.getLogger(__name__)

_wandb_available = _is_package_available("wandb")


def is_wandb_available() -> bool:
    return _wandb_available


class TrainerCallback:
    """Hooks called by the run driver; subclasses override what they need."""

    def on_train_begin(self, config: "RunConfig") -> None:
        pass

    def on_epoch_end(self, config: "RunConfig", stats: "EpochStats") -> None:
        pass

    def on_train_end(self, config: "RunConfig", summary: dict[str, Any]) -> None:
        pass


class WandbCallback(TrainerCallback):
    def __init__(self) -> None:
        if not is_wandb_available():
            raise ImportError(
                "wandb is not available and required for `report_to: [wandb]`. Please `pip install wandb`."
            )
        self._run = None

    def on_train_begin(self, config):
        import wandb

        run_args = config.run
        self._run = wandb.init(
            entity=run_args.wandb_entity,
            project=run_args.wandb_project,
            group=run_args.wandb_run_group,
            name=f"{run_args.mode}-seed{run_args.seed}",
            config=config.to_dict(),
            reinit=True,
        )

    def on_epoch_end(self, config, stats):
        self._run.log(
            {
                "epoch": stats.epoch,
                "train/loss": stats.loss,
                "val/top1": stats.val_top1,
                "transfer/bytes_sent": stats.bytes_sent,
                "awp/mean_bits": sum(stats.bits_per_layer) / len(stats.bits_per_layer),
            },
            step=stats.batch,
        )

    def on_train_end(self, config, summary):
        self._run.summary.update({k: v for k, v in summary.items() if isinstance(v, (int, float, str))})
        self._run.finish()


class TimeToAccuracyCallback(TrainerCallback):
    """Remembers the first epoch whose validation accuracy reaches `run.target_accuracy`."""

    def __init__(self) -> None:
        self.reached_epoch: Optional[int] = None
        self.reached_batch: Optional[int] = None
        self.reached_seconds: Optional[float] = None

    def on_epoch_end(self, config, stats):
        target = config.run.target_accuracy
        if target is None or self.reached_epoch is not None:
            return
        if stats.val_top1 >= target:
            self.reached_epoch = stats.epoch
            self.reached_batch = stats.batch
            self.reached_seconds = stats.accounted_seconds
            logger.info(
                f"Validation accuracy {stats.val_top1:.4f} reached the {target:.4f} target at epoch {stats.epoch}"
            )

    def on_train_end(self, config, summary):
        summary["time_to_accuracy"] = {
            "target": config.run.target_accuracy,
            "epoch": self.reached_epoch,
            "batch": self.reached_batch,
            "accounted_seconds": self.reached_seconds,
        }


CALLBACKS = {
    "wandb": WandbCallback,
    "time_to_accuracy": TimeToAccuracyCallback,
}


def get_callbacks(config: "RunConfig") -> List[TrainerCallback]:
    names = list(config.run.callbacks)
    if "wandb" in config.run.report_to and "wandb" not in names:
        names.append("wandb")
    if config.run.target_accuracy is not None and "time_to_accuracy" not in names:
        names.append("time_to_accuracy")

    callbacks = []
    for callback_name in names:
        if callback_name not in CALLBACKS:
            raise ValueError(f"Callback {callback_name} not found in CALLBACKS.")
        callbacks.append(CALLBACKS[callback_name]())

    return callbacks
