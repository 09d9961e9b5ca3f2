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

"""Fully-connected ReLU network, softmax cross-entropy and momentum SGD."""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .configs import ModelConfig, SgdConfig


logger = logging.getLogger(__name__)


class ShapeMismatch(ValueError):
    pass


class NonFiniteParameters(FloatingPointError):
    pass


def _dense_logits(weights: Sequence[torch.Tensor], biases: Sequence[torch.Tensor], inputs: torch.Tensor):
    activations = [inputs]
    hidden = inputs
    for index, (weight, bias) in enumerate(zip(weights, biases)):
        hidden = hidden @ weight + bias
        if index < len(weights) - 1:
            hidden = F.relu(hidden)
        activations.append(hidden)
    return activations


class DenseNetwork(nn.Module):
    """Stack of dense layers; weights are stored as (fan_in, fan_out), ReLU on every hidden layer."""

    def __init__(
        self,
        layer_sizes: Sequence[int],
        init_std: float = 0.1,
        bias_init: float = 0.0,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if len(layer_sizes) < 2:
            raise ValueError(f"need at least an input and an output size, got {list(layer_sizes)}")
        self.layer_sizes = list(layer_sizes)
        self.weights = nn.ParameterList(
            nn.Parameter(torch.randn(fan_in, fan_out, generator=generator, dtype=dtype) * init_std)
            for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:])
        )
        self.biases = nn.ParameterList(
            nn.Parameter(torch.full((fan_out,), bias_init, dtype=dtype)) for fan_out in layer_sizes[1:]
        )

    @classmethod
    def from_config(
        cls, num_features: int, num_classes: int, config: ModelConfig, generator: Optional[torch.Generator] = None
    ) -> "DenseNetwork":
        sizes = [num_features, *config.hidden_sizes, num_classes]
        return cls(sizes, init_std=config.init_std, bias_init=config.bias_init, generator=generator)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        return _dense_logits(list(self.weights), list(self.biases), inputs)[-1]


@dataclass
class ForwardResult:
    activations: list[torch.Tensor]
    probabilities: torch.Tensor
    loss: torch.Tensor
    weights: list[torch.Tensor]
    biases: list[torch.Tensor]

    @property
    def sample_count(self) -> int:
        return self.activations[0].shape[0]


@dataclass
class GradientSet:
    weight_grads: list[torch.Tensor]
    bias_grads: list[torch.Tensor]
    sample_count: int = 1

    def __post_init__(self):
        if self.sample_count < 1:
            raise ShapeMismatch(f"a gradient contribution needs at least one sample, got {self.sample_count}")

    def arrays(self) -> list[torch.Tensor]:
        return [*self.weight_grads, *self.bias_grads]


def forward(
    net: DenseNetwork,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    weights: Optional[Sequence[torch.Tensor]] = None,
    biases: Optional[Sequence[torch.Tensor]] = None,
) -> ForwardResult:
    """Runs the network on a batch and computes the mean cross-entropy.

    `weights`/`biases` replace the network's own parameters, e.g. with a worker's truncated copies;
    they must require grad for `backward` to work.
    """
    if inputs.dim() != 2 or inputs.shape[0] == 0:
        raise ShapeMismatch(f"expected a non-empty (batch, features) input, got shape {tuple(inputs.shape)}")
    if inputs.shape[1] != net.layer_sizes[0]:
        raise ShapeMismatch(f"input width {inputs.shape[1]} does not match fan_in {net.layer_sizes[0]}")
    if labels.shape != (inputs.shape[0],):
        raise ShapeMismatch(f"expected {inputs.shape[0]} labels, got shape {tuple(labels.shape)}")

    weights = list(net.weights) if weights is None else list(weights)
    biases = list(net.biases) if biases is None else list(biases)
    _check_parameter_shapes(net, weights, biases)

    activations = _dense_logits(weights, biases, inputs)
    logits = activations[-1]
    return ForwardResult(
        activations=activations,
        probabilities=torch.softmax(logits.detach(), dim=-1),
        loss=F.cross_entropy(logits, labels),
        weights=weights,
        biases=biases,
    )


def backward(net: DenseNetwork, result: ForwardResult) -> GradientSet:
    """Gradients of the mean loss w.r.t. every tensor the forward pass used."""
    if len(result.weights) != net.num_layers:
        raise ShapeMismatch(f"forward pass used {len(result.weights)} layers, network has {net.num_layers}")
    grads = torch.autograd.grad(result.loss, [*result.weights, *result.biases])
    return GradientSet(
        weight_grads=[g.detach() for g in grads[: net.num_layers]],
        bias_grads=[g.detach() for g in grads[net.num_layers :]],
        sample_count=result.sample_count,
    )


def _check_parameter_shapes(net: DenseNetwork, weights: Sequence[torch.Tensor], biases: Sequence[torch.Tensor]):
    if len(weights) != net.num_layers or len(biases) != net.num_layers:
        raise ShapeMismatch(f"expected {net.num_layers} weight and bias tensors, got {len(weights)}/{len(biases)}")
    for index, (weight, bias, own_weight, own_bias) in enumerate(zip(weights, biases, net.weights, net.biases)):
        if weight.shape != own_weight.shape or bias.shape != own_bias.shape:
            raise ShapeMismatch(
                f"layer {index}: got weight {tuple(weight.shape)} / bias {tuple(bias.shape)}, "
                f"expected {tuple(own_weight.shape)} / {tuple(own_bias.shape)}"
            )


def pairwise_sum(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sums in a fixed balanced tree so the result only depends on the order of `tensors`."""
    if len(tensors) == 1:
        return tensors[0]
    middle = len(tensors) // 2
    return pairwise_sum(tensors[:middle]) + pairwise_sum(tensors[middle:])


def build_optimizer(net: DenseNetwork, cfg: SgdConfig) -> torch.optim.SGD:
    # weight decay applies to weights only
    return torch.optim.SGD(
        [
            {"params": list(net.weights), "weight_decay": cfg.weight_decay},
            {"params": list(net.biases), "weight_decay": 0.0},
        ],
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
    )


def build_scheduler(optimizer: torch.optim.Optimizer, cfg: SgdConfig) -> Optional[torch.optim.lr_scheduler.StepLR]:
    if cfg.lr_decay_every == 0:
        return None
    return torch.optim.lr_scheduler.StepLR(optimizer, step_size=cfg.lr_decay_every, gamma=cfg.lr_decay_factor)


def gather_and_update(
    net: DenseNetwork, contributions: Sequence[GradientSet], optimizer: torch.optim.Optimizer
) -> DenseNetwork:
    """Averages the contributions (sample-weighted) and applies one optimizer step to the master weights."""
    if not contributions:
        raise ShapeMismatch("no gradient contributions to gather")
    params = [*net.weights, *net.biases]
    for contribution in contributions:
        arrays = contribution.arrays()
        if len(arrays) != len(params) or any(g.shape != p.shape for g, p in zip(arrays, params)):
            raise ShapeMismatch("gradient contribution does not match the network shapes")

    total = sum(contribution.sample_count for contribution in contributions)
    for index, param in enumerate(params):
        weighted = [c.arrays()[index] * c.sample_count for c in contributions]
        param.grad = (pairwise_sum(weighted) / total).to(param.dtype)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)

    with torch.no_grad():
        for index, param in enumerate(params):
            if not torch.isfinite(param).all():
                raise NonFiniteParameters(f"non-finite values in parameter {index} after the update")
    return net


@torch.no_grad()
def evaluate(net: DenseNetwork, inputs: torch.Tensor, labels: torch.Tensor, batch_size: int = 1024) -> float:
    """Top-1 accuracy of the network on a labelled set."""
    if inputs.shape[0] == 0:
        return 0.0
    correct = 0
    for start in range(0, inputs.shape[0], batch_size):
        logits = net(inputs[start : start + batch_size])
        correct += (logits.argmax(dim=-1) == labels[start : start + batch_size]).sum().item()
    return correct / inputs.shape[0]
