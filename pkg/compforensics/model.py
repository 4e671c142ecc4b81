# Copyright 2024 Google LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Two-branch network: per-branch heads and attention, shared tail, and the
concatenation-order discriminator."""

import dataclasses
import enum
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from compforensics.config import GanMode, Label, ModelConfig, TrainConfig
from compforensics.errors import CheckpointError, DimensionError, ParameterError

# Parameter collections, in checkpoint order.
COLLECTIONS = (
    "head_high",
    "head_low",
    "attention_high",
    "attention_low",
    "tail",
    "discriminator",
)


class BranchId(str, enum.Enum):
  HIGH = "high"
  LOW = "low"


def conv_stage(in_channels: int, out_channels: int, groups: int) -> nn.Sequential:
  """3x3 stride-2 conv, group norm, ReLU.

  Group norm behaves identically in train and eval mode.
  """
  return nn.Sequential(
      nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1),
      nn.GroupNorm(groups, out_channels),
      nn.ReLU(inplace=True),
  )


class HeadEncoder(nn.Sequential):
  """Image -> mid-level feature map V at the attention insertion depth."""

  def __init__(self, config: ModelConfig):
    stages = []
    in_channels = 3
    for i in range(config.head_stages):
      out_channels = config.base_channels * 2**i
      stages.append(conv_stage(in_channels, out_channels, config.norm_groups))
      in_channels = out_channels
    super().__init__(*stages)


class AttentionLayer(nn.Module):
  """1x1 convolution (C -> 1) followed by a sigmoid."""

  def __init__(self, channels: int):
    super().__init__()
    self.conv = nn.Conv2d(channels, 1, kernel_size=1)

  def forward(self, features: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(self.conv(features)).squeeze(1)


class TailEncoder(nn.Module):
  """Shared stages, global average pooling and a linear projection to d."""

  def __init__(self, config: ModelConfig):
    super().__init__()
    channels = config.feature_channels
    stages = []
    for _ in range(config.tail_stages):
      stages.append(conv_stage(channels, 2 * channels, config.norm_groups))
      channels *= 2
    self.stages = nn.Sequential(*stages)
    self.projection = nn.Linear(channels, config.embedding_dim)

  def forward(self, features: torch.Tensor) -> torch.Tensor:
    pooled = F.adaptive_avg_pool2d(self.stages(features), 1).flatten(1)
    return self.projection(pooled)


class Discriminator(nn.Module):
  """Guesses whether a 2C-channel input is concat(V_H, V_L) or concat(V_L, V_H).

  The first layer is a 1x1 convolution fusing the concatenation. There is no
  normalization, so the WGAN-GP penalty stays per-sample.
  """

  def __init__(self, channels: int, mode: GanMode = GanMode.LOG):
    super().__init__()
    self.mode = GanMode(mode)
    self.features = nn.Sequential(
        nn.Conv2d(2 * channels, channels, kernel_size=1),
        nn.LeakyReLU(0.2),
        nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        nn.LeakyReLU(0.2),
        nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        nn.LeakyReLU(0.2),
    )
    self.final = nn.Linear(channels, 1)

  def critic(self, concatenated: torch.Tensor) -> torch.Tensor:
    """Unbounded per-sample score, shape (N,)."""
    pooled = self.features(concatenated).mean(dim=(2, 3))
    return self.final(pooled).squeeze(1)

  def forward(self, concatenated: torch.Tensor) -> torch.Tensor:
    score = self.critic(concatenated)
    if self.mode == GanMode.LOG:
      return torch.sigmoid(score)
    return score


def apply_attention(features: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
  """V' = V * M with the (N, H, W) map broadcast across channels."""
  if attention.shape[-2:] != features.shape[-2:] or attention.shape[0] != features.shape[0]:
    raise DimensionError(
        f"attention map {tuple(attention.shape)} does not match features"
        f" {tuple(features.shape)}"
    )
  return features * attention.unsqueeze(1)


def concat_channels(first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
  """Channels [0, C) from `first`, [C, 2C) from `second`; order matters."""
  if first.shape != second.shape:
    raise DimensionError(
        f"cannot concatenate {tuple(first.shape)} with {tuple(second.shape)}"
    )
  return torch.cat([first, second], dim=1)


@dataclasses.dataclass
class BranchOutput:
  features: torch.Tensor  # V, (N, C, H, W)
  attention: Optional[torch.Tensor]  # M, (N, H, W), None without attention
  modulated: torch.Tensor  # V'
  embedding: torch.Tensor  # C, (N, d)


class TwoBranchNetwork(nn.Module):
  """Independent heads and attention layers per branch, one shared tail."""

  def __init__(self, config: ModelConfig, gan_mode: GanMode = GanMode.LOG):
    super().__init__()
    self.config = config
    channels = config.feature_channels
    self.head_high = HeadEncoder(config)
    self.head_low = HeadEncoder(config)
    self.attention_high = AttentionLayer(channels)
    self.attention_low = AttentionLayer(channels)
    self.tail = TailEncoder(config)
    self.discriminator = Discriminator(channels, gan_mode)

  def collections(self) -> Dict[str, nn.Module]:
    return {name: getattr(self, name) for name in COLLECTIONS}

  def encoder_parameters(self):
    for name in COLLECTIONS[:-1]:
      yield from getattr(self, name).parameters()

  def head(self, branch: BranchId) -> HeadEncoder:
    return self.head_high if BranchId(branch) == BranchId.HIGH else self.head_low

  def attention(self, branch: BranchId) -> AttentionLayer:
    return self.attention_high if BranchId(branch) == BranchId.HIGH else self.attention_low

  def head_forward(self, branch: BranchId, images: torch.Tensor) -> torch.Tensor:
    size = self.config.input_size
    if images.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[-2:]) != (size, size):
      raise DimensionError(
          f"expected images of shape (N, 3, {size}, {size}), got {tuple(images.shape)}"
      )
    return self.head(branch)(images)

  def _check_features(self, features: torch.Tensor):
    c, s = self.config.feature_channels, self.config.attention_size
    if features.ndim != 4 or tuple(features.shape[1:]) != (c, s, s):
      raise DimensionError(
          f"expected features of shape (N, {c}, {s}, {s}), got {tuple(features.shape)}"
      )

  def attention_forward(self, branch: BranchId, features: torch.Tensor) -> torch.Tensor:
    self._check_features(features)
    return self.attention(branch)(features)

  def tail_forward(self, modulated: torch.Tensor) -> torch.Tensor:
    self._check_features(modulated)
    return self.tail(modulated)

  def discriminator_forward(self, concatenated: torch.Tensor) -> torch.Tensor:
    c, s = self.config.feature_channels, self.config.attention_size
    if concatenated.ndim != 4 or tuple(concatenated.shape[1:]) != (2 * c, s, s):
      raise DimensionError(
          f"expected discriminator input (N, {2 * c}, {s}, {s}), got"
          f" {tuple(concatenated.shape)}"
      )
    return self.discriminator(concatenated)

  def forward_branch(
      self, branch: BranchId, images: torch.Tensor, use_attention: bool = True
  ) -> BranchOutput:
    features = self.head_forward(branch, images)
    attention = None
    modulated = features
    if use_attention:
      attention = self.attention_forward(branch, features)
      modulated = apply_attention(features, attention)
    return BranchOutput(features, attention, modulated, self.tail_forward(modulated))


def decision_threshold(r_minus: float, r_plus: float) -> float:
  if r_minus >= r_plus:
    raise ParameterError(f"r_minus ({r_minus}) must be less than r_plus ({r_plus})")
  return (r_minus + r_plus) / 2


def classify(embedding, r_minus: float, r_plus: float) -> Label:
  """FAKE iff the L2 distance from the origin is larger than (r- + r+) / 2."""
  threshold = decision_threshold(r_minus, r_plus)
  if isinstance(embedding, torch.Tensor):
    embedding = embedding.detach().cpu().numpy()
  distance = float(np.linalg.norm(np.asarray(embedding, dtype=np.float64)))
  return Label.FAKE if distance > threshold else Label.REAL


@dataclasses.dataclass
class Checkpoint:
  """Best-validation weights plus everything needed to rebuild the network."""

  weights: Dict[str, Dict[str, torch.Tensor]]
  model_config: ModelConfig
  train_config: TrainConfig
  epoch: int
  history: List[Dict[str, float]] = dataclasses.field(default_factory=list)

  @classmethod
  def from_network(
      cls,
      network: TwoBranchNetwork,
      train_config: TrainConfig,
      epoch: int,
      history: Optional[List[Dict[str, float]]] = None,
  ) -> "Checkpoint":
    return cls(
        weights=snapshot(network),
        model_config=network.config,
        train_config=train_config,
        epoch=epoch,
        history=list(history or []),
    )

  @property
  def constants(self) -> Dict[str, float]:
    loss = self.train_config.loss
    return {
        "r_minus": loss.r_minus,
        "r_plus": loss.r_plus,
        "embedding_dim": self.model_config.embedding_dim,
        "lambda1": loss.lambda1,
        "lambda2": loss.lambda2,
        "lambda3": loss.lambda3,
    }

  def build_network(self) -> TwoBranchNetwork:
    """Restores the network; raises CheckpointError on any mismatch."""
    missing = set(COLLECTIONS) - set(self.weights)
    extra = set(self.weights) - set(COLLECTIONS)
    if missing or extra:
      raise CheckpointError(
          f"checkpoint collections mismatch: missing {sorted(missing)}, extra"
          f" {sorted(extra)}"
      )
    network = TwoBranchNetwork(self.model_config, self.train_config.gan_mode)
    for name, module in network.collections().items():
      try:
        module.load_state_dict(self.weights[name], strict=True)
      except RuntimeError as e:
        raise CheckpointError(f"collection '{name}' is incompatible: {e}")
    network.eval()
    return network


def snapshot(network: TwoBranchNetwork) -> Dict[str, Dict[str, torch.Tensor]]:
  """Detached copies of every collection's parameters and buffers."""
  return {
      name: {k: v.detach().clone() for k, v in module.state_dict().items()}
      for name, module in network.collections().items()
  }
