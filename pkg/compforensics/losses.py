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

"""Training objective: metric loss, attention loss, adversarial alignment.

    L = L_Dis + lambda1 * L_Gan + lambda2 * L_AT
"""

import dataclasses
from typing import Any, Callable, Dict, Optional, Tuple, Union

import torch
from torch.nn import functional as F

from compforensics.config import EPS, GanMode, Label, LossWeights
from compforensics.errors import DimensionError, ParameterError

Scalar = Union[torch.Tensor, float]


def _labels_like(labels: Any, embeddings: torch.Tensor) -> torch.Tensor:
  if isinstance(labels, (Label, int)):
    labels = [int(labels)]
  labels = torch.as_tensor(labels, device=embeddings.device)
  return labels.reshape(embeddings.shape[:-1]).bool()


def metric_margin_term(
    embeddings: torch.Tensor, labels: Any, r_minus: float, r_plus: float
) -> torch.Tensor:
  """Per-sample hinge: max(0, |C| - r-) for REAL, max(0, r+ - |C|) for FAKE."""
  if r_minus >= r_plus:
    raise ParameterError(f"r_minus ({r_minus}) must be less than r_plus ({r_plus})")
  norms = torch.linalg.vector_norm(embeddings, dim=-1)
  fake = _labels_like(labels, embeddings)
  return torch.where(fake, F.relu(r_plus - norms), F.relu(norms - r_minus))


def pair_distance_term(ch: torch.Tensor, cl: torch.Tensor) -> torch.Tensor:
  """Per-pair |C_h - C_l|_2, before the lambda3 weight."""
  if ch.shape != cl.shape:
    raise DimensionError(f"embedding shapes differ: {tuple(ch.shape)} vs {tuple(cl.shape)}")
  return torch.linalg.vector_norm(ch - cl, dim=-1)


def dis_terms(
    ch: torch.Tensor, cl: torch.Tensor, labels: Any, weights: LossWeights
) -> Dict[str, torch.Tensor]:
  """The five summands of L_Dis, each already divided by the batch size.

  Their sum, with `pair` weighted by lambda3, is the batch-mean L_Dis.
  """
  n = ch.shape[0]
  fake = _labels_like(labels, ch)
  margin_h = metric_margin_term(ch, fake, weights.r_minus, weights.r_plus)
  margin_l = metric_margin_term(cl, fake, weights.r_minus, weights.r_plus)
  zero = torch.zeros_like(margin_h)
  return {
      "real_high": torch.where(fake, zero, margin_h).sum() / n,
      "real_low": torch.where(fake, zero, margin_l).sum() / n,
      "fake_high": torch.where(fake, margin_h, zero).sum() / n,
      "fake_low": torch.where(fake, margin_l, zero).sum() / n,
      "pair": pair_distance_term(ch, cl).sum() / n,
  }


def dis_loss(
    ch: torch.Tensor, cl: torch.Tensor, labels: Any, weights: LossWeights
) -> torch.Tensor:
  terms = dis_terms(ch, cl, labels, weights)
  return (
      terms["real_high"]
      + terms["real_low"]
      + terms["fake_high"]
      + terms["fake_low"]
      + weights.lambda3 * terms["pair"]
  )


def margin_loss(embeddings: torch.Tensor, labels: Any, weights: LossWeights) -> torch.Tensor:
  """Single-branch metric loss: batch mean of the margin term."""
  return metric_margin_term(embeddings, labels, weights.r_minus, weights.r_plus).mean()


def distance_cross_entropy(
    embeddings: torch.Tensor, labels: Any, weights: LossWeights
) -> torch.Tensor:
  """Binary cross-entropy on the logit |C| - (r- + r+) / 2."""
  logits = torch.linalg.vector_norm(embeddings, dim=-1) - weights.threshold
  targets = _labels_like(labels, embeddings).to(logits.dtype)
  return F.binary_cross_entropy_with_logits(logits, targets)


def pool_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
  """Average-pools (N, H, W) masks to size x size and re-binarizes at 0.5."""
  pooled = F.adaptive_avg_pool2d(mask.unsqueeze(1).to(torch.float64), size).squeeze(1)
  return (pooled >= 0.5).to(mask.dtype if mask.is_floating_point() else torch.float32)


def attention_bce(attention: torch.Tensor, mask: torch.Tensor, eps: float = EPS) -> torch.Tensor:
  """Mean per-pixel binary cross-entropy; `mask` at attention resolution."""
  if attention.shape != mask.shape:
    raise DimensionError(
        f"attention {tuple(attention.shape)} and mask {tuple(mask.shape)} differ"
    )
  m = attention.clamp(eps, 1 - eps)
  mask = mask.to(m.dtype)
  return -(mask * torch.log(m) + (1 - mask) * torch.log(1 - m)).mean()


def attention_transfer_term(
    mh: torch.Tensor, ml: torch.Tensor, stop_gradient: bool = True
) -> torch.Tensor:
  """| M_H/|M_H| - M_L/|M_L| |_2 over whole maps, averaged over the batch.

  Takes one H x W map or an N x H x W batch. With `stop_gradient` the
  high-quality map is a fixed target.
  """
  if mh.shape != ml.shape:
    raise DimensionError(f"attention shapes differ: {tuple(mh.shape)} vs {tuple(ml.shape)}")
  if mh.ndim == 2:
    mh, ml = mh.unsqueeze(0), ml.unsqueeze(0)
  elif mh.ndim != 3:
    raise DimensionError(f"expected H x W or N x H x W maps, got {tuple(mh.shape)}")
  if stop_gradient:
    mh = mh.detach()
  h = F.normalize(mh.flatten(1), dim=1)
  l = F.normalize(ml.flatten(1), dim=1)
  return torch.linalg.vector_norm(h - l, dim=1).mean()


def at_terms(
    mh: torch.Tensor, ml: torch.Tensor, mask: torch.Tensor, weights: LossWeights
) -> Dict[str, torch.Tensor]:
  return {
      "bce_high": attention_bce(mh, mask),
      "bce_low": attention_bce(ml, mask),
      "transfer": attention_transfer_term(
          mh, ml, stop_gradient=not weights.bidirectional_transfer
      ),
  }


def at_loss(
    mh: torch.Tensor, ml: torch.Tensor, mask: torch.Tensor, weights: LossWeights
) -> torch.Tensor:
  terms = at_terms(mh, ml, mask, weights)
  return terms["bce_high"] + terms["bce_low"] + terms["transfer"]


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real_order: torch.Tensor,
    swapped_order: torch.Tensor,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
  """WGAN-GP penalty on uniform interpolations between the two orders."""
  n = real_order.shape[0]
  alpha = torch.rand(
      (n,) + (1,) * (real_order.ndim - 1),
      generator=generator,
      dtype=real_order.dtype,
      device=real_order.device,
  )
  interpolates = (alpha * real_order + (1 - alpha) * swapped_order).detach()
  interpolates.requires_grad_(True)
  scores = critic(interpolates)
  grads = None
  if scores.requires_grad:
    (grads,) = torch.autograd.grad(
        scores.sum(), interpolates, create_graph=True, allow_unused=True
    )
  if grads is None:
    grads = torch.zeros_like(interpolates)
  return ((grads.flatten(1).norm(2, dim=1) - 1) ** 2).mean()


def gan_losses(
    d_real_order: torch.Tensor,
    d_swapped_order: torch.Tensor,
    mode: GanMode = GanMode.LOG,
    penalty: Scalar = 0.0,
    gp_weight: float = 10.0,
    eps: float = EPS,
) -> Tuple[torch.Tensor, torch.Tensor]:
  """Discriminator and encoder losses for concatenation-order discrimination.

  "Real order" is concat(V_H, V_L), "swapped order" is concat(V_L, V_H).

  Returns:
    (d_loss, g_loss). The discriminator minimizes d_loss, the heads g_loss.
  """
  d_real_order = torch.as_tensor(d_real_order)
  d_swapped_order = torch.as_tensor(d_swapped_order)
  if GanMode(mode) == GanMode.LOG:
    pr = d_real_order.clamp(eps, 1 - eps)
    ps = d_swapped_order.clamp(eps, 1 - eps)
    expectation = torch.log(pr).mean() + torch.log(1 - ps).mean()
    return -expectation, expectation
  gap = d_real_order.mean() - d_swapped_order.mean()
  return -gap + gp_weight * penalty, gap


def _item(x: Scalar) -> float:
  return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@dataclasses.dataclass
class LossReport:
  """One step's losses; `total = dis + lambda1 * gan + lambda2 * at`."""

  total: float
  dis: float
  gan: float
  at: float
  discriminator_loss: float
  per_term: Dict[str, float] = dataclasses.field(default_factory=dict)
  step: Optional[int] = None
  objective: Optional[torch.Tensor] = dataclasses.field(
      default=None, repr=False, compare=False
  )

  def to_dict(self) -> Dict[str, Any]:
    d = {
        "total": self.total,
        "dis": self.dis,
        "gan": self.gan,
        "at": self.at,
        "discriminator_loss": self.discriminator_loss,
        "per_term": dict(self.per_term),
    }
    if self.step is not None:
      d["step"] = self.step
    return d


def total_loss(
    dis: Scalar,
    gan: Scalar,
    at: Scalar,
    weights: LossWeights,
    discriminator_loss: Scalar = 0.0,
    per_term: Optional[Dict[str, Scalar]] = None,
) -> LossReport:
  """Combines the components; the discriminator loss is reported only."""
  objective = dis + weights.lambda1 * gan + weights.lambda2 * at
  return LossReport(
      total=_item(objective),
      dis=_item(dis),
      gan=_item(gan),
      at=_item(at),
      discriminator_loss=_item(discriminator_loss),
      per_term={k: _item(v) for k, v in (per_term or {}).items()},
      objective=objective if isinstance(objective, torch.Tensor) else None,
  )
