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

"""Alternating discriminator/encoder training, early stopping and ablations."""

import dataclasses
import pathlib
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from absl import logging as absl_logging
import pandas as pd
import torch
import tqdm

from compforensics import datasets
from compforensics import evaluation
from compforensics import logging
from compforensics import losses
from compforensics import utils
from compforensics.config import GanMode, Label, Objective, TrainConfig, Variant
from compforensics.errors import DatasetError, NonFiniteLossError
from compforensics.model import BranchId, Checkpoint, TwoBranchNetwork, concat_channels, snapshot
from compforensics.synthdata import DatasetManifest

BALANCE_TOLERANCE = 0.05


def balance_classes(manifest: DatasetManifest, split: str = "train") -> DatasetManifest:
  """Oversamples the minority class of `split` until real:fake is within 5%.

  Copies get ids `<id>#<rep>` and alternate the horizontal flip flag.
  """
  entries = manifest.split_entries(split)
  real = [e for e in entries if e.label == Label.REAL]
  fake = [e for e in entries if e.label == Label.FAKE]
  if not real or not fake:
    raise DatasetError(
        f"split '{split}' needs both classes, got {len(real)} real and {len(fake)} fake"
    )
  if abs(len(real) / len(fake) - 1) <= BALANCE_TOLERANCE:
    return manifest

  minority, majority = (real, fake) if len(real) < len(fake) else (fake, real)
  copies = []
  for k in range(len(majority) - len(minority)):
    source = minority[k % len(minority)]
    rep = k // len(minority) + 1
    copies.append(
        dataclasses.replace(
            source, pair_id=f"{source.pair_id}#{rep}", flip=source.flip ^ (rep % 2 == 1)
        )
    )
  splits = {name: list(ids) for name, ids in manifest.splits.items()}
  splits[split] = splits[split] + [e.pair_id for e in copies]
  absl_logging.info(
      "Balanced '%s': %d real, %d fake, %d copies added",
      split, len(real), len(fake), len(copies),
  )
  return DatasetManifest(
      entries=manifest.entries + copies, splits=splits, seed=manifest.seed
  ).validate()


class EarlyStopping:
  """Stops after `patience` epochs without a strict improvement."""

  def __init__(self, patience: int):
    self.patience = patience
    self.best = float("inf")
    self.best_epoch: Optional[int] = None
    self.best_state: Any = None
    self.bad_epochs = 0

  def update(self, epoch: int, value: float, state_fn: Optional[Callable[[], Any]] = None) -> bool:
    """Records one validation value; returns True when training should stop."""
    if value < self.best:
      self.best = value
      self.best_epoch = epoch
      self.bad_epochs = 0
      if state_fn is not None:
        self.best_state = state_fn()
    else:
      self.bad_epochs += 1
    return self.bad_epochs >= self.patience


@dataclasses.dataclass
class EncoderLosses:
  dis: torch.Tensor
  gan: torch.Tensor
  at: torch.Tensor
  per_term: Dict[str, torch.Tensor]


class Trainer:

  def __init__(
      self,
      config: TrainConfig,
      network: Optional[TwoBranchNetwork] = None,
      log: Optional[logging.TrainingLog] = None,
  ) -> None:
    config.validate()
    self.config = config
    torch.manual_seed(config.seed)
    self.network = network or TwoBranchNetwork(config.model, config.gan_mode)
    self.dtype = next(self.network.parameters()).dtype
    self.log = log
    self.step = 0
    betas = (config.beta1, config.beta2)
    self.encoder_optimizer = torch.optim.Adam(
        list(self.network.encoder_parameters()), lr=config.learning_rate, betas=betas
    )
    self.discriminator_optimizer = torch.optim.Adam(
        self.network.discriminator.parameters(), lr=config.learning_rate, betas=betas
    )
    self.gp_generator = torch.Generator().manual_seed(utils.derive_seed(config.seed, 1))

  def _unpack(self, batch: Dict[str, Any]) -> Tuple[torch.Tensor, ...]:
    return (
        batch["hq"].to(self.dtype),
        batch["lq"].to(self.dtype),
        batch["mask"].to(self.dtype),
        batch["label"],
    )

  def discriminator_step(self, hq: torch.Tensor, lq: torch.Tensor) -> float:
    """One discriminator update on detached head features."""
    network = self.network
    with torch.no_grad():
      vh = network.head_forward(BranchId.HIGH, hq)
      vl = network.head_forward(BranchId.LOW, lq)
    real_order, swapped_order = concat_channels(vh, vl), concat_channels(vl, vh)
    penalty = 0.0
    if self.config.gan_mode == GanMode.WGAN_GP:
      penalty = losses.gradient_penalty(
          network.discriminator_forward, real_order, swapped_order, self.gp_generator
      )
    d_loss, _ = losses.gan_losses(
        network.discriminator_forward(real_order),
        network.discriminator_forward(swapped_order),
        self.config.gan_mode,
        penalty,
        self.config.loss.gp_weight,
    )
    if not torch.isfinite(d_loss):
      raise NonFiniteLossError(self.step, "discriminator", float(d_loss))
    self.discriminator_optimizer.zero_grad()
    d_loss.backward()
    self.discriminator_optimizer.step()
    return float(d_loss.detach())

  def encoder_losses(
      self, hq: torch.Tensor, lq: torch.Tensor, mask: torch.Tensor, labels: torch.Tensor
  ) -> EncoderLosses:
    """The encoder-side components of the objective for this run's variant."""
    network, variant, weights = self.network, self.config.variant, self.config.loss
    zero = torch.zeros((), dtype=self.dtype)
    gan, at = zero, zero
    low = network.forward_branch(BranchId.LOW, lq, variant.use_attention)
    pooled = None
    if variant.use_attention:
      pooled = losses.pool_mask(mask, network.config.attention_size)

    if not variant.two_branch:
      if variant.objective == Objective.CROSS_ENTROPY:
        dis = losses.distance_cross_entropy(low.embedding, labels, weights)
        per_term = {"cross_entropy": dis}
      else:
        dis = losses.margin_loss(low.embedding, labels, weights)
        per_term = {"margin": dis}
      if variant.use_attention:
        at = losses.attention_bce(low.attention, pooled)
        per_term["bce_low"] = at
      return EncoderLosses(dis, gan, at, per_term)

    high = network.forward_branch(BranchId.HIGH, hq, variant.use_attention)
    per_term = losses.dis_terms(high.embedding, low.embedding, labels, weights)
    dis = (
        per_term["real_high"]
        + per_term["real_low"]
        + per_term["fake_high"]
        + per_term["fake_low"]
        + weights.lambda3 * per_term["pair"]
    )
    if variant.use_attention:
      at_terms = losses.at_terms(high.attention, low.attention, pooled, weights)
      if not variant.attention_transfer:
        del at_terms["transfer"]
      at = sum(at_terms.values())
      per_term.update(at_terms)
    if variant.use_gan:
      # Pre-attention head features, as seen by the discriminator.
      _, gan = losses.gan_losses(
          network.discriminator_forward(concat_channels(high.features, low.features)),
          network.discriminator_forward(concat_channels(low.features, high.features)),
          self.config.gan_mode,
      )
      per_term["gan"] = gan
    return EncoderLosses(dis, gan, at, per_term)

  def _check_finite(self, parts: EncoderLosses):
    for term, value in [("dis", parts.dis), ("gan", parts.gan), ("at", parts.at)] + list(
        parts.per_term.items()
    ):
      if not torch.isfinite(value):
        absl_logging.error("Non-finite loss at step %d: %s = %s", self.step, term, value)
        raise NonFiniteLossError(self.step, term, float(value))

  def train_step(self, batch: Dict[str, Any]) -> losses.LossReport:
    """Discriminator updates, then one encoder/attention/tail update."""
    self.step += 1
    self.network.train()
    hq, lq, mask, labels = self._unpack(batch)

    d_loss = 0.0
    if self.config.variant.use_gan:
      for _ in range(self.config.d_updates):
        d_loss = self.discriminator_step(hq, lq)

    discriminator = self.network.discriminator
    discriminator.requires_grad_(False)
    try:
      parts = self.encoder_losses(hq, lq, mask, labels)
      self._check_finite(parts)
      report = losses.total_loss(
          parts.dis, parts.gan, parts.at, self.config.loss, d_loss, parts.per_term
      )
      self.encoder_optimizer.zero_grad()
      report.objective.backward()
      self.encoder_optimizer.step()
    finally:
      discriminator.requires_grad_(True)

    report.step = self.step
    report.objective = None
    if self.log is not None:
      self.log.append(report)
    return report

  @torch.no_grad()
  def evaluate_loss(self, loader) -> float:
    """Sample-weighted mean of the encoder objective over `loader`."""
    self.network.eval()
    total, count = 0.0, 0
    for batch in loader:
      hq, lq, mask, labels = self._unpack(batch)
      parts = self.encoder_losses(hq, lq, mask, labels)
      report = losses.total_loss(parts.dis, parts.gan, parts.at, self.config.loss)
      total += report.total * len(labels)
      count += len(labels)
    if not count:
      raise DatasetError("validation split is empty")
    return total / count

  def train(
      self, manifest: DatasetManifest, data_dir: str | pathlib.Path
  ) -> Checkpoint:
    """Runs epochs until validation loss stops improving; returns the best."""
    config = self.config
    threads = config.num_workers or 1
    balanced = balance_classes(manifest, "train")
    train_set = datasets.PairedDataset(
        balanced, data_dir, "train", config.model.input_size, threads
    )
    val_set = datasets.PairedDataset(manifest, data_dir, "val", config.model.input_size, threads)
    stopper = EarlyStopping(config.patience)
    history: List[Dict[str, float]] = []

    for epoch in tqdm.tqdm(range(1, config.max_epochs + 1), desc="Epochs"):
      loader = datasets.make_loader(
          train_set, config.batch_size, shuffle=True, seed=utils.derive_seed(config.seed, epoch)
      )
      reports = [self.train_step(batch) for batch in loader]
      val_total = self.evaluate_loss(datasets.make_loader(val_set, config.batch_size))
      history.append({
          "epoch": epoch,
          "train_total": sum(r.total for r in reports) / max(1, len(reports)),
          "val_total": val_total,
      })
      tqdm.tqdm.write(
          f"epoch {epoch}: train {history[-1]['train_total']:.4f}, val {val_total:.4f}"
      )
      if stopper.update(epoch, val_total, lambda: snapshot(self.network)):
        tqdm.tqdm.write(f"Early stop at epoch {epoch}, best epoch {stopper.best_epoch}")
        break

    if stopper.best_state is None:
      absl_logging.warning("Validation loss never finite; keeping the last epoch")
      stopper.best_state, stopper.best_epoch = snapshot(self.network), len(history)
    return Checkpoint(
        weights=stopper.best_state,
        model_config=config.model,
        train_config=config,
        epoch=stopper.best_epoch,
        history=history,
    )


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    data_dir: str | pathlib.Path,
    out_dir: Optional[str | pathlib.Path] = None,
) -> Checkpoint:
  """Trains one model; with `out_dir`, writes its checkpoint, log and history."""
  log_path = f"{out_dir}/{logging.TRAIN_LOG_FILE}" if out_dir else None
  with logging.TrainingLog(log_path) as log:
    checkpoint = Trainer(config, log=log).train(manifest, data_dir)
  if out_dir:
    logging.save_checkpoint(checkpoint, f"{out_dir}/{logging.CHECKPOINT_FILE}")
    logging.save_json(checkpoint.history, f"{out_dir}/{logging.HISTORY_FILE}")
  return checkpoint


ABLATION_ROWS: List[Tuple[int, Variant]] = [
    (1, Variant("single_ce", False, Objective.CROSS_ENTROPY, False, False, False)),
    (2, Variant("single_metric", False, Objective.METRIC, False, False, False)),
    (3, Variant("single_metric_attention", False, Objective.METRIC, True, False, False)),
    (5, Variant("two_branch_metric", True, Objective.METRIC, False, False, False)),
    (6, Variant("two_branch_metric_gan", True, Objective.METRIC, False, False, True)),
    (7, Variant("two_branch_metric_attention", True, Objective.METRIC, True, False, False)),
    (8, Variant("two_branch_metric_transfer", True, Objective.METRIC, True, True, False)),
    (9, Variant("full", True, Objective.METRIC, True, True, True)),
]


def describe(variant: Variant) -> Tuple[str, str]:
  """(network, losses) labels for one ablation row."""
  network = "2-Branch" if variant.two_branch else "Single"
  if variant.objective == Objective.CROSS_ENTROPY:
    return network, "Cross Entropy"
  parts = ["Metric Loss"]
  if variant.attention_transfer:
    parts.append("Att.Tran.")
  elif variant.use_attention:
    parts.append("Attention")
  if variant.use_gan:
    parts.append("GAN")
  return network, "+".join(parts)


def load_matrix(path: str | pathlib.Path) -> Tuple[Optional[TrainConfig], List[Tuple[int, Variant]]]:
  """Reads `{"train": {...}, "variants": [{"row": 1, "name": ...}, ...]}`."""
  data = utils.load_json_file(path)
  base = TrainConfig.from_json(data["train"]) if data.get("train") else None
  rows = []
  for i, raw in enumerate(data.get("variants") or []):
    raw = dict(raw)
    row = int(raw.pop("row", i + 1))
    rows.append((row, Variant.from_json(raw)))
  return base, rows or list(ABLATION_ROWS)


def ablation_matrix(
    base_config: TrainConfig,
    manifest: DatasetManifest,
    data_dir: str | pathlib.Path,
    variants: Optional[Sequence[Tuple[int, Variant]]] = None,
    out_dir: Optional[str | pathlib.Path] = None,
) -> List[Tuple[int, Variant, evaluation.MetricsReport]]:
  """Trains and tests every variant on the same data, seed and test split."""
  results = []
  for row, variant in variants or ABLATION_ROWS:
    tqdm.tqdm.write(f"Ablation row {row}: {variant.name}")
    config = base_config.replace(variant=variant)
    variant_dir = f"{out_dir}/{variant.name}" if out_dir else None
    checkpoint = train(config, manifest, data_dir, variant_dir)
    samples = evaluation.score_dataset(checkpoint, manifest, data_dir, BranchId.LOW, "test")
    report = evaluation.evaluate(samples, config.loss.threshold)
    if variant_dir:
      logging.save_json(report.to_dict(), f"{variant_dir}/{logging.REPORT_FILE}")
    results.append((row, variant, report))
  return results


def ablation_table(results: Sequence[Tuple[int, Variant, evaluation.MetricsReport]]) -> pd.DataFrame:
  rows = []
  for row, variant, report in results:
    network, loss_names = describe(variant)
    rows.append({
        "No.": row,
        "Name": variant.name,
        "Network": network,
        "Losses": loss_names,
        "ACC": report.acc,
        "AUC": report.auc,
        "TAR0.1": report.tar_at_0p1,
        "TAR0.01": report.tar_at_0p01,
        "PBCA": report.pbca,
    })
  return pd.DataFrame(rows)
