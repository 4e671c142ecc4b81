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

"""Scoring and metrics: ACC, AUC, TAR@FAR, PBCA, plus plot-data exports."""

import dataclasses
import os
import pathlib
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image as PILImage
from sklearn import metrics
import torch
import tqdm

from compforensics import datasets
from compforensics.config import FAR_LEVELS, PBCA_THRESHOLD, Label, LossWeights
from compforensics.errors import DimensionError, EvaluationError
from compforensics.losses import pool_mask
from compforensics.model import BranchId, Checkpoint, TwoBranchNetwork, decision_threshold
from compforensics.synthdata import DatasetManifest


@dataclasses.dataclass
class ScoredSample:
    pair_id: str
    true_label: Label
    score: float  # |C|_2, distance from the origin
    predicted_label: Label
    embedding: np.ndarray
    attention_map: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None  # ground truth at attention resolution
    manipulation: Optional[str] = None  # fakes only


@dataclasses.dataclass
class MetricsReport:
    acc: float
    auc: float
    tar_at_0p1: float
    tar_at_0p01: float
    pbca: Optional[float]
    n_real: int
    n_fake: int
    threshold: float
    far_at_0p1: float  # FAR actually achieved for tar_at_0p1
    far_at_0p01: float
    mean_pair_distance: Optional[float] = None
    # manipulation family -> {"acc", "auc", "count"} over all reals plus its fakes
    per_manipulation: Dict[str, Dict[str, Any]] = dataclasses.field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        d = {
            "acc": self.acc,
            "auc": self.auc,
            "tarAt0p1": self.tar_at_0p1,
            "tarAt0p01": self.tar_at_0p01,
            "pbca": self.pbca,
            "counts": {
                "real": self.n_real,
                "fake": self.n_fake,
                "total": self.n_real + self.n_fake,
            },
            "threshold": self.threshold,
            "farAt0p1": self.far_at_0p1,
            "farAt0p01": self.far_at_0p01,
        }
        if self.mean_pair_distance is not None:
            d["meanPairDistance"] = self.mean_pair_distance
        if self.per_manipulation:
            d["perManipulation"] = self.per_manipulation
        return d


def _scores_and_labels(samples: Sequence[ScoredSample]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.array([s.score for s in samples], dtype=np.float64)
    labels = np.array([int(s.true_label) for s in samples], dtype=np.int64)
    return scores, labels


def _both_classes(samples: Sequence[ScoredSample]) -> Tuple[np.ndarray, np.ndarray]:
    scores, labels = _scores_and_labels(samples)
    n_fake = int(np.count_nonzero(labels == Label.FAKE))
    if not n_fake or n_fake == len(labels):
        raise EvaluationError(
            f"both classes are required, got {len(labels) - n_fake} real and {n_fake} fake"
        )
    return scores, labels


def compute_acc(samples: Sequence[ScoredSample]) -> float:
    if not samples:
        raise EvaluationError("accuracy of an empty sample set")
    return float(
        metrics.accuracy_score(
            [int(s.true_label) for s in samples], [int(s.predicted_label) for s in samples]
        )
    )


def compute_auc(samples: Sequence[ScoredSample]) -> float:
    """P(fake score > real score), ties counted one half."""
    scores, labels = _both_classes(samples)
    return float(metrics.roc_auc_score(labels, scores))


def tar_at_far(samples: Sequence[ScoredSample], far_level: float) -> Tuple[float, float]:
    """TAR at the most permissive threshold whose empirical FAR <= far_level.

    A sample is accepted as fake when its score is above the threshold. Small
    test sets only achieve FARs on a k / n_real grid, so the FAR actually
    used is returned too.

    Returns:
      (tar, far) at the chosen threshold.
    """
    if not 0 < far_level < 1:
        raise EvaluationError(f"FAR level must be in (0, 1), got {far_level}")
    scores, labels = _both_classes(samples)
    far, tar, _ = metrics.roc_curve(labels, scores, drop_intermediate=False)
    # far and tar are non-decreasing; far[0] is 0.
    index = int(np.searchsorted(far, far_level, side="right")) - 1
    return float(tar[index]), float(far[index])


def compute_tar_at_far(samples: Sequence[ScoredSample], far_level: float) -> float:
    return tar_at_far(samples, far_level)[0]


def compute_pbca(
    attention_maps: Iterable[np.ndarray],
    masks: Iterable[np.ndarray],
    threshold: float = PBCA_THRESHOLD,
) -> float:
    """Pixel-wise accuracy of (map > threshold) against the masks, all pixels pooled."""
    correct, total = 0, 0
    for attention, mask in zip(attention_maps, masks, strict=True):
        attention, mask = np.asarray(attention), np.asarray(mask)
        if attention.shape != mask.shape:
            raise DimensionError(
                f"attention map {attention.shape} and mask {mask.shape} differ"
            )
        correct += int(np.count_nonzero((attention > threshold) == (mask > 0)))
        total += mask.size
    if not total:
        raise EvaluationError("PBCA of an empty sample set")
    return correct / total


def per_manipulation(samples: Sequence[ScoredSample]) -> Dict[str, Dict[str, Any]]:
    """ACC and AUC of each fake family against every real sample.

    AUC is None when the set has no reals.
    """
    reals = [s for s in samples if s.true_label == Label.REAL]
    by_kind: Dict[str, List[ScoredSample]] = {}
    for s in samples:
        if s.true_label == Label.FAKE and s.manipulation:
            by_kind.setdefault(s.manipulation, []).append(s)
    breakdown = {}
    for kind in sorted(by_kind):
        subset = reals + by_kind[kind]
        breakdown[kind] = {
            "acc": compute_acc(subset),
            "auc": compute_auc(subset) if reals else None,
            "count": len(by_kind[kind]),
        }
    return breakdown


def evaluate(samples: Sequence[ScoredSample], threshold: float) -> MetricsReport:
    tar_high, far_high = tar_at_far(samples, FAR_LEVELS[0])
    tar_low, far_low = tar_at_far(samples, FAR_LEVELS[1])
    pbca = None
    if samples and all(s.attention_map is not None for s in samples):
        pbca = compute_pbca([s.attention_map for s in samples], [s.mask for s in samples])
    _, labels = _scores_and_labels(samples)
    return MetricsReport(
        acc=compute_acc(samples),
        auc=compute_auc(samples),
        tar_at_0p1=tar_high,
        tar_at_0p01=tar_low,
        pbca=pbca,
        n_real=int(np.count_nonzero(labels == Label.REAL)),
        n_fake=int(np.count_nonzero(labels == Label.FAKE)),
        threshold=threshold,
        far_at_0p1=far_high,
        far_at_0p01=far_low,
        per_manipulation=per_manipulation(samples),
    )


@torch.no_grad()
def score_network(
    network: TwoBranchNetwork,
    dataset: datasets.PairedDataset,
    weights: LossWeights,
    branch: BranchId = BranchId.LOW,
    use_attention: bool = True,
    batch_size: int = 64,
) -> List[ScoredSample]:
    """Scores LQ members with the LOW branch, or HQ members with HIGH."""
    branch = BranchId(branch)
    threshold = decision_threshold(weights.r_minus, weights.r_plus)
    network.eval()
    dtype = next(network.parameters()).dtype
    key = "lq" if branch == BranchId.LOW else "hq"
    samples = []
    for batch in datasets.make_loader(dataset, batch_size):
        out = network.forward_branch(branch, batch[key].to(dtype), use_attention)
        embeddings = out.embedding.double().numpy()
        scores = np.linalg.norm(embeddings, axis=1)
        maps = masks = None
        if out.attention is not None:
            maps = out.attention.double().numpy()
            masks = pool_mask(batch["mask"], network.config.attention_size).numpy()
        for i, pair_id in enumerate(batch["pair_id"]):
            samples.append(
                ScoredSample(
                    pair_id=pair_id,
                    true_label=Label(int(batch["label"][i])),
                    score=float(scores[i]),
                    predicted_label=Label.FAKE if scores[i] > threshold else Label.REAL,
                    embedding=embeddings[i],
                    attention_map=None if maps is None else maps[i],
                    mask=None if masks is None else masks[i],
                    manipulation=batch["manipulation"][i] or None,
                )
            )
    return samples


def score_dataset(
    checkpoint: Checkpoint,
    manifest: DatasetManifest,
    data_dir: str | pathlib.Path,
    branch: BranchId = BranchId.LOW,
    split: Optional[str] = "test",
    network: Optional[TwoBranchNetwork] = None,
) -> List[ScoredSample]:
    network = network or checkpoint.build_network()
    config = checkpoint.train_config
    dataset = datasets.PairedDataset(
        manifest, data_dir, split, config.model.input_size, num_threads=config.num_workers or 1
    )
    return score_network(
        network, dataset, config.loss, branch, use_attention=config.variant.use_attention
    )


def pair_embedding_distance(
    high: Sequence[ScoredSample], low: Sequence[ScoredSample]
) -> float:
    """Mean |C_h - C_l|_2 over pairs scored by both branches."""
    by_id = {s.pair_id: s.embedding for s in high}
    distances = [np.linalg.norm(by_id[s.pair_id] - s.embedding) for s in low if s.pair_id in by_id]
    if not distances:
        raise EvaluationError("no pair was scored by both branches")
    return float(np.mean(distances))


def histograms(samples: Sequence[ScoredSample], bin_width: float = 0.5) -> pd.DataFrame:
    if bin_width <= 0:
        raise EvaluationError(f"bin width must be > 0, got {bin_width}")
    scores, labels = _scores_and_labels(samples)
    top = scores.max() if len(scores) else 0.0
    edges = bin_width * np.arange(int(np.floor(top / bin_width)) + 2)
    real, _ = np.histogram(scores[labels == Label.REAL], bins=edges)
    fake, _ = np.histogram(scores[labels == Label.FAKE], bins=edges)
    return pd.DataFrame(
        {"bin_start": edges[:-1], "bin_end": edges[1:], "real": real, "fake": fake}
    )


def export_histograms(
    samples: Sequence[ScoredSample], path: str | pathlib.Path, bin_width: float = 0.5
) -> pd.DataFrame:
    df = histograms(samples, bin_width)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=False)
    return df


def read_histograms(path: str | pathlib.Path) -> pd.DataFrame:
    return pd.read_csv(path)


def export_embeddings(samples: Sequence[ScoredSample], path: str | pathlib.Path) -> pd.DataFrame:
    rows = []
    for s in samples:
        row = {"pair_id": s.pair_id, "label": s.true_label.name.lower()}
        row.update({f"e{i}": float(v) for i, v in enumerate(s.embedding)})
        rows.append(row)
    df = pd.DataFrame(rows)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=False)
    return df


def export_attention_maps(
    samples: Sequence[ScoredSample],
    out_dir: str | pathlib.Path,
    ids: Optional[Sequence[str]] = None,
    image_size: Optional[int] = None,
) -> List[str]:
    """Writes attention maps as grayscale PNGs named `<pair_id>.png`."""
    wanted = set(ids) if ids else None
    written = []
    os.makedirs(out_dir, exist_ok=True)
    for s in tqdm.tqdm(samples, desc="Attention maps", leave=False):
        if wanted is not None and s.pair_id not in wanted:
            continue
        if s.attention_map is None:
            raise EvaluationError("this model was trained without attention layers")
        img = PILImage.fromarray(np.round(s.attention_map * 255).astype(np.uint8))
        if image_size:
            img = img.resize((image_size, image_size), PILImage.Resampling.NEAREST)
        path = f"{out_dir}/{s.pair_id}.png"
        img.save(path, format="PNG")
        written.append(path)
    if wanted is not None and len(written) != len(wanted):
        missing = sorted(wanted - {os.path.basename(p)[:-4] for p in written})
        raise EvaluationError(f"ids not found in the scored split: {missing}")
    return written
