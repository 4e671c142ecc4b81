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

import dataclasses
import enum
from typing import Any, List, Optional

from compforensics import utils
from compforensics.errors import ConfigError
from compforensics.utils import Deserializable

BLOCK_SIZE = 8
HQ_QUALITY = 90
LQ_QUALITY = 30
MASK_THRESHOLD = 0.1  # grayscale mask / 255 > 0.1 is manipulated
PBCA_THRESHOLD = 0.5
CROP_FACTOR = 1.3

R_MINUS = 0.1
R_PLUS = 18.0
LAMBDA1 = 0.001  # GAN
LAMBDA2 = 1.0  # attention
LAMBDA3 = 0.1  # pair distance inside the metric loss

LEARNING_RATE = 1e-4
BATCH_SIZE = 32
ADAM_BETAS = (0.9, 0.999)

EPS = 1e-7
GP_WEIGHT = 10.0

FAR_LEVELS = (0.001, 0.0001)  # TAR is reported at FAR 0.1% and 0.01%
OUTPUT_ROOT_ENV = "COMPFORENSICS_OUTPUT_ROOT"


class Label(enum.IntEnum):
    REAL = 0
    FAKE = 1

    @classmethod
    def parse(cls, value) -> "Label":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


class GanMode(str, enum.Enum):
    LOG = "log"
    WGAN_GP = "wgan_gp"


class Objective(str, enum.Enum):
    METRIC = "metric"
    CROSS_ENTROPY = "cross_entropy"


class Manipulation(str, enum.Enum):
    """Synthetic manipulation family applied inside a fake sample's region."""

    SPLICE = "splice"
    RESAMPLE = "resample"
    COLOR = "color"


def _check(condition: bool, field: str, problem: str):
    if not condition:
        raise ConfigError(field, problem)


@dataclasses.dataclass
class DataConfig(Deserializable):
    """Synthetic paired-compression dataset parameters."""

    count: int = 100
    size: int = 64
    hq_quality: int = HQ_QUALITY
    lq_quality: int = LQ_QUALITY
    fake_fraction: float = 0.5
    seed: int = 0
    train_fraction: float = 0.7
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    # Mixed-pair manifests: this fraction of samples uses alt_hq_quality.
    alt_hq_quality: Optional[int] = None
    mixed_fraction: float = 0.5
    # Face-crop emulation: generate on a larger canvas and crop back to size.
    canvas_size: Optional[int] = None
    crop_factor: float = CROP_FACTOR
    num_threads: int = 4
    # Fakes cycle through these families in pair-index order.
    manipulations: List[Manipulation] = dataclasses.field(
        default_factory=lambda: list(Manipulation)
    )

    def validate(self, prefix: str = "data") -> "DataConfig":
        _check(self.count >= 1, f"{prefix}.count", f"must be >= 1, got {self.count}")
        _check(
            self.size >= 32 and self.size % BLOCK_SIZE == 0,
            f"{prefix}.size",
            f"must be a multiple of {BLOCK_SIZE} and >= 32, got {self.size}",
        )
        for name in ("hq_quality", "lq_quality"):
            q = getattr(self, name)
            _check(1 <= q <= 100, f"{prefix}.{name}", f"must be in [1, 100], got {q}")
        _check(
            self.hq_quality > self.lq_quality,
            f"{prefix}.hq_quality",
            f"must be greater than lq_quality ({self.lq_quality}), got"
            f" {self.hq_quality}",
        )
        if self.alt_hq_quality is not None:
            _check(
                self.lq_quality < self.alt_hq_quality <= 100,
                f"{prefix}.alt_hq_quality",
                f"must be in ({self.lq_quality}, 100], got {self.alt_hq_quality}",
            )
            _check(
                0.0 <= self.mixed_fraction <= 1.0,
                f"{prefix}.mixed_fraction",
                f"must be in [0, 1], got {self.mixed_fraction}",
            )
        _check(
            0.0 <= self.fake_fraction <= 1.0,
            f"{prefix}.fake_fraction",
            f"must be in [0, 1], got {self.fake_fraction}",
        )
        fractions = (self.train_fraction, self.val_fraction, self.test_fraction)
        _check(
            all(f >= 0 for f in fractions) and abs(sum(fractions) - 1.0) < 1e-6,
            f"{prefix}.train_fraction",
            f"split fractions must be >= 0 and sum to 1, got {fractions}",
        )
        if self.canvas_size is not None:
            _check(
                self.canvas_size >= self.size and self.canvas_size % BLOCK_SIZE == 0,
                f"{prefix}.canvas_size",
                f"must be a multiple of {BLOCK_SIZE} and >= size, got"
                f" {self.canvas_size}",
            )
        _check(
            self.crop_factor >= 1.0,
            f"{prefix}.crop_factor",
            f"must be >= 1, got {self.crop_factor}",
        )
        _check(self.num_threads >= 1, f"{prefix}.num_threads", "must be >= 1")
        _check(
            len(self.manipulations) >= 1
            and len(set(self.manipulations)) == len(self.manipulations),
            f"{prefix}.manipulations",
            "must be non-empty without repeats, got"
            f" {[m.value for m in self.manipulations]}",
        )
        return self

    @classmethod
    def from_json(cls, data: dict[Any, Any]):
        return utils.from_dict(cls, data, prefix="data").validate()


@dataclasses.dataclass
class ModelConfig(Deserializable):
    """Desk-scale backbone: K head stages, L tail stages, d-dim embedding.

    A full-scale Xception backbone has d = 2048; the desk default is 128.
    """

    input_size: int = 64
    base_channels: int = 16
    head_stages: int = 3
    tail_stages: int = 2
    embedding_dim: int = 128
    norm_groups: int = 4

    @property
    def feature_channels(self) -> int:
        return self.base_channels * 2 ** (self.head_stages - 1)

    @property
    def attention_size(self) -> int:
        return self.input_size // 2**self.head_stages

    def validate(self, prefix: str = "model") -> "ModelConfig":
        _check(self.head_stages >= 1, f"{prefix}.head_stages", "must be >= 1")
        _check(self.tail_stages >= 1, f"{prefix}.tail_stages", "must be >= 1")
        stride = 2 ** (self.head_stages + self.tail_stages)
        _check(
            self.input_size % stride == 0,
            f"{prefix}.input_size",
            f"must be divisible by 2**(head_stages + tail_stages) = {stride}, got"
            f" {self.input_size}",
        )
        _check(
            self.norm_groups >= 1 and self.base_channels % self.norm_groups == 0,
            f"{prefix}.norm_groups",
            f"must divide base_channels ({self.base_channels}), got"
            f" {self.norm_groups}",
        )
        _check(self.embedding_dim >= 1, f"{prefix}.embedding_dim", "must be >= 1")
        return self

    @classmethod
    def from_json(cls, data: dict[Any, Any]):
        return utils.from_dict(cls, data, prefix="model").validate()


@dataclasses.dataclass
class LossWeights(Deserializable):
    lambda1: float = LAMBDA1
    lambda2: float = LAMBDA2
    lambda3: float = LAMBDA3
    r_minus: float = R_MINUS
    r_plus: float = R_PLUS
    gp_weight: float = GP_WEIGHT
    # Lets the attention transfer gradient reach the high-quality branch too.
    bidirectional_transfer: bool = False

    @property
    def threshold(self) -> float:
        return (self.r_minus + self.r_plus) / 2

    def validate(self, prefix: str = "loss") -> "LossWeights":
        for name in ("lambda1", "lambda2", "lambda3", "r_minus", "r_plus", "gp_weight"):
            value = getattr(self, name)
            _check(value >= 0, f"{prefix}.{name}", f"must be >= 0, got {value}")
        _check(
            self.r_minus < self.r_plus,
            f"{prefix}.r_minus",
            f"must be less than r_plus ({self.r_plus}), got {self.r_minus}",
        )
        return self

    @classmethod
    def from_json(cls, data: dict[Any, Any]):
        return utils.from_dict(cls, data, prefix="loss").validate()


@dataclasses.dataclass
class Variant(Deserializable):
    """Which losses and modules a training run uses (one ablation row)."""

    name: str = "full"
    two_branch: bool = True
    objective: Objective = Objective.METRIC
    use_attention: bool = True
    attention_transfer: bool = True
    use_gan: bool = True

    def validate(self, prefix: str = "variant") -> "Variant":
        if self.attention_transfer:
            _check(
                self.use_attention and self.two_branch,
                f"{prefix}.attention_transfer",
                "requires use_attention and two_branch",
            )
        if self.use_gan:
            _check(self.two_branch, f"{prefix}.use_gan", "requires two_branch")
        if self.objective == Objective.CROSS_ENTROPY:
            _check(
                not self.two_branch,
                f"{prefix}.objective",
                "cross_entropy is only defined for single-branch variants",
            )
        return self

    @classmethod
    def from_json(cls, data: dict[Any, Any]):
        return utils.from_dict(cls, data, prefix="variant").validate()


@dataclasses.dataclass
class TrainConfig(Deserializable):
    learning_rate: float = LEARNING_RATE
    batch_size: int = BATCH_SIZE
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    gan_mode: GanMode = GanMode.LOG
    # None picks 1 for LOG and 5 for WGAN_GP.
    d_updates_per_step: Optional[int] = None
    patience: int = 2
    max_epochs: int = 10
    seed: int = 0
    num_workers: int = 0
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    loss: LossWeights = dataclasses.field(default_factory=LossWeights)
    variant: Variant = dataclasses.field(default_factory=Variant)

    @property
    def d_updates(self) -> int:
        if self.d_updates_per_step is not None:
            return self.d_updates_per_step
        return 5 if self.gan_mode == GanMode.WGAN_GP else 1

    def validate(self, prefix: str = "train") -> "TrainConfig":
        _check(
            self.learning_rate > 0,
            f"{prefix}.learning_rate",
            f"must be > 0, got {self.learning_rate}",
        )
        _check(
            self.batch_size >= 2 and self.batch_size % 2 == 0,
            f"{prefix}.batch_size",
            f"must be even, got {self.batch_size}",
        )
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            _check(0.0 <= value < 1.0, f"{prefix}.{name}", f"must be in [0, 1), got {value}")
        if self.d_updates_per_step is not None:
            _check(
                self.d_updates_per_step >= 0,
                f"{prefix}.d_updates_per_step",
                f"must be >= 0, got {self.d_updates_per_step}",
            )
        _check(self.patience >= 1, f"{prefix}.patience", f"must be >= 1, got {self.patience}")
        _check(self.max_epochs >= 1, f"{prefix}.max_epochs", f"must be >= 1, got {self.max_epochs}")
        _check(self.num_workers >= 0, f"{prefix}.num_workers", "must be >= 0")
        self.model.validate(f"{prefix}.model")
        self.loss.validate(f"{prefix}.loss")
        self.variant.validate(f"{prefix}.variant")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()

    @classmethod
    def from_json(cls, data: dict[Any, Any]):
        return utils.from_dict(cls, data, prefix="train").validate()


def load_train_config(path) -> TrainConfig:
    return TrainConfig.from_json(utils.load_json_file(path))


def load_data_config(path) -> DataConfig:
    return DataConfig.from_json(utils.load_json_file(path))
