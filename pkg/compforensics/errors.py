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

"""Errors raised across the package."""


class DimensionError(ValueError):
  """An array or tensor has the wrong shape or size."""


class ParameterError(ValueError):
  """A scalar parameter is outside its allowed range."""


class ConfigError(ValueError):
  """A configuration field is invalid.

  The message starts with the dotted field path, e.g.
  `train.batch_size: must be even, got 33`.
  """

  def __init__(self, field: str, problem: str):
    super().__init__(f"{field}: {problem}")
    self.field = field
    self.problem = problem


class DatasetError(ValueError):
  """A dataset manifest cannot be used as requested."""


class DegenerateSpliceError(ValueError):
  """A fake sample was requested with identical base and donor seeds."""


class EvaluationError(ValueError):
  """A metric is undefined for the given samples."""


class CheckpointError(ValueError):
  """A checkpoint is malformed or incompatible with the architecture."""


class NonFiniteLossError(RuntimeError):
  """A loss term became NaN or infinite during training."""

  def __init__(self, step: int, term: str, value: float):
    super().__init__(f"step {step}: loss term '{term}' is not finite ({value})")
    self.step = step
    self.term = term
    self.value = value
