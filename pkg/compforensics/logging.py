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

import datetime
import json
import os
import pathlib
import platform
import sys
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from compforensics import utils
from compforensics.config import OUTPUT_ROOT_ENV, ModelConfig, TrainConfig
from compforensics.errors import CheckpointError, DatasetError
from compforensics.losses import LossReport
from compforensics.model import COLLECTIONS, Checkpoint
from compforensics.synthdata import DatasetManifest

MANIFEST_FILE = "manifest.json"
CHECKPOINT_FILE = "checkpoint.pt"
TRAIN_LOG_FILE = "train_log.jsonl"
HISTORY_FILE = "history.json"
RUN_FILE = "run.json"
REPORT_FILE = "report.json"


def output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, f"{os.getcwd()}/runs")


def log_directory() -> str:
    pacific_timezone = datetime.timezone(datetime.timedelta(hours=-8))
    timestamp = datetime.datetime.now(pacific_timezone).strftime("%Y%m%d_%H%M%S")
    session_id = f"session_{timestamp}"
    directory = f"{output_root()}/{session_id}"
    return directory


def save_json(data: Any, path: str | pathlib.Path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as file:
        json.dump(utils.to_dict(data), file, indent=4, sort_keys=True)


def load_json(path: str | pathlib.Path) -> Any:
    with open(path, "r") as file:
        return json.load(file)


def save_manifest(manifest: DatasetManifest, directory: str | pathlib.Path) -> str:
    path = f"{directory}/{MANIFEST_FILE}"
    save_json(manifest.to_dict(), path)
    return path


def load_manifest(directory: str | pathlib.Path) -> DatasetManifest:
    """Loads `manifest.json` from a dataset directory.

    Args:
      directory: where `gen-data` wrote the dataset.

    Returns:
      The validated DatasetManifest.
    """
    path = f"{directory}/{MANIFEST_FILE}"
    if not os.path.exists(path):
        raise DatasetError(f"no {MANIFEST_FILE} in {directory}")
    return DatasetManifest.from_json(load_json(path))


def save_checkpoint(checkpoint: Checkpoint, path: str | pathlib.Path):
    """Writes weights, configs and loss constants into one torch archive."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(
        {
            "weights": checkpoint.weights,
            "model_config": utils.to_dict(checkpoint.model_config),
            "train_config": utils.to_dict(checkpoint.train_config),
            "constants": checkpoint.constants,
            "epoch": checkpoint.epoch,
            "history": checkpoint.history,
        },
        path,
    )


def load_checkpoint(path: str | pathlib.Path) -> Checkpoint:
    """Loads a checkpoint and verifies the six collections and shapes.

    Raises:
      CheckpointError: the archive is missing fields, has the wrong
        collections or does not fit its own architecture config.
    """
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    data = torch.load(path, map_location="cpu", weights_only=True)
    for key in ("weights", "model_config", "train_config", "epoch"):
        if key not in data:
            raise CheckpointError(f"checkpoint {path} has no '{key}'")
    names = list(data["weights"])
    if sorted(names) != sorted(COLLECTIONS):
        raise CheckpointError(
            f"checkpoint {path} holds collections {names}, expected {list(COLLECTIONS)}"
        )
    tails = [n for n in names if n.startswith("tail")]
    if tails != ["tail"]:
        raise CheckpointError(f"the shared tail must appear exactly once, found {tails}")
    checkpoint = Checkpoint(
        weights=data["weights"],
        model_config=ModelConfig.from_json(data["model_config"]),
        train_config=TrainConfig.from_json(data["train_config"]),
        epoch=int(data["epoch"]),
        history=list(data.get("history", [])),
    )
    checkpoint.build_network()
    return checkpoint


class TrainingLog:
    """JSON-lines log, one LossReport per step and no timestamps."""

    def __init__(self, path: Optional[str | pathlib.Path]):
        self.path = path
        self._file = None
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self._file = open(path, "w")

    def append(self, report: LossReport):
        if self._file is None:
            return
        self._file.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
        self._file.flush()

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_training_log(path: str | pathlib.Path) -> List[Dict[str, Any]]:
    with open(path, "r") as file:
        return [json.loads(line) for line in file if line.strip()]


def versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
    }


def write_run_record(
    directory: str | pathlib.Path,
    command: str,
    argv: List[str],
    config: Any,
    seed: Optional[int],
) -> str:
    """Writes `run.json`: enough to replay the command.

    `created` is the only field that changes between identical runs.
    """
    path = f"{directory}/{RUN_FILE}"
    record = {
        "command": command,
        "argv": list(argv),
        "config": utils.to_dict(config),
        "config_hash": utils.config_hash(config),
        "seed": seed,
        "versions": versions(),
        "executable": sys.executable,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    save_json(record, path)
    return path
