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

"""Command-line surface: gen-data, train, ablate, eval and the exporters."""

import dataclasses
import json
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Tuple

from absl import flags
from absl import logging as absl_logging

from compforensics import evaluation
from compforensics import logging
from compforensics import reports
from compforensics import synthdata
from compforensics import training
from compforensics.config import DataConfig, Label, Manipulation, TrainConfig
from compforensics.config import load_data_config, load_train_config
from compforensics.errors import ConfigError
from compforensics.model import BranchId

_COUNT = flags.DEFINE_integer("count", None, "Number of pairs to generate.")
_SIZE = flags.DEFINE_integer("size", None, "Image side length in pixels.")
_HQ_QUALITY = flags.DEFINE_integer("hq_quality", None, "High-quality compression level.")
_LQ_QUALITY = flags.DEFINE_integer("lq_quality", None, "Low-quality compression level.")
_FAKE_FRACTION = flags.DEFINE_float("fake_fraction", None, "Fraction of fake pairs.")
_CANVAS_SIZE = flags.DEFINE_integer(
    "canvas_size", None, "Generate on a larger canvas and face-crop down to --size."
)
_ALT_HQ_QUALITY = flags.DEFINE_integer(
    "alt_hq_quality", None, "Alternate HQ level for mixed-pair datasets."
)
_MANIPULATIONS = flags.DEFINE_list(
    "manipulations", None, "Fake families, used in turn: splice, resample, color."
)
_SEED = flags.DEFINE_integer("seed", None, "Overrides the config seed.")
_OUT = flags.DEFINE_string("out", None, "Output directory; defaults to a session directory.")
_CONFIG = flags.DEFINE_string("config", None, "JSON config file.")
_DATA = flags.DEFINE_string("data", None, "Dataset directory holding manifest.json.")
_CHECKPOINT = flags.DEFINE_string("checkpoint", None, "Checkpoint file.")
_BRANCH = flags.DEFINE_enum("branch", "low", ["low", "high"], "Branch used for scoring.")
_SPLIT = flags.DEFINE_string("split", "test", "Split to score, or 'all'.")
_REPORT = flags.DEFINE_string("report", None, "Path of the metrics report JSON.")
_IDS = flags.DEFINE_list("ids", [], "Pair ids for attn-maps; all scored pairs if empty.")
_MATRIX = flags.DEFINE_string("matrix", None, "Ablation matrix JSON file.")
_BIN_WIDTH = flags.DEFINE_float("bin_width", 0.5, "Histogram bin width.")
_THREADS = flags.DEFINE_integer("threads", None, "Number of I/O threads.")
_PAIRED = flags.DEFINE_boolean(
    "paired", False, "Also score HIGH on HQ and report the mean pair distance."
)

USAGE = """usage: main.py COMMAND [flags]

commands:
  gen-data            --count N [--size --hq_quality --lq_quality --fake_fraction --manipulations --seed] --out DIR
  train               --data DIR [--config FILE] --out DIR
  ablate              --data DIR [--matrix FILE] [--config FILE] --out DIR
  eval                --checkpoint FILE --data DIR [--branch low|high] [--report FILE] [--paired]
  attn-maps           --checkpoint FILE --data DIR [--ids a,b] --out DIR
  export-embeddings   --checkpoint FILE --data DIR --out DIR
  export-histograms   --checkpoint FILE --data DIR [--bin_width W] --out DIR
"""


class UsageError(ValueError):
  pass


@dataclasses.dataclass
class RunConfig:
  command: str
  config_path: Optional[str]
  seed: Optional[int]
  out_dir: str
  verbosity: int


def _required(holder: flags.FlagHolder) -> Any:
  if holder.value is None:
    raise UsageError(f"--{holder.name} is required")
  return holder.value


def _run_config(command: str, out_dir: Optional[str] = None) -> RunConfig:
  out_dir = out_dir or _OUT.value or logging.log_directory()
  os.makedirs(out_dir, exist_ok=True)
  return RunConfig(
      command=command,
      config_path=_CONFIG.value,
      seed=_SEED.value,
      out_dir=out_dir,
      verbosity=absl_logging.get_verbosity(),
  )


def _split() -> Optional[str]:
  return None if _SPLIT.value == "all" else _SPLIT.value


def data_config() -> DataConfig:
  config = load_data_config(_CONFIG.value) if _CONFIG.value else DataConfig()
  overrides = {
      "count": _COUNT.value,
      "size": _SIZE.value,
      "hq_quality": _HQ_QUALITY.value,
      "lq_quality": _LQ_QUALITY.value,
      "fake_fraction": _FAKE_FRACTION.value,
      "canvas_size": _CANVAS_SIZE.value,
      "alt_hq_quality": _ALT_HQ_QUALITY.value,
      "seed": _SEED.value,
      "num_threads": _THREADS.value,
  }
  overrides = {k: v for k, v in overrides.items() if v is not None}
  if _MANIPULATIONS.value is not None:
    try:
      overrides["manipulations"] = [Manipulation(m) for m in _MANIPULATIONS.value]
    except ValueError as e:
      raise ConfigError("data.manipulations", str(e)) from e
  return dataclasses.replace(config, **overrides).validate()


def train_config() -> TrainConfig:
  config = load_train_config(_CONFIG.value) if _CONFIG.value else TrainConfig()
  if _SEED.value is not None:
    config = config.replace(seed=_SEED.value)
  if _THREADS.value is not None:
    config = config.replace(num_workers=_THREADS.value)
  return config


def gen_data(argv: List[str]) -> int:
  config = data_config()
  run = _run_config("gen-data")
  manifest = synthdata.make_paired_dataset(config, run.out_dir)
  path = logging.save_manifest(manifest, run.out_dir)
  logging.write_run_record(run.out_dir, run.command, argv, config, config.seed)
  counts = manifest.label_counts()
  print(
      f"Wrote {len(manifest.entries)} pairs ({counts[Label.REAL]} real,"
      f" {counts[Label.FAKE]} fake) to {path}"
  )
  return 0


def train(argv: List[str]) -> int:
  data_dir = _required(_DATA)
  config = train_config()
  run = _run_config("train")
  manifest = logging.load_manifest(data_dir)
  checkpoint = training.train(config, manifest, data_dir, run.out_dir)
  logging.write_run_record(run.out_dir, run.command, argv, config, config.seed)
  print(
      f"Best epoch {checkpoint.epoch}; checkpoint saved to"
      f" {run.out_dir}/{logging.CHECKPOINT_FILE}"
  )
  return 0


def ablate(argv: List[str]) -> int:
  data_dir = _required(_DATA)
  base, rows = (None, list(training.ABLATION_ROWS))
  if _MATRIX.value:
    base, rows = training.load_matrix(_MATRIX.value)
  base = base or train_config()
  if _SEED.value is not None:
    base = base.replace(seed=_SEED.value)
  run = _run_config("ablate")
  manifest = logging.load_manifest(data_dir)
  results = training.ablation_matrix(base, manifest, data_dir, rows, run.out_dir)
  table = training.ablation_table(results)
  table.to_csv(f"{run.out_dir}/ablation.csv", index=False)
  markdown = reports.render(reports.ABLATION_TABLE, {"rows": table.to_dict("records")})
  with open(f"{run.out_dir}/ablation.md", "w") as file:
    file.write(markdown)
  logging.write_run_record(
      run.out_dir, run.command, argv, {"train": base, "variants": [v for _, v in rows]}, base.seed
  )
  print(markdown)
  return 0


def _scored(branch: BranchId) -> Tuple[Any, Any, Any, List[evaluation.ScoredSample]]:
  checkpoint = logging.load_checkpoint(_required(_CHECKPOINT))
  data_dir = _required(_DATA)
  manifest = logging.load_manifest(data_dir)
  network = checkpoint.build_network()
  samples = evaluation.score_dataset(
      checkpoint, manifest, data_dir, branch, _split(), network=network
  )
  return checkpoint, manifest, network, samples


def eval_command(argv: List[str]) -> int:
  branch = BranchId(_BRANCH.value)
  report_path = _REPORT.value
  out_dir = None
  if report_path and not _OUT.value:
    out_dir = os.path.dirname(os.path.abspath(report_path))
  elif report_path:
    root = os.path.abspath(_OUT.value)
    if os.path.commonpath([root, os.path.abspath(report_path)]) != root:
      raise UsageError(f"--report {report_path} is outside --out {_OUT.value}")
  run = _run_config("eval", out_dir)
  report_path = report_path or f"{run.out_dir}/{logging.REPORT_FILE}"
  checkpoint, manifest, network, samples = _scored(branch)
  report = evaluation.evaluate(samples, checkpoint.train_config.loss.threshold)
  if _PAIRED.value:
    other = BranchId.HIGH if branch == BranchId.LOW else BranchId.LOW
    paired = evaluation.score_dataset(
        checkpoint, manifest, _DATA.value, other, _split(), network=network
    )
    high, low = (paired, samples) if other == BranchId.HIGH else (samples, paired)
    report.mean_pair_distance = evaluation.pair_embedding_distance(high, low)
  logging.save_json(report.to_dict(), report_path)
  logging.write_run_record(
      run.out_dir, run.command, argv, checkpoint.train_config, checkpoint.train_config.seed
  )
  print(reports.render(reports.METRICS_SUMMARY, report.to_dict()))
  return 0


def attn_maps(argv: List[str]) -> int:
  run = _run_config("attn-maps")
  checkpoint, _, _, samples = _scored(BranchId(_BRANCH.value))
  written = evaluation.export_attention_maps(
      samples, run.out_dir, _IDS.value, image_size=checkpoint.model_config.input_size
  )
  logging.write_run_record(run.out_dir, run.command, argv, checkpoint.train_config, None)
  print(f"Wrote {len(written)} attention maps to {run.out_dir}")
  return 0


def export_embeddings(argv: List[str]) -> int:
  run = _run_config("export-embeddings")
  checkpoint, _, _, samples = _scored(BranchId(_BRANCH.value))
  path = f"{run.out_dir}/embeddings.csv"
  evaluation.export_embeddings(samples, path)
  logging.write_run_record(run.out_dir, run.command, argv, checkpoint.train_config, None)
  print(f"Embeddings saved to: {path}")
  return 0


def export_histograms(argv: List[str]) -> int:
  run = _run_config("export-histograms")
  checkpoint, _, _, samples = _scored(BranchId(_BRANCH.value))
  path = f"{run.out_dir}/histograms.csv"
  evaluation.export_histograms(samples, path, _BIN_WIDTH.value)
  logging.write_run_record(
      run.out_dir, run.command, argv, {"bin_width": _BIN_WIDTH.value}, None
  )
  print(f"Histograms saved to: {path}")
  return 0


COMMANDS: Dict[str, Callable[[List[str]], int]] = {
    "gen-data": gen_data,
    "train": train,
    "ablate": ablate,
    "eval": eval_command,
    "attn-maps": attn_maps,
    "export-embeddings": export_embeddings,
    "export-histograms": export_histograms,
}


def parse_flags(argv: List[str]) -> List[str]:
  """Flags parser for `app.run` that leaves parsing to `dispatch`."""
  flags.FLAGS.mark_as_parsed()
  return list(argv)


def _fail(error: Exception) -> None:
  print(json.dumps({"error": type(error).__name__, "message": str(error)}), file=sys.stderr)


def dispatch(argv: List[str]) -> int:
  """Runs the command named by argv[1]; returns the process exit code.

  0 on success, 2 for usage errors, 1 for config, data and runtime errors.
  """
  try:
    positional = flags.FLAGS(list(argv))
  except flags.Error as e:
    _fail(e)
    print(USAGE, file=sys.stderr)
    return 2
  if len(positional) != 2 or positional[1] not in COMMANDS:
    print(USAGE, file=sys.stderr)
    return 2

  command = positional[1]
  try:
    return COMMANDS[command](list(argv))
  except UsageError as e:
    _fail(e)
    print(USAGE, file=sys.stderr)
    return 2
  except ConfigError as e:
    absl_logging.error("Invalid config: %s", e)
    _fail(e)
    return 1
  except (ValueError, RuntimeError, OSError) as e:
    absl_logging.error("%s failed: %s", command, e)
    _fail(e)
    return 1
