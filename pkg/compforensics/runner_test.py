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

import contextlib
import io
import json
import os

from absl import app as absl_app
from absl.testing import absltest
from absl.testing import flagsaver
import pandas as pd

from compforensics import logging
from compforensics import runner
from compforensics import test_util
from compforensics import utils


def _run(*args):
  """Dispatches one command line; returns (exit code, stdout, stderr)."""
  stdout, stderr = io.StringIO(), io.StringIO()
  with flagsaver.flagsaver(), contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(
      stderr
  ):
    code = runner.dispatch(["main.py", *args])
  return code, stdout.getvalue(), stderr.getvalue()


def _errors(stderr):
  return [json.loads(line) for line in stderr.splitlines() if line.startswith("{")]


class DispatchTest(absltest.TestCase):

  def test_gen_data(self):
    out = self.create_tempdir().full_path
    code, stdout, _ = _run("gen-data", "--count", "10", "--size", "32", "--out", out)
    self.assertEqual(code, 0)
    self.assertIn("10 pairs", stdout)
    self.assertLen(logging.load_manifest(out).entries, 10)
    record = logging.load_json(f"{out}/{logging.RUN_FILE}")
    self.assertEqual(record["command"], "gen-data")
    self.assertEqual(record["config"]["count"], 10)

  def test_gen_data_manipulations(self):
    out = self.create_tempdir().full_path
    code, _, _ = _run(
        "gen-data", "--count", "8", "--size", "32", "--manipulations", "resample,color",
        "--out", out,
    )
    self.assertEqual(code, 0)
    kinds = [e.manipulation.value for e in logging.load_manifest(out).entries if e.manipulation]
    self.assertCountEqual(kinds, ["color", "resample"] * 2)
    record = logging.load_json(f"{out}/{logging.RUN_FILE}")
    self.assertEqual(record["config"]["manipulations"], ["resample", "color"])

  def test_unknown_manipulation_flag(self):
    code, _, stderr = _run(
        "gen-data", "--count", "4", "--manipulations", "warp",
        "--out", self.create_tempdir().full_path,
    )
    self.assertEqual(code, 1)
    self.assertStartsWith(_errors(stderr)[0]["message"], "data.manipulations")

  def test_gen_data_is_reproducible(self):
    manifests = []
    for _ in range(2):
      out = self.create_tempdir().full_path
      code, _, _ = _run("gen-data", "--count", "6", "--size", "32", "--seed", "3", "--out", out)
      self.assertEqual(code, 0)
      with open(f"{out}/{logging.MANIFEST_FILE}", "rb") as file:
        manifests.append(file.read())
    self.assertEqual(manifests[0], manifests[1])

  def test_unknown_command(self):
    code, _, stderr = _run("fly")
    self.assertEqual(code, 2)
    self.assertIn("usage:", stderr)

  def test_missing_command(self):
    self.assertEqual(_run()[0], 2)

  def test_unknown_flag(self):
    self.assertEqual(_run("gen-data", "--colour", "red")[0], 2)

  def test_unknown_flag_through_app_run(self):
    stderr = io.StringIO()
    with flagsaver.flagsaver(), contextlib.redirect_stderr(stderr):
      with self.assertRaises(SystemExit) as exit_:
        absl_app.run(
            runner.dispatch,
            argv=["main.py", "gen-data", "--colour", "red"],
            flags_parser=runner.parse_flags,
        )
    self.assertEqual(exit_.exception.code, 2)
    self.assertIn("usage:", stderr.getvalue())

  def test_report_outside_out_dir(self):
    out = self.create_tempdir("out").full_path
    elsewhere = self.create_tempdir("elsewhere").full_path
    code, _, stderr = _run(
        "eval", "--checkpoint", f"{out}/checkpoint.pt", "--data", out,
        "--report", f"{elsewhere}/report.json", "--out", out,
    )
    self.assertEqual(code, 2)
    self.assertIn("outside --out", _errors(stderr)[0]["message"])
    self.assertFalse(os.path.exists(f"{elsewhere}/report.json"))

  def test_missing_required_flag(self):
    code, _, stderr = _run("train")
    self.assertEqual(code, 2)
    self.assertEqual(_errors(stderr)[0]["message"], "--data is required")

  def test_invalid_config(self):
    config = self.create_tempfile("bad.json", content='{"batch_size": 33}')
    data = self.create_tempdir().full_path
    code, _, stderr = _run(
        "train", "--data", data, "--config", config.full_path,
        "--out", self.create_tempdir().full_path,
    )
    self.assertEqual(code, 1)
    error = _errors(stderr)[0]
    self.assertEqual(error["error"], "ConfigError")
    self.assertStartsWith(error["message"], "train.batch_size")

  def test_invalid_data_flags(self):
    code, _, stderr = _run(
        "gen-data", "--count", "4", "--hq_quality", "20", "--lq_quality", "30",
        "--out", self.create_tempdir().full_path,
    )
    self.assertEqual(code, 1)
    self.assertStartsWith(_errors(stderr)[0]["message"], "data.hq_quality")

  def test_missing_manifest(self):
    code, _, stderr = _run(
        "train", "--data", self.create_tempdir().full_path,
        "--out", self.create_tempdir().full_path,
    )
    self.assertEqual(code, 1)
    self.assertEqual(_errors(stderr)[0]["error"], "DatasetError")


class PipelineTest(absltest.TestCase):

  def test_generate_train_evaluate_export(self):
    data = self.create_tempdir("data").full_path
    run = self.create_tempdir("run").full_path
    config = self.create_tempfile(
        "train.json", content=utils.dumps(test_util.tiny_train_config(max_epochs=1))
    )

    code, _, stderr = _run("gen-data", "--count", "40", "--size", "32", "--out", data)
    self.assertEqual(code, 0, msg=stderr)
    ids = [e.pair_id for e in logging.load_manifest(data).entries]

    code, _, stderr = _run(
        "train", "--data", data, "--config", config.full_path, "--out", run
    )
    self.assertEqual(code, 0, msg=stderr)
    checkpoint = f"{run}/{logging.CHECKPOINT_FILE}"
    self.assertTrue(os.path.exists(checkpoint))
    self.assertNotEmpty(logging.read_training_log(f"{run}/{logging.TRAIN_LOG_FILE}"))

    report_path = f"{run}/eval/{logging.REPORT_FILE}"
    code, stdout, stderr = _run(
        "eval", "--checkpoint", checkpoint, "--data", data, "--split", "all",
        "--paired", "--report", report_path,
    )
    self.assertEqual(code, 0, msg=stderr)
    report = logging.load_json(report_path)
    self.assertEqual(report["counts"]["total"], 40)
    self.assertContainsSubset(
        {"acc", "auc", "tarAt0p1", "tarAt0p01", "pbca", "meanPairDistance"}, set(report)
    )
    self.assertIn("AUC", stdout)

    maps = f"{run}/maps"
    code, _, stderr = _run(
        "attn-maps", "--checkpoint", checkpoint, "--data", data, "--split", "all",
        "--ids", ",".join(ids[:2]), "--out", maps,
    )
    self.assertEqual(code, 0, msg=stderr)
    self.assertCountEqual(
        [name for name in os.listdir(maps) if name.endswith(".png")],
        [f"{i}.png" for i in ids[:2]],
    )

    exports = f"{run}/exports"
    for command, name in [
        ("export-embeddings", "embeddings.csv"),
        ("export-histograms", "histograms.csv"),
    ]:
      code, _, stderr = _run(
          command, "--checkpoint", checkpoint, "--data", data, "--split", "all",
          "--out", exports,
      )
      self.assertEqual(code, 0, msg=stderr)
      self.assertTrue(os.path.exists(f"{exports}/{name}"))
    self.assertLen(pd.read_csv(f"{exports}/embeddings.csv"), 40)


if __name__ == "__main__":
  absltest.main()
