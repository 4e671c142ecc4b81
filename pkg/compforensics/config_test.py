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

from absl.testing import absltest
from absl.testing import parameterized

from compforensics import config
from compforensics import utils
from compforensics.config import DataConfig, GanMode, Manipulation, Objective
from compforensics.config import TrainConfig, Variant
from compforensics.errors import ConfigError


class TrainConfigTest(parameterized.TestCase):

    def test_defaults_carry_method_constants(self):
        c = TrainConfig()
        self.assertEqual(c.learning_rate, 1e-4)
        self.assertEqual(c.batch_size, 32)
        self.assertEqual((c.beta1, c.beta2), (0.9, 0.999))
        self.assertEqual(c.loss.lambda1, 0.001)
        self.assertEqual(c.loss.lambda2, 1.0)
        self.assertEqual(c.loss.lambda3, 0.1)
        self.assertAlmostEqual(c.loss.threshold, 9.05)

    def test_from_json_coerces_strings(self):
        c = TrainConfig.from_json(
            {"learning_rate": "1e-4", "batch_size": "8", "gan_mode": "wgan_gp",
             "model": {"embedding_dim": 16}}
        )
        self.assertEqual(c.learning_rate, 1e-4)
        self.assertEqual(c.batch_size, 8)
        self.assertEqual(c.gan_mode, GanMode.WGAN_GP)
        self.assertEqual(c.model.embedding_dim, 16)

    def test_odd_batch_size_names_the_field(self):
        with self.assertRaisesRegex(ConfigError, r"^train\.batch_size: must be even, got 33"):
            TrainConfig.from_json({"batch_size": 33})

    def test_unknown_field(self):
        with self.assertRaisesRegex(ConfigError, r"^train\.model\.depth: unknown field"):
            TrainConfig.from_json({"model": {"depth": 3}})

    def test_radii_order(self):
        with self.assertRaisesRegex(ConfigError, r"train\.loss\.r_minus"):
            TrainConfig.from_json({"loss": {"r_minus": 20.0}})

    @parameterized.parameters((GanMode.LOG, 1), (GanMode.WGAN_GP, 5))
    def test_d_updates_default(self, mode, expected):
        self.assertEqual(TrainConfig(gan_mode=mode).d_updates, expected)
        self.assertEqual(TrainConfig(gan_mode=mode, d_updates_per_step=3).d_updates, 3)

    @parameterized.named_parameters(
        ("transfer_without_attention", dict(use_attention=False, attention_transfer=True)),
        ("gan_on_single_branch", dict(two_branch=False, attention_transfer=False, use_gan=True)),
        ("two_branch_cross_entropy", dict(objective=Objective.CROSS_ENTROPY)),
    )
    def test_invalid_variants(self, fields):
        with self.assertRaises(ConfigError):
            Variant(**fields).validate()

    def test_load_train_config_reads_yaml_and_json(self):
        path = self.create_tempfile("train.json", content='{"max_epochs": 3, "seed": 5}')
        c = config.load_train_config(path.full_path)
        self.assertEqual((c.max_epochs, c.seed), (3, 5))
        with self.assertRaises(ConfigError):
            config.load_train_config(f"{path.full_path}.missing")


class DataConfigTest(absltest.TestCase):

    def test_hq_must_exceed_lq(self):
        with self.assertRaisesRegex(ConfigError, r"^data\.hq_quality"):
            DataConfig(hq_quality=30, lq_quality=90).validate()

    def test_size_multiple_of_block(self):
        with self.assertRaisesRegex(ConfigError, r"^data\.size"):
            DataConfig(size=60).validate()

    def test_canvas_not_smaller_than_size(self):
        with self.assertRaisesRegex(ConfigError, r"^data\.canvas_size"):
            DataConfig(size=64, canvas_size=32).validate()

    def test_manipulations_default_to_all_families(self):
        self.assertEqual(DataConfig().manipulations, list(Manipulation))

    def test_manipulations_from_json(self):
        data = DataConfig.from_json({"manipulations": ["color", "splice"]})
        self.assertEqual(data.manipulations, [Manipulation.COLOR, Manipulation.SPLICE])

    def test_manipulations_must_be_distinct_and_present(self):
        for value in ([], ["splice", "splice"]):
            with self.assertRaisesRegex(ConfigError, r"^data\.manipulations"):
                DataConfig.from_json({"manipulations": value})

    def test_unknown_manipulation(self):
        with self.assertRaisesRegex(ConfigError, r"^data\.manipulations"):
            DataConfig.from_json({"manipulations": ["warp"]})


class UtilsTest(absltest.TestCase):

    def test_derive_seed_is_order_independent(self):
        self.assertEqual(utils.derive_seed(3, 7), utils.derive_seed(3, 7))
        self.assertNotEqual(utils.derive_seed(3, 7), utils.derive_seed(7, 3))

    def test_config_hash_is_stable(self):
        self.assertEqual(utils.config_hash(TrainConfig()), utils.config_hash(TrainConfig()))
        self.assertNotEqual(
            utils.config_hash(TrainConfig()), utils.config_hash(TrainConfig(seed=1))
        )

    def test_to_dict_round_trips_train_config(self):
        c = TrainConfig(gan_mode=GanMode.WGAN_GP, seed=9)
        self.assertEqual(TrainConfig.from_json(utils.to_dict(c)), c)


if __name__ == "__main__":
    absltest.main()
