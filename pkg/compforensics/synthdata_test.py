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

import numpy as np
from absl.testing import absltest
from absl.testing import parameterized
from scipy import ndimage

from compforensics import synthdata
from compforensics import utils
from compforensics.config import DataConfig, Label, Manipulation
from compforensics.errors import ConfigError, DegenerateSpliceError, DimensionError
from compforensics.errors import ParameterError


class GeneratorTest(parameterized.TestCase):

    def test_real_image_is_deterministic(self):
        a = synthdata.generate_real_image(7, 64)
        np.testing.assert_array_equal(a, synthdata.generate_real_image(7, 64))
        self.assertEqual(a.shape, (64, 64, 3))
        self.assertEqual(a.dtype, np.uint8)

    def test_real_image_depends_on_seed(self):
        self.assertTrue(
            np.any(synthdata.generate_real_image(7, 64) != synthdata.generate_real_image(8, 64))
        )

    @parameterized.parameters(63, 24)
    def test_real_image_size_precondition(self, size):
        with self.assertRaises(DimensionError):
            synthdata.generate_real_image(7, size)

    @parameterized.parameters((1, 2), (10, 99), (123, 4), (5, 6))
    def test_fake_mask_fraction(self, seed_a, seed_b):
        _, mask = synthdata.generate_fake_pair(seed_a, seed_b, 64)
        self.assertBetween(mask.mean(), 0.05, 0.50)
        self.assertContainsSubset(set(np.unique(mask).tolist()), {0, 1})

    def test_fake_splice_is_local(self):
        image, mask = synthdata.generate_fake_pair(3, 4, 64)
        base = synthdata.generate_real_image(3, 64)
        reach = ndimage.binary_dilation(
            mask, structure=np.ones((3, 3)), iterations=synthdata.feather_radius(64)
        )
        np.testing.assert_array_equal(image[~reach], base[~reach])
        self.assertTrue(np.any(image[mask == 1] != base[mask == 1]))

    def test_degenerate_splice(self):
        with self.assertRaises(DegenerateSpliceError):
            synthdata.generate_fake_pair(1, 1, 64)


class ManipulationTest(parameterized.TestCase):

    @parameterized.parameters(*Manipulation)
    def test_family_is_local(self, manipulation):
        image, mask = synthdata.generate_fake(manipulation, 3, 4, 64)
        base = synthdata.generate_real_image(3, 64)
        reach = ndimage.binary_dilation(
            mask, structure=np.ones((3, 3)), iterations=synthdata.feather_radius(64)
        )
        np.testing.assert_array_equal(image[~reach], base[~reach])
        self.assertTrue(np.any(image[mask == 1] != base[mask == 1]))

    @parameterized.product(manipulation=list(Manipulation), seeds=[(1, 2), (10, 99), (5, 6)])
    def test_mask_fraction(self, manipulation, seeds):
        _, mask = synthdata.generate_fake(manipulation, *seeds, 64)
        self.assertBetween(mask.mean(), 0.05, 0.50)

    @parameterized.parameters(*Manipulation)
    def test_deterministic(self, manipulation):
        first, first_mask = synthdata.generate_fake(manipulation, 8, 9, 32)
        second, second_mask = synthdata.generate_fake(manipulation, 8, 9, 32)
        np.testing.assert_array_equal(first, second)
        np.testing.assert_array_equal(first_mask, second_mask)

    @parameterized.parameters(*Manipulation)
    def test_equal_seeds(self, manipulation):
        with self.assertRaises(DegenerateSpliceError):
            synthdata.generate_fake(manipulation, 1, 1, 64)

    def test_family_by_name(self):
        image, mask = synthdata.generate_fake("splice", 3, 4, 32)
        expected, expected_mask = synthdata.generate_fake_pair(3, 4, 32)
        np.testing.assert_array_equal(image, expected)
        np.testing.assert_array_equal(mask, expected_mask)

    def test_resample_removes_detail(self):
        image, mask = synthdata.generate_fake(Manipulation.RESAMPLE, 3, 4, 64)
        base = synthdata.generate_real_image(3, 64)
        inside = mask == 1

        def grad(x):
            # horizontal gradient energy inside the region
            return np.abs(np.diff(x.astype(np.float64), axis=1))[inside[:, 1:]].mean()

        self.assertLess(grad(image), grad(base))

    @parameterized.parameters((3, 4), (5, 6), (7, 8))
    def test_color_transfer_moves_toward_donor(self, seed_a, seed_b):
        image, mask = synthdata.generate_fake(Manipulation.COLOR, seed_a, seed_b, 64)
        donor = synthdata.generate_real_image(seed_b, 64)
        base = synthdata.generate_real_image(seed_a, 64)
        inside = mask == 1
        target = donor[inside].mean(axis=0)
        moved = np.abs(image[inside].mean(axis=0) - target).sum()
        before = np.abs(base[inside].mean(axis=0) - target).sum()
        self.assertLess(moved, before)


class CompressionTest(parameterized.TestCase):

    def test_quality_50_is_base_table(self):
        table = synthdata.quantization_table(50)
        self.assertEqual(table[0][0], 16)
        np.testing.assert_array_equal(table, synthdata.BASE_LUMINANCE_TABLE)

    def test_quality_100_is_all_ones(self):
        np.testing.assert_array_equal(synthdata.quantization_table(100), np.ones((8, 8)))

    def test_tables_are_monotone(self):
        previous = synthdata.quantization_table(100)
        for q in range(99, 0, -1):
            table = synthdata.quantization_table(q)
            self.assertTrue(np.all(table >= previous), msg=f"quality {q}")
            previous = table
        self.assertTrue(
            np.all(synthdata.quantization_table(10) >= synthdata.quantization_table(90))
        )

    @parameterized.parameters(0, 101, 50.5, -3)
    def test_quality_out_of_range(self, quality):
        with self.assertRaises(ParameterError):
            synthdata.quantization_table(quality)

    @parameterized.parameters((128, 10), (128, 90), (200, 50), (37, 100), (255, 100), (0, 100))
    def test_constant_image_survives(self, value, quality):
        image = np.full((16, 24, 3), value, dtype=np.uint8)
        np.testing.assert_array_equal(synthdata.compress(image, quality), image)

    def test_quality_100_rounding_only(self):
        image = synthdata.generate_real_image(11, 64)
        out = synthdata.compress(image, 100)
        self.assertEqual(out.shape, image.shape)
        self.assertLessEqual(np.abs(out.astype(int) - image.astype(int)).max(), 1)

    def test_zeroed_ac_monotone_on_50_images(self):
        for seed in range(50):
            image = synthdata.generate_real_image(1000 + seed, 64)
            counts = [synthdata.count_zeroed_ac(image, q) for q in (90, 60, 30)]
            self.assertEqual(counts, sorted(counts), msg=f"seed {seed}")

    def test_second_pass_drift(self):
        for seed in range(5):
            once = synthdata.compress(synthdata.generate_real_image(seed, 64), 30)
            twice = synthdata.compress(once, 30)
            self.assertLessEqual(np.abs(twice.astype(int) - once.astype(int)).max(), 2)

    def test_compress_rejects_unaligned(self):
        with self.assertRaises(DimensionError):
            synthdata.compress(np.zeros((20, 16, 3), dtype=np.uint8), 50)


class MaskAndCropTest(parameterized.TestCase):

    @parameterized.parameters((25, 0), (26, 1), (0, 0), (255, 1))
    def test_binarize(self, value, expected):
        self.assertEqual(synthdata.binarize_mask(np.array([[value]]))[0, 0], expected)

    def test_binarize_all_zero(self):
        self.assertFalse(synthdata.binarize_mask(np.zeros((8, 8))).any())

    def test_crop_box_enlarges_by_factor(self):
        self.assertEqual(synthdata.crop_box((64, 64), (20, 20, 20, 20), 1.3), (17, 17, 43, 43))

    def test_crop_box_clamps_at_corner(self):
        self.assertEqual(synthdata.crop_box((64, 64), (0, 0, 10, 10), 1.3), (0, 0, 12, 12))

    def test_identity_crop(self):
        image = synthdata.generate_real_image(2, 32)
        out = synthdata.crop_enlarged(image, (0, 0, 32, 32), 1.0, output_size=32)
        np.testing.assert_array_equal(out, image)

    def test_crop_resizes_and_keeps_masks_binary(self):
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[24:40, 24:40] = 1
        out = synthdata.crop_enlarged(mask, (16, 16, 32, 32), 1.3, output_size=32, nearest=True)
        self.assertEqual(out.shape, (32, 32))
        self.assertContainsSubset(set(np.unique(out).tolist()), {0, 1})

    @parameterized.parameters(
        ((10, 10, 0, 5), 1.3), ((10, 10, 5, 5), 0.9), ((60, 60, 10, 10), 1.3)
    )
    def test_crop_preconditions(self, bbox, factor):
        with self.assertRaises(ParameterError):
            synthdata.crop_box((64, 64), bbox, factor)


class DatasetTest(absltest.TestCase):

    def test_splits_are_70_15_15_and_disjoint(self):
        out = self.create_tempdir()
        manifest = synthdata.make_paired_dataset(DataConfig(count=100, size=32), out.full_path)
        sizes = {k: len(v) for k, v in manifest.splits.items()}
        self.assertEqual(sizes, {"train": 70, "val": 15, "test": 15})
        ids = [i for v in manifest.splits.values() for i in v]
        self.assertLen(set(ids), 100)
        counts = manifest.label_counts()
        self.assertEqual(counts[Label.FAKE], 50)

        for entry in manifest.entries:
            hq = synthdata.load_png(f"{out.full_path}/{entry.hq_path}")
            lq = synthdata.load_png(f"{out.full_path}/{entry.lq_path}")
            mask = synthdata.load_mask(f"{out.full_path}/{entry.mask_path}")
            self.assertEqual(hq.shape, lq.shape)
            self.assertEqual(mask.shape, hq.shape[:2])
            if entry.label == Label.FAKE:
                self.assertTrue(mask.any(), msg=entry.pair_id)
            else:
                self.assertFalse(mask.any(), msg=entry.pair_id)

    def test_same_seed_same_manifest_and_pixels(self):
        config = DataConfig(count=12, size=32, seed=4)
        a, b = self.create_tempdir(), self.create_tempdir()
        first = synthdata.make_paired_dataset(config, a.full_path)
        second = synthdata.make_paired_dataset(config, b.full_path)
        self.assertEqual(first.to_dict(), second.to_dict())
        for entry in first.entries:
            np.testing.assert_array_equal(
                synthdata.load_png(f"{a.full_path}/{entry.lq_path}"),
                synthdata.load_png(f"{b.full_path}/{entry.lq_path}"),
            )

    def test_quality_direction(self):
        with self.assertRaises(ConfigError):
            synthdata.make_paired_dataset(
                DataConfig(hq_quality=30, lq_quality=90), self.create_tempdir().full_path
            )

    def test_pair_members_share_one_source(self):
        config = DataConfig(size=32, seed=1)
        sample = synthdata.make_paired_sample(config, 3, Label.FAKE, 90)
        source, mask = synthdata.generate_fake_pair(
            utils.derive_seed(1, 3, 0), utils.derive_seed(1, 3, 1), 32
        )
        np.testing.assert_array_equal(sample.hq, synthdata.compress(source, 90))
        np.testing.assert_array_equal(sample.lq, synthdata.compress(source, 30))
        np.testing.assert_array_equal(sample.mask, mask)
        self.assertEqual((sample.hq_quality, sample.lq_quality), (90, 30))

    def test_face_crop_emulation(self):
        config = DataConfig(size=32, canvas_size=64, seed=2)
        sample = synthdata.make_paired_sample(config, 0, Label.FAKE, 90)
        self.assertEqual(sample.hq.shape, (32, 32, 3))
        self.assertEqual(sample.mask.shape, (32, 32))
        self.assertTrue(sample.mask.any())

    def test_mixed_quality_pairs(self):
        config = DataConfig(count=10, size=32, alt_hq_quality=100, mixed_fraction=1.0)
        out = self.create_tempdir()
        manifest = synthdata.make_paired_dataset(config, out.full_path)
        entry = manifest.entries[0]
        hq = synthdata.load_png(f"{out.full_path}/{entry.hq_path}")
        expected = synthdata.make_paired_sample(
            config, 0, entry.label, 100, entry.manipulation
        ).hq
        np.testing.assert_array_equal(hq, expected)

    def test_fakes_cycle_through_families(self):
        config = DataConfig(count=20, size=32, seed=3)
        manifest = synthdata.make_paired_dataset(config, self.create_tempdir().full_path)
        fakes = sorted(
            (e for e in manifest.entries if e.label == Label.FAKE), key=lambda e: e.pair_id
        )
        self.assertLen(fakes, 10)
        expected = [list(Manipulation)[i % 3] for i in range(10)]
        self.assertEqual([e.manipulation for e in fakes], expected)
        for entry in manifest.entries:
            if entry.label == Label.REAL:
                self.assertIsNone(entry.manipulation)

    def test_manifest_keeps_family(self):
        config = DataConfig(count=6, size=32, manipulations=[Manipulation.COLOR])
        manifest = synthdata.make_paired_dataset(config, self.create_tempdir().full_path)
        restored = synthdata.DatasetManifest.from_json(manifest.to_dict())
        self.assertEqual(restored.to_dict(), manifest.to_dict())
        kinds = {e.manipulation for e in restored.entries if e.label == Label.FAKE}
        self.assertEqual(kinds, {Manipulation.COLOR})
        for entry in restored.entries:
            self.assertEqual("manipulation" in entry.to_dict(), entry.label == Label.FAKE)

    def test_entry_without_family_field(self):
        entry = synthdata.ManifestEntry.from_json(
            {"pair_id": "1", "hq_path": "h", "lq_path": "l", "mask_path": "m", "label": "fake"}
        )
        self.assertIsNone(entry.manipulation)


if __name__ == "__main__":
    absltest.main()
