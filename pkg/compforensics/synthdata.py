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

"""Synthetic paired-compression dataset.

Real images are textured noise with geometric primitives. Fakes alter a
feathered region of one image: spliced in from a second image, resampled or
recolored to a second image's statistics. Both members of a pair
come from the same source, compressed by an 8x8 block-DCT quantizer at a high
and a low JPEG quality.
"""

from concurrent.futures import ThreadPoolExecutor
import dataclasses
import os
import pathlib
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import numpy.typing as npt
from PIL import Image as PILImage
from scipy import ndimage
from scipy.fft import dctn, idctn
import tqdm

from compforensics import utils
from compforensics.config import BLOCK_SIZE, CROP_FACTOR, MASK_THRESHOLD
from compforensics.config import DataConfig, Label, Manipulation
from compforensics.errors import DatasetError, DegenerateSpliceError
from compforensics.errors import DimensionError, ParameterError
from compforensics.utils import Deserializable

Image = npt.NDArray[np.uint8]  # H x W x 3
GroundTruthMask = npt.NDArray[np.uint8]  # H x W, values in {0, 1}

# Standard JPEG luminance table (quality 50).
BASE_LUMINANCE_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)

MIN_MASK_FRACTION = 0.05
MAX_MASK_FRACTION = 0.50
_SPLICE_ATTEMPTS = 64
_GAUSS_TRUNCATE = 4.0


def _check_size(size: int):
    if size < 32 or size % BLOCK_SIZE != 0:
        raise DimensionError(
            f"image size must be a multiple of {BLOCK_SIZE} and >= 32, got {size}"
        )


def _check_image(image: np.ndarray):
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h % BLOCK_SIZE or w % BLOCK_SIZE:
        raise DimensionError(
            f"image dimensions must be multiples of {BLOCK_SIZE}, got {h}x{w}"
        )


def feather_sigma(size: int) -> float:
    return max(1.0, size / 32)


def feather_radius(size: int) -> int:
    """Pixels beyond this distance from the splice region are untouched."""
    return int(_GAUSS_TRUNCATE * feather_sigma(size) + 0.5)


def generate_real_image(seed: int, size: int) -> Image:
    """Deterministic textured image: multi-scale smoothed noise plus shapes."""
    _check_size(size)
    rng = np.random.default_rng(seed)
    canvas = np.zeros((size, size, 3))
    for sigma, weight in ((size / 4, 1.0), (size / 12, 0.6), (size / 32, 0.35), (0.7, 0.2)):
        noise = rng.standard_normal((size, size, 3))
        smooth = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
        canvas += weight * smooth / (smooth.std() + 1e-12)
    canvas = 128.0 + 26.0 * canvas

    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0, 255, 3)
        opacity = rng.uniform(0.3, 0.8)
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(size / 16, size / 4, 2)
        if rng.random() < 0.5:
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        canvas[region] = (1 - opacity) * canvas[region] + opacity * color

    return np.clip(np.round(canvas), 0, 255).astype(np.uint8)


def _feathered_region(
    rng: np.random.Generator, size: int, seeds: Tuple[int, int]
) -> Tuple[np.ndarray, GroundTruthMask]:
    """Feathered elliptical alpha matte and its binary mask (alpha > 0.1)."""
    yy, xx = np.mgrid[0:size, 0:size]
    sigma = feather_sigma(size)
    for _ in range(_SPLICE_ATTEMPTS):
        ry, rx = rng.uniform(0.16, 0.34, 2) * size
        cy = rng.uniform(ry, size - ry)
        cx = rng.uniform(rx, size - rx)
        hard = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64)
        alpha = ndimage.gaussian_filter(
            hard, sigma=sigma, mode="constant", truncate=_GAUSS_TRUNCATE
        )
        mask = binarize_mask(np.round(alpha * 255))
        if MIN_MASK_FRACTION <= mask.mean() <= MAX_MASK_FRACTION:
            return alpha, mask
    raise DatasetError(f"could not place a manipulated region for seeds {seeds[0]}, {seeds[1]}")


def _blend(alpha: np.ndarray, inside: np.ndarray, base: np.ndarray) -> Image:
    alpha = alpha[..., None]
    blended = alpha * inside + (1 - alpha) * base
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def _check_seeds(seed_a: int, seed_b: int):
    if seed_a == seed_b:
        raise DegenerateSpliceError(f"base and donor seeds are identical ({seed_a})")


def generate_fake_pair(seed_a: int, seed_b: int, size: int) -> Tuple[Image, GroundTruthMask]:
    """Splices a feathered elliptical region of image `seed_b` into `seed_a`.

    The donor region is slightly smoothed and color-shifted, the way face
    synthesis leaves blending and color artifacts.

    Returns:
      The spliced image and its binary mask (alpha > 0.1).
    """
    _check_seeds(seed_a, seed_b)
    base = generate_real_image(seed_a, size).astype(np.float64)
    donor = generate_real_image(seed_b, size).astype(np.float64)

    rng = np.random.default_rng([seed_a, seed_b])
    donor = ndimage.gaussian_filter(donor, sigma=(0.8, 0.8, 0))
    donor = donor * rng.uniform(0.85, 1.15, 3) + rng.uniform(-12, 12, 3)

    alpha, mask = _feathered_region(rng, size, (seed_a, seed_b))
    return _blend(alpha, donor, base), mask


def generate_resampled(seed_a: int, seed_b: int, size: int) -> Tuple[Image, GroundTruthMask]:
    """Replaces a region of image `seed_a` with a down- and up-sampled copy.

    The region loses high frequencies the way an upscaled synthesized face
    does. `seed_b` only seeds the region placement and resampling factor.
    """
    _check_seeds(seed_a, seed_b)
    base = generate_real_image(seed_a, size)

    rng = np.random.default_rng([seed_a, seed_b, 1])
    small = max(2, int(round(size / rng.uniform(2.0, 3.0))))
    resampled = (
        PILImage.fromarray(base)
        .resize((small, small), PILImage.Resampling.BILINEAR)
        .resize((size, size), PILImage.Resampling.BILINEAR)
    )

    alpha, mask = _feathered_region(rng, size, (seed_a, seed_b))
    inside = np.asarray(resampled).astype(np.float64)
    return _blend(alpha, inside, base.astype(np.float64)), mask


def generate_color_transfer(
    seed_a: int, seed_b: int, size: int
) -> Tuple[Image, GroundTruthMask]:
    """Recolors a region of image `seed_a` to the statistics of image `seed_b`.

    Inside the region each channel is shifted and scaled to the donor's mean
    and standard deviation over the same region; texture stays the base's.
    """
    _check_seeds(seed_a, seed_b)
    base = generate_real_image(seed_a, size).astype(np.float64)
    donor = generate_real_image(seed_b, size).astype(np.float64)

    rng = np.random.default_rng([seed_a, seed_b, 2])
    alpha, mask = _feathered_region(rng, size, (seed_a, seed_b))
    region = mask.astype(bool)
    mu_base, sd_base = base[region].mean(axis=0), base[region].std(axis=0) + 1e-6
    mu_donor, sd_donor = donor[region].mean(axis=0), donor[region].std(axis=0)
    recolored = (base - mu_base) / sd_base * sd_donor + mu_donor
    return _blend(alpha, recolored, base), mask


_GENERATORS = {
    Manipulation.SPLICE: generate_fake_pair,
    Manipulation.RESAMPLE: generate_resampled,
    Manipulation.COLOR: generate_color_transfer,
}


def generate_fake(
    manipulation: Manipulation, seed_a: int, seed_b: int, size: int
) -> Tuple[Image, GroundTruthMask]:
    """Fake source image and mask for one manipulation family."""
    return _GENERATORS[Manipulation(manipulation)](seed_a, seed_b, size)


def quantization_table(quality: int) -> npt.NDArray[np.int64]:
    """JPEG luminance table scaled to `quality` (libjpeg integer arithmetic)."""
    if isinstance(quality, bool) or int(quality) != quality or not 1 <= quality <= 100:
        raise ParameterError(f"quality must be an integer in [1, 100], got {quality}")
    quality = int(quality)
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    return np.clip((BASE_LUMINANCE_TABLE * scale + 50) // 100, 1, 255)


def _to_blocks(x: np.ndarray) -> np.ndarray:
    # (H, W, C) -> (H/8, W/8, C, 8, 8)
    h, w, c = x.shape
    return x.reshape(h // BLOCK_SIZE, BLOCK_SIZE, w // BLOCK_SIZE, BLOCK_SIZE, c).transpose(
        0, 2, 4, 1, 3
    )


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw, c = blocks.shape[:3]
    return blocks.transpose(0, 3, 1, 4, 2).reshape(bh * BLOCK_SIZE, bw * BLOCK_SIZE, c)


def quantize(image: Image, quality: int) -> np.ndarray:
    """Quantized block-DCT coefficients, shape (H/8, W/8, 3, 8, 8)."""
    _check_image(image)
    table = quantization_table(quality)
    blocks = _to_blocks(image.astype(np.float64) - 128.0)
    coeffs = dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    return np.round(coeffs / table)


def dequantize(coefficients: np.ndarray, quality: int) -> Image:
    table = quantization_table(quality)
    blocks = idctn(coefficients * table, type=2, norm="ortho", axes=(-2, -1)) + 128.0
    return np.clip(np.round(_from_blocks(blocks)), 0, 255).astype(np.uint8)


def compress(image: Image, quality: int) -> Image:
    """JPEG-style quantization round trip; all channels use the luminance table."""
    return dequantize(quantize(image, quality), quality)


def count_zeroed_ac(image: Image, quality: int) -> int:
    q = quantize(image, quality)
    ac = np.ones((BLOCK_SIZE, BLOCK_SIZE), dtype=bool)
    ac[0, 0] = False
    return int(np.count_nonzero(q[..., ac] == 0))


def binarize_mask(mask_image: np.ndarray, threshold: float = MASK_THRESHOLD) -> GroundTruthMask:
    return (np.asarray(mask_image, dtype=np.float64) / 255.0 > threshold).astype(np.uint8)


def crop_box(
    shape: Tuple[int, int], bbox: Tuple[int, int, int, int], factor: float = CROP_FACTOR
) -> Tuple[int, int, int, int]:
    """Enlarged crop (x0, y0, x1, y1) around `bbox`, clamped to the image."""
    height, width = shape[:2]
    x, y, w, h = bbox
    if w <= 0 or h <= 0:
        raise ParameterError(f"empty bbox {bbox}")
    if factor < 1:
        raise ParameterError(f"crop factor must be >= 1, got {factor}")
    if x < 0 or y < 0 or x + w > width or y + h > height:
        raise ParameterError(f"bbox {bbox} is outside the {width}x{height} image")
    cx, cy = x + w / 2, y + h / 2
    nw, nh = factor * w, factor * h
    x0 = max(0, int(round(cx - nw / 2)))
    y0 = max(0, int(round(cy - nh / 2)))
    x1 = min(width, int(round(cx + nw / 2)))
    y1 = min(height, int(round(cy + nh / 2)))
    return x0, y0, x1, y1


def crop_enlarged(
    image: np.ndarray,
    bbox: Tuple[int, int, int, int],
    factor: float = CROP_FACTOR,
    output_size: Optional[int] = None,
    nearest: bool = False,
) -> np.ndarray:
    """Crops `factor` x bbox around its center and resizes to `output_size`.

    Use `nearest=True` for masks so they stay binary. Applying the same bbox
    and factor to both members of a pair and to the mask keeps them aligned.
    """
    x0, y0, x1, y1 = crop_box(image.shape, bbox, factor)
    crop = image[y0:y1, x0:x1]
    if output_size is None:
        return crop.copy()
    resample = PILImage.Resampling.NEAREST if nearest else PILImage.Resampling.BILINEAR
    resized = PILImage.fromarray(crop).resize((output_size, output_size), resample)
    return np.asarray(resized)


@dataclasses.dataclass
class PairedSample:
    pair_id: str
    hq: Image
    lq: Image
    mask: GroundTruthMask
    label: Label
    hq_quality: int
    lq_quality: int
    manipulation: Optional[Manipulation] = None


@dataclasses.dataclass
class ManifestEntry(Deserializable):
    pair_id: str
    hq_path: str
    lq_path: str
    mask_path: str
    label: Label
    flip: bool = False  # horizontal flip augmentation for oversampled copies
    manipulation: Optional[Manipulation] = None  # fakes only

    def to_dict(self) -> Dict[str, Any]:
        d = {
            "pair_id": self.pair_id,
            "hq_path": self.hq_path,
            "lq_path": self.lq_path,
            "mask_path": self.mask_path,
            "label": self.label.name.lower(),
        }
        if self.flip:
            d["flip"] = True
        if self.manipulation is not None:
            d["manipulation"] = self.manipulation.value
        return d

    @classmethod
    def from_json(cls, data: Dict[Any, Any]):
        return cls(
            pair_id=str(data["pair_id"]),
            hq_path=data["hq_path"],
            lq_path=data["lq_path"],
            mask_path=data["mask_path"],
            label=Label.parse(data["label"]),
            flip=bool(data.get("flip", False)),
            manipulation=(
                Manipulation(data["manipulation"]) if data.get("manipulation") else None
            ),
        )


SPLITS = ("train", "val", "test")


@dataclasses.dataclass
class DatasetManifest(Deserializable):
    """Entries, disjoint train/val/test id lists and the generating seed."""

    entries: List[ManifestEntry]
    splits: Dict[str, List[str]]
    seed: int

    def __post_init__(self):
        self._by_id = {e.pair_id: e for e in self.entries}

    def entry(self, pair_id: str) -> ManifestEntry:
        return self._by_id[pair_id]

    def split_entries(self, split: Optional[str]) -> List[ManifestEntry]:
        if split is None:
            return list(self.entries)
        if split not in self.splits:
            raise DatasetError(f"manifest has no '{split}' split")
        return [self._by_id[i] for i in self.splits[split]]

    def label_counts(self, split: Optional[str] = None) -> Dict[Label, int]:
        counts = {Label.REAL: 0, Label.FAKE: 0}
        for e in self.split_entries(split):
            counts[e.label] += 1
        return counts

    def validate(self) -> "DatasetManifest":
        seen = set()
        for name, ids in self.splits.items():
            for pair_id in ids:
                if pair_id in seen:
                    raise DatasetError(f"id {pair_id} appears in more than one split")
                if pair_id not in self._by_id:
                    raise DatasetError(f"split '{name}' references unknown id {pair_id}")
                seen.add(pair_id)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "splits": {k: list(v) for k, v in self.splits.items()},
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: Dict[Any, Any]):
        return cls(
            entries=[ManifestEntry.from_json(e) for e in data["entries"]],
            splits={k: [str(i) for i in v] for k, v in data.get("splits", {}).items()},
            seed=int(data.get("seed", 0)),
        ).validate()


def save_png(path: str | pathlib.Path, array: np.ndarray):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    PILImage.fromarray(array).save(path, format="PNG")


def load_png(path: str | pathlib.Path) -> np.ndarray:
    with PILImage.open(path) as img:
        return np.asarray(img).copy()


def load_mask(path: str | pathlib.Path) -> GroundTruthMask:
    return binarize_mask(load_png(path))


def _face_box(canvas: int, rng: np.random.Generator, factor: float) -> Tuple[int, int, int, int]:
    """Detector-style square box near the canvas center (face-crop emulation)."""
    side = int(round(canvas / factor))
    jitter = canvas * 0.05
    cx = canvas / 2 + rng.uniform(-jitter, jitter)
    cy = canvas / 2 + rng.uniform(-jitter, jitter)
    x = int(np.clip(round(cx - side / 2), 0, canvas - side))
    y = int(np.clip(round(cy - side / 2), 0, canvas - side))
    return x, y, side, side


def make_paired_sample(
    config: DataConfig,
    index: int,
    label: Label,
    hq_quality: int,
    manipulation: Optional[Manipulation] = None,
) -> PairedSample:
    """Builds sample `index`; a pure function of (config.seed, index, label).

    Fakes default to a splice; `manipulation` is ignored for reals.
    """
    seed_a = utils.derive_seed(config.seed, index, 0)
    seed_b = utils.derive_seed(config.seed, index, 1)
    if seed_b == seed_a:
        seed_b = (seed_b + 1) % 2**32
    canvas = config.canvas_size or config.size

    if label == Label.FAKE:
        manipulation = manipulation or Manipulation.SPLICE
        source, mask = generate_fake(manipulation, seed_a, seed_b, canvas)
    else:
        manipulation = None
        source = generate_real_image(seed_a, canvas)
        mask = np.zeros((canvas, canvas), dtype=np.uint8)

    if canvas != config.size:
        rng = np.random.default_rng([seed_a, 2])
        bbox = _face_box(canvas, rng, config.crop_factor)
        source = crop_enlarged(source, bbox, config.crop_factor, config.size)
        mask = crop_enlarged(mask, bbox, config.crop_factor, config.size, nearest=True)
        if label == Label.FAKE and not mask.any():
            raise DatasetError(f"sample {index}: face crop removed the whole region")

    return PairedSample(
        pair_id=f"{index:06d}",
        hq=compress(source, hq_quality),
        lq=compress(source, config.lq_quality),
        mask=mask,
        label=label,
        hq_quality=hq_quality,
        lq_quality=config.lq_quality,
        manipulation=manipulation,
    )


def _split_counts(config: DataConfig) -> Tuple[int, int, int]:
    n_train = int(round(config.count * config.train_fraction))
    n_val = int(round(config.count * config.val_fraction))
    n_val = min(n_val, config.count - n_train)
    return n_train, n_val, config.count - n_train - n_val


def make_paired_dataset(config: DataConfig, out_dir: str | pathlib.Path) -> DatasetManifest:
    """Generates and writes the paired dataset; returns its manifest.

    Images go to `out_dir/{hq,lq,mask}/<id>.png` (lossless). The manifest is
    returned, not written; see `logging.save_manifest`.
    """
    config.validate()
    out_dir = pathlib.Path(out_dir)
    rng = np.random.default_rng(config.seed)
    label_order = rng.permutation(config.count)
    split_order = rng.permutation(config.count)
    mix_order = rng.permutation(config.count)

    n_fake = int(round(config.count * config.fake_fraction))
    fakes = set(int(i) for i in label_order[:n_fake])
    alt = set()
    if config.alt_hq_quality is not None:
        alt = set(int(i) for i in mix_order[: int(round(config.count * config.mixed_fraction))])
    # Fakes take the configured families in turn, in pair-index order.
    families = {
        index: config.manipulations[rank % len(config.manipulations)]
        for rank, index in enumerate(sorted(fakes))
    }

    def build(index: int) -> ManifestEntry:
        label = Label.FAKE if index in fakes else Label.REAL
        hq_quality = config.alt_hq_quality if index in alt else config.hq_quality
        sample = make_paired_sample(config, index, label, hq_quality, families.get(index))
        entry = ManifestEntry(
            pair_id=sample.pair_id,
            hq_path=f"hq/{sample.pair_id}.png",
            lq_path=f"lq/{sample.pair_id}.png",
            mask_path=f"mask/{sample.pair_id}.png",
            label=label,
            manipulation=sample.manipulation,
        )
        save_png(out_dir / entry.hq_path, sample.hq)
        save_png(out_dir / entry.lq_path, sample.lq)
        save_png(out_dir / entry.mask_path, sample.mask * 255)
        return entry

    with ThreadPoolExecutor(max_workers=config.num_threads) as executor:
        futures = [executor.submit(build, i) for i in range(config.count)]
        entries = [f.result() for f in tqdm.tqdm(futures, desc="Pairs", leave=False)]

    n_train, n_val, _ = _split_counts(config)
    ids = [f"{int(i):06d}" for i in split_order]
    splits = {
        "train": sorted(ids[:n_train]),
        "val": sorted(ids[n_train : n_train + n_val]),
        "test": sorted(ids[n_train + n_val :]),
    }
    return DatasetManifest(entries=entries, splits=splits, seed=config.seed).validate()
