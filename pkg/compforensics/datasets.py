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

"""Torch-side loading of a paired manifest."""

from concurrent.futures import ThreadPoolExecutor
import pathlib
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from compforensics import synthdata
from compforensics import utils
from compforensics.synthdata import DatasetManifest, ManifestEntry


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 uint8 -> 3 x H x W float in [-1, 1]."""
    return torch.from_numpy(image.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def _fit(array: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    h, w = array.shape[:2]
    if (h, w) == (size, size):
        return array
    return synthdata.crop_enlarged(array, (0, 0, w, h), 1.0, size, nearest=nearest)


def load_entry(data_dir: str | pathlib.Path, entry: ManifestEntry, input_size: int) -> Dict[str, Any]:
    data_dir = pathlib.Path(data_dir)
    hq = _fit(synthdata.load_png(data_dir / entry.hq_path), input_size)
    lq = _fit(synthdata.load_png(data_dir / entry.lq_path), input_size)
    mask = _fit(synthdata.load_mask(data_dir / entry.mask_path), input_size, nearest=True)
    if entry.flip:
        hq, lq, mask = hq[:, ::-1], lq[:, ::-1], mask[:, ::-1]
    return {
        "pair_id": entry.pair_id,
        "hq": to_tensor(np.ascontiguousarray(hq)),
        "lq": to_tensor(np.ascontiguousarray(lq)),
        "mask": torch.from_numpy(np.ascontiguousarray(mask).astype(np.float32)),
        "label": torch.tensor(int(entry.label), dtype=torch.long),
        "manipulation": entry.manipulation.value if entry.manipulation else "",
    }


class PairedDataset(Dataset):
    """All pairs of one split, preloaded in manifest order."""

    def __init__(
        self,
        manifest: DatasetManifest,
        data_dir: str | pathlib.Path,
        split: Optional[str],
        input_size: int,
        num_threads: int = 1,
    ):
        self.entries: List[ManifestEntry] = manifest.split_entries(split)
        with ThreadPoolExecutor(max_workers=max(1, num_threads)) as executor:
            self.items = list(
                executor.map(lambda e: load_entry(data_dir, e, input_size), self.entries)
            )

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> Dict[str, Any]:
        return self.items[index]


def make_loader(
    dataset: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0
) -> DataLoader:
    """Single-process loader; with `shuffle` the order depends only on `seed`."""
    generator = torch.Generator().manual_seed(utils.derive_seed(seed)) if shuffle else None
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, generator=generator)
