"""MVTec-style dataset ingestion, sliding-window tiling, and sample loading.

Expected tree::

    root/<category>/train/good/*.png
    root/<category>/test/<defect>/*.png          (defect "good" for normals)
    root/<category>/ground_truth/<defect>/<stem>_mask.png   (or <stem>.png)
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .config import SynthConfig, TileSpec
from .errors import DataError, MalformedTreeError, MissingMaskError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class DatasetEntry:
    image_path: Path
    mask_path: Path | None
    split: str
    defect_type: str
    source_id: str

    @property
    def is_anomalous(self) -> bool:
        return self.defect_type != "good"


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    category: str
    entries: tuple[DatasetEntry, ...]

    def split(self, name: str) -> tuple[DatasetEntry, ...]:
        return tuple(e for e in self.entries if e.split == name)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[DatasetEntry]:
        return iter(self.entries)

    def manifest(self) -> list[dict]:
        """Root-relative description, stable across machines."""
        def rel(p: Path | None) -> str | None:
            return None if p is None else p.relative_to(self.root).as_posix()

        return [
            {
                "source_id": e.source_id,
                "split": e.split,
                "defect_type": e.defect_type,
                "image": rel(e.image_path),
                "mask": rel(e.mask_path),
            }
            for e in self.entries
        ]


@dataclass
class ImageSample:
    image: np.ndarray  # H x W x 3 float32
    mask: np.ndarray | None  # H x W uint8 in {0, 1}
    label: int  # 0 normal, 1 anomalous
    source_id: str


def _images_in(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _find_mask(gt_dir: Path, stem: str) -> Path | None:
    for name in (f"{stem}_mask", stem):
        for suffix in (".png", ".PNG", ".bmp", ".jpg"):
            cand = gt_dir / f"{name}{suffix}"
            if cand.is_file():
                return cand
    return None


def scan_layout(root: str | Path, category: str) -> DatasetIndex:
    root = Path(root)
    base = root / category
    train_dir, test_dir, gt_root = base / "train", base / "test", base / "ground_truth"
    if not train_dir.is_dir() or not test_dir.is_dir():
        raise MalformedTreeError(f"{base}: expected 'train' and 'test' subdirectories")

    entries: list[DatasetEntry] = []
    for sub in sorted(p for p in train_dir.iterdir() if p.is_dir()):
        if sub.name != "good":
            raise MalformedTreeError(f"{sub}: training split may only contain 'good'")
    good_train = train_dir / "good"
    if not good_train.is_dir() or not _images_in(good_train):
        raise MalformedTreeError(f"{good_train}: no training images")
    for img in _images_in(good_train):
        entries.append(DatasetEntry(img, None, "train", "good", f"{category}/train/good/{img.stem}"))

    defect_dirs = sorted(p for p in test_dir.iterdir() if p.is_dir())
    if not defect_dirs:
        raise MalformedTreeError(f"{test_dir}: no defect-type subdirectories")
    for sub in defect_dirs:
        for img in _images_in(sub):
            mask = None
            if sub.name != "good":
                mask = _find_mask(gt_root / sub.name, img.stem)
                if mask is None:
                    raise MissingMaskError(f"{img}: no ground-truth mask under {gt_root / sub.name}")
            entries.append(DatasetEntry(img, mask, "test", sub.name, f"{category}/test/{sub.name}/{img.stem}"))

    entries.sort(key=lambda e: e.image_path.as_posix())
    return DatasetIndex(root, category, tuple(entries))


def _read_image(path: Path, mode: str) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert(mode)
    except (OSError, ValueError) as exc:
        raise DataError(f"failed to decode {path}: {exc}") from exc


def normalize_image(image: np.ndarray) -> np.ndarray:
    return (image - IMAGENET_MEAN) / IMAGENET_STD


def resize_mask(mask: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    h, w = (size, size) if isinstance(size, int) else size
    im = Image.fromarray((mask > 0).astype(np.uint8) * 255)
    out = np.asarray(im.resize((w, h), Image.NEAREST))
    return (out > 127).astype(np.uint8)


def load_sample(entry: DatasetEntry, resolution: int = 256, normalize: bool = True) -> ImageSample:
    """Decode and resize one entry.

    With ``normalize=False`` the image stays in [0, 1], which is what the
    anomaly synthesizer and the model (which normalizes internally) expect.
    """
    im = _read_image(entry.image_path, "RGB").resize((resolution, resolution), Image.BILINEAR)
    image = np.asarray(im, dtype=np.float32) / 255.0
    if normalize:
        image = normalize_image(image)
    mask = None
    if entry.mask_path is not None:
        raw = np.asarray(_read_image(entry.mask_path, "L"))
        mask = resize_mask(raw, resolution)
        assert mask.shape == image.shape[:2], (mask.shape, image.shape)
    return ImageSample(image, mask, int(entry.is_anomalous), entry.source_id)


# --------------------------------------------------------------------------- tiling


@dataclass(frozen=True)
class Tile:
    array: np.ndarray
    x: int
    y: int

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]


def axis_offsets(length: int, window: int, overlap: float) -> list[int]:
    """Window start positions along one axis; the last window is edge-clamped."""
    if length <= window:
        return [0]
    stride = max(1, math.floor(window * (1.0 - overlap)))
    offsets = []
    pos = 0
    while pos + window < length:
        offsets.append(pos)
        pos += stride
    last = length - window
    if offsets[-1] != last:
        offsets.append(last)
    return offsets


def tile_image(image: np.ndarray, spec: TileSpec = TileSpec()) -> list[Tile]:
    h, w = image.shape[:2]
    if h <= spec.max_side and w <= spec.max_side:
        return [Tile(image, 0, 0)]
    min_side = spec.min_keep_fraction * spec.max_side
    tiles = []
    for y in axis_offsets(h, spec.max_side, spec.overlap_fraction):
        for x in axis_offsets(w, spec.max_side, spec.overlap_fraction):
            tile = image[y : y + spec.max_side, x : x + spec.max_side]
            if min(tile.shape[:2]) < min_side:
                continue
            tiles.append(Tile(tile, x, y))
    return tiles


def _tile_name(path: Path, x: int, y: int) -> str:
    stem = path.stem
    if stem.endswith("_mask"):
        return f"{stem[:-5]}_x{x}_y{y}_mask.png"
    return f"{stem}_x{x}_y{y}.png"


def preprocess_tree(input_dir: str | Path, output_dir: str | Path, spec: TileSpec = TileSpec()) -> list[dict]:
    """Tile every image under ``input_dir`` into ``output_dir``, mirroring the tree.

    Masks share their image's dimensions and so receive identical offsets.
    Writes ``manifest.json`` and returns its entries.
    """
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    if not input_dir.is_dir():
        raise DataError(f"input directory {input_dir} does not exist")
    manifest = []
    for src in sorted(p for p in input_dir.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES):
        rel = src.relative_to(input_dir)
        try:
            with Image.open(src) as im:
                im.load()
                arr = np.asarray(im)
        except (OSError, ValueError) as exc:
            raise DataError(f"failed to decode {src}: {exc}") from exc
        dest_dir = output_dir / rel.parent
        dest_dir.mkdir(parents=True, exist_ok=True)
        for tile in tile_image(arr, spec):
            if tile.x == 0 and tile.y == 0 and tile.array.shape == arr.shape:
                name = src.with_suffix(".png").name
            else:
                name = _tile_name(src, tile.x, tile.y)
            Image.fromarray(np.ascontiguousarray(tile.array)).save(dest_dir / name)
            manifest.append(
                {
                    "source": rel.as_posix(),
                    "tile": (rel.parent / name).as_posix(),
                    "offset": [tile.x, tile.y],
                    "size": [tile.width, tile.height],
                }
            )
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    log.info("wrote %d tiles to %s", len(manifest), output_dir)
    return manifest


# --------------------------------------------------------------------------- torch datasets

try:
    import torch
    from torch.utils.data import Dataset
except ImportError:  # pragma: no cover
    torch = None
    Dataset = object


class TrainDataset(Dataset):
    """Normal training images with on-the-fly anomaly synthesis.

    Each item draws from ``rng([seed, epoch, index])`` so results do not
    depend on worker assignment or on where a run was resumed.
    """

    def __init__(self, entries, resolution: int, synth_config: SynthConfig, textures, seed: int = 0):
        self.entries = tuple(entries)
        self.resolution = resolution
        self.synth_config = synth_config
        self.textures = textures
        self.seed = seed
        self.epoch = 0
        self._cache: dict[int, np.ndarray] = {}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.entries)

    def _image(self, index: int) -> np.ndarray:
        if index not in self._cache:
            self._cache[index] = load_sample(self.entries[index], self.resolution, normalize=False).image
        return self._cache[index]

    def __getitem__(self, index: int):
        from .synth import synthesize

        rng = np.random.default_rng([self.seed, self.epoch, index])
        x_n = self._image(index)
        res = synthesize(x_n, self.synth_config, rng, textures=self.textures)
        return {
            "x_n": torch.from_numpy(np.ascontiguousarray(x_n.transpose(2, 0, 1))),
            "x_a": torch.from_numpy(np.ascontiguousarray(res.image_a.transpose(2, 0, 1))),
            "mask": torch.from_numpy(res.mask[None].astype(np.float32)),
            "index": index,
        }


class EvalDataset(Dataset):
    def __init__(self, entries, resolution: int):
        self.entries = tuple(entries)
        self.resolution = resolution

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int):
        s = load_sample(self.entries[index], self.resolution, normalize=False)
        mask = s.mask if s.mask is not None else np.zeros(s.image.shape[:2], np.uint8)
        return {
            "image": torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1))),
            "mask": torch.from_numpy(mask[None].astype(np.float32)),
            "label": s.label,
            "source_id": s.source_id,
        }
