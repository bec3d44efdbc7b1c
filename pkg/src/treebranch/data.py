"""Dataset ingestion, preprocessing, batching, and a synthetic desk-scale
identity dataset.

Directory layouts follow the common re-identification convention: image
filenames start with ``<pid>_c<cam>`` where pid -1 marks a distractor
(never a true match; excluded from training, kept in the gallery).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image

from .errors import ValidationError

SPLITS = ("train", "query", "gallery")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp")
DISTRACTOR_PID = -1

_MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)")


@dataclass
class Entry:
    path: str
    pid: int
    camid: int
    distractor: bool = False


@dataclass
class DatasetManifest:
    split: str
    entries: list[Entry]
    num_identities: int

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def pids(self) -> np.ndarray:
        return np.array([e.pid for e in self.entries], dtype=np.int64)

    @property
    def camids(self) -> np.ndarray:
        return np.array([e.camid for e in self.entries], dtype=np.int64)

    @property
    def paths(self) -> list[str]:
        return [e.path for e in self.entries]


def parse_market_name(filename: str) -> tuple[int, int]:
    """Extract (pid, camid) from a ``<pid>_c<cam>...`` style filename."""
    m = _MARKET_NAME.match(Path(filename).name)
    if m is None:
        raise ValidationError(f"cannot parse identity/camera from filename '{filename}'")
    return int(m.group(1)), int(m.group(2))


def scan_reid_directory(root, split: str, naming: str = "market_style") -> DatasetManifest:
    """Scan one split directory into a manifest.

    Train identities are densely re-indexed to [0, M) (distractors dropped);
    query/gallery keep their original identity and camera ids so evaluation
    filtering can use them.
    """
    if naming != "market_style":
        raise ValidationError(f"unknown naming scheme '{naming}'")
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}, got '{split}'")
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"dataset directory does not exist: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    bad = []
    parsed = []
    for path in files:
        try:
            pid, camid = parse_market_name(path.name)
        except ValidationError:
            bad.append(path.name)
            continue
        parsed.append((str(path), pid, camid))
    if bad:
        raise ValidationError(f"unparseable filenames under {root}: {', '.join(sorted(bad))}")
    if not parsed:
        raise ValidationError(f"no images found in split directory {root}")

    if split == "train":
        kept = [(p, pid, cam) for p, pid, cam in parsed if pid != DISTRACTOR_PID]
        if not kept:
            raise ValidationError(f"train split {root} contains only distractor images")
        id_map = {pid: idx for idx, pid in enumerate(sorted({pid for _, pid, _ in kept}))}
        entries = [Entry(path=p, pid=id_map[pid], camid=cam) for p, pid, cam in kept]
        return DatasetManifest(split=split, entries=entries, num_identities=len(id_map))

    entries = [
        Entry(path=p, pid=pid, camid=cam, distractor=pid == DISTRACTOR_PID)
        for p, pid, cam in parsed
    ]
    num_ids = len({e.pid for e in entries if not e.distractor})
    return DatasetManifest(split=split, entries=entries, num_identities=num_ids)


def write_manifest(manifest: DatasetManifest, path) -> None:
    """One JSON record per image: path, pid, camid, split, distractor flag."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(
                json.dumps(
                    {
                        "path": e.path,
                        "pid": e.pid,
                        "camid": e.camid,
                        "split": manifest.split,
                        "distractor": e.distractor,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_manifest(path) -> DatasetManifest:
    entries = []
    split = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            split = rec["split"]
            entries.append(
                Entry(
                    path=rec["path"],
                    pid=rec["pid"],
                    camid=rec["camid"],
                    distractor=rec.get("distractor", False),
                )
            )
    if split is None:
        raise ValidationError(f"manifest file {path} is empty")
    if split == "train":
        num_ids = len({e.pid for e in entries})
    else:
        num_ids = len({e.pid for e in entries if not e.distractor})
    return DatasetManifest(split=split, entries=entries, num_identities=num_ids)


# ---------------------------------------------------------------------------
# preprocessing and batching


@dataclass
class Preprocess:
    """Resize + normalization settings; augmentation is resize plus an
    optional horizontal flip, nothing else."""

    height: int = 384
    width: int = 128
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    hflip: bool = True


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # (N, 3, H, W), normalized
    labels: torch.Tensor  # (N,) identity indices

    def __len__(self) -> int:
        return self.pixels.shape[0]


def _load_image(path: str, height: int, width: int) -> np.ndarray:
    """Decoded image as float32 (H, W, 3) in [0, 1], resized."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB").resize((width, height), Image.Resampling.BILINEAR)
            return np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read image file '{path}': {exc}") from exc


class BatchStream:
    """Deterministic epoch-wise batch producer over a manifest.

    Batch order is a pure function of (seed, epoch); the final partial batch
    is kept. A small decode cache makes repeated epochs cheap at desk scale.
    """

    def __init__(self, manifest: DatasetManifest, preprocess: Preprocess, augment: bool = True):
        self.manifest = manifest
        self.preprocess = preprocess
        self.augment = augment
        self._cache: dict[str, np.ndarray] = {}
        self._cache_limit = 4096

    def _image(self, path: str) -> np.ndarray:
        cached = self._cache.get(path)
        if cached is None:
            cached = _load_image(path, self.preprocess.height, self.preprocess.width)
            if len(self._cache) < self._cache_limit:
                self._cache[path] = cached
        return cached

    def _assemble(self, entries: list[Entry], flips: np.ndarray | None) -> ImageBatch:
        pre = self.preprocess
        mean = np.asarray(pre.mean, dtype=np.float32)
        std = np.asarray(pre.std, dtype=np.float32)
        images = []
        for i, entry in enumerate(entries):
            arr = self._image(entry.path)
            if flips is not None and flips[i]:
                arr = arr[:, ::-1, :]
            images.append((arr - mean) / std)
        pixels = torch.from_numpy(np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2)))
        labels = torch.tensor([e.pid for e in entries], dtype=torch.long)
        return ImageBatch(pixels=pixels, labels=labels)

    def epoch_batches(self, epoch: int, batch_size: int, seed: int, shuffle: bool = True) -> Iterator[ImageBatch]:
        if batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
        rng = np.random.default_rng([int(seed), int(epoch)])
        order = np.arange(len(self.manifest))
        if shuffle:
            rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            entries = [self.manifest.entries[i] for i in idx]
            flips = rng.random(len(entries)) < 0.5 if (self.augment and self.preprocess.hflip) else None
            yield self._assemble(entries, flips)

    def eval_batches(self, batch_size: int) -> Iterator[tuple[ImageBatch, list[Entry]]]:
        """Manifest-order batches with no shuffling or augmentation."""
        for start in range(0, len(self.manifest), batch_size):
            entries = self.manifest.entries[start : start + batch_size]
            yield self._assemble(entries, None), entries


def make_batches(
    manifest: DatasetManifest,
    batch_size: int,
    seed: int,
    preprocess: Preprocess | None = None,
    epoch: int = 0,
    augment: bool = True,
) -> Iterator[ImageBatch]:
    """One shuffled epoch of batches; deterministic per (seed, epoch)."""
    stream = BatchStream(manifest, preprocess or Preprocess(), augment=augment)
    return stream.epoch_batches(epoch, batch_size, seed)


# ---------------------------------------------------------------------------
# synthetic identity dataset


@dataclass
class SyntheticSpec:
    """Desk-scale synthetic dataset: each identity is a deterministic stack of
    three colored blocks (head/torso/legs), with a per-camera tint and
    per-image noise. Generation is byte-reproducible given the seed."""

    num_identities: int = 8
    images_per_identity: int = 12
    num_cameras: int = 2
    height: int = 96
    width: int = 32
    noise_level: float = 0.1
    seed: int = 7

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ValidationError(f"need at least 2 identities, got {self.num_identities}")
        if self.num_cameras < 2:
            raise ValidationError(f"need at least 2 cameras for cross-camera queries, got {self.num_cameras}")
        if self.images_per_identity < 3 * self.num_cameras:
            raise ValidationError(
                f"images_per_identity must be >= 3 per camera "
                f"({3 * self.num_cameras} total) so every (id, camera) group can "
                f"contribute train, query, and gallery images; got {self.images_per_identity}"
            )
        if not (0.0 <= self.noise_level <= 1.0):
            raise ValidationError(f"noise_level must be in [0, 1], got {self.noise_level}")
        if self.height < 3 or self.width < 1:
            raise ValidationError(f"image size {self.height}x{self.width} too small")


def _identity_blocks(spec: SyntheticSpec, pid: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0, pid])
    return rng.uniform(0.1, 0.9, size=(3, 3))  # 3 vertical blocks x RGB


def _camera_tint(spec: SyntheticSpec, cam: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1, cam])
    return rng.uniform(0.75, 1.25, size=(3,))


def _render(spec: SyntheticSpec, pid: int, cam: int, idx: int) -> np.ndarray:
    blocks = _identity_blocks(spec, pid) * _camera_tint(spec, cam)
    img = np.empty((spec.height, spec.width, 3), dtype=np.float64)
    third = spec.height // 3
    bounds = [0, third, 2 * third, spec.height]
    for b in range(3):
        img[bounds[b] : bounds[b + 1]] = blocks[b]
    if spec.noise_level > 0:
        rng = np.random.default_rng([spec.seed, 2, pid, cam, idx])
        img = img + spec.noise_level * rng.normal(0.0, 0.25, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out_root) -> dict[str, DatasetManifest]:
    """Write train/query/gallery splits under `out_root` and return their
    manifests. Per (identity, camera) group: 1 query image, half of the rest
    gallery, the remainder train; every query therefore has at least one
    cross-camera true match in the gallery."""
    spec.validate()
    out_root = Path(out_root)
    for split in SPLITS:
        (out_root / split).mkdir(parents=True, exist_ok=True)

    per_cam = [
        spec.images_per_identity // spec.num_cameras
        + (1 if c < spec.images_per_identity % spec.num_cameras else 0)
        for c in range(spec.num_cameras)
    ]
    for pid in range(spec.num_identities):
        for cam in range(spec.num_cameras):
            n = per_cam[cam]
            n_gallery = max(1, (n - 1) // 2)
            for idx in range(n):
                if idx == 0:
                    split = "query"
                elif idx <= n_gallery:
                    split = "gallery"
                else:
                    split = "train"
                name = f"{pid + 1:04d}_c{cam + 1}_{idx:04d}.png"
                Image.fromarray(_render(spec, pid, cam, idx)).save(out_root / split / name)

    manifests = {split: scan_reid_directory(out_root / split, split) for split in SPLITS}
    for split, manifest in manifests.items():
        write_manifest(manifest, out_root / f"{split}_manifest.jsonl")
    return manifests
