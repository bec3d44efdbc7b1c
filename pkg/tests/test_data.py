import hashlib
import os
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from treebranch import (
    Preprocess,
    SyntheticSpec,
    ValidationError,
    generate_synthetic,
    make_batches,
    read_manifest,
    scan_reid_directory,
    write_manifest,
)
from treebranch.data import BatchStream, parse_market_name


def _touch_image(path: Path, size=(8, 16)):
    Image.new("RGB", size, color=(10, 20, 30)).save(path)


def make_split_dir(tmp_path: Path, names: list[str]) -> Path:
    root = tmp_path / "split"
    root.mkdir()
    for name in names:
        _touch_image(root / name)
    return root


# ---------------------------------------------------------------------------
# scanning


def test_train_scan_densely_reindexes_identities(tmp_path):
    root = make_split_dir(tmp_path, ["0001_c1_f1.jpg", "0001_c2_f1.jpg", "0007_c1_f1.jpg"])
    manifest = scan_reid_directory(root, "train")
    assert manifest.num_identities == 2
    assert sorted({e.pid for e in manifest.entries}) == [0, 1]
    assert [e.camid for e in sorted(manifest.entries, key=lambda e: e.path)] == [1, 2, 1]


def test_train_scan_drops_distractors(tmp_path):
    root = make_split_dir(tmp_path, ["0001_c1_a.jpg", "-1_c3_x.jpg"])
    manifest = scan_reid_directory(root, "train")
    assert len(manifest) == 1
    assert manifest.num_identities == 1


def test_gallery_scan_keeps_distractors_flagged(tmp_path):
    root = make_split_dir(tmp_path, ["0001_c1_a.jpg", "-1_c3_x.jpg"])
    manifest = scan_reid_directory(root, "gallery")
    flags = {Path(e.path).name: e.distractor for e in manifest.entries}
    assert flags["-1_c3_x.jpg"] is True
    assert flags["0001_c1_a.jpg"] is False
    assert manifest.num_identities == 1  # distractors not counted


def test_unparseable_filenames_are_listed(tmp_path):
    root = make_split_dir(tmp_path, ["0001_c1_a.jpg", "portrait.jpg", "img042.png"])
    with pytest.raises(ValidationError) as err:
        scan_reid_directory(root, "train")
    assert "portrait.jpg" in str(err.value)
    assert "img042.png" in str(err.value)


def test_empty_split_raises(tmp_path):
    root = tmp_path / "empty"
    root.mkdir()
    with pytest.raises(ValidationError, match="no images"):
        scan_reid_directory(root, "train")


def test_missing_directory_raises(tmp_path):
    with pytest.raises(ValidationError, match="does not exist"):
        scan_reid_directory(tmp_path / "nope", "query")


def test_parse_market_name():
    assert parse_market_name("0042_c3_f000.jpg") == (42, 3)
    assert parse_market_name("-1_c12_junk.png") == (-1, 12)
    with pytest.raises(ValidationError):
        parse_market_name("selfie.png")


def test_manifest_jsonl_round_trip(tmp_path):
    root = make_split_dir(tmp_path, ["0001_c1_a.jpg", "0002_c2_b.jpg", "-1_c1_c.jpg"])
    manifest = scan_reid_directory(root, "gallery")
    out = tmp_path / "manifest.jsonl"
    write_manifest(manifest, out)
    loaded = read_manifest(out)
    assert loaded.split == manifest.split
    assert loaded.num_identities == manifest.num_identities
    assert [(e.path, e.pid, e.camid, e.distractor) for e in loaded.entries] == [
        (e.path, e.pid, e.camid, e.distractor) for e in manifest.entries
    ]


# ---------------------------------------------------------------------------
# batching


def small_manifest(tmp_path, count=10):
    names = [f"{i % 3 + 1:04d}_c{i % 2 + 1}_{i:03d}.jpg" for i in range(count)]
    root = make_split_dir(tmp_path, names)
    return scan_reid_directory(root, "train")


def test_batch_sizes_keep_partial_tail(tmp_path):
    manifest = small_manifest(tmp_path, 10)
    pre = Preprocess(height=32, width=16)
    sizes = [len(b) for b in make_batches(manifest, 4, seed=0, preprocess=pre)]
    assert sizes == [4, 4, 2]


def test_same_seed_same_epoch_is_deterministic(tmp_path):
    manifest = small_manifest(tmp_path, 10)
    pre = Preprocess(height=32, width=16)
    a = [b for b in make_batches(manifest, 4, seed=3, preprocess=pre, epoch=1)]
    b = [b for b in make_batches(manifest, 4, seed=3, preprocess=pre, epoch=1)]
    for x, y in zip(a, b):
        assert torch.equal(x.pixels, y.pixels)
        assert torch.equal(x.labels, y.labels)


def test_epochs_shuffle_differently(tmp_path):
    manifest = small_manifest(tmp_path, 10)
    pre = Preprocess(height=32, width=16, hflip=False)
    a = next(iter(make_batches(manifest, 10, seed=3, preprocess=pre, epoch=0)))
    b = next(iter(make_batches(manifest, 10, seed=3, preprocess=pre, epoch=1)))
    assert not torch.equal(a.labels, b.labels)


def test_resize_contract(tmp_path):
    root = tmp_path / "odd"
    root.mkdir()
    _touch_image(root / "0001_c1_a.jpg", size=(77, 131))  # arbitrary source size
    manifest = scan_reid_directory(root, "train")
    pre = Preprocess(height=384, width=128)
    batch = next(iter(make_batches(manifest, 1, seed=0, preprocess=pre)))
    assert tuple(batch.pixels.shape) == (1, 3, 384, 128)


def test_normalization_applies_mean_std(tmp_path):
    root = tmp_path / "gray"
    root.mkdir()
    Image.new("RGB", (16, 32), color=(128, 128, 128)).save(root / "0001_c1_a.jpg")
    manifest = scan_reid_directory(root, "train")
    pre = Preprocess(height=32, width=16, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), hflip=False)
    batch = next(iter(make_batches(manifest, 1, seed=0, preprocess=pre, augment=False)))
    expected = (128 / 255 - 0.5) / 0.25
    assert torch.allclose(batch.pixels, torch.full_like(batch.pixels, expected), atol=1e-6)


def test_flip_disabled_gives_raw_orientation(tmp_path):
    root = tmp_path / "asym"
    root.mkdir()
    arr = np.zeros((8, 8, 3), dtype=np.uint8)
    arr[:, :4] = 255  # left half white
    Image.fromarray(arr).save(root / "0001_c1_a.png")
    manifest = scan_reid_directory(root, "train")
    pre = Preprocess(height=8, width=8, mean=(0, 0, 0), std=(1, 1, 1), hflip=False)
    batch = next(iter(make_batches(manifest, 1, seed=0, preprocess=pre)))
    assert batch.pixels[0, 0, 0, 0] == 1.0
    assert batch.pixels[0, 0, 0, -1] == 0.0


def test_unreadable_image_error_names_the_file(tmp_path):
    root = tmp_path / "broken"
    root.mkdir()
    _touch_image(root / "0001_c1_a.jpg")
    (root / "0002_c1_b.jpg").write_bytes(b"not an image")
    manifest = scan_reid_directory(root, "train")
    pre = Preprocess(height=16, width=16)
    with pytest.raises(ValidationError, match="0002_c1_b.jpg"):
        for _ in make_batches(manifest, 2, seed=0, preprocess=pre):
            pass


def test_eval_batches_keep_manifest_order(tmp_path):
    manifest = small_manifest(tmp_path, 7)
    stream = BatchStream(manifest, Preprocess(height=16, width=16), augment=False)
    entries = [e for _, chunk in stream.eval_batches(3) for e in chunk]
    assert [e.path for e in entries] == [e.path for e in manifest.entries]


# ---------------------------------------------------------------------------
# synthetic generation


def _tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def test_synthetic_generation_is_byte_reproducible(tmp_path):
    spec = SyntheticSpec(num_identities=4, images_per_identity=6, seed=7)
    generate_synthetic(spec, tmp_path / "one")
    first = _tree_digest(tmp_path / "one")
    generate_synthetic(spec, tmp_path / "one")  # rerun over the same root
    assert _tree_digest(tmp_path / "one") == first
    # images are identical across roots too; manifests differ only in paths
    generate_synthetic(spec, tmp_path / "two")
    for png in sorted((tmp_path / "one").rglob("*.png")):
        twin = tmp_path / "two" / png.relative_to(tmp_path / "one")
        assert png.read_bytes() == twin.read_bytes()


def test_zero_noise_makes_same_camera_images_identical(tmp_path):
    spec = SyntheticSpec(num_identities=2, images_per_identity=6, noise_level=0.0)
    manifests = generate_synthetic(spec, tmp_path / "clean")
    by_group: dict[tuple[int, int], list[bytes]] = {}
    for manifest in manifests.values():
        for entry in manifest.entries:
            pid, cam = parse_market_name(entry.path)
            by_group.setdefault((pid, cam), []).append(Path(entry.path).read_bytes())
    for blobs in by_group.values():
        assert all(b == blobs[0] for b in blobs)


def test_every_query_has_a_cross_camera_match(tmp_path):
    spec = SyntheticSpec(num_identities=5, images_per_identity=6)
    manifests = generate_synthetic(spec, tmp_path / "synthetic")
    gallery = manifests["gallery"]
    for q in manifests["query"].entries:
        matches = [
            g
            for g in gallery.entries
            if g.pid == q.pid and g.camid != q.camid and not g.distractor
        ]
        assert matches, f"query {q.path} has no cross-camera match"


def test_train_labels_are_dense(tmp_path):
    spec = SyntheticSpec(num_identities=6, images_per_identity=6)
    manifests = generate_synthetic(spec, tmp_path / "dense")
    labels = sorted({e.pid for e in manifests["train"].entries})
    assert labels == list(range(6))


def test_query_and_gallery_paths_are_disjoint(tmp_path):
    spec = SyntheticSpec(num_identities=3, images_per_identity=6)
    manifests = generate_synthetic(spec, tmp_path / "splits")
    query_paths = {e.path for e in manifests["query"].entries}
    gallery_paths = {e.path for e in manifests["gallery"].entries}
    assert not query_paths & gallery_paths


def test_synthetic_spec_validation():
    with pytest.raises(ValidationError):
        SyntheticSpec(num_identities=1).validate()
    with pytest.raises(ValidationError):
        SyntheticSpec(images_per_identity=4, num_cameras=2).validate()
    with pytest.raises(ValidationError):
        SyntheticSpec(noise_level=2.0).validate()


MARKET_ROOT = Path(os.environ.get("MARKET1501_ROOT", "/data/Market-1501"))


@pytest.mark.skipif(
    not (MARKET_ROOT / "bounding_box_train").is_dir(),
    reason="Market-1501 dataset not present (set MARKET1501_ROOT to enable)",
)
def test_market1501_train_split_counts():
    manifest = scan_reid_directory(MARKET_ROOT / "bounding_box_train", "train")
    assert len(manifest) == 12936
    assert manifest.num_identities == 751
