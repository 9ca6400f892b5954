"""Tile corpus handling: manifests, filtering, normalisation, batching, statistics."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import yaml

from . import tilefile
from .errors import LegendError, ManifestError, ShapeError
from .taxonomy import DROPPED, NUM_CLASSES, ClassTaxonomy

log = logging.getLogger(__name__)

TILE_SIZE = 256
NUM_BANDS = 4
BAND_NAMES = ("red", "green", "blue", "nir")
SPLITS = ("train", "validation", "test")
REFLECTANCE_SCALE = 10000.0

# stable per-split stream ids for the batch-order PRNG
_SPLIT_STREAM = {"train": 1, "validation": 2, "test": 3}


@dataclass
class Tile:
    image: np.ndarray  # (4, H, W) uint16 reflectance counts
    labels: np.ndarray  # (H, W) target class ids
    region: str = ""
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != NUM_BANDS:
            raise ShapeError(f"tile image must be ({NUM_BANDS}, H, W), got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise ShapeError(f"label shape {self.labels.shape} does not match image {self.image.shape[1:]}")


@dataclass(frozen=True)
class ManifestRecord:
    image: Path
    label: Path
    region: str
    split: str

    @property
    def name(self) -> str:
        stem = self.image.name
        for suffix in (".img.lct", ".lct"):
            if stem.endswith(suffix):
                return stem[: -len(suffix)]
        return stem


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        validate_records(self.records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> list[ManifestRecord]:
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == name]

    def regions(self, *splits: str) -> set[str]:
        return {r.region for r in self.records if r.split in splits}

    def write(self, path: str | Path) -> None:
        path = Path(path)
        base = path.parent.resolve()
        lines = []
        for r in self.records:
            lines.append(json.dumps({
                "image": _relpath(r.image, base),
                "label": _relpath(r.label, base),
                "region": r.region,
                "split": r.split,
            }))
        path.write_text("".join(line + "\n" for line in lines))


def _relpath(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base))
    except ValueError:
        return str(Path(p).resolve())


def validate_records(records: Sequence[ManifestRecord]) -> None:
    seen: set[Path] = set()
    for r in records:
        if r.split not in SPLITS:
            raise ManifestError(f"record {r.image}: split {r.split!r} not in {SPLITS}")
        for p in (r.image, r.label):
            key = Path(p).resolve()
            if key in seen:
                raise ManifestError(f"duplicate path in manifest: {p}")
            seen.add(key)
    fit_regions = {r.region for r in records if r.split in ("train", "validation")}
    test_regions = {r.region for r in records if r.split == "test"}
    leaked = sorted(fit_regions & test_regions)
    if leaked:
        raise ManifestError(f"regions {leaked} appear in both train/validation and test splits")


def load_manifest(path: str | Path) -> Manifest:
    """Parse a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    root = path.parent
    records = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc.strerror}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            doc = json.loads(line)
            records.append(ManifestRecord(
                image=root / doc["image"],
                label=root / doc["label"],
                region=str(doc["region"]),
                split=str(doc["split"]),
            ))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return Manifest(records, root)


def load_tile(record: ManifestRecord) -> Tile:
    image = tilefile.read(record.image)
    labels = tilefile.read(record.label)
    if labels.size and labels.max() >= NUM_CLASSES:
        raise LegendError(f"{record.label}: label value {int(labels.max())} outside 0..{NUM_CLASSES - 1}")
    return Tile(image, labels, record.region, record.split, record.name)


def filter_tile(raw_labels: np.ndarray, taxonomy: ClassTaxonomy, threshold: float = 0.0) -> bool:
    """Keep a tile unless its share of dropped-class pixels exceeds ``threshold``."""
    remapped = taxonomy.remap_array(raw_labels)
    frac = float(np.mean(remapped == DROPPED)) if remapped.size else 0.0
    return frac <= threshold


def fill_dropped(labels: np.ndarray) -> np.ndarray:
    """Relabel ``DROPPED`` pixels with the class of the nearest kept pixel."""
    from scipy import ndimage

    mask = labels == DROPPED
    if not mask.any():
        return labels
    if mask.all():
        raise LegendError("tile has no kept-class pixels")
    _, (iy, ix) = ndimage.distance_transform_edt(mask, return_indices=True)
    return labels[iy, ix]


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """Map reflectance counts to [-1, 1]: ``clip(v / 10000, 0, 1) * 2 - 1``."""
    v = np.asarray(raw, dtype=np.float32) / np.float32(REFLECTANCE_SCALE)
    return np.clip(v, 0.0, 1.0) * 2.0 - 1.0


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """``(..., H, W)`` class ids -> ``(..., C, H, W)`` float32 one-hot mask."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in 0..{num_classes - 1}")
    classes = np.arange(num_classes).reshape(num_classes, 1, 1)
    return (labels[..., None, :, :] == classes).astype(np.float32)


def upsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling by an integer factor."""
    if factor == 1:
        return labels
    return np.repeat(np.repeat(labels, factor, axis=0), factor, axis=1)


@dataclass
class DistributionReport:
    fractions: dict[str, list[float]]
    tile_counts: dict[str, int]
    pixel_counts: dict[str, list[int]]
    class_names: list[str]

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "tile_counts": dict(self.tile_counts),
            "pixel_counts": {k: list(v) for k, v in self.pixel_counts.items()},
            "fractions": {k: list(v) for k, v in self.fractions.items()},
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def plot(self, path: str | Path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        splits = [s for s in SPLITS if s in self.fractions]
        x = np.arange(len(self.class_names))
        width = 0.8 / max(len(splits), 1)
        fig, ax = plt.subplots(figsize=(8, 4))
        for i, s in enumerate(splits):
            ax.bar(x + i * width, np.asarray(self.fractions[s]) * 100, width, label=f"{s} ({self.tile_counts[s]})")
        ax.set_xticks(x + width * (len(splits) - 1) / 2, self.class_names)
        ax.set_ylabel("pixels (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def distribution(manifest: Manifest, taxonomy: ClassTaxonomy | None = None) -> DistributionReport:
    """Exact per-split class pixel fractions and tile counts."""
    names = taxonomy.class_names if taxonomy is not None else [str(i) for i in range(NUM_CLASSES)]
    counts = {s: np.zeros(NUM_CLASSES, dtype=np.int64) for s in SPLITS}
    tiles = Counter(r.split for r in manifest)
    for r in manifest:
        labels = tilefile.read(r.label)
        counts[r.split] += np.bincount(labels.ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES]
    fractions = {s: (c / c.sum()).tolist() for s, c in counts.items() if c.sum() > 0}
    return DistributionReport(
        fractions=fractions,
        tile_counts={s: tiles.get(s, 0) for s in SPLITS},
        pixel_counts={s: c.tolist() for s, c in counts.items()},
        class_names=list(names),
    )


def batch_order(n: int, seed: int, epoch: int, split: str = "train", shuffle: bool = True) -> np.ndarray:
    """Tile order for one epoch; a pure function of ``(seed, split, epoch)``."""
    if not shuffle:
        return np.arange(n)
    ss = np.random.SeedSequence([seed, _SPLIT_STREAM[split], epoch])
    return np.random.default_rng(ss).permutation(n)


class TileDataset:
    """Records of one split, loaded on demand and optionally cached in memory."""

    def __init__(self, records: Sequence[ManifestRecord], cache: bool = True):
        self.records = list(records)
        self._cache: dict[int, Tile] | None = {} if cache else None

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx: int) -> Tile:
        if self._cache is not None and idx in self._cache:
            return self._cache[idx]
        tile = load_tile(self.records[idx])
        if tile.image.shape[1:] != (TILE_SIZE, TILE_SIZE):
            raise ShapeError(f"{self.records[idx].image}: tiles must be {TILE_SIZE}x{TILE_SIZE}")
        if self._cache is not None:
            self._cache[idx] = tile
        return tile

    def labels(self) -> Iterator[np.ndarray]:
        for i in range(len(self)):
            yield self[i].labels

    def batches(self, batch_size: int, seed: int = 0, epoch: int = 0, split: str = "train",
                shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray, list[str]]]:
        """Yield ``(images in [-1, 1], labels, tile names)`` per batch."""
        order = batch_order(len(self), seed, epoch, split, shuffle)
        for start in range(0, len(order), batch_size):
            tiles = [self[int(i)] for i in order[start:start + batch_size]]
            images = np.stack([normalize_image(t.image) for t in tiles])
            labels = np.stack([t.labels.astype(np.int64) for t in tiles])
            yield images, labels, [t.name for t in tiles]


@dataclass
class PrepareResult:
    manifest: Manifest
    manifest_path: Path
    kept: int
    dropped: int
    report: DistributionReport


def iter_windows(height: int, width: int, size: int, stride: int) -> Iterable[tuple[int, int]]:
    for y in range(0, height - size + 1, stride):
        for x in range(0, width - size + 1, stride):
            yield y, x


def prepare_corpus(scene_manifest: Manifest, taxonomy: ClassTaxonomy, out_dir: str | Path,
                   stride: int = TILE_SIZE, threshold: float = 0.0, plot: bool = True) -> PrepareResult:
    """Cut scenes into remapped, filtered 256x256 tiles and write a manifest.

    Scene labels are in source-legend codes, either on the image grid or on a
    coarser grid whose integer factor is upsampled by nearest neighbour.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    out_dir = Path(out_dir)
    tile_dir = out_dir / "tiles"
    tile_dir.mkdir(parents=True, exist_ok=True)
    records: list[ManifestRecord] = []
    kept = dropped = 0
    for scene in scene_manifest:
        image = tilefile.read(scene.image)
        raw = tilefile.read(scene.label)
        if image.ndim != 3 or image.shape[0] != NUM_BANDS:
            raise ShapeError(f"{scene.image}: expected {NUM_BANDS}-band image, got shape {image.shape}")
        h, w = image.shape[1:]
        if raw.shape != (h, w):
            fy, ry = divmod(h, raw.shape[0])
            fx, rx = divmod(w, raw.shape[1])
            if ry or rx or fy != fx:
                raise ShapeError(f"{scene.label}: label grid {raw.shape} is not an integer downsampling of {(h, w)}")
            raw = upsample_labels(raw, fy)
        for y, x in iter_windows(h, w, TILE_SIZE, stride):
            raw_tile = raw[y:y + TILE_SIZE, x:x + TILE_SIZE]
            if not filter_tile(raw_tile, taxonomy, threshold):
                dropped += 1
                continue
            labels = fill_dropped(taxonomy.remap_array(raw_tile)).astype(np.uint8)
            name = f"{scene.name}_{y:05d}_{x:05d}"
            img_path = tile_dir / f"{name}.img.lct"
            lbl_path = tile_dir / f"{name}.lbl.lct"
            tilefile.write(img_path, np.ascontiguousarray(image[:, y:y + TILE_SIZE, x:x + TILE_SIZE]))
            tilefile.write(lbl_path, labels)
            records.append(ManifestRecord(img_path, lbl_path, scene.region, scene.split))
            kept += 1
    log.info("prepared %d tiles, dropped %d tiles with excluded classes", kept, dropped)
    if not records:
        raise ManifestError("no tiles produced")
    manifest = Manifest(records, out_dir)
    manifest_path = out_dir / "manifest.jsonl"
    manifest.write(manifest_path)
    report = distribution(manifest, taxonomy)
    report.write(out_dir / "distribution.yaml")
    if plot:
        report.plot(out_dir / "distribution.png")
    return PrepareResult(manifest, manifest_path, kept, dropped, report)
