"""Procedural land-cover corpora for desk-scale tests.

Each tile is a Voronoi partition of the grid; every cell gets a class and
pixels are drawn from that class's Gaussian band signature, so the class is
recoverable from radiometry alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tilefile
from .data import NUM_BANDS, SPLITS, TILE_SIZE, Manifest, ManifestRecord, Tile
from .taxonomy import DROPPED, NUM_CLASSES, ClassTaxonomy

# Mean reflectance counts per class (red, green, blue, nir).
DEFAULT_SIGNATURES = np.array([
    [600, 800, 1000, 300],     # open water
    [2600, 2500, 2400, 2800],  # developed
    [400, 800, 500, 4200],     # forest
    [1400, 1800, 1100, 3000],  # grass
    [2000, 2600, 1700, 5200],  # pasture
    [3400, 2200, 1600, 1800],  # cultivated
], dtype=np.float64)
DEFAULT_NOISE = 150.0

TRAIN_REGION = "synth-north"
TEST_REGION = "synth-south"


@dataclass
class SynthParams:
    n_seeds: int = 6
    size: int = TILE_SIZE
    means: np.ndarray | None = None
    covariances: np.ndarray | None = None  # (C, 4, 4); defaults to isotropic noise
    noise: float = DEFAULT_NOISE

    def validate(self):
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.size < 1 or self.n_seeds > self.size * self.size:
            raise ValueError(f"cannot place {self.n_seeds} distinct seeds on a {self.size}x{self.size} grid")
        if self.means is not None and np.shape(self.means) != (NUM_CLASSES, NUM_BANDS):
            raise ValueError(f"means must have shape ({NUM_CLASSES}, {NUM_BANDS})")
        if self.covariances is not None and np.shape(self.covariances) != (NUM_CLASSES, NUM_BANDS, NUM_BANDS):
            raise ValueError(f"covariances must have shape ({NUM_CLASSES}, {NUM_BANDS}, {NUM_BANDS})")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def voronoi_cells(rng: np.random.Generator, size: int, n_seeds: int) -> np.ndarray:
    """Index of the nearest seed for every pixel (ties go to the lower index)."""
    flat = rng.choice(size * size, size=n_seeds, replace=False)
    sy, sx = np.divmod(flat, size)
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy[None] - sy[:, None, None]) ** 2 + (xx[None] - sx[:, None, None]) ** 2
    return np.argmin(d2, axis=0)


def cell_classes(rng: np.random.Generator, n_seeds: int, anchor: int) -> np.ndarray:
    """Random class per cell; cells 0 and 1 get two different classes."""
    classes = rng.integers(0, NUM_CLASSES, size=n_seeds)
    classes[0] = anchor % NUM_CLASSES
    if n_seeds > 1:
        classes[1] = (classes[0] + 1 + rng.integers(0, NUM_CLASSES - 1)) % NUM_CLASSES
    return classes


def render_image(rng: np.random.Generator, labels: np.ndarray, params: SynthParams) -> np.ndarray:
    means = DEFAULT_SIGNATURES if params.means is None else np.asarray(params.means, dtype=np.float64)
    h, w = labels.shape
    if params.covariances is None:
        noise = rng.normal(0.0, params.noise, size=(h, w, NUM_BANDS))
    else:
        chol = np.linalg.cholesky(np.asarray(params.covariances, dtype=np.float64))
        z = rng.standard_normal(size=(h, w, NUM_BANDS))
        noise = np.einsum("hwij,hwj->hwi", chol[labels], z)
    pixels = means[labels] + noise
    return np.clip(np.rint(pixels), 0, 65535).astype(np.uint16).transpose(2, 0, 1)


def _split_plan(n_tiles: int, split_counts: dict[str, int] | None) -> list[str]:
    if split_counts is None:
        n_test = n_tiles // 5
        n_val = n_tiles // 5
        split_counts = {"train": n_tiles - n_val - n_test, "validation": n_val, "test": n_test}
    unknown = set(split_counts) - set(SPLITS)
    if unknown:
        raise ValueError(f"unknown splits {sorted(unknown)}")
    if sum(split_counts.values()) != n_tiles:
        raise ValueError(f"split counts {split_counts} do not sum to n_tiles={n_tiles}")
    return [s for s in SPLITS for _ in range(split_counts.get(s, 0))]


def synth_corpus(seed: int, n_tiles: int, params: SynthParams | None = None,
                 split_counts: dict[str, int] | None = None,
                 out_dir: str | Path | None = None) -> tuple[list[Tile], Manifest]:
    """Generate ``n_tiles`` labelled tiles, deterministically from ``seed``.

    Train and validation tiles share one region tag, test tiles another.
    When ``out_dir`` is given, tiles and ``manifest.jsonl`` are written there.
    """
    if n_tiles < 1:
        raise ValueError("n_tiles must be >= 1")
    params = params or SynthParams()
    params.validate()
    plan = _split_plan(n_tiles, split_counts)
    root = np.random.SeedSequence(seed)
    tiles = []
    for i, (split, child) in enumerate(zip(plan, root.spawn(n_tiles))):
        rng = np.random.default_rng(child)
        cells = voronoi_cells(rng, params.size, params.n_seeds)
        labels = cell_classes(rng, params.n_seeds, anchor=i)[cells].astype(np.uint8)
        image = render_image(rng, labels, params)
        region = TEST_REGION if split == "test" else TRAIN_REGION
        tiles.append(Tile(image, labels, region, split, f"synth_{seed}_{i:04d}"))

    records = []
    base = Path(out_dir) if out_dir is not None else Path(".")
    if out_dir is not None:
        (base / "tiles").mkdir(parents=True, exist_ok=True)
    for t in tiles:
        img = base / "tiles" / f"{t.name}.img.lct"
        lbl = base / "tiles" / f"{t.name}.lbl.lct"
        if out_dir is not None:
            tilefile.write(img, t.image)
            tilefile.write(lbl, t.labels)
        records.append(ManifestRecord(img, lbl, t.region, t.split))
    manifest = Manifest(records, base)
    if out_dir is not None:
        manifest.write(base / "manifest.jsonl")
    return tiles, manifest


def synth_scenes(seed: int, n_scenes: int, taxonomy: ClassTaxonomy, out_dir: str | Path,
                 scene_tiles: int = 2, label_factor: int = 1, n_seeds: int = 12,
                 dropped_prob: float = 0.25, split_counts: dict[str, int] | None = None,
                 noise: float = DEFAULT_NOISE) -> Manifest:
    """Write raw scenes labelled in source-legend codes, for ``prepare``.

    Scenes are ``scene_tiles * 256`` pixels square. Labels are stored on a grid
    ``label_factor`` times coarser than the image. With probability
    ``dropped_prob`` a scene cell carries a dropped-class code.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    size = scene_tiles * TILE_SIZE
    if size % label_factor:
        raise ValueError(f"scene size {size} is not divisible by label_factor {label_factor}")
    coarse = size // label_factor
    by_target: dict[int, list[int]] = {}
    for code, target in sorted(taxonomy.remap.items()):
        by_target.setdefault(target, []).append(code)
    dropped_codes = by_target.get(DROPPED, [])
    plan = _split_plan(n_scenes, split_counts)
    out_dir = Path(out_dir)
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
    params = SynthParams(n_seeds=n_seeds, size=coarse, noise=noise)
    params.validate()
    records = []
    for i, (split, child) in enumerate(zip(plan, np.random.SeedSequence(seed).spawn(n_scenes))):
        rng = np.random.default_rng(child)
        cells = voronoi_cells(rng, coarse, n_seeds)
        targets = cell_classes(rng, n_seeds, anchor=i)
        codes = np.array([rng.choice(by_target[int(t)]) for t in targets])
        if dropped_codes:
            hit = rng.random(n_seeds) < dropped_prob
            hit[:2] = False
            codes[hit] = rng.choice(dropped_codes, size=int(hit.sum()))
        raw = codes[cells]
        targets_full = np.repeat(np.repeat(targets[cells], label_factor, 0), label_factor, 1)
        image = render_image(rng, targets_full, params)
        name = f"scene_{seed}_{i:03d}"
        img, lbl = out_dir / "scenes" / f"{name}.img.lct", out_dir / "scenes" / f"{name}.lbl.lct"
        tilefile.write(img, image)
        tilefile.write(lbl, raw.astype(np.uint8 if raw.max() < 256 else np.uint16))
        region = TEST_REGION if split == "test" else TRAIN_REGION
        records.append(ManifestRecord(img, lbl, region, split))
    manifest = Manifest(records, out_dir)
    manifest.write(out_dir / "scenes.jsonl")
    return manifest


def nearest_mean_accuracy(tiles: Sequence[Tile], means: np.ndarray | None = None) -> float:
    """Pixel accuracy of classifying each pixel by its nearest class mean."""
    means = DEFAULT_SIGNATURES if means is None else np.asarray(means, dtype=np.float64)
    correct = total = 0
    for t in tiles:
        px = t.image.reshape(NUM_BANDS, -1).T.astype(np.float64)
        d = ((px[:, None, :] - means[None]) ** 2).sum(-1)
        correct += int((d.argmin(1) == t.labels.ravel()).sum())
        total += px.shape[0]
    return correct / total
