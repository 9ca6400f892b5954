"""Land-cover class schema: source legend remapping, class weights, colors.

The default schema merges the 16-class NLCD legend into six target classes
(Open Water, Developed, Forest, Grass, Pasture, Cultivated) and marks the
rare classes (barren land, wetlands, ice/snow) as dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import yaml

from .errors import DegenerateWeightsError, LegendError

NUM_CLASSES = 6
DROPPED = -1

CLASS_NAMES = ("Open Water", "Developed", "Forest", "Grass", "Pasture", "Cultivated")


@dataclass(frozen=True)
class TargetClass:
    id: int
    name: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ClassTaxonomy:
    """Mapping from a source legend onto the six target classes.

    ``remap`` is total over ``source_legend``: each code maps to a target id
    or to :data:`DROPPED`.
    """

    target_classes: tuple[TargetClass, ...]
    remap: Mapping[int, int]
    source_legend: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.target_classes) != NUM_CLASSES:
            raise ValueError(f"expected {NUM_CLASSES} target classes, got {len(self.target_classes)}")
        ids = [c.id for c in self.target_classes]
        if ids != list(range(NUM_CLASSES)):
            raise ValueError(f"target class ids must be 0..{NUM_CLASSES - 1} in order, got {ids}")
        for code, target in self.remap.items():
            if target != DROPPED and not 0 <= target < NUM_CLASSES:
                raise ValueError(f"source code {code} maps to invalid target {target}")
        if self.source_legend and set(self.source_legend) != set(self.remap):
            missing = sorted(set(self.source_legend) - set(self.remap))
            extra = sorted(set(self.remap) - set(self.source_legend))
            raise LegendError(f"remap is not total over the legend (unmapped {missing}, unknown {extra})")
        colors = [c.color for c in self.target_classes]
        if len(set(colors)) != NUM_CLASSES:
            raise ValueError("colormap must assign a distinct color to every class")

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.target_classes]

    @property
    def dropped_classes(self) -> frozenset[int]:
        return frozenset(code for code, t in self.remap.items() if t == DROPPED)

    @property
    def colormap(self) -> dict[int, tuple[int, int, int]]:
        return {c.id: c.color for c in self.target_classes}

    def remap_label(self, code: int) -> int:
        """Return the target id for a source code, or ``DROPPED``."""
        try:
            return self.remap[int(code)]
        except KeyError:
            raise LegendError(f"source code {code} is not in the legend") from None

    def lookup_table(self) -> np.ndarray:
        """Dense LUT indexed by source code; unknown codes hold ``-2``."""
        lut = np.full(max(self.remap) + 1, -2, dtype=np.int16)
        for code, target in self.remap.items():
            lut[code] = target
        return lut

    def remap_array(self, raw: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`remap_label`; dropped pixels come back as ``DROPPED``."""
        raw = np.asarray(raw)
        lut = self.lookup_table()
        if raw.size and (raw.min() < 0 or raw.max() >= lut.size):
            bad = raw[(raw < 0) | (raw >= lut.size)]
            raise LegendError(f"source code {int(bad.flat[0])} is not in the legend")
        out = lut[raw]
        if (out == -2).any():
            raise LegendError(f"source code {int(raw[out == -2].flat[0])} is not in the legend")
        return out

    def class_color(self, class_id: int) -> tuple[int, int, int]:
        if not 0 <= class_id < NUM_CLASSES:
            raise ValueError(f"class id {class_id} out of range 0..{NUM_CLASSES - 1}")
        return self.target_classes[class_id].color

    def to_dict(self) -> dict:
        names = {c.id: c.name for c in self.target_classes}
        return {
            "target_classes": [
                {"id": c.id, "name": c.name, "color": list(c.color)} for c in self.target_classes
            ],
            "source_legend": dict(self.source_legend),
            "remap": {code: names[t] for code, t in self.remap.items() if t != DROPPED},
            "dropped": sorted(self.dropped_classes),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ClassTaxonomy":
        targets = tuple(
            TargetClass(int(c["id"]), str(c["name"]), tuple(int(v) for v in c["color"]))
            for c in doc["target_classes"]
        )
        by_name = {t.name: t.id for t in targets}
        remap: dict[int, int] = {}
        for code, target in (doc.get("remap") or {}).items():
            if isinstance(target, str):
                if target not in by_name:
                    raise ValueError(f"remap target {target!r} is not a target class")
                target = by_name[target]
            remap[int(code)] = int(target)
        for code in doc.get("dropped") or ():
            if int(code) in remap:
                raise ValueError(f"source code {code} is both remapped and dropped")
            remap[int(code)] = DROPPED
        legend = {int(k): str(v) for k, v in (doc.get("source_legend") or {}).items()}
        return cls(targets, remap, legend)


def load_taxonomy(path: str | Path | None = None) -> ClassTaxonomy:
    """Load a taxonomy file; ``None`` gives the bundled NLCD default."""
    if path is None:
        text = resources.files("landcover_cgan.resources").joinpath("taxonomy.yaml").read_text()
    else:
        text = Path(path).read_text()
    return ClassTaxonomy.from_dict(yaml.safe_load(text))


def default_taxonomy() -> ClassTaxonomy:
    return load_taxonomy(None)


@dataclass(frozen=True)
class ClassWeights:
    """Per-class pixel fractions of the training split.

    Losses weight class ``c`` by ``1 / w[c]``, so every entry must be positive.
    """

    w: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size < 2:
            raise DegenerateWeightsError(f"weights must be a vector of >= 2 fractions, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            zero = [i for i, v in enumerate(w) if not v > 0]
            raise DegenerateWeightsError(f"classes {zero} have non-positive weight; 1/w is undefined")
        if abs(w.sum() - 1.0) > 1e-9:
            raise DegenerateWeightsError(f"weights must sum to 1, got {w.sum()!r}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.w, dtype=np.float64)

    @property
    def inverse(self) -> np.ndarray:
        return 1.0 / self.as_array()

    def __len__(self):
        return len(self.w)


def class_pixel_counts(labels: Iterable[np.ndarray], num_classes: int = NUM_CLASSES) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for lab in labels:
        lab = np.asarray(lab)
        if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
            raise ValueError(f"label values must lie in 0..{num_classes - 1}")
        counts += np.bincount(lab.ravel(), minlength=num_classes)
    return counts


def compute_class_weights(labels: Iterable[np.ndarray], num_classes: int = NUM_CLASSES) -> ClassWeights:
    """Pixel share of each class over a set of remapped label maps.

    Raises:
        DegenerateWeightsError: if any class has no pixels.
    """
    counts = class_pixel_counts(labels, num_classes)
    if counts.sum() == 0:
        raise DegenerateWeightsError("no labelled pixels")
    missing = np.flatnonzero(counts == 0).tolist()
    if missing:
        raise DegenerateWeightsError(f"classes {missing} have zero pixels; 1/w_c is undefined")
    return ClassWeights(tuple((counts / counts.sum()).tolist()))
