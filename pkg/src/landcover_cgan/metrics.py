"""Per-class F1 evaluation, report serialisation, and colour rendering."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .taxonomy import CLASS_NAMES, NUM_CLASSES


def decode(soft) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties resolve to the lowest class id.

    Accepts ``(C, H, W)`` or ``(N, C, H, W)`` arrays or tensors.
    """
    if hasattr(soft, "detach"):
        soft = soft.detach().cpu().numpy()
    soft = np.asarray(soft)
    axis = soft.ndim - 3
    return np.argmax(soft, axis=axis).astype(np.uint8)  # first maximum wins


def confusion(pred, true, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Entry ``(i, j)`` counts pixels with true class ``i`` predicted as ``j``."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth {true.shape}")
    idx = true.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


class ConfusionAccumulator:
    def __init__(self, num_classes: int = NUM_CLASSES):
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.num_classes = num_classes
        self.tiles = 0
        self.tile_macro: list[float] = []

    def update(self, pred, true):
        cm = confusion(pred, true, self.num_classes)
        self.matrix += cm
        self.tiles += 1 if np.ndim(true) == 2 else np.shape(true)[0]
        if np.ndim(true) == 2:
            self.tile_macro.append(float(np.mean(f1_from_confusion(cm)[0])))
        else:
            for p, t in zip(pred, true):
                self.tile_macro.append(float(np.mean(f1_from_confusion(confusion(p, t, self.num_classes))[0])))


def f1_from_confusion(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[int]]:
    """Per-class ``(F1 x 100, precision, recall, undefined-class ids)``.

    F1 is 0 wherever TP+FP, TP+FN or P+R is zero; those classes are listed.
    """
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    n = cm.shape[0]
    precision = np.zeros(n)
    recall = np.zeros(n)
    f1 = np.zeros(n)
    undefined = []
    for c in range(n):
        if tp[c] + fp[c] == 0 or tp[c] + fn[c] == 0:
            undefined.append(c)
            continue
        precision[c] = tp[c] / (tp[c] + fp[c])
        recall[c] = tp[c] / (tp[c] + fn[c])
        if precision[c] + recall[c] == 0:
            undefined.append(c)
            continue
        f1[c] = 100.0 * 2 * precision[c] * recall[c] / (precision[c] + recall[c])
    return f1, precision, recall, undefined


@dataclass
class MetricsReport:
    f1: list[float]
    precision: list[float]
    recall: list[float]
    confusion: list[list[int]]
    support: list[int]
    undefined: list[str] = field(default_factory=list)
    split: str = ""
    model: str = ""
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))
    tiles: int = 0
    per_tile_macro_f1: float | None = None  # mean over tiles of per-tile macro F1 (x100)

    @property
    def macro_f1(self) -> float:
        """Unweighted mean of the per-class F1 scores, as a fraction."""
        return float(np.mean(self.f1)) / 100.0

    @property
    def pixels(self) -> int:
        return int(np.sum(self.confusion))

    @classmethod
    def from_confusion(cls, cm: np.ndarray, split: str = "", model: str = "",
                       class_names: Sequence[str] | None = None, tiles: int = 0,
                       per_tile_macro_f1: float | None = None) -> "MetricsReport":
        cm = np.asarray(cm, dtype=np.int64)
        if cm.sum() == 0:
            raise ValueError("cannot build a metrics report from zero pixels")
        names = list(class_names) if class_names is not None else list(CLASS_NAMES)
        f1, p, r, undefined = f1_from_confusion(cm)
        return cls(
            f1=f1.tolist(), precision=p.tolist(), recall=r.tolist(), confusion=cm.tolist(),
            support=cm.sum(axis=1).tolist(), undefined=[names[c] for c in undefined],
            split=split, model=model, class_names=names, tiles=tiles,
            per_tile_macro_f1=per_tile_macro_f1,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["macro_f1"] = self.macro_f1
        return d

    @classmethod
    def from_dict(cls, doc: Mapping) -> "MetricsReport":
        doc = dict(doc)
        doc.pop("macro_f1", None)
        doc.pop("table", None)
        return cls(**doc)


def f1_scores(pred: Iterable, true: Iterable, split: str = "", model: str = "",
              class_names: Sequence[str] | None = None) -> MetricsReport:
    """Pixel-pooled per-class F1 over every (prediction, truth) map pair."""
    acc = ConfusionAccumulator()
    for p, t in zip(pred, true, strict=True):
        acc.update(p, t)
    if acc.tiles == 0:
        raise ValueError("empty prediction set")
    return MetricsReport.from_confusion(acc.matrix, split, model, class_names, acc.tiles,
                                        100.0 * float(np.mean(acc.tile_macro)))


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Plain-text table: one row per (split, model), classes as columns, 3 decimals."""
    if not reports:
        raise ValueError("no reports to tabulate")
    names = reports[0].class_names
    header = ["Set", "Architecture", *names]
    rows = [[r.split.capitalize(), r.model.upper(), *(f"{v:.3f}" for v in r.f1)] for r in reports]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).rjust(w) if i > 1 else str(c).ljust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    rule = "-" * len(line(header))
    return "\n".join([rule, line(header), rule, *(line(r) for r in rows), rule]) + "\n"


def report_emit(report: MetricsReport) -> str:
    """Serialise a report as JSON, including its formatted table row."""
    if report.pixels == 0 or report.tiles == 0:
        raise ValueError("refusing to emit a report over an empty prediction set")
    doc = report.to_dict()
    doc["table"] = format_table([report])
    return json.dumps(doc, indent=2)


def report_parse(text: str) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(text))


# rendering

def colormap_lut(colormap: Mapping[int, Sequence[int]], num_classes: int = NUM_CLASSES) -> np.ndarray:
    missing = [c for c in range(num_classes) if c not in colormap]
    if missing:
        raise KeyError(f"colormap has no entry for classes {missing}")
    return np.array([colormap[c] for c in range(num_classes)], dtype=np.uint8)


def render(class_map, colormap: Mapping[int, Sequence[int]]) -> np.ndarray:
    """``(H, W)`` class ids -> ``(H, W, 3)`` uint8 colours."""
    class_map = np.asarray(class_map)
    n = NUM_CLASSES
    if class_map.size:
        n = max(n, int(class_map.max()) + 1)
    return colormap_lut(colormap, n)[class_map]


def inverse_render(rgb: np.ndarray, colormap: Mapping[int, Sequence[int]]) -> np.ndarray:
    """Recover class ids from a rendered image; unknown colours raise."""
    lut = colormap_lut(colormap)
    keys = lut.astype(np.int64) @ np.array([65536, 256, 1])
    flat = np.asarray(rgb).astype(np.int64).reshape(-1, 3) @ np.array([65536, 256, 1])
    order = np.argsort(keys)
    pos = np.searchsorted(keys[order], flat)
    pos = np.clip(pos, 0, len(keys) - 1)
    found = keys[order][pos] == flat
    if not found.all():
        raise ValueError("image contains colours outside the colormap")
    return order[pos].reshape(np.shape(rgb)[:2]).astype(np.uint8)


def _stretch(band: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(band, (2, 98))
    if hi <= lo:
        hi = lo + 1
    return (np.clip((band - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)


def composite(image: np.ndarray, truth, predictions: Sequence, colormap: Mapping[int, Sequence[int]],
              gap: int = 4) -> np.ndarray:
    """Side-by-side sheet: RGB, NIR, truth, then one panel per prediction.

    ``image`` is a ``(4, H, W)`` array in band order red, green, blue, NIR.
    """
    image = np.asarray(image, dtype=np.float64)
    rgb = np.stack([_stretch(image[b]) for b in range(3)], axis=-1)
    nir = np.repeat(_stretch(image[3])[..., None], 3, axis=-1)
    panels = [rgb, nir, render(truth, colormap), *(render(p, colormap) for p in predictions)]
    h = rgb.shape[0]
    spacer = np.full((h, gap, 3), 255, dtype=np.uint8)
    out = []
    for i, p in enumerate(panels):
        if i:
            out.append(spacer)
        out.append(p)
    return np.concatenate(out, axis=1)


def save_png(rgb: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(path)
