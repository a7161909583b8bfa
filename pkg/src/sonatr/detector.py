"""Overlapping-patch target detection.

Each grid patch goes through the CNN feature extractor and the SVM; a patch is
flagged when its largest normalized score reaches the threshold ``tau``, and
it takes the argmax class.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import network as nw
from . import svm as svm_mod
from .errors import DimensionError
from .metrics import _ratio
from .synthgen import Truth, boxes_intersect

DEFAULT_TAU = 0.9


@dataclass(frozen=True)
class PatchGrid:
    width: int
    height: int
    patch_size: int
    stride: int

    @property
    def xs(self) -> range:
        return range(0, self.width - self.patch_size + 1, self.stride)

    @property
    def ys(self) -> range:
        return range(0, self.height - self.patch_size + 1, self.stride)

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(x, y) for y in self.ys for x in self.xs]

    def __len__(self) -> int:
        return len(self.xs) * len(self.ys)


def build_grid(width: int, height: int, patch_size: int, stride: int | None = None) -> PatchGrid:
    """Grid of patch origins; ``stride`` defaults to half the patch size."""
    if stride is None:
        stride = max(1, patch_size // 2)
    if patch_size < 1 or patch_size > width or patch_size > height:
        raise DimensionError(f"patch size {patch_size} does not fit a {width}x{height} scene")
    if not 1 <= stride <= patch_size:
        raise ValueError(f"stride must be in [1, {patch_size}], got {stride}")
    return PatchGrid(width, height, patch_size, stride)


@dataclass(frozen=True)
class Detection:
    x: int
    y: int
    size: int
    cls: str
    score: float
    raw_scores: tuple[float, ...] = ()

    @property
    def box(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.x + self.size, self.y + self.size)


@dataclass(frozen=True)
class Region:
    cls: str
    box: tuple[int, int, int, int]
    score: float


@dataclass
class DetectionReport:
    scene_id: str
    tau: float
    grid: PatchGrid
    detections: list[Detection]
    regions: list[Region] | None = None


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with pixel-centre alignment and edge clamping."""
    h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def extract_patches(scene: np.ndarray, grid: PatchGrid, origins: Sequence[tuple[int, int]],
                    out_hw: tuple[int, int]) -> np.ndarray:
    p = grid.patch_size
    return np.array([resize_bilinear(scene[y:y + p, x:x + p], *out_hw) for x, y in origins])


def score_patches(scene, net: nw.Network, model: svm_mod.SvmModel, grid: PatchGrid,
                  order: Sequence[int] | None = None, batch_size: int = 64):
    """Raw decision scores ``[N, K]`` for every grid origin (returned in grid order).

    ``order`` permutes the evaluation sequence; results do not depend on it.
    """
    scene = np.asarray(scene, dtype=np.float64)
    if scene.shape != (grid.height, grid.width):
        raise DimensionError(f"scene shape {scene.shape} does not match grid {grid.height}x{grid.width}")
    if model.dim != net.feature_width:
        raise DimensionError(f"SVM dimension {model.dim} != network feature width {net.feature_width}")
    origins = grid.origins
    order = np.arange(len(origins)) if order is None else np.asarray(order)
    if sorted(order.tolist()) != list(range(len(origins))):
        raise ValueError("order must be a permutation of the grid indices")
    hw = net.spec.input_shape[1:]
    raw = np.empty((len(origins), len(model.class_names)))
    for idx in order:
        # one patch per forward call keeps every score independent of batching
        patch = extract_patches(scene, grid, [origins[idx]], hw)
        raw[idx] = svm_mod.decision_scores(model, nw.extract_features_batch(net, patch))[0]
    return raw


def threshold(raw: np.ndarray, grid: PatchGrid, class_names: Sequence[str], tau: float) -> list[Detection]:
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    norm = nw.tc.softmax(raw)
    dets = []
    for (x, y), r, s in zip(grid.origins, raw, norm):
        k = int(np.argmax(r))
        if s[k] >= tau:
            dets.append(Detection(x, y, grid.patch_size, class_names[k], float(s[k]), tuple(float(v) for v in r)))
    return sorted(dets, key=lambda d: (d.y, d.x))


def scan(scene, net: nw.Network, model: svm_mod.SvmModel, grid: PatchGrid, tau: float = DEFAULT_TAU,
         scene_id: str = "", order: Sequence[int] | None = None, merge: bool = False) -> DetectionReport:
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    raw = score_patches(scene, net, model, grid, order)
    report = DetectionReport(scene_id, tau, grid, threshold(raw, grid, model.class_names, tau))
    if merge:
        report.regions = merge_regions(report)
    return report


def _union(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def merge_boxes(regions: Iterable[Region]) -> list[Region]:
    """Union same-class intersecting rectangles until no two same-class regions intersect."""
    regions = list(regions)
    merged = True
    while merged:
        merged = False
        for i in range(len(regions)):
            for j in range(i + 1, len(regions)):
                a, b = regions[i], regions[j]
                if a.cls == b.cls and boxes_intersect(a.box, b.box):
                    regions[i] = Region(a.cls, _union(a.box, b.box), max(a.score, b.score))
                    del regions[j]
                    merged = True
                    break
            if merged:
                break
    return sorted(regions, key=lambda r: (r.cls, r.box))


def merge_regions(report: DetectionReport) -> list[Region]:
    return merge_boxes(Region(d.cls, d.box, d.score) for d in report.detections)


@dataclass
class DetectionScore:
    tp: int
    fp: int
    fn: int
    precision: float | None
    recall: float | None
    matches: list[tuple[Region, Truth]] = field(default_factory=list)


def _area(box) -> int:
    return max(0, box[2] - box[0]) * max(0, box[3] - box[1])


def _overlap(a, b) -> int:
    return _area((max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3])))


def evaluate_detection(report: DetectionReport | Sequence[Region], truths: Sequence[Truth],
                       min_overlap: float = 0.25) -> DetectionScore:
    """Match merged regions to ground truth.

    A region matches an unmatched truth of the same class when their
    intersection covers at least ``min_overlap`` of the truth box; regions are
    visited in descending score order.
    """
    regions = merge_regions(report) if isinstance(report, DetectionReport) else list(report)
    unmatched = list(truths)
    matches = []
    for region in sorted(regions, key=lambda r: (-r.score, r.cls, r.box)):
        for t in unmatched:
            if t.cls == region.cls and _overlap(region.box, t.box) >= min_overlap * _area(t.box):
                matches.append((region, t))
                unmatched.remove(t)
                break
    tp = len(matches)
    fp = len(regions) - tp
    fn = len(unmatched)
    return DetectionScore(tp, fp, fn, _ratio(tp, tp + fp), _ratio(tp, tp + fn), matches)


def overlay(scene: np.ndarray, report: DetectionReport, gain: float = 1.5, peak: float = 1.0) -> np.ndarray:
    """Scene copy with every flagged patch brightened by ``gain`` and clipped to ``peak``."""
    mask = np.zeros(scene.shape, dtype=bool)
    for d in report.detections:
        mask[d.y:d.y + d.size, d.x:d.x + d.size] = True
    out = np.array(scene, dtype=np.float64)
    out[mask] = np.minimum(out[mask] * gain, peak)
    return out


def calibrate_tau(raw: np.ndarray, grid: PatchGrid, class_names: Sequence[str], truths: Sequence[Truth],
                  taus: Sequence[float]) -> tuple[float, list[dict]]:
    """Sweep thresholds on a validation scene.

    Picks the best precision among the thresholds with maximal recall, and the
    lowest such threshold on ties, so the choice leans toward fewer misses.
    """
    rows = []
    for tau in sorted(taus):
        dets = threshold(raw, grid, class_names, tau)
        report = DetectionReport("validation", tau, grid, dets)
        s = evaluate_detection(report, truths)
        rows.append({"tau": float(tau), "detections": len(dets), "tp": s.tp, "fp": s.fp, "fn": s.fn,
                     "precision": s.precision, "recall": s.recall})
    best_recall = max((r["recall"] or 0.0) for r in rows)
    candidates = [r for r in rows if (r["recall"] or 0.0) == best_recall]
    best = max(candidates, key=lambda r: ((r["precision"] or 0.0), -r["tau"]))
    return best["tau"], rows
