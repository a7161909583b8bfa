"""Synthetic side-look sonar chips and scenes for four mine-like target classes.

Every target is a bright highlight followed downrange (+x) by a dark acoustic
shadow, rendered on a 0.3-level seabed with optional clutter blobs and
multiplicative Rayleigh speckle. Intensities live on a [0, 1] scale and are
rounded to float32 precision so rasters survive SASR storage unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .noise import speckle_field

CLASS_NAMES = ("block", "cone", "sphere", "cylinder")
BACKGROUND_LEVEL = 0.3
HIGHLIGHT_LEVEL = 0.9
SHADOW_LEVEL = 0.05

# downrange offset of each footprint's centre from the highlight centre (unit scale)
_FOOTPRINT_SHIFT = {"block": 8.0, "cylinder": 6.0, "sphere": 9.5, "cone": 7.5}

STANDARD_DATASET_SEED = 2017
STANDARD_SCENE_SEED = 4242


def _masks(cls: str, du: np.ndarray, dv: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Highlight and shadow masks in the target frame (u downrange, v cross-range)."""
    if cls == "block":
        hl = (np.abs(du) <= 6 * s) & (np.abs(dv) <= 9 * s)
        sh = (du > 6 * s) & (du <= 22 * s) & (np.abs(dv) <= 9 * s)
    elif cls == "cylinder":
        hl = (np.abs(du) <= 3.5 * s) & (np.abs(dv) <= 13 * s)
        sh = (du > 3.5 * s) & (du <= 15.5 * s) & (np.abs(dv) <= 13 * s)
    elif cls == "sphere":
        hl = du ** 2 + dv ** 2 <= (7 * s) ** 2
        sh = ((du - 16 * s) / (10 * s)) ** 2 + (dv / (6 * s)) ** 2 <= 1.0
        sh &= (du > 0) & ~hl
    elif cls == "cone":
        # apex up (negative v), base width 14s at v = +9s
        half = 7 * s * (dv + 9 * s) / (18 * s)
        hl = (np.abs(dv) <= 9 * s) & (np.abs(du) <= half)
        flare = 9 * s * (0.4 + 0.6 * np.clip(du, 0, None) / (22 * s))
        sh = (du > half) & (du <= 22 * s) & (dv <= 9 * s) & (np.abs(dv) <= flare) & ~hl
    else:
        raise ValueError(f"unknown target class {cls!r}; expected one of {CLASS_NAMES}")
    return hl, sh & ~hl


def target_masks(cls: str, shape: tuple[int, int], cx: float, cy: float,
                 orientation_deg: float = 0.0, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Masks for a target whose highlight+shadow footprint is centred at ``(cx, cy)``."""
    if cls not in _FOOTPRINT_SHIFT:
        raise ValueError(f"unknown target class {cls!r}; expected one of {CLASS_NAMES}")
    th = math.radians(orientation_deg)
    c, s_ = math.cos(th), math.sin(th)
    shift = _FOOTPRINT_SHIFT[cls] * scale
    hx, hy = cx - shift * c, cy - shift * s_
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dx, dy = xx - hx, yy - hy
    du = dx * c + dy * s_
    dv = -dx * s_ + dy * c
    return _masks(cls, du, dv, scale)


def _clutter(shape: tuple[int, int], density: float, rng: np.random.Generator) -> np.ndarray:
    """Sum of smoothed low-amplitude blobs; ``density`` is blobs per 1000 pixels."""
    field_ = np.zeros(shape)
    n_blobs = rng.poisson(density * shape[0] * shape[1] / 1000.0) if density > 0 else 0
    for _ in range(n_blobs):
        y, x = rng.integers(0, shape[0]), rng.integers(0, shape[1])
        field_[y, x] += rng.uniform(-1.0, 1.0) * rng.uniform(20.0, 60.0)
    if n_blobs:
        field_ = gaussian_filter(field_, sigma=3.0, mode="constant")
    return np.clip(field_, -0.15, 0.15)


def _speckle_seed(seed: int) -> int:
    # separate stream from user-facing corruption seeds
    return int(np.random.SeedSequence([seed & (2 ** 64 - 1), 0x53504B]).generate_state(1, np.uint64)[0])


def _finish(template: np.ndarray, speckle_sigma: float, seed: int) -> np.ndarray:
    img = template
    if speckle_sigma > 0:
        img = img * speckle_field(speckle_sigma, img.shape, _speckle_seed(seed))
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class ChipSpec:
    cls: str
    chip_size: int = 64
    orientation_deg: float = 0.0
    scale: float = 1.0
    offset: tuple[float, float] = (0.0, 0.0)
    speckle_sigma: float = 0.0
    clutter_density: float = 0.0
    seed: int = 0
    scale_bounds: tuple[float, float] = (0.5, 1.5)

    def __post_init__(self):
        if self.cls not in CLASS_NAMES:
            raise ValueError(f"unknown target class {self.cls!r}; expected one of {CLASS_NAMES}")
        lo, hi = self.scale_bounds
        if not lo <= self.scale <= hi:
            raise ValueError(f"scale {self.scale} outside bounds {self.scale_bounds}")


def generate_chip(spec: ChipSpec) -> tuple[np.ndarray, str]:
    n = spec.chip_size
    cx = (n - 1) / 2 + spec.offset[0]
    cy = (n - 1) / 2 + spec.offset[1]
    margin = n
    hl, sh = target_masks(spec.cls, (n + 2 * margin, n + 2 * margin), cx + margin, cy + margin,
                          spec.orientation_deg, spec.scale)
    inner = np.zeros_like(hl)
    inner[margin:margin + n, margin:margin + n] = True
    if np.any((hl | sh) & ~inner):
        raise ValueError(f"{spec.cls} target with offset {spec.offset} and scale {spec.scale} "
                         f"does not fit in a {n}x{n} chip")
    hl = hl[margin:margin + n, margin:margin + n]
    sh = sh[margin:margin + n, margin:margin + n]
    rng = np.random.default_rng(spec.seed)
    template = np.full((n, n), BACKGROUND_LEVEL) + _clutter((n, n), spec.clutter_density, rng)
    template[sh] = SHADOW_LEVEL
    template[hl] = HIGHLIGHT_LEVEL
    return _finish(template, spec.speckle_sigma, spec.seed), spec.cls


def generate_background_chip(chip_size: int = 64, speckle_sigma: float = 0.5,
                             clutter_density: float = 1.0, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    template = BACKGROUND_LEVEL + _clutter((chip_size, chip_size), clutter_density, rng)
    return _finish(template, speckle_sigma, seed)


def generate_distractor_chips(n: int, seed: int, config: "DatasetConfig | None" = None,
                              displacement: tuple[float, float] = (20.0, 32.0)) -> np.ndarray:
    """Chips that contain no centred target.

    Even indices are pure clutter; odd ones show a random target shifted off
    centre by ``displacement`` pixels so the chip edge cuts through it.
    """
    config = config or DatasetConfig()
    rng = np.random.default_rng(seed)
    size = config.chip_size
    pad = max(size // 2, int(np.ceil(displacement[1])))
    canvas = size + 2 * pad
    out = []
    for i in range(n):
        if i % 2 == 0:
            out.append(generate_background_chip(size, config.speckle_sigma, config.clutter_density,
                                                seed=int(rng.integers(1 << 62))))
            continue
        cls = CLASS_NAMES[rng.integers(len(CLASS_NAMES))]
        spin = config.orientation_range
        centre = canvas / 2 - 0.5
        target = PlacedTarget(cls, centre, centre, float(rng.uniform(-spin, spin)),
                              float(rng.uniform(*config.scale_range)))
        big, _ = generate_scene(SceneSpec(canvas, canvas, (target,), config.clutter_density,
                                          config.speckle_sigma, int(rng.integers(1 << 62))))
        ang = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(*displacement)
        ox = int(round(pad + r * np.cos(ang)))
        oy = int(round(pad + r * np.sin(ang)))
        out.append(big[oy:oy + size, ox:ox + size])
    return np.array(out)


@dataclass
class LabeledChipSet:
    images: np.ndarray  # [N, H, W]
    labels: np.ndarray  # [N] indices into class_names
    class_names: tuple[str, ...] = CLASS_NAMES

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "LabeledChipSet":
        indices = np.asarray(indices, dtype=np.intp)
        return LabeledChipSet(self.images[indices], self.labels[indices], self.class_names)

    def split(self, train_per_class: int, test_per_class: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Disjoint train/test index arrays drawn per class by a seeded shuffle."""
        rng = np.random.default_rng(seed)
        train, test = [], []
        for c in range(len(self.class_names)):
            idx = np.flatnonzero(self.labels == c)
            if len(idx) < train_per_class + test_per_class:
                raise ValueError(f"class {self.class_names[c]!r} has {len(idx)} chips, "
                                 f"need {train_per_class + test_per_class}")
            idx = rng.permutation(idx)
            train.extend(idx[:train_per_class])
            test.extend(idx[train_per_class:train_per_class + test_per_class])
        return np.sort(np.array(train, dtype=np.intp)), np.sort(np.array(test, dtype=np.intp))


@dataclass(frozen=True)
class DatasetConfig:
    chip_size: int = 64
    jitter: float = 4.0
    orientation_range: float = 15.0
    scale_range: tuple[float, float] = (0.85, 1.15)
    speckle_sigma: float = 0.6
    clutter_density: float = 1.0


def random_chip_spec(cls: str, rng: np.random.Generator, config: DatasetConfig = DatasetConfig()) -> ChipSpec:
    return ChipSpec(
        cls=cls,
        chip_size=config.chip_size,
        orientation_deg=float(rng.uniform(-config.orientation_range, config.orientation_range)),
        scale=float(rng.uniform(*config.scale_range)),
        offset=(float(rng.uniform(-config.jitter, config.jitter)), float(rng.uniform(-config.jitter, config.jitter))),
        speckle_sigma=config.speckle_sigma,
        clutter_density=config.clutter_density,
        seed=int(rng.integers(0, 2 ** 63)),
    )


def generate_dataset(per_class: int, seed: int, config: DatasetConfig = DatasetConfig(),
                     class_names: Sequence[str] = CLASS_NAMES) -> LabeledChipSet:
    """Balanced chip set, classes interleaved, with randomized jitter/orientation/scale."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for _ in range(per_class):
        for c, name in enumerate(class_names):
            img, _ = generate_chip(random_chip_spec(name, rng, config))
            images.append(img)
            labels.append(c)
    return LabeledChipSet(np.array(images), np.array(labels, dtype=np.intp), tuple(class_names))


def standard_dataset(per_class: int = 60) -> LabeledChipSet:
    return generate_dataset(per_class, STANDARD_DATASET_SEED)


# -- scenes ------------------------------------------------------------------

@dataclass(frozen=True)
class PlacedTarget:
    cls: str
    x: float
    y: float
    orientation_deg: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class Truth:
    cls: str
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    targets: tuple[PlacedTarget, ...] = field(default_factory=tuple)
    clutter_density: float = 1.0
    speckle_sigma: float = 0.6
    seed: int = 0


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def boxes_intersect(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, list[Truth]]:
    shape = (spec.height, spec.width)
    rng = np.random.default_rng(spec.seed)
    template = np.full(shape, BACKGROUND_LEVEL) + _clutter(shape, spec.clutter_density, rng)
    truths: list[Truth] = []
    rendered = []
    margin = 64
    for t in spec.targets:
        big = (shape[0] + 2 * margin, shape[1] + 2 * margin)
        hl, sh = target_masks(t.cls, big, t.x + margin, t.y + margin, t.orientation_deg, t.scale)
        inner = np.zeros(big, dtype=bool)
        inner[margin:margin + shape[0], margin:margin + shape[1]] = True
        if np.any((hl | sh) & ~inner):
            raise ValueError(f"{t.cls} target at ({t.x}, {t.y}) extends outside the scene")
        hl = hl[margin:margin + shape[0], margin:margin + shape[1]]
        sh = sh[margin:margin + shape[0], margin:margin + shape[1]]
        box = _bbox(hl | sh)
        for other in truths:
            if boxes_intersect(box, other.box):
                raise ValueError(f"{t.cls} target at ({t.x}, {t.y}) overlaps the {other.cls} target")
        truths.append(Truth(t.cls, box))
        rendered.append((hl, sh))
    for hl, sh in rendered:
        template[sh] = SHADOW_LEVEL
        template[hl] = HIGHLIGHT_LEVEL
    return _finish(template, spec.speckle_sigma, spec.seed), truths


def standard_scene_spec(seed: int = STANDARD_SCENE_SEED) -> SceneSpec:
    """Two-target scene (block and sphere) whose targets sit on the centres of 64/32 grid patches."""
    return SceneSpec(width=352, height=192,
                     targets=(PlacedTarget("block", 95.5, 95.5, 5.0), PlacedTarget("sphere", 255.5, 95.5, -5.0)),
                     seed=seed)


def single_target_scene_spec(seed: int = STANDARD_SCENE_SEED + 1) -> SceneSpec:
    return SceneSpec(width=224, height=192, targets=(PlacedTarget("block", 95.5, 95.5, 0.0),), seed=seed)
