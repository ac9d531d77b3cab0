"""Procedural labeled scenes: colored rectangles and discs on a background,
with per-shape instance ids. Later shapes occlude earlier ones, so one
instance can end up split into several connected components, which is
exactly the situation the matching pipeline is built for."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .components import LabelMap

# base color per class id; repeats if num_classes exceeds the palette
PALETTE = np.array([
    [0.15, 0.15, 0.18],  # background
    [0.85, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.25, 0.35, 0.90],
    [0.90, 0.80, 0.25],
    [0.70, 0.30, 0.80],
    [0.20, 0.80, 0.85],
    [0.95, 0.55, 0.15],
])


@dataclass
class SceneSpec:
    width: int = 32
    height: int = 32
    num_classes: int = 4           # including background class 0
    max_instances_per_class: int = 2
    shapes: tuple = ("rect", "disc")
    noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need a background plus at least one foreground class")
        if self.width < 8 or self.height < 8:
            raise ValueError("scene too small for the shape palette")


def _paint(class_ids, instance_ids, shape, rng, width, height, class_id, instance_id,
           x_range=None):
    lo, hi = x_range if x_range else (0, width)
    if shape == "disc":
        radius = int(rng.integers(max(2, width // 10), max(3, width // 5)))
        cx = int(rng.integers(lo + radius, max(lo + radius + 1, hi - radius)))
        cy = int(rng.integers(radius, height - radius))
        xs, ys = np.meshgrid(np.arange(width), np.arange(height), indexing="ij")
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2
    else:
        sw = int(rng.integers(width // 6, width // 3 + 1))
        sh = int(rng.integers(height // 6, height // 3 + 1))
        x0 = int(rng.integers(lo, max(lo + 1, hi - sw)))
        y0 = int(rng.integers(0, height - sh))
        inside = np.zeros((width, height), dtype=bool)
        inside[x0:x0 + sw, y0:y0 + sh] = True
    class_ids[inside] = class_id
    instance_ids[inside] = instance_id


def generate_scene(spec: SceneSpec):
    """One (image, label map) pair, deterministic per seed.

    Foreground classes get 1..max_instances_per_class shapes each; roughly
    two thirds of scenes additionally force one class to appear as two
    well-separated shapes so multi-component classes are common.
    """
    rng = np.random.default_rng(spec.seed)
    w, h = spec.width, spec.height
    class_ids = np.zeros((w, h), dtype=np.int64)
    instance_ids = np.zeros((w, h), dtype=np.int64)
    fg_classes = list(range(1, spec.num_classes))
    next_instance = 1

    split_class = None
    if rng.random() < 0.67:
        split_class = int(rng.choice(fg_classes))
    for class_id in fg_classes:
        count = int(rng.integers(1, spec.max_instances_per_class + 1))
        for _ in range(count):
            shape = str(rng.choice(list(spec.shapes)))
            _paint(class_ids, instance_ids, shape, rng, w, h, class_id, next_instance)
            next_instance += 1
    if split_class is not None:
        # two shapes of one class confined to opposite thirds of the image
        for x_range in ((0, w // 3), (2 * w // 3, w)):
            shape = str(rng.choice(list(spec.shapes)))
            _paint(class_ids, instance_ids, shape, rng, w, h, split_class,
                   next_instance, x_range=x_range)
            next_instance += 1

    image = PALETTE[class_ids % len(PALETTE)].copy()
    for inst in range(1, next_instance):
        sel = instance_ids == inst
        if sel.any():
            image[sel] += rng.normal(0.0, 0.03, 3)
    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, image.shape)
    image = np.clip(image, 0.0, 1.0)
    return image, LabelMap(class_ids, instance_ids)


def generate_dataset(spec: SceneSpec, n: int):
    """n scenes from consecutive seeds spec.seed .. spec.seed + n - 1."""
    if n < 1:
        raise ValueError("generate_dataset: n must be >= 1")
    return [generate_scene(replace(spec, seed=spec.seed + i)) for i in range(n)]
