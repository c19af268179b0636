"""Procedural class-conditional images: colored shapes on textured backgrounds.

A class is one (shape, texture) combination. The shape's color is drawn per
image from the palette, so it carries no class information; it is kept as a
coarse per-image label for backbone pretraining. Meta-train and meta-test
splits draw disjoint combinations; a second generator spec with its own shapes,
palette and textures gives a cross-domain meta-test split.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from inversion.tasks import GeneratedTask
from utils.errors import ConfigError, CountError, ValidationError

logger = logging.getLogger(__name__)

SPLIT_TRAIN = "meta-train"
SPLIT_TEST = "meta-test"

# Fixed normalization: pixels in [0, 1] map to roughly zero mean, unit scale
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class GeneratorSpec:
    shapes: Tuple[str, ...] = ("circle", "square", "triangle", "cross", "ring", "bar")
    palette: Tuple[Tuple[str, Tuple[float, float, float]], ...] = (
        ("red", (0.9, 0.15, 0.1)),
        ("green", (0.15, 0.8, 0.2)),
        ("blue", (0.15, 0.3, 0.9)),
        ("yellow", (0.95, 0.85, 0.1)),
        ("magenta", (0.85, 0.2, 0.8)),
        ("cyan", (0.1, 0.8, 0.85)),
    )
    textures: Tuple[str, ...] = ("plain", "stripes", "dots", "checker")
    image_size: int = 24
    noise: float = 0.05

    def combinations(self) -> List[Tuple[str, str]]:
        return [(s, t) for s in self.shapes for t in self.textures]

    @property
    def color_names(self) -> List[str]:
        return [name for name, _ in self.palette]

    def color(self, name: str) -> np.ndarray:
        return np.asarray(dict(self.palette)[name], dtype=np.float64)


CROSS_DOMAIN_SPEC = GeneratorSpec(
    shapes=("diamond", "frame", "column"),
    palette=(("orange", (1.0, 0.55, 0.0)), ("purple", (0.5, 0.1, 0.7)), ("white", (0.95, 0.95, 0.95))),
    textures=("grid", "diagonal"),
)


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, C, H, W) float32, normalized
    labels: np.ndarray
    class_names: List[str]
    split: str
    spec: GeneratorSpec = field(default_factory=GeneratorSpec)
    colors: Optional[np.ndarray] = None  # (N,) palette index of each image's shape

    def __post_init__(self):
        if self.colors is None:
            self.colors = np.zeros(len(self.labels), dtype=np.int64)
        if len(self.colors) != len(self.labels):
            raise ValidationError(f"{len(self.colors)} color labels for {len(self.labels)} images")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices_of(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def subset(self, class_names: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
        """Images of the named classes, relabelled 0..len(class_names)-1 in the given order."""
        images, labels = [], []
        for local, name in enumerate(class_names):
            if name not in self.class_names:
                raise ValidationError(f"class {name!r} is not in the {self.split} split")
            idx = self.indices_of(self.class_names.index(name))
            images.append(self.images[idx])
            labels.append(np.full(len(idx), local, dtype=np.int64))
        return np.concatenate(images), np.concatenate(labels)


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    dist = np.sqrt(dy * dy + dx * dx)
    if shape == "circle":
        return dist < r
    if shape == "square":
        return (np.abs(dx) < r * 0.85) & (np.abs(dy) < r * 0.85)
    if shape == "triangle":
        return (dy > -r) & (dy < r) & (np.abs(dx) < (dy + r) / 2)
    if shape == "cross":
        return ((np.abs(dx) < r / 3) & (np.abs(dy) < r)) | ((np.abs(dy) < r / 3) & (np.abs(dx) < r))
    if shape == "ring":
        return (dist < r) & (dist > r * 0.55)
    if shape == "bar":
        return (np.abs(dx) < r) & (np.abs(dy) < r / 3)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) < r
    if shape == "frame":
        outer = (np.abs(dx) < r) & (np.abs(dy) < r)
        return outer & ~((np.abs(dx) < r * 0.6) & (np.abs(dy) < r * 0.6))
    if shape == "column":
        return (np.abs(dx) < r / 3) & (np.abs(dy) < r)
    raise ConfigError(f"unknown shape {shape!r}")


def _texture(texture: str, yy: np.ndarray, xx: np.ndarray, phase: int) -> np.ndarray:
    if texture == "plain":
        return np.zeros_like(yy, dtype=np.float64)
    if texture == "stripes":
        return ((xx + phase) // 2 % 2).astype(np.float64)
    if texture == "dots":
        return (((xx + phase) % 4 == 0) & ((yy + phase) % 4 == 0)).astype(np.float64)
    if texture == "checker":
        return (((xx + phase) // 4 + (yy + phase) // 4) % 2).astype(np.float64)
    if texture == "grid":
        return (((xx + phase) % 6 == 0) | ((yy + phase) % 6 == 0)).astype(np.float64)
    if texture == "diagonal":
        return ((xx + yy + phase) // 3 % 2).astype(np.float64)
    raise ConfigError(f"unknown texture {texture!r}")


def render_image(spec: GeneratorSpec, shape: str, texture: str, color: str, rng: np.random.Generator) -> np.ndarray:
    """One (3, H, W) normalized image of a class, with jittered position, size and noise."""
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size]
    r = size * rng.uniform(0.22, 0.32)
    cy = size / 2 + rng.uniform(-0.12, 0.12) * size
    cx = size / 2 + rng.uniform(-0.12, 0.12) * size
    background = 0.25 + 0.3 * _texture(texture, yy, xx, int(rng.integers(4)))
    image = np.repeat(background[None, :, :], 3, axis=0)
    mask = _shape_mask(shape, yy, xx, cy, cx, r)
    image[:, mask] = spec.color(color)[:, None] * rng.uniform(0.85, 1.0)
    image = image + rng.normal(0.0, spec.noise, image.shape)
    return ((np.clip(image, 0.0, 1.0) - PIXEL_MEAN) / PIXEL_STD).astype(np.float32)


def class_name(combo: Tuple[str, str]) -> str:
    return "-".join(combo)


def _render_split(spec: GeneratorSpec, combos: Sequence[Tuple[str, str]], images_per_class: int,
                  rng: np.random.Generator, split: str) -> ToyDataset:
    images, labels, colors = [], [], []
    names = spec.color_names
    for label, (shape, texture) in enumerate(combos):
        for _ in range(images_per_class):
            color = int(rng.integers(len(names)))
            images.append(render_image(spec, shape, texture, names[color], rng))
            labels.append(label)
            colors.append(color)
    return ToyDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=[class_name(c) for c in combos],
        split=split,
        spec=spec,
        colors=np.asarray(colors, dtype=np.int64),
    )


def make_toy_dataset(spec: GeneratorSpec, train_classes: int, test_classes: int, images_per_class: int,
                     seed: int = 0, test_spec: Optional[GeneratorSpec] = None) -> Tuple[ToyDataset, ToyDataset]:
    """Meta-train and meta-test splits with disjoint label spaces.

    With ``test_spec`` the meta-test classes come from that generator instead
    (cross-domain evaluation).
    """
    if min(train_classes, test_classes, images_per_class) < 1:
        raise ConfigError("class and image counts must be positive")
    rng = np.random.default_rng(seed)
    combos = spec.combinations()
    order = [combos[i] for i in rng.permutation(len(combos))]

    if test_spec is None:
        if train_classes + test_classes > len(combos):
            raise CountError(f"generator spec offers {len(combos)} classes; {train_classes + test_classes} requested")
        train_combos, test_combos = order[:train_classes], order[train_classes:train_classes + test_classes]
    else:
        if train_classes > len(combos):
            raise CountError(f"generator spec offers {len(combos)} classes; {train_classes} requested")
        other = test_spec.combinations()
        if test_classes > len(other):
            raise CountError(f"cross-domain spec offers {len(other)} classes; {test_classes} requested")
        train_combos = order[:train_classes]
        test_combos = [other[i] for i in rng.permutation(len(other))[:test_classes]]

    train = _render_split(spec, train_combos, images_per_class, rng, SPLIT_TRAIN)
    test = _render_split(test_spec or spec, test_combos, images_per_class, rng, SPLIT_TEST)
    if set(train.class_names) & set(test.class_names):
        raise ValidationError("meta-train and meta-test classes overlap")
    logger.info("Generated toy dataset: %d train classes, %d test classes, %d images each",
                train_classes, test_classes, images_per_class)
    return train, test


def probe_images(dataset: ToyDataset, count: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if count > len(dataset.images):
        raise CountError(f"asked for {count} probe images from a split of {len(dataset.images)}")
    return dataset.images[np.sort(rng.choice(len(dataset.images), size=count, replace=False))]


def real_task(dataset: ToyDataset, class_names: Sequence[str], K: int, Q: int, grid_size: int, seed: int = 0,
              source: str = "real") -> GeneratedTask:
    """A task built from real images of the named classes, with all-ones masks."""
    rng = np.random.default_rng(seed)
    s_img, s_lab, q_img, q_lab = [], [], [], []
    for local, name in enumerate(class_names):
        idx = dataset.indices_of(dataset.class_names.index(name))
        if len(idx) < K + Q:
            raise CountError(f"class {name} has {len(idx)} images; K + Q = {K + Q} are needed")
        pick = rng.choice(idx, size=K + Q, replace=False)
        s_img.append(dataset.images[pick[:K]])
        q_img.append(dataset.images[pick[K:]])
        s_lab.extend([local] * K)
        q_lab.extend([local] * Q)
    support = np.concatenate(s_img)
    query = np.concatenate(q_img)
    return GeneratedTask(
        support_images=support,
        support_masks=np.ones((len(support), grid_size, grid_size), dtype=bool),
        support_labels=np.asarray(s_lab, dtype=np.int64),
        query_images=query,
        query_masks=np.ones((len(query), grid_size, grid_size), dtype=bool),
        query_labels=np.asarray(q_lab, dtype=np.int64),
        class_names=list(class_names),
        sources=[source] * len(class_names),
        k_shot=K,
        q_query=Q,
    )


def real_tasks(dataset: ToyDataset, teacher_classes: Dict[str, Sequence[str]], K: int, Q: int,
               grid_size: int, seed: int = 0) -> Dict[str, GeneratedTask]:
    """One real-image task per teacher, over that teacher's classes."""
    return {tid: real_task(dataset, names, K, Q, grid_size, seed=seed + i, source=tid)
            for i, (tid, names) in enumerate(sorted(teacher_classes.items()))}

