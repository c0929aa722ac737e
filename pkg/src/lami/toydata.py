"""Procedural open-vocabulary toy dataset: colored shapes on a noisy background.

Categories are (shape, color, size-range, texture) tuples split into base and
novel. Novel objects are rendered in training images too, but their
annotations exist only in the eval split, mirroring the open-vocabulary
protocol. Each category also carries auto-generated visual description text
that doubles as the offline fixture for the LLM description client.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from lami.concepts import ConceptDictionary, build_dictionary, with_splits
from lami.descriptions import PromptTemplate
from lami.errors import DatasetError

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "bar", "frame")

_SHAPE_DETAILS = {
    "circle": "round disc, smooth curved outline, no corners",
    "square": "boxy four-sided patch, straight edges, sharp right-angle corners",
    "triangle": "pointed wedge, three straight slanted edges, wide flat base",
    "cross": "two perpendicular arms crossing centrally, plus-sign silhouette",
    "ring": "hollow circular band, open hole through its center",
    "diamond": "tilted rhombus balanced on one corner, four slanted edges",
    "bar": "long flat horizontal strip, far wider than tall",
    "frame": "hollow square border, open window through its middle",
}


@dataclass(frozen=True)
class CategorySpec:
    name: str
    shape: str
    color_name: str
    rgb: tuple[int, int, int]
    split: str  # base | novel
    size_range: tuple[float, float] = (0.15, 0.30)
    texture: str = "solid"
    weight: float = 1.0
    tone: str | None = None  # distinguishing word for contrastive descriptions

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise DatasetError(f"unknown shape {self.shape!r}")
        if self.split not in ("base", "novel", "external"):
            raise DatasetError(
                f"category split must be base, novel, or external, got {self.split!r}"
            )
        if not 0 < self.size_range[0] <= self.size_range[1] <= 0.5:
            raise DatasetError(f"bad size range {self.size_range}")

    @property
    def size_word(self) -> str:
        mid = (self.size_range[0] + self.size_range[1]) / 2
        return "small" if mid < 0.12 else "large" if mid > 0.3 else "medium"

    def base_description(self) -> str:
        return (
            f"{self.color_name} {self.shape}: {_SHAPE_DETAILS[self.shape]}; "
            f"{self.size_word} size; {self.texture} {self.color_name} fill"
        )

    def contrastive_description(self, against: "CategorySpec") -> str:
        tone = self.tone or self.name
        return (
            f"{self.base_description()}; unlike {against.name}, "
            f"distinctly {tone} appearance"
        )


@dataclass(frozen=True)
class DatasetSpec:
    categories: tuple[CategorySpec, ...]
    image_size: int = 128
    n_train: int = 120
    n_eval: int = 40
    min_objects: int = 1
    max_objects: int = 3
    background: tuple[int, int, int] = (28, 28, 32)
    noise: int = 8
    max_box_iou: float = 0.3

    def __post_init__(self):
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise DatasetError("overlapping category names in dataset spec")
        n_base = sum(1 for c in self.categories if c.split == "base")
        n_novel = sum(1 for c in self.categories if c.split == "novel")
        if n_base < 2 or n_novel < 1:
            raise DatasetError(
                f"need at least 2 base and 1 novel category, got {n_base} base / {n_novel} novel"
            )


@dataclass(frozen=True)
class Annotation:
    box: tuple[float, float, float, float]  # normalized cxcywh
    category_id: int


@dataclass
class ToyDataset:
    spec: DatasetSpec
    seed: int
    vocabulary: ConceptDictionary
    category_specs: Mapping[int, CategorySpec]
    images: Mapping[int, np.ndarray]  # image_id -> HxWx3 uint8
    annotations: Mapping[int, tuple[Annotation, ...]]  # full annotations (all categories)
    train_ids: tuple[int, ...]
    eval_ids: tuple[int, ...]
    masks: Mapping[int, tuple[np.ndarray, ...]] = field(repr=False, default_factory=dict)

    def base_ids(self) -> list[int]:
        return self.vocabulary.ids_with_split("base")

    def novel_ids(self) -> list[int]:
        return self.vocabulary.ids_with_split("novel")

    def train_annotations(self, image_id: int) -> tuple[Annotation, ...]:
        """Open-vocabulary protocol: novel annotations are stripped from training."""
        if image_id not in self.train_ids:
            raise DatasetError(f"{image_id} is not a training image")
        novel = set(self.novel_ids())
        return tuple(a for a in self.annotations[image_id] if a.category_id not in novel)

    def eval_annotations(self, image_id: int) -> tuple[Annotation, ...]:
        if image_id not in self.eval_ids:
            raise DatasetError(f"{image_id} is not an eval image")
        return self.annotations[image_id]

    def train_annotation_stream(self):
        for image_id in self.train_ids:
            for ann in self.train_annotations(image_id):
                yield image_id, ann.category_id

    def base_description_texts(self) -> dict[int, str]:
        return {cid: spec.base_description() for cid, spec in self.category_specs.items()}

    def contrastive_text(self, concept_id: int, against_id: int) -> str:
        return self.category_specs[concept_id].contrastive_description(
            self.category_specs[against_id]
        )

    def base_transcript(self, template: PromptTemplate) -> dict[str, str]:
        """prompt -> description mapping for the offline fixture client."""
        return {
            template.render(category=self.vocabulary[cid].name): text
            for cid, text in self.base_description_texts().items()
        }

    def contrastive_transcript(
        self, template: PromptTemplate, pairs: Sequence[tuple[int, int]]
    ) -> dict[str, str]:
        return {
            template.render(
                category=self.vocabulary[cid].name,
                confusing_category=self.vocabulary[against].name,
            ): self.contrastive_text(cid, against)
            for cid, against in pairs
        }


def _shape_mask(shape: str, size: int, center: tuple[float, float], radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    cx, cy = center
    dx = xs - cx
    dy = ys - cy
    r = radius
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        # apex at the top, base at the bottom
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2)
    if shape == "cross":
        arm = r / 3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    if shape == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r / 3)
    if shape == "frame":
        cheb = np.maximum(np.abs(dx), np.abs(dy))
        return (cheb <= r) & (cheb >= 0.55 * r)
    raise DatasetError(f"unknown shape {shape!r}")


def _apply_texture(mask: np.ndarray, texture: str) -> np.ndarray:
    """Brightness modulation inside the mask; the mask itself is unchanged."""
    scale = np.ones(mask.shape)
    if texture == "solid":
        return scale
    ys, xs = np.mgrid[0 : mask.shape[0], 0 : mask.shape[1]]
    if texture == "striped":
        scale[((xs + ys) // 4) % 2 == 1] = 0.55
    elif texture == "dotted":
        scale[((xs // 4) % 2 == 1) & ((ys // 4) % 2 == 1)] = 0.55
    else:
        raise DatasetError(f"unknown texture {texture!r}")
    return scale


def _tight_box(mask: np.ndarray, size: int) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    x1, x2 = int(xs.min()), int(xs.max())
    y1, y2 = int(ys.min()), int(ys.max())
    w = (x2 - x1 + 1) / size
    h = (y2 - y1 + 1) / size
    cx = (x1 + x2 + 1) / 2 / size
    cy = (y1 + y2 + 1) / 2 / size
    return (cx, cy, w, h)


def _box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def generate_toy_dataset(spec: DatasetSpec, seed: int) -> ToyDataset:
    """Deterministic rendering: the same (spec, seed) yields byte-identical images.

    ``external`` categories join the dictionary and the description pipeline
    (they widen the clustered open set) but are never rendered or annotated.
    """
    names = [c.name for c in spec.categories]
    dictionary = with_splits(
        build_dictionary([("toy", names)]),
        base_names=[c.name for c in spec.categories if c.split == "base"],
        novel_names=[c.name for c in spec.categories if c.split == "novel"],
    )
    spec_by_id = {dictionary.id_of(c.name): c for c in spec.categories}
    weights = np.array(
        [
            spec_by_id[i].weight if spec_by_id[i].split != "external" else 0.0
            for i in range(len(dictionary))
        ],
        dtype=np.float64,
    )
    weights /= weights.sum()

    images: dict[int, np.ndarray] = {}
    annotations: dict[int, tuple[Annotation, ...]] = {}
    masks: dict[int, tuple[np.ndarray, ...]] = {}
    n_total = spec.n_train + spec.n_eval
    size = spec.image_size
    for image_id in range(n_total):
        rng = np.random.default_rng([seed, image_id])
        canvas = np.array(spec.background, dtype=np.float64) + rng.integers(
            -spec.noise, spec.noise + 1, size=(size, size, 3)
        )
        anns: list[Annotation] = []
        own_masks: list[np.ndarray] = []
        n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        for _ in range(n_objects):
            cid = int(rng.choice(len(weights), p=weights))
            cat = spec_by_id[cid]
            placed = False
            for _attempt in range(20):
                frac = rng.uniform(*cat.size_range)
                radius = frac * size / 2
                margin = radius + 1
                cx = rng.uniform(margin, size - margin)
                cy = rng.uniform(margin, size - margin)
                mask = _shape_mask(cat.shape, size, (cx, cy), radius)
                if not mask.any():
                    continue
                box = _tight_box(mask, size)
                if all(_box_iou(box, a.box) < spec.max_box_iou for a in anns):
                    placed = True
                    break
            if not placed:
                continue
            color = np.array(cat.rgb, dtype=np.float64)
            scale = _apply_texture(mask, cat.texture)
            canvas[mask] = color * scale[mask][:, None]
            anns.append(Annotation(box=box, category_id=cid))
            own_masks.append(mask)
        images[image_id] = np.clip(canvas, 0, 255).astype(np.uint8)
        annotations[image_id] = tuple(anns)
        masks[image_id] = tuple(own_masks)

    return ToyDataset(
        spec=spec,
        seed=seed,
        vocabulary=dictionary,
        category_specs=spec_by_id,
        images=images,
        annotations=annotations,
        train_ids=tuple(range(spec.n_train)),
        eval_ids=tuple(range(spec.n_train, n_total)),
        masks=masks,
    )


TOY_COLORS = {
    "red": (220, 45, 45),
    "green": (45, 185, 70),
    "blue": (55, 95, 225),
    "yellow": (235, 205, 50),
    "purple": (150, 60, 205),
    "orange": (240, 145, 35),
    "cyan": (45, 200, 205),
    "magenta": (220, 60, 185),
    "white": (235, 235, 235),
    "gray": (125, 125, 125),
}


def default_toy_spec(image_size: int = 128, n_train: int = 120, n_eval: int = 40) -> DatasetSpec:
    """12 trainable categories (8 base, 4 novel) in four shape groups.

    Each shape group holds two base colors plus one novel color, so the novel
    category is visually close to its shape group and cluster exclusion has a
    sampleable base category to remove. Novel colors all appear among base
    categories of other shapes. Two extra ``external`` concepts join the
    clustered open set without ever being rendered.
    """
    base = [
        ("red circle", "circle", "red"),
        ("green circle", "circle", "green"),
        ("yellow square", "square", "yellow"),
        ("purple square", "square", "purple"),
        ("blue triangle", "triangle", "blue"),
        ("orange triangle", "triangle", "orange"),
        ("cyan ring", "ring", "cyan"),
        ("magenta ring", "ring", "magenta"),
    ]
    novel = [
        ("blue circle", "circle", "blue"),
        ("red square", "square", "red"),
        ("green triangle", "triangle", "green"),
        ("orange ring", "ring", "orange"),
    ]
    external = [
        ("white diamond", "diamond", "white"),
        ("gray cross", "cross", "gray"),
    ]
    categories = (
        [
            CategorySpec(name=n, shape=s, color_name=c, rgb=TOY_COLORS[c], split="base")
            for n, s, c in base
        ]
        + [
            CategorySpec(name=n, shape=s, color_name=c, rgb=TOY_COLORS[c], split="novel")
            for n, s, c in novel
        ]
        + [
            CategorySpec(name=n, shape=s, color_name=c, rgb=TOY_COLORS[c], split="external")
            for n, s, c in external
        ]
    )
    return DatasetSpec(
        categories=tuple(categories), image_size=image_size, n_train=n_train, n_eval=n_eval
    )


def save_dataset(dataset: ToyDataset, root: str | Path) -> None:
    """PNG images plus a JSON index with annotations and the vocabulary file."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for image_id, arr in dataset.images.items():
        Image.fromarray(arr).save(root / "images" / f"{image_id}.png")
    index = {
        "seed": dataset.seed,
        "image_size": dataset.spec.image_size,
        "train_ids": list(dataset.train_ids),
        "eval_ids": list(dataset.eval_ids),
        "annotations": {
            str(image_id): [
                {"box": list(a.box), "category_id": a.category_id} for a in anns
            ]
            for image_id, anns in sorted(dataset.annotations.items())
        },
        "categories": {
            str(cid): {"name": dataset.vocabulary[cid].name, "split": dataset.vocabulary[cid].split_tag}
            for cid in range(len(dataset.vocabulary))
        },
    }
    with open(root / "annotations.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
