"""Deterministic procedural generator of synthetic counting scenes.

Scenes are square RGB rasters populated with hard-edged shapes (no
anti-aliasing, so images are byte-identical across platforms for a given
config + seed). Each scene carries box annotations for target instances
and optional visually-distinct distractors. Datasets serialize to a
COCO-style directory layout so real detection data can be ingested by the
evaluation tooling with no format changes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Box, iou

SHAPES = ("disc", "square", "triangle", "ring")
BACKGROUNDS = ("flat", "gradient", "noise")

MAX_PLACEMENT_ATTEMPTS = 10_000

DATASET_FORMAT_VERSION = 1
TARGET_CATEGORY_ID = 1
DISTRACTOR_CATEGORY_ID = 2


class PlacementError(RuntimeError):
    """Rejection sampling could not place all requested instances."""


class DatasetFormatError(ValueError):
    """A dataset file is malformed or has an unsupported version."""


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 256
    n_target: tuple[int, int] = (5, 30)
    n_distractor: tuple[int, int] = (0, 0)
    target_shape: str = "disc"
    distractor_shape: str = "square"
    target_color: tuple[int, int, int] = (210, 70, 60)
    distractor_color: tuple[int, int, int] = (70, 110, 210)
    size_range: tuple[float, float] = (0.05, 0.11)
    color_jitter: float = 8.0
    max_overlap_iou: float = 0.05
    background: str = "flat"
    seed: int = 0

    def __post_init__(self):
        if self.n_target[0] < 1 or self.n_target[0] > self.n_target[1]:
            raise ValueError(f"bad n_target range {self.n_target}")
        if self.n_distractor[0] < 0 or self.n_distractor[0] > self.n_distractor[1]:
            raise ValueError(f"bad n_distractor range {self.n_distractor}")
        if not (0.0 <= self.max_overlap_iou < 1.0):
            raise ValueError("max_overlap_iou must be in [0,1)")
        if self.target_shape not in SHAPES or self.distractor_shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")
        if self.n_distractor[1] > 0 and (
            self.target_shape == self.distractor_shape
            and self.target_color == self.distractor_color
        ):
            raise ValueError(
                "target and distractor must differ in shape or color"
            )


@dataclass
class SceneAnnotation:
    target_boxes: list[Box]
    distractor_boxes: list[Box] = field(default_factory=list)
    image_ref: str | None = None

    @property
    def count(self) -> int:
        return len(self.target_boxes)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean mask of a hard-edged shape inscribed in a size x size cell."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = size / 2.0
    if shape == "disc":
        return (xx - c) ** 2 + (yy - c) ** 2 <= r * r
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        # upward-pointing triangle inscribed in the cell
        frac = yy / max(size - 1, 1)
        half = frac * r
        return np.abs(xx - c) <= half
    if shape == "ring":
        d2 = (xx - c) ** 2 + (yy - c) ** 2
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def _render_background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    if cfg.background == "flat":
        return np.full((n, n, 3), 38, dtype=np.uint8)
    if cfg.background == "gradient":
        ramp = np.linspace(20, 80, n).astype(np.uint8)
        return np.repeat(ramp[:, None, None], 3, axis=2).repeat(n, axis=1).reshape(n, n, 3)
    # noise background draws from the seeded stream so it stays deterministic
    return rng.integers(15, 70, size=(n, n, 3), dtype=np.uint8)


def _jitter_color(
    base: tuple[int, int, int], stddev: float, rng: np.random.Generator
) -> np.ndarray:
    jit = rng.normal(0.0, stddev, size=3)
    return np.clip(np.asarray(base, dtype=np.float64) + jit, 0, 255).astype(np.uint8)


def generate_scene(cfg: SceneConfig) -> tuple[np.ndarray, SceneAnnotation]:
    """Render one scene. Byte-deterministic given the config (incl. seed).

    Raises PlacementError when rejection sampling exhausts its attempt
    budget, which signals an over-dense configuration.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = cfg.image_size
    image = _render_background(cfg, rng)

    n_tgt = int(rng.integers(cfg.n_target[0], cfg.n_target[1] + 1))
    n_dis = (
        int(rng.integers(cfg.n_distractor[0], cfg.n_distractor[1] + 1))
        if cfg.n_distractor[1] > 0
        else cfg.n_distractor[0]
    )

    placed: list[Box] = []
    attempts = 0
    plan: list[tuple[str, tuple[int, int, int], int, int, int, Box]] = []

    for shape, color, want in (
        (cfg.target_shape, cfg.target_color, n_tgt),
        (cfg.distractor_shape, cfg.distractor_color, n_dis),
    ):
        for _ in range(want):
            while True:
                attempts += 1
                if attempts > MAX_PLACEMENT_ATTEMPTS:
                    raise PlacementError(
                        f"could not place {n_tgt + n_dis} instances in "
                        f"{MAX_PLACEMENT_ATTEMPTS} attempts; config too dense"
                    )
                size_px = max(
                    4,
                    int(round(rng.uniform(*cfg.size_range) * n)),
                )
                x0 = int(rng.integers(0, n - size_px + 1))
                y0 = int(rng.integers(0, n - size_px + 1))
                cand = Box(x0 / n, y0 / n, (x0 + size_px) / n, (y0 + size_px) / n)
                if all(iou(cand, other) <= cfg.max_overlap_iou for other in placed):
                    placed.append(cand)
                    plan.append((shape, color, x0, y0, size_px, cand))
                    break

    target_boxes: list[Box] = []
    distractor_boxes: list[Box] = []
    for i, (shape, color, x0, y0, size_px, box) in enumerate(plan):
        mask = _shape_mask(shape, size_px)
        color_arr = _jitter_color(color, cfg.color_jitter, rng)
        region = image[y0 : y0 + size_px, x0 : x0 + size_px]
        region[mask] = color_arr
        if i < n_tgt:
            target_boxes.append(box)
        else:
            distractor_boxes.append(box)

    return image, SceneAnnotation(target_boxes, distractor_boxes)


def generate_scenes(
    cfg: SceneConfig, count: int, seed_start: int | None = None
) -> list[tuple[np.ndarray, SceneAnnotation]]:
    """Generate `count` scenes with consecutive seeds starting at the
    config seed (or seed_start)."""
    base = cfg.seed if seed_start is None else seed_start
    return [generate_scene(replace(cfg, seed=base + i)) for i in range(count)]


def make_failure_suite(
    master_seed: int = 0,
) -> list[tuple[np.ndarray, SceneAnnotation, str]]:
    """Adversarial scene families covering the known failure archetypes.

    Three families, 10 scenes each, fully determined by master_seed:
    single-target scenes, dense multi-object scenes with two visually
    similar categories, and single-target scenes meant to serve as
    cross-image targets.
    """
    suite: list[tuple[np.ndarray, SceneAnnotation, str]] = []

    single = SceneConfig(
        n_target=(1, 1), size_range=(0.08, 0.16), seed=master_seed
    )
    for i in range(10):
        img, ann = generate_scene(replace(single, seed=master_seed + i))
        suite.append((img, ann, "single-target"))

    dense = SceneConfig(
        n_target=(30, 40),
        n_distractor=(30, 40),
        target_shape="disc",
        distractor_shape="disc",
        target_color=(210, 70, 60),
        distractor_color=(190, 95, 70),
        size_range=(0.03, 0.05),
        seed=master_seed + 1000,
    )
    for i in range(10):
        img, ann = generate_scene(replace(dense, seed=master_seed + 1000 + i))
        suite.append((img, ann, "dense-multi-object"))

    cross = SceneConfig(
        n_target=(1, 1), size_range=(0.10, 0.18), seed=master_seed + 2000
    )
    for i in range(10):
        img, ann = generate_scene(replace(cross, seed=master_seed + 2000 + i))
        suite.append((img, ann, "cross-image-single-target"))

    return suite


@dataclass
class SceneRecord:
    """One dataset entry after loading: paths, sizes, and pixel boxes
    converted back to normalized corner form."""

    image_id: int
    image_path: Path
    width: int
    height: int
    target_boxes: list[Box]
    distractor_boxes: list[Box]
    exemplar_boxes: list[Box]

    @property
    def count(self) -> int:
        return len(self.target_boxes)

    def load_image(self) -> np.ndarray:
        return np.asarray(Image.open(self.image_path).convert("RGB"))


@dataclass
class Dataset:
    root: Path
    records: list[SceneRecord]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def save_dataset(
    scenes: list[tuple[np.ndarray, SceneAnnotation]], path: str | Path
) -> Path:
    """Write scenes as `images/*.png` + `annotations.json` (COCO layout
    with an extra `exemplars` map of image_id -> up to 3 annotation ids)."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)

    images = []
    annotations = []
    exemplars: dict[str, list[int]] = {}
    ann_id = 1
    for img_idx, (image, ann) in enumerate(scenes):
        image_id = img_idx + 1
        h, w = image.shape[:2]
        file_name = f"scene_{image_id:05d}.png"
        Image.fromarray(image).save(root / "images" / file_name)
        images.append(
            {"id": image_id, "file_name": file_name, "width": w, "height": h}
        )
        ex_ids: list[int] = []
        for box in ann.target_boxes:
            bbox = [
                box.x_min * w,
                box.y_min * h,
                box.width * w,
                box.height * h,
            ]
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": TARGET_CATEGORY_ID,
                    "bbox": bbox,
                }
            )
            if len(ex_ids) < 3:
                ex_ids.append(ann_id)
            ann_id += 1
        for box in ann.distractor_boxes:
            bbox = [
                box.x_min * w,
                box.y_min * h,
                box.width * w,
                box.height * h,
            ]
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": DISTRACTOR_CATEGORY_ID,
                    "bbox": bbox,
                }
            )
            ann_id += 1
        exemplars[str(image_id)] = ex_ids

    payload = {
        "format_version": DATASET_FORMAT_VERSION,
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": TARGET_CATEGORY_ID, "name": "target"},
            {"id": DISTRACTOR_CATEGORY_ID, "name": "distractor"},
        ],
        "exemplars": exemplars,
    }
    with open(root / "annotations.json", "w") as f:
        json.dump(payload, f, indent=1)
    return root


def _pixel_bbox_to_box(
    bbox: list[float], w: int, h: int, record_idx: int
) -> Box:
    x, y, bw, bh = bbox
    if bw <= 0 or bh <= 0:
        raise DatasetFormatError(
            f"annotation record {record_idx}: non-positive bbox size {bbox}"
        )
    try:
        return Box(x / w, y / h, min((x + bw) / w, 1.0), min((y + bh) / h, 1.0))
    except ValueError as e:
        raise DatasetFormatError(
            f"annotation record {record_idx}: bbox out of bounds {bbox}: {e}"
        ) from e


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset directory written by save_dataset (or real
    COCO-style data following the same layout)."""
    root = Path(path)
    ann_path = root / "annotations.json"
    try:
        with open(ann_path) as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise DatasetFormatError(f"missing annotations file {ann_path}")
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"malformed annotations file {ann_path}: {e}")

    version = payload.get("format_version", DATASET_FORMAT_VERSION)
    if version != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset format version {version} "
            f"(expected {DATASET_FORMAT_VERSION})"
        )
    for key in ("images", "annotations"):
        if key not in payload:
            raise DatasetFormatError(f"missing top-level key {key!r}")

    by_image: dict[int, dict] = {}
    for img in payload["images"]:
        by_image[img["id"]] = {
            "meta": img,
            "targets": [],
            "distractors": [],
            "ann_boxes": {},
        }

    for idx, a in enumerate(payload["annotations"]):
        image_id = a.get("image_id")
        if image_id not in by_image:
            raise DatasetFormatError(
                f"annotation record {idx}: unknown image_id {image_id}"
            )
        entry = by_image[image_id]
        meta = entry["meta"]
        box = _pixel_bbox_to_box(a["bbox"], meta["width"], meta["height"], idx)
        entry["ann_boxes"][a["id"]] = box
        if a.get("category_id") == DISTRACTOR_CATEGORY_ID:
            entry["distractors"].append(box)
        else:
            entry["targets"].append(box)

    exemplars = payload.get("exemplars", {})
    records = []
    for image_id, entry in sorted(by_image.items()):
        meta = entry["meta"]
        ex_ids = exemplars.get(str(image_id), [])
        try:
            ex_boxes = [entry["ann_boxes"][i] for i in ex_ids]
        except KeyError as e:
            raise DatasetFormatError(
                f"image {image_id}: exemplar annotation id {e} not found"
            )
        if not ex_boxes:
            ex_boxes = entry["targets"][:3]
        records.append(
            SceneRecord(
                image_id=image_id,
                image_path=root / "images" / meta["file_name"],
                width=meta["width"],
                height=meta["height"],
                target_boxes=entry["targets"],
                distractor_boxes=entry["distractors"],
                exemplar_boxes=ex_boxes,
            )
        )
    return Dataset(root=root, records=records)


def filter_min_instances(dataset, k: int):
    """Keep only scenes with at least k target instances, preserving order.

    Accepts either a loaded Dataset or an in-memory list of
    (image, SceneAnnotation) pairs.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if isinstance(dataset, Dataset):
        kept = [r for r in dataset.records if r.count >= k]
        return Dataset(root=dataset.root, records=kept)
    return [(img, ann) for img, ann in dataset if ann.count >= k]
