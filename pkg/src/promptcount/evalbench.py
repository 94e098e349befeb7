"""Counting metrics, k-shot exemplar evaluation, and report emission.

MAE is the mean absolute difference between ground-truth and predicted
counts over the test images; NMAE divides each image's absolute error by
its ground-truth count before averaging. Instances are additionally
stratified into COCO-style size bins (small < 32^2 <= medium <= 96^2 <
large, by pixel area; boundary areas fall in the higher bin as written).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .geometry import Box
from .model import (
    CountingModel,
    ImageInput,
    PromptEntry,
    PromptSet,
    count_from_detections,
    decode,
    encode_image,
    encode_prompts,
    load_checkpoint,
)
from .scenegen import Dataset, SceneRecord

SIZE_SMALL_MAX = 32 * 32  # exclusive upper edge of "small"
SIZE_MEDIUM_MAX = 96 * 96  # inclusive upper edge of "medium"


class EmptyRecordsError(ValueError):
    """Metrics require at least one evaluation record."""


class ZeroGroundTruthError(ValueError):
    """NMAE is undefined for images with zero ground-truth count."""


class InsufficientExemplarsError(ValueError):
    """Some images provide fewer exemplar boxes than the requested k."""


@dataclass
class EvalRecord:
    image_id: int
    gt_count: int
    pred_count: int

    @property
    def abs_error(self) -> float:
        return abs(self.gt_count - self.pred_count)

    @property
    def norm_error(self) -> float:
        if self.gt_count < 1:
            raise ZeroGroundTruthError(
                f"image {self.image_id} has zero ground-truth count"
            )
        return self.abs_error / self.gt_count


@dataclass
class MetricsReport:
    j: int
    mae: float
    nmae: float
    shots: int
    threshold: float
    size_bins: dict[str, int] = field(default_factory=dict)
    per_dataset: dict[str, dict] = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)


def mae(records: list[EvalRecord]) -> float:
    if not records:
        raise EmptyRecordsError("no evaluation records")
    return sum(r.abs_error for r in records) / len(records)


def nmae(records: list[EvalRecord]) -> float:
    if not records:
        raise EmptyRecordsError("no evaluation records")
    return sum(r.norm_error for r in records) / len(records)


def size_stratify(dataset: Dataset) -> dict[str, int]:
    """Assign every annotated instance to exactly one size bin by pixel
    area of its box."""
    bins = {"small": 0, "medium": 0, "large": 0}
    for rec in dataset:
        for box in rec.target_boxes + rec.distractor_boxes:
            area = box.width * rec.width * box.height * rec.height
            if area < SIZE_SMALL_MAX:
                bins["small"] += 1
            elif area <= SIZE_MEDIUM_MAX:
                bins["medium"] += 1
            else:
                bins["large"] += 1
    return bins


class ModelBackend:
    """Counts a scene by prompting the detector with exemplar boxes."""

    def __init__(self, model: CountingModel):
        self.model = model

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "ModelBackend":
        return cls(load_checkpoint(path))

    def count(
        self, record: SceneRecord, prompt_boxes: list[Box], threshold: float
    ) -> int:
        img = ImageInput.from_array(record.load_image())
        pyramid = encode_image(img, self.model)
        prompts = PromptSet(
            [PromptEntry(b, "positive", img.key) for b in prompt_boxes]
        )
        embedding = encode_prompts(prompts, {img.key: pyramid}, self.model)
        dets = decode(embedding, pyramid, self.model)
        return count_from_detections(dets, threshold).count


class OracleBackend:
    """Perfect predictor used as a test seam: returns the ground truth."""

    def count(self, record: SceneRecord, prompt_boxes, threshold) -> int:
        return record.count


def k_shot_eval(
    dataset: Dataset,
    backend,
    k: int,
    threshold: float,
    dataset_name: str | None = None,
) -> MetricsReport:
    """Evaluate counting with the first k exemplar boxes of each image
    used as positive prompts on the image itself."""
    if k not in (1, 2, 3):
        raise ValueError(f"k must be 1, 2, or 3, got {k}")
    if isinstance(backend, (str, Path)):
        backend = ModelBackend.from_checkpoint(backend)

    short = [r.image_id for r in dataset if len(r.exemplar_boxes) < k]
    if short:
        raise InsufficientExemplarsError(
            f"images with fewer than {k} exemplars: {short}"
        )

    records = [
        EvalRecord(
            image_id=rec.image_id,
            gt_count=rec.count,
            pred_count=backend.count(rec, rec.exemplar_boxes[:k], threshold),
        )
        for rec in dataset
    ]
    name = dataset_name or dataset.root.name
    report = MetricsReport(
        j=len(records),
        mae=mae(records),
        nmae=nmae(records),
        shots=k,
        threshold=threshold,
        size_bins=size_stratify(dataset),
        per_dataset={
            name: {"j": len(records), "mae": mae(records), "nmae": nmae(records)}
        },
        records=[
            {
                "image_id": r.image_id,
                "gt_count": r.gt_count,
                "pred_count": r.pred_count,
                "abs_error": r.abs_error,
                "norm_error": r.norm_error,
            }
            for r in records
        ],
    )
    return report


def report_from_dict(data: dict) -> MetricsReport:
    return MetricsReport(**data)


def emit_report(report: MetricsReport, path: str | Path) -> tuple[Path, Path]:
    """Write report.json (full records) and summary.txt; byte-identical
    for identical reports."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    with open(json_path, "w") as f:
        json.dump(asdict(report), f, indent=1, sort_keys=True)

    lines = [
        f"protocol: {report.shots}-shot @ threshold {report.threshold:.2f}",
        f"images:   {report.j}",
        f"MAE:      {report.mae:.2f}",
        f"NMAE:     {report.nmae:.2f}",
        "size bins: "
        + ", ".join(f"{k}={v}" for k, v in sorted(report.size_bins.items())),
        "",
        f"{'dataset':<24}{'J':>6}{'MAE':>10}{'NMAE':>10}",
    ]
    for name, row in sorted(report.per_dataset.items()):
        lines.append(
            f"{name:<24}{row['j']:>6}{row['mae']:>10.2f}{row['nmae']:>10.2f}"
        )
    text_path = out / "summary.txt"
    text_path.write_text("\n".join(lines) + "\n")
    return json_path, text_path
