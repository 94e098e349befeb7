"""Neural pipeline: image encoder -> prompt encoder -> box decoder.

A small residual convolutional backbone produces a three-level feature
pyramid (strides 8/16/32). Visual prompts (boxes or points, drawn on any
encoded image) are pooled from the pyramid into appearance embeddings.
A query-based transformer decoder attends over the target pyramid and
scores every query against the prompt embedding, which is what makes the
detector category-free: there is no fixed class head, only embedding
similarity under a learned temperature.

Negative prompts act at inference only: each query's positive score s+
is multiplied by (1 - s-), the complement of its similarity to the
negative embedding.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from torchvision.ops import roi_align

from .geometry import Box, Point

STRIDES = (8, 16, 32)
POINT_PSEUDO_BOX_SIDE = 0.02
CHECKPOINT_FORMAT_VERSION = 1

POSITIVE = "positive"
NEGATIVE = "negative"


class ImageSizeError(ValueError):
    """Image dimensions outside the supported [64, 1024] range."""


class NoPositivePromptError(ValueError):
    """Decoding requires at least one positive prompt."""


class MissingPyramidError(KeyError):
    """A prompt references an image whose pyramid was never encoded."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or has an incompatible version."""


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 256
    embed_dim: int = 128
    num_queries: int = 100
    decoder_layers: int = 3
    num_heads: int = 8
    tau_init: float = 10.0
    score_threshold: float = 0.3

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.resolution % STRIDES[-1] != 0:
            raise ValueError(f"resolution must be divisible by {STRIDES[-1]}")


@dataclass(frozen=True)
class LetterboxTransform:
    """Aspect-preserving resize + centered padding into the model frame.

    Both source and model coordinates are normalized to [0, 1]; the
    forward/inverse maps compose to the identity for in-image points.
    """

    src_w: int
    src_h: int
    resolution: int

    @property
    def scale(self) -> float:
        return self.resolution / max(self.src_w, self.src_h)

    @property
    def content_w(self) -> int:
        return round(self.src_w * self.scale)

    @property
    def content_h(self) -> int:
        return round(self.src_h * self.scale)

    @property
    def pad_x(self) -> int:
        return (self.resolution - self.content_w) // 2

    @property
    def pad_y(self) -> int:
        return (self.resolution - self.content_h) // 2

    def point_to_model(self, p: Point) -> Point:
        x = (p.x * self.content_w + self.pad_x) / self.resolution
        y = (p.y * self.content_h + self.pad_y) / self.resolution
        return Point(x, y)

    def point_to_image(self, x: float, y: float) -> tuple[float, float]:
        xi = (x * self.resolution - self.pad_x) / self.content_w
        yi = (y * self.resolution - self.pad_y) / self.content_h
        return xi, yi

    def box_to_model(self, b: Box) -> Box:
        p0 = self.point_to_model(Point(b.x_min, b.y_min))
        p1 = self.point_to_model(Point(b.x_max, b.y_max))
        return Box(p0.x, p0.y, p1.x, p1.y)

    def box_to_image(self, b: Box) -> Box:
        x0, y0 = self.point_to_image(b.x_min, b.y_min)
        x1, y1 = self.point_to_image(b.x_max, b.y_max)
        # detections that spill into the padded margin clamp to the frame
        x0 = min(max(x0, 0.0), 1.0)
        y0 = min(max(y0, 0.0), 1.0)
        x1 = min(max(x1, 0.0), 1.0)
        y1 = min(max(y1, 0.0), 1.0)
        eps = 1e-6
        if x1 - x0 < eps:
            x0, x1 = (max(0.0, x1 - eps), x1) if x1 > eps else (0.0, eps)
        if y1 - y0 < eps:
            y0, y1 = (max(0.0, y1 - eps), y1) if y1 > eps else (0.0, eps)
        return Box(x0, y0, x1, y1)


@dataclass
class ImageInput:
    """An RGB raster plus a content-hash key used for pyramid caching."""

    pixels: np.ndarray
    key: str

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "ImageInput":
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
            raise ValueError("expected HxWx3 uint8 array")
        h, w = pixels.shape[:2]
        if not (64 <= h <= 1024 and 64 <= w <= 1024):
            raise ImageSizeError(
                f"image dimensions {w}x{h} outside supported range [64, 1024]"
            )
        key = hashlib.sha1(pixels.tobytes()).hexdigest()
        return cls(pixels=pixels, key=key)

    @classmethod
    def from_file(cls, path: str | Path) -> "ImageInput":
        return cls.from_array(np.asarray(Image.open(path).convert("RGB")))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class FeaturePyramid:
    """Cached image features: one [d, h, w] tensor per stride level."""

    levels: list[torch.Tensor]
    transform: LetterboxTransform
    image_key: str


@dataclass(frozen=True)
class PromptEntry:
    geometry: Box | Point
    polarity: str
    image_key: str

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"unknown polarity {self.polarity!r}")


@dataclass
class PromptSet:
    entries: list[PromptEntry] = field(default_factory=list)

    def validate(self) -> None:
        if not any(e.polarity == POSITIVE for e in self.entries):
            raise NoPositivePromptError("at least one positive prompt required")


@dataclass
class PromptEmbedding:
    positive: torch.Tensor
    negative: torch.Tensor | None
    n_positive: int
    n_negative: int


@dataclass
class DetectionSet:
    """Decoder output: one box + score per query.

    `scores` already include negative suppression when a negative prompt
    embedding was supplied; `s_pos` / `s_neg` keep the raw factors so the
    suppression algebra stays inspectable (and exactly reversible).
    """

    boxes: list[Box]
    scores: list[float]
    s_pos: list[float]
    s_neg: list[float] | None
    embeddings: np.ndarray


@dataclass
class CountResult:
    boxes: list[Box]
    scores: list[float]
    count: int
    threshold: float
    round_number: int = 0


def sine_position_encoding(h: int, w: int, dim: int) -> torch.Tensor:
    """2D sinusoidal positional encoding, [h*w, dim]."""
    half = dim // 2
    ys = torch.arange(h, dtype=torch.float32).add(0.5).div(h)
    xs = torch.arange(w, dtype=torch.float32).add(0.5).div(w)
    freqs = torch.exp(
        torch.arange(0, half, 2, dtype=torch.float32)
        * (-math.log(10000.0) / half)
    )
    def encode(coords):
        args = coords[:, None] * freqs[None, :] * 2 * math.pi
        return torch.cat([args.sin(), args.cos()], dim=1)
    ey = encode(ys)  # [h, half]
    ex = encode(xs)  # [w, half]
    pos = torch.cat(
        [
            ey[:, None, :].expand(h, w, half),
            ex[None, :, :].expand(h, w, half),
        ],
        dim=2,
    )
    return pos.reshape(h * w, dim)


def sine_point_encoding(xy: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of normalized (x, y) points, [n, dim]."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(0, half, 2, dtype=xy.dtype, device=xy.device)
        * (-math.log(10000.0) / half)
    )

    def encode(coords):
        args = coords[:, None] * freqs[None, :] * 2 * math.pi
        return torch.cat([args.sin(), args.cos()], dim=1)

    return torch.cat([encode(xy[:, 1]), encode(xy[:, 0])], dim=1)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1.0 - eps)
    return torch.log(x / (1.0 - x))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, channels)

    def forward(self, x):
        y = F.silu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.silu(x + y)


class Backbone(nn.Module):
    """Four-stage residual convnet emitting features at strides 8/16/32,
    each projected to the shared embedding width."""

    def __init__(self, dim: int):
        super().__init__()
        widths = (32, 48, 64, 96, 128)
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, stride=2, padding=1),
            nn.GroupNorm(8, widths[0]),
            nn.SiLU(),
            nn.Conv2d(widths[0], widths[1], 3, stride=2, padding=1),
            nn.GroupNorm(8, widths[1]),
            nn.SiLU(),
        )
        self.stage8 = nn.Sequential(
            nn.Conv2d(widths[1], widths[2], 3, stride=2, padding=1),
            nn.GroupNorm(8, widths[2]),
            nn.SiLU(),
            ResidualBlock(widths[2]),
        )
        self.stage16 = nn.Sequential(
            nn.Conv2d(widths[2], widths[3], 3, stride=2, padding=1),
            nn.GroupNorm(8, widths[3]),
            nn.SiLU(),
            ResidualBlock(widths[3]),
        )
        self.stage32 = nn.Sequential(
            nn.Conv2d(widths[3], widths[4], 3, stride=2, padding=1),
            nn.GroupNorm(8, widths[4]),
            nn.SiLU(),
            ResidualBlock(widths[4]),
        )
        self.proj = nn.ModuleList(
            [nn.Conv2d(c, dim, 1) for c in (widths[2], widths[3], widths[4])]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        f8 = self.stage8(x)
        f16 = self.stage16(f8)
        f32 = self.stage32(f16)
        return [p(f) for p, f in zip(self.proj, (f8, f16, f32))]


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ffn = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.SiLU(), nn.Linear(dim * 4, dim)
        )
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, q, memory, memory_pos, attn_bias=None):
        q = self.norm1(q + self.self_attn(q, q, q, need_weights=False)[0])
        # positions ride along in the values as well: with visually
        # identical instances the attended appearance alone carries no
        # location signal, so the box head needs attended positions to
        # regress precise centers
        q = self.norm2(
            q
            + self.cross_attn(
                q,
                memory + memory_pos,
                memory + memory_pos,
                need_weights=False,
                attn_mask=attn_bias,
            )[0]
        )
        return self.norm3(q + self.ffn(q))


class CountingModel(nn.Module):
    """End-to-end network: backbone, prompt pooling head, box decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.backbone = Backbone(d)
        self.prompt_mlp = nn.Sequential(
            nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d)
        )
        self.query_embed = nn.Parameter(torch.randn(config.num_queries, d) * 0.02)
        # Per-query box anchors on a jittered grid; each decoder layer
        # refines them in logit space, which converges far faster at small
        # step budgets than regressing boxes from scratch.
        side = math.ceil(math.sqrt(config.num_queries))
        centers = torch.tensor(
            [
                [(i % side + 0.5) / side, (i // side + 0.5) / side]
                for i in range(config.num_queries)
            ]
        )
        sizes = torch.full((config.num_queries, 2), 0.1)
        self.anchor_logit = nn.Parameter(
            inverse_sigmoid(torch.cat([centers, sizes], dim=1))
        )
        self.query_pos_mlp = nn.Sequential(
            nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d)
        )
        # per-layer log-width of the Gaussian cross-attention window
        self.attn_sigma = nn.Parameter(
            torch.full((config.decoder_layers,), math.log(0.15))
        )
        self.level_embed = nn.Parameter(torch.zeros(len(STRIDES), d))
        self.layers = nn.ModuleList(
            DecoderLayer(d, config.num_heads) for _ in range(config.decoder_layers)
        )
        self.out_norm = nn.LayerNorm(d)
        self.box_head = nn.Sequential(
            nn.Linear(d, d), nn.SiLU(), nn.Linear(d, 4)
        )
        self.embed_head = nn.Linear(d, d)
        self.tau = nn.Parameter(torch.tensor(float(config.tau_init)))

    # --- image encoding -------------------------------------------------

    def compute_pyramid(self, images: torch.Tensor) -> list[torch.Tensor]:
        """images: [b, 3, R, R] float in [-1, 1]; returns per-level
        [b, d, h, w] feature maps (positional encodings deferred to the
        decoder so pooled prompt features encode appearance only)."""
        return self.backbone(images)

    # --- prompt encoding ------------------------------------------------

    def pool_prompt(
        self, levels: list[torch.Tensor], box: Box
    ) -> torch.Tensor:
        """Region-aligned average pooling at the pyramid level whose
        stride best matches the box size, followed by the prompt MLP."""
        res = self.config.resolution
        size_px = math.sqrt(box.width * box.height) * res
        level_idx = min(
            range(len(STRIDES)),
            key=lambda i: abs(STRIDES[i] - size_px / 8.0),
        )
        feat = levels[level_idx]
        stride = STRIDES[level_idx]
        rois = torch.tensor(
            [
                [
                    0.0,
                    box.x_min * res / stride,
                    box.y_min * res / stride,
                    box.x_max * res / stride,
                    box.y_max * res / stride,
                ]
            ],
            dtype=feat.dtype,
            device=feat.device,
        )
        pooled = roi_align(
            feat[None] if feat.dim() == 3 else feat,
            rois,
            output_size=(4, 4),
            aligned=True,
        )
        vec = pooled.mean(dim=(2, 3)).squeeze(0)
        vec = self.prompt_mlp(vec)
        return F.normalize(vec, dim=-1)

    def aggregate_prompts(self, vecs: list[torch.Tensor]) -> torch.Tensor:
        stacked = torch.stack(vecs)
        return F.normalize(stacked.mean(dim=0), dim=-1)

    # --- decoding -------------------------------------------------------

    def flatten_memory(
        self, levels: list[torch.Tensor]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Flatten pyramid levels into [b, tokens, d] plus matching
        positional encodings (sine + learned level embedding) and the
        normalized (x, y) center of every token."""
        tokens = []
        positions = []
        coords = []
        d = self.config.embed_dim
        for i, feat in enumerate(levels):
            if feat.dim() == 3:
                feat = feat[None]
            b, _, h, w = feat.shape
            tokens.append(feat.flatten(2).transpose(1, 2))
            pos = sine_position_encoding(h, w, d).to(feat.dtype).to(feat.device)
            positions.append(pos[None].expand(b, -1, -1) + self.level_embed[i])
            ys = (torch.arange(h, dtype=feat.dtype) + 0.5) / h
            xs = (torch.arange(w, dtype=feat.dtype) + 0.5) / w
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            coords.append(torch.stack([gx, gy], dim=-1).reshape(h * w, 2))
        return (
            torch.cat(tokens, dim=1),
            torch.cat(positions, dim=1),
            torch.cat(coords, dim=0),
        )

    def run_decoder(
        self,
        positive: torch.Tensor,
        levels: list[torch.Tensor],
    ) -> dict[str, torch.Tensor]:
        """Run the query decoder against one image's pyramid.

        Returns center-form boxes [N_q, 4], positive scores [N_q], and
        unit-normalized query embeddings [N_q, d] for the final layer,
        plus the same fields for every earlier layer under ``"aux"``
        (consumed by the auxiliary training losses, ignored at inference).
        """
        memory, memory_pos, token_xy = self.flatten_memory(levels)
        q = (self.query_embed + positive[None, :])[None]
        ref = self.anchor_logit.to(q.dtype)
        outputs: list[dict[str, torch.Tensor]] = []
        for layer, log_sigma in zip(self.layers, self.attn_sigma):
            center = torch.sigmoid(ref[:, :2])
            q_pos = self.query_pos_mlp(
                sine_point_encoding(center, self.config.embed_dim)
            )[None]
            # Gaussian locality prior on cross-attention: each query
            # starts out looking near its current box center instead of
            # waiting for a diffuse softmax over every token to sharpen
            sq_dist = (
                (center[:, None, :] - token_xy[None, :, :]) ** 2
            ).sum(-1)
            attn_bias = -sq_dist / (2.0 * torch.exp(log_sigma) ** 2)
            q = layer(q + q_pos, memory, memory_pos, attn_bias=attn_bias)
            h = self.out_norm(q).squeeze(0)
            ref = ref + self.box_head(h)
            emb = F.normalize(self.embed_head(h), dim=-1)
            s_pos = torch.sigmoid(self.tau * (emb @ positive))
            outputs.append(
                {
                    "boxes_cxcywh": torch.sigmoid(ref),
                    "s_pos": s_pos,
                    "embeddings": emb,
                }
            )
        out = outputs[-1]
        out["aux"] = outputs[:-1]
        return out


# --- functional inference API ------------------------------------------


def preprocess(img: ImageInput, config: ModelConfig) -> tuple[torch.Tensor, LetterboxTransform]:
    """Letterbox an image into the model frame and scale to [-1, 1]."""
    tf = LetterboxTransform(img.width, img.height, config.resolution)
    pil = Image.fromarray(img.pixels).resize(
        (tf.content_w, tf.content_h), Image.BILINEAR
    )
    canvas = np.full(
        (config.resolution, config.resolution, 3), 114, dtype=np.uint8
    )
    canvas[
        tf.pad_y : tf.pad_y + tf.content_h, tf.pad_x : tf.pad_x + tf.content_w
    ] = np.asarray(pil)
    tensor = torch.from_numpy(canvas).permute(2, 0, 1).float().div(127.5).sub(1.0)
    return tensor[None], tf


def encode_image(img: ImageInput, model: CountingModel) -> FeaturePyramid:
    """One full image-encoder pass; everything downstream reuses the
    returned pyramid."""
    tensor, tf = preprocess(img, model.config)
    with torch.no_grad():
        was_training = model.training
        model.eval()
        levels = model.compute_pyramid(tensor)
        if was_training:
            model.train()
    return FeaturePyramid(
        levels=[lvl.squeeze(0) for lvl in levels],
        transform=tf,
        image_key=img.key,
    )


def _entry_model_box(entry: PromptEntry, tf: LetterboxTransform) -> Box:
    if isinstance(entry.geometry, Point):
        p = tf.point_to_model(entry.geometry)
        half = POINT_PSEUDO_BOX_SIDE / 2
        return Box(
            max(0.0, p.x - half),
            max(0.0, p.y - half),
            min(1.0, p.x + half),
            min(1.0, p.y + half),
        )
    return tf.box_to_model(entry.geometry)


def encode_prompts(
    prompts: PromptSet,
    pyramids: dict[str, FeaturePyramid],
    model: CountingModel,
) -> PromptEmbedding:
    """Pool every prompt from its source pyramid and mean-aggregate per
    polarity into at most two unit embeddings."""
    prompts.validate()
    pos_vecs: list[torch.Tensor] = []
    neg_vecs: list[torch.Tensor] = []
    with torch.no_grad():
        for entry in prompts.entries:
            if entry.image_key not in pyramids:
                raise MissingPyramidError(
                    f"no encoded pyramid for image key {entry.image_key!r}"
                )
            pyr = pyramids[entry.image_key]
            box = _entry_model_box(entry, pyr.transform)
            vec = model.pool_prompt(pyr.levels, box)
            (pos_vecs if entry.polarity == POSITIVE else neg_vecs).append(vec)
        positive = model.aggregate_prompts(pos_vecs)
        negative = model.aggregate_prompts(neg_vecs) if neg_vecs else None
    return PromptEmbedding(
        positive=positive,
        negative=negative,
        n_positive=len(pos_vecs),
        n_negative=len(neg_vecs),
    )


def cxcywh_to_box(cx, cy, w, h, tf: LetterboxTransform | None = None) -> Box:
    eps = 1e-6
    x0 = min(max(cx - w / 2, 0.0), 1.0 - eps)
    y0 = min(max(cy - h / 2, 0.0), 1.0 - eps)
    x1 = min(max(cx + w / 2, x0 + eps), 1.0)
    y1 = min(max(cy + h / 2, y0 + eps), 1.0)
    b = Box(x0, y0, x1, y1)
    return tf.box_to_image(b) if tf is not None else b


def decode(
    prompt: PromptEmbedding,
    target: FeaturePyramid,
    model: CountingModel,
) -> DetectionSet:
    """Detect all prompt-similar instances in the target pyramid.

    Boxes come back in the target image's own normalized coordinates.
    """
    if prompt.positive is None:
        raise NoPositivePromptError("prompt embedding lacks a positive vector")
    with torch.no_grad():
        was_training = model.training
        model.eval()
        out = model.run_decoder(prompt.positive, target.levels)
        if was_training:
            model.train()
        s_pos = out["s_pos"]
        s_pos_list = s_pos.tolist()
        if prompt.negative is not None:
            s_neg = torch.sigmoid(
                model.tau * (out["embeddings"] @ prompt.negative)
            )
            s_neg_list = s_neg.tolist()
            # float64 products keep the suppression algebra exact and
            # exactly reversible (dropping the negative restores s_pos)
            scores_list = [
                sp * (1.0 - sn) for sp, sn in zip(s_pos_list, s_neg_list)
            ]
        else:
            scores_list = s_pos_list
            s_neg_list = None
    boxes = [
        cxcywh_to_box(cx, cy, w, h, target.transform)
        for cx, cy, w, h in out["boxes_cxcywh"].tolist()
    ]
    return DetectionSet(
        boxes=boxes,
        scores=scores_list,
        s_pos=s_pos_list,
        s_neg=s_neg_list,
        embeddings=out["embeddings"].numpy(),
    )


def count_from_detections(
    dets: DetectionSet, threshold: float, round_number: int = 0
) -> CountResult:
    """Threshold-filter detections; the count is the cardinality of the
    kept sub-list."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must be in [0,1], got {threshold}")
    order = sorted(
        range(len(dets.scores)), key=lambda i: dets.scores[i], reverse=True
    )
    kept = [i for i in order if dets.scores[i] >= threshold]
    return CountResult(
        boxes=[dets.boxes[i] for i in kept],
        scores=[dets.scores[i] for i in kept],
        count=len(kept),
        threshold=threshold,
        round_number=round_number,
    )


def nms_detections(dets: DetectionSet, iou_threshold: float = 0.7) -> DetectionSet:
    """Optional duplicate suppression over a DetectionSet (off by default
    in the pipeline)."""
    from .geometry import nms

    keep = nms(dets.boxes, dets.scores, iou_threshold)
    return DetectionSet(
        boxes=[dets.boxes[i] for i in keep],
        scores=[dets.scores[i] for i in keep],
        s_pos=[dets.s_pos[i] for i in keep],
        s_neg=[dets.s_neg[i] for i in keep] if dets.s_neg is not None else None,
        embeddings=dets.embeddings[keep],
    )


# --- checkpoint I/O -----------------------------------------------------


def save_checkpoint(
    model: CountingModel,
    path: str | Path,
    train_seed: int | None = None,
) -> Path:
    """Versioned container: JSON header + named parameter arrays."""
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(model.config),
        "train_seed": train_seed,
    }
    buf = io.BytesIO()
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    np.savez(buf, **arrays)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("header.json", json.dumps(header, indent=1))
        zf.writestr("params.npz", buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> CountingModel:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            params = np.load(io.BytesIO(zf.read("params.npz")))
            arrays = {k: params[k] for k in params.files}
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from e
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        config = ModelConfig(**header["model_config"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"invalid model config in checkpoint: {e}") from e
    model = CountingModel(config)
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    try:
        missing, unexpected = model.load_state_dict(state, strict=False)
    except RuntimeError as e:
        raise CheckpointError(
            f"checkpoint parameters do not match config: {e}"
        ) from e
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint parameters do not match config: "
            f"missing={missing}, unexpected={unexpected}"
        )
    model.eval()
    return model
