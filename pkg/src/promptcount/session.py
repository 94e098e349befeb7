"""Interactive counting engine with per-image feature caching.

Each image (target or cross-image reference) passes through the image
encoder exactly once per session; every interaction round afterwards
touches only the prompt encoder and the box decoder, and threshold
changes re-filter the cached detections with no model execution at all.
Instrumented invocation counters make the contract testable.

Prompts accumulate across rounds and are re-aggregated jointly on every
change, so removing a prompt is exact and the result is a pure function
of (weights, cached pyramids, prompt history, threshold).
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field

from .geometry import Box, Point
from .model import (
    CountingModel,
    CountResult,
    DetectionSet,
    FeaturePyramid,
    ImageInput,
    NoPositivePromptError,
    POSITIVE,
    PromptEntry,
    PromptSet,
    count_from_detections,
    decode,
    encode_image,
    encode_prompts,
)


class UnknownRoundError(KeyError):
    """remove_prompt targeted a round not present in the history."""


class WouldLeaveNoPositiveError(ValueError):
    """Removing this prompt would leave negatives without any positive."""


class NoRoundsError(ValueError):
    """The operation requires at least one completed prompt round."""


@dataclass
class Session:
    """State for one interactive counting session."""

    model: CountingModel
    target_key: str
    session_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    pyramids: dict[str, FeaturePyramid] = field(default_factory=dict)
    encoder_invocations: dict[str, int] = field(default_factory=dict)
    prompt_encoder_calls: int = 0
    decoder_calls: int = 0
    history: dict[int, PromptEntry] = field(default_factory=dict)
    next_round: int = 1
    threshold: float = 0.3
    last_detections: DetectionSet | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _encode_once(self, img: ImageInput) -> None:
        if img.key in self.pyramids:
            return
        self.pyramids[img.key] = encode_image(img, self.model)
        self.encoder_invocations[img.key] = (
            self.encoder_invocations.get(img.key, 0) + 1
        )


def create_session(target: ImageInput, model: CountingModel) -> Session:
    """Encode the target image once and start an empty session."""
    s = Session(
        model=model,
        target_key=target.key,
        threshold=model.config.score_threshold,
    )
    s._encode_once(target)
    return s


def _recompute(s: Session, round_number: int) -> CountResult:
    entries = [s.history[r] for r in sorted(s.history)]
    prompt_set = PromptSet(entries)
    embedding = encode_prompts(prompt_set, s.pyramids, s.model)
    s.prompt_encoder_calls += 1
    dets = decode(embedding, s.pyramids[s.target_key], s.model)
    s.decoder_calls += 1
    s.last_detections = dets
    return count_from_detections(dets, s.threshold, round_number=round_number)


def add_prompt(
    s: Session,
    geometry: Box | Point,
    polarity: str,
    ref_image: ImageInput | None = None,
) -> CountResult:
    """Record a prompt and return the refreshed count.

    The prompt is drawn on the reference image when one is given (its
    pyramid is encoded on first sight and cached), otherwise on the
    session's target image. Detections always come back in target-image
    coordinates. The first prompt of a session must be positive.
    """
    with s.lock:
        if not s.history and polarity != POSITIVE:
            raise NoPositivePromptError("at least one positive prompt required")
        if ref_image is not None:
            s._encode_once(ref_image)
            image_key = ref_image.key
        else:
            image_key = s.target_key
        entry = PromptEntry(geometry=geometry, polarity=polarity, image_key=image_key)
        round_number = s.next_round
        s.history[round_number] = entry
        s.next_round += 1
        return _recompute(s, round_number)


def remove_prompt(s: Session, round_number: int) -> CountResult:
    """Undo the prompt added at the given round and refresh the count.

    Removing the last positive prompt while negatives remain is rejected;
    removing the final prompt of all clears the cached detections and
    returns an empty result without touching the model.
    """
    with s.lock:
        if round_number not in s.history:
            raise UnknownRoundError(f"no prompt at round {round_number}")
        remaining = {r: e for r, e in s.history.items() if r != round_number}
        if remaining and not any(
            e.polarity == POSITIVE for e in remaining.values()
        ):
            raise WouldLeaveNoPositiveError(
                "removing this prompt would leave no positive prompt"
            )
        s.history = remaining
        if not remaining:
            s.last_detections = None
            return CountResult(
                boxes=[], scores=[], count=0,
                threshold=s.threshold, round_number=0,
            )
        return _recompute(s, max(remaining))


def set_threshold(s: Session, threshold: float) -> CountResult:
    """Re-filter the cached detections at a new threshold; no model calls."""
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold must be in [0,1], got {threshold}")
    with s.lock:
        if s.last_detections is None:
            raise NoRoundsError("no prompt rounds have run yet")
        s.threshold = threshold
        return count_from_detections(
            s.last_detections, threshold, round_number=max(s.history)
        )
