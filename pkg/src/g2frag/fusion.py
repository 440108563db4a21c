"""Fuse the reasoning frame into the video's frame sequence.

Default delivery appends one copy after the last video frame; start/mid
placements and higher copy counts exist as experiment axes. The fused input
carries a fixed consistency instruction that keeps the original video
authoritative over the appended diagram.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .frames import FrameSet, media_type_for
from .provider import ImagePart, Message, ProviderRequest, Role, TextPart
from .renderer import ReasoningFrame

DEFAULT_INSTRUCTION = (
    "The diagram frame summarizes background knowledge relevant to the "
    "question: boxes and shapes are entities, events, actions, places and "
    "concepts; arrows show causal order. The original video frames are "
    "authoritative — if the diagram and the video disagree, trust the video."
)

MCQ_DIRECTIVE = "Answer with the option letter only."
OPEN_DIRECTIVE = "Answer concisely."


class FusionError(Exception):
    pass


class DimensionMismatch(FusionError):
    def __init__(self, video_dims: tuple[int, int], frame_dims: tuple[int, int]):
        super().__init__(f"video frames are {video_dims}, reasoning frame is {frame_dims}")


class PlacementPosition(str, Enum):
    START = "Start"
    MID = "Mid"
    END = "End"


@dataclass(frozen=True)
class Placement:
    position: PlacementPosition
    count: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("placement count must be positive")

    @property
    def canonical(self) -> bool:
        """Whether this is one of the studied placements (Start-1, Mid-1, End-1/2/4)."""
        if self.count == 1:
            return True
        return self.position is PlacementPosition.END and self.count in (2, 4)

    @classmethod
    def parse(cls, spec: str) -> "Placement":
        try:
            pos, count = spec.split("-")
            return cls(PlacementPosition(pos.capitalize()), int(count))
        except (ValueError, KeyError):
            raise ValueError(f"bad placement {spec!r}, expected e.g. 'end-1'") from None

    def __str__(self) -> str:
        return f"{self.position.value}-{self.count}"


@dataclass(frozen=True)
class FusedFrame:
    """One slot of the fused sequence: a video frame path or reasoning-frame bytes."""

    source: str  # "video" | "reasoning"
    path: str | None = None
    data: bytes | None = None

    def image_bytes(self) -> bytes:
        if self.data is not None:
            return self.data
        assert self.path is not None
        return Path(self.path).read_bytes()

    def media_type(self) -> str:
        if self.data is not None:
            return "image/png"
        return media_type_for(self.path or "")


@dataclass(frozen=True)
class FusedInput:
    video_id: str
    frames: tuple[FusedFrame, ...]
    insert_indices: tuple[int, ...]
    instruction: str
    placement: Placement
    manifest_digest: str


def _insert_at(placement: Placement, n_video: int) -> int:
    if placement.position is PlacementPosition.START:
        return 0
    if placement.position is PlacementPosition.MID:
        return n_video // 2
    return n_video


def fuse(
    video: FrameSet,
    frame: ReasoningFrame,
    placement: Placement,
    instruction: str = DEFAULT_INSTRUCTION,
) -> FusedInput:
    """Insert `placement.count` references to the frame into the sequence.

    Copies share one rendered image (byte-identical); the original video
    frame order is preserved exactly.
    """
    if (frame.width, frame.height) != (video.width, video.height):
        raise DimensionMismatch((video.width, video.height), (frame.width, frame.height))

    video_entries = [FusedFrame(source="video", path=ref.path) for ref in video.frames]
    reasoning_entry = FusedFrame(source="reasoning", data=frame.image)

    at = _insert_at(placement, len(video_entries))
    fused = video_entries[:at] + [reasoning_entry] * placement.count + video_entries[at:]
    insert_indices = tuple(range(at, at + placement.count))

    digest_doc = {
        "video_id": video.video_id,
        "placement": str(placement),
        "frames": [e.path if e.source == "video" else f"rf:{frame.subgraph_digest}" for e in fused],
        "insert_indices": list(insert_indices),
        "instruction": instruction,
    }
    manifest_digest = hashlib.sha256(json.dumps(digest_doc, sort_keys=True).encode("utf-8")).hexdigest()

    return FusedInput(
        video_id=video.video_id,
        frames=tuple(fused),
        insert_indices=insert_indices,
        instruction=instruction,
        placement=placement,
        manifest_digest=manifest_digest,
    )


def strip_inserts(fused: FusedInput) -> list[FusedFrame]:
    """Remove the inserted reasoning frames, recovering the video sequence."""
    inserted = set(fused.insert_indices)
    return [f for i, f in enumerate(fused.frames) if i not in inserted]


def manifest_doc(fused: FusedInput, question_id: str, reasoning_frame_path: str | Path) -> dict:
    """Evidence-trail manifest for persistence."""
    return {
        "video_id": fused.video_id,
        "question_id": question_id,
        "placement": str(fused.placement),
        "frame_paths": [
            f.path if f.source == "video" else str(reasoning_frame_path) for f in fused.frames
        ],
        "insert_indices": list(fused.insert_indices),
        "instruction": fused.instruction,
    }


# ---------------------------------------------------------------------------
# Provider request assembly
# ---------------------------------------------------------------------------


def _question_text(q: str, options: list[str] | None) -> str:
    if options:
        letters = [f"{chr(ord('A') + i)}. {opt}" for i, opt in enumerate(options)]
        return f"Question: {q}\n" + "\n".join(letters) + f"\n{MCQ_DIRECTIVE}"
    return f"Question: {q}\n{OPEN_DIRECTIVE}"


def to_provider_request(
    fused: FusedInput | FrameSet,
    q: str,
    options: list[str] | None = None,
    model_name: str = "",
    max_tokens: int = 256,
) -> ProviderRequest:
    """One request: ordered frame images, then instruction (fused only), then question.

    A raw FrameSet builds the easy-branch request — just the video frames and
    the question, no consistency instruction.
    """
    parts: list = []
    if isinstance(fused, FrameSet):
        for ref in fused.frames:
            parts.append(ImagePart(data=Path(ref.path).read_bytes(), media_type=media_type_for(ref.path)))
        text = _question_text(q, options)
    else:
        for entry in fused.frames:
            parts.append(ImagePart(data=entry.image_bytes(), media_type=entry.media_type()))
        text = fused.instruction + "\n\n" + _question_text(q, options)
    parts.append(TextPart(text))
    return ProviderRequest(
        model_name=model_name,
        messages=(Message(Role.USER, tuple(parts)),),
        max_tokens=max_tokens,
    )
