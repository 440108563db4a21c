"""Frame-set input: a directory of extracted video frames plus a manifest.

The engine never decodes video; it consumes pre-extracted frame images
described by a `frames.json` manifest:

    {"video_id": ..., "width": ..., "height": ..., "frames": [{"index": ..., "path": ...}]}

Paths are relative to the manifest's directory unless absolute.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

MANIFEST_NAME = "frames.json"

_MEDIA_TYPES = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".webp": "image/webp"}


class FrameSetError(Exception):
    pass


def media_type_for(path: str | Path) -> str:
    return _MEDIA_TYPES.get(Path(path).suffix.lower(), "image/png")


@dataclass(frozen=True)
class FrameRef:
    index: int
    path: str


@dataclass(frozen=True)
class FrameSet:
    video_id: str
    frames: tuple[FrameRef, ...]
    width: int
    height: int

    def __post_init__(self):
        if not self.video_id:
            raise FrameSetError("video_id is empty")
        if not self.frames:
            raise FrameSetError("frame set needs at least one frame")
        if self.width < 1 or self.height < 1:
            raise FrameSetError("frame dimensions must be positive")
        indices = [f.index for f in self.frames]
        if any(f.index < 0 for f in self.frames) or any(a >= b for a, b in zip(indices, indices[1:])):
            raise FrameSetError("frame indices must be non-negative and strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)


def load_frame_set(frames_dir: str | Path) -> FrameSet:
    """Read the frames.json manifest of an extracted-frames directory."""
    frames_dir = Path(frames_dir)
    manifest_path = frames_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FrameSetError(f"no {MANIFEST_NAME} in {frames_dir}")
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FrameSetError(f"{manifest_path}: invalid JSON: {exc}") from None
    try:
        refs = []
        for entry in doc["frames"]:
            path = Path(entry["path"])
            if not path.is_absolute():
                path = frames_dir / path
            refs.append(FrameRef(index=int(entry["index"]), path=str(path)))
        return FrameSet(
            video_id=str(doc["video_id"]),
            frames=tuple(refs),
            width=int(doc["width"]),
            height=int(doc["height"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FrameSetError(f"{manifest_path}: bad manifest: {exc}") from None


def write_frame_manifest(frames_dir: str | Path, frame_set: FrameSet) -> Path:
    """Write frames.json for a frame set (paths stored relative when possible)."""
    frames_dir = Path(frames_dir)
    entries = []
    for ref in frame_set.frames:
        path = Path(ref.path)
        try:
            stored = str(path.relative_to(frames_dir))
        except ValueError:
            stored = str(path)
        entries.append({"index": ref.index, "path": stored})
    doc = {
        "video_id": frame_set.video_id,
        "width": frame_set.width,
        "height": frame_set.height,
        "frames": entries,
    }
    out = frames_dir / MANIFEST_NAME
    out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return out
