"""Clip ingest: ROI cropping, 3-frame stacking, and the dataset manifest.

A manifest is JSON-lines, one record per clip:
``{"clip_id": str, "frames": path, "masks": path, "label": 0|1,
"roi": [x0, y0, x1, y1]}``. Tensor paths are resolved relative to the
manifest's directory and point at rank-3 STTF files shaped (n, H, W).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, IngestError
from .sttf import read_sttf, read_sttf_shape

DEFAULT_BUFFER_PX = 5
DEFAULT_STACK_SIDE = 64
STACK_DEPTH = 3


@dataclass
class CineClip:
    """Raw clip data: frames in [0,1], aligned binary masks, label, ROI box."""

    clip_id: str
    frames: np.ndarray  # (n, H, W)
    masks: np.ndarray   # (n, H, W), values in {0, 1}
    label: int
    roi_box: tuple[int, int, int, int]  # (x_min, y_min, x_max, y_max)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_stacks(self) -> int:
        return self.n_frames // STACK_DEPTH


@dataclass
class ClipRef:
    """A validated manifest entry; pixel data stays on disk until load()."""

    clip_id: str
    frames_path: Path
    masks_path: Path
    label: int
    roi_box: tuple[int, int, int, int]
    n_frames: int
    height: int
    width: int

    @property
    def n_stacks(self) -> int:
        return self.n_frames // STACK_DEPTH

    def load(self) -> CineClip:
        return CineClip(
            clip_id=self.clip_id,
            frames=read_sttf(self.frames_path),
            masks=read_sttf(self.masks_path),
            label=self.label,
            roi_box=self.roi_box,
        )


@dataclass
class SkipRecord:
    clip_id: str
    reason: str


@dataclass
class IngestConfig:
    buffer_px: int = DEFAULT_BUFFER_PX
    stack_side: int = DEFAULT_STACK_SIDE


def buffer_crop(
    roi_box: tuple[int, int, int, int],
    buffer_px: int,
    image_dims: tuple[int, int],
) -> tuple[int, int, int, int]:
    """Expand the box outward by buffer_px, clamped to the image bounds.

    image_dims is (H, W); the box is (x_min, y_min, x_max, y_max) with x
    along the width axis. Enlarging buffer_px never shrinks the result.
    """
    h, w = image_dims
    x0, y0, x1, y1 = roi_box
    if buffer_px < 0:
        raise ContractError(f"buffer_px must be >= 0, got {buffer_px}")
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise IngestError(f"degenerate or out-of-bounds roi box {roi_box} for {w}x{h} image")
    return (
        max(0, x0 - buffer_px),
        max(0, y0 - buffer_px),
        min(w, x1 + buffer_px),
        min(h, y1 + buffer_px),
    )


def make_stacks(items: np.ndarray) -> list[np.ndarray]:
    """Split (n, H, W) into ⌊n/3⌋ consecutive non-overlapping (3, H, W) stacks.

    A trailing remainder of one or two items is dropped; n < 3 yields an
    empty list (callers record the skip).
    """
    n = items.shape[0]
    return [items[3 * k: 3 * k + 3] for k in range(n // STACK_DEPTH)]


def resize_bilinear(images: np.ndarray, side: int) -> np.ndarray:
    """Resize (n, H, W) to (n, side, side) with center-aligned bilinear sampling."""
    n, h, w = images.shape
    ys = (np.arange(side) + 0.5) * (h / side) - 0.5
    xs = (np.arange(side) + 0.5) * (w / side) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = images[:, y0[:, None], x0[None, :]] * (1 - wx) + images[:, y0[:, None], x1[None, :]] * wx
    bot = images[:, y1[:, None], x0[None, :]] * (1 - wx) + images[:, y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def resize_nearest(images: np.ndarray, side: int) -> np.ndarray:
    """Resize (n, H, W) to (n, side, side) by nearest-neighbour sampling."""
    n, h, w = images.shape
    ys = np.clip(((np.arange(side) + 0.5) * (h / side)).astype(int), 0, h - 1)
    xs = np.clip(((np.arange(side) + 0.5) * (w / side)).astype(int), 0, w - 1)
    return images[:, ys[:, None], xs[None, :]]


@dataclass
class ClipStacks:
    """Ingest output for one clip: aligned frame and mask stacks.

    Stored compactly (float32 frames, uint8 masks); training widens per
    batch."""

    clip_id: str
    label: int
    frame_stacks: np.ndarray  # (m, 3, side, side) float32 in [0, 1]
    mask_stacks: np.ndarray   # (m, 3, side, side) uint8 in {0, 1}

    @property
    def n_stacks(self) -> int:
        return self.frame_stacks.shape[0]


def ingest_clip(clip: CineClip, cfg: IngestConfig | None = None) -> ClipStacks:
    """Crop both channels with the buffered ROI, resize, and build 3-stacks."""
    cfg = cfg or IngestConfig()
    if clip.n_frames < STACK_DEPTH:
        raise ContractError(f"clip {clip.clip_id} has {clip.n_frames} frames; need >= {STACK_DEPTH}")
    if clip.frames.shape != clip.masks.shape:
        raise IngestError(
            f"clip {clip.clip_id}: frames {clip.frames.shape} and masks {clip.masks.shape} misaligned"
        )
    h, w = clip.frames.shape[1:]
    x0, y0, x1, y1 = buffer_crop(clip.roi_box, cfg.buffer_px, (h, w))
    frames = resize_bilinear(clip.frames[:, y0:y1, x0:x1], cfg.stack_side)
    masks = resize_nearest(clip.masks[:, y0:y1, x0:x1], cfg.stack_side)
    masks = (masks >= 0.5).astype(np.float64)
    f_stacks = make_stacks(frames)
    m_stacks = make_stacks(masks)
    return ClipStacks(
        clip_id=clip.clip_id,
        label=clip.label,
        frame_stacks=np.stack(f_stacks),
        mask_stacks=np.stack(m_stacks),
    )


@dataclass
class StackDataset:
    """All ingested clips of a manifest plus the skips recorded on the way."""

    clips: list[ClipStacks] = field(default_factory=list)
    skipped: list[SkipRecord] = field(default_factory=list)

    @property
    def total_stacks(self) -> int:
        return sum(c.n_stacks for c in self.clips)


def ingest_clips(clips: list[CineClip], cfg: IngestConfig | None = None) -> StackDataset:
    out = StackDataset()
    for clip in clips:
        if clip.n_frames < STACK_DEPTH:
            out.skipped.append(
                SkipRecord(clip.clip_id, f"only {clip.n_frames} frames, need >= {STACK_DEPTH}")
            )
            continue
        out.clips.append(ingest_clip(clip, cfg))
    return out


def _require(cond: bool, clip_id: str, msg: str) -> None:
    if not cond:
        raise IngestError(f"clip {clip_id!r}: {msg}")


def load_manifest(path) -> list[ClipRef]:
    """Parse and validate a JSONL manifest; returns one ClipRef per record."""
    path = Path(path)
    if not path.exists():
        raise IngestError(f"manifest not found: {path}")
    refs: list[ClipRef] = []
    base = path.parent
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            clip_id = str(rec["clip_id"])
            frames_path = base / rec["frames"]
            masks_path = base / rec["masks"]
            label = rec["label"]
            roi = tuple(int(v) for v in rec["roi"])
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"{path}:{lineno}: malformed record: {exc}") from exc
        _require(label in (0, 1), clip_id, f"label must be 0 or 1, got {label!r}")
        _require(len(roi) == 4, clip_id, f"roi must have 4 entries, got {roi}")
        for p in (frames_path, masks_path):
            if not p.exists():
                raise IngestError(f"clip {clip_id!r}: referenced tensor file missing: {p}")
        fshape = read_sttf_shape(frames_path)
        mshape = read_sttf_shape(masks_path)
        _require(len(fshape) == 3, clip_id, f"frames tensor must be rank 3, got shape {fshape}")
        _require(fshape == mshape, clip_id, f"frames {fshape} and masks {mshape} shapes differ")
        n, h, w = fshape
        x0, y0, x1, y1 = roi
        _require(0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h,
                 clip_id, f"roi {roi} out of bounds for {w}x{h} frames")
        refs.append(
            ClipRef(
                clip_id=clip_id,
                frames_path=frames_path,
                masks_path=masks_path,
                label=int(label),
                roi_box=(x0, y0, x1, y1),
                n_frames=int(n),
                height=int(h),
                width=int(w),
            )
        )
    return refs
