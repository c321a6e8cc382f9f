"""Synthetic cine-clip generator with a controllable split of label signal.

Each clip is an ellipse-like region whose centre, axes and rotation drift
smoothly over time (label-independent), rendered over smoothed background
noise. The malignancy signal is planted in two separable channels:

* shape: malignant masks acquire fast per-frame inward boundary notches and
  axis jitter (amplitude scaled by shape_snr), active per clip with
  probability `complementarity`;
* texture: malignant frames acquire fine-grained high-contrast texture
  inside the region (amplitude scaled by texture_snr), active with
  probability 1 − complementarity, drawn independently.

Every random draw happens for every clip regardless of label; the label
only gates amplitudes. Zero SNR therefore makes pixels exactly
label-independent. Frames render texture inside the smooth base contour —
never the notched one — and notches only ever move the boundary inward, so
neither the image channel nor the ROI box reveals the shape dynamics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .rng import rng_for
from .sttf import write_sttf
from .windowing import CineClip

MIN_MASK_AREA = 25
WOBBLE_HARMONICS = (2, 3, 4)


@dataclass
class GenConfig:
    n_clips: int = 120
    malignant_fraction: float = 0.0885
    frames_min: int = 30
    frames_max: int = 150
    image_side: int = 64
    texture_snr: float = 1.0
    shape_snr: float = 1.0
    complementarity: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.malignant_fraction < 1.0:
            raise ContractError(f"malignant_fraction must be in (0,1), got {self.malignant_fraction}")
        if not 0.0 <= self.complementarity <= 1.0:
            raise ContractError(f"complementarity must be in [0,1], got {self.complementarity}")
        if self.frames_min < 1 or self.frames_max < self.frames_min:
            raise ContractError(
                f"invalid frame range [{self.frames_min}, {self.frames_max}]"
            )
        if self.image_side < 32:
            raise ContractError(f"image_side must be >= 32, got {self.image_side}")
        if self.texture_snr < 0 or self.shape_snr < 0:
            raise ContractError("snr values must be >= 0")

    def n_malignant(self) -> int:
        if self.n_clips == 0:
            return 0
        n = round(self.n_clips * self.malignant_fraction)
        if self.n_clips >= 2:
            n = min(max(n, 1), self.n_clips - 1)  # keep both classes present
        return int(min(n, self.n_clips))


def _smooth_noise(rng: np.random.Generator, side: int, sigma: float) -> np.ndarray:
    """Unit-std Gaussian noise field smoothed to the given length scale."""
    field = ndimage.gaussian_filter(rng.standard_normal((side, side)), sigma, mode="reflect")
    return field / (field.std() + 1e-12)


def _sine_track(rng: np.random.Generator, n: int, base: float, amp: float) -> np.ndarray:
    """Slow sinusoidal drift: base + amp·sin(2π f t/n + phase)."""
    f = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n)
    return base + amp * np.sin(2.0 * np.pi * f * t / n + phase)


def generate_clip(label: int, cfg: GenConfig, rng: np.random.Generator,
                  clip_id: str = "clip") -> CineClip:
    """Deterministically build one clip from the given rng stream."""
    if label not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {label}")
    s = cfg.image_side
    n = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))

    shape_active = rng.random() < cfg.complementarity
    texture_active = rng.random() < (1.0 - cfg.complementarity)
    shape_gate = float(label) * float(shape_active) * cfg.shape_snr
    texture_gate = float(label) * float(texture_active) * cfg.texture_snr

    # label-independent contour dynamics
    cx = s * _sine_track(rng, n, 0.5 + rng.uniform(-0.06, 0.06), rng.uniform(0.02, 0.08))
    cy = s * _sine_track(rng, n, 0.5 + rng.uniform(-0.06, 0.06), rng.uniform(0.02, 0.08))
    ax = s * _sine_track(rng, n, rng.uniform(0.14, 0.19), rng.uniform(0.01, 0.03))
    ay = s * _sine_track(rng, n, rng.uniform(0.14, 0.19), rng.uniform(0.01, 0.03))
    theta = _sine_track(rng, n, rng.uniform(0.0, np.pi), rng.uniform(0.1, 0.5))

    notch_amp = min(0.25 * shape_gate, 0.35)
    jitter_amp = min(0.06 * shape_gate, 0.12)
    grain_amp = min(0.20 * texture_gate, 0.60)

    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    frames = np.empty((n, s, s))
    masks = np.empty((n, s, s))
    for t in range(n):
        # per-frame draws happen unconditionally so rng use never depends on gates
        coeffs = rng.standard_normal(2 * len(WOBBLE_HARMONICS))
        jitter = rng.uniform(0.0, 1.0, 2)
        bg = _smooth_noise(rng, s, 2.0)
        tex_smooth = _smooth_noise(rng, s, 2.5)
        tex_fine = _smooth_noise(rng, s, 0.6)

        dx, dy = xx - cx[t], yy - cy[t]
        ct, st = np.cos(theta[t]), np.sin(theta[t])
        ru = dx * ct + dy * st
        rv = -dx * st + dy * ct
        # the rendered region uses the unjittered base geometry so frames
        # never encode the shape channel
        base_region = np.sqrt((ru / ax[t]) ** 2 + (rv / ay[t]) ** 2) <= 1.0

        a_t = ax[t] * (1.0 - jitter_amp * jitter[0])
        b_t = ay[t] * (1.0 - jitter_amp * jitter[1])
        u = ru / a_t
        v = rv / b_t
        rho = np.sqrt(u * u + v * v)
        phi = np.arctan2(v, u)
        wob = np.zeros_like(phi)
        for i, k in enumerate(WOBBLE_HARMONICS):
            wob += coeffs[2 * i] * np.cos(k * phi) + coeffs[2 * i + 1] * np.sin(k * phi)
        wob = np.abs(wob) / (np.abs(wob).max() + 1e-12)
        masks[t] = (rho <= 1.0 - notch_amp * wob).astype(np.float64)

        inside = base_region.astype(np.float64)
        frames[t] = np.clip(
            0.35
            + 0.06 * bg
            + inside * (0.18 + 0.10 * tex_smooth + grain_amp * tex_fine),
            0.0, 1.0,
        )

        labeled, count = ndimage.label(masks[t])
        area = int(masks[t].sum())
        if count != 1 or area < MIN_MASK_AREA:
            raise ContractError(
                f"{clip_id} frame {t}: mask has {count} components, area {area}; "
                "construction invariant violated"
            )

    union = masks.any(axis=0)
    ys = np.flatnonzero(union.any(axis=1))
    xs = np.flatnonzero(union.any(axis=0))
    roi = (int(xs[0]), int(ys[0]), int(xs[-1]) + 1, int(ys[-1]) + 1)
    return CineClip(clip_id=clip_id, frames=frames, masks=masks, label=label, roi_box=roi)


def generate_dataset(cfg: GenConfig, out_dir) -> Path:
    """Write clips and a manifest under out_dir; returns the manifest path.

    Class counts are exact (round(n_clips · malignant_fraction) malignant,
    clamped so both classes exist); regeneration with the same config is
    byte-identical. Clip i draws from the sub-stream (seed, "clip", i), so
    any evaluation order produces the same files.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ContractError(f"cannot create output directory {out}: {exc}") from exc
    n_mal = cfg.n_malignant()
    manifest_path = out / "manifest.jsonl"
    lines = []
    for i in range(cfg.n_clips):
        label = 1 if i < n_mal else 0
        clip_id = f"clip_{i:04d}"
        clip = generate_clip(label, cfg, rng_for(cfg.seed, "clip", i), clip_id)
        frames_name = f"{clip_id}.frames.sttf"
        masks_name = f"{clip_id}.masks.sttf"
        try:
            write_sttf(out / frames_name, clip.frames)
            write_sttf(out / masks_name, clip.masks)
        except OSError as exc:
            raise ContractError(f"cannot write clip files under {out}: {exc}") from exc
        lines.append(json.dumps({
            "clip_id": clip_id,
            "frames": frames_name,
            "masks": masks_name,
            "label": label,
            "roi": list(clip.roi_box),
        }))
    try:
        manifest_path.write_text("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise ContractError(f"cannot write manifest {manifest_path}: {exc}") from exc
    return manifest_path
