"""Per-stack 256-d embeddings.

A small 2-layer CNN (conv s2 + ReLU, conv s2 + ReLU, global average pool,
fc to 256 + ReLU, fc head to 1) encodes mask stacks. The same architecture
with its own parameters doubles as the built-in surrogate for image-stack
embeddings; alternatively, precomputed per-clip embedding files can be
supplied. The embedding is the post-ReLU activation feeding the head, so
it is what the stack-level classifier actually sees. Convolutions are
realised as im2col + matmul, so their gradients come straight off the tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, IngestError, ShapeError
from .sttf import read_sttf
from .tensor import Tensor, conv_output_side
from .windowing import ClipStacks

EMBED_DIM = 256
CONV1_FILTERS = 16
CONV2_FILTERS = 32
KERNEL = 3
STRIDE = 2


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    """Uniform Glorot init over a (fan_in, fan_out) matrix; grad-tracked."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class StackEncoder:
    """Weights of the 2-layer stack CNN. Conv weights are stored im2col-ready
    as (C·k·k, F) matrices with (channel, kernel-row, kernel-col) row order."""

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    fc_embed_w: Tensor
    fc_embed_b: Tensor
    fc_head_w: Tensor
    fc_head_b: Tensor
    in_channels: int = 3
    side: int = 64

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int = 3, side: int = 64) -> "StackEncoder":
        k2 = KERNEL * KERNEL
        return cls(
            conv1_w=glorot(rng, in_channels * k2, CONV1_FILTERS),
            conv1_b=zeros_param(CONV1_FILTERS),
            conv2_w=glorot(rng, CONV1_FILTERS * k2, CONV2_FILTERS),
            conv2_b=zeros_param(CONV2_FILTERS),
            fc_embed_w=glorot(rng, CONV2_FILTERS, EMBED_DIM),
            fc_embed_b=zeros_param(EMBED_DIM),
            fc_head_w=glorot(rng, EMBED_DIM, 1),
            fc_head_b=zeros_param(1),
            in_channels=in_channels,
            side=side,
        )

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "conv1_w": self.conv1_w,
            "conv1_b": self.conv1_b,
            "conv2_w": self.conv2_w,
            "conv2_b": self.conv2_b,
            "fc_embed_w": self.fc_embed_w,
            "fc_embed_b": self.fc_embed_b,
            "fc_head_w": self.fc_head_w,
            "fc_head_b": self.fc_head_b,
        }

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def forward(self, stacks) -> tuple[Tensor, Tensor]:
        """Batched forward over (B, C, side, side); returns (embeddings, logits)."""
        x = stacks if isinstance(stacks, Tensor) else Tensor(stacks)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != (self.side, self.side):
            raise ShapeError(
                f"encoder expects (B, {self.in_channels}, {self.side}, {self.side}) stacks, got {x.shape}"
            )
        b = x.shape[0]
        s1 = conv_output_side(self.side, KERNEL, STRIDE)
        s2 = conv_output_side(s1, KERNEL, STRIDE)

        h = T.im2col(x, KERNEL, STRIDE) @ self.conv1_w + self.conv1_b
        h = h.relu().reshape((b, s1, s1, CONV1_FILTERS)).transpose((0, 3, 1, 2))
        h = T.im2col(h, KERNEL, STRIDE) @ self.conv2_w + self.conv2_b
        h = h.relu().reshape((b, s2, s2, CONV2_FILTERS)).transpose((0, 3, 1, 2))
        pooled = h.mean_axis(3).mean_axis(2)  # (B, CONV2_FILTERS)
        emb = (pooled @ self.fc_embed_w + self.fc_embed_b).relu()
        logits = emb @ self.fc_head_w + self.fc_head_b
        return emb, logits

    def embed(self, stacks: np.ndarray) -> np.ndarray:
        """Grad-free embeddings for a (m, C, side, side) batch of stacks."""
        emb, _ = self.forward(Tensor(np.asarray(stacks, dtype=np.float64)))
        return emb.data


def seg_cnn_forward(stack: np.ndarray, params: StackEncoder) -> tuple[np.ndarray, float]:
    """Single-stack forward; returns (256-d embedding, scalar logit)."""
    emb, logit = params.forward(Tensor(np.asarray(stack, dtype=np.float64)))
    return emb.data[0], float(logit.data[0, 0])


def encode_clip_segmentation(mask_stacks: np.ndarray, params: StackEncoder) -> np.ndarray:
    """Embed every mask stack of one clip; row k is the embedding of stack k."""
    arr = np.asarray(mask_stacks, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[0] < 1:
        raise ContractError(f"need at least one (C, side, side) stack, got shape {arr.shape}")
    return params.embed(arr)


@dataclass
class EmbeddingSequence:
    """Aligned per-clip embedding matrices: image rows I and mask rows S."""

    clip_id: str
    image: np.ndarray  # (m, 256)
    seg: np.ndarray    # (m, 256)
    label: int

    def __post_init__(self):
        if self.image.shape != self.seg.shape:
            raise ShapeError(
                f"clip {self.clip_id}: image {self.image.shape} vs seg {self.seg.shape} embeddings misaligned"
            )
        if self.image.ndim != 2 or self.image.shape[1] != EMBED_DIM or self.image.shape[0] < 1:
            raise ShapeError(
                f"clip {self.clip_id}: embeddings must be (m>=1, {EMBED_DIM}), got {self.image.shape}"
            )

    @property
    def n_steps(self) -> int:
        return self.image.shape[0]


class EncoderImageProvider:
    """Image embeddings from the built-in surrogate CNN applied to frame stacks."""

    def __init__(self, encoder: StackEncoder):
        self.encoder = encoder

    def embeddings(self, clip: ClipStacks) -> np.ndarray:
        return self.encoder.embed(clip.frame_stacks)


class PrecomputedImageProvider:
    """Image embeddings read from <clip_id>.img.sttf files under a directory."""

    def __init__(self, root) -> None:
        self.root = Path(root)

    def embeddings(self, clip: ClipStacks) -> np.ndarray:
        path = self.root / f"{clip.clip_id}.img.sttf"
        if not path.exists():
            raise IngestError(f"clip {clip.clip_id!r}: precomputed embedding file missing: {path}")
        emb = read_sttf(path)
        if emb.ndim != 2 or emb.shape[1] != EMBED_DIM:
            raise IngestError(
                f"clip {clip.clip_id!r}: embedding file {path} has shape {emb.shape}, expected (m, {EMBED_DIM})"
            )
        if emb.shape[0] != clip.n_stacks:
            raise IngestError(
                f"clip {clip.clip_id!r}: {emb.shape[0]} embedding rows do not align with "
                f"{clip.n_stacks} stacks"
            )
        return emb
