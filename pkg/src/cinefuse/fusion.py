"""The fusion core: positional encoding, self/cross attention, and the
sequence classifiers built from them.

The full model refines image-embedding rows with self-attention, enriches
them with mask-embedding context through cross-attention (image rows as
queries, mask rows as keys/values), concatenates both branch outputs,
mean-pools over time and applies a linear head. Ablation variants reuse
the same pieces: a single self-attention branch over either modality, and
an attention-free concat baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import EMBED_DIM, glorot, zeros_param
from .errors import ContractError, ShapeError
from .tensor import Tensor

VARIANTS = ("image_self", "seg_self", "concat_pool", "stact")


def sinusoidal_pe(m: int, d: int = EMBED_DIM) -> np.ndarray:
    """Fixed sinusoidal position matrix: PE[p, 2i] = sin(p·ω_i), PE[p, 2i+1] = cos(p·ω_i)
    with ω_i = 10000^(−2i/d)."""
    if m < 1:
        raise ContractError(f"positional encoding needs m >= 1, got {m}")
    if d % 2 != 0:
        raise ContractError(f"positional encoding needs even width, got {d}")
    pos = np.arange(m, dtype=np.float64)[:, None]
    omega = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)[None, :]
    pe = np.empty((m, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * omega)
    pe[:, 1::2] = np.cos(pos * omega)
    return pe


@dataclass
class AttentionParams:
    """Projections of one attention block, plus its head count."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int = 4

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int = EMBED_DIM, heads: int = 4) -> "AttentionParams":
        if heads < 1 or dim % heads != 0:
            raise ContractError(f"head count {heads} must divide width {dim}")
        return cls(
            wq=glorot(rng, dim, dim), bq=zeros_param(dim),
            wk=glorot(rng, dim, dim), bk=zeros_param(dim),
            wv=glorot(rng, dim, dim), bv=zeros_param(dim),
            wo=glorot(rng, dim, dim), bo=zeros_param(dim),
            heads=heads,
        )

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "wq": self.wq, "bq": self.bq,
            "wk": self.wk, "bk": self.bk,
            "wv": self.wv, "bv": self.bv,
            "wo": self.wo, "bo": self.bo,
        }


def attention_block(
    x_q: Tensor,
    x_kv: Tensor,
    params: AttentionParams,
    use_scale: bool = True,
    use_residual: bool = False,
    attn_sink: list | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention of x_q over x_kv.

    Scores are Q Kᵀ per head (scaled by 1/√d_k when use_scale), softmax
    normalised per query row, then applied to V; heads are concatenated
    and projected. Pass attn_sink to capture each head's weight matrix.
    """
    if x_q.ndim != 2 or x_kv.ndim != 2:
        raise ShapeError(f"attention expects 2-D inputs, got {x_q.shape} and {x_kv.shape}")
    if x_q.shape[0] != x_kv.shape[0]:
        raise ShapeError(f"attention row counts disagree: {x_q.shape} vs {x_kv.shape}")
    dim = params.dim
    if x_q.shape[1] != dim or x_kv.shape[1] != dim:
        raise ShapeError(f"attention inputs must be (m, {dim}), got {x_q.shape} and {x_kv.shape}")
    d_k = dim // params.heads

    q = x_q @ params.wq + params.bq
    k = x_kv @ params.wk + params.bk
    v = x_kv @ params.wv + params.bv

    head_outs = []
    for h in range(params.heads):
        lo, hi = h * d_k, (h + 1) * d_k
        scores = q.slice_cols(lo, hi) @ k.slice_cols(lo, hi).T
        if use_scale:
            scores = scores * (1.0 / math.sqrt(d_k))
        weights = T.softmax_rows(scores)
        if attn_sink is not None:
            attn_sink.append(weights.data)
        head_outs.append(weights @ v.slice_cols(lo, hi))
    out = T.concat(head_outs) @ params.wo + params.bo
    if use_residual:
        out = out + x_q
    return out


@dataclass
class FusionConfig:
    heads: int = 4
    use_scale: bool = True
    use_residual: bool = False
    pe_enabled: bool = True
    dim: int = EMBED_DIM

    def as_dict(self) -> dict:
        return {
            "heads": self.heads,
            "use_scale": self.use_scale,
            "use_residual": self.use_residual,
            "pe_enabled": self.pe_enabled,
            "dim": self.dim,
        }


@dataclass
class FusionOutput:
    """One clip's classification: scalar logit/prob on the tape, plus optional
    pre-pool per-stack logits and captured attention weight matrices."""

    logit: Tensor
    prob: Tensor
    row_logits: np.ndarray | None = None
    attention_weights: list = field(default_factory=list)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_sequence(x: Tensor, dim: int, name: str) -> None:
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{name} must be (m, {dim}), got {x.shape}")
    if x.shape[0] < 1:
        raise ContractError(f"{name} must have at least one row")


def _pool_and_head(feats: Tensor, head_w: Tensor, head_b: Tensor, want_rows: bool):
    pooled = feats.mean_axis(0).reshape((1, feats.shape[1]))
    logit = (pooled @ head_w + head_b).sum()
    rows = None
    if want_rows:
        rows = (feats.data @ head_w.data + head_b.data).reshape(-1)
    return logit, rows


class StactModel:
    """Self-attention over image rows + cross-attention (image queries mask
    keys/values), concatenated, mean-pooled, linear head."""

    variant = "stact"

    def __init__(self, self_block: AttentionParams, cross_block: AttentionParams,
                 head_w: Tensor, head_b: Tensor, config: FusionConfig):
        self.self_block = self_block
        self.cross_block = cross_block
        self.head_w = head_w
        self.head_b = head_b
        self.config = config

    @classmethod
    def init(cls, rng: np.random.Generator, config: FusionConfig | None = None) -> "StactModel":
        cfg = config or FusionConfig()
        return cls(
            self_block=AttentionParams.init(rng, cfg.dim, cfg.heads),
            cross_block=AttentionParams.init(rng, cfg.dim, cfg.heads),
            head_w=glorot(rng, 2 * cfg.dim, 1),
            head_b=zeros_param(1),
            config=cfg,
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, block in (("self_block", self.self_block), ("cross_block", self.cross_block)):
            for name, p in block.named_parameters().items():
                out[f"{prefix}.{name}"] = p
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def forward(self, image, seg, want_rows: bool = False, want_attention: bool = False) -> FusionOutput:
        cfg = self.config
        i_t, s_t = _as_tensor(image), _as_tensor(seg)
        _check_sequence(i_t, cfg.dim, "image embedding")
        _check_sequence(s_t, cfg.dim, "seg embedding")
        if i_t.shape[0] != s_t.shape[0]:
            raise ShapeError(f"image {i_t.shape} and seg {s_t.shape} sequences misaligned")
        if cfg.pe_enabled:
            pe = Tensor(sinusoidal_pe(i_t.shape[0], cfg.dim))
            i_t, s_t = i_t + pe, s_t + pe
        sink: list | None = [] if want_attention else None
        a_self = attention_block(i_t, i_t, self.self_block, cfg.use_scale, cfg.use_residual, sink)
        a_cross = attention_block(i_t, s_t, self.cross_block, cfg.use_scale, cfg.use_residual, sink)
        feats = T.concat([a_self, a_cross])
        logit, rows = _pool_and_head(feats, self.head_w, self.head_b, want_rows)
        return FusionOutput(logit, logit.sigmoid(), rows, sink or [])


class SingleBranchModel:
    """Self-attention over a single modality, mean pool, linear head."""

    def __init__(self, source: str, block: AttentionParams, head_w: Tensor, head_b: Tensor,
                 config: FusionConfig):
        if source not in ("image", "seg"):
            raise ContractError(f"source must be image or seg, got {source!r}")
        self.source = source
        self.block = block
        self.head_w = head_w
        self.head_b = head_b
        self.config = config

    @property
    def variant(self) -> str:
        return f"{self.source}_self"

    @classmethod
    def init(cls, rng: np.random.Generator, source: str,
             config: FusionConfig | None = None) -> "SingleBranchModel":
        cfg = config or FusionConfig()
        return cls(
            source=source,
            block=AttentionParams.init(rng, cfg.dim, cfg.heads),
            head_w=glorot(rng, cfg.dim, 1),
            head_b=zeros_param(1),
            config=cfg,
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"block.{k}": v for k, v in self.block.named_parameters().items()}
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def forward(self, image, seg, want_rows: bool = False, want_attention: bool = False) -> FusionOutput:
        cfg = self.config
        x = _as_tensor(image if self.source == "image" else seg)
        _check_sequence(x, cfg.dim, f"{self.source} embedding")
        if cfg.pe_enabled:
            x = x + Tensor(sinusoidal_pe(x.shape[0], cfg.dim))
        sink: list | None = [] if want_attention else None
        a = attention_block(x, x, self.block, cfg.use_scale, cfg.use_residual, sink)
        logit, rows = _pool_and_head(a, self.head_w, self.head_b, want_rows)
        return FusionOutput(logit, logit.sigmoid(), rows, sink or [])


class ConcatPoolModel:
    """No attention: per-stack concat of both modalities, mean pool, linear head."""

    variant = "concat_pool"

    def __init__(self, head_w: Tensor, head_b: Tensor, config: FusionConfig):
        self.head_w = head_w
        self.head_b = head_b
        self.config = config

    @classmethod
    def init(cls, rng: np.random.Generator, config: FusionConfig | None = None) -> "ConcatPoolModel":
        cfg = config or FusionConfig()
        return cls(head_w=glorot(rng, 2 * cfg.dim, 1), head_b=zeros_param(1), config=cfg)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"head_w": self.head_w, "head_b": self.head_b}

    def forward(self, image, seg, want_rows: bool = False, want_attention: bool = False) -> FusionOutput:
        cfg = self.config
        i_t, s_t = _as_tensor(image), _as_tensor(seg)
        _check_sequence(i_t, cfg.dim, "image embedding")
        _check_sequence(s_t, cfg.dim, "seg embedding")
        if i_t.shape[0] != s_t.shape[0]:
            raise ShapeError(f"image {i_t.shape} and seg {s_t.shape} sequences misaligned")
        feats = T.concat([i_t, s_t])
        logit, rows = _pool_and_head(feats, self.head_w, self.head_b, want_rows)
        return FusionOutput(logit, logit.sigmoid(), rows, [])


def build_model(variant: str, rng: np.random.Generator, config: FusionConfig | None = None):
    if variant == "stact":
        return StactModel.init(rng, config)
    if variant == "image_self":
        return SingleBranchModel.init(rng, "image", config)
    if variant == "seg_self":
        return SingleBranchModel.init(rng, "seg", config)
    if variant == "concat_pool":
        return ConcatPoolModel.init(rng, config)
    raise ContractError(f"unknown variant {variant!r}; choose from {VARIANTS}")


def stact_forward(image, seg, model: StactModel) -> tuple[Tensor, Tensor]:
    """Classify one aligned (I, S) pair; returns (logit, probability)."""
    out = model.forward(image, seg)
    return out.logit, out.prob
