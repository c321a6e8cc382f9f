"""Losses, optimizers, the staged training pipeline, and checkpoints.

Training happens in three stages: (1) the mask-stack encoder — and, unless
precomputed image embeddings are supplied, the surrogate image encoder —
is trained on individual 3-stacks with focal loss under SGD+momentum and a
cosine schedule; (2) encoders are frozen and per-clip embedding sequences
are materialised; (3) the fusion classifier is trained on whole sequences
(one clip per step) with focal loss under AdamW and a cosine schedule.
Every random choice derives from the config seed, so a (seed, manifest,
config) triple reproduces bit-identical parameters and history.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoders import (
    EmbeddingSequence,
    EncoderImageProvider,
    PrecomputedImageProvider,
    StackEncoder,
    encode_clip_segmentation,
)
from .errors import CheckpointError, ContractError
from .fusion import (
    AttentionParams,
    ConcatPoolModel,
    FusionConfig,
    SingleBranchModel,
    StactModel,
    build_model,
)
from .rng import rng_for
from .sttf import parse_sttf, sttf_bytes
from .tensor import Tensor
from .windowing import ClipStacks, IngestConfig, StackDataset, ingest_clips, load_manifest

PT_CLAMP = 1e-7


@dataclass
class FocalLossConfig:
    alpha: float = 0.9
    gamma: float = 2.4

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ContractError(f"focal alpha must be in (0,1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ContractError(f"focal gamma must be >= 0, got {self.gamma}")


def focal_loss(logit: Tensor, y, cfg: FocalLossConfig | None = None) -> Tensor:
    """Elementwise focal loss −α_t (1−p_t)^γ log(p_t) with p = sigmoid(logit).

    y may be a scalar or an array matching logit's shape; p_t is clamped to
    [1e-7, 1−1e-7] so the loss stays finite at saturation.
    """
    cfg = cfg or FocalLossConfig()
    y_arr = np.broadcast_to(np.asarray(y, dtype=np.float64), logit.shape)
    p = logit.sigmoid()
    # p_t = y p + (1−y)(1−p), expressed with the restricted op set
    p_t = T.add(T.mul(p, Tensor(2.0 * y_arr - 1.0)), Tensor(1.0 - y_arr))
    p_t = T.clamp(p_t, PT_CLAMP, 1.0 - PT_CLAMP)
    alpha_t = Tensor(y_arr * cfg.alpha + (1.0 - y_arr) * (1.0 - cfg.alpha))
    return T.neg(T.mul(T.mul(alpha_t, T.pow_scalar(1.0 - p_t, cfg.gamma)), T.log(p_t)))


def mean_all(t: Tensor) -> Tensor:
    return t.sum() * (1.0 / t.size)


def cosine_lr(t: int, t_max: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max at t=0 down to lr_min at t=T_max."""
    if t_max <= 0:
        raise ContractError(f"cosine schedule needs T_max >= 1, got {t_max}")
    if not 0 <= t <= t_max:
        raise ContractError(f"epoch {t} outside schedule range [0, {t_max}]")
    return lr_min + (lr_max - lr_min) * (1.0 + np.cos(np.pi * t / t_max)) / 2.0


# -- optimizers ---------------------------------------------------------------


def sgd_momentum_step(
    param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float = 0.9
) -> None:
    """In-place v ← μv + g; θ ← θ − lr·v."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ContractError(
            f"sgd step shape mismatch: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}"
        )
    velocity *= momentum
    velocity += grad
    param -= lr * velocity


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """In-place AdamW: decoupled decay θ ← θ − lr·wd·θ, then bias-corrected Adam."""
    if param.shape != grad.shape:
        raise ContractError(f"adamw step shape mismatch: param {param.shape}, grad {grad.shape}")
    if step < 1:
        raise ContractError(f"adamw step counter must be >= 1, got {step}")
    b1, b2 = betas
    param -= lr * weight_decay * param
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class SgdMomentum:
    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            sgd_momentum_step(p.data, p.grad, self.velocity[name], self.lr, self.momentum)


class AdamW:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adamw_step(
                p.data, p.grad, self.m[name], self.v[name], self.t,
                self.lr, self.betas, self.eps, self.weight_decay,
            )


# -- configs ------------------------------------------------------------------


@dataclass
class Stage1Config:
    lr: float = 1e-4
    momentum: float = 0.9
    epochs: int = 100
    lr_min: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"stage-1 epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ContractError(f"stage-1 lr must be > 0, got {self.lr}")


@dataclass
class Stage3Config:
    lr: float = 1e-4
    epochs: int = 100
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_min: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"stage-3 epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ContractError(f"stage-3 lr must be > 0, got {self.lr}")


@dataclass
class TrainConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage3: Stage3Config = field(default_factory=Stage3Config)
    focal: FocalLossConfig = field(default_factory=FocalLossConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    seed: int = 0
    batch_size: int = 32
    variant: str = "stact"
    image_embeddings_dir: str | None = None


# -- stage 1: stack encoders ----------------------------------------------------


def train_encoder(
    encoder: StackEncoder,
    stacks: np.ndarray,
    labels: np.ndarray,
    cfg: Stage1Config,
    focal: FocalLossConfig,
    batch_size: int,
    seed: int,
    stream: str,
) -> list[dict]:
    """Focal-loss SGD over shuffled stack instances; returns per-epoch records."""
    n = stacks.shape[0]
    opt = SgdMomentum(encoder.named_parameters(), cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
        order = rng_for(seed, "stage1-shuffle", stream, epoch).permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            _, logits = encoder.forward(Tensor(stacks[idx].astype(np.float64)))
            losses = focal_loss(logits, labels[idx].reshape(-1, 1), focal)
            loss = mean_all(losses)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(losses.data.sum())
        history.append({"epoch": epoch, "lr": opt.lr, "loss": total / n})
    return history


def _gather_stacks(dataset: StackDataset, channel: str) -> tuple[np.ndarray, np.ndarray]:
    arrays, labels = [], []
    for clip in dataset.clips:
        arr = clip.frame_stacks if channel == "frames" else clip.mask_stacks
        arrays.append(arr)
        labels.append(np.full(clip.n_stacks, clip.label, dtype=np.float64))
    return np.concatenate(arrays, axis=0), np.concatenate(labels)


# -- the pipeline ---------------------------------------------------------------


@dataclass
class PipelineResult:
    fusion_model: object
    seg_encoder: StackEncoder
    image_encoder: StackEncoder | None
    history: dict
    skipped: list
    image_provider: object = None

    def embed(self, clips: list[ClipStacks]) -> list[EmbeddingSequence]:
        """Materialise (I, S) sequences for already-ingested clips."""
        out = []
        for clip in clips:
            out.append(
                EmbeddingSequence(
                    clip_id=clip.clip_id,
                    image=self.image_provider.embeddings(clip),
                    seg=encode_clip_segmentation(clip.mask_stacks.astype(np.float64), self.seg_encoder),
                    label=clip.label,
                )
            )
        return out


def _require_both_classes(dataset: StackDataset) -> None:
    labels = {c.label for c in dataset.clips}
    if labels != {0, 1}:
        raise ContractError(
            f"training split must contain both classes, found labels {sorted(labels)}"
        )


def train_encoders_stage(dataset: StackDataset, cfg: TrainConfig) -> PipelineResult:
    """Stage 1 (+2 prep): train stack encoders on the dataset, then freeze them."""
    _require_both_classes(dataset)
    history: dict = {"stage1": [], "stage3": []}

    side = cfg.ingest.stack_side
    seg_encoder = StackEncoder.init(rng_for(cfg.seed, "init-seg"), side=side)
    mask_stacks, stack_labels = _gather_stacks(dataset, "masks")
    seg_hist = train_encoder(
        seg_encoder, mask_stacks, stack_labels, cfg.stage1, cfg.focal,
        cfg.batch_size, cfg.seed, "seg",
    )

    image_encoder: StackEncoder | None = None
    img_hist: list[dict] | None = None
    if cfg.image_embeddings_dir is None:
        image_encoder = StackEncoder.init(rng_for(cfg.seed, "init-img"), side=side)
        frame_stacks, _ = _gather_stacks(dataset, "frames")
        img_hist = train_encoder(
            image_encoder, frame_stacks, stack_labels, cfg.stage1, cfg.focal,
            cfg.batch_size, cfg.seed, "image",
        )
        image_provider = EncoderImageProvider(image_encoder)
    else:
        image_provider = PrecomputedImageProvider(cfg.image_embeddings_dir)

    for i, rec in enumerate(seg_hist):
        entry = {"epoch": rec["epoch"], "lr": rec["lr"], "seg_loss": rec["loss"]}
        entry["image_loss"] = img_hist[i]["loss"] if img_hist else None
        history["stage1"].append(entry)

    seg_encoder.set_requires_grad(False)
    if image_encoder is not None:
        image_encoder.set_requires_grad(False)
    return PipelineResult(
        fusion_model=None,
        seg_encoder=seg_encoder,
        image_encoder=image_encoder,
        history=history,
        skipped=dataset.skipped,
        image_provider=image_provider,
    )


def train_fusion_stage(
    sequences: list[EmbeddingSequence], cfg: TrainConfig, variant: str | None = None
) -> tuple[object, list[dict]]:
    """Stage 3: train one fusion variant on materialised sequences."""
    variant = variant or cfg.variant
    model = build_model(variant, rng_for(cfg.seed, "init-fusion", variant), cfg.fusion)
    opt = AdamW(
        model.named_parameters(), cfg.stage3.lr, cfg.stage3.betas,
        cfg.stage3.eps, cfg.stage3.weight_decay,
    )
    n = len(sequences)
    if n == 0:
        raise ContractError("stage 3 needs at least one sequence")
    history = []
    for epoch in range(cfg.stage3.epochs):
        opt.lr = cosine_lr(epoch, cfg.stage3.epochs, cfg.stage3.lr, cfg.stage3.lr_min)
        order = rng_for(cfg.seed, "stage3-shuffle", variant, epoch).permutation(n)
        total = 0.0
        for i in order:
            seq = sequences[i]
            out = model.forward(seq.image, seq.seg)
            loss = focal_loss(out.logit, float(seq.label), cfg.focal)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
        history.append({"epoch": epoch, "lr": opt.lr, "loss": total / n})
    return model, history


def prepare_dataset(manifest, ingest_cfg: IngestConfig) -> StackDataset:
    """Load a manifest (path or ClipRef list) and ingest every usable clip."""
    refs = manifest if isinstance(manifest, list) else load_manifest(manifest)
    return ingest_clips([r.load() for r in refs], ingest_cfg)


def train_pipeline(manifest, cfg: TrainConfig) -> PipelineResult:
    """Run all three stages on every usable clip of a manifest.

    `manifest` is a path, a list of ClipRefs, or a prepared StackDataset.
    Refuses single-class training data.
    """
    if isinstance(manifest, StackDataset):
        dataset = manifest
    else:
        dataset = prepare_dataset(manifest, cfg.ingest)
    result = train_encoders_stage(dataset, cfg)
    sequences = result.embed(dataset.clips)
    model, stage3_hist = train_fusion_stage(sequences, cfg)
    result.history["stage3"] = stage3_hist
    result.fusion_model = model
    return result


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"STCK"
CKPT_VERSION = 1


def _model_tensor_dict(result: PipelineResult) -> dict[str, Tensor]:
    tensors = {f"fusion.{k}": v for k, v in result.fusion_model.named_parameters().items()}
    tensors.update({f"seg_encoder.{k}": v for k, v in result.seg_encoder.named_parameters().items()})
    if result.image_encoder is not None:
        tensors.update(
            {f"image_encoder.{k}": v for k, v in result.image_encoder.named_parameters().items()}
        )
    return tensors


def save_checkpoint(path, result: PipelineResult) -> None:
    """Write model weights plus config flags; save→load→save is byte-identical."""
    tensors = _model_tensor_dict(result)
    blobs, directory, offset = [], [], 0
    for name, t in tensors.items():
        blob = sttf_bytes(t.data)
        directory.append([name, offset, len(blob)])
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CKPT_VERSION,
        "variant": result.fusion_model.variant,
        "fusion_config": result.fusion_model.config.as_dict(),
        "has_image_encoder": result.image_encoder is not None,
        "encoder_meta": {"in_channels": result.seg_encoder.in_channels, "side": result.seg_encoder.side},
        "tensors": directory,
    }
    head_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(head_bytes)))
        fh.write(head_bytes)
        for blob in blobs:
            fh.write(blob)


def _encoder_from(tensors: dict[str, np.ndarray], prefix: str, meta: dict) -> StackEncoder:
    def p(name: str) -> Tensor:
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        return Tensor(tensors[key], requires_grad=True)
    return StackEncoder(
        conv1_w=p("conv1_w"), conv1_b=p("conv1_b"),
        conv2_w=p("conv2_w"), conv2_b=p("conv2_b"),
        fc_embed_w=p("fc_embed_w"), fc_embed_b=p("fc_embed_b"),
        fc_head_w=p("fc_head_w"), fc_head_b=p("fc_head_b"),
        in_channels=int(meta["in_channels"]), side=int(meta["side"]),
    )


def _attention_from(tensors: dict[str, np.ndarray], prefix: str, heads: int) -> AttentionParams:
    def p(name: str) -> Tensor:
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        return Tensor(tensors[key], requires_grad=True)
    return AttentionParams(
        wq=p("wq"), bq=p("bq"), wk=p("wk"), bk=p("bk"),
        wv=p("wv"), bv=p("bv"), wo=p("wo"), bo=p("bo"), heads=heads,
    )


def _fusion_from(variant: str, config: FusionConfig, tensors: dict[str, np.ndarray]):
    def p(name: str) -> Tensor:
        key = f"fusion.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        return Tensor(tensors[key], requires_grad=True)
    if variant == "stact":
        return StactModel(
            self_block=_attention_from(tensors, "fusion.self_block", config.heads),
            cross_block=_attention_from(tensors, "fusion.cross_block", config.heads),
            head_w=p("head_w"), head_b=p("head_b"), config=config,
        )
    if variant in ("image_self", "seg_self"):
        return SingleBranchModel(
            source=variant.split("_")[0],
            block=_attention_from(tensors, "fusion.block", config.heads),
            head_w=p("head_w"), head_b=p("head_b"), config=config,
        )
    if variant == "concat_pool":
        return ConcatPoolModel(head_w=p("head_w"), head_b=p("head_b"), config=config)
    raise CheckpointError(f"checkpoint declares unknown variant {variant!r}")


def load_checkpoint(path) -> PipelineResult:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 10 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version, head_len = struct.unpack_from("<HI", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 10 + head_len:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob[10:10 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {exc}") from exc
    payload = blob[10 + head_len:]
    tensors: dict[str, np.ndarray] = {}
    for name, offset, length in header["tensors"]:
        if offset + length > len(payload):
            raise CheckpointError(f"{path}: truncated tensor payload for {name!r}")
        arr, used = parse_sttf(payload[offset:offset + length], f"{path}:{name}")
        if used != length:
            raise CheckpointError(f"{path}: tensor {name!r} length mismatch")
        tensors[name] = arr

    config = FusionConfig(**header["fusion_config"])
    fusion_model = _fusion_from(header["variant"], config, tensors)
    seg_encoder = _encoder_from(tensors, "seg_encoder", header["encoder_meta"])
    image_encoder = None
    image_provider = None
    if header["has_image_encoder"]:
        image_encoder = _encoder_from(tensors, "image_encoder", header["encoder_meta"])
        image_provider = EncoderImageProvider(image_encoder)
    return PipelineResult(
        fusion_model=fusion_model,
        seg_encoder=seg_encoder,
        image_encoder=image_encoder,
        history={},
        skipped=[],
        image_provider=image_provider,
    )
