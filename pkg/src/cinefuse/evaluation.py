"""Metrics, stratified cross-validation, and the variant comparison runner.

Classification metrics treat malignant (label 1) as the positive class;
weighted-average variants are reported alongside for comparison. AUROC is
the rank-based (Mann-Whitney) estimator with ties counted half. Folds are
stratified at the clip level so no clip ever straddles a train/test
boundary, and every variant of a comparison run shares the same folds,
the same stage-1 encoders, and seed derivation.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, UndefinedMetricError
from .rng import rng_for
from .training import (
    PipelineResult,
    TrainConfig,
    prepare_dataset,
    train_encoders_stage,
    train_fusion_stage,
)
from .windowing import StackDataset

METRIC_NAMES = ("acc", "precision", "recall", "f1", "auroc")


def confusion_metrics(probs, labels, threshold: float = 0.5) -> dict:
    """Binary metrics at a fixed threshold, with zero-denominator flags.

    Predictions are 1 iff prob >= threshold. Precision/recall are defined
    as 0 (and flagged) when their denominator is empty; f1 is 0 when
    precision + recall is 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 1 or probs.size < 1:
        raise ContractError(
            f"confusion_metrics needs equal-length 1-D inputs, got {probs.shape} and {labels.shape}"
        )
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    preds = probs >= threshold
    pos = labels == 1
    tp = int(np.sum(preds & pos))
    fp = int(np.sum(preds & ~pos))
    fn = int(np.sum(~preds & pos))
    tn = int(np.sum(~preds & ~pos))

    def safe_div(num, den):
        return (num / den if den else 0.0), den == 0

    precision, p_zero = safe_div(tp, tp + fp)
    recall, r_zero = safe_div(tp, tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    # the same three metrics with class 0 as the positive, for support weighting
    precision0, _ = safe_div(tn, tn + fn)
    recall0, _ = safe_div(tn, tn + fp)
    f10 = 2 * precision0 * recall0 / (precision0 + recall0) if precision0 + recall0 else 0.0
    n_pos, n_neg = tp + fn, tn + fp
    n = n_pos + n_neg
    return {
        "acc": (tp + tn) / n,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "precision_weighted": (n_pos * precision + n_neg * precision0) / n,
        "recall_weighted": (n_pos * recall + n_neg * recall0) / n,
        "f1_weighted": (n_pos * f1 + n_neg * f10) / n,
        "precision_zero_denominator": p_zero,
        "recall_zero_denominator": r_zero,
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
    }


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5·P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError(
            f"auroc needs equal-length 1-D inputs, got {scores.shape} and {labels.shape}"
        )
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"auroc undefined with {n_pos} positives and {n_neg} negatives"
        )
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def aggregate_nodule(stack_probs) -> float:
    """Clip-level probability for stack-level baselines: the arithmetic mean."""
    probs = np.asarray(stack_probs, dtype=np.float64)
    if probs.size < 1:
        raise ContractError("aggregate_nodule needs at least one stack probability")
    return float(probs.mean())


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Disjoint test folds of indices with per-class counts differing by <= 1.

    Classes are dealt round-robin through a shared fold cursor so total
    fold sizes also stay within one of each other. A class with fewer
    members than k triggers a warning and best-effort folds.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ContractError(f"k-fold needs k >= 2, got {k}")
    if labels.size < k:
        raise ContractError(f"cannot build {k} folds from {labels.size} clips")
    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if 0 < idx.size < k:
            warnings.warn(
                f"class {cls} has only {idx.size} clips for {k} folds; "
                "some test folds will be single-class",
                stacklevel=2,
            )
        idx = idx[rng_for(seed, "kfold", cls).permutation(idx.size)]
        for i in idx:
            folds[cursor % k].append(int(i))
            cursor += 1
    return [np.array(sorted(f), dtype=int) for f in folds]


def split_hash(folds: list[np.ndarray]) -> str:
    blob = json.dumps([[int(i) for i in f] for f in folds]).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- cross-validated evaluation ---------------------------------------------------


@dataclass
class CrossvalConfig:
    k: int = 5
    fold_seed: int = 0
    threshold: float = 0.5
    variants: tuple[str, ...] = ("stact",)
    train: TrainConfig = field(default_factory=TrainConfig)


def _granularity_metrics(probs, labels, threshold) -> dict:
    out = confusion_metrics(probs, labels, threshold)
    try:
        out["auroc"] = auroc(probs, labels)
    except UndefinedMetricError:
        out["auroc"] = None  # reported as absent, never as 0
    return out


def evaluate_sequences(model, sequences, threshold: float = 0.5) -> dict:
    """Frame- and nodule-level metrics of one model over test sequences."""
    nodule_probs, nodule_labels = [], []
    frame_probs, frame_labels = [], []
    for seq in sequences:
        out = model.forward(seq.image, seq.seg, want_rows=True)
        nodule_probs.append(out.prob.item())
        nodule_labels.append(seq.label)
        frame_probs.extend(1.0 / (1.0 + np.exp(-out.row_logits)))
        frame_labels.extend([seq.label] * seq.n_steps)
    return {
        "nodule": _granularity_metrics(np.array(nodule_probs), np.array(nodule_labels), threshold),
        "frame": _granularity_metrics(np.array(frame_probs), np.array(frame_labels), threshold),
        "nodule_probs": nodule_probs,
        "nodule_labels": nodule_labels,
    }


def _aggregate_over_folds(fold_metrics: list[dict]) -> dict:
    """Mean and population std per metric and granularity across folds."""
    agg: dict = {}
    for gran in ("frame", "nodule"):
        agg[gran] = {}
        for name in METRIC_NAMES:
            values = [f[gran][name] for f in fold_metrics if f[gran][name] is not None]
            agg[gran][name] = {
                "mean": float(np.mean(values)) if values else None,
                "std": float(np.std(values)) if values else None,
                "n_folds": len(values),
            }
    return agg


@dataclass
class CrossvalResult:
    k: int
    threshold: float
    fold_seed: int
    train_seed: int
    split_hash: str
    folds: list[list[int]]
    clip_ids: list[str]
    skipped: list
    variants: dict
    histories: dict

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "threshold": self.threshold,
            "fold_seed": self.fold_seed,
            "train_seed": self.train_seed,
            "split_hash": self.split_hash,
            "folds": self.folds,
            "clip_ids": self.clip_ids,
            "skipped": [{"clip_id": s.clip_id, "reason": s.reason} for s in self.skipped],
            "variants": self.variants,
        }


def fold_train_seed(base_seed: int, fold: int) -> int:
    """Derived stage seed so each fold trains with an independent stream."""
    return int(rng_for(base_seed, "fold-seed", fold).integers(2 ** 63))


def run_crossval(manifest, cfg: CrossvalConfig) -> CrossvalResult:
    """Stratified k-fold: stages 1-3 per fold on that fold's training split
    only, every requested variant evaluated on the held-out fold.

    Stage-1 encoders are shared across variants within a fold (identical
    embeddings isolate the fusion mechanism under comparison); each variant
    trains its own stage-3 parameters.
    """
    dataset = manifest if isinstance(manifest, StackDataset) else prepare_dataset(
        manifest, cfg.train.ingest
    )
    if not dataset.clips:
        raise ContractError("no usable clips in the dataset")
    labels = np.array([c.label for c in dataset.clips])
    folds = stratified_kfold(labels, cfg.k, cfg.fold_seed)

    per_variant_folds: dict[str, list[dict]] = {v: [] for v in cfg.variants}
    pooled: dict[str, dict] = {v: {"probs": [], "labels": []} for v in cfg.variants}
    histories: dict = {}

    for f, test_idx in enumerate(folds):
        test_set = set(int(i) for i in test_idx)
        train_clips = [c for i, c in enumerate(dataset.clips) if i not in test_set]
        test_clips = [dataset.clips[i] for i in sorted(test_set)]
        fold_cfg = replace(cfg.train, seed=fold_train_seed(cfg.train.seed, f))

        stage = train_encoders_stage(StackDataset(clips=train_clips), fold_cfg)
        train_seqs = stage.embed(train_clips)
        test_seqs = stage.embed(test_clips)
        histories[f"fold{f}.stage1"] = stage.history["stage1"]

        for variant in cfg.variants:
            model, hist = train_fusion_stage(train_seqs, fold_cfg, variant)
            histories[f"fold{f}.stage3.{variant}"] = hist
            result = evaluate_sequences(model, test_seqs, cfg.threshold)
            per_variant_folds[variant].append({
                "fold": f,
                "n_test_clips": len(test_clips),
                "frame": result["frame"],
                "nodule": result["nodule"],
            })
            pooled[variant]["probs"].extend(result["nodule_probs"])
            pooled[variant]["labels"].extend(result["nodule_labels"])

    variants_out = {}
    for variant in cfg.variants:
        fold_list = per_variant_folds[variant]
        variants_out[variant] = {
            "folds": fold_list,
            "aggregate": _aggregate_over_folds(fold_list),
            "pooled_nodule": _granularity_metrics(
                np.array(pooled[variant]["probs"]),
                np.array(pooled[variant]["labels"]),
                cfg.threshold,
            ),
        }

    return CrossvalResult(
        k=cfg.k,
        threshold=cfg.threshold,
        fold_seed=cfg.fold_seed,
        train_seed=cfg.train.seed,
        split_hash=split_hash(folds),
        folds=[[int(i) for i in f] for f in folds],
        clip_ids=[c.clip_id for c in dataset.clips],
        skipped=dataset.skipped,
        variants=variants_out,
        histories=histories,
    )


ABLATION_VARIANTS = ("image_self", "seg_self", "concat_pool", "stact")


def ablation_run(manifest, cfg: CrossvalConfig) -> CrossvalResult:
    """The four-way comparison: single-modality self-attention, the
    attention-free concat baseline, and the full fusion model, all over
    identical folds."""
    return run_crossval(manifest, replace(cfg, variants=ABLATION_VARIANTS))


def evaluate_checkpoint(result: PipelineResult, dataset: StackDataset, threshold: float = 0.5) -> dict:
    """Metrics of a trained model over every usable clip of a dataset."""
    if not dataset.clips:
        raise ContractError("no usable clips in the dataset")
    sequences = result.embed(dataset.clips)
    metrics = evaluate_sequences(result.fusion_model, sequences, threshold)
    return {
        "threshold": threshold,
        "n_clips": len(dataset.clips),
        "frame": metrics["frame"],
        "nodule": metrics["nodule"],
        "skipped": [{"clip_id": s.clip_id, "reason": s.reason} for s in dataset.skipped],
    }
