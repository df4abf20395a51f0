"""Downstream fine-tuning: task heads, task losses and the training loop.

The encoder sees every token of every series (no masking). Missing series are
zero-padded and stay in the input so its length is fixed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, ModelConfig, config_hash
from .errors import (ConfigurationError, NumericError, StrictLoadError, UndefinedMetricError,
                     UsageError)
from .masking import full_visibility_plan
from .metrics import auc, dice_score
from .model import encode, embed_visible, encoder_names, init_params
from .numerics import autodiff as ad
from .numerics.autodiff import Tape, Tensor
from .numerics.layers import Params, init_linear
from .numerics.optim import AdamState, LrSchedule, adam_step, cosine_lr
from .pretrain import STREAM_INIT, deterministic_scope
from .volumes import (Dataset, LabeledExample, MultiSeriesVolume, TokenGrid, flip_and_crop,
                      load_dataset, patchify, unpatchify_array)

STREAM_SUBSAMPLE, STREAM_MISSING, STREAM_HEAD, STREAM_FT_BATCH, STREAM_FT_AUG = range(11, 16)

TASK_LABEL_KIND = {"classification": "class", "segmentation": "mask"}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a 2-logit vector."""
    if logits.shape != (2,):
        raise UsageError(f"cross_entropy expects 2 logits, got shape {logits.shape}")
    if label not in (0, 1):
        raise UsageError(f"label must be 0 or 1, got {label}")
    return ad.mul(ad.log_softmax(logits)[int(label)], -1.0)


def dice_loss(pred: Tensor, target, eps: float = 1e-6) -> Tensor:
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps)."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise UsageError(f"dice_loss shape mismatch {pred.shape} vs {target.shape}")
    inter = ad.sum_(pred * target)
    denom = ad.sum_(pred) + float(target.sum()) + eps
    return 1.0 - (2.0 * inter + eps) / denom


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def init_head(task: str, model_cfg: ModelConfig, rng: np.random.Generator) -> Params:
    dtype = np.float64 if model_cfg.precision == "f64" else np.float32
    if task == "classification":
        return init_linear(rng, model_cfg.d_enc, 2, "head.cls", dtype)
    if task == "segmentation":
        return init_linear(rng, model_cfg.d_enc, model_cfg.patch_edge ** 3, "head.seg", dtype)
    raise ConfigurationError(f"unknown task {task!r}", field="finetune.task")


def pad_missing_series(volume: MultiSeriesVolume) -> MultiSeriesVolume:
    """Zero every absent series; present series are returned untouched."""
    if not any(volume.presence):
        raise UsageError(f"subject {volume.subject_id!r} has no present series")
    if all(volume.presence):
        return volume
    data = volume.data.copy()
    for j, present in enumerate(volume.presence):
        if not present:
            data[j] = 0.0
    return replace(volume, data=data)


def _features(volume: MultiSeriesVolume, params: Params,
              cfg: ModelConfig) -> tuple[Tensor, TokenGrid]:
    grid = patchify(pad_missing_series(volume), cfg.patch_edge)
    plan = full_visibility_plan(grid.series_count, grid.n_tokens)
    return encode(embed_visible(grid, plan, params, cfg), params, cfg), grid


def class_logits(volume: MultiSeriesVolume, params: Params, cfg: ModelConfig) -> Tensor:
    """Mean-pooled encoder tokens through a linear head: 2 logits."""
    z, _ = _features(volume, params, cfg)
    pooled = ad.mean(z, axis=0, keepdims=True)
    return (pooled @ params["head.cls.w"] + params["head.cls.b"]).reshape(2)


def seg_token_probs(volume: MultiSeriesVolume, params: Params, cfg: ModelConfig) -> Tensor:
    """Per-voxel lesion probability in token layout (N, p**3).

    Each token's scores are averaged over series at the same grid cell.
    """
    z, grid = _features(volume, params, cfg)
    scores = (z @ params["head.seg.w"] + params["head.seg.b"])
    scores = scores.reshape(grid.series_count, grid.n_tokens, cfg.patch_edge ** 3)
    return ad.sigmoid(ad.mean(scores, axis=0))


def predict_mask(volume: MultiSeriesVolume, params: Params, cfg: ModelConfig) -> np.ndarray:
    probs = seg_token_probs(volume, params, cfg).data
    grid_dims = tuple(e // cfg.patch_edge for e in volume.extents)
    return unpatchify_array(probs[None], grid_dims, cfg.patch_edge)[0] > 0.5


def example_loss(ex: LabeledExample, params: Params, cfg: ModelConfig, task: str) -> Tensor:
    if task == "classification":
        return cross_entropy(class_logits(ex.volume, params, cfg), ex.label)
    probs = seg_token_probs(ex.volume, params, cfg)
    target = patchify(ex.mask[None].astype(np.float32), cfg.patch_edge).tokens[0]
    return dice_loss(probs, target)


def task_objective(batch: Sequence[LabeledExample], params: Params, cfg: ModelConfig,
                   task: str) -> Tensor:
    """Arithmetic mean of per-example task losses over the batch."""
    return ad.mean(ad.stack([example_loss(ex, params, cfg, task) for ex in batch]))


def check_task_labels(task: str, label_kind: str) -> None:
    if TASK_LABEL_KIND.get(task) != label_kind:
        raise ConfigurationError(
            f"head kind {task!r} needs {TASK_LABEL_KIND.get(task)!r} labels but the dataset "
            f"has label kind {label_kind!r}",
            field="finetune.task")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(examples: Sequence[LabeledExample], params: Params, cfg: ModelConfig,
             task: str) -> dict:
    if not examples:
        return {"n": 0}
    if task == "classification":
        scores, labels = [], []
        for ex in examples:
            logits = class_logits(ex.volume, params, cfg).data.astype(np.float64)
            if not np.all(np.isfinite(logits)):
                raise NumericError(f"non-finite logits for subject {ex.volume.subject_id}")
            scores.append(float(logits[1] - logits[0]))
            labels.append(ex.label)
        scores_a, labels_a = np.array(scores), np.array(labels)
        try:
            value = auc(scores_a, labels_a)
        except UndefinedMetricError:
            value = None
        acc = float(np.mean((scores_a > 0).astype(int) == labels_a))
        return {"n": len(examples), "auc": value, "accuracy": acc}
    dices = [dice_score(predict_mask(ex.volume, params, cfg), ex.mask) for ex in examples]
    return {"n": len(examples), "dice": float(np.mean(dices))}


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def subsample_ids(ids: Sequence[str], ratio: float, rng: np.random.Generator) -> list[str]:
    """Patient-wise random subset of floor(ratio * len(ids)) training subjects."""
    count = int(math.floor(ratio * len(ids) + 1e-9))
    if count < 1:
        raise ConfigurationError(f"labeling ratio {ratio} leaves no training subject out of "
                                 f"{len(ids)}", field="finetune.labeling_ratio")
    picks = np.sort(rng.choice(len(ids), size=count, replace=False))
    return [ids[i] for i in picks]


def drop_random_series(examples: Sequence[LabeledExample], fraction: float, max_drop: int,
                       rng: np.random.Generator) -> list[LabeledExample]:
    """Remove one to ``max_drop`` series (never all) from a random subset of subjects."""
    out = []
    for ex in examples:
        s = ex.volume.series_count
        if s < 2 or rng.random() >= fraction:
            out.append(ex)
            continue
        k = int(rng.integers(1, min(max_drop, s - 1) + 1))
        drop = rng.choice(s, size=k, replace=False)
        presence = list(ex.volume.presence)
        for j in drop:
            presence[int(j)] = False
        vol = pad_missing_series(replace(ex.volume, presence=tuple(presence)))
        out.append(replace(ex, volume=vol))
    return out


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    params: Params
    report: dict
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def load_labeled(cfg: ExperimentConfig) -> Dataset:
    if not cfg.data.labeled_manifest:
        raise ConfigurationError("no labeled dataset given", field="data.labeled_manifest")
    return load_dataset(cfg.data.labeled_manifest, normalize=cfg.data.normalize)


def _encoder_init(cfg: ExperimentConfig, checkpoint) -> tuple[Params, ModelConfig, str]:
    if checkpoint is None:
        params = init_params(cfg.model, np.random.default_rng([cfg.seed, STREAM_INIT]),
                             decoder=False)
        return params, cfg.model, "scratch"
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    model_cfg = ModelConfig.model_validate(ckpt.model)
    template = init_params(model_cfg, np.random.default_rng(0), decoder=False)
    names = encoder_names(template)
    missing = [n for n in names if n not in ckpt.params]
    if missing:
        raise StrictLoadError(f"checkpoint lacks encoder parameters {missing[:5]}")
    dtype = np.float64 if model_cfg.precision == "f64" else np.float32
    return ckpt.tensors(names, dtype=dtype), model_cfg, "checkpoint"


def prepare_splits(cfg: ExperimentConfig, dataset: Dataset
                   ) -> tuple[list[LabeledExample], list[LabeledExample], list[LabeledExample]]:
    """Train (subsampled to the labeling ratio), val and test examples.

    Series dropping for the missing-series setting draws from one stream in
    the fixed order train, val, test, so evaluation can rebuild the exact
    splits a fine-tuning run saw.
    """
    fc = cfg.finetune
    by_split = {name: dataset.split(name) for name in ("train", "val", "test")}
    train_ids = [e.volume.subject_id for e in by_split["train"]]
    if not train_ids:
        raise ConfigurationError("labeled dataset has no training subjects", field="data")
    keep = set(subsample_ids(train_ids, fc.labeling_ratio,
                             np.random.default_rng([cfg.seed, STREAM_SUBSAMPLE])))
    train = [e for e in by_split["train"] if e.volume.subject_id in keep]
    val, test = by_split["val"], by_split["test"]
    if fc.missing.fraction > 0:
        mrng = np.random.default_rng([cfg.seed, STREAM_MISSING])
        train = drop_random_series(train, fc.missing.fraction, fc.missing.max_drop, mrng)
        val = drop_random_series(val, fc.missing.fraction, fc.missing.max_drop, mrng)
        test = drop_random_series(test, fc.missing.fraction, fc.missing.max_drop, mrng)
    return train, val, test


def finetune(cfg: ExperimentConfig, dataset: Dataset | None = None, checkpoint=None,
             run_dir: str | Path | None = None) -> FinetuneResult:
    """Fine-tune an encoder (from ``checkpoint``, or random init) plus a task head.

    ``checkpoint`` falls back to ``cfg.finetune.checkpoint``; passing neither
    trains from scratch.
    """
    fc = cfg.finetune
    if dataset is None:
        dataset = load_labeled(cfg)
    check_task_labels(fc.task, dataset.label_kind)
    if checkpoint is None and fc.checkpoint:
        checkpoint = fc.checkpoint

    params, model_cfg, init_kind = _encoder_init(cfg, checkpoint)
    params.update(init_head(fc.task, model_cfg, np.random.default_rng([cfg.seed, STREAM_HEAD])))
    trainable = {k: p for k, p in params.items()
                 if not (fc.freeze_encoder and not k.startswith("head."))}

    train, val, test = prepare_splits(cfg, dataset)

    losses: list[float] = []
    records: list[dict] = []
    brng = np.random.default_rng([cfg.seed, STREAM_FT_BATCH])
    arng = np.random.default_rng([cfg.seed, STREAM_FT_AUG])
    state = AdamState.zeros_like(trainable)
    bsz = min(fc.batch_size, len(train))
    with deterministic_scope(cfg.deterministic):
        if fc.steps:
            schedule = LrSchedule(fc.base_lr, fc.steps, fc.min_lr)
            for step in range(fc.steps):
                lr = cosine_lr(step, schedule)
                batch = [train[int(i)] for i in brng.choice(len(train), size=bsz, replace=False)]
                if fc.augment_flip:
                    batch = [_flip_example(ex, arng) for ex in batch]
                with Tape() as tape:
                    loss = task_objective(batch, params, model_cfg, fc.task)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite fine-tuning loss at step {step}")
                grads = ad.backward(loss, tape, trainable)
                adam_step(trainable, grads, state, lr, weight_decay=fc.weight_decay,
                          decoupled=fc.decoupled_weight_decay)
                losses.append(float(loss.data))
                records.append({"step": step, "lr": lr, "loss": losses[-1]})

        report = {
            "task": fc.task,
            "init": init_kind,
            "seed": cfg.seed,
            "config_hash": config_hash(cfg),
            "labeling_ratio": fc.labeling_ratio,
            "n_train": len(train),
            "steps": fc.steps,
            "final_loss": losses[-1] if losses else None,
            "splits": {"val": evaluate(val, params, model_cfg, fc.task),
                       "test": evaluate(test, params, model_cfg, fc.task)},
        }

    ckpt_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        ckpt_path = run_dir / "checkpoints" / "finetuned.ckpt"
        save_checkpoint(ckpt_path, params, None, fc.steps, f"finetune-{fc.task}",
                        model_cfg.model_dump(mode="json"),
                        {"seed": cfg.seed, "config_hash": config_hash(cfg)},
                        {"task": fc.task, "label_kind": TASK_LABEL_KIND[fc.task]})
        (run_dir / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        with open(run_dir / "trainlog.ndjson", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return FinetuneResult(params, report, losses, ckpt_path)


def _flip_example(ex: LabeledExample, rng: np.random.Generator) -> LabeledExample:
    if ex.mask is None:
        return replace(ex, volume=flip_and_crop(ex.volume, rng))
    vol, mask = flip_and_crop(ex.volume, rng, mask=ex.mask)
    return LabeledExample(vol, mask=mask)


def evaluate_checkpoint(cfg: ExperimentConfig, dataset: Dataset, checkpoint) -> dict:
    """Re-evaluate a fine-tuned checkpoint on the val/test splits ``cfg`` implies.

    The head kind stored in the checkpoint must match the dataset's label kind.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if not ckpt.kind.startswith("finetune-"):
        raise ConfigurationError(f"checkpoint kind {ckpt.kind!r} has no task head",
                                 field="--checkpoint")
    task = ckpt.kind[len("finetune-"):]
    check_task_labels(task, dataset.label_kind)
    model_cfg = ModelConfig.model_validate(ckpt.model)
    dtype = np.float64 if model_cfg.precision == "f64" else np.float32
    params = ckpt.tensors(dtype=dtype)
    _, val, test = prepare_splits(cfg, dataset)
    with deterministic_scope(cfg.deterministic):
        return {"task": task,
                "splits": {"val": evaluate(val, params, model_cfg, task),
                           "test": evaluate(test, params, model_cfg, task)}}
