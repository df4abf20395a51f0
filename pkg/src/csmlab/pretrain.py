"""Self-supervised pretraining loop with checkpoint/resume and NDJSON logs."""

from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, strict_names
from .config import ExperimentConfig, MaskConfig, ModelConfig, config_hash
from .errors import ConfigurationError, NumericError
from .masking import MaskPlan, masked_voxel_fraction, sample_eval_plans, sample_mask_plan
from .metrics import mean_baseline_mse
from .model import forward_loss, init_params
from .numerics import autodiff as ad
from .numerics.autodiff import Tape
from .numerics.layers import Params
from .numerics.optim import AdamState, LrSchedule, adam_step, cosine_lr
from .volumes import MultiSeriesVolume, flip_and_crop, load_dataset, patchify

log = logging.getLogger(__name__)

PRETRAIN_KIND = "pretrain"

# independent generator streams, keyed by purpose
STREAM_INIT, STREAM_BATCH, STREAM_MASK, STREAM_AUG, STREAM_DROPOUT = range(1, 6)


@dataclass
class TrainLog:
    run_id: str
    config_hash: str
    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    @classmethod
    def read_ndjson(cls, path: str | Path) -> "TrainLog":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        run_id = records[0].get("run_id", "") if records else ""
        chash = records[0].get("config_hash", "") if records else ""
        return cls(run_id, chash, records)


@dataclass
class PretrainResult:
    params: Params
    state: AdamState
    log: TrainLog
    step: int
    checkpoint: Path | None = None
    plans: list[list[MaskPlan]] = field(default_factory=list)


def deterministic_scope(enabled: bool):
    """Single-threaded BLAS when ``enabled``; no-op otherwise."""
    return threadpool_limits(limits=1) if enabled else contextlib.nullcontext()


def validate_volumes(volumes: Sequence[MultiSeriesVolume], cfg: ExperimentConfig) -> None:
    if not volumes:
        raise ConfigurationError("pretraining dataset is empty", field="data.pretrain_manifest")
    extents = volumes[0].extents
    for v in volumes:
        if v.extents != extents:
            raise ConfigurationError(f"subject {v.subject_id} has extents {v.extents}, "
                                     f"expected {extents}", field="data.extents")
        if v.series_count > cfg.model.s_max:
            raise ConfigurationError(f"subject {v.subject_id} has {v.series_count} series, "
                                     f"s_max={cfg.model.s_max}", field="model.s_max")
        if not any(v.presence):
            raise ConfigurationError(f"subject {v.subject_id} has no present series",
                                     field="data")


def load_pretrain_volumes(cfg: ExperimentConfig) -> list[MultiSeriesVolume]:
    if not cfg.data.pretrain_manifest:
        raise ConfigurationError("no pretraining dataset given", field="data.pretrain_manifest")
    path = Path(cfg.data.pretrain_manifest)
    if not path.exists():
        raise ConfigurationError(f"{path} does not exist", field="data.pretrain_manifest")
    ds = load_dataset(path, normalize=cfg.data.normalize)
    return ds.volumes("train") or ds.volumes()


def _rng_states(rngs: dict[str, np.random.Generator]) -> dict:
    return {k: r.bit_generator.state for k, r in rngs.items()}


def _restore_rngs(rngs: dict[str, np.random.Generator], states: dict) -> None:
    for k, r in rngs.items():
        r.bit_generator.state = states[k]


def pretrain(cfg: ExperimentConfig, volumes: Sequence[MultiSeriesVolume] | None = None,
             run_dir: str | Path | None = None, resume: str | Path | Checkpoint | None = None,
             stop_at: int | None = None, keep_plans: bool = False) -> PretrainResult:
    """Masked-reconstruction pretraining.

    Per step: draw a batch, augment, sample a mask plan per subject, average
    the per-subject reconstruction losses, backpropagate, and take one Adam
    step at the cosine-scheduled learning rate. ``stop_at`` ends the run early
    (the schedule still spans ``cfg.pretrain.steps``); ``resume`` continues
    from a checkpoint written by an earlier call.
    """
    if volumes is None:
        volumes = load_pretrain_volumes(cfg)
    volumes = list(volumes)
    validate_volumes(volumes, cfg)
    pc, mc, model_cfg = cfg.pretrain, cfg.mask, cfg.model
    chash = config_hash(cfg)
    run_id = f"pretrain-{chash[:12]}-seed{cfg.seed}"

    rngs = {
        "batch": np.random.default_rng([cfg.seed, STREAM_BATCH]),
        "mask": np.random.default_rng([cfg.seed, STREAM_MASK, mc.seed]),
        "aug": np.random.default_rng([cfg.seed, STREAM_AUG]),
        "dropout": np.random.default_rng([cfg.seed, STREAM_DROPOUT]),
    }
    params = init_params(model_cfg, np.random.default_rng([cfg.seed, STREAM_INIT]))
    state = AdamState.zeros_like(params)
    start = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        strict_names(ckpt, params, "pretraining model")
        params = ckpt.tensors(params, dtype=params["patch_embed.w"].dtype)
        state = ckpt.state or AdamState.zeros_like(params)
        start = ckpt.step
        _restore_rngs(rngs, ckpt.lineage["rng"])

    run_dir = Path(run_dir) if run_dir is not None else None
    trainlog = TrainLog(run_id, chash)
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        trainlog.path = run_dir / "trainlog.ndjson"
        if resume is None and trainlog.path.exists():
            trainlog.path.unlink()

    schedule = LrSchedule(pc.base_lr, pc.steps, pc.min_lr, pc.warmup_steps)
    end = pc.steps if stop_at is None else min(stop_at, pc.steps)
    n = len(volumes)
    bsz = min(pc.batch_size, n)
    epoch_size = pc.epoch_size or n
    drop_rng = rngs["dropout"] if model_cfg.dropout > 0 else None
    kept_plans: list[list[MaskPlan]] = []
    last_ckpt = None

    def checkpoint(step_done: int, name: str) -> Path:
        path = run_dir / "checkpoints" / name
        save_checkpoint(path, params, state, step_done, PRETRAIN_KIND,
                        model_cfg.model_dump(mode="json"),
                        {"seed": cfg.seed, "mask_seed": mc.seed, "config_hash": chash,
                         "rng": _rng_states(rngs)})
        return path

    with deterministic_scope(cfg.deterministic):
        for step in range(start, end):
            t0 = time.perf_counter()
            lr = cosine_lr(step, schedule)
            idx = rngs["batch"].choice(n, size=bsz, replace=False)
            plans, fractions = [], []
            with Tape() as tape:
                losses = []
                for i in idx:
                    vol = volumes[int(i)]
                    if pc.augment_flip or pc.crop:
                        vol = flip_and_crop(vol, rngs["aug"], pc.crop, pc.augment_flip)
                    grid = patchify(vol, model_cfg.patch_edge)
                    plan = sample_mask_plan(grid.series_count, grid.n_tokens, mc, rngs["mask"],
                                            absent=vol.absent)
                    loss_i = forward_loss(grid, plan, params, model_cfg, mc, drop_rng)
                    if not np.isfinite(loss_i.data):
                        raise NumericError(f"non-finite loss at step {step} for subject "
                                           f"{vol.subject_id or int(i)}")
                    losses.append(loss_i)
                    plans.append(plan)
                    fractions.append(masked_voxel_fraction(plan))
                loss = ad.mean(ad.stack(losses))
            grads = ad.backward(loss, tape, params)
            adam_step(params, grads, state, lr, weight_decay=pc.weight_decay,
                      decoupled=pc.decoupled_weight_decay)
            if keep_plans:
                kept_plans.append(plans)
            trainlog.append({
                "step": step,
                "epoch": (step * bsz) // epoch_size,
                "lr": lr,
                "loss": float(loss.data),
                "masked_voxel_fraction": float(np.mean(fractions)),
                "subject_fractions": fractions,
                "subjects": [volumes[int(i)].subject_id for i in idx],
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            })
            done = step + 1
            if run_dir is not None and pc.checkpoint_every and done % pc.checkpoint_every == 0 \
                    and done < end:
                checkpoint(done, f"step-{done:06d}.ckpt")
        if run_dir is not None:
            last_ckpt = checkpoint(end, "final.ckpt")

    return PretrainResult(params, state, trainlog, end, last_ckpt, kept_plans)


# ---------------------------------------------------------------------------
# held-out evaluation
# ---------------------------------------------------------------------------


def evaluate_reconstruction(params: Params, model_cfg: ModelConfig,
                            volumes: Sequence[MultiSeriesVolume], mask_cfg: MaskConfig,
                            seed: int = 0) -> dict:
    """Held-out masked MSE of the model and of the per-series-mean baseline.

    Both use the same sampled plans; values are means of per-subject MSEs.
    """
    plans = sample_eval_plans(volumes, mask_cfg, model_cfg.patch_edge, seed)
    model_losses = []
    for v, plan in zip(volumes, plans):
        grid = patchify(v, model_cfg.patch_edge)
        model_losses.append(float(forward_loss(grid, plan, params, model_cfg, mask_cfg).data))
    baseline = mean_baseline_mse(volumes, mask_cfg, model_cfg.patch_edge, plans=plans)
    model_mse = float(np.mean(model_losses))
    return {"model_mse": model_mse, "baseline_mse": baseline,
            "ratio": model_mse / baseline if baseline > 0 else float("inf"),
            "n_subjects": len(volumes)}
