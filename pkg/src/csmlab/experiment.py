"""Dataset assembly shared by the CLI and the ablation runner.

When a manifest is configured it is loaded from disk; otherwise phantoms are
generated from the config's data section. The unlabeled pool and the labeled
set come from separate seed streams so they never share subjects.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .phantom import gen_dataset, spec_from_config
from .pretrain import PRETRAIN_KIND, PretrainResult
from .volumes import Dataset, MultiSeriesVolume, load_dataset, normalize_series

STREAM_POOL, STREAM_LABELED = 21, 22


def normalize_dataset(ds: Dataset) -> Dataset:
    examples = [replace(e, volume=normalize_series(e.volume)) for e in ds.examples]
    return Dataset(examples, dict(ds.splits), ds.label_kind)


def generate_pool(cfg: ExperimentConfig) -> Dataset:
    """Unlabeled pretraining pool (class labels are generated but never used)."""
    return gen_dataset(spec_from_config(cfg), cfg.data.n_pretrain, [cfg.seed, STREAM_POOL],
                       "class", prefix="pool")


def generate_labeled(cfg: ExperimentConfig) -> Dataset:
    return gen_dataset(spec_from_config(cfg), cfg.data.n_labeled, [cfg.seed, STREAM_LABELED],
                       cfg.data.label_kind, prefix="lab")


def pool_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data.pretrain_manifest:
        return load_dataset(_existing(cfg.data.pretrain_manifest, "data.pretrain_manifest"),
                            normalize=cfg.data.normalize)
    ds = generate_pool(cfg)
    return normalize_dataset(ds) if cfg.data.normalize else ds


def labeled_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.data.labeled_manifest:
        return load_dataset(_existing(cfg.data.labeled_manifest, "data.labeled_manifest"),
                            normalize=cfg.data.normalize)
    ds = generate_labeled(cfg)
    return normalize_dataset(ds) if cfg.data.normalize else ds


def pretrain_volumes(cfg: ExperimentConfig) -> list[MultiSeriesVolume]:
    """Training split of the pool; the val/test subjects are held out."""
    ds = pool_dataset(cfg)
    return ds.volumes("train") or ds.volumes()


def heldout_volumes(cfg: ExperimentConfig) -> list[MultiSeriesVolume]:
    ds = pool_dataset(cfg)
    return ds.volumes("val") + ds.volumes("test")


def as_checkpoint(result: PretrainResult, cfg: ExperimentConfig) -> Checkpoint:
    """In-memory checkpoint of a pretraining result (no file round trip)."""
    params = {k: v.data for k, v in result.params.items()}
    return Checkpoint(params, result.state, result.step, PRETRAIN_KIND,
                      cfg.model.model_dump(mode="json"))


def write_plans(path: str | Path, result: PretrainResult) -> Path:
    """One NDJSON line per (step, subject) mask plan of a run kept with ``keep_plans``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec, plans in zip(result.log.records, result.plans):
            for subject, plan in zip(rec["subjects"], plans):
                fh.write(json.dumps({"step": rec["step"], "subject": subject,
                                     "plan": plan.to_dict()}, sort_keys=True) + "\n")
    return path


def _existing(path: str, field: str) -> Path:
    from .errors import ConfigurationError

    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"{p} does not exist", field=field)
    return p
