"""Six-arm masking ablation: pretrain each variant, fine-tune, tabulate.

Every arm sees the same phantom pool and labeled set, and seed ``i`` of every
arm uses ``cfg.seed + i`` for all of its random streams, so arms differ only
along the masking (or missing-series) axis. Pretraining runs are cached by
the hash of the settings that affect them; the incomplete-series arm reuses
the full arm's checkpoints because it differs only at fine-tuning time.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, from_dict, save_resolved
from .errors import AblationArmError
from .experiment import as_checkpoint, labeled_dataset, pretrain_volumes, write_plans
from .finetune import finetune
from .pretrain import pretrain

YES, PARTIAL, NO = "✓", "○", "×"


@dataclass(frozen=True)
class Arm:
    id: str
    ratio: str
    random_patch: str
    series_mask: str
    complete: str
    updates: dict = field(default_factory=dict)


def _arms(missing_fraction: float) -> dict[str, Arm]:
    return {a.id: a for a in (
        Arm("full", "87.5%", YES, YES, YES),
        Arm("no-series-recon", "87.5%", YES, PARTIAL, YES,
            {"mask": {"reconstruct_masked_series": False}}),
        Arm("no-series-mask", "87.5%", YES, NO, YES, {"mask": {"series_mask_enabled": False}}),
        Arm("same-position", "87.5%", NO, YES, YES, {"mask": {"same_position": True}}),
        Arm("incomplete-series", "87.5%", YES, YES, NO,
            {"finetune": {"missing": {"fraction": missing_fraction}}}),
        Arm("ratio-50", "50%", YES, YES, YES, {"mask": {"intra_ratio": 0.5}}),
    )}


def arm_config(cfg: ExperimentConfig, arm: Arm, seed_offset: int = 0) -> ExperimentConfig:
    doc = cfg.model_dump(mode="json")
    for section, values in arm.updates.items():
        for key, value in values.items():
            if isinstance(value, dict):
                doc[section][key] = {**doc[section][key], **value}
            else:
                doc[section][key] = value
    doc["seed"] = cfg.seed + seed_offset
    return from_dict(doc)


def pretrain_key(cfg: ExperimentConfig) -> str:
    """Hash of only the settings that change a pretraining run."""
    doc = {k: cfg.model_dump(mode="json")[k]
           for k in ("seed", "deterministic", "data", "model", "mask", "pretrain")}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class AblationReport:
    metric: str
    rows: list[dict]
    seeds: list[int]
    config_hash: str
    wall_s: float = 0.0

    def to_dict(self) -> dict:
        return {"metric": self.metric, "seeds": self.seeds, "config_hash": self.config_hash,
                "wall_s": self.wall_s, "rows": self.rows}

    def to_text(self) -> str:
        head = ["arm", "mask-ratio", "random patch-mask", "series-mask", "complete-series",
                f"test {self.metric} (median ± std)", "pretrain loss"]
        body = []
        for r in self.rows:
            cell = "n/a" if r["median"] is None else f"{r['median']:.3f} ± {r['std']:.3f}"
            body.append([r["arm"], r["ratio"], r["random_patch"], r["series_mask"],
                         r["complete"], cell, _fmt(r.get("pretrain_loss"))])
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip()
                 for row in [head, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["arm", "ratio", "random_patch", "series_mask", "complete", "median", "std",
                    *(f"seed_{s}" for s in self.seeds)])
        for r in self.rows:
            w.writerow([r["arm"], r["ratio"], r["random_patch"], r["series_mask"], r["complete"],
                        r["median"], r["std"], *r["values"]])
        return buf.getvalue()


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.3f}"


def _summary(values: list) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.median(vals)), float(np.std(vals))


def run_ablation(cfg: ExperimentConfig, run_dir: str | Path | None = None,
                 dump_plans: bool | None = None, pool=None, labeled=None,
                 log=None) -> AblationReport:
    """Run every configured arm for ``cfg.ablation.seeds`` seeds.

    The reported metric is test AUC for classification and test Dice for
    segmentation. ``pool`` / ``labeled`` override the data built from ``cfg``.
    """
    t_start = time.perf_counter()
    ac = cfg.ablation
    dump_plans = ac.dump_plans if dump_plans is None else dump_plans
    arms = _arms(ac.missing_fraction)
    pool = pretrain_volumes(cfg) if pool is None else pool
    labeled = labeled_dataset(cfg) if labeled is None else labeled
    metric = "auc" if cfg.finetune.task == "classification" else "dice"
    root = Path(run_dir) if run_dir is not None else None
    cache: dict[str, tuple[object, float | None]] = {}
    rows = []
    for arm_id in ac.arms:
        arm = arms[arm_id]
        values, recon = [], []
        try:
            for i in range(ac.seeds):
                scfg = arm_config(cfg, arm, i)
                sdir = root / "arms" / arm_id / f"seed-{i}" if root is not None else None
                key = pretrain_key(scfg)
                if key not in cache:
                    pdir = sdir / "pretrain" if sdir is not None else None
                    if pdir is not None:
                        pdir.mkdir(parents=True, exist_ok=True)
                        save_resolved(scfg, pdir / "config.resolved")
                    res = pretrain(scfg, pool, run_dir=pdir, keep_plans=dump_plans)
                    if dump_plans and pdir is not None:
                        write_plans(pdir / "maskplans" / "plans.ndjson", res)
                    ckpt = res.checkpoint or as_checkpoint(res, scfg)
                    tail = res.log.losses[-max(1, len(res.log.losses) // 10):]
                    cache[key] = (ckpt, float(np.mean(tail)))
                ckpt, tail_loss = cache[key]
                fdir = sdir / "finetune" if sdir is not None else None
                if fdir is not None:
                    fdir.mkdir(parents=True, exist_ok=True)
                    save_resolved(scfg, fdir / "config.resolved")
                ft = finetune(scfg, labeled, checkpoint=ckpt, run_dir=fdir)
                values.append(ft.report["splits"]["test"].get(metric))
                recon.append(tail_loss)
                if log is not None:
                    log(f"{arm_id} seed {scfg.seed}: test {metric} = {_fmt(values[-1])}")
        except Exception as exc:
            raise AblationArmError(arm_id, exc) from exc
        med, std = _summary(values)
        rows.append({"arm": arm_id, "ratio": arm.ratio, "random_patch": arm.random_patch,
                     "series_mask": arm.series_mask, "complete": arm.complete,
                     "median": med, "std": std, "values": values,
                     "pretrain_loss": float(np.median(recon))})
    report = AblationReport(metric, rows, [cfg.seed + i for i in range(ac.seeds)],
                            config_hash(cfg), time.perf_counter() - t_start)
    if root is not None:
        write_report(report, root)
    return report


def write_report(report: AblationReport, root: str | Path) -> dict[str, Path]:
    from .plotting import plot_ablation

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = {"text": root / "ablation.txt", "json": root / "metrics.json",
           "csv": root / "ablation.csv", "png": root / "ablation.png"}
    out["text"].write_text(report.to_text(), encoding="utf-8")
    out["json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True,
                                      ensure_ascii=False), encoding="utf-8")
    out["csv"].write_text(report.to_csv(), encoding="utf-8")
    plot_ablation(report.rows, out["png"], report.metric)
    return out

