"""Command line entry point: ``csmlab <subcommand> [options]``.

Exit codes: 0 success, 2 usage or configuration errors (argparse errors
included), 1 runtime failures. Errors go to stderr as one JSON object.
Every command writes a run directory holding ``config.resolved`` and its
outputs; without ``--run-dir`` it is ``runs/<command>-<hash>-seed<seed>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, load_config, save_resolved
from .errors import AblationArmError, ConfigurationError, CSMError, UsageError

RESOLVED = "config.resolved"


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csmlab",
                                 description="Cross-series masking pretraining on phantoms.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML or JSON experiment config "
                       "(eval falls back to RUN_DIR/config.resolved)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--run-dir", type=Path, help="output directory")
        return p

    add("gen-data", "write the phantom pool and labeled set as volume files")
    p = add("pretrain", "masked-reconstruction pretraining")
    p.add_argument("--resume", type=Path, help="continue from a pretraining checkpoint")
    p.add_argument("--dump-plans", action="store_true", help="write every mask plan")
    p = add("finetune", "fine-tune an encoder plus task head")
    p.add_argument("--checkpoint", type=Path, help="pretrained checkpoint (default: scratch)")
    p = add("eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, help="checkpoint (default: the run dir's own)")
    p = add("ablate", "run the masking ablation grid")
    p.add_argument("--dump-plans", action="store_true", help="write every mask plan")
    p = add("gradcheck", "finite-difference check of the full objective in f64")
    p.add_argument("--eps", type=float, default=1e-5)
    return ap


def _resolve_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.command == "eval" and args.run_dir and (args.run_dir / RESOLVED).exists():
        cfg = load_config(args.run_dir / RESOLVED)
    else:
        raise ConfigurationError("a config file is required", field="--config")
    if args.seed is not None:
        cfg = cfg.with_updates(seed=args.seed)
    return cfg


def _run_dir(args, cfg: ExperimentConfig) -> Path:
    d = args.run_dir or Path("runs") / f"{args.command}-{config_hash(cfg)[:12]}-seed{cfg.seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False),
                    encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    from .experiment import generate_labeled, generate_pool
    from .volumes import save_dataset

    pool = save_dataset(generate_pool(cfg), run_dir / "pool")
    labeled = save_dataset(generate_labeled(cfg), run_dir / "labeled")
    resolved = cfg.with_updates(data={"pretrain_manifest": str(pool.resolve()),
                                      "labeled_manifest": str(labeled.resolve())})
    save_resolved(resolved, run_dir / RESOLVED)
    out = {"pool_manifest": str(pool), "labeled_manifest": str(labeled),
           "n_pretrain": cfg.data.n_pretrain, "n_labeled": cfg.data.n_labeled,
           "config_hash": config_hash(resolved)}
    _write_json(run_dir / "metrics.json", out)
    return out


def cmd_pretrain(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    from .experiment import heldout_volumes, pretrain_volumes, write_plans
    from .plotting import plot_loss_curve
    from .pretrain import deterministic_scope, evaluate_reconstruction, pretrain

    save_resolved(cfg, run_dir / RESOLVED)
    res = pretrain(cfg, pretrain_volumes(cfg), run_dir=run_dir, resume=args.resume,
                   keep_plans=args.dump_plans)
    if args.dump_plans:
        write_plans(run_dir / "maskplans" / "plans.ndjson", res)
    held = heldout_volumes(cfg)
    out = {"config_hash": config_hash(cfg), "seed": cfg.seed, "steps": res.step,
           "final_loss": res.log.losses[-1] if res.log.losses else None,
           "checkpoint": str(res.checkpoint)}
    if held:
        with deterministic_scope(cfg.deterministic):
            out["heldout"] = evaluate_reconstruction(res.params, cfg.model, held, cfg.mask)
    _write_json(run_dir / "metrics.json", out)
    if res.log.losses:
        plot_loss_curve(res.log.losses, run_dir / "loss.png", "pretraining loss",
                        [r["lr"] for r in res.log.records])
    return out


def cmd_finetune(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    from .experiment import labeled_dataset
    from .finetune import finetune
    from .plotting import plot_loss_curve

    save_resolved(cfg, run_dir / RESOLVED)
    res = finetune(cfg, labeled_dataset(cfg), checkpoint=args.checkpoint, run_dir=run_dir)
    if res.losses:
        plot_loss_curve(res.losses, run_dir / "loss.png", f"{cfg.finetune.task} loss")
    return res.report


def _default_checkpoint(run_dir: Path) -> Path:
    for name in ("finetuned.ckpt", "final.ckpt"):
        if (run_dir / "checkpoints" / name).exists():
            return run_dir / "checkpoints" / name
    raise UsageError(f"no --checkpoint given and none found under {run_dir / 'checkpoints'}")


def cmd_eval(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    from .checkpoint import load_checkpoint, strict_names
    from .config import ModelConfig
    from .experiment import heldout_volumes, labeled_dataset
    from .finetune import evaluate_checkpoint
    from .model import init_params
    from .pretrain import PRETRAIN_KIND, deterministic_scope, evaluate_reconstruction

    path = args.checkpoint or _default_checkpoint(run_dir)
    ckpt = load_checkpoint(path)
    if ckpt.kind == PRETRAIN_KIND:
        model_cfg = ModelConfig.model_validate(ckpt.model)
        strict_names(ckpt, init_params(model_cfg, np.random.default_rng(0)))
        held = heldout_volumes(cfg)
        if not held:
            raise ConfigurationError("the pool has no held-out subjects", field="data.n_pretrain")
        params = ckpt.tensors(dtype=np.float64 if model_cfg.precision == "f64" else np.float32)
        with deterministic_scope(cfg.deterministic):
            recon = evaluate_reconstruction(params, model_cfg, held, cfg.mask)
        out = {"kind": ckpt.kind, "heldout": recon}
    else:
        out = {"kind": ckpt.kind, **evaluate_checkpoint(cfg, labeled_dataset(cfg), ckpt)}
    out["checkpoint"] = str(path)
    _write_json(run_dir / "eval.json", out)
    return out


def cmd_ablate(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    from .ablation import run_ablation

    save_resolved(cfg, run_dir / RESOLVED)
    report = run_ablation(cfg, run_dir, dump_plans=args.dump_plans or None,
                          log=lambda msg: print(msg, file=sys.stderr, flush=True))
    return {"table": report.to_text(), **report.to_dict()}


def cmd_gradcheck(cfg: ExperimentConfig, run_dir: Path, args) -> dict:
    from .masking import sample_mask_plan
    from .model import forward_loss, init_params
    from .numerics import grad_check
    from .volumes import MultiSeriesVolume, patchify

    save_resolved(cfg, run_dir / RESOLVED)
    model_cfg = cfg.model.model_copy(update={"precision": "f64", "dropout": 0.0})
    rng = np.random.default_rng([cfg.seed, 99])
    s = cfg.data.series_count
    vol = MultiSeriesVolume(rng.normal(size=(s, *cfg.data.extents)), (True,) * s)
    grid = patchify(vol, model_cfg.patch_edge)
    params = init_params(model_cfg, rng)
    results = {}
    for name, p_inter in (("intra", 0.0), ("inter", 1.0)):
        if p_inter and s < 2:
            continue
        mc = cfg.mask.model_copy(update={"inter_prob": p_inter})
        plan = sample_mask_plan(s, grid.n_tokens, mc, rng)
        report = grad_check(lambda p, plan=plan, mc=mc: forward_loss(grid, plan, p, model_cfg, mc),
                            params, eps=args.eps)
        results[name] = {"max_rel_err": report.max_rel_err, "worst_param": report.worst_param,
                         "n_coords": report.n_coords}
    worst = max(r["max_rel_err"] for r in results.values())
    out = {"max_rel_err": worst, "passed": worst < 1e-4, "plans": results}
    _write_json(run_dir / "metrics.json", out)
    return out


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def _fail(exc: BaseException, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    field = getattr(exc, "field", None)
    if isinstance(exc, AblationArmError):
        doc["arm"] = exc.arm
        field = getattr(exc.cause, "field", None)
    if field:
        doc["field"] = field
    print(json.dumps(doc), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)  # exits 2 on unknown commands or flags
    try:
        cfg = _resolve_config(args)
        run_dir = _run_dir(args, cfg)
        out = COMMANDS[args.command](cfg, run_dir, args)
    except (ConfigurationError, UsageError) as exc:
        return _fail(exc, 2)
    except AblationArmError as exc:
        return _fail(exc, 2 if isinstance(exc.cause, (ConfigurationError, UsageError)) else 1)
    except (CSMError, OSError, FloatingPointError) as exc:
        return _fail(exc, 1)
    if args.command == "ablate":
        print(out["table"], end="")
    else:
        print(json.dumps(out, indent=2, sort_keys=True))
    if args.command == "gradcheck" and not out["passed"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
