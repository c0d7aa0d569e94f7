"""``mupdit`` command-line entry point.

Exit codes: 0 success or verdict pass, 1 verdict fail, 2 configuration
error, 3 runtime error. Diverged trials are data, not failures.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .arch import build_graph, save_snapshot
from .config import ExperimentConfig
from .coordcheck import run_coordcheck, verdict, verdict_json
from .diffusion import Trainer, train_trainer
from .errors import ConfigError
from .mup import cost_ratio, cost_ratio_phases, make_plan
from .report import emit_report
from .tp import build_dit_program, equivalence_check
from .transfer import (
    DTYPES,
    TargetSpec,
    TrialLog,
    default_workers,
    mu_transfer,
    random_search,
    scheduled_count,
    sweep_axis,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
TP_TOLERANCE = 1e-9


def _config(args, required: bool = True) -> ExperimentConfig:
    if args.config is None:
        if required:
            raise ConfigError("--config is required for this command")
        cfg = ExperimentConfig.from_dict({})
    else:
        cfg = ExperimentConfig.load(args.config)
    # command-line flags override the document
    run = cfg.doc.setdefault("run", {})
    if args.seed is not None:
        run["seeds"] = [args.seed]
        if "search" in cfg.doc:
            cfg.doc["search"]["seed"] = args.seed
    if args.precision is not None:
        run["precision"] = args.precision
    if args.workers is not None:
        run["workers"] = args.workers
    return cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out) if args.out else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers(cfg: ExperimentConfig) -> int:
    w = cfg.run["workers"]
    return default_workers() if w is None else int(w)


def _log_path(out: Path, args) -> Path:
    path = out / "trials.jsonl"
    if path.exists() and path.stat().st_size and not args.resume:
        raise ConfigError(f"{path} already holds trials; pass --resume to continue it or pick another --out")
    return path


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    spec, base, run = cfg.model_spec(), cfg.base_hps(), cfg.run
    plan = make_plan(build_graph(spec), spec.widths, base, cfg.scheme)
    seed = run["seeds"][0]
    trainer = Trainer(spec, plan, seed, run["batch"], hps=base, task=cfg.task_spec(), dtype=DTYPES[cfg.dtype_name])
    with np.errstate(all="ignore"):
        res = train_trainer(trainer, run["steps"], cfg.hash)
    rec = {
        "config_hash": cfg.hash,
        "seed": seed,
        "final_loss": res.final_loss if math.isfinite(res.final_loss) else None,
        "diverged": res.diverged,
        "steps_completed": len(res.trace),
    }
    (out / "train.json").write_text(json.dumps({**rec, "trace": res.trace}, sort_keys=True) + "\n")
    (out / "plan.json").write_text(plan.to_json() + "\n")
    save_snapshot(trainer.params, out / "weights")
    _say(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def cmd_coordcheck(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    c = cfg.section("coordcheck")
    base = cfg.base_hps()
    if "eta" in c:
        base = base.replace(eta=c["eta"])
    widths = [int(w) for w in c.get("widths", [32, 64, 128])]
    seeds = c.get("seeds", list(cfg.run["seeds"]))
    report = run_coordcheck(
        cfg.model_spec(),
        widths,
        steps=c.get("steps", 10),
        base=base,
        scheme=cfg.scheme,
        seeds=tuple(seeds),
        batch_size=c.get("batch", 32),
        task=cfg.task_spec(),
        dtype=DTYPES[cfg.dtype_name],
    )
    v = verdict(report, C=c.get("C", 4.0))
    (out / "coordcheck.csv").write_text(report.to_csv())
    (out / "coordcheck_verdict.json").write_text(verdict_json(v) + "\n")
    bad = sorted(k for k, layer in v["layers"].items() if not layer["pass"])
    _say(f"coordcheck {cfg.scheme.value}: {'pass' if v['pass'] else 'fail'} ({len(bad)} of {len(v['layers'])} layers over C)")
    return EXIT_OK if v["pass"] else EXIT_FAIL


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    grid = cfg.grid_spec()
    log_path = _log_path(out, args)
    _say(f"trials to run: {scheduled_count(grid, cfg.scheme, log_path)}")
    v = sweep_axis(grid, cfg.scheme, log_path, _workers(cfg))
    (out / "verdict.json").write_text(v.to_json() + "\n")
    emit_report(log_path, out / "report", tolerance=grid.tolerance)
    _say(v.to_json())
    return EXIT_OK if v.passed else EXIT_FAIL


def cmd_search(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    spec = cfg.search_spec()
    log_path = _log_path(out, args)
    res = random_search(spec, cfg.section("search").get("seed", 0), log_path, _workers(cfg), cfg.scheme)
    doc = {"selected": res.selected, "trials": res.trials}
    (out / "search.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")
    _say(json.dumps({"selected": res.selected}, sort_keys=True))
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    t = cfg.section("transfer")
    run = cfg.run
    target = TargetSpec(t.get("target_n", 128), t.get("target_batch", run["batch"]), t.get("target_steps", run["steps"]))
    source = t.get("source", "sweep")
    if source not in ("sweep", "search"):
        raise ConfigError("transfer.source must be 'sweep' or 'search'")
    proxy = cfg.grid_spec() if source == "sweep" else cfg.search_spec()
    seed = cfg.section("search").get("seed", run["seeds"][0]) if source == "search" else run["seeds"][0]
    res = mu_transfer(proxy, target, cfg.scheme, seed, _log_path(out, args), _workers(cfg))
    doc = {
        "selected": res.selected,
        "target_n": target.n,
        "proxy_trials": res.proxy_trials,
        "cost_ratio": res.cost,
        "target_final_loss": None if res.result is None or res.result.diverged else res.result.final_loss,
        "target_diverged": None if res.result is None else res.result.diverged,
    }
    (out / "transfer.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    (out / "target_plan.json").write_text(res.plan.to_json() + "\n")
    _say(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_tp_verify(args) -> int:
    worst = equivalence_check(build_dit_program())
    _say(f"max |diff| = {worst:.3e}")
    return EXIT_OK if worst < TP_TOLERANCE else EXIT_FAIL


def cmd_cost(args) -> int:
    cfg = _config(args)
    inputs = cfg.cost_inputs()
    r = cost_ratio_phases(*inputs) if isinstance(inputs, tuple) else cost_ratio(inputs)
    _say(f"cost ratio {r:.3g} ({100 * r:.3g}% of one target run; exact {r!r})")
    return EXIT_OK


def cmd_report(args) -> int:
    log = Path(args.log) if args.log else None
    if log is None:
        cfg = _config(args, required=False)
        log = (Path(args.out) if args.out else cfg.out_dir) / "trials.jsonl"
    out = Path(args.out) / "report" if args.out else log.parent / "report"
    bundle = emit_report(TrialLog(log) if log.exists() else log, out)
    for stem, v in sorted(bundle.verdicts.items()):
        _say(f"{stem}: {'pass' if v['pass'] else 'fail'} argmin={v['argmin_indices']}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "coordcheck": cmd_coordcheck,
    "sweep": cmd_sweep,
    "search": cmd_search,
    "transfer": cmd_transfer,
    "tp-verify": cmd_tp_verify,
    "cost": cmd_cost,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--out", help="output directory (overrides [output].dir)")
    common.add_argument("--seed", type=int, help="single seed overriding run.seeds")
    common.add_argument("--workers", type=int, help="worker processes (default: MUPDIT_WORKERS or 1)")
    common.add_argument("--precision", type=int, choices=(32, 64), help="float width for training")
    common.add_argument("--resume", action="store_true", help="continue an existing trial log")
    parser = argparse.ArgumentParser(prog="mupdit", description="muP hyperparameter transfer for toy diffusion Transformers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "report":
            p.add_argument("--log", help="trial log to summarise (default <out>/trials.jsonl)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        raise
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
