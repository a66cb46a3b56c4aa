"""Command-line entry point.

Subcommands: generate | train | finetune | evaluate | sweep | pmf | bench.
Every run writes a `manifest.json` beside its outputs holding the resolved
configuration, seeds, and library versions, so a directory can be reproduced
from its manifest alone. Exit codes: 0 success, 1 runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .brt import BRTEstimator, BRTHyperParams, init_params
from .errors import ConfigError
from .estimators import build_initializer
from .evaluation import (LSEstimator, bandwidth_variants, bench_inference,
                         generalization_sweep, hyper_sweep, near_field_pmf,
                         nmse_sweep, path_count_variants, rows_to_csv,
                         scatter_range_variants, wideband_surface)
from .measurement import generate_combiner
from .scenario import PRESETS, ScenarioConfig, load_scenario, save_scenario
from .tensor import load_checkpoint
from .training import (TrainConfig, fine_tune, generate_batch, rng_stream,
                       toy_hyper, toy_train_config, train)


def _add_scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="scenario config file (key = value lines)")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="built-in scenario preset (default: baseline)")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--depth", type=int, help="stacked cells per block (N_l)")
    p.add_argument("--hidden", type=int, help="token embedding width (N_h)")
    p.add_argument("--heads", type=int, help="attention heads")
    p.add_argument("--head-dim", type=int, help="per-head width")
    p.add_argument("--iters", type=int, help="refinement iterations (N_t)")
    p.add_argument("--state-tokens", type=int, help="recurrent state rows (N_s)")


def _resolve_scenario(args) -> ScenarioConfig:
    if getattr(args, "config", None):
        return load_scenario(args.config)
    name = getattr(args, "preset", None) or "baseline"
    return PRESETS[name]()


def _resolve_hyper(args, scenario: ScenarioConfig, toy: bool) -> BRTHyperParams:
    base = toy_hyper() if toy else BRTHyperParams()
    tokens = scenario.subcarriers if scenario.wideband else 1
    kwargs = {"tokens": tokens}
    for attr, flag in [("depth", "depth"), ("hidden", "hidden"),
                       ("heads", "heads"), ("head_dim", "head_dim"),
                       ("iters", "iters"), ("state_tokens", "state_tokens")]:
        val = getattr(args, flag, None)
        if val is not None:
            kwargs[attr] = val
    return replace(base, **kwargs)


def _resolve_train_cfg(args) -> TrainConfig:
    explicit = bool(getattr(args, "config", None) or getattr(args, "preset", None))
    if args.toy:
        cfg = toy_train_config(seed=args.seed)
        if explicit:
            cfg = replace(cfg, scenario=_resolve_scenario(args))
    else:
        cfg = TrainConfig(scenario=_resolve_scenario(args), seed=args.seed)
    overrides = {}
    for attr in ("epochs", "samples_per_epoch", "val_samples", "batch_size",
                 "learning_rate", "weight_decay", "workers"):
        val = getattr(args, attr, None)
        if val is not None:
            overrides[attr] = val
    return replace(cfg, **overrides) if overrides else cfg


def _write_manifest(out_dir: Path, command: str, args, scenario, extra=None) -> None:
    manifest = {
        "command": command,
        "options": {k: v for k, v in sorted(vars(args).items())
                    if k != "func" and v is not None},
        "scenario": scenario.to_dict() if scenario is not None else None,
        "scenario_hash": scenario.hash_hex() if scenario is not None else None,
        "versions": {"hfce": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    from .datasets import write_dataset
    scenario = _resolve_scenario(args)
    out = _out_dir(args)
    op, _ = _combiner_for(scenario, args.seed)
    rng = rng_stream(args.seed, 0, 0, 0)
    snr = (scenario.snr_db_min, scenario.snr_db_max)
    if args.snr_db is not None:
        snr = (args.snr_db, args.snr_db)
    ys, hs, snrs = generate_batch(scenario, op, args.num, rng, snr)
    path = out / "dataset.bin"
    write_dataset(path, scenario, ys, hs, combiner_seed=args.seed,
                  snr_policy={"min_db": snr[0], "max_db": snr[1],
                              "per_sample": "uniform"})
    save_scenario(scenario, out / "scenario.cfg")
    _write_manifest(out, "generate", args, scenario,
                    {"records": int(args.num), "dataset": path.name})
    print(f"wrote {args.num} records to {path}")
    return 0


def _combiner_for(scenario: ScenarioConfig, seed: int):
    rng = rng_stream(seed, 2)
    op = generate_combiner(scenario.array, scenario.n_pilots, rng, seed=seed)
    return op, build_initializer(op)


def cmd_train(args) -> int:
    cfg = _resolve_train_cfg(args)
    scenario = cfg.scenario
    hyper = _resolve_hyper(args, scenario, toy=args.toy)
    out = _out_dir(args)
    store = init_params(hyper, rng_stream(cfg.seed, 3))
    result = train(store, hyper, cfg, checkpoint_path=out / "model.ckpt")
    (out / "training_log.csv").write_text(result.log_csv())
    save_scenario(scenario, out / "scenario.cfg")
    _write_manifest(out, "train", args, scenario,
                    {"hyper": hyper.to_dict(),
                     "final_val_nmse_db": result.log[-1][2],
                     "ls_val_nmse_db": result.val_ls_nmse_db})
    print(f"final val NMSE {result.log[-1][2]:.2f} dB "
          f"(LS initializer {result.val_ls_nmse_db:.2f} dB)")
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve_train_cfg(args)
    scenario = cfg.scenario
    out = _out_dir(args)
    result = fine_tune(args.checkpoint, cfg, out_checkpoint_path=out / "model.ckpt")
    (out / "training_log.csv").write_text(result.log_csv())
    save_scenario(scenario, out / "scenario.cfg")
    _write_manifest(out, "finetune", args, scenario,
                    {"from_checkpoint": str(args.checkpoint),
                     "final_val_nmse_db": result.log[-1][2]})
    print(f"final val NMSE {result.log[-1][2]:.2f} dB")
    return 0


def _estimator_from(args, scenario: ScenarioConfig):
    """Checkpointed model if --model was given, else the LS initializer.

    The combiner is regenerated from the training seed recorded in the
    checkpoint (it is a fixed draw per run), so the model sees the operator
    it was trained against.
    """
    if args.model:
        store, hyper_dict, meta = load_checkpoint(args.model)
        hyper = BRTHyperParams.from_dict(hyper_dict)
        seed = int(meta.get("train_seed", args.seed))
        op, init = _combiner_for(scenario, seed)
        return BRTEstimator(store=store, hyper=hyper, init=init), op
    op, init = _combiner_for(scenario, args.seed)
    return LSEstimator(init=init), op


def cmd_evaluate(args) -> int:
    scenario = _resolve_scenario(args)
    out = _out_dir(args)
    estimator, op = _estimator_from(args, scenario)
    grid = [float(s) for s in args.snr.split(",")]
    rows = nmse_sweep(estimator, scenario, op, grid, n_samples=args.samples,
                      seed=args.seed)
    (out / "nmse.csv").write_text(rows_to_csv(rows))
    if scenario.wideband:
        surf = wideband_surface(estimator, scenario, op, grid,
                                n_samples=min(args.samples, 500), seed=args.seed)
        surf_rows = [{"subcarrier": ki, "snr_db": snr,
                      "nmse_db": float(surf["surface_db"][ki, j])}
                     for ki in range(scenario.subcarriers)
                     for j, snr in enumerate(grid)]
        (out / "surface.csv").write_text(rows_to_csv(surf_rows))
    _write_manifest(out, "evaluate", args, scenario, {"points": len(rows)})
    for r in rows:
        print(f"snr {r['snr_db']:6.1f} dB  nmse {r['nmse_db']:8.3f} dB "
              f"(+-{r['stderr_db']:.3f})")
    return 0


def cmd_sweep(args) -> int:
    scenario = _resolve_scenario(args)
    out = _out_dir(args)
    seed = args.seed
    if args.axis == "snr":
        estimator, op = _estimator_from(args, scenario)
        grid = [float(s) for s in args.snr.split(",")]
        rows = nmse_sweep(estimator, scenario, op, grid, n_samples=args.samples,
                          seed=seed)
        (out / "sweep_snr.csv").write_text(rows_to_csv(rows))
    elif args.axis in ("distance", "paths", "bandwidth"):
        estimator, op = _estimator_from(args, scenario)
        if args.axis == "distance":
            ranges = [(10, 25), (10, 35), (10, 45), (15, 25), (20, 30)]
            variants = scatter_range_variants(scenario, ranges)
        elif args.axis == "paths":
            variants = path_count_variants(scenario, [2, 3, 4, 5, 6, 7])
        else:
            if not scenario.wideband:
                raise ConfigError("bandwidth sweep needs a wideband scenario")
            variants = bandwidth_variants(scenario,
                                          [5e9, 10e9, 15e9, 20e9, 25e9])
        rows = generalization_sweep(estimator, scenario, variants, op,
                                    snr_db=args.snr_point,
                                    n_samples=args.samples, seed=seed)
        (out / f"sweep_{args.axis}.csv").write_text(rows_to_csv(rows))
    elif args.axis in ("iters", "heads", "depth"):
        cfg = _resolve_train_cfg(args)
        hyper = _resolve_hyper(args, cfg.scenario, toy=args.toy)
        values = [int(v) for v in args.values.split(",")]
        res = hyper_sweep(args.axis, values, cfg, hyper,
                          snr_db=args.snr_point, n_samples=args.samples,
                          seed=seed)
        (out / f"sweep_{args.axis}.csv").write_text(rows_to_csv(res["rows"]))
        if res["trace"]:
            (out / "iteration_trace.csv").write_text(rows_to_csv(res["trace"]))
    else:
        raise ConfigError(f"unknown sweep axis {args.axis}")
    _write_manifest(out, "sweep", args, scenario, {"axis": args.axis})
    print(f"sweep '{args.axis}' written to {out}")
    return 0


def cmd_pmf(args) -> int:
    scenario = _resolve_scenario(args)
    pmf = near_field_pmf(scenario)
    rows = [{"near_field_paths": k, "probability": float(p),
             "exact": f"{p.numerator}/{p.denominator}"}
            for k, p in enumerate(pmf)]
    text = rows_to_csv(rows)
    if args.out:
        out = _out_dir(args)
        (out / "pmf.csv").write_text(text)
        _write_manifest(out, "pmf", args, scenario, None)
    print(text, end="")
    return 0


def cmd_bench(args) -> int:
    out = _out_dir(args)
    batches = [int(b) for b in args.batches.split(",")]
    subcarriers = [int(k) for k in args.subcarriers.split(",")]
    estimators = {}
    for k in subcarriers:
        scenario = _resolve_scenario(args)
        if k > 1:
            scenario = replace(scenario, subcarriers=k,
                               bandwidth_hz=scenario.bandwidth_hz or 15e9)
        hyper = _resolve_hyper(args, scenario, toy=args.toy)
        op, init = _combiner_for(scenario, args.seed)
        store = init_params(hyper, rng_stream(args.seed, 3))
        estimators[k] = BRTEstimator(store=store, hyper=hyper, init=init)
    rows = bench_inference(estimators, batches, repeats=args.repeats,
                           seed=args.seed)
    (out / "bench.csv").write_text(rows_to_csv(rows))
    _write_manifest(out, "bench", args, None, {"rows": len(rows)})
    print(rows_to_csv(rows), end="")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hfce",
        description="Hybrid-field THz UM-MIMO channel simulation and "
                    "block-recurrent-transformer estimation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a (y, h) dataset")
    _add_scenario_args(p)
    p.add_argument("--num", type=int, default=1000, help="record count")
    p.add_argument("--snr-db", type=float, help="fixed SNR instead of the scenario range")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train an estimator with online data generation")
    _add_scenario_args(p)
    _add_model_args(p)
    p.add_argument("--toy", action="store_true",
                   help="desk-scale preset (small scenario, minutes on CPU)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--samples-per-epoch", dest="samples_per_epoch", type=int)
    p.add_argument("--val-samples", dest="val_samples", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--workers", type=int, help="producer threads (0 = inline)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training a checkpoint on a new scenario")
    _add_scenario_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--toy", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--samples-per-epoch", dest="samples_per_epoch", type=int)
    p.add_argument("--val-samples", dest="val_samples", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="NMSE of a model (or the LS initializer) on fresh samples")
    _add_scenario_args(p)
    p.add_argument("--model", help="checkpoint; omit to evaluate the LS initializer")
    p.add_argument("--snr", default="0,5,10,15,20", help="comma-separated dB grid")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="benchmark sweeps")
    _add_scenario_args(p)
    _add_model_args(p)
    p.add_argument("--axis", required=True,
                   choices=["snr", "distance", "paths", "bandwidth",
                            "iters", "heads", "depth"])
    p.add_argument("--model", help="checkpoint for evaluation axes")
    p.add_argument("--values", default="1,2,3,4,5",
                   help="training-axis values (iters/heads/depth)")
    p.add_argument("--snr", default="0,5,10,15,20")
    p.add_argument("--snr-point", dest="snr_point", type=float, default=15.0,
                   help="fixed SNR for generalization/training axes")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--toy", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--samples-per-epoch", dest="samples_per_epoch", type=int)
    p.add_argument("--val-samples", dest="val_samples", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pmf", help="closed-form PMF of the near-field path count")
    _add_scenario_args(p)
    p.add_argument("--out", help="optional output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pmf)

    p = sub.add_parser("bench", help="inference timing table (float32)")
    _add_scenario_args(p)
    _add_model_args(p)
    p.add_argument("--toy", action="store_true")
    p.add_argument("--batches", default="1,2,4,8")
    p.add_argument("--subcarriers", default="1")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
