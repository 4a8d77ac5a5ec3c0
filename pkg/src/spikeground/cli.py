"""Command-line entry point.

Subcommands: gen (synthetic datasets), train, eval, ablate (paired
component/timestep studies), bench (kernel scaling). Exit codes: 0
success, 2 usage or configuration problems, 3 numerical failures. The
environment variable SPIKEGROUND_THREADS caps numeric thread pools; it
must be respected before numpy loads, so heavyweight imports stay inside
the command handlers.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path


def _apply_thread_cap() -> None:
    cap = os.environ.get("SPIKEGROUND_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _load_json(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return json.loads(path.read_text())


def _resolve_datasets(data_path: Path, val_fraction: float):
    """A directory holds train/val files; a single file is tail-split."""
    from .synth import read_dataset

    if data_path.is_dir():
        train_file = None
        val_file = None
        for stem, target in (("train", "train"), ("val", "val")):
            for ext in (".jsonl", ".jsonl.gz"):
                p = data_path / f"{stem}{ext}"
                if p.exists():
                    if target == "train":
                        train_file = p
                    else:
                        val_file = p
                    break
        if train_file is None or val_file is None:
            raise FileNotFoundError(f"{data_path}: expected train.jsonl[.gz] and val.jsonl[.gz]")
        return read_dataset(train_file), read_dataset(val_file)
    samples = read_dataset(data_path)
    n_val = max(1, int(round(len(samples) * val_fraction))) if len(samples) > 1 else 0
    if n_val == 0:
        return samples, []
    return samples[:-n_val], samples[-n_val:]


def cmd_gen(args) -> int:
    from .synth import TaskSpec, generate, write_dataset

    spec_dict = _load_json(Path(args.spec)) if args.spec else {}
    task = TaskSpec.from_dict(spec_dict)
    seed = args.seed if args.seed is not None else task.seed
    samples = generate(task, args.n, seed=seed)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out} (seed {seed})")
    return 0


def _run_config(args) -> "RunConfig":
    from .training import RunConfig

    cfg_dict = _load_json(Path(args.config)) if getattr(args, "config", None) else {}
    if getattr(args, "seed", None) is not None:
        cfg_dict["seed"] = args.seed
    return RunConfig.from_dict(cfg_dict)


def cmd_train(args) -> int:
    from .training import train

    config = _run_config(args)
    train_s, val_s = _resolve_datasets(Path(args.data), config.val_fraction)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")

    def show(row):
        print(json.dumps(row))

    result = train(config, train_s, val_s, out_dir=out_dir, log_fn=show)
    print(f"best val r1@0.5: {result.best_val_r1:.4f} "
          f"({'early stop' if result.stopped_early else 'ran all epochs'})")
    return 0


def cmd_eval(args) -> int:
    from .metrics import (grounding_report, span_from_clips,
                          write_metrics_json, write_per_query_csv)
    from .synth import read_dataset

    samples = read_dataset(Path(args.data))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.oracle:
        gts = [[span_from_clips(m.b, m.e) for m in s.moments] for s in samples]
        preds = [[(lo, hi, 1.0) for lo, hi in g] for g in gts]
        qids = [s.sample_id for s in samples]
        report = grounding_report(preds, gts)
    else:
        if not args.checkpoint:
            raise FileNotFoundError("either --checkpoint or --oracle is required")
        from .checkpoint import load_checkpoint
        from .training import evaluate

        model = load_checkpoint(Path(args.checkpoint))
        report, qids, preds, gts = evaluate(model, samples)
    write_metrics_json(out_dir / "metrics.json", report)
    write_per_query_csv(out_dir / "per_query.csv", qids, preds, gts)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _ablate_variants(what: str, grid: list[int], base: dict) -> list[tuple[str, dict]]:
    if what == "ssd":
        return [("with_ssd", dict(base)), ("without_ssd", dict(base, use_attention=False))]
    if what == "slots":
        return [("with_slots", dict(base)), ("without_slots", dict(base, n_slots=0))]
    if what == "timesteps":
        return [(f"steps_{t}", dict(base, lif_steps=t)) for t in grid]
    raise AssertionError(what)


def cmd_ablate(args) -> int:
    from .synth import TaskSpec, generate
    from .training import RunConfig, evaluate, train

    base = _load_json(Path(args.config)) if args.config else {}
    base.setdefault("epochs", args.epochs)
    base.setdefault("max_seconds", args.max_seconds)
    grid = [int(x) for x in args.grid.split(",")] if args.grid else [2, 4, 8]
    seeds = [args.seed + k for k in range(args.seeds)]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for variant, cfg_dict in _ablate_variants(args.what, grid, base):
        for seed in seeds:
            cfg = RunConfig.from_dict(dict(cfg_dict, seed=seed))
            task = TaskSpec(archetypes=6, distractors=2, noise=0.3, seed=seed)
            # one stream, tail split: val shares the archetype bank but
            # none of the samples
            data = generate(task, args.n_train + args.n_val, seed=seed)
            train_s, val_s = data[: args.n_train], data[args.n_train :]
            result = train(cfg, train_s, val_s, out_dir=None)
            report, _, _, _ = evaluate(result.model, val_s, cfg.batch_size)
            row = {"variant": variant, "seed": seed, **{k: round(v, 6) for k, v in report.items()}}
            rows.append(row)
            print(json.dumps(row))

    table = out_dir / "ablation.csv"
    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {table}")
    return 0


def cmd_bench(args) -> int:
    from .bench import fitted_exponent, time_kernel

    sizes = [int(x) for x in args.sizes.split(",")]
    rows = time_kernel(args.kernel, sizes, repeats=args.repeats)
    for m, sec in rows:
        print(f"{args.kernel},{m},{sec:.6f}")
    expo = fitted_exponent(rows)
    print(f"fitted exponent: {expo:.3f}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "size", "seconds"])
            w.writerows([(args.kernel, m, f"{sec:.9f}") for m, sec in rows])
    if args.kernel == "scan" and expo >= 1.2:
        print(f"scan exponent {expo:.3f} exceeds the linear-scaling bound 1.2", file=sys.stderr)
        return 3
    if args.kernel == "conv" and expo < 1.7:
        print(f"conv exponent {expo:.3f} below the quadratic floor 1.7", file=sys.stderr)
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikeground",
                                description="Temporal grounding toolkit: data, training, eval, benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", help="task spec JSON file (defaults apply when omitted)")
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--out", required=True, help="output .jsonl or .jsonl.gz path")
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a grounding model")
    t.add_argument("--config", help="flat JSON config; flags override")
    t.add_argument("--data", required=True, help="dataset file or directory with train/val files")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", help="checkpoint.bin path")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--oracle", action="store_true",
                   help="score ground truth against itself (pipeline check)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="paired component or timestep studies")
    a.add_argument("--what", choices=("ssd", "slots", "timesteps"), required=True)
    a.add_argument("--grid", help="comma list of LIF steps for --what timesteps")
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="base flat JSON config")
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--epochs", type=int, default=8)
    a.add_argument("--max-seconds", dest="max_seconds", type=float, default=None)
    a.add_argument("--n-train", dest="n_train", type=int, default=256)
    a.add_argument("--n-val", dest="n_val", type=int, default=64)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="kernel micro-benchmarks")
    b.add_argument("--kernel", choices=("scan", "conv", "lif"), required=True)
    b.add_argument("--sizes", default="1000,2000,4000,8000")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out", help="optional CSV path")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import (ContractError, DimensionError, DomainError,
                         NumericalError, ParseError)

    try:
        return args.func(args)
    except (ContractError, DimensionError, DomainError, ParseError,
            FileNotFoundError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
