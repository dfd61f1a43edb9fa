"""Command-line entry point: ``hydrafl``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .aggregation import Defense
from .attacks import AttackKind
from .errors import ConfigError, HydraError
from .harness import (
    PRESETS,
    ExperimentConfig,
    desk_config,
    dump_representations,
    load_config,
    load_datasets,
    preset,
    run_experiment,
    run_paired,
    run_sweep,
)
from .losses import LossKind

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
_CATEGORY_EXIT = {"config": EXIT_CONFIG, "numeric": EXIT_NUMERIC, "io": EXIT_IO}

ATTACKS = {"none": AttackKind.NONE, "statopt": AttackKind.STAT_OPT, "dynopt": AttackKind.DYN_OPT}
DEFENSES = {"mean": Defense.MEAN, "trmean": Defense.TRMEAN}
LOSSES = {k.value.lower().replace("_", "-"): k for k in LossKind}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hydrafl", description="Federated learning poisoning experiments.")
    p.add_argument("--config", type=Path, help="JSON experiment config; flags override its values")
    p.add_argument("--preset", choices=PRESETS, help="run a desk-scale sweep instead of one config")
    p.add_argument("--seed", type=int, help="seed for partition, init and training")
    p.add_argument("--seeds", help="comma-separated seed list; results are reported per seed and averaged")
    p.add_argument("--loss", choices=sorted(LOSSES), help="client loss kind")
    p.add_argument("--attack", choices=sorted(ATTACKS))
    p.add_argument("--defense", choices=sorted(DEFENSES))
    p.add_argument("--m", type=int, help="trimmed-mean count per side")
    p.add_argument("--alpha", type=float, help="Dirichlet concentration")
    p.add_argument("--beta", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--label", help="run label (file stem of the outputs)")
    p.add_argument("--paired", action="store_true",
                   help="also run the benign twin and report the accuracy drop")
    p.add_argument("--workers", type=int, default=1,
                   help="client threads per run, or processes per sweep")
    p.add_argument("--dump-representations", type=Path, metavar="CSV",
                   help="write final-model test-set representations to this file")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if args.seed is not None:
        config = config.with_seed(args.seed)
    loss = config.loss
    if args.loss is not None:
        loss = replace(loss, kind=LOSSES[args.loss])
    for name in ("beta", "mu", "gamma", "b"):
        value = getattr(args, name)
        if value is not None:
            loss = replace(loss, **{name: value})
    changes = {"loss": loss}
    if args.attack is not None:
        changes["attack"] = replace(config.attack, kind=ATTACKS[args.attack])
    if args.defense is not None or args.m is not None:
        d = config.defense
        changes["defense"] = replace(d, kind=DEFENSES[args.defense] if args.defense else d.kind,
                                     m=args.m if args.m is not None else d.m)
    if args.alpha is not None:
        changes["partition"] = replace(config.partition, alpha=args.alpha)
    if args.rounds is not None:
        changes["federation"] = replace(config.federation, rounds=args.rounds)
    if args.out is not None:
        changes["output_dir"] = args.out
    if args.label is not None:
        changes["run_label"] = args.label
    return replace(config, **changes)


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from exc


def _run(args: argparse.Namespace) -> int:
    if args.preset:
        configs = [apply_overrides(c, args) for c in preset(args.preset)]
        seeds = _seeds(args.seeds) if args.seeds else [configs[0].seed]
        results = run_sweep(configs, seeds, paired=True, processes=args.workers)
        out = Path(args.out or configs[0].output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.preset}-sweep.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
        for r in results:
            print(f"{r['run_label']}: benign {r['mean_benign_pct']:.2f}%  "
                  f"attacked {r['mean_attacked_pct']:.2f}%  drop {r['mean_drop_pct']:.2f} pts")
        return EXIT_OK if all(r["status"] == "ok" for r in results) else EXIT_NUMERIC

    config = load_config(args.config) if args.config else desk_config()
    config = apply_overrides(config, args)
    config.validate()
    if args.print_config:
        print(config.to_json())
        return EXIT_OK

    if args.seeds:
        results = run_sweep([config], _seeds(args.seeds), paired=args.paired, processes=args.workers)
        print(json.dumps(results[0], indent=2, sort_keys=True))
        return EXIT_OK if results[0]["status"] == "ok" else EXIT_NUMERIC

    if args.paired:
        summary = run_paired(config, args.workers)
        print(f"{summary['run_label']}: benign {summary['benign_pct']:.2f}%  "
              f"attacked {summary['attacked_pct']:.2f}%  drop {summary['drop_pct']:.2f} pts")
        return EXIT_OK if summary["status"] == "ok" else EXIT_NUMERIC

    result = run_experiment(config, args.workers)
    print(f"{config.run_label}: final accuracy {result.summary['final_accuracy_pct']:.2f}% "
          f"({result.csv_path})")
    if args.dump_representations:
        _, test = load_datasets(config.dataset)
        dump_representations(config.arch, result.final_params, test, args.dump_representations)
    if not result.ok:
        print(f"numeric abort: {result.summary['abort']['message']}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except HydraError as exc:
        print(f"error ({exc.category}): {exc}", file=sys.stderr)
        return _CATEGORY_EXIT.get(exc.category, EXIT_CONFIG)
    except ValueError as exc:
        print(f"error (config): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
