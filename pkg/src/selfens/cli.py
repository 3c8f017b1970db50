from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from selfens.config import ConfigError, load_config
from selfens.datagen import LoadError
from selfens.report import ReportError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfens", description="Self-ensemble label filtering")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", type=Path)
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--out", type=Path, default=Path("runs/latest"))
    r.add_argument("--checkpoint", type=Path, help="resumable checkpoint directory")
    r.add_argument("--print-config", action="store_true",
                   help="print the resolved config and exit")

    a = sub.add_parser("ablate", help="run several variants on shared seeds")
    a.add_argument("--config", type=Path)
    a.add_argument("--variants", required=True)
    a.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--seeds", default="0,1,2", help="seed offsets added to the config seeds")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out", type=Path, default=Path("runs/ablation"))

    s = sub.add_parser("report", help="summarize a run directory")
    s.add_argument("--in", dest="in_dir", type=Path, required=True)
    s.add_argument("--json", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, LoadError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(args) -> int:
    from selfens.experiment import ablation_csv, run_ablation_suite, run_experiment
    from selfens.report import describe, emit_report, load_summary

    if args.cmd == "run":
        cfg = load_config(args.config, args.override)
        if args.print_config:
            print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
            return EXIT_OK
        rep = run_experiment(cfg, checkpoint_dir=args.checkpoint)
        emit_report(rep, args.out)
        if rep.status != "ok":
            print(f"numerical abort: {rep.error} (partial report in {args.out})", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"{cfg.variant}: test acc {rep.final_test_acc:.4f}  "
              f"precision {rep.final_precision:.4f}  -> {args.out}")
        return EXIT_OK

    if args.cmd == "ablate":
        cfg = load_config(args.config, args.override)
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        try:
            offsets = [int(s) for s in args.seeds.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--seeds: {exc}") from exc
        rows = run_ablation_suite(cfg, variants, offsets, out_dir=args.out, jobs=args.jobs)
        text = ablation_csv(rows)
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "ablation.csv").write_text(text, encoding="utf-8")
        print(text, end="")
        return EXIT_NUMERIC if any(r["status"] == "numerical_abort" for r in rows) else EXIT_OK

    data = load_summary(args.in_dir)
    print(json.dumps(data, indent=1, sort_keys=True) if args.json else describe(data))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
