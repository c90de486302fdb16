"""Command line entry point.

    natimm <pretrain|sft|mpo|prm|bon|eval> --config PATH [--seed N] [--delta auto|sample|1|1/2|...|1/256]
           [--steps N] [--out DIR] [--ckpt PATH] [--set key=value ...] [--force]
    natimm gen --out DIR [--seed N]
    natimm vocab --out PATH

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure,
4 capacity error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import STAGES, RunConfig
from .errors import NatimmError
from .positions import format_deltas

log = logging.getLogger("natimm")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="natimm", description="Desk-scale native multimodal training stack.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--delta", help=f"visual position increment: auto, sample, or one of {format_deltas()}")
        p.add_argument("--steps", type=int)
        p.add_argument("--out", type=Path, help="output directory for checkpoints, metrics and reports")
        p.add_argument("--ckpt", type=Path, help="input checkpoint (resumes when it is from the same stage)")
        p.add_argument("--critic", type=Path, help="critic checkpoint for bon")
        p.add_argument("--oracle", action="store_true", help="bon: score steps with the arithmetic evaluator")
        p.add_argument("--force", action="store_true", help="ignore stage-order checks on the input checkpoint")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config field, e.g. --set mpo.beta=0.2")
    g = sub.add_parser("gen", help="write a synthetic corpus bundle and per-stage configs")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, default=0)
    v = sub.add_parser("vocab", help="write the default vocabulary")
    v.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        cfg = RunConfig.load(args.config)
        cfg = _rebase(cfg, args.config.parent)
    else:
        cfg = RunConfig()
    overrides = [f"stage={args.command}", *args.overrides]
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.delta is not None:
        overrides.append(f"delta={args.delta!s}")
    if args.steps is not None:
        overrides.append(f"steps={args.steps}")
    if args.out is not None:
        overrides.append(f"paths.out_dir={args.out}")
    if args.ckpt is not None:
        overrides.append(f"paths.ckpt_in={args.ckpt}")
    if args.critic is not None:
        overrides.append(f"paths.critic={args.critic}")
    if args.oracle:
        overrides.append("bon.oracle=true")
    if args.force:
        overrides.append("force=true")
    # delta values such as 1/4 must stay strings
    quoted = [f'{o.split("=", 1)[0]}="{o.split("=", 1)[1]}"' if o.startswith("delta=") else o for o in overrides]
    return cfg.override(quoted)


def _rebase(cfg: RunConfig, base: Path) -> RunConfig:
    """Relative file paths in a config file are relative to that file."""
    raw = cfg.to_dict()
    for section in ("data", "paths"):
        for key, value in raw[section].items():
            if isinstance(value, str) and value and not Path(value).is_absolute():
                raw[section][key] = str(base / value)
    return RunConfig.from_dict(raw)


def run(args: argparse.Namespace) -> dict:
    if args.command == "gen":
        from .corpora import write_bundle

        files = write_bundle(args.out, args.seed)
        return {"written": [str(f) for f in files]}
    if args.command == "vocab":
        from .vocab import Vocab

        Vocab.default().save(args.out)
        return {"written": [str(args.out)]}
    from . import trainer

    cfg = resolve_config(args)
    out = trainer.RUNNERS[cfg.stage](cfg)
    if isinstance(out, trainer.RunResult):
        summary = dict(out.summary)
        summary["checkpoint"] = str(out.path) if out.path else None
        return summary
    out.pop("records", None)
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except NatimmError as exc:
        print(f"natimm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("natimm: interrupted", file=sys.stderr)
        return 130
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
