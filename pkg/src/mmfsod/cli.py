"""Command-line entry point: ``mmfsod {train,eval,gradcheck,corpus,episode}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import Checkpoint
from .config import RunConfig, parse_overrides, read_config_file
from .corpus import default_corpus_path, validate_corpus_file
from .detection import write_detections_jsonl
from .episodes import sample_episode
from .gradcheck import SELECTORS, gradcheck
from .training import build_workspace, evaluate, train, write_metrics

ABLATION_FLAGS = {"no_language": "--no-language", "no_rectify": "--no-rectify",
                  "decoupled_attention": "--decoupled-attention"}


def _config_args(p: argparse.ArgumentParser, ablations: bool = True) -> None:
    p.add_argument("--config", help="JSON or key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    if ablations:
        for field, flag in ABLATION_FLAGS.items():
            p.add_argument(flag, dest=field, action="store_true")


def _config(args, base: dict | None = None) -> RunConfig:
    overrides = dict(base or {})
    if args.config:
        overrides.update(read_config_file(args.config))
    overrides.update(parse_overrides(args.set))
    for field in ABLATION_FLAGS:
        if getattr(args, field, False):
            overrides[field] = True
    return RunConfig.from_dict(overrides)


def _dump(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def cmd_train(args) -> int:
    config = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, records = train(config, log_path=out / "metrics.jsonl")
    ckpt.save(out / "checkpoint.bin")
    last = records[-1] if records else {}
    _dump({"checkpoint": str(out / "checkpoint.bin"), "metrics": str(out / "metrics.jsonl"),
           "steps": config.steps, "final": last})
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    config = _config(args, base=ckpt.config)
    report = evaluate(ckpt, config, keep_detections=bool(args.detections))
    if args.detections:
        write_detections_jsonl(report.pop("detections"), args.detections)
    _dump(report)
    return 0


def cmd_gradcheck(args) -> int:
    reports = [gradcheck(s, seed=args.seed, instances=args.instances) for s in args.selector]
    _dump(reports if len(reports) > 1 else reports[0])
    return 0 if all(r["passed"] for r in reports) else 1


def cmd_corpus_validate(args) -> int:
    report = validate_corpus_file(args.path or default_corpus_path())
    _dump(report)
    return 1 if report["errors"] else 0


def cmd_episode_sample(args) -> int:
    config = _config(args)
    ws = build_workspace(config)
    ep = sample_episode(ws.catalog, config.n, config.k, config.strategy, config.text_variant,
                        args.seed, ws.corpus, args.categories or ws.eval_categories,
                        config.query_size)
    _dump(ep.to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfsod", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="episodic training; writes checkpoint and metrics")
    _config_args(p)
    p.add_argument("--out", default="run", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out episodes")
    p.add_argument("checkpoint")
    _config_args(p, ablations=False)
    p.add_argument("--detections", help="write detections as JSON lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("selector", nargs="+", choices=sorted(SELECTORS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("corpus", help="rich-text corpus tools")
    corpus_sub = p.add_subparsers(dest="corpus_command", required=True)
    v = corpus_sub.add_parser("validate", help="schema check and token statistics")
    v.add_argument("path", nargs="?", help="corpus JSON (default: shipped corpus)")
    v.set_defaults(func=cmd_corpus_validate)

    p = sub.add_parser("episode", help="episode tools")
    ep_sub = p.add_subparsers(dest="episode_command", required=True)
    s = ep_sub.add_parser("sample", help="dump one episode as JSON")
    _config_args(s, ablations=False)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--categories", nargs="+", help="category pool (default: novel split)")
    s.set_defaults(func=cmd_episode_sample)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"mmfsod: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
