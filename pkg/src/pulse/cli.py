"""``pulse`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from typing import Sequence

from pulse import evaluation as E
from pulse import pipeline as P
from pulse.config import RunConfig, load_config, schema, validate
from pulse.errors import InvalidArgument, PulseError
from pulse.sft import SelectionMethod

log = logging.getLogger("pulse")

USAGE_EXIT = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--artifacts", help="override the artifacts directory")
    p.add_argument("--force", action="store_true", help="recompute stages even if artifacts exist")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pulse", description="Rationale-augmented sequential recommendation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "ingest": "load, 5-core filter, split and sample candidate slates",
        "synth": "generate the planted-trait synthetic corpus",
        "train-backbone": "train the sequential backbone",
        "gen-rationales": "generate positives, behavior texts and rationale trees",
        "train-ts": "contrastively train the rationale and behavior encoders",
        "select": "pick one rationale per user",
        "train-sft": "train the candidate scoring head",
        "eval": "evaluate HR@1 and write reports/report.{json,csv}",
        "ablate-a": "compare scoring spaces for leaf selection",
        "ablate-b": "compare rationale selection strategies",
        "cross-domain": "evaluate source models on a disjoint-item target domain",
        "project": "2-D projection of anchors, positives and negatives",
        "config-schema": "print every config key with its type and default",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        if name != "config-schema":
            _common(p)
        if name == "ingest":
            p.add_argument("--input", help="interactions JSONL (sets data.source to jsonl)")
        if name in ("select", "train-sft", "eval"):
            p.add_argument("--method", choices=[m.value for m in SelectionMethod],
                           help="override sft.method")
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.artifacts is not None:
        cfg = dataclasses.replace(cfg, artifacts_dir=args.artifacts)
    if getattr(args, "input", None):
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, source="jsonl", path=args.input))
    if getattr(args, "method", None):
        cfg = dataclasses.replace(cfg, sft=dataclasses.replace(cfg.sft, method=args.method))
    validate(cfg)
    return cfg


def _reports(reports: Sequence[E.MetricsReport]) -> dict:
    return {"reports": [{"method": r.method, "hr_at_1": r.hr_at_1, "n_users": r.n_users} for r in reports]}


def run(args) -> dict:
    if args.command == "config-schema":
        return {"keys": schema()}
    cfg = _resolve(args)
    log.info("command %s seed %d fingerprint %s", args.command, cfg.seed,
             P.Pipeline(cfg).report_fingerprint())
    pipe = P.Pipeline(cfg, force=args.force)
    cmd = args.command
    if cmd == "synth":
        pipe.synth()
        return {"raw_hash": pipe.store.outputs_hash("synth")}
    if cmd == "ingest":
        prep = pipe.ingest()
        return {"n_users": len(prep.users), "n_items": len(prep.catalog),
                "input_hash": pipe.store.outputs_hash("ingest")}
    if cmd == "train-backbone":
        pipe.train_backbone()
        return {"checkpoint_hash": pipe.store.outputs_hash("train-backbone")}
    if cmd == "gen-rationales":
        bundle = pipe.gen_rationales()
        return {"n_users": len(bundle.trees), "stats": bundle.stats}
    if cmd == "train-ts":
        ts = pipe.train_ts()
        return {"encoder_checksum": ts.checksum()}
    if cmd == "select":
        if cfg.sft.method == "none":
            raise InvalidArgument("method none selects no rationale")
        rows = pipe.select(cfg.sft.method)
        return {"method": cfg.sft.method, "n_users": len(rows)}
    if cmd == "train-sft":
        head = pipe.train_sft(cfg.sft.method)
        return {"method": cfg.sft.method, "head_checksum": head.checksum()}
    if cmd == "eval":
        report = P.run_experiment(cfg, force=args.force)
        return _reports([report])
    if cmd == "ablate-a":
        return _reports(P.run_ablation_a(cfg, force=args.force))
    if cmd == "ablate-b":
        return _reports(P.run_ablation_b(cfg, force=args.force))
    if cmd == "cross-domain":
        res = P.run_cross_domain(cfg, force=args.force)
        return {**_reports([res.pulse, res.backbone_only]), "optimizer_steps": res.steps_after}
    if cmd == "project":
        return {"projection": str(pipe.project())}
    raise InvalidArgument(f"unknown command {cmd}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = run(args)
    except PulseError as exc:
        print(f"pulse {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(out, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
