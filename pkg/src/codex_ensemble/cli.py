"""Command-line entry point: ``codex-ensemble <stage> --config <file>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .config import default_config_text, load_config
from .errors import CodexError
from .pipeline import STAGES, TRAIN_PARTS, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="codex-ensemble",
        description="Multi-modal ICD10 category prediction: synthetic data, training, evaluation, triage.",
    )
    p.add_argument("stage", choices=STAGES + ("print-config",))
    p.add_argument("--config", help="pipeline config (YAML)")
    p.add_argument("--only", action="append", metavar="PART",
                   help=f"train only these parts; comma-separated, from {', '.join(TRAIN_PARTS)} "
                        "or a single modality name")
    p.add_argument("--subsets", action="append", metavar="A,B,C",
                   help="evaluate: one ablation subset per flag, modalities comma-separated")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _split_csv(values: Optional[Sequence[str]]) -> Optional[list[str]]:
    if not values:
        return None
    return [item.strip() for v in values for item in v.split(",") if item.strip()]


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.stage == "print-config":
        sys.stdout.write(default_config_text())
        return 0
    if not args.config:
        print("error: UsageError: --config is required", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        subsets = [s.split(",") for s in args.subsets] if args.subsets else None
        if subsets:
            subsets = [[m.strip() for m in s if m.strip()] for s in subsets]
        summary = run(args.stage, cfg, only=_split_csv(args.only), subsets=subsets)
    except CodexError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"stage": args.stage, **_brief(summary)}, sort_keys=True))
    return 0


def _brief(summary: dict) -> dict:
    """Keep stdout to one line: drop bulky nested tables."""
    return {k: v for k, v in summary.items() if k not in ("rows", "ablation", "models", "ingest")} | (
        {"ensemble_micro_f1": round(summary["models"]["ensemble"]["micro_f1"], 6)} if "models" in summary else {})


if __name__ == "__main__":
    sys.exit(main())
