"""Command-line entry point.

Exit codes: 0 success, 2 stage failure, 3 configuration or usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import classify as classify_mod
from . import corpus as corpus_mod
from . import instrument as instrument_mod
from . import localize as localize_mod
from .fuzzer import Mode, replay, run_campaign
from .llm import PromptSet, make_client
from .pipeline import ConfigError, PipelineConfig, StageError, run_pipeline
from .report import funnel_from_artifacts, load_reports, triage, write_report
from .targets import TARGETS, get_target
from .taxonomy import build_context_pack, load_taxonomy

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 2, 3
log = logging.getLogger("reviewfuzz")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _write(path: Optional[str], text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _client(args):
    return make_client(args.client, fixtures_dir=args.recordings, model=args.model)


def _comments(path: str) -> dict:
    c = corpus_mod.ReviewCorpus.load(Path(path))
    return {(x.pr_id, x.id): x for x in c.comments}


# -- subcommands ------------------------------------------------------

def cmd_ingest(args) -> int:
    if args.fixture:
        corpus = corpus_mod.ingest_fixture(Path(args.fixture))
    else:
        if not (args.repo and args.prs):
            raise UsageError("ingest needs --fixture or both --repo and --prs")
        corpus = corpus_mod.ingest_github(args.repo, corpus_mod.parse_pr_range(args.prs), Path(args.recordings),
                                          replay=args.replay, parallelism=args.parallelism)
    _write(args.out, corpus.dumps())
    log.info("%d comments", len(corpus))
    return EXIT_OK


def cmd_taxonomy(args) -> int:
    tax = load_taxonomy(Path(args.data) if args.data else None)
    if args.category:
        ids = [int(x) for x in args.category.split(",")]
        text = build_context_pack(tax, ids).render()
    else:
        text = tax.render()
    _write(None, text if text.endswith("\n") else text + "\n")
    return EXIT_OK


def cmd_classify(args) -> int:
    corpus = corpus_mod.ReviewCorpus.load(Path(args.corpus))
    kw = {"prompts": PromptSet.load(Path(args.prompts))} if args.prompts else {}
    records = classify_mod.classify_corpus(corpus, load_taxonomy(), _client(args), args.parallelism, **kw)
    _write(args.out, classify_mod.dump_records(records, "classify"))
    return EXIT_OK


def cmd_localize(args) -> int:
    if not Path(args.repo_checkout).is_dir():
        raise FileNotFoundError(f"checkout not found: {args.repo_checkout}")
    records = classify_mod.load_records(Path(args.classified))
    out = localize_mod.localize_records(records, _comments(args.corpus), load_taxonomy(), _client(args),
                                        Path(args.repo_checkout), Path(args.diffs),
                                        use_cwe_hint=not args.no_cwe_hint)
    _write(args.out, localize_mod.dump_localized(out))
    return EXIT_OK


def cmd_instrument(args) -> int:
    located = classify_mod.load_records(Path(args.localized), localize_mod.LocalizationRecord)
    hints = {}
    if args.classified and not args.no_cwe_hint:
        tax = load_taxonomy()
        for rec in classify_mod.load_records(Path(args.classified)):
            h = localize_mod.CweHint.from_record(rec, tax)
            if h:
                hints[(rec.pr_id, rec.comment_id)] = h
    checkout = Path(args.repo_checkout)
    run = instrument_mod.instrument_localized(located, _comments(args.corpus), hints, _client(args), checkout)
    _write(args.out, instrument_mod.dump_outcomes(run.records))
    if args.apply:
        for path, text in sorted(run.annotated.items()):
            (checkout / path).write_text(text, encoding="utf-8")
    _write(args.diff_out, run.diff())
    return EXIT_OK


def _seeds(args, target) -> list:
    if not args.seeds:
        return list(target.seeds)
    files = sorted(p for p in Path(args.seeds).iterdir() if p.is_file())
    if not files:
        raise UsageError(f"no seed files in {args.seeds}")
    return [p.read_bytes() for p in files]


def cmd_fuzz(args) -> int:
    target = get_target(args.target)
    report = run_campaign(target, _seeds(args, target), args.budget_execs, args.rng_seed, Mode(args.mode),
                          stop_on_crash=args.stop_on_crash)
    _write(args.out, json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    log.info("%s/%s: %d execs, %d unique crashes, first at %s", args.target, args.mode, report.total_execs,
             len(report.crashes), report.first_crash_exec)
    return EXIT_OK


def cmd_triage(args) -> int:
    reports = load_reports([Path(p) for p in args.reports])
    merged = triage(reports)
    if args.replay:
        targets = {r.target for r in reports}
        for c in merged["crashes"]:
            hits = [replay(get_target(t), _crash(c)) for t in c["targets"] if t in targets]
            c["replay_stable"] = all(h == (c["type"], c["stack_hash"]) for h in hits)
    _write(args.out, json.dumps(merged, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _crash(d: dict):
    from .fuzzer import CrashRecord
    return CrashRecord.from_json(d)


def cmd_target_run(args) -> int:
    target = get_target(args.name)
    try:
        data = bytes.fromhex(args.input_hex)
    except ValueError:
        raise UsageError("--input-hex is not valid hex") from None
    result = target.execute(data, annotation_enabled=not args.no_annotations)
    out = {
        "target": target.name,
        "crash": None if result.crash is None else {"type": result.crash.kind.value, "stack": list(result.crash.stack)},
        "edges": len(result.edges),
        "events": [[e.site_id, e.kind.value, e.a, e.b] for e in result.events],
        "warnings": list(result.warnings),
    }
    _write(None, json.dumps(out, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = PipelineConfig.load(Path(args.config))
    overrides = {}
    if args.out_dir:
        overrides["out_dir"] = str(Path(args.out_dir).resolve())
    if args.no_cwe_hint:
        overrides["no_cwe_hint"] = True
    if args.apply:
        overrides["apply"] = True
    cfg = dataclasses.replace(cfg, **overrides)
    result = run_pipeline(cfg, resume=args.resume, stop_after=args.stop_after)
    log.info("ran %s; reused %s", ",".join(result.ran) or "-", ",".join(result.skipped) or "-")
    if args.report:
        _report(Path(cfg.out_dir), [Path(cfg.out_dir) / "campaigns"], Path(cfg.out_dir) / "report")
    return EXIT_OK


def _report(run_dir: Optional[Path], reports: Sequence[Path], out_dir: Path, figures: bool = True) -> dict:
    funnel = funnel_from_artifacts(run_dir) if run_dir else None
    return write_report(load_reports(reports), out_dir, funnel, figures)


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else None
    paths = [Path(p) for p in args.reports] or ([run_dir / "campaigns"] if run_dir else [])
    if not paths:
        raise UsageError("report needs --reports or --run-dir")
    summary = _report(run_dir, paths, Path(args.out_dir), not args.no_figures)
    log.info("unique crashes per mode: %s", summary["unique_crashes_per_mode"])
    return EXIT_OK


# -- parser -----------------------------------------------------------

def _add_client(p) -> None:
    p.add_argument("--client", choices=("mock", "live", "replay"), default="mock")
    p.add_argument("--model", default="gpt-4o-mini")
    p.add_argument("--recordings", default="recordings", help="directory of recorded HTTP exchanges")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reviewfuzz", description="Turn security review comments into fuzzing annotations.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="collect review comments into a corpus")
    p.add_argument("--repo")
    p.add_argument("--prs", help="e.g. 12-15,20")
    p.add_argument("--fixture", help="JSONL file or directory of fixture comments")
    p.add_argument("--recordings", default="recordings")
    p.add_argument("--replay", action="store_true", help="serve HTTP from recordings only")
    p.add_argument("--parallelism", type=int, default=4)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("taxonomy", help="inspect the bundled weakness taxonomy")
    tsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    show = tsub.add_parser("show")
    show.add_argument("--category", help="comma-separated category ids to render as a context pack")
    show.add_argument("--data", help="alternative taxonomy JSONL")
    show.set_defaults(func=cmd_taxonomy)

    p = sub.add_parser("classify", help="two-stage weakness classification")
    p.add_argument("--corpus", required=True)
    p.add_argument("--prompts", help="directory of prompt templates")
    p.add_argument("--out", default="-")
    p.add_argument("--parallelism", type=int, default=1)
    _add_client(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("localize", help="map security comments to changed functions")
    p.add_argument("--classified", "--stage12", dest="classified", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--repo-checkout", required=True)
    p.add_argument("--diffs", required=True, help="directory of <pr_id>.diff files")
    p.add_argument("--no-cwe-hint", action="store_true")
    p.add_argument("--out", default="-")
    _add_client(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("instrument", help="plan and inject guarded annotations")
    p.add_argument("--localized", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--classified", help="classification records, used for weakness hints")
    p.add_argument("--repo-checkout", required=True)
    p.add_argument("--no-cwe-hint", action="store_true")
    p.add_argument("--apply", action="store_true", help="write annotated files into the checkout")
    p.add_argument("--out", default="-")
    p.add_argument("--diff-out", default="injections.diff")
    _add_client(p)
    p.set_defaults(func=cmd_instrument)

    p = sub.add_parser("fuzz", help="run one campaign against a built-in target")
    p.add_argument("--target", required=True, choices=sorted(TARGETS))
    p.add_argument("--mode", choices=[m.value for m in Mode], default="annot")
    p.add_argument("--seeds", help="directory of seed files (default: the target's own seeds)")
    p.add_argument("--budget-execs", type=int, default=100_000)
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--stop-on-crash", action="store_true")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("triage", help="merge campaign reports and dedup crashes")
    p.add_argument("--reports", nargs="+", required=True, help="report files or directories")
    p.add_argument("--replay", action="store_true", help="re-execute each unique crash")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_triage)

    p = sub.add_parser("target", help="single-shot target execution")
    tsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    run = tsub.add_parser("run")
    run.add_argument("--name", required=True, choices=sorted(TARGETS))
    run.add_argument("--input-hex", required=True)
    run.add_argument("--no-annotations", action="store_true")
    run.set_defaults(func=cmd_target_run)

    p = sub.add_parser("pipeline", help="run every stage from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--resume", action="store_true", help="skip stages whose artifacts are complete")
    p.add_argument("--stop-after", choices=("ingest", "classify", "localize", "instrument", "fuzz", "triage"))
    p.add_argument("--no-cwe-hint", action="store_true")
    p.add_argument("--apply", action="store_true")
    p.add_argument("--report", action="store_true", help="also write the report under <out>/report")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="markdown, JSON summary and figures")
    p.add_argument("--reports", nargs="*", default=[])
    p.add_argument("--run-dir", help="pipeline output directory (adds the stage funnel)")
    p.add_argument("--out-dir", default="report")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    for name, p in sub.choices.items():
        if name != "pipeline":
            for leaf in _leaves(p):
                leaf.add_argument("--config", help="JSON file whose keys override flags")
    return parser


def _leaves(p):
    subs = [a for a in p._actions if isinstance(a, argparse._SubParsersAction)]
    if not subs:
        return [p]
    return [leaf for a in subs for c in a.choices.values() for leaf in _leaves(c)]


def _apply_config(args, parser) -> None:
    """``--config`` on non-pipeline commands supplies option values by name."""
    path = getattr(args, "config", None)
    if not path or args.command == "pipeline":
        return
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    for key, value in data.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest) or dest in ("func", "command", "config"):
            raise ConfigError(f"{path}: unknown option {key!r} for {args.command}")
        setattr(args, dest, value)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args, parser)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # any other stage failure
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
