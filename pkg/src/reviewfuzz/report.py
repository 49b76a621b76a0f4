"""Crash triage across campaigns and the summary report.

The markdown is rendered only from the JSON summary, so every number in it
can be recomputed from the artifacts.
"""

from __future__ import annotations

import itertools
import json
import statistics
from pathlib import Path
from typing import Optional, Sequence

from .fuzzer import CampaignReport, dedup

SCHEMA_VERSION = 1
FUNNEL = ("comments", "security_relevant", "localized", "annotated", "fuzzed")


def load_reports(paths: Sequence[Path]) -> list:
    out = []
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        for f in files:
            out.append(CampaignReport.from_json(json.loads(f.read_text(encoding="utf-8"))))
    return out


def triage(reports: Sequence[CampaignReport]) -> dict:
    """Merge campaign crashes into unique (type, stack hash) groups."""
    found_by: dict = {}
    for r in reports:
        for c in r.crashes:
            found_by.setdefault(c.key, set()).add((r.target, r.mode, r.rng_seed))
    unique = dedup(c for r in reports for c in r.crashes)
    return {
        "schema_version": SCHEMA_VERSION,
        "campaigns": len(reports),
        "unique_crashes": len(unique),
        "crashes": [
            dict(c.to_json(),
                 targets=sorted({t for t, _, _ in found_by[c.key]}),
                 modes=sorted({m for _, m, _ in found_by[c.key]}),
                 found_by=[list(x) for x in sorted(found_by[c.key])])
            for c in unique
        ],
    }


def overlap_table(keys_by_mode: dict) -> list:
    """Counts for every non-empty mode combination, Venn style.

    Each crash key is counted once, in the region of exactly the modes that found it.
    """
    modes = sorted(keys_by_mode)
    rows = []
    all_keys = set().union(*keys_by_mode.values()) if modes else set()
    for n in range(1, len(modes) + 1):
        for combo in itertools.combinations(modes, n):
            inside = set.intersection(*(keys_by_mode[m] for m in combo))
            outside = set().union(*(keys_by_mode[m] for m in modes if m not in combo))
            rows.append({"modes": list(combo), "count": len((inside - outside) & all_keys)})
    return rows


def _campaign_row(r: CampaignReport) -> dict:
    return {
        "target": r.target,
        "mode": r.mode,
        "rng_seed": r.rng_seed,
        "total_execs": r.total_execs,
        "first_crash_exec": r.first_crash_exec,
        "unique_crashes": len(dedup(r.crashes)),
        "corpus_size": r.corpus_size,
        "annot_slots_seen": r.annot_slots_seen,
    }


def summarize(reports: Sequence[CampaignReport], funnel: Optional[dict] = None) -> dict:
    keys_by_mode: dict = {}
    for r in reports:
        keys_by_mode.setdefault(r.mode, set()).update(c.key for c in r.crashes)
    per_target: dict = {}
    for r in reports:
        per_target.setdefault(r.target, {}).setdefault(r.mode, []).append(
            r.first_crash_exec if r.first_crash_exec is not None else r.budget_execs)
    medians = {
        t: {m: statistics.median(v) for m, v in sorted(by_mode.items())}
        for t, by_mode in sorted(per_target.items())
    }
    return {
        "schema_version": SCHEMA_VERSION,
        "unique_crashes_per_mode": {m: len(k) for m, k in sorted(keys_by_mode.items())},
        "unique_crashes_total": len(set().union(*keys_by_mode.values())) if keys_by_mode else 0,
        "overlap": overlap_table(keys_by_mode),
        "median_execs_to_crash": medians,
        "campaigns": [_campaign_row(r) for r in sorted(reports, key=lambda r: (r.target, r.mode, r.rng_seed))],
        "funnel": {k: int((funnel or {}).get(k, 0)) for k in FUNNEL},
    }


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> list:
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join("-" if v is None else str(v) for v in row) + " |" for row in rows]
    return out


def render_markdown(summary: dict, figures: Sequence[str] = ()) -> str:
    lines = ["# Campaign report", "", "## Unique crashes per mode", ""]
    lines += _table(("mode", "unique crashes"), sorted(summary["unique_crashes_per_mode"].items()))
    lines += ["", f"Total unique crashes: {summary['unique_crashes_total']}", "", "## Overlap", ""]
    lines += _table(("found by exactly", "count"), [(" + ".join(r["modes"]), r["count"]) for r in summary["overlap"]])
    lines += ["", "## Median execs to first crash", "", "Campaigns without a crash count as their full budget.", ""]
    rows = [(t, m, v) for t, by_mode in summary["median_execs_to_crash"].items() for m, v in by_mode.items()]
    lines += _table(("target", "mode", "median execs"), rows)
    lines += ["", "## Campaigns", ""]
    cols = ("target", "mode", "rng_seed", "total_execs", "first_crash_exec", "unique_crashes", "corpus_size",
            "annot_slots_seen")
    lines += _table(cols, [tuple(c[k] for k in cols) for c in summary["campaigns"]])
    lines += ["", "## Stage funnel", ""]
    lines += _table(("stage", "count"), [(k, summary["funnel"][k]) for k in FUNNEL])
    if figures:
        lines += ["", "## Figures", ""] + [f"![{Path(f).stem}]({f})" for f in figures]
    return "\n".join(lines) + "\n"


def _count_records(path: Path, pred) -> int:
    if not path.exists():
        return 0
    rows = [json.loads(l) for l in path.read_text(encoding="utf-8").splitlines()[1:] if l.strip()]
    return sum(1 for r in rows if pred(r))


def funnel_from_artifacts(out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    campaigns = out_dir / "campaigns"
    return {
        "comments": _count_records(out_dir / "corpus.jsonl", lambda r: True),
        "security_relevant": _count_records(out_dir / "classified.jsonl",
                                            lambda r: (r.get("stage2") or {}).get("security") == "yes"),
        "localized": _count_records(out_dir / "localized.jsonl",
                                    lambda r: bool(r.get("step2") and not r["step2"]["abstained"])),
        "annotated": _count_records(out_dir / "sites.jsonl", lambda r: bool(r.get("sites"))),
        "fuzzed": len(list(campaigns.glob("*.json"))) if campaigns.is_dir() else 0,
    }


def write_report(reports: Sequence[CampaignReport], out_dir: Path, funnel: Optional[dict] = None,
                 figures: bool = True) -> dict:
    """Write ``summary.json``, ``report.md`` and the PNG figures; returns the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(reports, funnel)
    names: list = []
    if figures:
        from .plotting import render_figures
        names = render_figures(summary, out_dir / "figures")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rel = [str(Path("figures") / n) for n in names]
    (out_dir / "report.md").write_text(render_markdown(summary, rel), encoding="utf-8")
    return summary
