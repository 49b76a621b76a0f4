"""End-to-end orchestration: ingest, classify, localize, instrument, fuzz, triage.

Every stage reads the previous stage's artifact from the output directory
and writes its own atomically, so ``resume`` can restart from the first
stage whose artifact is missing or incomplete.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import classify, corpus as corpus_mod, instrument, localize
from .fuzzer import CampaignReport, Mode, run_campaign
from .llm import PromptSet, make_client
from .report import triage
from .targets import TARGETS, get_target
from .taxonomy import load_taxonomy

log = logging.getLogger(__name__)

STAGES = ("ingest", "classify", "localize", "instrument", "fuzz", "triage")
CLIENT_KINDS = ("mock", "live", "replay")
ARTIFACTS = {
    "ingest": "corpus.jsonl",
    "classify": "classified.jsonl",
    "localize": "localized.jsonl",
    "instrument": "sites.jsonl",
    "fuzz": "fuzz.jsonl",
    "triage": "triage.json",
}
_PATH_FIELDS = ("corpus", "checkout", "diffs", "out_dir", "prompts", "recordings", "taxonomy")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str, last_artifact: Optional[Path]) -> None:
        where = f"; last durable artifact: {last_artifact}" if last_artifact else "; no durable artifact yet"
        super().__init__(f"stage {stage!r} failed: {message}{where}")
        self.stage = stage
        self.last_artifact = last_artifact


@dataclass
class PipelineConfig:
    checkout: str
    diffs: str
    out_dir: str
    corpus: Optional[str] = None
    repo: Optional[str] = None
    prs: Optional[str] = None
    prompts: Optional[str] = None
    taxonomy: Optional[str] = None
    recordings: str = "recordings"
    client: str = "mock"
    model: str = "gpt-4o-mini"
    base_url: str = "https://api.openai.com/v1"
    parallelism: int = 1
    targets: list = field(default_factory=lambda: sorted(TARGETS))
    modes: list = field(default_factory=lambda: [m.value for m in Mode])
    budget_execs: int = 5000
    rng_seeds: list = field(default_factory=lambda: [0])
    no_cwe_hint: bool = False
    apply: bool = False
    compile_command: Optional[list] = None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_json(data).resolved(path.parent)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> None:
        if (self.corpus is None) == (self.repo is None):
            raise ConfigError("set exactly one of 'corpus' (fixture) or 'repo' (live ingestion)")
        if self.repo is not None and not self.prs:
            raise ConfigError("'repo' needs a 'prs' range")
        if self.client not in CLIENT_KINDS:
            raise ConfigError(f"client must be one of {CLIENT_KINDS}, got {self.client!r}")
        bad = [t for t in self.targets if t not in TARGETS]
        if bad:
            raise ConfigError(f"unknown targets: {bad}")
        bad = [m for m in self.modes if m not in {x.value for x in Mode}]
        if bad:
            raise ConfigError(f"unknown modes: {bad}")
        if self.budget_execs <= 0 or self.parallelism < 1 or not self.rng_seeds:
            raise ConfigError("budget_execs and parallelism must be positive and rng_seeds non-empty")

    def resolved(self, base: Path) -> "PipelineConfig":
        """Copy with every relative path made absolute against ``base``."""
        updates = {}
        for name in _PATH_FIELDS:
            value = getattr(self, name)
            if value is not None:
                updates[name] = str((Path(base) / value).resolve())
        return dataclasses.replace(self, **updates)


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def artifact_complete(path: Path) -> bool:
    """A JSONL artifact is complete when its header count matches its body."""
    if not path.exists():
        return False
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            json.loads(text)
            return True
        except json.JSONDecodeError:
            return False
    lines = text.splitlines()
    if not lines or not text.endswith("\n"):
        return False
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        return False
    return header.get("count") == len(lines) - 1


@dataclass
class PipelineResult:
    ran: list
    skipped: list
    artifacts: dict


class Pipeline:
    def __init__(self, config: PipelineConfig, client=None) -> None:
        config.validate()
        self.cfg = config
        self.out = Path(config.out_dir)
        self._client = client
        self._prompts = None
        self._taxonomy = None

    # lazily built so a resumed fuzz-only run never touches the model
    @property
    def client(self):
        if self._client is None:
            self._client = make_client(self.cfg.client, fixtures_dir=self.cfg.recordings, model=self.cfg.model,
                                       base_url=self.cfg.base_url)
        return self._client

    @property
    def prompts(self) -> PromptSet:
        if self._prompts is None:
            self._prompts = PromptSet.load(Path(self.cfg.prompts) if self.cfg.prompts else None)
        return self._prompts

    @property
    def taxonomy(self):
        if self._taxonomy is None:
            self._taxonomy = load_taxonomy(Path(self.cfg.taxonomy) if self.cfg.taxonomy else None)
        return self._taxonomy

    def artifact(self, stage: str) -> Path:
        return self.out / ARTIFACTS[stage]

    def _comments(self) -> dict:
        c = corpus_mod.ReviewCorpus.load(self.artifact("ingest"))
        return {(x.pr_id, x.id): x for x in c.comments}

    # -- stages ---------------------------------------------------------

    def ingest(self) -> None:
        cfg = self.cfg
        if cfg.corpus is not None:
            corpus = corpus_mod.ingest_fixture(Path(cfg.corpus))
        else:
            corpus = corpus_mod.ingest_github(cfg.repo, corpus_mod.parse_pr_range(cfg.prs), Path(cfg.recordings),
                                              replay=cfg.client == "replay", parallelism=cfg.parallelism)
        _write_atomic(self.artifact("ingest"), corpus.dumps())

    def classify(self) -> None:
        corpus = corpus_mod.ReviewCorpus.load(self.artifact("ingest"))
        records = classify.classify_corpus(corpus, self.taxonomy, self.client, self.cfg.parallelism,
                                           prompts=self.prompts)
        _write_atomic(self.artifact("classify"), classify.dump_records(records, "classify"))

    def localize(self) -> None:
        checkout, diffs = Path(self.cfg.checkout), Path(self.cfg.diffs)
        if not checkout.is_dir():
            raise FileNotFoundError(f"checkout not found: {checkout}")
        if not diffs.is_dir():
            raise FileNotFoundError(f"diff directory not found: {diffs}")
        records = classify.load_records(self.artifact("classify"))
        out = localize.localize_records(records, self._comments(), self.taxonomy, self.client, checkout, diffs,
                                        use_cwe_hint=not self.cfg.no_cwe_hint, prompts=self.prompts)
        _write_atomic(self.artifact("localize"), localize.dump_localized(out))

    def _hints(self) -> dict:
        if self.cfg.no_cwe_hint:
            return {}
        hints = {}
        for rec in classify.load_records(self.artifact("classify")):
            hint = localize.CweHint.from_record(rec, self.taxonomy)
            if hint is not None:
                hints[(rec.pr_id, rec.comment_id)] = hint
        return hints

    def instrument(self) -> None:
        checkout = Path(self.cfg.checkout)
        located = classify.load_records(self.artifact("localize"), localize.LocalizationRecord)
        hook = instrument.command_compile_hook(self.cfg.compile_command) if self.cfg.compile_command else None
        run = instrument.instrument_localized(located, self._comments(), self._hints(), self.client, checkout,
                                              self.prompts, hook)
        for path, text in sorted(run.annotated.items()):
            _write_atomic(self.out / "annotated" / path, text)
            if self.cfg.apply:
                _write_atomic(checkout / path, text)
        _write_atomic(self.out / "injections.diff", run.diff())
        _write_atomic(self.artifact("instrument"), instrument.dump_outcomes(run.records))

    def fuzz(self) -> None:
        campaigns = self.out / "campaigns"
        rows = []
        for name in self.cfg.targets:
            target = get_target(name)
            for mode in self.cfg.modes:
                for seed in self.cfg.rng_seeds:
                    fname = f"{name}-{mode}-{seed}.json"
                    report = run_campaign(target, target.seeds, self.cfg.budget_execs, seed, Mode(mode))
                    _write_atomic(campaigns / fname, json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
                    rows.append({"file": f"campaigns/{fname}", "target": name, "mode": mode, "rng_seed": seed,
                                 "first_crash_exec": report.first_crash_exec, "unique_crashes": len(report.crashes)})
        header = {"schema_version": 1, "stage": "fuzz", "count": len(rows)}
        text = "\n".join(json.dumps(r, sort_keys=True) for r in [header, *rows]) + "\n"
        _write_atomic(self.artifact("fuzz"), text)

    def campaign_reports(self) -> list:
        lines = self.artifact("fuzz").read_text(encoding="utf-8").splitlines()[1:]
        return [CampaignReport.from_json(json.loads((self.out / json.loads(l)["file"]).read_text(encoding="utf-8")))
                for l in lines if l.strip()]

    def triage(self) -> None:
        merged = triage(self.campaign_reports())
        _write_atomic(self.artifact("triage"), json.dumps(merged, indent=2, sort_keys=True) + "\n")

    # -- driver ---------------------------------------------------------

    def run(self, resume: bool = False, stop_after: Optional[str] = None,
            progress: Optional[Callable[[str], None]] = None) -> PipelineResult:
        self.out.mkdir(parents=True, exist_ok=True)
        _write_atomic(self.out / "config.json", self.cfg.dumps())
        start = 0
        if resume:
            while start < len(STAGES) and artifact_complete(self.artifact(STAGES[start])):
                start += 1
        ran, skipped = [], list(STAGES[:start])
        last = self.artifact(STAGES[start - 1]) if start else None
        for stage in STAGES[start:]:
            if progress:
                progress(stage)
            log.info("running stage %s", stage)
            try:
                getattr(self, stage)()
            except Exception as exc:
                raise StageError(stage, f"{type(exc).__name__}: {exc}", last) from exc
            ran.append(stage)
            last = self.artifact(stage)
            if stage == stop_after:
                break
        return PipelineResult(ran, skipped, {s: self.artifact(s) for s in STAGES if self.artifact(s).exists()})


def run_pipeline(config: PipelineConfig, resume: bool = False, client=None, **kw) -> PipelineResult:
    return Pipeline(config, client).run(resume=resume, **kw)
