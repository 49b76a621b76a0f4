"""Coverage-guided greybox loop with a separate annotation feedback channel.

The same loop runs in two modes.  ``annot`` feeds annotation events into the
dedicated map and biases scheduling toward annotation-novel seeds;
``baseline`` suppresses annotation events at the harness boundary so the
campaign is plain edge-coverage fuzzing.
"""

from __future__ import annotations

import enum
import logging
import random
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .runtime import CampaignMaps, FeedbackState, fnv1a64, novelty
from .targets import Crash, CrashKind, TargetSpec

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_INPUT_LEN = 4096
BASE_ENERGY = 16
ANNOT_ENERGY_FACTOR = 2
STACK_DEPTH = 3

INTERESTING_8 = (0, 1, 0xFF, 127, 128, 255)
INTERESTING_16 = (0, 1, 0xFFFF, 127, 128, 255, (1 << 15) - 1, (1 << 15) + 1)
INTERESTING_32 = INTERESTING_16 + ((1 << 31) - 1, (1 << 31) + 1, 0xFFFFFFFF)
ARITH_MAX = 35


class Mode(str, enum.Enum):
    ANNOT = "annot"
    BASELINE = "baseline"


class Found(str, enum.Enum):
    INITIAL = "initial"
    MUTATION = "mutation"


class NoveltySource(str, enum.Enum):
    EDGE = "edge"
    ANNOTATION = "annotation"
    BOTH = "both"


@dataclass
class Seed:
    input: bytes
    exec_us: int = 1
    found_by: Found = Found.INITIAL
    parent: Optional[int] = None
    novelty_source: NoveltySource = NoveltySource.EDGE
    id: int = 0


def stack_hash(stack: Sequence[str], depth: int = STACK_DEPTH) -> str:
    return f"{fnv1a64('|'.join(stack[:depth]).encode()):016x}"


@dataclass(frozen=True)
class CrashRecord:
    input: bytes
    kind: CrashKind
    stack_hash: str
    first_seen: int
    stack: tuple = ()

    @property
    def key(self) -> tuple:
        return (self.kind.value, self.stack_hash)

    def to_json(self) -> dict:
        return {
            "type": self.kind.value,
            "stack_hash": self.stack_hash,
            "stack": list(self.stack),
            "first_seen": self.first_seen,
            "input_hex": self.input.hex(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CrashRecord":
        return cls(
            input=bytes.fromhex(d["input_hex"]),
            kind=CrashKind(d["type"]),
            stack_hash=d["stack_hash"],
            first_seen=int(d["first_seen"]),
            stack=tuple(d.get("stack", ())),
        )

    @classmethod
    def from_crash(cls, data: bytes, crash: Crash, exec_no: int) -> "CrashRecord":
        return cls(data, crash.kind, stack_hash(crash.stack), exec_no, tuple(crash.stack))


def dedup(crashes: Iterable[CrashRecord]) -> list:
    """Group by (type, stack hash), keep the earliest of each group."""
    best: dict = {}
    for c in crashes:
        cur = best.get(c.key)
        if cur is None or (c.first_seen, c.input) < (cur.first_seen, cur.input):
            best[c.key] = c
    return sorted(best.values(), key=lambda c: (c.first_seen, c.key))


# --------------------------------------------------------------------------
# mutation


def _op_bitflip(buf: bytearray, rng: random.Random, corpus) -> None:
    buf[rng.randrange(len(buf))] ^= 1 << rng.randrange(8)


def _op_byte_set(buf, rng, corpus):
    buf[rng.randrange(len(buf))] = rng.randrange(256)


def _op_random_byte(buf, rng, corpus):
    # Inserts one random byte; the only op that grows an empty buffer.
    if len(buf) < MAX_INPUT_LEN:
        buf.insert(rng.randrange(len(buf) + 1), rng.randrange(256))


def _word(buf, rng):
    width = rng.choice((1, 2, 4))
    if len(buf) < width:
        width = 1
    return width, rng.randrange(len(buf) - width + 1), rng.choice(("little", "big"))


def _op_arith(buf, rng, corpus):
    width, pos, order = _word(buf, rng)
    val = int.from_bytes(buf[pos : pos + width], order)
    delta = rng.randint(1, ARITH_MAX) * rng.choice((1, -1))
    val = (val + delta) % (1 << (8 * width))
    buf[pos : pos + width] = val.to_bytes(width, order)


def _op_interesting(buf, rng, corpus):
    width, pos, order = _word(buf, rng)
    table = {1: INTERESTING_8, 2: INTERESTING_16, 4: INTERESTING_32}[width]
    val = rng.choice(table) % (1 << (8 * width))
    buf[pos : pos + width] = val.to_bytes(width, order)


def _chunk_len(rng, limit):
    # Favor short chunks, occasionally long ones.
    cap = rng.choice((4, 16, 64, limit))
    return rng.randint(1, max(1, min(cap, limit)))


def _op_delete(buf, rng, corpus):
    if len(buf) < 2:
        return
    n = _chunk_len(rng, len(buf) - 1)
    pos = rng.randrange(len(buf) - n + 1)
    del buf[pos : pos + n]


def _op_duplicate(buf, rng, corpus):
    room = MAX_INPUT_LEN - len(buf)
    if room <= 0:
        return
    n = _chunk_len(rng, min(len(buf), room))
    src = rng.randrange(len(buf) - n + 1)
    dst = rng.randrange(len(buf) + 1)
    buf[dst:dst] = buf[src : src + n]


def _op_splice(buf, rng, corpus):
    if not corpus or len(corpus) < 2:
        return
    other = corpus[rng.randrange(len(corpus))].input
    if not other:
        return
    cut_a = rng.randrange(len(buf) + 1)
    cut_b = rng.randrange(len(other))
    buf[cut_a:] = other[cut_b:]
    del buf[MAX_INPUT_LEN:]


OPS = (
    _op_bitflip,
    _op_byte_set,
    _op_random_byte,
    _op_arith,
    _op_delete,
    _op_duplicate,
    _op_splice,
    _op_interesting,
)


def splice(a: bytes, b: bytes, cut_a: int, cut_b: int) -> bytes:
    return (a[:cut_a] + b[cut_b:])[:MAX_INPUT_LEN]


def mutate(data: bytes, rng: random.Random, corpus: Optional[Sequence[Seed]] = None) -> bytes:
    """Apply a havoc stack of 1..64 byte-level operations."""
    buf = bytearray(data[:MAX_INPUT_LEN])
    if not buf:
        buf.append(rng.randrange(256))
    stack = 1 << rng.randrange(7)
    randrange = rng.randrange
    for _ in range(stack):
        OPS[randrange(8)](buf, rng, corpus)
        if not buf:
            buf.append(randrange(256))
    return bytes(buf)


# --------------------------------------------------------------------------
# scheduling


class Scheduler:
    """Round-robin over the corpus with a fixed energy per visit."""

    def __init__(self, annotation_aware: bool) -> None:
        self.annotation_aware = annotation_aware
        self.cursor = 0

    def energy(self, seed: Seed) -> int:
        if self.annotation_aware and seed.novelty_source is not NoveltySource.EDGE:
            return BASE_ENERGY * ANNOT_ENERGY_FACTOR
        return BASE_ENERGY

    def next(self, corpus: Sequence[Seed]) -> tuple:
        if not corpus:
            raise ValueError("empty corpus")
        seed = corpus[self.cursor % len(corpus)]
        self.cursor = (self.cursor + 1) % len(corpus)
        return seed, self.energy(seed)


def schedule(corpus: Sequence[Seed], scheduler: Scheduler) -> tuple:
    return scheduler.next(corpus)


# --------------------------------------------------------------------------
# campaign


class HarnessError(RuntimeError):
    pass


@dataclass
class CampaignReport:
    target: str
    mode: str
    rng_seed: int
    budget_execs: int
    total_execs: int
    corpus_size: int
    crashes: list
    annot_novel_seeds: int = 0
    edges_seen: int = 0
    annot_slots_seen: int = 0
    stopped_on_crash: bool = False
    schema_version: int = SCHEMA_VERSION
    corpus: list = field(default_factory=list)

    @property
    def first_crash_exec(self) -> Optional[int]:
        return min((c.first_seen for c in self.crashes), default=None)

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "target": self.target,
            "mode": self.mode,
            "rng_seed": self.rng_seed,
            "budget_execs": self.budget_execs,
            "total_execs": self.total_execs,
            "corpus_size": self.corpus_size,
            "annot_novel_seeds": self.annot_novel_seeds,
            "edges_seen": self.edges_seen,
            "annot_slots_seen": self.annot_slots_seen,
            "stopped_on_crash": self.stopped_on_crash,
            "first_crash_exec": self.first_crash_exec,
            "crashes": [c.to_json() for c in self.crashes],
        }

    @classmethod
    def from_json(cls, d: dict) -> "CampaignReport":
        return cls(
            target=d["target"],
            mode=d["mode"],
            rng_seed=d["rng_seed"],
            budget_execs=d["budget_execs"],
            total_execs=d["total_execs"],
            corpus_size=d["corpus_size"],
            crashes=[CrashRecord.from_json(c) for c in d["crashes"]],
            annot_novel_seeds=d.get("annot_novel_seeds", 0),
            edges_seen=d.get("edges_seen", 0),
            annot_slots_seen=d.get("annot_slots_seen", 0),
            stopped_on_crash=d.get("stopped_on_crash", False),
            schema_version=d.get("schema_version", SCHEMA_VERSION),
        )


class Campaign:
    def __init__(self, target: TargetSpec, mode: Mode, rng_seed: int) -> None:
        self.target = target
        self.mode = Mode(mode)
        self.annotate = self.mode is Mode.ANNOT
        self.rng = random.Random(rng_seed)
        self.rng_seed = rng_seed
        self.state = FeedbackState()
        self.maps = CampaignMaps()
        self.corpus: list = []
        self.crashes: dict = {}
        self.execs = 0
        self.scheduler = Scheduler(self.annotate)

    def _execute(self, data: bytes):
        self.execs += 1
        try:
            result = self.target.execute(data, self.annotate)
        except Exception as exc:  # noqa: BLE001 - anything but a declared crash is fatal
            raise HarnessError(
                f"target {self.target.name} raised {exc!r} on input {data[:64].hex()}"
            ) from exc
        if result.crash is not None:
            rec = CrashRecord.from_crash(data, result.crash, self.execs)
            if rec.key not in self.crashes:
                self.crashes[rec.key] = rec
            return None
        st = self.state
        st.reset()
        st.add_edges(result.edges)
        if self.annotate:
            for e in result.events:
                st.apply_event(e)
        return novelty(st, self.maps)

    def _add(self, data: bytes, found_by: Found, parent: Optional[int], nov: tuple) -> None:
        edge, annot = nov
        if edge and annot:
            source = NoveltySource.BOTH
        elif annot:
            source = NoveltySource.ANNOTATION
        else:
            source = NoveltySource.EDGE
        self.corpus.append(Seed(data, 1, found_by, parent, source, len(self.corpus)))

    def run(self, seeds: Sequence[bytes], budget_execs: int, stop_on_crash: bool = False,
            time_budget: Optional[float] = None) -> CampaignReport:
        if not seeds:
            raise ValueError("at least one seed is required")
        if budget_execs < 0:
            raise ValueError("budget must be non-negative")
        for s in seeds:
            s = bytes(s[:MAX_INPUT_LEN])
            if self.execs < budget_execs:
                nov = self._execute(s)
            else:
                nov = None
            if nov is None:
                nov = (True, False)
            self._add(s, Found.INITIAL, None, nov)

        deadline = None if time_budget is None else time.monotonic() + time_budget
        rng = self.rng
        stopped = False
        while self.execs < budget_execs and not stopped:
            seed, energy = self.scheduler.next(self.corpus)
            for _ in range(energy):
                if self.execs >= budget_execs:
                    break
                child = mutate(seed.input, rng, self.corpus)
                nov = self._execute(child)
                if nov is not None and (nov[0] or nov[1]):
                    self._add(child, Found.MUTATION, seed.id, nov)
                if stop_on_crash and self.crashes:
                    stopped = True
                    break
            if deadline is not None and time.monotonic() > deadline:
                break

        crashes = dedup(self.crashes.values())
        return CampaignReport(
            target=self.target.name,
            mode=self.mode.value,
            rng_seed=self.rng_seed,
            budget_execs=budget_execs,
            total_execs=self.execs,
            corpus_size=len(self.corpus),
            crashes=crashes,
            annot_novel_seeds=sum(s.novelty_source is not NoveltySource.EDGE for s in self.corpus),
            edges_seen=self.maps.edge_count(),
            annot_slots_seen=self.maps.annot_count(),
            stopped_on_crash=stopped,
            corpus=list(self.corpus),
        )


def run_campaign(target: TargetSpec, seeds: Sequence[bytes], budget_execs: int, rng_seed: int,
                 mode: Mode = Mode.ANNOT, stop_on_crash: bool = False,
                 time_budget: Optional[float] = None) -> CampaignReport:
    """Run one deterministic campaign (wall-time budgets are the exception)."""
    return Campaign(target, mode, rng_seed).run(seeds, budget_execs, stop_on_crash, time_budget)


def replay(target: TargetSpec, crash: CrashRecord) -> Optional[tuple]:
    result = target.execute(crash.input, annotation_enabled=False)
    if result.crash is None:
        return None
    return (result.crash.kind.value, stack_hash(result.crash.stack))
