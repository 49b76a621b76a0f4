"""Desk-scale benchmark targets with planted bugs and annotation sites.

Each target is a pure function of its input bytes.  Coverage is recorded
AFL-style: every instrumented block has a fixed id and the edge index is
``(prev >> 1) ^ cur``.  Annotation events are only produced when the harness
runs with annotations enabled.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

from .runtime import MAP_SIZE, AnnotationEvent, Macro


class CrashKind(str, enum.Enum):
    SEGV = "segv"
    ABORT = "abort"
    STACK_OVERFLOW = "stack_overflow"
    ASSERT = "assert"


@dataclass(frozen=True)
class Crash:
    kind: CrashKind
    stack: tuple


@dataclass
class Execution:
    edges: dict
    events: list
    crash: Optional[Crash] = None
    warnings: list = field(default_factory=list)


class Trace:
    __slots__ = ("counts", "prev", "events", "annotate", "warnings")

    def __init__(self, annotate: bool) -> None:
        self.counts: dict = {}
        self.prev = 0
        self.events: list = []
        self.annotate = annotate
        self.warnings: list = []

    def block(self, cur: int) -> None:
        idx = (self.prev >> 1) ^ cur
        self.counts[idx] = self.counts.get(idx, 0) + 1
        self.prev = cur

    def event(self, site_id: int, kind: Macro, a: int, b: Optional[int] = None) -> None:
        if self.annotate:
            self.events.append(AnnotationEvent(site_id, kind, a, b))


class TargetCrash(Exception):
    def __init__(self, kind: CrashKind, stack: tuple) -> None:
        super().__init__(kind.value)
        self.crash = Crash(kind, stack)


def _blocks(*names: str) -> dict:
    # Stable pseudo-random block ids in [0, MAP_SIZE).
    from .runtime import fnv1a64

    return {n: fnv1a64(n.encode()) % MAP_SIZE for n in names}


@dataclass(frozen=True)
class AnnotationSiteSpec:
    site_id: int
    kind: Macro
    location: str


@dataclass(frozen=True)
class TargetSpec:
    name: str
    description: str
    bug: str
    sites: tuple
    expected_winner: str
    seeds: tuple
    run: Callable[[bytes, Trace], None]

    def execute(self, data: bytes, annotation_enabled: bool = True) -> Execution:
        trace = Trace(annotation_enabled)
        crash = None
        try:
            self.run(data, trace)
        except TargetCrash as exc:
            crash = exc.crash
        return Execution(trace.counts, trace.events, crash, trace.warnings)


# --------------------------------------------------------------------------
# stack_size: numeric configuration value that only matters by magnitude

STACK_SIZE_SITE = 0x5F1B
MIN_SAFE_STACK = 4096
INT64_MAX = (1 << 63) - 1

_SS = _blocks(
    "ss.entry", "ss.parse", "ss.junk", "ss.range", "ss.negative", "ss.commit", "ss.default",
    "ss.fiber_start",
)
_QUANTITY = re.compile(rb"([+-]?)(\d*)([KMGkmg]?)")
_MULTIPLIER = {b"": 1, b"k": 1 << 10, b"m": 1 << 20, b"g": 1 << 30}


def parse_quantity(data: bytes, trace: Optional[Trace] = None) -> Optional[int]:
    """Parse a leading signed integer with optional K/M/G suffix.

    Trailing junk produces a warning and is ignored.  Returns ``None`` when
    the magnitude does not fit a signed 64-bit integer.
    """
    m = _QUANTITY.match(data)
    sign, digits, suffix = m.groups()
    value = int(digits) if digits else 0
    value *= _MULTIPLIER[suffix.lower()]
    if sign == b"-":
        value = -value
    if m.end() != len(data):
        if trace is not None:
            trace.block(_SS["ss.junk"])
            trace.warnings.append(f"invalid quantity {data[:32]!r}: trailing junk ignored")
    if not -INT64_MAX - 1 <= value <= INT64_MAX:
        if trace is not None:
            trace.block(_SS["ss.range"])
        return None
    return value


def _run_stack_size(data: bytes, t: Trace) -> None:
    t.block(_SS["ss.entry"])
    t.block(_SS["ss.parse"])
    tmp = parse_quantity(data, t)
    if tmp is None or tmp < 0:
        t.block(_SS["ss.negative"])
        t.warnings.append("invalid stack size")
        return
    t.block(_SS["ss.commit"])
    stack_size = tmp
    t.event(STACK_SIZE_SITE, Macro.SET, stack_size)
    if stack_size == 0:
        t.block(_SS["ss.default"])
        stack_size = 8 << 20
    t.block(_SS["ss.fiber_start"])
    if stack_size < MIN_SAFE_STACK:
        raise TargetCrash(
            CrashKind.STACK_OVERFLOW,
            ("zend_fiber_execute", "zend_fiber_object_start", "fiber_start"),
        )


def target_stack_size(data: bytes, annotation_enabled: bool = True) -> Execution:
    return STACK_SIZE.execute(data, annotation_enabled)


STACK_SIZE = TargetSpec(
    name="stack_size",
    description="config quantity parser whose committed value sizes a simulated fiber stack",
    bug=f"fiber start overflows when 0 < committed size < {MIN_SAFE_STACK}",
    sites=(AnnotationSiteSpec(STACK_SIZE_SITE, Macro.SET, "Zend/zend.c:OnUpdateFiberStackSize"),),
    expected_winner="annot",
    seeds=(b"9690x-D", b"-1", b"8M"),
    run=_run_stack_size,
)


# --------------------------------------------------------------------------
# maze: walk a fixed grid, reaching the exit is the bug

MAZE = (
    "###############",
    "#S   #       ##",
    "# ## # ##### ##",
    "#  #     ###  #",
    "######## #### #",
    "#      #    # #",
    "# ###### ## ###",
    "#        #   X#",
    "###############",
)
MAZE_WIDTH = 15
MAZE_HEIGHT = 9
MAZE_PROGRESS_SITE = 0x3A7
MAX_MOVES = 256

_MZ = _blocks("mz.entry", "mz.up", "mz.down", "mz.left", "mz.right", "mz.wall", "mz.move", "mz.stop")
_MOVES = {
    ord("U"): (0, -1, _MZ["mz.up"]),
    ord("D"): (0, 1, _MZ["mz.down"]),
    ord("L"): (-1, 0, _MZ["mz.left"]),
    ord("R"): (1, 0, _MZ["mz.right"]),
}


def _find(ch: str) -> tuple:
    for y, row in enumerate(MAZE):
        x = row.find(ch)
        if x >= 0:
            return x, y
    raise ValueError(ch)


MAZE_START = _find("S")
MAZE_EXIT = _find("X")


def _run_maze(data: bytes, t: Trace) -> None:
    t.block(_MZ["mz.entry"])
    x, y = MAZE_START
    for b in data[:MAX_MOVES]:
        move = _MOVES.get(b)
        if move is None:
            t.block(_MZ["mz.stop"])
            return
        dx, dy, blk = move
        t.block(blk)
        nx, ny = x + dx, y + dy
        if MAZE[ny][nx] == "#":
            t.block(_MZ["mz.wall"])
            continue
        t.block(_MZ["mz.move"])
        x, y = nx, ny
        t.event(MAZE_PROGRESS_SITE, Macro.MAX, x + y * MAZE_WIDTH)
        if (x, y) == MAZE_EXIT:
            raise TargetCrash(CrashKind.ASSERT, ("maze_exit_reached", "maze_walk", "maze_main"))


MAZE_TARGET = TargetSpec(
    name="maze",
    description=f"{MAZE_WIDTH}x{MAZE_HEIGHT} grid walked by U/D/L/R bytes; walls block",
    bug="reaching the exit cell trips an assertion",
    sites=(AnnotationSiteSpec(MAZE_PROGRESS_SITE, Macro.MAX, "maze.c:maze_walk"),),
    expected_winner="annot",
    seeds=(b"R",),
    run=_run_maze,
)


# --------------------------------------------------------------------------
# magic: sanity control with a byte-wise 4-byte magic check

MAGIC = b"IJQ!"
_MG = _blocks("mg.entry", "mg.b0", "mg.b1", "mg.b2", "mg.b3", "mg.short")


def _run_magic(data: bytes, t: Trace) -> None:
    t.block(_MG["mg.entry"])
    if len(data) < 4:
        t.block(_MG["mg.short"])
        return
    if data[0] == MAGIC[0]:
        t.block(_MG["mg.b0"])
        if data[1] == MAGIC[1]:
            t.block(_MG["mg.b1"])
            if data[2] == MAGIC[2]:
                t.block(_MG["mg.b2"])
                if data[3] == MAGIC[3]:
                    t.block(_MG["mg.b3"])
                    raise TargetCrash(CrashKind.ABORT, ("magic_abort", "check_header", "magic_main"))


MAGIC_TARGET = TargetSpec(
    name="magic",
    description="aborts when the input starts with a fixed 4-byte magic",
    bug=f"input prefix {MAGIC!r}",
    sites=(),
    expected_winner="both",
    seeds=(b"AAAA",),
    run=_run_magic,
)


# --------------------------------------------------------------------------
# state_machine: in-order protocol commands, any mistake resets

# Each byte's low nibble is an opcode; the session must see these in order.
PROTOCOL = (0x3, 0xA, 0x7, 0xC, 0x1, 0xE)
PROTO_SITE = 0x7E0
MAX_COMMANDS = 16
_SM = _blocks("sm.entry", "sm.cmd", "sm.advance", "sm.reset", "sm.done")


def _run_state_machine(data: bytes, t: Trace) -> None:
    t.block(_SM["sm.entry"])
    state = 0
    for b in data[:MAX_COMMANDS]:
        t.block(_SM["sm.cmd"])
        if b & 0x0F == PROTOCOL[state]:
            t.block(_SM["sm.advance"])
            state += 1
            t.event(PROTO_SITE, Macro.STATE, state)
            if state == len(PROTOCOL):
                t.block(_SM["sm.done"])
                raise TargetCrash(CrashKind.SEGV, ("proto_dispatch", "proto_step", "proto_main"))
        elif state:
            t.block(_SM["sm.reset"])
            state = 0


STATE_MACHINE = TargetSpec(
    name="state_machine",
    description="six-step protocol keyed on the low nibble of each byte; a wrong command resets to state 0",
    bug=f"reaching state {len(PROTOCOL)} dereferences a null session",
    sites=(AnnotationSiteSpec(PROTO_SITE, Macro.STATE, "proto.c:proto_step"),),
    expected_winner="annot",
    seeds=(b"hello",),
    run=_run_state_machine,
)


def target_maze(data: bytes, annotation_enabled: bool = True) -> Execution:
    return MAZE_TARGET.execute(data, annotation_enabled)


def target_magic(data: bytes, annotation_enabled: bool = True) -> Execution:
    return MAGIC_TARGET.execute(data, annotation_enabled)


def target_state_machine(data: bytes, annotation_enabled: bool = True) -> Execution:
    return STATE_MACHINE.execute(data, annotation_enabled)


TARGETS = {t.name: t for t in (STACK_SIZE, MAZE_TARGET, MAGIC_TARGET, STATE_MACHINE)}


def get_target(name: str) -> TargetSpec:
    try:
        return TARGETS[name]
    except KeyError:
        raise KeyError(f"unknown target {name!r}; choose from {sorted(TARGETS)}") from None
