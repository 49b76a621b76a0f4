"""Executable semantics of the annotation primitives and the dual feedback maps.

Edge coverage and annotation feedback live in separate 64 KiB maps so that
annotation values never collide with control-flow edges.  Per-site extremum
registers back the MAX/MIN/DIST/BITS primitives.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

MAP_SIZE = 1 << 16
MAX_REGS = 512

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

_TRIPLE = struct.Struct("<QQq")


class Macro(str, enum.Enum):
    SET = "SET"
    MAX = "MAX"
    MIN = "MIN"
    INC = "INC"
    DIST = "DIST"
    BITS = "BITS"
    STATE = "STATE"
    CTX = "CTX"


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


_hash_cache: dict = {}


def mix(key: int, site_id: int, value: int) -> int:
    """FNV-1a 64 over the 24-byte little-endian encoding (key, site, value).

    ``key`` and ``site_id`` are unsigned 64-bit, ``value`` is signed 64-bit.
    """
    k = (key, site_id, value)
    h = _hash_cache.get(k)
    if h is None:
        h = fnv1a64(_TRIPLE.pack(key & MASK64, site_id & MASK64, value))
        if len(_hash_cache) > 1 << 18:
            _hash_cache.clear()
        _hash_cache[k] = h
    return h


def _bucket_table() -> bytes:
    table = bytearray(256)
    for n in range(256):
        if n <= 3:
            table[n] = n
        elif n <= 7:
            table[n] = 4
        elif n <= 15:
            table[n] = 5
        elif n <= 31:
            table[n] = 6
        elif n <= 127:
            table[n] = 7
        else:
            table[n] = 8
    return bytes(table)


BUCKETS = _bucket_table()


def bucket(hitcount: int) -> int:
    """Map a saturated hit counter (0..255) to its class 0..8."""
    if not 0 <= hitcount <= 255:
        raise ValueError(f"hitcount out of range: {hitcount}")
    return BUCKETS[hitcount]


def to_i64(value: int) -> int:
    value &= MASK64
    return value - (1 << 64) if value >= 1 << 63 else value


def floor_log2(value: int) -> int:
    return max(value, 1).bit_length() - 1


@dataclass(frozen=True)
class AnnotationEvent:
    site_id: int
    kind: Macro
    a: int
    b: Optional[int] = None

    def __post_init__(self) -> None:
        if (self.kind is Macro.DIST) != (self.b is not None):
            raise ValueError("DIST events carry exactly two operands, others one")


@dataclass
class MaxRegister:
    seen: bool = False
    value: int = 0


@dataclass
class FeedbackState:
    """Per-worker feedback: two hit maps, extremum registers, state/context.

    The maps and ``state_reg``/``ctx_reg`` describe one execution and are
    cleared by :meth:`reset`.  ``max_regs`` persist across the campaign.
    """

    edge_map: bytearray = field(default_factory=lambda: bytearray(MAP_SIZE))
    annot_map: bytearray = field(default_factory=lambda: bytearray(MAP_SIZE))
    max_regs: list = field(default_factory=lambda: [MaxRegister() for _ in range(MAX_REGS)])
    state_reg: int = 0
    ctx_reg: int = 0
    max_improved: bool = False
    touched_edges: list = field(default_factory=list)
    touched_annots: list = field(default_factory=list)

    def reset(self) -> None:
        em, am = self.edge_map, self.annot_map
        for i in self.touched_edges:
            em[i] = 0
        for i in self.touched_annots:
            am[i] = 0
        self.touched_edges = []
        self.touched_annots = []
        self.state_reg = 0
        self.ctx_reg = 0
        self.max_improved = False

    def add_edges(self, counts: Mapping[int, int]) -> None:
        em = self.edge_map
        touched = self.touched_edges
        for idx, n in counts.items():
            old = em[idx]
            if not old:
                touched.append(idx)
            em[idx] = min(255, old + n)

    def _hit_annot(self, slot: int) -> bool:
        am = self.annot_map
        old = am[slot]
        if old == 255:
            return False
        if not old:
            self.touched_annots.append(slot)
        am[slot] = old + 1
        return BUCKETS[old + 1] > BUCKETS[old]

    def _set(self, site_id: int, value: int) -> bool:
        slot = mix(self.ctx_reg ^ self.state_reg, site_id, value) % MAP_SIZE
        return self._hit_annot(slot)

    def _max(self, site_id: int, value: int) -> bool:
        reg = self.max_regs[site_id % MAX_REGS]
        novel = not reg.seen or value > reg.value
        if novel:
            reg.seen = True
            reg.value = value
            self.max_improved = True
        self._set(site_id, floor_log2(value))
        return novel

    def apply_event(self, e: AnnotationEvent) -> bool:
        """Apply one annotation event; returns the per-event novelty flag."""
        kind = e.kind
        a = to_i64(e.a)
        if kind is Macro.SET or kind is Macro.INC:
            return self._set(e.site_id, a)
        if kind is Macro.MAX:
            return self._max(e.site_id, a)
        if kind is Macro.MIN:
            return self._max(e.site_id, to_i64(-a))
        if kind is Macro.DIST:
            return self._max(e.site_id, to_i64(-abs(a - to_i64(e.b))))
        if kind is Macro.BITS:
            return self._max(e.site_id, bin(a & MASK64).count("1"))
        if kind is Macro.STATE:
            self.state_reg = mix(self.state_reg, e.site_id, a)
            return self._set(e.site_id, a)
        if kind is Macro.CTX:
            self.ctx_reg = a & MASK64
            return False
        raise ValueError(f"unknown annotation kind {kind!r}")

    def apply_events(self, events: Iterable[AnnotationEvent]) -> None:
        for e in events:
            self.apply_event(e)


class CampaignMaps:
    """Campaign-wide record of bucket classes seen at every map index."""

    def __init__(self) -> None:
        self.edge_seen = bytearray(MAP_SIZE)
        self.annot_seen = bytearray(MAP_SIZE)

    def edge_count(self) -> int:
        return MAP_SIZE - self.edge_seen.count(0)

    def annot_count(self) -> int:
        return MAP_SIZE - self.annot_seen.count(0)


def _new_classes(hits: bytearray, touched: list, seen: bytearray) -> list:
    fresh = []
    for i in touched:
        bit = 1 << (BUCKETS[hits[i]] - 1)
        if not seen[i] & bit:
            fresh.append((i, bit))
    return fresh


def novelty(state: FeedbackState, campaign: CampaignMaps, commit: bool = True) -> tuple:
    """Return (edge_novel, annotation_novel) and record new classes if any.

    A new extremum register value counts as annotation novelty.
    """
    new_edges = _new_classes(state.edge_map, state.touched_edges, campaign.edge_seen)
    new_annots = _new_classes(state.annot_map, state.touched_annots, campaign.annot_seen)
    edge_novel = bool(new_edges)
    annot_novel = bool(new_annots) or state.max_improved
    if commit and (edge_novel or annot_novel):
        for i, bit in new_edges:
            campaign.edge_seen[i] |= bit
        for i, bit in new_annots:
            campaign.annot_seen[i] |= bit
    return edge_novel, annot_novel


def is_interesting(state: FeedbackState, campaign: CampaignMaps) -> bool:
    edge_novel, annot_novel = novelty(state, campaign)
    return edge_novel or annot_novel
