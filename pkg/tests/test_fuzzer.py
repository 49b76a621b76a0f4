import dataclasses
import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from reviewfuzz.fuzzer import (
    BASE_ENERGY, MAX_INPUT_LEN, CampaignReport, CrashRecord, HarnessError, Mode, NoveltySource, Scheduler, Seed,
    _op_bitflip, dedup, mutate, replay, run_campaign, schedule, splice, stack_hash,
)
from reviewfuzz.targets import CrashKind, TargetSpec, get_target


def crash(kind, frames, seen=1, data=b"x"):
    return CrashRecord(data, kind, stack_hash(frames), seen, tuple(frames))


class TestMutate:
    def test_bitflip_can_turn_a_into_c(self):
        outs = set()
        for s in range(64):
            buf = bytearray(b"A")
            _op_bitflip(buf, random.Random(s), None)
            outs.add(bytes(buf))
        assert b"C" in outs

    @given(st.binary(max_size=200), st.integers(0, 2**32))
    @settings(max_examples=200)
    def test_length_bounds(self, data, seed):
        out = mutate(data, random.Random(seed))
        assert 1 <= len(out) <= MAX_INPUT_LEN

    def test_growth_from_empty(self):
        assert len(mutate(b"", random.Random(0))) >= 1

    def test_long_input_is_capped(self):
        assert len(mutate(b"a" * (MAX_INPUT_LEN + 100), random.Random(3))) <= MAX_INPUT_LEN

    def test_splice(self):
        assert splice(b"abcd", b"wxyz", 2, 1) == b"abxyz"

    def test_deterministic(self):
        assert mutate(b"hello", random.Random(9)) == mutate(b"hello", random.Random(9))


class TestSchedule:
    def corpus(self, *sources):
        return [Seed(b"s%d" % i, novelty_source=src, id=i) for i, src in enumerate(sources)]

    def test_uniform_energy_for_edge_corpus(self):
        sch = Scheduler(annotation_aware=True)
        c = self.corpus(NoveltySource.EDGE, NoveltySource.EDGE, NoveltySource.EDGE)
        assert [schedule(c, sch)[1] for _ in range(3)] == [BASE_ENERGY] * 3

    def test_annotation_seed_gets_double(self):
        sch = Scheduler(annotation_aware=True)
        c = self.corpus(NoveltySource.EDGE, NoveltySource.ANNOTATION, NoveltySource.EDGE)
        picks = [schedule(c, sch) for _ in range(3)]
        assert [(s.id, e) for s, e in picks] == [(0, BASE_ENERGY), (1, 2 * BASE_ENERGY), (2, BASE_ENERGY)]

    def test_baseline_ignores_multiplier(self):
        sch = Scheduler(annotation_aware=False)
        c = self.corpus(NoveltySource.BOTH)
        assert schedule(c, sch)[1] == BASE_ENERGY

    def test_empty(self):
        with pytest.raises(ValueError):
            Scheduler(True).next([])


class TestDedup:
    def test_same_frames_same_kind(self):
        f = ("a", "b", "c", "d")
        assert len(dedup([crash(CrashKind.SEGV, f, 5), crash(CrashKind.SEGV, f[:3] + ("zz",), 2)])) == 1

    def test_kind_splits(self):
        f = ("a", "b", "c")
        assert len(dedup([crash(CrashKind.SEGV, f), crash(CrashKind.ABORT, f)])) == 2

    def test_empty(self):
        assert dedup([]) == []

    def test_earliest_representative(self):
        f = ("a", "b", "c")
        assert dedup([crash(CrashKind.SEGV, f, 9), crash(CrashKind.SEGV, f, 3)])[0].first_seen == 3

    @given(st.lists(st.tuples(st.sampled_from(list(CrashKind)), st.sampled_from("abc"), st.integers(1, 100)),
                    max_size=30))
    def test_idempotent(self, items):
        cs = [crash(k, (f, "x", "y"), n) for k, f, n in items]
        once = dedup(cs)
        assert dedup(once) == once
        assert len({c.key for c in cs}) == len(once)


class TestCampaign:
    def test_zero_budget(self):
        r = run_campaign(get_target("magic"), [b"AAAA", b"BBBB"], 0, 1)
        assert r.total_execs == 0 and r.crashes == [] and r.corpus_size == 2

    def test_needs_seeds(self):
        with pytest.raises(ValueError):
            run_campaign(get_target("magic"), [], 10, 1)

    @pytest.mark.parametrize("mode", list(Mode))
    def test_reproducible(self, mode):
        t = get_target("maze")
        a = run_campaign(t, t.seeds, 3000, 7, mode)
        b = run_campaign(t, t.seeds, 3000, 7, mode)
        assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)

    def test_report_round_trip(self):
        t = get_target("stack_size")
        r = run_campaign(t, t.seeds, 500, 1)
        assert r.crashes
        assert CampaignReport.from_json(json.loads(json.dumps(r.to_json()))).to_json() == r.to_json()

    def test_crashes_replay(self):
        t = get_target("stack_size")
        r = run_campaign(t, t.seeds, 2000, 2)
        for c in r.crashes:
            assert replay(t, c) == c.key

    def test_baseline_invariant_to_annotation_sites(self):
        t = get_target("state_machine")

        def silent(data, trace, _run=t.run):
            trace.annotate = False
            _run(data, trace)

        stripped = dataclasses.replace(t, run=silent, sites=())
        a = run_campaign(t, t.seeds, 3000, 4, Mode.BASELINE)
        b = run_campaign(stripped, t.seeds, 3000, 4, Mode.BASELINE)
        assert a.to_json() == b.to_json()

    def test_stop_on_crash(self):
        t = get_target("stack_size")
        r = run_campaign(t, t.seeds, 100_000, 0, stop_on_crash=True)
        assert r.stopped_on_crash and r.total_execs == r.first_crash_exec

    def test_harness_panic_aborts(self):
        def broken(data, trace):
            raise ZeroDivisionError("boom")

        t = TargetSpec("broken", "", "", (), "none", (b"a",), broken)
        with pytest.raises(HarnessError, match="broken"):
            run_campaign(t, t.seeds, 10, 0)
