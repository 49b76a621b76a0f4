import json

import pytest
from hypothesis import given, settings, strategies as st

from reviewfuzz.cfunc import find_functions
from reviewfuzz.instrument import (
    AnchorError, AnnotationPlan, AnnotationSite, DuplicateInjection, Rejection, inject, injection_diff,
    instrument_function, parse_injected, propose_annotations, render_block, resolve_anchor, safety_check,
    site_id_for, strip_guards, validate_plan,
)
from reviewfuzz.llm import ScriptedClient
from reviewfuzz.runtime import Macro

FIBER_HANDLER = """static ZEND_INI_MH(OnUpdateFiberStackSize)
{
    if (new_value) {
        zend_long tmp = zend_ini_parse_quantity_warn(new_value, name);
        if (tmp < 0) {
            zend_error(E_WARNING, "fiber.stack_size must be a positive number");
            return FAILURE;
        }
        EG(fiber_stack_size) = tmp;
    } else {
        EG(fiber_stack_size) = ZEND_FIBER_DEFAULT_C_STACK_SIZE;
    }
    return SUCCESS;
}
"""

FIBER_HANDLER_ANNOTATED = """static ZEND_INI_MH(OnUpdateFiberStackSize)
{
    if (new_value) {
        zend_long tmp = zend_ini_parse_quantity_warn(new_value, name);
        if (tmp < 0) {
            zend_error(E_WARNING, "fiber.stack_size must be a positive number");
            return FAILURE;
        }
        EG(fiber_stack_size) = tmp;

        #ifdef _USE_IJON
        IJON_SET(EG(fiber_stack_size));  // TRACKS EXTREME VALUE
        #endif
    } else {
        EG(fiber_stack_size) = ZEND_FIBER_DEFAULT_C_STACK_SIZE;
    }
    return SUCCESS;
}
"""

FIBER_COMMENT = ("If a large chunk of memory were allocated on the stack it could exceed the size of a single "
                 "page. I think what we need to guard against is a too-small stack size.")

FN = "OnUpdateFiberStackSize"


def plan(snippet="IJON_SET(EG(fiber_stack_size));  // TRACKS EXTREME VALUE", pre="EG(fiber_stack_size) = tmp;",
         post="} else {", macro=Macro.SET):
    return AnnotationPlan(macro, snippet, "after the commit", pre, post, "tracks the committed size")


def site_for(p, src=FIBER_HANDLER):
    return resolve_anchor(src, p, "Zend/zend.c", FN)


class TestPropose:
    def test_fiber_plan(self, mock_client):
        plans, dropped = propose_annotations(FIBER_HANDLER, FIBER_COMMENT, None, mock_client, FN, "Zend/zend.c")
        assert dropped == []
        first = plans[0]
        assert first.macro is Macro.SET
        assert first.snippet.startswith("IJON_SET(EG(fiber_stack_size))")
        assert first.pre_anchor == "EG(fiber_stack_size) = tmp;"

    def test_buffer_comment_gives_boundary_macros(self, mock_client, fixture_dir):
        src = (fixture_dir / "checkout" / "main" / "smart_buf.c").read_text()
        (fn,) = [f for f in find_functions(src) if f.name == "smart_buf_append"]
        body = "The memcpy can write one byte past the end of the buffer."
        plans, _ = propose_annotations(src[fn.start:fn.end], body, None, mock_client, fn.name, "main/smart_buf.c")
        assert plans and {p.macro for p in plans} <= {Macro.MIN, Macro.DIST}

    def test_state_comment_gives_state_macros(self, mock_client, fixture_dir):
        src = (fixture_dir / "checkout" / "ext" / "session" / "session_proto.c").read_text()
        (fn,) = [f for f in find_functions(src) if f.name == "php_session_step"]
        body = "If commands arrive out of order the handshake is reset."
        plans, _ = propose_annotations(src[fn.start:fn.end], body, None, mock_client, fn.name, "x.c")
        assert plans and {p.macro for p in plans} <= {Macro.STATE, Macro.CTX}

    def test_at_most_five_and_invalid_dropped(self):
        good = {"macro": "SET", "snippet": "IJON_SET(tmp);", "pre_anchor": "a", "post_anchor": "b"}
        bad = dict(good, snippet='#include <stdio.h>')
        reply = json.dumps({"candidates": [bad] + [good] * 6})
        plans, dropped = propose_annotations(FIBER_HANDLER, "x", None, ScriptedClient([reply]))
        assert len(plans) == 4 and len(dropped) == 1
        assert "headers" in dropped[0]

    def test_garbage_twice_gives_no_plans(self):
        plans, dropped = propose_annotations(FIBER_HANDLER, "x", None, ScriptedClient(["nope", "nope"]))
        assert plans == [] and dropped[0].startswith("model-output")

    @pytest.mark.parametrize("obj, msg", [
        ({"macro": "FOO", "snippet": "x;", "pre_anchor": "a", "post_anchor": "b"}, "unknown macro"),
        ({"macro": "SET", "snippet": "IJON_SET(x);", "pre_anchor": "", "post_anchor": "b"}, "anchors"),
        ({"macro": "SET", "snippet": "IJON_SET(x);\nIJON_SET(y);", "pre_anchor": "a", "post_anchor": "b"},
         "single"),
        ({"macro": "SET", "snippet": "IJON_MAX(x);", "pre_anchor": "a", "post_anchor": "b"}, "IJON_SET"),
        ({"macro": "SET", "snippet": "extern int q; IJON_SET(q);", "pre_anchor": "a", "post_anchor": "b"},
         "external"),
    ])
    def test_validate_plan_rejects(self, obj, msg):
        from reviewfuzz.llm import ModelOutputError
        with pytest.raises(ModelOutputError, match=msg):
            validate_plan(obj)


class TestAnchors:
    def test_fiber_placement(self):
        site = site_for(plan())
        anchor_end = FIBER_HANDLER.index("EG(fiber_stack_size) = tmp;") + len("EG(fiber_stack_size) = tmp;")
        assert site.byte_offset == anchor_end
        assert site.indent == " " * 8

    def test_missing(self):
        with pytest.raises(AnchorError) as e:
            site_for(plan(pre="EG(fiber_stack_size) = tmp2;"))
        assert e.value.reason is Rejection.ANCHOR_MISSING

    def test_ambiguous(self):
        src = "void f(int a)\n{\n    a++;\n    g(a);\n    a++;\n    g(a);\n}\n"
        p = AnnotationPlan(Macro.SET, "IJON_SET(a);", "", "a++;", "g(a);", "")
        with pytest.raises(AnchorError) as e:
            resolve_anchor(src, p)
        assert e.value.reason is Rejection.ANCHOR_AMBIGUOUS

    def test_post_anchor_disambiguates(self):
        src = "void f(int a)\n{\n    a++;\n    g(a);\n    a++;\n    h(a);\n}\n"
        p = AnnotationPlan(Macro.SET, "IJON_SET(a);", "", "a++;", "h(a);", "")
        assert resolve_anchor(src, p).byte_offset == src.rindex("a++;") + 4

    def test_midline_rejected(self):
        src = "void f(int a)\n{\n    a++; g(a);\n}\n"
        p = AnnotationPlan(Macro.SET, "IJON_SET(a);", "", "a++;", "}", "")
        with pytest.raises(AnchorError) as e:
            resolve_anchor(src, p)
        assert e.value.reason is Rejection.ANCHOR_MIDLINE

    def test_whitespace_drift_tolerated(self):
        drifted = FIBER_HANDLER.replace("EG(fiber_stack_size) = tmp;", "EG( fiber_stack_size )  =\ttmp ;")
        site = site_for(plan(), drifted)
        assert drifted[:site.byte_offset].endswith("tmp ;")


class TestInject:
    def test_fiber_golden(self):
        site = site_for(plan())
        out = inject(FIBER_HANDLER, site)
        assert out == FIBER_HANDLER_ANNOTATED
        assert safety_check(out, site).ok

    def test_fixture_golden_matches(self, fixture_dir):
        src = (fixture_dir / "checkout" / "Zend" / "zend.c").read_text()
        out, outcome = instrument_function(src, "Zend/zend.c", FN, [plan()])
        assert [s.site_id for s in outcome.sites] == [site_id_for("Zend/zend.c", FN, Macro.SET, plan().snippet)]
        golden = (fixture_dir / "golden" / "annotated" / "Zend" / "zend.c").read_text()

        def fiber_text(text):
            (fn,) = [f for f in find_functions(text) if f.name == FN]
            return text[fn.start:fn.end]

        assert fiber_text(out) == fiber_text(golden)

    def test_duplicate_refused(self):
        site = site_for(plan())
        once = inject(FIBER_HANDLER, site)
        with pytest.raises(DuplicateInjection):
            inject(once, site)
        text, outcome = instrument_function(once, "Zend/zend.c", FN, [plan()])
        assert text == once and outcome.rejected[0][1] == "duplicate"

    def test_function_end(self):
        p = AnnotationPlan(Macro.INC, "IJON_INC(1);", "", "return SUCCESS;", "}", "")
        site = site_for(p)
        out = inject(FIBER_HANDLER, site)
        assert safety_check(out, site).ok
        tail = out[out.index("return SUCCESS;"):]
        assert tail.index("IJON_INC(1);") < tail.index("}")
        assert [f.name for f in find_functions(out)] == [FN]

    def test_scope_failure(self):
        p = plan(snippet="IJON_SET(tmp2);")
        site = site_for(p)
        res = safety_check(inject(FIBER_HANDLER, site), site)
        assert (res.ok, res.reason) == (False, Rejection.SCOPE)
        assert "tmp2" in res.detail

    def test_syntax_failure(self):
        p = plan(snippet="IJON_SET((tmp);")
        site = site_for(p)
        res = safety_check(inject(FIBER_HANDLER, site), site)
        assert (res.ok, res.reason) == (False, Rejection.SYNTAX)

    def test_member_names_not_scope_checked(self):
        src = "void f(struct s *p)\n{\n    p->len = 1;\n    g(p);\n}\n"
        p = AnnotationPlan(Macro.MAX, "IJON_MAX(p->len);", "", "p->len = 1;", "g(p);", "")
        site = resolve_anchor(src, p, "x.c", "f")
        assert safety_check(inject(src, site), site).ok

    def test_compile_hook_failure(self):
        site = site_for(plan())
        res = safety_check(inject(FIBER_HANDLER, site), site, lambda src, s: "error: boom")
        assert (res.ok, res.reason, res.detail) == (False, Rejection.COMPILE, "error: boom")

    def test_diff_adds_only_guarded_lines(self):
        out = inject(FIBER_HANDLER, site_for(plan()))
        diff = injection_diff(FIBER_HANDLER, out, "Zend/zend.c")
        added = [l[1:] for l in diff.splitlines() if l.startswith("+") and not l.startswith("+++")]
        assert [a.strip() for a in added] == ["", "#ifdef _USE_IJON", plan().snippet, "#endif"]

    def test_site_id_stable(self):
        a = site_for(plan())
        b = AnnotationSite.from_json(json.loads(json.dumps(a.to_json())))
        assert a == b and a.site_id == b.site_id
        assert a.site_id != site_for(plan(snippet="IJON_MAX(EG(fiber_stack_size));", macro=Macro.MAX)).site_id


# every line end in the listing body is a legal insertion point
BODY_START = FIBER_HANDLER.index("{") + 1
LINE_ENDS = [i for i, ch in enumerate(FIBER_HANDLER) if ch == "\n" and BODY_START <= i < len(FIBER_HANDLER) - 2]
snippets = st.sampled_from(["IJON_SET(tmp);", "IJON_MAX(tmp);", "IJON_INC(1);", "IJON_MIN(tmp);"])
sites = st.lists(
    st.builds(lambda off, snip: AnnotationSite("x.c", FN, off, "    ", AnnotationPlan(Macro.SET, snip, "", "a", "b", "")),
              st.sampled_from(LINE_ENDS), snippets),
    max_size=6, unique_by=lambda s: (s.byte_offset, s.plan.snippet),
)


@given(sites)
def test_strip_round_trip(ss):
    text = FIBER_HANDLER
    for s in ss:
        text = inject(text, s)
    assert strip_guards(text) == FIBER_HANDLER
    assert len(parse_injected(text)[1]) == len(ss)


@given(sites, st.randoms())
def test_order_independence(ss, rng):
    a = FIBER_HANDLER
    for s in ss:
        a = inject(a, s)
    shuffled = list(ss)
    rng.shuffle(shuffled)
    b = FIBER_HANDLER
    for s in shuffled:
        b = inject(b, s)
    assert a == b


@settings(max_examples=60)
@given(st.lists(st.sampled_from([" ", "  ", "\t", ""]), min_size=6, max_size=6))
def test_whitespace_stability(pads):
    pre = "EG(fiber_stack_size) = tmp;"
    pieces = ["EG(", "fiber_stack_size", ")", "=", "tmp", ";"]
    drifted_anchor = "".join(p + pad for p, pad in zip(pieces, pads[:-1] + [""]))
    drifted = FIBER_HANDLER.replace(pre, drifted_anchor)
    site = site_for(plan(), drifted)
    assert drifted[:site.byte_offset].endswith(drifted_anchor)
    assert strip_guards(inject(drifted, site)) == drifted


def test_block_format():
    assert render_block("  ", "IJON_INC(1);") == "\n\n  #ifdef _USE_IJON\n  IJON_INC(1);\n  #endif"


def test_fixture_instrumentation(taxonomy, mock_client, fixture_dir):
    from reviewfuzz.classify import classify_corpus
    from reviewfuzz.corpus import ingest_fixture
    from reviewfuzz.instrument import instrument_localized
    from reviewfuzz.localize import CweHint, localize_records
    corpus = ingest_fixture(fixture_dir / "comments.jsonl")
    records = classify_corpus(corpus, taxonomy, mock_client)
    loc = localize_records(records, corpus.by_id(), taxonomy, mock_client, fixture_dir / "checkout",
                           fixture_dir / "diffs")
    hints = {(r.pr_id, r.comment_id): CweHint.from_record(r, taxonomy) for r in records if r.is_security}
    run = instrument_localized(loc, corpus.by_id(), hints, mock_client, fixture_dir / "checkout")
    macros = {(r["function"], s["plan"]["macro"]) for r in run.records for s in r["sites"]}
    assert macros == {(FN, "SET"), ("zend_calc_alloc_size", "MAX"), ("smart_buf_append", "DIST"),
                      ("smart_buf_append", "MIN"), ("php_session_step", "STATE")}
    reasons = [x["reason"] for r in run.records for x in r["rejected"]]
    assert reasons == ["duplicate"]
    for path, text in run.annotated.items():
        assert strip_guards(text) == run.originals[path]
        golden = fixture_dir / "golden" / "annotated" / path
        assert text == golden.read_text()
    assert run.diff() == (fixture_dir / "golden" / "injections.diff").read_text()
