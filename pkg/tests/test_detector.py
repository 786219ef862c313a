import json

import pytest

from benchgen import GenSpec, generate
from callgraph import build_call_graph
from detector import (AllocatorList, Provenance, ScafDetector, SideEffectMap, backward_track, build_query,
                      collect_callsites, compute_side_effects, detect_scafs, forward_track, identify_allocator,
                      trace_upstream)
from ir import parse_program
from oracle import AnnotationOracle, ConservativeOracle, Ignorability, IgnorabilityOracle, Verdict


class CountingOracle(IgnorabilityOracle):
    def __init__(self, answer):
        self.answer = answer
        self.seen = []

    def classify(self, query):
        self.seen.append(query)
        return Verdict(self.answer, ("YES",) if self.answer == Ignorability.IGNORABLE else ("NO",))


def test_collect_callsites_shell_wrappers(load):
    program = load("shell_wrappers.ir")
    graph = build_call_graph(program)
    sites, functions = collect_callsites(program, {"malloc"}, graph)
    assert sites == ["xmalloc:0"]
    assert functions == {"xmalloc"}
    _, functions = collect_callsites(program, {"malloc", "xmalloc"}, graph, visited={"xmalloc"})
    assert functions == {"array_create", "make_bare_word"}


def test_lalloc_tracking(load):
    fn = load("lalloc.ir").functions["lalloc"]
    bt = backward_track(fn, {"malloc"}).bt
    assert bt["r"] and bt["p"] and bt["q"]
    assert not bt["pool"]
    fw = forward_track(fn, {"malloc"}).fw
    assert fw["p"] and fw["r"]
    assert not fw["pool"]


def test_side_effects_shell_wrappers_and_lalloc(load):
    shell_wrappers = load("shell_wrappers.ir")
    si = compute_side_effects(shell_wrappers, build_call_graph(shell_wrappers))
    assert si["xmalloc"] == frozenset()
    # storing r into its own head field is a pointer store
    assert si["array_create"] == frozenset({"array_create:2"})
    # storing null is not
    assert si["make_bare_word"] == frozenset()

    lalloc = load("lalloc.ir")
    si = compute_side_effects(lalloc, build_call_graph(lalloc))
    assert si["lalloc"] == frozenset({"lalloc:1", "lalloc:5", "lalloc:6", "lalloc:7"})


def test_side_effects_propagate_through_callers():
    program = parse_program(
        "extern log kind=sideeffect\n"
        "func inner(x:ptr) {\n  call log(x)\n  ret x\n}\n"
        "func outer(x:ptr) {\n  y = call inner(x)\n  ret y\n}\n"
        "func top(x:ptr) {\n  z = call outer(x)\n  ret z\n}\n")
    si = compute_side_effects(program, build_call_graph(program))
    assert si["top"] == frozenset({"top:0"})


def test_shell_wrappers_wrapper_is_heuristic(load):
    program = load("shell_wrappers.ir")
    graph = build_call_graph(program)
    si = compute_side_effects(program, graph)
    decision = identify_allocator(program.functions["xmalloc"], {"malloc"}, si, ConservativeOracle(), graph)
    assert decision.accepted
    assert decision.provenance == Provenance.HEURISTIC


def test_lalloc_with_annotations(load, fixture_path):
    program = load("lalloc.ir")
    al = detect_scafs(program, AnnotationOracle(fixture_path("lalloc_annotations.json")))
    assert al.provenance["lalloc"] == Provenance.ORACLE_ASSISTED
    assert al.num1 == 1
    assert al.num2 == 1


def test_lalloc_rejected_conservatively(load):
    detector = ScafDetector(load("lalloc.ir"), ConservativeOracle())
    al = detector.run()
    assert "lalloc" not in al
    decision = detector.decisions["lalloc"]
    assert decision.reason == "oracle-not-ignorable"
    assert list(decision.side_effects) == ["lalloc:1", "lalloc:5", "lalloc:6", "lalloc:7"]


def test_query_lists_flagged_sites_in_order(load):
    fn = load("lalloc.ir").functions["lalloc"]
    query = build_query(fn, ["lalloc:7", "lalloc:1", "lalloc:6", "lalloc:5"])
    assert [site for site, _ in query.flagged_sites] == ["lalloc:1", "lalloc:5", "lalloc:6", "lalloc:7"]
    assert query.flagged_sites[0][1] == "call report_error(limit)"
    assert query.source_text.startswith("void *lalloc")


def test_no_oracle_rejects_side_effects(load):
    detector = ScafDetector(load("lalloc.ir"), None)
    detector.run()
    assert detector.decisions["lalloc"].reason == "side-effects"
    assert detector.counters.consultations == 0


def test_oracle_is_not_consulted_without_side_effects(load):
    oracle = CountingOracle(Ignorability.IGNORABLE)
    al = detect_scafs(load("shell_wrappers.ir"), oracle)
    assert list(al) == ["malloc", "xmalloc"]
    # both callers fail value-flow tracking before side effects are considered
    assert oracle.seen == []


def test_shell_wrappers_conservative(load):
    detector = ScafDetector(load("shell_wrappers.ir"), ConservativeOracle())
    al = detector.run()
    assert list(al) == ["malloc", "xmalloc"]
    assert al.num1 == 1 and al.num2 == 0
    assert detector.decisions["array_create"].reason == "backward-track"
    assert [r.added for r in detector.iterations] == [["xmalloc"], []]


@pytest.mark.parametrize("name,reason,flags", [
    ("leaky", "forward-track", ("dead-receiver",)),
    ("stash", "backward-track", ()),
    ("void_alloc", "backward-track", ("void-return",)),
    ("recur", "backward-track", ()),
])
def test_rejections(load, name, reason, flags):
    detector = ScafDetector(load("wrapper_direct.ir"), ConservativeOracle())
    detector.run()
    decision = detector.decisions[name]
    assert not decision.accepted
    assert decision.reason == reason
    assert decision.flags == flags


def test_direct_wrappers(load):
    detector = ScafDetector(load("wrapper_direct.ir"), ConservativeOracle())
    al = detector.run()
    assert al.detected == ["pick_alloc"]
    assert al.seeds == ["calloc", "malloc"]
    assert "param_ret" not in detector.decisions


def test_side_effects_pass_through_detected_allocators(load):
    program = load("two_wrappers.ir")
    si = compute_side_effects(program, build_call_graph(program))
    assert si["noisy_alloc"] == frozenset({"noisy_alloc:1"})
    assert si["make_buffer"] == frozenset({"make_buffer:0"})
    detector = ScafDetector(program, AnnotationOracle({"noisy_alloc": "ignorable"}))
    al = detector.run()
    assert al.detected == ["noisy_alloc", "xmalloc"]
    decision = detector.decisions["make_buffer"]
    assert decision.reason == "oracle-not-ignorable"
    assert decision.side_effects == ("make_buffer:0",)
    assert decision.flags == ("missing-annotation",)
    assert [r.added for r in detector.iterations] == [["xmalloc"], ["noisy_alloc"], []]


def test_chain_through_oracle(load):
    program = load("two_wrappers.ir")
    detector = ScafDetector(program, AnnotationOracle({"noisy_alloc": "ignorable", "make_buffer": "ignorable"}))
    al = detector.run()
    assert al.detected == ["make_buffer", "noisy_alloc", "xmalloc"]
    assert al.provenance["make_buffer"] == Provenance.ORACLE_ASSISTED
    assert (al.num1, al.num2) == (3, 2)
    assert [r.added for r in detector.iterations] == [["xmalloc"], ["noisy_alloc"], ["make_buffer"], []]
    sizes = [r.al_size for r in detector.iterations]
    assert sizes == sorted(sizes)
    assert len(detector.iterations) <= len(program.defined()) + 1


def test_heuristic_acceptances_have_no_side_effects():
    for seed in range(20):
        spec = GenSpec(seed=seed, functions=12, wrapper_chain_depth=3, break_at=1, error_path_rate=0.3,
                       wrapper_rate=0.4, side_effect_rate=0.2)
        program, truth = generate(spec)
        detector = ScafDetector(program, AnnotationOracle(truth.annotations))
        detector.run()
        si = compute_side_effects(program, detector.graph)
        for decision in detector.history:
            if decision.accepted and decision.provenance == Provenance.HEURISTIC:
                assert si[decision.function] == frozenset(), (seed, decision.function)


def test_effective_and_upstream(load):
    program = load("two_wrappers.ir")
    detector = ScafDetector(program, ConservativeOracle())
    al = detector.run()
    assert al.detected == ["xmalloc"]
    assert detector.effective() == ["xmalloc"]
    assert trace_upstream(program, al, ["noisy_alloc"]) == ["make_buffer"]


def test_unused_detection_is_not_effective():
    program = parse_program(
        "extern malloc kind=alloc_seed\n"
        "func lonely(n:scalar) {\n  p = call malloc(n)\n  ret p\n}\n")
    detector = ScafDetector(program)
    detector.run()
    assert detector.al.detected == ["lonely"]
    assert detector.effective() == []


def test_icall_wrapper_counts_when_all_targets_allocate():
    program = parse_program(
        "extern malloc kind=alloc_seed\n"
        "func make(n:scalar) {\n  p = call malloc(n)\n  ret p\n}\n"
        "func via(n:scalar) {\n  fp = copy &make\n  q = icall fp(n)\n  ret q\n}\n")
    al = detect_scafs(program)
    assert al.detected == ["make", "via"]


def test_parallel_layers_agree(load):
    program = load("wrapper_direct.ir")
    one = ScafDetector(program, ConservativeOracle(), jobs=1)
    one.run()
    many = ScafDetector(program, ConservativeOracle(), jobs=4)
    many.run()
    assert json.dumps(one.report(), sort_keys=True) == json.dumps(many.report(), sort_keys=True)


def test_report_schema(load, fixture_path):
    detector = ScafDetector(load("lalloc.ir"), AnnotationOracle(fixture_path("lalloc_annotations.json")))
    detector.run()
    report = detector.report()
    assert report["allocators"] == [{"name": "lalloc", "provenance": "OracleAssisted"},
                                    {"name": "malloc", "provenance": "Seed"}]
    assert report["num1"] == 1 and report["num2"] == 1
    assert report["oracle_counters"] == {"QN": 0, "IT": 0, "OT": 0, "consultations": 1}
    decision = report["per_function_decisions"][0]
    assert decision["function"] == "lalloc"
    assert decision["verdict"] == {"value": "Ignorable", "votes": ["YES"], "flags": [],
                                   "input_tokens": 0, "output_tokens": 0}
    assert decision["iteration"] == 1


def test_allocator_list_basics():
    al = AllocatorList()
    al.add("malloc", Provenance.SEED)
    al.add("xmalloc", Provenance.HEURISTIC)
    al.add("xmalloc", Provenance.ORACLE_ASSISTED)
    assert al.provenance["xmalloc"] == Provenance.HEURISTIC
    assert len(al) == 2
    copy = al.copy()
    copy.add("lalloc", Provenance.ORACLE_ASSISTED)
    assert "lalloc" not in al
    assert copy.num2 == 1


def test_empty_side_effect_map_defaults():
    assert SideEffectMap()["anything"] == frozenset()
