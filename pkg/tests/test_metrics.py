import pytest

from detector import detect_scafs
from ir import parse_program
from metrics import (ObjectPartition, ProgramMismatchError, compare, compute_metrics, derive_maps, icall_metrics,
                     partition_objects, percent)
from oracle import ConservativeOracle
from pointsto import HeapObject, Mode, Origin, analyze


def shell_results(load):
    program = load("shell_wrappers.ir")
    al = detect_scafs(program, ConservativeOracle())
    return program, al, analyze(program, Mode.BASELINE), analyze(program, Mode.ENHANCED, al)


def test_shell_wrappers_partition(load):
    _, al, baseline, enhanced = shell_results(load)
    partition = partition_objects(baseline, enhanced, al)
    assert partition.killed == frozenset({HeapObject("xmalloc:0", Origin.SEED_SITE)})
    assert partition.added == frozenset({HeapObject("array_create:0", Origin.MODELED_SITE),
                                         HeapObject("make_bare_word:0", Origin.MODELED_SITE)})
    assert partition.retained == frozenset()


def test_shell_wrappers_derived_maps(load):
    _, _, baseline, enhanced = shell_results(load)
    maps = derive_maps(baseline)
    o = HeapObject("xmalloc:0", Origin.SEED_SITE)
    assert maps.pbs[o] == frozenset({"xmalloc.temp", "array_create.r", "make_bare_word.w"})
    assert maps.as_["array_create.r"] == frozenset({"xmalloc.temp", "make_bare_word.w"})
    assert maps.ar[o] == "xmalloc.temp"
    after = derive_maps(enhanced)
    assert after.as_["array_create.r"] == frozenset()


def test_shell_wrappers_metrics(load):
    _, al, baseline, enhanced = shell_results(load)
    report = compare(baseline, enhanced, al).to_json()
    assert report["thoc"] == [1, 2]
    assert report["sup"] == 0
    assert report["pc1"] == [3.0, 1.0]
    assert report["prr1"] == 66.7
    assert report["pc2"] is None
    assert report["prr2"] is None
    assert report["anc"] == [2.0, 0.0]
    assert report["arr"] == 100.0
    assert report["er"] == 2.0


def test_identical_results(load):
    program = load("shell_wrappers.ir")
    baseline = analyze(program, Mode.BASELINE)
    same = analyze(program, Mode.ENHANCED, {"malloc"})
    report = compare(baseline, same, {"malloc"})
    assert report.thoc == (1, 1)
    assert report.sup == 1
    assert report.prr1 is None
    assert report.prr2 == 0.0
    assert report.arr == 0.0
    assert report.er == 1.0


def test_one_callsite_row(load):
    program = load("shell_wrappers.ir")
    baseline = analyze(program, Mode.BASELINE)
    report = compare(baseline, analyze(program, Mode.ONE_CALLSITE))
    assert report.thoc == (1, 2)
    assert report.sup == 0
    assert report.anc == (2.0, 0.0)
    assert percent(report.arr) == 100.0


def test_mismatched_programs(load):
    shell_wrappers = analyze(load("shell_wrappers.ir"), Mode.BASELINE)
    other = analyze(load("two_wrappers.ir"), Mode.BASELINE)
    with pytest.raises(ProgramMismatchError):
        partition_objects(shell_wrappers, other)


def test_mismatched_allocator_list(load):
    _, _, baseline, enhanced = shell_results(load)
    with pytest.raises(ProgramMismatchError):
        partition_objects(baseline, enhanced, {"malloc"})


def test_expansion_ratio_bound(load):
    program = load("two_wrappers.ir")
    al = detect_scafs(program, ConservativeOracle())
    baseline = analyze(program, Mode.BASELINE)
    enhanced = analyze(program, Mode.ENHANCED, al)
    partition = partition_objects(baseline, enhanced, al)
    report = compute_metrics(partition, derive_maps(baseline), derive_maps(enhanced))
    k, r = len(partition.killed), len(partition.retained)
    assert report.er >= r / (k + r)


def test_empty_partition_is_undefined():
    report = compute_metrics(ObjectPartition(), derive_maps(analyze(parse_program(""))),
                             derive_maps(analyze(parse_program(""))))
    assert report.thoc == (0, 0)
    assert report.er is None
    assert report.to_json()["anc"] == [None, None]


def test_icall_metrics(load):
    program = load("icall.ir")
    baseline = analyze(program, Mode.BASELINE)
    enhanced = analyze(program, Mode.ENHANCED, {"malloc", "xmalloc"})
    report = icall_metrics(baseline.icall_targets, enhanced.icall_targets).to_json()
    assert report == {"tn": 2, "on": 2, "oa": 2.0, "ea": 1.0}


def test_percent_rounds_half_up():
    assert percent(2 / 3) == 66.7
    assert percent(0.0005) == 0.1
    assert percent(None) is None


def test_direct_callsite_is_retained(load):
    program = load("wrapper_direct_mix.ir")
    al = detect_scafs(program, ConservativeOracle())
    baseline = analyze(program, Mode.BASELINE)
    enhanced = analyze(program, Mode.ENHANCED, al)
    partition = partition_objects(baseline, enhanced, al)
    assert partition.killed == frozenset({HeapObject("xmalloc:0", Origin.SEED_SITE)})
    assert partition.added == frozenset({HeapObject("main:1", Origin.MODELED_SITE),
                                         HeapObject("main:2", Origin.MODELED_SITE)})
    assert partition.retained == frozenset({HeapObject("main:3", Origin.SEED_SITE)})
    assert compare(baseline, enhanced, al).to_json() == {
        "thoc": [2, 3], "sup": 1, "pc1": [3.0, 1.0], "prr1": 66.7, "pc2": [2.0, 2.0], "prr2": 0.0,
        "anc": [1.667, 0.333], "arr": 80.0, "er": 1.5,
    }


def test_shared_and_split_receivers(load):
    program = load("two_wrappers.ir")
    al = detect_scafs(program, ConservativeOracle())
    assert al.detected == ["xmalloc"]
    baseline = analyze(program, Mode.BASELINE)
    enhanced = analyze(program, Mode.ENHANCED, al)
    maps = derive_maps(enhanced)
    # the object made for noisy_alloc is shared up to main, the one in main is not
    assert maps.pbs[HeapObject("noisy_alloc:0", Origin.MODELED_SITE)] == frozenset(
        {"noisy_alloc.q", "make_buffer.b", "main.x"})
    assert maps.pbs[HeapObject("main:2", Origin.MODELED_SITE)] == frozenset({"main.y"})
    assert compare(baseline, enhanced, al).to_json() == {
        "thoc": [1, 2], "sup": 0, "pc1": [5.0, 2.0], "prr1": 60.0, "pc2": None, "prr2": None,
        "anc": [4.0, 1.0], "arr": 75.0, "er": 2.0,
    }


def test_icall_metrics_without_icalls():
    assert icall_metrics({}, {}).to_json() == {"tn": 0, "on": 0, "oa": None, "ea": None}


def test_icall_metrics_count_only_refined_sites():
    baseline = {"f:1": frozenset({"a", "b"}), "f:4": frozenset({"a", "b", "c"})}
    enhanced = {"f:1": frozenset({"a", "b"}), "f:4": frozenset({"c"})}
    assert icall_metrics(baseline, enhanced).to_json() == {"tn": 2, "on": 1, "oa": 3.0, "ea": 1.0}
