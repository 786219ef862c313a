from decimal import Decimal, ROUND_HALF_UP
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

import numpy as np

from pointsto import AnalysisResult, HeapObject, Mode, clone_name


class ProgramMismatchError(ValueError):
    pass


@dataclass
class ObjectPartition:
    killed: FrozenSet[HeapObject] = frozenset()
    added: FrozenSet[HeapObject] = frozenset()
    retained: FrozenSet[HeapObject] = frozenset()


@dataclass
class DerivedMaps:
    pbs: Dict[HeapObject, FrozenSet[str]] = field(default_factory=dict)
    as_: Dict[str, FrozenSet[str]] = field(default_factory=dict)
    ar: Dict[HeapObject, Optional[str]] = field(default_factory=dict)
    # clone value -> original value (one-callsite results)
    origin: Dict[str, str] = field(default_factory=dict)
    # context object -> values of the clone that allocated it
    internal: Dict[HeapObject, FrozenSet[str]] = field(default_factory=dict)

    def project(self, value):
        return self.origin.get(value, value)


@dataclass
class MetricsReport:
    thoc: Tuple[int, int]
    sup: int
    pc1: Tuple[Optional[float], Optional[float]]
    prr1: Optional[float]
    pc2: Optional[Tuple[Optional[float], Optional[float]]]
    prr2: Optional[float]
    anc: Tuple[Optional[float], Optional[float]]
    arr: Optional[float]
    er: Optional[float]

    def to_json(self):
        return {
            "thoc": list(self.thoc),
            "sup": self.sup,
            "pc1": [_round(v, "0.001") for v in self.pc1],
            "prr1": percent(self.prr1),
            "pc2": None if self.pc2 is None else [_round(v, "0.001") for v in self.pc2],
            "prr2": percent(self.prr2),
            "anc": [_round(v, "0.001") for v in self.anc],
            "arr": percent(self.arr),
            "er": _round(self.er, "0.001"),
        }


@dataclass
class IcallReport:
    tn: int = 0
    on: int = 0
    oa: Optional[float] = None
    ea: Optional[float] = None

    def to_json(self):
        return {"tn": self.tn, "on": self.on, "oa": _round(self.oa, "0.001"), "ea": _round(self.ea, "0.001")}


def _round(value, quantum):
    if value is None:
        return None
    return float(Decimal(repr(float(value))).quantize(Decimal(quantum), rounding=ROUND_HALF_UP))


def percent(fraction):
    """Fraction to a percentage with one decimal, rounding half up."""
    if fraction is None:
        return None
    return float((Decimal(repr(float(fraction))) * 100).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _mean(sizes: List[int]) -> Optional[float]:
    if not sizes:
        return None
    return float(np.mean(sizes))


def _reduction(before, after) -> Optional[float]:
    if before is None or after is None or before == 0:
        return None
    return 1.0 - after / before


def partition_objects(baseline: AnalysisResult, enhanced: AnalysisResult, al=None) -> ObjectPartition:
    """Split heap objects into killed (baseline only), added (enhanced only) and
    retained (identical in both)."""
    if baseline.program_hash != enhanced.program_hash:
        raise ProgramMismatchError("baseline and enhanced results come from different programs")
    if al is not None and enhanced.mode == Mode.ENHANCED and enhanced.allocators != frozenset(al):
        raise ProgramMismatchError("enhanced result was computed with a different allocator list")
    before = set(baseline.heap_objects())
    after = set(enhanced.heap_objects())
    return ObjectPartition(frozenset(before - after), frozenset(after - before), frozenset(before & after))


def derive_maps(result: AnalysisResult) -> DerivedMaps:
    pbs: Dict[HeapObject, Set[str]] = {o: set() for o in result.heap_objects()}
    for value in result.pointer_values:
        for obj in result.pts.points_to(value):
            if obj in pbs:
                pbs[obj].add(value)
    as_: Dict[str, Set[str]] = {v: set() for v in result.pointer_values}
    for values in pbs.values():
        for p in values:
            as_[p].update(values)
    for p in as_:
        as_[p].discard(p)
    ar = {o: result.objects.get(o) for o in pbs}
    internal = {}
    if result.mode == Mode.ONE_CALLSITE:
        for o in pbs:
            if o.context is not None:
                home = clone_name(o.object_id.rsplit(":", 1)[0], o.context) + "."
                internal[o] = frozenset(v for v in pbs[o] if v.startswith(home))
    return DerivedMaps({o: frozenset(v) for o, v in pbs.items()},
                       {p: frozenset(v) for p, v in as_.items()}, ar, dict(result.value_origin), internal)


def compute_metrics(partition: ObjectPartition, baseline: DerivedMaps, enhanced: DerivedMaps) -> MetricsReport:
    killed, added, retained = partition.killed, partition.added, partition.retained
    thoc = (len(killed | retained), len(added | retained))

    k_mean = _mean([len(baseline.pbs.get(o, ())) for o in killed])
    a_mean = _mean([len(enhanced.pbs.get(o, ())) for o in added])
    pc2 = None
    prr2 = None
    if retained:
        ro_mean = _mean([len(baseline.pbs.get(o, ())) for o in retained])
        re_mean = _mean([len(enhanced.pbs.get(o, ())) for o in retained])
        pc2 = (ro_mean, re_mean)
        prr2 = _reduction(ro_mean, re_mean)

    # a clone's own temporaries are part of the split allocation, not aliases
    receivers: Dict[str, Set[str]] = {}
    for o in added | retained:
        p = enhanced.ar.get(o)
        if p is not None:
            receivers.setdefault(p, set()).update(enhanced.internal.get(o, ()))
    as_o = _mean([len(baseline.as_.get(enhanced.project(p), ())) for p in sorted(receivers)])
    as_e = _mean([len(enhanced.as_.get(p, frozenset()) - hidden) for p, hidden in sorted(receivers.items())])

    er = thoc[1] / thoc[0] if thoc[0] else None
    return MetricsReport(thoc, len(retained), (k_mean, a_mean), _reduction(k_mean, a_mean), pc2, prr2,
                         (as_o, as_e), _reduction(as_o, as_e), er)


def icall_metrics(baseline: Dict[str, FrozenSet[str]], enhanced: Dict[str, FrozenSet[str]]) -> IcallReport:
    sites = sorted(set(baseline) | set(enhanced))
    improved = [s for s in sites if len(enhanced.get(s, ())) < len(baseline.get(s, ()))]
    return IcallReport(len(sites), len(improved),
                       _mean([len(baseline[s]) for s in improved]),
                       _mean([len(enhanced.get(s, ())) for s in improved]))


def compare(baseline: AnalysisResult, enhanced: AnalysisResult, al=None) -> MetricsReport:
    partition = partition_objects(baseline, enhanced, al)
    return compute_metrics(partition, derive_maps(baseline), derive_maps(enhanced))
