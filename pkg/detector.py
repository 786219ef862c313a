"""Detection of side-effect-free custom allocation functions.

Starting from the system allocators, the detector repeatedly collects functions
that call a known allocator, checks them bottom-up along the call graph with
backward and forward value-flow tracking, computes their side effects, and asks
an ignorability oracle when side effects remain. Accepted functions join the
allocator list until an iteration adds nothing.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

from ir import (NULL, ExternalClass, Function, Program, Statement, StmtKind, ValueType,
                is_function_ref, site_index, statement_text, print_function)
from callgraph import CallGraph, build_call_graph, bottom_up_layers, is_recursive, strongly_connected
from oracle import IgnorabilityOracle, SideEffectQuery, Verdict
from pointsto import Mode, generate_constraints, solve


class Provenance(Enum):
    SEED = "Seed"
    HEURISTIC = "Heuristic"
    ORACLE_ASSISTED = "OracleAssisted"


@dataclass
class AllocatorList:
    members: Set[str] = field(default_factory=set)
    provenance: Dict[str, Provenance] = field(default_factory=dict)

    @classmethod
    def from_program(cls, program: Program) -> "AllocatorList":
        al = cls()
        for name in program.seeds():
            al.add(name, Provenance.SEED)
        return al

    def add(self, name, provenance: Provenance):
        if name in self.members:
            return
        self.members.add(name)
        self.provenance[name] = provenance

    def __contains__(self, name):
        return name in self.members

    def __iter__(self):
        return iter(sorted(self.members))

    def __len__(self):
        return len(self.members)

    def copy(self) -> "AllocatorList":
        return AllocatorList(set(self.members), dict(self.provenance))

    @property
    def seeds(self) -> List[str]:
        return sorted(n for n, p in self.provenance.items() if p == Provenance.SEED)

    @property
    def detected(self) -> List[str]:
        return sorted(n for n, p in self.provenance.items() if p != Provenance.SEED)

    @property
    def num1(self):
        return len(self.detected)

    @property
    def num2(self):
        return sum(1 for p in self.provenance.values() if p == Provenance.ORACLE_ASSISTED)

    def to_json(self):
        return [{"name": n, "provenance": self.provenance[n].value} for n in sorted(self.members)]


@dataclass
class TrackState:
    fw: Dict[str, bool] = field(default_factory=dict)
    bt: Dict[str, bool] = field(default_factory=dict)


@dataclass
class SideEffectMap:
    per_function: Dict[str, FrozenSet[str]] = field(default_factory=dict)

    def __getitem__(self, name) -> FrozenSet[str]:
        return self.per_function.get(name, frozenset())


@dataclass
class Decision:
    function: str
    accepted: bool
    provenance: Optional[Provenance] = None
    reason: Optional[str] = None
    flags: Tuple[str, ...] = ()
    verdict: Optional[Verdict] = None
    side_effects: Tuple[str, ...] = ()
    iteration: int = 0

    def to_json(self):
        out = {
            "function": self.function,
            "decision": "accept" if self.accepted else "reject",
            "provenance": self.provenance.value if self.provenance else None,
            "reason": self.reason,
            "flags": list(self.flags),
            "side_effects": list(self.side_effects),
            "iteration": self.iteration,
        }
        if self.verdict is not None:
            out["verdict"] = self.verdict.to_json()
        return out


@dataclass
class IterationRecord:
    index: int
    added: List[str]
    al_size: int

    def to_json(self):
        return {"index": self.index, "added": self.added, "al_size": self.al_size}


# --------------------------------------------------------------------------
# Step 1: callsites

def _allocator_call(stmt: Statement, al, graph: Optional[CallGraph], excluded=frozenset()) -> bool:
    if stmt.kind != StmtKind.CALL:
        return False
    if not stmt.indirect:
        return stmt.callee in al and stmt.callee not in excluded
    if graph is None:
        return False
    targets = graph.indirect_targets.get(stmt.site_id, frozenset())
    return bool(targets) and all(t in al and t not in excluded for t in targets)


def collect_callsites(program: Program, al, graph: CallGraph, visited: Iterable[str] = ()):
    """Callsites of known allocators and the functions enclosing them.

    An indirect callsite counts only when every resolved target is an allocator.
    Enclosing functions already visited or already allocators are left out.
    """
    visited = set(visited)
    callsites = []
    functions = set()
    for fn in program.defined():
        for stmt in fn.statements:
            if _allocator_call(stmt, al, graph):
                callsites.append(stmt.site_id)
                if fn.name not in visited and fn.name not in al:
                    functions.add(fn.name)
    return callsites, functions


# --------------------------------------------------------------------------
# Step 2: value-flow tracking

def _allocation_receivers(function: Function, al, graph, excluded) -> List[str]:
    out = []
    for stmt in function.statements:
        if stmt.target is None:
            continue
        if stmt.kind == StmtKind.ADDR or _allocator_call(stmt, al, graph, excluded):
            out.append(stmt.target)
    return out


def backward_track(function: Function, al, graph: Optional[CallGraph] = None, excluded=frozenset()) -> TrackState:
    """BT(v): every definition chain feeding v ends in an allocator result or NULL."""
    receivers = set(_allocation_receivers(function, al, graph, excluded))
    bt = {name: True for name in function.value_types()}
    for p in function.params:
        bt[p.name] = False
    poisoned: Set[str] = set()
    for stmt in function.statements:
        if stmt.kind == StmtKind.STORE:
            poisoned.update(stmt.operands)
        elif stmt.kind == StmtKind.FIELD:
            poisoned.add(stmt.operands[0])
        elif stmt.kind == StmtKind.CALL:
            poisoned.update(stmt.operands)
            if stmt.indirect:
                poisoned.add(stmt.callee)
        if stmt.target is None:
            continue
        if stmt.kind in (StmtKind.LOAD, StmtKind.FIELD):
            bt[stmt.target] = False
        elif stmt.kind == StmtKind.CALL and stmt.target not in receivers:
            bt[stmt.target] = False
    for name in poisoned:
        if name in bt:
            bt[name] = False

    changed = True
    while changed:
        changed = False
        for stmt in function.statements:
            if stmt.kind not in (StmtKind.COPY, StmtKind.PHI) or not bt.get(stmt.target):
                continue
            ok = all(op == NULL or (not is_function_ref(op) and bt.get(op, False)) for op in stmt.operands)
            if not ok:
                bt[stmt.target] = False
                changed = True
    return TrackState(bt=bt)


def _uses(function: Function) -> Dict[str, List[Statement]]:
    uses: Dict[str, List[Statement]] = {name: [] for name in function.value_types()}
    for stmt in function.statements:
        operands = list(stmt.operands)
        if stmt.kind == StmtKind.CALL and stmt.indirect:
            operands.append(stmt.callee)
        for op in operands:
            if op in uses:
                uses[op].append(stmt)
    return uses


def _used_values(function: Function) -> Set[str]:
    return {name for name, stmts in _uses(function).items() if stmts}


def forward_track(function: Function, al, graph: Optional[CallGraph] = None, excluded=frozenset()) -> TrackState:
    """FW(v): v is used at least once and every use, through copies and phis, is a return."""
    uses = _uses(function)
    fw = {name: bool(stmt_list) for name, stmt_list in uses.items()}
    for name, stmt_list in uses.items():
        if any(s.kind not in (StmtKind.RETURN, StmtKind.COPY, StmtKind.PHI) for s in stmt_list):
            fw[name] = False
    changed = True
    while changed:
        changed = False
        for name, stmt_list in uses.items():
            if not fw[name]:
                continue
            if any(s.kind in (StmtKind.COPY, StmtKind.PHI) and not fw[s.target] for s in stmt_list):
                fw[name] = False
                changed = True
    return TrackState(fw=fw)


# --------------------------------------------------------------------------
# Side effects

def _call_contributes(stmt: Statement, program: Program, graph: CallGraph, si) -> bool:
    if stmt.indirect:
        targets = graph.indirect_targets.get(stmt.site_id, frozenset()) if graph else frozenset()
    else:
        targets = (stmt.callee,)
    for name in targets:
        callee = program.functions.get(name)
        if callee is None:
            continue
        if callee.external_class in (ExternalClass.DEALLOCATOR, ExternalClass.SIDE_EFFECTING):
            return True
        if callee.external_class == ExternalClass.DEFINED and si.get(name):
            return True
    return False


def compute_side_effects(program: Program, graph: CallGraph) -> SideEffectMap:
    """Least fixpoint of the side-effect sets.

    A statement is a side effect when it stores non-null pointer data, or calls a
    deallocator, a side-effecting external, or a function that has side effects.
    Seed allocators and pure externals contribute nothing, while a detected
    allocator passes its own side effects on to its callers.
    """
    si: Dict[str, Set[str]] = {fn.name: set() for fn in program.defined()}
    changed = True
    while changed:
        changed = False
        for fn in program.defined():
            types = fn.value_types()
            for stmt in fn.statements:
                if stmt.site_id in si[fn.name]:
                    continue
                hit = False
                if stmt.kind == StmtKind.STORE:
                    payload = stmt.operands[1]
                    hit = payload != NULL and (is_function_ref(payload) or types.get(payload) == ValueType.POINTER)
                elif stmt.kind == StmtKind.CALL:
                    hit = _call_contributes(stmt, program, graph, si)
                if hit:
                    si[fn.name].add(stmt.site_id)
                    changed = True
    return SideEffectMap({name: frozenset(sites) for name, sites in si.items()})


# --------------------------------------------------------------------------
# Per-function decision

def build_query(function: Function, sites: Iterable[str]) -> SideEffectQuery:
    by_site = {s.site_id: s for s in function.statements}
    ordered = sorted(sites, key=site_index)
    flagged = tuple((site, statement_text(by_site[site])) for site in ordered)
    return SideEffectQuery(function.name, flagged, function.source_text, print_function(function))


def identify_allocator(function: Function, al, si: SideEffectMap, oracle: Optional[IgnorabilityOracle],
                       graph: Optional[CallGraph] = None, excluded=frozenset()) -> Decision:
    """Accept or reject one candidate.

    `oracle=None` disables consultation, so any remaining side effect rejects.
    """
    name = function.name
    returns = function.returns()
    if not returns:
        return Decision(name, False, reason="no-return")
    receivers = _allocation_receivers(function, al, graph, excluded)
    if not receivers:
        return Decision(name, False, reason="no-allocator-call")

    bt = backward_track(function, al, graph, excluded).bt
    for stmt in returns:
        if not stmt.operands:
            return Decision(name, False, reason="backward-track", flags=("void-return",))
        op = stmt.operands[0]
        if op != NULL and not bt.get(op, False):
            return Decision(name, False, reason="backward-track")

    fw = forward_track(function, al, graph, excluded).fw
    used = _used_values(function)
    dead = tuple(sorted(r for r in receivers if r not in used))
    if dead:
        return Decision(name, False, reason="forward-track", flags=("dead-receiver",))
    if not all(fw[r] for r in receivers):
        return Decision(name, False, reason="forward-track")

    effects = tuple(sorted(si[name], key=site_index))
    if not effects:
        return Decision(name, True, Provenance.HEURISTIC)
    if oracle is None:
        return Decision(name, False, reason="side-effects", side_effects=effects)
    verdict = oracle.classify(build_query(function, effects))
    if verdict.ignorable:
        return Decision(name, True, Provenance.ORACLE_ASSISTED, flags=verdict.flags, verdict=verdict,
                        side_effects=effects)
    return Decision(name, False, reason="oracle-not-ignorable", flags=verdict.flags, verdict=verdict,
                    side_effects=effects)


# --------------------------------------------------------------------------
# Step 3: the fixpoint loop

@dataclass
class OracleCounters:
    queries: int = 0
    consultations: int = 0
    input_tokens: int = 0
    output_tokens: int = 0
    latency: float = 0.0

    def add(self, verdict: Verdict):
        self.consultations += 1
        self.queries += verdict.queries
        self.input_tokens += verdict.input_tokens
        self.output_tokens += verdict.output_tokens
        self.latency += verdict.latency

    def to_json(self):
        return {"QN": self.queries, "IT": self.input_tokens, "OT": self.output_tokens,
                "consultations": self.consultations}


def refined_call_graph(program: Program) -> CallGraph:
    """Syntactic call graph, with indirect targets narrowed by a baseline points-to
    solution when the program has indirect calls."""
    if not program.has_indirect_calls():
        return build_call_graph(program)
    pts = solve(generate_constraints(program, Mode.BASELINE))
    return build_call_graph(program, pts)


class ScafDetector:
    def __init__(self, program: Program, oracle: Optional[IgnorabilityOracle] = None, jobs: int = 1,
                 graph: Optional[CallGraph] = None):
        self.program = program
        self.oracle = oracle
        self.jobs = max(1, jobs)
        self.graph = graph if graph is not None else refined_call_graph(program)
        self.sccs = strongly_connected(self.graph)
        self.al = AllocatorList.from_program(program)
        self.decisions: Dict[str, Decision] = {}
        self.history: List[Decision] = []
        self.iterations: List[IterationRecord] = []
        self.counters = OracleCounters()
        self.elapsed = 0.0
        self._snapshots: Dict[str, FrozenSet[str]] = {}

    def _excluded(self, name) -> FrozenSet[str]:
        if is_recursive(self.graph, name, self.sccs):
            return self.sccs.get(name, frozenset({name}))
        return frozenset()

    def _allocator_callees(self, name) -> FrozenSet[str]:
        return frozenset(c for c in self.graph.callees(name) if c in self.al)

    def _visited(self) -> Set[str]:
        # re-analyze a function whenever its set of allocator callees has grown
        return {name for name, snap in self._snapshots.items() if snap == self._allocator_callees(name)}

    def _evaluate(self, name, si, al_snapshot):
        fn = self.program.functions[name]
        return identify_allocator(fn, al_snapshot, si, self.oracle, self.graph, self._excluded(name))

    def run(self) -> AllocatorList:
        start = time.perf_counter()
        limit = len(self.program.defined()) + 1
        si = compute_side_effects(self.program, self.graph)
        index = 0
        while True:
            index += 1
            if index > limit:
                raise RuntimeError(f"detection did not converge within {limit} iterations")
            _, candidates = collect_callsites(self.program, self.al, self.graph, self._visited())
            added = []
            for layer in bottom_up_layers(self.graph, candidates):
                snapshot = self.al.copy()
                for name in layer:
                    self._snapshots[name] = self._allocator_callees(name)
                if self.jobs > 1 and len(layer) > 1:
                    with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                        results = list(pool.map(lambda n: self._evaluate(n, si, snapshot), layer))
                else:
                    results = [self._evaluate(n, si, snapshot) for n in layer]
                for decision in results:
                    decision.iteration = index
                    self.decisions[decision.function] = decision
                    self.history.append(decision)
                    if decision.verdict is not None:
                        self.counters.add(decision.verdict)
                    if decision.accepted:
                        self.al.add(decision.function, decision.provenance)
                        added.append(decision.function)
            self.iterations.append(IterationRecord(index, sorted(added), len(self.al)))
            logging.info("iteration %d: %d candidates, added %s", index, len(candidates), sorted(added) or "nothing")
            if not added:
                break
        self.elapsed = time.perf_counter() - start
        return self.al

    def effective(self) -> List[str]:
        """Detected allocators called from code that survives enhancement."""
        out = set()
        for caller, _, callee in self.graph.edges:
            if callee in self.al and callee not in self.al.seeds and caller not in self.al:
                out.add(callee)
        return sorted(out)

    def report(self):
        return {
            "allocators": self.al.to_json(),
            "num1": self.al.num1,
            "num2": self.al.num2,
            "iterations": [r.to_json() for r in self.iterations],
            "per_function_decisions": [self.decisions[n].to_json() for n in sorted(self.decisions)],
            "effective": self.effective(),
            "oracle_counters": self.counters.to_json(),
        }


def detect_scafs(program: Program, oracle: Optional[IgnorabilityOracle] = None, jobs: int = 1) -> AllocatorList:
    return ScafDetector(program, oracle, jobs).run()


def trace_upstream(program: Program, al, roots: Iterable[str], graph: Optional[CallGraph] = None) -> List[str]:
    """Callers above `roots` that pass both tracking checks when the roots (and
    everything found so far) are taken as allocators. Side effects are ignored."""
    graph = graph if graph is not None else refined_call_graph(program)
    assumed = set(al) | set(roots)
    found: Set[str] = set()
    frontier = set(roots)
    while frontier:
        callers = set()
        for name in frontier:
            callers |= graph.callers(name)
        frontier = set()
        for name in sorted(callers - assumed - found):
            fn = program.functions[name]
            decision = identify_allocator(fn, assumed, SideEffectMap(), None, graph)
            if decision.accepted:
                found.add(name)
                frontier.add(name)
        assumed |= found
    return sorted(found)
