from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

import networkx as nx

from ir import Function, Program, StmtKind, ValueType, value_key


@dataclass
class CallGraph:
    nodes: Tuple[str, ...] = ()
    # (caller, callsite site_id, callee)
    edges: Tuple[Tuple[str, str, str], ...] = ()
    indirect_targets: Dict[str, FrozenSet[str]] = field(default_factory=dict)

    def callees(self, name) -> Set[str]:
        return {callee for caller, _, callee in self.edges if caller == name}

    def callers(self, name) -> Set[str]:
        return {caller for caller, _, callee in self.edges if callee == name}

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.nodes)
        graph.add_edges_from((caller, callee) for caller, _, callee in self.edges)
        return graph


def call_compatible(fn: Function, arity: int, result: Optional[ValueType]) -> bool:
    """Arity and result-kind match between an indirect callsite and a candidate target."""
    if fn.is_external:
        return True
    if len(fn.params) != arity:
        return False
    if result is None:
        return True
    return fn.result_kind() == result


def build_call_graph(program: Program, pts=None) -> CallGraph:
    """Direct edges come from syntax. Indirect targets come from `pts` when given
    (anything with a `functions_pointed_by(value_key)` method), otherwise from
    arity-and-result matching over address-taken functions."""
    taken = program.address_taken()
    edges = []
    indirect: Dict[str, FrozenSet[str]] = {}
    for fn in program.defined():
        for stmt in fn.statements:
            if stmt.kind != StmtKind.CALL:
                continue
            if not stmt.indirect:
                edges.append((fn.name, stmt.site_id, stmt.callee))
                continue
            result = stmt.result_type if stmt.target is not None else None
            if pts is not None:
                candidates = pts.functions_pointed_by(value_key(fn.name, stmt.callee))
            else:
                candidates = taken
            targets = frozenset(
                name for name in candidates
                if name in program.functions
                and call_compatible(program.functions[name], len(stmt.operands), result))
            indirect[stmt.site_id] = targets
            edges.extend((fn.name, stmt.site_id, t) for t in sorted(targets))
    return CallGraph(tuple(sorted(program.functions)), tuple(edges), indirect)


def strongly_connected(graph: CallGraph) -> Dict[str, FrozenSet[str]]:
    """Map each function to the members of its SCC."""
    out = {}
    for component in nx.strongly_connected_components(graph.to_networkx()):
        members = frozenset(component)
        for name in members:
            out[name] = members
    return out


def is_recursive(graph: CallGraph, name: str, sccs=None) -> bool:
    sccs = sccs or strongly_connected(graph)
    if len(sccs.get(name, ())) > 1:
        return True
    return any(caller == name and callee == name for caller, _, callee in graph.edges)


def bottom_up_layers(graph: CallGraph, focus: Iterable[str]) -> List[List[str]]:
    """Group `focus` into layers such that every callee SCC lies in an earlier layer
    than its callers. Layers are computed on the whole graph, so ordering also holds
    through functions outside `focus`."""
    focus = set(focus)
    if not focus:
        return []
    condensed = nx.condensation(graph.to_networkx())
    members = condensed.graph["mapping"]
    depth: Dict[int, int] = {}
    for node in reversed(list(nx.topological_sort(condensed))):
        succ = [depth[s] for s in condensed.successors(node)]
        depth[node] = 1 + max(succ) if succ else 0
    by_layer: Dict[int, Dict[int, List[str]]] = {}
    for name in focus:
        comp = members[name]
        by_layer.setdefault(depth[comp], {}).setdefault(comp, []).append(name)
    layers = []
    for level in sorted(by_layer):
        groups = sorted((sorted(names) for names in by_layer[level].values()), key=lambda g: g[0])
        layers.append([name for group in groups for name in group])
    return layers


def bottom_up_order(graph: CallGraph, focus: Iterable[str]) -> List[str]:
    return [name for layer in bottom_up_layers(graph, focus) for name in layer]
