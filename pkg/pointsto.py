"""Andersen-style inclusion-based points-to analysis.

Three modes share one solver: the context-insensitive baseline, the enhanced
analysis where known allocators are modeled as fresh-object sources at their
callsites, and a one-callsite-sensitive analysis obtained by cloning callees.
"""
import logging
from collections import deque
from enum import Enum
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple, Union

from ir import (NULL, ExternalClass, Function, Program, Statement, StmtKind, ValueType,
                is_function_ref, program_hash, replace_statements, site_index, value_key)
from callgraph import build_call_graph, call_compatible, is_recursive, strongly_connected


class Mode(Enum):
    BASELINE = "baseline"
    ENHANCED = "enhanced"
    ONE_CALLSITE = "1ctx"


class Origin(Enum):
    SEED_SITE = "SeedSite"
    MODELED_SITE = "ModeledSite"
    FUNCTION = "Function"


class UnknownAllocatorError(ValueError):
    pass


@dataclass(frozen=True)
class HeapObject:
    object_id: str
    origin: Origin = Origin.SEED_SITE
    context: Optional[str] = None
    field: Optional[str] = None

    def __lt__(self, other):
        return self.label() < other.label()

    @property
    def base(self) -> "HeapObject":
        return HeapObject(self.object_id, self.origin, self.context)

    def with_field(self, name) -> "HeapObject":
        # field-of-field flattens to the innermost base and the last field
        return HeapObject(self.object_id, self.origin, self.context, name)

    def label(self) -> str:
        if self.origin == Origin.FUNCTION:
            text = f"fn:{self.object_id}"
        elif self.context is not None:
            text = f"({self.context},{self.object_id})"
        else:
            prefix = "m:" if self.origin == Origin.MODELED_SITE else ""
            text = f"{prefix}{self.object_id}"
        return text if self.field is None else f"{text}.{self.field}"


def function_object(name) -> HeapObject:
    return HeapObject(name, Origin.FUNCTION)


class ConstraintKind(Enum):
    ADDR = "Addr"
    COPY = "Copy"
    STORE = "Store"
    LOAD = "Load"
    FIELD = "Field"


@dataclass(frozen=True)
class Constraint:
    """One inclusion rule.

    ADDR: obj in pts(dst). COPY: pts(src) in pts(dst). STORE: for o in pts(dst),
    pts(src) in pts(o). LOAD: for o in pts(src), pts(o) in pts(dst). FIELD: for o in
    pts(src), o.field in pts(dst).
    """
    kind: ConstraintKind
    dst: str
    src: Optional[str] = None
    obj: Optional[HeapObject] = None
    field: Optional[str] = None
    site_id: Optional[str] = None


@dataclass(frozen=True)
class Callable:
    """How a call to a function binds during solving."""
    name: str
    kind: str  # body | seed | modeled | opaque
    params: Tuple[str, ...] = ()
    ret: Optional[str] = None
    arity: Optional[int] = None
    result: Optional[ValueType] = None

    def compatible(self, arity, result) -> bool:
        if self.arity is None:
            return True
        if self.arity != arity:
            return False
        return result is None or self.result == result


@dataclass(frozen=True)
class IcallSite:
    site_id: str
    callee: str
    args: Tuple[Optional[str], ...]
    receiver: Optional[str]
    result: Optional[ValueType]
    # tag for objects created here (one-callsite clones)
    context: Optional[str] = None
    object_id: Optional[str] = None


@dataclass
class ConstraintSet:
    mode: Mode
    program_hash: str
    constraints: List[Constraint] = field(default_factory=list)
    icalls: List[IcallSite] = field(default_factory=list)
    callables: Dict[str, Callable] = field(default_factory=dict)
    # allocation object -> receiver value key
    objects: Dict[HeapObject, Optional[str]] = field(default_factory=dict)
    pointer_values: Set[str] = field(default_factory=set)
    value_origin: Dict[str, str] = field(default_factory=dict)
    allocators: Optional[FrozenSet[str]] = None


@dataclass
class PointsToMap:
    pts: Dict[str, FrozenSet[HeapObject]] = field(default_factory=dict)
    # (base object, field or None for the base cell) -> contents
    field_pts: Dict[Tuple[HeapObject, Optional[str]], FrozenSet[HeapObject]] = field(default_factory=dict)
    icall_targets: Dict[str, FrozenSet[str]] = field(default_factory=dict)
    # objects created while binding indirect calls -> receiver
    icall_objects: Dict[HeapObject, Optional[str]] = field(default_factory=dict)

    def points_to(self, key) -> FrozenSet[HeapObject]:
        return self.pts.get(key, frozenset())

    def contents(self, obj: HeapObject) -> FrozenSet[HeapObject]:
        return self.field_pts.get((obj.base, obj.field), frozenset())

    def functions_pointed_by(self, key) -> FrozenSet[str]:
        return frozenset(o.object_id for o in self.points_to(key) if o.origin == Origin.FUNCTION)


@dataclass
class AnalysisResult:
    mode: Mode
    program_hash: str
    pts: PointsToMap
    objects: Dict[HeapObject, Optional[str]]
    pointer_values: FrozenSet[str]
    value_origin: Dict[str, str]
    icall_targets: Dict[str, FrozenSet[str]]
    allocators: Optional[FrozenSet[str]] = None
    program: Optional[Program] = None

    def heap_objects(self) -> List[HeapObject]:
        return sorted(o for o in self.objects if o.origin != Origin.FUNCTION)

    def to_json(self):
        return {
            "mode": self.mode.value,
            "program_hash": self.program_hash,
            "pts": {k: sorted(o.label() for o in self.pts.points_to(k))
                    for k in sorted(self.pointer_values)},
            "objects": [{"id": o.object_id, "label": o.label(), "origin": o.origin.value,
                         "context": o.context, "receiver": self.objects[o]}
                        for o in self.heap_objects()],
            "icalls": {site: sorted(t) for site, t in sorted(self.icall_targets.items())},
            # cloned indirect callsites keep the context-insensitive target set
            "icall_policy": "context-insensitive",
        }


# --------------------------------------------------------------------------
# Constraint generation

RET = "$ret"


def _operand_key(fn: Function, op: str) -> Optional[str]:
    if op == NULL:
        return None
    if is_function_ref(op):
        return op
    return value_key(fn.name, op)


def _object_site(fn: Function, stmt: Statement) -> str:
    """Clones allocate objects named after the original statement."""
    if fn.origin is None:
        return stmt.site_id
    return f"{fn.origin}:{site_index(stmt.site_id)}"


def generate_constraints(program: Program, mode: Mode = Mode.BASELINE, al=None) -> ConstraintSet:
    if mode == Mode.ONE_CALLSITE:
        original_hash = program_hash(program)
        program = one_callsite_transform(program)
        cs = _generate(program, Mode.BASELINE, None)
        cs.mode = Mode.ONE_CALLSITE
        cs.program_hash = original_hash
        return cs
    if mode == Mode.ENHANCED:
        if al is None:
            raise ValueError("enhanced mode needs an allocator list")
        members = frozenset(al)
        unknown = sorted(n for n in members if n not in program.functions)
        if unknown:
            raise UnknownAllocatorError(f"allocator list names undefined functions: {', '.join(unknown)}")
        return _generate(program, Mode.ENHANCED, members)
    return _generate(program, Mode.BASELINE, None)


def _generate(program: Program, mode: Mode, al: Optional[FrozenSet[str]]) -> ConstraintSet:
    cs = ConstraintSet(mode, program_hash(program), allocators=al)
    modeled = set() if al is None else {n for n in al if not _is_seed(program, n)}

    for name, fn in program.functions.items():
        if fn.external_class == ExternalClass.ALLOCATOR_SEED:
            cs.callables[name] = Callable(name, "seed")
        elif name in modeled:
            cs.callables[name] = Callable(name, "modeled", arity=None if fn.is_external else len(fn.params),
                                          result=fn.result_kind())
        elif fn.is_external:
            cs.callables[name] = Callable(name, "opaque")
        else:
            cs.callables[name] = Callable(name, "body",
                                          tuple(value_key(name, p.name) for p in fn.params),
                                          value_key(name, RET), len(fn.params), fn.result_kind())

    for ref in program.address_taken():
        cs.constraints.append(Constraint(ConstraintKind.ADDR, f"&{ref}", obj=function_object(ref)))
        cs.objects[function_object(ref)] = None

    for fn in program.defined():
        if fn.name in modeled:
            continue
        types = fn.value_types()
        for name, vtype in types.items():
            if vtype == ValueType.POINTER:
                cs.pointer_values.add(value_key(fn.name, name))
        if fn.origin is not None:
            for name in types:
                cs.value_origin[value_key(fn.name, name)] = value_key(fn.origin, name)
        for stmt in fn.statements:
            _statement_constraints(cs, program, fn, stmt)
    return cs


def _is_seed(program, name):
    fn = program.functions.get(name)
    return fn is not None and fn.external_class == ExternalClass.ALLOCATOR_SEED


def _add_object(cs: ConstraintSet, obj: HeapObject, receiver: Optional[str], site_id):
    cs.objects[obj] = receiver
    if receiver is not None:
        cs.constraints.append(Constraint(ConstraintKind.ADDR, receiver, obj=obj, site_id=site_id))


def _statement_constraints(cs: ConstraintSet, program: Program, fn: Function, stmt: Statement):
    key = lambda op: _operand_key(fn, op)
    target = value_key(fn.name, stmt.target) if stmt.target is not None else None
    kind = stmt.kind
    if kind == StmtKind.ADDR:
        _add_object(cs, HeapObject(_object_site(fn, stmt), Origin.SEED_SITE, fn.context), target, stmt.site_id)
    elif kind in (StmtKind.COPY, StmtKind.PHI):
        for op in stmt.operands:
            src = key(op)
            if src is not None:
                cs.constraints.append(Constraint(ConstraintKind.COPY, target, src, site_id=stmt.site_id))
    elif kind == StmtKind.STORE:
        ptr, payload = key(stmt.operands[0]), key(stmt.operands[1])
        if payload is not None:
            cs.constraints.append(Constraint(ConstraintKind.STORE, ptr, payload, site_id=stmt.site_id))
    elif kind == StmtKind.LOAD:
        cs.constraints.append(Constraint(ConstraintKind.LOAD, target, key(stmt.operands[0]), site_id=stmt.site_id))
    elif kind == StmtKind.FIELD:
        cs.constraints.append(Constraint(ConstraintKind.FIELD, target, key(stmt.operands[0]),
                                         field=stmt.field, site_id=stmt.site_id))
    elif kind == StmtKind.RETURN:
        if stmt.operands and key(stmt.operands[0]) is not None:
            cs.constraints.append(Constraint(ConstraintKind.COPY, value_key(fn.name, RET), key(stmt.operands[0]),
                                             site_id=stmt.site_id))
    elif kind == StmtKind.CALL:
        args = tuple(key(op) for op in stmt.operands)
        if stmt.indirect:
            result = stmt.result_type if stmt.target is not None else None
            cs.icalls.append(IcallSite(stmt.site_id, value_key(fn.name, stmt.callee), args, target, result,
                                       fn.context, _object_site(fn, stmt)))
            return
        callee = cs.callables[stmt.callee]
        if callee.kind == "seed":
            _add_object(cs, HeapObject(_object_site(fn, stmt), Origin.SEED_SITE, fn.context), target, stmt.site_id)
        elif callee.kind == "modeled":
            _add_object(cs, HeapObject(_object_site(fn, stmt), Origin.MODELED_SITE, fn.context), target,
                        stmt.site_id)
        elif callee.kind == "body":
            for param, arg in zip(callee.params, args):
                if arg is not None:
                    cs.constraints.append(Constraint(ConstraintKind.COPY, param, arg, site_id=stmt.site_id))
            if target is not None:
                cs.constraints.append(Constraint(ConstraintKind.COPY, target, callee.ret, site_id=stmt.site_id))


# --------------------------------------------------------------------------
# Solving

Node = Union[str, HeapObject]


def _icall_objects(site: IcallSite, callee: Callable) -> Optional[HeapObject]:
    if callee.kind == "seed":
        return HeapObject(site.object_id, Origin.SEED_SITE, site.context)
    if callee.kind == "modeled":
        return HeapObject(site.object_id, Origin.MODELED_SITE, site.context)
    return None


class _WorklistSolver:
    def __init__(self, cs: ConstraintSet):
        self.cs = cs
        self.pts: Dict[Node, Set[HeapObject]] = {}
        self.pending: Dict[Node, Set[HeapObject]] = {}
        self.queue = deque()
        self.succ: Dict[Node, Set[Node]] = {}
        self.loads: Dict[str, List[str]] = {}
        self.stores: Dict[str, List[str]] = {}
        self.fields: Dict[str, List[Tuple[str, str]]] = {}
        self.icalls: Dict[str, List[IcallSite]] = {}
        self.bound: Set[Tuple[str, str]] = set()
        self.icall_targets: Dict[str, Set[str]] = {s.site_id: set() for s in cs.icalls}
        self.icall_objects: Dict[HeapObject, Optional[str]] = {}

    def add(self, node: Node, objs: Iterable[HeapObject]):
        current = self.pts.setdefault(node, set())
        new = set(objs) - current
        if not new:
            return
        current |= new
        if node not in self.pending:
            self.pending[node] = set()
            self.queue.append(node)
        self.pending[node] |= new

    def edge(self, src: Node, dst: Node):
        targets = self.succ.setdefault(src, set())
        if dst in targets:
            return
        targets.add(dst)
        self.add(dst, self.pts.get(src, ()))

    def bind(self, site: IcallSite, name: str):
        if (site.site_id, name) in self.bound:
            return
        callee = self.cs.callables.get(name)
        if callee is None or not callee.compatible(len(site.args), site.result):
            return
        self.bound.add((site.site_id, name))
        self.icall_targets[site.site_id].add(name)
        obj = _icall_objects(site, callee)
        if obj is not None:
            self.icall_objects.setdefault(obj, site.receiver)
            if site.receiver is not None:
                self.add(site.receiver, (obj,))
            return
        if callee.kind != "body":
            return
        for param, arg in zip(callee.params, site.args):
            if arg is not None:
                self.edge(arg, param)
        if site.receiver is not None:
            self.edge(callee.ret, site.receiver)

    def run(self) -> PointsToMap:
        for c in self.cs.constraints:
            if c.kind == ConstraintKind.ADDR:
                self.add(c.dst, (c.obj,))
            elif c.kind == ConstraintKind.COPY:
                self.succ.setdefault(c.src, set()).add(c.dst)
            elif c.kind == ConstraintKind.LOAD:
                self.loads.setdefault(c.src, []).append(c.dst)
            elif c.kind == ConstraintKind.STORE:
                self.stores.setdefault(c.dst, []).append(c.src)
            elif c.kind == ConstraintKind.FIELD:
                self.fields.setdefault(c.src, []).append((c.dst, c.field))
        for site in self.cs.icalls:
            self.icalls.setdefault(site.callee, []).append(site)

        while self.queue:
            node = self.queue.popleft()
            delta = self.pending.pop(node)
            for dst in list(self.succ.get(node, ())):
                self.add(dst, delta)
            if isinstance(node, HeapObject):
                continue
            data = [o for o in delta if o.origin != Origin.FUNCTION]
            for o in data:
                for dst in self.loads.get(node, ()):
                    self.edge(o, dst)
                for src in self.stores.get(node, ()):
                    self.edge(src, o)
                for dst, name in self.fields.get(node, ()):
                    self.add(dst, (o.with_field(name),))
            for site in self.icalls.get(node, ()):
                for o in delta:
                    if o.origin == Origin.FUNCTION:
                        self.bind(site, o.object_id)
        return _to_map(self.pts, self.icall_targets, self.icall_objects)


def _to_map(pts, icall_targets, icall_objects) -> PointsToMap:
    values = {}
    cells = {}
    for node, objs in pts.items():
        if not objs:
            continue
        if isinstance(node, HeapObject):
            cells[(node.base, node.field)] = frozenset(objs)
        else:
            values[node] = frozenset(objs)
    return PointsToMap(values, cells, {k: frozenset(v) for k, v in icall_targets.items()}, dict(icall_objects))


def solve(cs: ConstraintSet) -> PointsToMap:
    """Worklist solver with difference propagation and on-the-fly icall binding."""
    return _WorklistSolver(cs).run()


def solve_reference(cs: ConstraintSet) -> PointsToMap:
    """Apply every rule to every constraint until nothing changes."""
    pts: Dict[Node, Set[HeapObject]] = {}
    targets: Dict[str, Set[str]] = {s.site_id: set() for s in cs.icalls}
    objects: Dict[HeapObject, Optional[str]] = {}

    def get(node):
        return pts.setdefault(node, set())

    def include(dst, objs):
        before = len(get(dst))
        get(dst).update(objs)
        return len(get(dst)) != before

    changed = True
    while changed:
        changed = False
        for c in cs.constraints:
            if c.kind == ConstraintKind.ADDR:
                changed |= include(c.dst, {c.obj})
            elif c.kind == ConstraintKind.COPY:
                changed |= include(c.dst, set(get(c.src)))
            elif c.kind == ConstraintKind.LOAD:
                for o in list(get(c.src)):
                    if o.origin != Origin.FUNCTION:
                        changed |= include(c.dst, set(get(o)))
            elif c.kind == ConstraintKind.STORE:
                for o in list(get(c.dst)):
                    if o.origin != Origin.FUNCTION:
                        changed |= include(o, set(get(c.src)))
            elif c.kind == ConstraintKind.FIELD:
                data = [o.with_field(c.field) for o in get(c.src) if o.origin != Origin.FUNCTION]
                changed |= include(c.dst, data)
        for site in cs.icalls:
            for name in sorted(o.object_id for o in get(site.callee) if o.origin == Origin.FUNCTION):
                callee = cs.callables.get(name)
                if callee is None or not callee.compatible(len(site.args), site.result):
                    continue
                targets[site.site_id].add(name)
                obj = _icall_objects(site, callee)
                if obj is not None:
                    objects.setdefault(obj, site.receiver)
                    if site.receiver is not None:
                        changed |= include(site.receiver, {obj})
                    continue
                if callee.kind != "body":
                    continue
                for param, arg in zip(callee.params, site.args):
                    if arg is not None:
                        changed |= include(param, set(get(arg)))
                if site.receiver is not None:
                    changed |= include(site.receiver, set(get(callee.ret)))
    return _to_map(pts, targets, objects)


def check_closure(cs: ConstraintSet, pts: PointsToMap) -> List[Constraint]:
    """Constraints whose inclusion does not hold in `pts`."""
    def get(node):
        if isinstance(node, HeapObject):
            return pts.contents(node)
        return pts.points_to(node)

    broken = []
    for c in cs.constraints:
        if c.kind == ConstraintKind.ADDR:
            ok = c.obj in get(c.dst)
        elif c.kind == ConstraintKind.COPY:
            ok = get(c.src) <= get(c.dst)
        elif c.kind == ConstraintKind.LOAD:
            ok = all(get(o) <= get(c.dst) for o in get(c.src) if o.origin != Origin.FUNCTION)
        elif c.kind == ConstraintKind.STORE:
            ok = all(get(c.src) <= get(o) for o in get(c.dst) if o.origin != Origin.FUNCTION)
        else:
            ok = all(o.with_field(c.field) in get(c.dst) for o in get(c.src) if o.origin != Origin.FUNCTION)
        if not ok:
            broken.append(c)
    return broken


# --------------------------------------------------------------------------
# One-callsite cloning

def clone_name(function: str, site_id: str) -> str:
    return f"{function}@{site_id}"


def one_callsite_transform(program: Program) -> Program:
    """Clone every defined non-entry, non-recursive function once per direct callsite.

    Callsites (in originals and in clones) are retargeted to the clone for their
    original site. Originals survive when they are the entry, are address-taken,
    are recursive, or have no direct callsites.
    """
    graph = build_call_graph(program)
    sccs = strongly_connected(graph)
    taken = set(program.address_taken())
    callsites: Dict[str, List[str]] = {}
    for fn in program.defined():
        for stmt in fn.statements:
            if stmt.kind == StmtKind.CALL and not stmt.indirect:
                callsites.setdefault(stmt.callee, []).append(stmt.site_id)

    cloned = {}
    for fn in program.defined():
        if fn.name == program.entry or fn.name not in callsites:
            continue
        if is_recursive(graph, fn.name, sccs):
            continue
        cloned[fn.name] = callsites[fn.name]
    if not cloned:
        return program

    def retarget(fn: Function, origin: str) -> Function:
        statements = []
        for stmt in fn.statements:
            if stmt.kind == StmtKind.CALL and not stmt.indirect and stmt.callee in cloned:
                site = f"{origin}:{site_index(stmt.site_id)}"
                stmt = Statement(stmt.kind, stmt.site_id, stmt.target, stmt.operands,
                                 clone_name(stmt.callee, site), False, stmt.field, stmt.result_type)
            statements.append(stmt)
        return replace_statements(fn, statements)

    functions: Dict[str, Function] = {}
    for name, fn in program.functions.items():
        if fn.is_external:
            functions[name] = fn
            continue
        keep = name not in cloned or name in taken
        if keep:
            functions[name] = retarget(fn, name)
        for site in cloned.get(name, ()):
            cname = clone_name(name, site)
            body = [Statement(s.kind, f"{cname}:{i}", s.target, s.operands, s.callee, s.indirect,
                              s.field, s.result_type) for i, s in enumerate(fn.statements)]
            clone = replace_statements(fn, body, name=cname, origin=name, context=site)
            functions[cname] = retarget(clone, name)
    logging.debug("one-callsite transform cloned %d functions", len(cloned))
    return Program(functions, program.entry)


# --------------------------------------------------------------------------
# Indirect calls and the end-to-end entry point

def resolve_indirect_calls(pts: PointsToMap, program: Program) -> Dict[str, FrozenSet[str]]:
    out = {}
    for fn in program.defined():
        for stmt in fn.statements:
            if stmt.kind != StmtKind.CALL or not stmt.indirect:
                continue
            result = stmt.result_type if stmt.target is not None else None
            out[stmt.site_id] = frozenset(
                name for name in pts.functions_pointed_by(value_key(fn.name, stmt.callee))
                if name in program.functions
                and call_compatible(program.functions[name], len(stmt.operands), result))
    return out


def _bind_context_receivers(objects, pts: PointsToMap, program: Program, analyzed: Program):
    """A context-tagged object takes as receiver the value its context callsite binds,
    the way a modeled site does, when that value holds the object."""
    for obj in list(objects):
        if obj.context is None:
            continue
        caller = obj.context.rsplit(":", 1)[0]
        if caller not in analyzed.functions or caller not in program.functions:
            continue
        stmt = program.functions[caller].statements[site_index(obj.context)]
        if stmt.target is None:
            continue
        key = value_key(caller, stmt.target)
        if obj in pts.points_to(key):
            objects[obj] = key


def analyze(program: Program, mode: Mode = Mode.BASELINE, al=None) -> AnalysisResult:
    analyzed = one_callsite_transform(program) if mode == Mode.ONE_CALLSITE else program
    if mode == Mode.ONE_CALLSITE:
        cs = _generate(analyzed, Mode.BASELINE, None)
        cs.mode, cs.program_hash = mode, program_hash(program)
    else:
        cs = generate_constraints(program, mode, al)
    pts = solve(cs)
    objects = dict(cs.objects)
    for obj, receiver in pts.icall_objects.items():
        objects.setdefault(obj, receiver)
    targets = resolve_indirect_calls(pts, analyzed)
    if mode == Mode.ONE_CALLSITE:
        _bind_context_receivers(objects, pts, program, analyzed)
        # clone icall sites fold back onto their original site
        folded: Dict[str, Set[str]] = {}
        for site, names in targets.items():
            fn = analyzed.functions[site.rsplit(":", 1)[0]]
            origin = fn.origin or fn.name
            folded.setdefault(f"{origin}:{site_index(site)}", set()).update(names)
        targets = {k: frozenset(v) for k, v in folded.items()}
    return AnalysisResult(mode, cs.program_hash, pts, objects, frozenset(cs.pointer_values),
                          dict(cs.value_origin), targets, cs.allocators, analyzed)
