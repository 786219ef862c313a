"""Synthetic benchmark programs with ground-truth labels, and a concrete
interpreter whose observations serve as a soundness oracle for the analyses."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple, Union

import numpy as np

from ir import NULL, ExternalClass, Program, StmtKind, is_function_ref, parse_program, value_key
from pointsto import AnalysisResult, HeapObject, Mode, Origin, clone_name

S_CAF = "S-CAF"
C_CAF = "C-CAF"
NON_ALLOCATOR = "non-allocator"

PRELUDE = [
    "extern malloc kind=alloc_seed",
    "extern free kind=dealloc",
    "extern log_error kind=sideeffect",
    "extern get_size kind=pure",
]


class GenSpecError(ValueError):
    pass


class InterpretError(RuntimeError):
    pass


class StepBudgetExceeded(InterpretError):
    pass


@dataclass
class GenSpec:
    seed: int = field(default=0, metadata={"help": "Random seed; equal seeds give identical programs."})
    functions: int = field(default=8, metadata={"help": "Number of generated functions besides main and handlers."})
    wrapper_chain_depth: int = field(default=0, metadata={"help": "Length of the FuncA -> FuncB -> ... -> malloc chain."})
    side_effect_rate: float = field(default=0.0, metadata={"help": "Share of extra functions that are C-CAFs."})
    error_path_rate: float = field(default=0.0, metadata={"help": "Share of extra functions whose side effects sit on error paths."})
    icall_rate: float = field(default=0.0, metadata={"help": "Share of users that dispatch through a function pointer."})
    executable_subset: bool = field(default=False, metadata={"help": "Emit only constructs the interpreter can run."})
    wrapper_rate: float = field(default=0.0, metadata={"help": "Share of extra functions that are plain allocator wrappers."})
    break_at: Optional[int] = field(default=None, metadata={"help": "Chain level (1 = bottom) whose side effect only the oracle can clear."})

    def check(self):
        if self.functions < 0 or self.wrapper_chain_depth < 0:
            raise GenSpecError("counts must be non-negative")
        if self.wrapper_chain_depth > self.functions:
            raise GenSpecError(f"chain depth {self.wrapper_chain_depth} exceeds function count {self.functions}")
        rates = (self.side_effect_rate, self.error_path_rate, self.icall_rate, self.wrapper_rate)
        if any(r < 0 or r > 1 for r in rates):
            raise GenSpecError("rates must lie in [0, 1]")
        if self.side_effect_rate + self.error_path_rate + self.wrapper_rate > 1:
            raise GenSpecError("side-effect, error-path and wrapper rates must sum to at most 1")
        if self.break_at is not None and not 1 <= self.break_at <= self.wrapper_chain_depth:
            raise GenSpecError(f"break_at must lie in 1..{self.wrapper_chain_depth}")
        if self.executable_subset and self.icall_rate > 0:
            raise GenSpecError("the executable subset has no indirect calls")


@dataclass
class GroundTruth:
    scaf_labels: Dict[str, str] = field(default_factory=dict)
    # error-path knowledge: function -> ignorable | not_ignorable
    annotations: Dict[str, str] = field(default_factory=dict)

    def to_json(self):
        return {"labels": dict(sorted(self.scaf_labels.items())),
                "annotations": dict(sorted(self.annotations.items()))}


def chain_name(index):
    return f"Func{chr(ord('A') + index)}" if index < 26 else f"Func{index}"


def _wrapper(name, callee, error_path, phi, executable):
    body = [f"func {name}(n:scalar) {{", f"  p = call {callee}(n)"]
    if error_path:
        body.append("  call log_error(n)")
        if not executable:
            body.append("  ret null")
    if phi and not executable:
        body += ["  z = null", "  q = phi p, z", "  ret q"]
    else:
        body.append("  ret p")
    if error_path:
        body += ["  source <<<",
                 f"void *{name}(size_t n) {{",
                 f"    void *p = {callee}(n);",
                 "    if (p == NULL) {",
                 "        log_error(n);",
                 "        return NULL;",
                 "    }",
                 "    return p;",
                 "}",
                 ">>>"]
    body.append("}")
    return body


def _complex_allocator(name, callee):
    return [f"func {name}(out:ptr, val:ptr, n:scalar) {{",
            f"  p = call {callee}(n)",
            "  store out, val",
            "  ret p",
            "  source <<<",
            f"void *{name}(void **out, void *val, size_t n) {{",
            f"    void *p = {callee}(n);",
            "    *out = val;",
            "    return p;",
            "}",
            ">>>",
            "}"]


def _user(name, callee, handler):
    body = [f"func {name}(n:scalar) {{", f"  u = call {callee}(n)", "  h = field u, next", "  store h, u"]
    if handler is not None:
        body += ["  c = field u, handler", f"  store c, &{handler}", "  fp = load c", "  icall fp(u)"]
    body += ["  ret", "}"]
    return body


def generate(spec: GenSpec) -> Tuple[Program, GroundTruth]:
    """Build a labeled program for `spec`.

    A wrapper chain FuncA -> ... -> malloc is laid out first; the remaining
    function slots become C-CAFs, error-path wrappers, plain wrappers or users
    according to the rates. Every allocator-like function is called from main.
    Wrappers above an error-path link inherit its side effect, so their
    annotation is ignorable too.
    """
    spec.check()
    rng = np.random.RandomState(spec.seed)
    truth = GroundTruth()
    blocks: List[List[str]] = []
    pool = ["malloc"]
    scafs: List[str] = []
    complex_allocators: List[str] = []
    users: List[str] = []
    handlers: List[str] = []
    # wrappers whose side effects reach their callers
    guarded: Set[str] = set()

    depth = spec.wrapper_chain_depth
    callee = "malloc"
    for level in range(1, depth + 1):
        name = chain_name(depth - level)
        error_path = spec.break_at == level
        blocks.append(_wrapper(name, callee, error_path, False, spec.executable_subset))
        truth.scaf_labels[name] = S_CAF
        if error_path or callee in guarded:
            truth.annotations[name] = "ignorable"
            guarded.add(name)
        pool.append(name)
        callee = name
    if depth:
        scafs.append(chain_name(0))

    for index in range(spec.functions - depth):
        roll = rng.rand()
        target = pool[rng.randint(len(pool))]
        if roll < spec.side_effect_rate:
            name = f"Complex{index}"
            blocks.append(_complex_allocator(name, target))
            truth.scaf_labels[name] = C_CAF
            truth.annotations[name] = "not_ignorable"
            complex_allocators.append(name)
        elif roll < spec.side_effect_rate + spec.error_path_rate + spec.wrapper_rate:
            error_path = roll < spec.side_effect_rate + spec.error_path_rate
            name = f"{'Guarded' if error_path else 'Wrap'}{index}"
            phi = not spec.executable_subset and rng.rand() < 0.5
            blocks.append(_wrapper(name, target, error_path, phi, spec.executable_subset))
            truth.scaf_labels[name] = S_CAF
            if error_path or target in guarded:
                truth.annotations[name] = "ignorable"
                guarded.add(name)
            pool.append(name)
            scafs.append(name)
        else:
            name = f"User{index}"
            handler = None
            if rng.rand() < spec.icall_rate:
                if not handlers:
                    handlers = ["Handler0", "Handler1"]
                handler = handlers[rng.randint(len(handlers))]
            blocks.append(_user(name, target, handler))
            truth.scaf_labels[name] = NON_ALLOCATOR
            users.append(name)

    for name in handlers:
        blocks.append([f"func {name}(x:ptr) {{", "  h = field x, data", "  ret", "}"])
        truth.scaf_labels[name] = NON_ALLOCATOR

    main = ["func main() {", "  n:scalar = call get_size()"]
    for i, name in enumerate(scafs):
        main += [f"  a{i} = call {name}(n)", f"  b{i} = call {name}(n)"]
    for i, name in enumerate(complex_allocators):
        main += [f"  slot{i} = call malloc(n)", f"  val{i} = call malloc(n)",
                 f"  c{i} = call {name}(slot{i}, val{i}, n)"]
    for name in users:
        main.append(f"  call {name}(n)")
    main += ["  ret", "}"]
    blocks.append(main)

    text = "\n\n".join(["entry main\n" + "\n".join(PRELUDE)] + ["\n".join(b) for b in blocks]) + "\n"
    logging.debug("generated %d functions for seed %d", len(blocks), spec.seed)
    return parse_program(text), truth


def generate_random(seed: int, statements: int = 60, executable: bool = False) -> Program:
    """Random well-formed program with at most `statements` statements.

    In executable mode no phi, null-base dereference, or indirect call is emitted,
    and helpers only call lower-numbered helpers, so execution terminates.
    """
    rng = np.random.RandomState(seed)
    helpers = [(f"h{i}", int(rng.randint(1, 3))) for i in range(int(rng.randint(1, 4)))]
    per_function = max(3, statements // (len(helpers) + 1))
    blocks = []
    for index, (name, arity) in enumerate(helpers):
        params = [f"p{k}" for k in range(arity)]
        callable_helpers = helpers[:index] if executable else helpers
        body = _random_body(rng, params, per_function, callable_helpers, executable)
        header = f"func {name}({', '.join(f'{p}:ptr' for p in params)}) {{"
        blocks.append([header] + body + ["}"])
    body = _random_body(rng, [], per_function, helpers, executable)
    blocks.append(["func main() {"] + body + ["}"])
    text = "entry main\nextern malloc kind=alloc_seed\n\n" + "\n\n".join("\n".join(b) for b in blocks) + "\n"
    return parse_program(text)


def _random_body(rng, params, budget, helpers, executable):
    values = list(params)
    safe = set(params)
    lines = []
    counter = [0]

    def fresh():
        counter[0] += 1
        return f"v{counter[0]}"

    def pick(pool):
        pool = sorted(pool)
        return pool[rng.randint(len(pool))]

    def alloc():
        v = fresh()
        lines.append(f"  {v} = call malloc()")
        values.append(v)
        safe.add(v)

    if not values:
        alloc()
    kinds = ["alloc", "copy", "store", "load", "field", "call"]
    if not executable:
        kinds += ["phi", "null", "icall"]
    while len(lines) < budget - 1:
        kind = kinds[rng.randint(len(kinds))]
        bases = safe if executable else set(values)
        if kind == "alloc":
            alloc()
        elif kind == "copy":
            src = pick(values)
            if not executable and helpers and rng.rand() < 0.2:
                src = f"&{helpers[rng.randint(len(helpers))][0]}"
            v = fresh()
            lines.append(f"  {v} = copy {src}")
            values.append(v)
            if src in safe:
                safe.add(v)
        elif kind == "phi":
            ops = [pick(values) for _ in range(rng.randint(2, 4))]
            v = fresh()
            lines.append(f"  {v} = phi {', '.join(ops)}")
            values.append(v)
        elif kind == "null":
            v = fresh()
            lines.append(f"  {v} = null")
            values.append(v)
        elif kind == "store":
            payload = pick(values) if rng.rand() < 0.85 else NULL
            lines.append(f"  store {pick(bases)}, {payload}")
        elif kind == "load":
            v = fresh()
            lines.append(f"  {v} = load {pick(bases)}")
            values.append(v)
        elif kind == "field":
            base = pick(bases)
            v = fresh()
            lines.append(f"  {v} = field {base}, f{rng.randint(2)}")
            values.append(v)
            if base in safe:
                safe.add(v)
        elif kind == "call" and helpers:
            name, arity = helpers[rng.randint(len(helpers))]
            args = [pick(bases) for _ in range(arity)]
            v = fresh()
            lines.append(f"  {v} = call {name}({', '.join(args)})")
            values.append(v)
            safe.add(v)
        elif kind == "icall" and helpers and len(lines) < budget - 5:
            name, arity = helpers[rng.randint(len(helpers))]
            base = pick(bases)
            cell, fp, v = fresh(), fresh(), fresh()
            args = [pick(values) for _ in range(arity)]
            lines += [f"  {cell} = field {base}, fn", f"  store {cell}, &{name}",
                      f"  {fp} = load {cell}", f"  {v} = icall {fp}({', '.join(args)})"]
            values += [cell, fp, v]
    lines.append(f"  ret {pick(safe if executable else values)}")
    return lines


# --------------------------------------------------------------------------
# Interpreter

Frames = Tuple[Tuple[str, str], ...]


@dataclass(frozen=True)
class ConcreteObject:
    site: str
    serial: int
    # (callsite, callee) of every active call when the object was allocated
    frames: Frames = ()

    def label(self):
        return f"{self.site}#{self.serial}"


@dataclass(frozen=True)
class Cell:
    obj: ConcreteObject
    field: Optional[str] = None

    def label(self):
        return self.obj.label() if self.field is None else f"{self.obj.label()}.{self.field}"


@dataclass(frozen=True)
class FunctionRef:
    name: str


Concrete = Union[None, ConcreteObject, Cell, FunctionRef]


@dataclass(frozen=True)
class Observation:
    value: str
    frames: Frames
    held: Union[ConcreteObject, Cell]


@dataclass
class Facts:
    observations: List[Observation] = field(default_factory=list)

    def points_to(self) -> Dict[str, Set[str]]:
        out: Dict[str, Set[str]] = {}
        for obs in self.observations:
            out.setdefault(obs.value, set()).add(obs.held.label())
        return out

    def alias_pairs(self) -> Set[Tuple[str, str]]:
        holders: Dict[str, Set[str]] = {}
        for obs in self.observations:
            holders.setdefault(obs.held.label(), set()).add(obs.value)
        pairs = set()
        for values in holders.values():
            ordered = sorted(values)
            for i, p in enumerate(ordered):
                for q in ordered[i + 1:]:
                    pairs.add((p, q))
        return pairs

    def to_json(self):
        return {"points_to": {k: sorted(v) for k, v in sorted(self.points_to().items())},
                "alias_pairs": [list(p) for p in sorted(self.alias_pairs())]}


class _Interpreter:
    def __init__(self, program: Program, step_budget: int):
        self.program = program
        self.step_budget = step_budget
        self.steps = 0
        self.serial = 0
        self.memory: Dict[Cell, Concrete] = {}
        self.facts = Facts()

    def observe(self, fn_name, name, value, frames):
        if isinstance(value, (ConcreteObject, Cell)):
            self.facts.observations.append(Observation(value_key(fn_name, name), frames, value))

    def cell(self, value, where) -> Cell:
        if isinstance(value, ConcreteObject):
            return Cell(value)
        if isinstance(value, Cell):
            return value
        raise InterpretError(f"dereference of a non-object at {where}")

    def run(self, fn_name, args, frames: Frames) -> Concrete:
        fn = self.program.functions[fn_name]
        env: Dict[str, Concrete] = {}
        for param, arg in zip(fn.params, args):
            env[param.name] = arg
            self.observe(fn_name, param.name, arg, frames)

        def operand(op):
            if op == NULL:
                return None
            if is_function_ref(op):
                return FunctionRef(op[1:])
            return env.get(op)

        for stmt in fn.statements:
            self.steps += 1
            if self.steps > self.step_budget:
                raise StepBudgetExceeded(f"step budget of {self.step_budget} exhausted")
            kind = stmt.kind
            result: Concrete = None
            if kind == StmtKind.PHI:
                raise InterpretError(f"phi at {stmt.site_id} is outside the executable subset")
            if kind == StmtKind.RETURN:
                return operand(stmt.operands[0]) if stmt.operands else None
            if kind == StmtKind.ADDR:
                result = self.allocate(stmt.site_id, frames)
            elif kind == StmtKind.COPY:
                result = operand(stmt.operands[0])
            elif kind == StmtKind.STORE:
                self.memory[self.cell(operand(stmt.operands[0]), stmt.site_id)] = operand(stmt.operands[1])
            elif kind == StmtKind.LOAD:
                result = self.memory.get(self.cell(operand(stmt.operands[0]), stmt.site_id))
            elif kind == StmtKind.FIELD:
                base = self.cell(operand(stmt.operands[0]), stmt.site_id)
                result = Cell(base.obj, stmt.field)
            elif kind == StmtKind.CALL:
                if stmt.indirect:
                    raise InterpretError(f"indirect call at {stmt.site_id} is outside the executable subset")
                result = self.call(stmt, [operand(op) for op in stmt.operands], frames)
            if stmt.target is not None:
                env[stmt.target] = result
                self.observe(fn_name, stmt.target, result, frames)
        return None

    def allocate(self, site, frames):
        self.serial += 1
        return ConcreteObject(site, self.serial, frames)

    def call(self, stmt, args, frames):
        callee = self.program.functions[stmt.callee]
        if callee.external_class == ExternalClass.ALLOCATOR_SEED:
            return self.allocate(stmt.site_id, frames)
        if callee.is_external:
            return None
        return self.run(callee.name, args, frames + ((stmt.site_id, callee.name),))


def interpret(program: Program, entry: Optional[str] = None, step_budget: int = 10000) -> Facts:
    """Execute the program along its single path and record every pointer value.

    Without an entry, the declared entry runs; failing that, every function with
    no callers runs in name order. Pointer parameters of the entry start as null.
    """
    interp = _Interpreter(program, step_budget)
    if entry is None and program.entry is not None:
        entry = program.entry
    if entry is not None:
        roots = [entry]
    else:
        called = {s.callee for fn in program.defined() for s in fn.statements
                  if s.kind == StmtKind.CALL and not s.indirect}
        roots = sorted(fn.name for fn in program.defined() if fn.name not in called)
    for name in roots:
        if name not in program.functions or program.functions[name].is_external:
            raise InterpretError(f"'{name}' is not a defined function")
        fn = program.functions[name]
        interp.run(name, [None] * len(fn.params), ())
    return interp.facts


# --------------------------------------------------------------------------
# Static coverage of observed facts

class _StaticView:
    def __init__(self, result: AnalysisResult):
        self.result = result
        self.mode = result.mode
        program = result.program
        self.functions = set(program.functions) if program is not None else set()
        self.modeled = set()
        if result.mode == Mode.ENHANCED and program is not None:
            self.modeled = {n for n in result.allocators or ()
                            if program.functions[n].external_class != ExternalClass.ALLOCATOR_SEED}

    def value(self, obs: Observation) -> Optional[str]:
        fn_name, name = obs.value.rsplit(".", 1)
        if self.mode == Mode.ENHANCED:
            if fn_name in self.modeled or any(callee in self.modeled for _, callee in obs.frames):
                return None
        if self.mode == Mode.ONE_CALLSITE and obs.frames:
            clone = clone_name(fn_name, obs.frames[-1][0])
            if clone in self.functions:
                return value_key(clone, name)
        return obs.value

    def obj(self, held) -> HeapObject:
        concrete = held.obj if isinstance(held, Cell) else held
        static = HeapObject(concrete.site, Origin.SEED_SITE)
        if self.mode == Mode.ENHANCED:
            for site, callee in concrete.frames:
                if callee in self.modeled:
                    static = HeapObject(site, Origin.MODELED_SITE)
                    break
        elif self.mode == Mode.ONE_CALLSITE and concrete.frames:
            allocator_fn = concrete.frames[-1][1]
            context = concrete.frames[-1][0]
            if clone_name(allocator_fn, context) in self.functions:
                static = HeapObject(concrete.site, Origin.SEED_SITE, context)
        if isinstance(held, Cell) and held.field is not None:
            static = static.with_field(held.field)
        return static


def uncovered_facts(facts: Facts, result: AnalysisResult) -> List[str]:
    """Observed points-to and alias facts that `result` does not cover."""
    view = _StaticView(result)
    pts = result.pts
    missing = []
    holders: Dict[str, Set[str]] = {}
    for obs in facts.observations:
        key = view.value(obs)
        if key is None:
            continue
        static = view.obj(obs.held)
        if static not in pts.points_to(key):
            missing.append(f"{key} -> {static.label()} (observed {obs.held.label()})")
        holders.setdefault(obs.held.label(), set()).add(key)
    for label, keys in sorted(holders.items()):
        ordered = sorted(keys)
        for i, p in enumerate(ordered):
            for q in ordered[i + 1:]:
                if not pts.points_to(p) & pts.points_to(q):
                    missing.append(f"alias {p} ~ {q} (both held {label})")
    return sorted(set(missing))


def score(al, truth: GroundTruth):
    """Confusion counts of detected allocators against the generator's labels."""
    detected = set(al)
    tp = fp = tn = fn = 0
    for name, label in truth.scaf_labels.items():
        if label == S_CAF:
            if name in detected:
                tp += 1
            else:
                fn += 1
        elif name in detected:
            fp += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return {"total": len(truth.scaf_labels), "TP": tp, "FP": fp, "TN": tn, "FN": fn,
            "precision": precision, "recall": recall}
