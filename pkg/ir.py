import re
import hashlib
from enum import Enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

NULL = "null"
FUNC_REF = "&"


class ValueType(Enum):
    POINTER = "ptr"
    SCALAR = "scalar"


class StmtKind(Enum):
    ADDR = "alloc"
    COPY = "copy"
    PHI = "phi"
    NULL = "null"
    STORE = "store"
    LOAD = "load"
    FIELD = "field"
    CALL = "call"
    RETURN = "ret"


class ExternalClass(Enum):
    DEFINED = "defined"
    PURE = "pure"
    SIDE_EFFECTING = "sideeffect"
    DEALLOCATOR = "dealloc"
    ALLOCATOR_SEED = "alloc_seed"


class IRSyntaxError(ValueError):
    def __init__(self, message, line=0, column=0):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Statement:
    """One IR statement.

    `operands` holds value names, `null`, or `&NAME` function constants. For Store
    it is (pointer, payload); for Call it is the argument list and `callee` is either
    a function name or, when `indirect` is set, the local value holding the target.
    """
    kind: StmtKind
    site_id: str
    target: Optional[str] = None
    operands: Tuple[str, ...] = ()
    callee: Optional[str] = None
    indirect: bool = False
    field: Optional[str] = None
    result_type: Optional[ValueType] = None


@dataclass(frozen=True)
class Param:
    name: str
    type: ValueType = ValueType.POINTER


@dataclass(frozen=True)
class Function:
    name: str
    params: Tuple[Param, ...] = ()
    statements: Tuple[Statement, ...] = ()
    source_text: Optional[str] = None
    external_class: ExternalClass = ExternalClass.DEFINED
    # set on callsite clones only
    origin: Optional[str] = None
    context: Optional[str] = None

    @property
    def is_external(self):
        return self.external_class != ExternalClass.DEFINED

    def value_types(self) -> Dict[str, ValueType]:
        types = {p.name: p.type for p in self.params}
        for stmt in self.statements:
            if stmt.target is not None:
                types.setdefault(stmt.target, stmt.result_type or ValueType.POINTER)
        return types

    def returns(self) -> List[Statement]:
        return [s for s in self.statements if s.kind == StmtKind.RETURN]

    def result_kind(self) -> Optional[ValueType]:
        """Type of the first valued return, None for void or external functions."""
        types = self.value_types()
        for stmt in self.returns():
            if not stmt.operands:
                continue
            operand = stmt.operands[0]
            if operand == NULL or is_function_ref(operand):
                return ValueType.POINTER
            return types.get(operand, ValueType.POINTER)
        return None


@dataclass
class Program:
    functions: Dict[str, Function] = field(default_factory=dict)
    entry: Optional[str] = None

    def defined(self) -> List[Function]:
        return [f for f in self.functions.values() if not f.is_external]

    def seeds(self) -> List[str]:
        return sorted(n for n, f in self.functions.items()
                      if f.external_class == ExternalClass.ALLOCATOR_SEED)

    def address_taken(self) -> List[str]:
        names = set()
        for fn in self.defined():
            for stmt in fn.statements:
                for op in stmt.operands:
                    if is_function_ref(op):
                        names.add(op[1:])
        return sorted(names)

    def has_indirect_calls(self):
        return any(s.kind == StmtKind.CALL and s.indirect
                   for fn in self.defined() for s in fn.statements)


@dataclass(frozen=True)
class Violation:
    function: str
    site_id: Optional[str]
    rule: str
    message: str

    def to_json(self):
        return {"function": self.function, "site_id": self.site_id,
                "rule": self.rule, "message": self.message}


def is_function_ref(operand):
    return operand.startswith(FUNC_REF)


def value_key(function, name):
    return f"{function}.{name}"


def site_index(site_id):
    return int(site_id.rsplit(":", 1)[1])


def program_hash(program: Program):
    return hashlib.sha256(print_program(program).encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# Parsing

_IDENT = r"[A-Za-z_][A-Za-z0-9_@]*"
_OPERAND = rf"&?{_IDENT}"
_KEYWORDS = {"null", "copy", "phi", "load", "field", "call", "icall", "store", "ret",
             "alloc", "func", "extern", "entry", "source"}

_RE_ENTRY = re.compile(rf"^entry\s+({_IDENT})$")
_RE_EXTERN = re.compile(rf"^extern\s+({_IDENT})\s+kind\s*=\s*(\w+)$")
_RE_FUNC = re.compile(rf"^func\s+({_IDENT})\s*\((.*)\)\s*\{{$")
_RE_PARAM = re.compile(rf"^({_IDENT})(?:\s*:\s*(ptr|scalar))?$")
_RE_DEF = re.compile(rf"^({_IDENT})(?:\s*:\s*(ptr|scalar))?\s*=\s*(.+)$")
_RE_CALL = re.compile(rf"^(call|icall)\s+({_IDENT})\s*\((.*)\)$")
_RE_STORE = re.compile(rf"^store\s+({_OPERAND})\s*,\s*({_OPERAND})$")
_RE_RET = re.compile(rf"^ret(?:\s+({_OPERAND}))?$")


@dataclass
class _RawStatement:
    stmt: Statement
    annotated: bool
    line: int
    column: int


@dataclass
class _RawFunction:
    name: str
    params: Tuple[Param, ...]
    body: List[_RawStatement]
    source_text: Optional[str]
    line: int


def _strip_comment(line):
    idx = line.find("#")
    return line if idx < 0 else line[:idx]


def _split_operands(text, lineno, column):
    text = text.strip()
    if not text:
        return ()
    parts = [p.strip() for p in text.split(",")]
    for part in parts:
        if not re.fullmatch(_OPERAND, part):
            raise IRSyntaxError(f"malformed operand '{part}'", lineno, column)
    return tuple(parts)


def _parse_params(text, lineno, column):
    params = []
    for part in [p.strip() for p in text.split(",")] if text.strip() else []:
        m = _RE_PARAM.match(part)
        if not m:
            raise IRSyntaxError(f"malformed parameter '{part}'", lineno, column)
        params.append(Param(m.group(1), ValueType(m.group(2) or "ptr")))
    return tuple(params)


def _parse_statement(text, fn_name, index, lineno, column):
    site = f"{fn_name}:{index}"
    m = _RE_STORE.match(text)
    if m:
        return Statement(StmtKind.STORE, site, operands=(m.group(1), m.group(2))), False
    m = _RE_RET.match(text)
    if m:
        operands = (m.group(1),) if m.group(1) else ()
        return Statement(StmtKind.RETURN, site, operands=operands), False
    m = _RE_CALL.match(text)
    if m:
        return _call(m, site, None, None, lineno, column), False
    m = _RE_DEF.match(text)
    if not m:
        raise IRSyntaxError(f"unrecognized statement '{text}'", lineno, column)
    target, annotation, rhs = m.group(1), m.group(2), m.group(3).strip()
    if target in _KEYWORDS:
        raise IRSyntaxError(f"'{target}' is a keyword", lineno, column)
    rtype = ValueType(annotation) if annotation else None
    m = _RE_CALL.match(rhs)
    if m:
        return _call(m, site, target, rtype, lineno, column), annotation is not None
    head, _, rest = rhs.partition(" ")
    rest = rest.strip()
    if head == "null" and not rest:
        return Statement(StmtKind.NULL, site, target=target, result_type=rtype), annotation is not None
    if head == "alloc" and not rest:
        return Statement(StmtKind.ADDR, site, target=target, result_type=rtype), annotation is not None
    if head == "copy":
        ops = _split_operands(rest, lineno, column)
        if len(ops) != 1:
            raise IRSyntaxError("copy takes exactly one operand", lineno, column)
        return Statement(StmtKind.COPY, site, target=target, operands=ops, result_type=rtype), annotation is not None
    if head == "phi":
        ops = _split_operands(rest, lineno, column)
        if not ops:
            raise IRSyntaxError("phi needs at least one operand", lineno, column)
        return Statement(StmtKind.PHI, site, target=target, operands=ops, result_type=rtype), annotation is not None
    if head == "load":
        ops = _split_operands(rest, lineno, column)
        if len(ops) != 1:
            raise IRSyntaxError("load takes exactly one operand", lineno, column)
        return Statement(StmtKind.LOAD, site, target=target, operands=ops, result_type=rtype), annotation is not None
    if head == "field":
        ops = _split_operands(rest, lineno, column)
        if len(ops) != 2 or not re.fullmatch(_IDENT, ops[1]):
            raise IRSyntaxError("field takes a pointer and a field name", lineno, column)
        return (Statement(StmtKind.FIELD, site, target=target, operands=(ops[0],), field=ops[1],
                          result_type=rtype), annotation is not None)
    raise IRSyntaxError(f"unrecognized statement '{text}'", lineno, column)


def _call(match, site, target, rtype, lineno, column):
    indirect = match.group(1) == "icall"
    args = _split_operands(match.group(3), lineno, column)
    return Statement(StmtKind.CALL, site, target=target, operands=args, callee=match.group(2),
                     indirect=indirect, result_type=rtype)


def parse_program(text: str) -> Program:
    """Parse IR text into a Program.

    Operands are resolved once the whole file has been read, so functions and
    values may be referenced before they are defined.
    """
    externs: Dict[str, Tuple[ExternalClass, int]] = {}
    raw_functions: Dict[str, _RawFunction] = {}
    order: List[str] = []
    entry = None
    lines = text.splitlines()
    current: Optional[_RawFunction] = None
    i = 0
    while i < len(lines):
        lineno = i + 1
        raw = lines[i]
        line = _strip_comment(raw).strip()
        column = len(raw) - len(raw.lstrip()) + 1
        i += 1
        if not line:
            continue
        if current is not None:
            if line == "}":
                current = None
                continue
            if line == "source <<<":
                chunk = []
                while i < len(lines) and lines[i].strip() != ">>>":
                    chunk.append(lines[i])
                    i += 1
                if i >= len(lines):
                    raise IRSyntaxError("unterminated source block", lineno, column)
                i += 1
                if current.source_text is not None:
                    raise IRSyntaxError(f"second source block in '{current.name}'", lineno, column)
                current.source_text = "\n".join(chunk)
                continue
            stmt, annotated = _parse_statement(line, current.name, len(current.body), lineno, column)
            current.body.append(_RawStatement(stmt, annotated, lineno, column))
            continue
        m = _RE_ENTRY.match(line)
        if m:
            if entry is not None:
                raise IRSyntaxError("duplicate entry declaration", lineno, column)
            entry = m.group(1)
            continue
        m = _RE_EXTERN.match(line)
        if m:
            name, kind = m.group(1), m.group(2)
            if kind == ExternalClass.DEFINED.value:
                raise IRSyntaxError("externs cannot be of kind 'defined'", lineno, column)
            try:
                cls = ExternalClass(kind)
            except ValueError:
                raise IRSyntaxError(f"unknown extern kind '{kind}'", lineno, column)
            if name in externs or name in raw_functions:
                raise IRSyntaxError(f"duplicate function '{name}'", lineno, column)
            externs[name] = (cls, lineno)
            order.append(name)
            continue
        m = _RE_FUNC.match(line)
        if m:
            name = m.group(1)
            if name in externs or name in raw_functions:
                raise IRSyntaxError(f"duplicate function '{name}'", lineno, column)
            current = _RawFunction(name, _parse_params(m.group(2), lineno, column), [], None, lineno)
            raw_functions[name] = current
            order.append(name)
            continue
        raise IRSyntaxError(f"unexpected '{line}'", lineno, column)
    if current is not None:
        raise IRSyntaxError(f"unterminated function '{current.name}'", current.line, 1)

    names = set(externs) | set(raw_functions)
    functions: Dict[str, Function] = {}
    for name in order:
        if name in externs:
            functions[name] = Function(name, external_class=externs[name][0])
        else:
            functions[name] = _resolve(raw_functions[name], names)
    program = Program(functions, entry)
    if entry is not None and entry not in names:
        raise IRSyntaxError(f"entry '{entry}' is not a function", 0, 0)
    return program


def _resolve(raw: _RawFunction, names) -> Function:
    defined: Dict[str, ValueType] = {}
    for p in raw.params:
        if p.name in defined:
            raise IRSyntaxError(f"duplicate definition of '{p.name}' in '{raw.name}'", raw.line, 1)
        defined[p.name] = p.type
    for rs in raw.body:
        target = rs.stmt.target
        if target is None:
            continue
        if target in defined:
            raise IRSyntaxError(f"duplicate definition of '{target}' in '{raw.name}'", rs.line, rs.column)
        defined[target] = rs.stmt.result_type or ValueType.POINTER

    def check(op, rs):
        if op == NULL:
            return
        if is_function_ref(op):
            if op[1:] not in names:
                raise IRSyntaxError(f"undefined function '{op[1:]}'", rs.line, rs.column)
            return
        if op not in defined:
            raise IRSyntaxError(f"undefined value '{op}'", rs.line, rs.column)

    for rs in raw.body:
        stmt = rs.stmt
        for op in stmt.operands:
            check(op, rs)
        if stmt.kind == StmtKind.CALL:
            if stmt.indirect:
                check(stmt.callee, rs)
            elif stmt.callee not in names:
                raise IRSyntaxError(f"undefined function '{stmt.callee}'", rs.line, rs.column)

    # copies inherit the type of their source unless annotated
    changed = True
    statements = [rs.stmt for rs in raw.body]
    annotated = [rs.annotated for rs in raw.body]
    while changed:
        changed = False
        for idx, stmt in enumerate(statements):
            if stmt.kind != StmtKind.COPY or annotated[idx]:
                continue
            src = stmt.operands[0]
            src_type = ValueType.POINTER if (src == NULL or is_function_ref(src)) else defined[src]
            if defined[stmt.target] != src_type:
                defined[stmt.target] = src_type
                changed = True
    resolved = []
    for stmt in statements:
        if stmt.target is not None:
            stmt = Statement(stmt.kind, stmt.site_id, stmt.target, stmt.operands, stmt.callee,
                             stmt.indirect, stmt.field, defined[stmt.target])
        resolved.append(stmt)
    return Function(raw.name, raw.params, tuple(resolved), raw.source_text)


# --------------------------------------------------------------------------
# Printing

def statement_text(stmt: Statement) -> str:
    lhs = ""
    if stmt.target is not None:
        lhs = stmt.target
        if stmt.result_type == ValueType.SCALAR:
            lhs += ":scalar"
        lhs += " = "
    if stmt.kind == StmtKind.ADDR:
        return f"{lhs}alloc"
    if stmt.kind == StmtKind.NULL:
        return f"{lhs}null"
    if stmt.kind in (StmtKind.COPY, StmtKind.PHI, StmtKind.LOAD):
        return f"{lhs}{stmt.kind.value} {', '.join(stmt.operands)}"
    if stmt.kind == StmtKind.FIELD:
        return f"{lhs}field {stmt.operands[0]}, {stmt.field}"
    if stmt.kind == StmtKind.STORE:
        return f"store {stmt.operands[0]}, {stmt.operands[1]}"
    if stmt.kind == StmtKind.RETURN:
        return f"ret {stmt.operands[0]}" if stmt.operands else "ret"
    verb = "icall" if stmt.indirect else "call"
    return f"{lhs}{verb} {stmt.callee}({', '.join(stmt.operands)})"


def print_function(fn: Function) -> str:
    if fn.is_external:
        return f"extern {fn.name} kind={fn.external_class.value}"
    params = ", ".join(f"{p.name}:{p.type.value}" for p in fn.params)
    lines = [f"func {fn.name}({params}) {{"]
    lines.extend(f"  {statement_text(s)}" for s in fn.statements)
    if fn.source_text is not None:
        lines.append("  source <<<")
        lines.extend(fn.source_text.split("\n"))
        lines.append(">>>")
    lines.append("}")
    return "\n".join(lines)


def print_program(program: Program) -> str:
    chunks = []
    if program.entry is not None:
        chunks.append(f"entry {program.entry}")
    chunks.extend(print_function(fn) for fn in program.functions.values())
    return "\n\n".join(chunks) + "\n" if chunks else ""


# --------------------------------------------------------------------------
# Validation

def _violations_for(fn: Function, program: Program) -> List[Violation]:
    out = []

    def report(site, rule, message):
        out.append(Violation(fn.name, site, rule, message))

    if fn.is_external:
        if fn.statements or fn.params:
            report(None, "external-body", f"external '{fn.name}' has a body")
        return out
    if not fn.statements:
        report(None, "missing-body", f"'{fn.name}' has no statements")

    types: Dict[str, ValueType] = {}
    for p in fn.params:
        if p.name in types:
            report(None, "single-assignment", f"'{p.name}' defined more than once")
        types[p.name] = p.type
    for stmt in fn.statements:
        if stmt.target is None:
            continue
        if stmt.target in types:
            report(stmt.site_id, "single-assignment", f"'{stmt.target}' defined more than once")
            continue
        types[stmt.target] = stmt.result_type or ValueType.POINTER

    def type_of(op):
        if op == NULL or is_function_ref(op):
            return ValueType.POINTER
        return types.get(op)

    def operand_ok(stmt, op, allow_null):
        if op == NULL:
            if not allow_null:
                report(stmt.site_id, "null-operand", f"null is not allowed in {stmt.kind.value}")
                return False
            return True
        if is_function_ref(op):
            if op[1:] not in program.functions:
                report(stmt.site_id, "undefined-callee", f"'{op[1:]}' is not a function")
                return False
            return True
        if op not in types:
            rule = "return-operand" if stmt.kind == StmtKind.RETURN else "undefined-operand"
            report(stmt.site_id, rule, f"'{op}' is not defined in '{fn.name}'")
            return False
        return True

    def expect_pointer(stmt, op, role):
        if type_of(op) == ValueType.SCALAR:
            report(stmt.site_id, "type-agreement", f"{role} '{op}' must be a pointer")

    for stmt in fn.statements:
        rtype = stmt.result_type or ValueType.POINTER
        if stmt.kind in (StmtKind.ADDR, StmtKind.NULL, StmtKind.FIELD) and rtype != ValueType.POINTER:
            report(stmt.site_id, "type-agreement", f"{stmt.kind.value} result must be a pointer")
        if stmt.kind == StmtKind.COPY:
            if operand_ok(stmt, stmt.operands[0], False) and type_of(stmt.operands[0]) != rtype:
                report(stmt.site_id, "type-agreement", "copy changes the value type")
        elif stmt.kind == StmtKind.PHI:
            for op in stmt.operands:
                if operand_ok(stmt, op, False) and type_of(op) != rtype:
                    report(stmt.site_id, "type-agreement", f"phi operand '{op}' has a different type")
        elif stmt.kind == StmtKind.STORE:
            ptr, payload = stmt.operands
            if operand_ok(stmt, ptr, False):
                expect_pointer(stmt, ptr, "store target")
            operand_ok(stmt, payload, True)
        elif stmt.kind in (StmtKind.LOAD, StmtKind.FIELD):
            if operand_ok(stmt, stmt.operands[0], False):
                expect_pointer(stmt, stmt.operands[0], f"{stmt.kind.value} base")
        elif stmt.kind == StmtKind.RETURN:
            if stmt.operands:
                operand_ok(stmt, stmt.operands[0], True)
        elif stmt.kind == StmtKind.CALL:
            for op in stmt.operands:
                operand_ok(stmt, op, False)
            if stmt.indirect:
                if operand_ok(stmt, stmt.callee, False):
                    expect_pointer(stmt, stmt.callee, "icall target")
                continue
            callee = program.functions.get(stmt.callee)
            if callee is None:
                report(stmt.site_id, "undefined-callee", f"'{stmt.callee}' is not a function")
                continue
            if callee.is_external:
                continue
            if len(callee.params) != len(stmt.operands):
                report(stmt.site_id, "arity",
                       f"'{stmt.callee}' takes {len(callee.params)} arguments, got {len(stmt.operands)}")
                continue
            for param, op in zip(callee.params, stmt.operands):
                if op in types and types[op] != param.type:
                    report(stmt.site_id, "type-agreement",
                           f"argument '{op}' does not match parameter '{param.name}'")
    return out


def validate(program: Program) -> List[Violation]:
    violations: List[Violation] = []
    if program.entry is not None and program.entry not in program.functions:
        violations.append(Violation(program.entry, None, "undefined-entry",
                                    f"entry '{program.entry}' is not a function"))
    for name in sorted(program.functions):
        violations.extend(_violations_for(program.functions[name], program))

    def order(v):
        return (v.function, -1 if v.site_id is None else site_index(v.site_id), v.rule, v.message)
    return sorted(violations, key=order)


def read_program(path) -> Program:
    with open(path) as f:
        return parse_program(f.read())


def replace_statements(fn: Function, statements: Sequence[Statement], **changes) -> Function:
    values = dict(name=fn.name, params=fn.params, statements=tuple(statements),
                  source_text=fn.source_text, external_class=fn.external_class,
                  origin=fn.origin, context=fn.context)
    values.update(changes)
    return Function(**values)
