import pytest

from ir import (ExternalClass, Function, Param, Program, Statement, StmtKind, ValueType, IRSyntaxError,
                parse_program, print_program, program_hash, validate)


def test_shell_wrappers_shape(load):
    program = load("shell_wrappers.ir")
    assert sorted(f.name for f in program.defined()) == ["array_create", "make_bare_word", "xmalloc"]
    assert program.seeds() == ["malloc"]
    assert program.functions["malloc"].external_class == ExternalClass.ALLOCATOR_SEED
    assert program.entry is None


def test_fixtures_are_well_formed(load):
    for name in ["shell_wrappers.ir", "lalloc.ir", "icall.ir", "wrapper_direct.ir", "two_wrappers.ir",
                 "wrapper_direct_mix.ir"]:
        assert validate(load(name)) == [], name


def test_site_ids_and_types(load):
    program = load("lalloc.ir")
    fn = program.functions["lalloc"]
    assert [s.site_id for s in fn.statements[:3]] == ["lalloc:0", "lalloc:1", "lalloc:2"]
    types = fn.value_types()
    assert types["limit"] == ValueType.SCALAR
    assert types["size"] == ValueType.SCALAR
    assert types["pool"] == ValueType.POINTER
    assert types["r"] == ValueType.POINTER
    assert fn.source_text.startswith("void *lalloc(size_t size")


def test_print_round_trip(load):
    for name in ["shell_wrappers.ir", "lalloc.ir", "icall.ir"]:
        program = load(name)
        text = print_program(program)
        again = parse_program(text)
        assert print_program(again) == text
        assert program_hash(again) == program_hash(program)


def test_empty_program_prints_empty():
    assert print_program(parse_program("")) == ""


def test_function_refs_and_void_calls(load):
    program = load("icall.ir")
    assert program.address_taken() == ["func1", "func2"]
    assert program.has_indirect_calls()
    main = program.functions["main"]
    icalls = [s for s in main.statements if s.kind == StmtKind.CALL and s.indirect]
    assert [s.callee for s in icalls] == ["t1", "t2"]
    assert all(s.target is None for s in icalls)


def test_syntax_error_position():
    text = "extern malloc kind=alloc_seed\nfunc f() {\n  p = frobnicate q\n}\n"
    with pytest.raises(IRSyntaxError) as info:
        parse_program(text)
    assert info.value.line == 3
    assert info.value.column == 3


@pytest.mark.parametrize("text", [
    "func f() {\n  p = call g()\n  ret p\n}\n",
    "func f() {\n  ret q\n}\n",
    "extern malloc kind=allocator\n",
    "func f() {\n  ret\n",
    "entry main\nfunc f() {\n  ret\n}\n",
])
def test_parse_rejects(text):
    with pytest.raises(IRSyntaxError):
        parse_program(text)


def test_duplicate_definition_fails_to_parse():
    text = "extern malloc kind=alloc_seed\nfunc f() {\n  p = call malloc()\n  p = null\n  ret p\n}\n"
    with pytest.raises(IRSyntaxError, match="duplicate definition"):
        parse_program(text)


def test_scalar_store_is_a_type_error():
    text = "func f(n:scalar, p:ptr) {\n  store n, p\n  ret p\n}\n"
    violations = validate(parse_program(text))
    assert [(v.site_id, v.rule) for v in violations] == [("f:0", "type-agreement")]


def test_arity_mismatch():
    text = "func g(a:ptr, b:ptr) {\n  ret a\n}\nfunc f(x:ptr) {\n  y = call g(x)\n  ret y\n}\n"
    violations = validate(parse_program(text))
    assert [v.rule for v in violations] == ["arity"]


def test_programmatic_violations():
    bad = Function("f", (Param("x"),), (
        Statement(StmtKind.COPY, "f:0", "y", ("missing",)),
        Statement(StmtKind.LOAD, "f:1", "z", ("null",)),
        Statement(StmtKind.CALL, "f:2", "w", (), callee="nowhere"),
        Statement(StmtKind.RETURN, "f:3", operands=("gone",)),
    ))
    empty = Function("g")
    twice = Function("k", (), (
        Statement(StmtKind.NULL, "k:0", "p"),
        Statement(StmtKind.NULL, "k:1", "p"),
        Statement(StmtKind.RETURN, "k:2", operands=("p",)),
    ))
    ext = Function("h", (Param("x"),), external_class=ExternalClass.PURE)
    program = Program({"f": bad, "g": empty, "h": ext, "k": twice}, entry="start")
    rules = [(v.function, v.rule) for v in validate(program)]
    assert rules == [
        ("f", "undefined-operand"),
        ("f", "null-operand"),
        ("f", "undefined-callee"),
        ("f", "return-operand"),
        ("g", "missing-body"),
        ("h", "external-body"),
        ("k", "single-assignment"),
        ("start", "undefined-entry"),
    ]


def test_hash_tracks_content(load):
    a = load("shell_wrappers.ir")
    b = load("two_wrappers.ir")
    assert program_hash(a) != program_hash(b)
    assert len(program_hash(a)) == 64
