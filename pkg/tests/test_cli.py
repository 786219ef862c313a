import json
import shutil

import httpx

from cli import EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_TRANSPORT, main, parse_config


def run(argv, http_client=None):
    return main(parse_config(argv), http_client)


def run_json(tmp_path, argv, name="report.json"):
    out = tmp_path / name
    assert run(argv + ["--out", str(out)]) == EXIT_OK
    return json.loads(out.read_text())


def failure(capsys):
    return json.loads(capsys.readouterr().err)


def test_missing_file_is_io_error(tmp_path, capsys):
    assert run(["detect", str(tmp_path / "absent.ir")]) == EXIT_IO
    assert failure(capsys)["exit_code"] == EXIT_IO


def test_parse_error_reports_position(tmp_path, capsys):
    bad = tmp_path / "bad.ir"
    bad.write_text("func main() {\n  x = bogus\n  ret\n}\n")
    assert run(["validate", str(bad)]) == EXIT_INVALID
    payload = failure(capsys)
    assert payload["error"] == "parse"
    assert "line" in payload and "column" in payload


def test_invalid_program_lists_violations(tmp_path, capsys):
    bad = tmp_path / "typed.ir"
    bad.write_text("func f(n:scalar, p:ptr) {\n  store n, p\n  ret p\n}\n")
    assert run(["detect", str(bad)]) == EXIT_INVALID
    payload = failure(capsys)
    assert payload["error"] == "validation"
    assert [v["rule"] for v in payload["violations"]] == ["type-agreement"]


def test_bad_configuration(fixture_path, capsys):
    assert run(["detect", fixture_path("shell_wrappers.ir"), "--jobs", "0"]) == EXIT_INVALID
    assert failure(capsys)["error"] == "config"
    assert run(["gen", "--functions", "2", "--depth", "3"]) == EXIT_INVALID
    assert failure(capsys)["error"] == "GenSpecError"


def test_remote_transport_failure(fixture_path, capsys):
    requests = []

    def unavailable(request):
        requests.append(request)
        return httpx.Response(503, json={"error": {"message": "unavailable"}})

    client = httpx.Client(transport=httpx.MockTransport(unavailable))
    argv = ["detect", fixture_path("lalloc.ir"), "--oracle", "remote", "--endpoint", "http://oracle.test/v1",
            "--api-key", "test", "--retries", "0"]
    assert run(argv, client) == EXIT_TRANSPORT
    assert failure(capsys)["error"] == "oracle-transport"
    assert len(requests) == 1


def test_validate(fixture_path, capsys):
    assert run(["validate", fixture_path("shell_wrappers.ir")]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["functions"] == 4
    assert report["violations"] == []


def test_detect_shell_wrappers(tmp_path, fixture_path):
    report = run_json(tmp_path, ["detect", fixture_path("shell_wrappers.ir")])
    assert report["num1"] == 1 and report["num2"] == 0
    assert [a["name"] for a in report["allocators"]] == ["malloc", "xmalloc"]
    assert set(report["timing"]) >= {"TT", "phases", "LT", "AT/Q"}


def test_detect_is_deterministic_without_timing(tmp_path, fixture_path):
    argv = ["detect", fixture_path("lalloc.ir"), "--oracle", "annotations=" + fixture_path("lalloc_annotations.json"),
            "--no-timing"]
    first = run_json(tmp_path, argv, "first.json")
    second = run_json(tmp_path, argv, "second.json")
    assert first == second
    assert "timing" not in first
    assert first["num2"] == 1


def test_trace_upstream(tmp_path, fixture_path):
    report = run_json(tmp_path, ["detect", fixture_path("two_wrappers.ir"), "--trace-upstream", "--no-timing"])
    assert report["upstream"] == ["make_buffer"]


def test_batch_totals(tmp_path, fixture_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    shutil.copy(fixture_path("shell_wrappers.ir"), corpus / "a.ir")
    shutil.copy(fixture_path("shell_wrappers.ir"), corpus / "b.ir")
    report = run_json(tmp_path, ["detect", str(corpus), "--no-timing"])
    assert len(report["programs"]) == 2
    assert report["totals"] == {"num1": 2, "num2": 0, "QN": 0, "IT": 0, "OT": 0}


def test_empty_directory_is_io_error(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run(["detect", str(empty)]) == EXIT_IO
    capsys.readouterr()


def test_analyze_modes(tmp_path, fixture_path):
    baseline = run_json(tmp_path, ["analyze", fixture_path("shell_wrappers.ir"), "--mode", "baseline", "--no-timing"])
    assert "allocators" not in baseline
    enhanced = run_json(tmp_path, ["analyze", fixture_path("shell_wrappers.ir"), "--no-timing"], "enhanced.json")
    assert [a["name"] for a in enhanced["allocators"]] == ["malloc", "xmalloc"]


def test_compare_shell_wrappers(tmp_path, fixture_path):
    report = run_json(tmp_path, ["compare", fixture_path("shell_wrappers.ir"), "--with-1ctx"])
    rows = {row["strategy"]: row for row in report["rows"]}
    assert [row["strategy"] for row in report["rows"]] == ["baseline", "heuristic", "enhanced", "1ctx"]
    assert rows["baseline"]["metrics"]["thoc"] == [1, 1]
    assert rows["enhanced"]["metrics"]["thoc"] == [1, 2]
    assert rows["enhanced"]["metrics"]["arr"] == 100.0
    assert rows["enhanced"]["num1"] == 1
    assert rows["heuristic"]["allocators"] == ["xmalloc"]
    assert rows["1ctx"]["metrics"]["thoc"] == [1, 2]
    assert rows["1ctx"]["metrics"]["arr"] == 100.0
    assert "num1" not in rows["1ctx"]


def test_icalls(tmp_path, fixture_path):
    report = run_json(tmp_path, ["icalls", fixture_path("icall.ir")])
    assert report["report"] == {"tn": 2, "on": 2, "oa": 2.0, "ea": 1.0}
    assert report["baseline"]["main:8"] == ["func1", "func2"]
    assert report["enhanced"] == {"main:10": ["func2"], "main:8": ["func1"]}


def test_gen_then_score(tmp_path):
    program = tmp_path / "chain.ir"
    assert run(["gen", "--seed", "3", "--functions", "3", "--depth", "3", "--break-at", "2",
                "--out", str(program)]) == EXIT_OK
    truth = tmp_path / "chain.truth.json"
    # FuncA inherits the error-path call of FuncB
    assert json.loads(truth.read_text())["annotations"] == {"FuncA": "ignorable", "FuncB": "ignorable"}

    detected = run_json(tmp_path, ["detect", str(program), "--oracle", f"annotations={truth}", "--no-timing"])
    assert (detected["num1"], detected["num2"]) == (3, 2)

    partial = tmp_path / "partial.json"
    partial.write_text(json.dumps({"FuncB": "ignorable"}))
    stopped = run_json(tmp_path, ["detect", str(program), "--oracle", f"annotations={partial}", "--no-timing"],
                       "partial_report.json")
    assert (stopped["num1"], stopped["num2"]) == (2, 1)

    scored = run_json(tmp_path, ["score", str(program), "--truth", str(truth), "--oracle", f"annotations={truth}"],
                      "score.json")
    assert (scored["TP"], scored["FP"], scored["FN"]) == (3, 0, 0)
    conservative = run_json(tmp_path, ["score", str(program), "--truth", str(truth)], "conservative.json")
    assert conservative["allocators"] == ["FuncC"]
    assert conservative["recall"] == 1 / 3


def test_gen_to_stdout(capsys):
    assert run(["gen", "--seed", "1", "--functions", "4"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["program"].startswith("entry main")
    assert len(report["labels"]) == 4


def test_interpret(tmp_path, fixture_path):
    report = run_json(tmp_path, ["interpret", fixture_path("shell_wrappers.ir")])
    assert ["array_create.r", "xmalloc.temp"] in report["alias_pairs"]
    assert len(report["points_to"]["make_bare_word.w"]) == 1
